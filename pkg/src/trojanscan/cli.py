"""Command-line entry point: gen-data, train, infect, inspect, evaluate, patch.

Exit codes: 0 clean or success, 1 runtime failure, 2 usage error,
3 infected verdict, 4 unreadable model/pack file.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import detector as Det
from . import experiments as E
from . import judge as J
from . import model as M
from . import plotting

logger = logging.getLogger("trojanscan")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_INFECTED, EXIT_FORMAT = 0, 1, 2, 3, 4
MODE_NAMES = {"tabor": "tabor", "neural-cleanse": "neural_cleanse_baseline"}
ARCHITECTURES = {
    "desk": M.desk_architecture,
    "6conv": M.six_conv_architecture,
    "10conv": M.ten_conv_architecture,
}


class CommandError(Exception):
    """Failure that should end the command with a diagnostic and exit code 1."""


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _names(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _trigger(text: str) -> dict:
    """``shape:pos:size:target[:offset]`` for a second planted trigger."""
    parts = text.split(":")
    if len(parts) not in (4, 5):
        raise argparse.ArgumentTypeError("expected shape:pos:size:target[:offset]")
    try:
        out = {"shape": parts[0], "pos": parts[1], "size": int(parts[2]), "target": int(parts[3]),
               "offset": int(parts[4]) if len(parts) == 5 else 0}
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc
    return out


# ---------------------------------------------------------------- parser


def _train_flags(p, epochs: int = 10):
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--lr", type=float, default=3e-3, help="Adam learning rate")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=7)


def _detector_flags(p):
    p.add_argument("--mode", choices=sorted(MODE_NAMES), default="tabor")
    p.add_argument("--epochs", type=int, default=None, help="solver epochs per class")
    p.add_argument("--lr", type=float, default=None, help="solver learning rate")
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lambdas", type=_floats, default=None, help="six comma-separated weights")
    p.add_argument("--baseline-lambda", type=float, default=None)
    p.add_argument("--full-scale", action="store_true",
                   help="use the full-scale solver settings instead of the desk profile")
    p.add_argument("--threshold", type=float, default=2.0, help="MAD anomaly-index threshold")
    p.add_argument("--seed", type=int, default=7)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trojanscan", description=__doc__.splitlines()[0])
    parser.add_argument("--config", type=Path, help="INI file; a [command] section supplies flag defaults")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic or ingested dataset pack")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--noise", type=float, default=0.04)
    p.add_argument("--from-dir", type=Path, help="ingest <dir>/<class>/*.png instead of generating")
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=7)

    p = sub.add_parser("train", help="train a clean model on a pack")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--arch", choices=sorted(ARCHITECTURES), default="desk")
    p.add_argument("--width", type=int, default=8, help="filters per conv layer")
    _train_flags(p)

    p = sub.add_parser("infect", help="BadNet-poison a pack and train an infected model")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--manifest", type=Path, help="ground-truth trigger manifest (default: <out>.triggers.json)")
    p.add_argument("--shape", choices=D.SHAPES, default="square")
    p.add_argument("--pos", default="br", choices=list(D.POSITIONS) + list(D.POSITION_NAMES))
    p.add_argument("--size", type=int, default=3)
    p.add_argument("--offset", type=int, default=0)
    p.add_argument("--target", type=int, default=0)
    p.add_argument("--color", type=_floats, default=(1.0, 1.0, 1.0), help="comma-separated channel values")
    p.add_argument("--second-trigger", type=_trigger, action="append", default=[],
                   metavar="SHAPE:POS:SIZE:TARGET[:OFFSET]")
    p.add_argument("--rate", type=float, default=0.1, help="poisoned copies per trigger, as a share of train")
    p.add_argument("--min-success", type=float, default=0.8)
    p.add_argument("--arch", choices=sorted(ARCHITECTURES), default="desk")
    p.add_argument("--width", type=int, default=8)
    _train_flags(p)

    p = sub.add_parser("inspect", help="scan every class for a backdoor trigger")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--manifest", type=Path, help="ground truth; adds fidelity and correctness to the report")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--no-figures", action="store_true")
    _detector_flags(p)

    p = sub.add_parser("evaluate", help="fidelity and correctness of a report, or a seeded grid")
    p.add_argument("--report", type=Path)
    p.add_argument("--manifest", type=Path)
    p.add_argument("--grid", action="store_true", help="run the size x corner grid instead")
    p.add_argument("--out", type=Path, help="summary CSV (grid: defaults to grid.csv in --out-dir)")
    p.add_argument("--out-dir", type=Path, default=Path("."))
    p.add_argument("--sizes", type=_ints, default=list(E.GRID_SIZES))
    p.add_argument("--positions", type=_names, default=list(D.POSITIONS))
    p.add_argument("--shapes", type=_names, default=["square"])
    p.add_argument("--modes", type=_names, default=["tabor", "neural-cleanse"])
    p.add_argument("--scope", choices=["all", "target"], default="all")
    p.add_argument("--offset", type=int, default=E.GRID_OFFSET)
    p.add_argument("--target", type=int, default=0)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--threshold", type=float, default=2.0)

    p = sub.add_parser("patch", help="unlearn a backdoor with a restored trigger")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--report", type=Path, help="use the restored trigger of a flagged class")
    src.add_argument("--trigger", type=Path, help="explicit candidate archive (.tbrc)")
    p.add_argument("--class", dest="class_id", type=int, help="which flagged class (default: lowest A)")
    p.add_argument("--manifest", type=Path, help="ground truth, to report the planted trigger's success too")
    p.add_argument("--fraction", type=float, default=0.2)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=7)
    return parser


def _config_defaults(parser, sub, path: Path, command: str) -> None:
    """Apply ``[command]`` (and ``[DEFAULT]``) keys of an INI file as flag defaults."""
    cp = configparser.ConfigParser()
    try:
        with path.open() as fh:
            cp.read_file(fh)
    except (OSError, configparser.Error) as exc:
        parser.error(f"cannot read config {path}: {exc}")
    section = cp[command] if cp.has_section(command) else cp.defaults()
    actions = {a.dest: a for a in sub._actions}
    values = {}
    for key, raw in section.items():
        dest = key.replace("-", "_")
        if dest not in actions or dest in ("help", "config"):
            parser.error(f"config {path}: unknown key {key!r} for {command}")
        action = actions[dest]
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            values[dest] = cp.BOOLEANS.get(raw.lower()) if raw.lower() in cp.BOOLEANS else parser.error(
                f"config {path}: {key} must be a boolean")
        elif isinstance(action, argparse._AppendAction):
            values[dest] = [action.type(v) if action.type else v for v in raw.split(";") if v.strip()]
        else:
            values[dest] = raw  # argparse runs string defaults through the flag's type
    sub.set_defaults(**values)


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is not None:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        _config_defaults(parser, sub, args.config, args.command)
        args = parser.parse_args(argv)
    args._parser = parser
    return args


# ---------------------------------------------------------------- helpers


def _usage(args, message: str):
    args._parser.error(message)


def _load_pack(path: Path) -> D.LabeledDataset:
    return D.load_pack(path)


def _load_model(path: Path) -> M.Network:
    return M.load(path)


def _emit(line: str) -> None:
    print(line, flush=True)


def _run_config(args, drop=("command", "config", "verbose", "_parser")) -> dict:
    out = {}
    for k, v in sorted(vars(args).items()):
        if k in drop:
            continue
        out[k] = str(v) if isinstance(v, Path) else v
    return out


def _detector_config(args) -> Det.DetectorConfig:
    overrides = {"mode": MODE_NAMES[args.mode], "seed": args.seed}
    for flag, key in (("epochs", "epochs"), ("lr", "learning_rate"), ("batch_size", "batch_size"),
                      ("lambdas", "lambdas"), ("baseline_lambda", "baseline_lambda")):
        if getattr(args, flag) is not None:
            overrides[key] = getattr(args, flag)
    try:
        return Det.DetectorConfig(**overrides) if args.full_scale else Det.DetectorConfig.desk(**overrides)
    except ValueError as exc:
        _usage(args, str(exc))


def _model_id_of(path: Path) -> str:
    return M.model_id(path.read_bytes())


def _attack_rates(net, data, specs) -> list[float]:
    return [D.attack_success(lambda x: M.classify(net, x), data, s) for s in specs]


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    if args.from_dir is not None:
        if not args.from_dir.is_dir():
            _usage(args, f"--from-dir {args.from_dir} is not a directory")
        data = D.ingest_directory(args.from_dir, args.seed, args.test_fraction)
    else:
        if args.classes < 1 or args.per_class < 1:
            _usage(args, "--classes and --per-class must be positive")
        try:
            data = D.generate_synthetic(args.classes, args.per_class, args.size, args.seed, args.channels, args.noise)
        except ValueError as exc:
            _usage(args, str(exc))
    D.save_pack(data, args.out)
    D.write_manifest(_sidecar(args.out), [], None, command="gen-data", seed=args.seed, config=_run_config(args),
                     samples=len(data), num_classes=data.num_classes)
    _emit(f"samples={len(data)} classes={data.num_classes} shape={'x'.join(map(str, data.image_shape))}")
    return EXIT_OK


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def _train_cfg(args) -> M.TrainConfig:
    try:
        return M.TrainConfig(args.epochs, args.lr, args.batch_size, args.seed)
    except ValueError as exc:
        _usage(args, str(exc))


def _fresh_model(args, data: D.LabeledDataset) -> M.Network:
    try:
        arch = ARCHITECTURES[args.arch](data.num_classes, data.image_shape, width=args.width)
        arch.shapes()
    except M.ArchitectureError as exc:
        _usage(args, str(exc))
    return M.build(arch, args.seed)


def cmd_train(args) -> int:
    cfg = _train_cfg(args)
    data = _load_pack(args.data)
    net = M.train(_fresh_model(args, data), data, cfg)
    net.training_meta.update(command="train", seed=args.seed, config=_run_config(args))
    M.save(net, args.out)
    _emit(f"clean_accuracy={net.training_meta['accuracy']:.4f}")
    _emit(f"model_id={_model_id_of(args.out)}")
    return EXIT_OK


def cmd_infect(args) -> int:
    cfg = _train_cfg(args)
    data = _load_pack(args.data)
    triggers = [{"shape": args.shape, "pos": args.pos, "size": args.size, "target": args.target,
                 "offset": args.offset}] + list(args.second_trigger)
    specs = []
    for t in triggers:
        if not 0 <= t["target"] < data.num_classes:
            _usage(args, f"target {t['target']} outside [0, {data.num_classes})")
        try:
            spec = D.TriggerSpec(t["shape"], t["pos"], t["size"], t["target"], offset=t["offset"],
                                 color=tuple(args.color))
            spec.full_pattern(*data.image_shape)
        except ValueError as exc:
            _usage(args, str(exc))
        specs.append(spec)
    if not 0 < args.rate <= 0.5:
        _usage(args, "--rate must lie in (0, 0.5]")
    poisoned = D.poison(data, specs, args.rate, args.seed)
    net = M.train(_fresh_model(args, poisoned), poisoned, cfg)
    rates = _attack_rates(net, data, specs)
    net.training_meta.update(command="infect", seed=args.seed, config=_run_config(args),
                             attack_success=rates)
    M.save(net, args.out)
    manifest = args.manifest or args.out.with_name(args.out.name + ".triggers.json")
    D.write_manifest(manifest, specs, _model_id_of(args.out), command="infect", seed=args.seed,
                     rate=args.rate, config=_run_config(args))
    _emit(f"clean_accuracy={net.training_meta['accuracy']:.4f}")
    for spec, r in zip(specs, rates):
        _emit(f"attack_success[target={spec.target_class}]={r:.4f}")
    _emit(f"model_id={_model_id_of(args.out)}")
    if min(rates) < args.min_success:
        logger.error("attack success %.3f below %.2f after %d epochs; backdoor not implanted",
                     min(rates), args.min_success, cfg.epochs)
        return EXIT_FAIL
    return EXIT_OK


def cmd_inspect(args) -> int:
    cfg = _detector_config(args)
    if args.jobs < 1:
        _usage(args, "--jobs must be positive")
    net = _load_model(args.model)
    data = _load_pack(args.data)
    if tuple(net.input_shape) != data.image_shape:
        raise CommandError(f"model expects {net.input_shape} images, pack has {data.image_shape}")
    mid = _model_id_of(args.model)
    results = Det.scan_all_classes(net, data, cfg, jobs=args.jobs)
    jcfg = J.JudgeConfig(threshold=args.threshold, tau=cfg.tau, seed=args.seed)
    report = J.judge(net, data, results, jcfg, mid, cfg.mode)
    report.config = {"detector": cfg.to_dict(), "threshold": args.threshold, "seed": args.seed,
                     "run": _run_config(args)}

    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    for k, res in sorted(results.items()):
        if res.candidate is None:
            continue
        entry = {"candidate": f"class{k}.tbrc", "mask_pixels": int(res.candidate.binarized(cfg.tau).sum()),
                 "attack_success": res.attack_success, "converged": res.converged, "epochs": len(res.trace)}
        Det.save_candidate(res.candidate, out / entry["candidate"], model_id=mid, mode=cfg.mode, seed=args.seed)
        if k in report.flagged:
            trig, mask = Det.export_trigger_pngs(res.candidate, out / f"class{k}", cfg.tau)
            entry.update(trigger_png=trig.name, mask_png=mask.name)
        report.triggers[k] = entry

    if args.manifest is not None:
        specs, meta = D.read_manifest(args.manifest)
        _check_ids(meta, mid)
        _attach_truth(report, {k: r.candidate for k, r in results.items() if r.candidate is not None}, specs,
                      data.image_shape, cfg.tau)
    report.write(out / "report.json")
    E.write_rows(_class_rows(report), out / "summary.csv", CLASS_COLUMNS)
    if not args.no_figures:
        plotting.anomaly_chart(report, out / "anomaly.png", args.threshold)
        plotting.quality_chart(report, out / "quality.png")
        plotting.trigger_panel({k: r.candidate for k, r in results.items() if r.candidate is not None},
                               out / "triggers.png", cfg.tau)
        plotting.trace_chart({k: r.trace for k, r in results.items() if r.trace}, out / "trace.png")

    for row in _class_rows(report):
        _emit(",".join(_cell(row[c]) for c in CLASS_COLUMNS))
    _emit(f"verdict={report.verdict} flagged={' '.join(map(str, report.flagged)) or '-'} mode={report.mode}")
    if report.correctness_symbol:
        _emit(f"correctness={report.correctness_symbol} {J.CORRECTNESS_GLYPHS[report.correctness_symbol]}")
    if report.errors:
        logger.warning("classes with solver errors: %s", sorted(report.errors))
    return EXIT_INFECTED if report.flagged else EXIT_OK


CLASS_COLUMNS = ("class_id", "A", "anomaly_index", "flagged", "mask_pixels", "acc_att", "acc_crop", "acc_exp")


def _class_rows(report: J.DetectionReport) -> list[dict]:
    rows = []
    for k in sorted(report.scores):
        s = report.scores[k]
        c = s.components
        rows.append({"class_id": k, "A": s.A, "anomaly_index": s.anomaly_index, "flagged": int(k in report.flagged),
                     "mask_pixels": c.get("mask_pixels", 0), "acc_att": c.get("acc_att", ""),
                     "acc_crop": c.get("acc_crop", ""), "acc_exp": c.get("acc_exp", "")})
    return rows


def _cell(v) -> str:
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def _check_ids(meta: dict, mid: str) -> None:
    if meta.get("model_id") not in (None, mid):
        raise CommandError(f"manifest belongs to model {meta['model_id']}, report is for {mid}")


def _attach_truth(report: J.DetectionReport, cands: dict, specs, image_shape, tau: float) -> None:
    h, w, _ = image_shape
    fid = {}
    for spec in specs:
        k = spec.target_class
        if k not in cands:
            continue
        f = J.fidelity(cands[k].binarized(tau), spec.mask(h, w) > 0)
        fid[str(k)] = {"precision": f.precision, "recall": f.recall, "f1": f.f1, "flagged": k in report.flagged,
                       "empty_restored": f.empty_restored}
    report.fidelity = fid
    report.correctness_symbol = J.correctness(report.flagged, J.ground_truth_targets(specs))


def cmd_evaluate(args) -> int:
    if args.grid:
        return _evaluate_grid(args)
    if args.report is None or args.manifest is None:
        _usage(args, "evaluate needs --report and --manifest (or --grid)")
    report = J.DetectionReport.read(args.report)
    specs, meta = D.read_manifest(args.manifest)
    _check_ids(meta, report.model_id)
    cands = {}
    for k, entry in report.triggers.items():
        path = args.report.parent / entry["candidate"]
        if path.exists():
            cands[k] = Det.load_candidate(path)
    if not cands:
        raise CommandError("report references no readable candidate archives")
    image_shape = next(iter(cands.values())).image_shape
    tau = report.config.get("detector", {}).get("tau", 0.01)
    _attach_truth(report, cands, specs, image_shape, tau)
    rows = []
    targets = set(J.ground_truth_targets(specs))
    h, w, _ = image_shape
    for k in sorted(set(report.flagged) | targets):
        if k not in cands:
            continue
        truth = [s for s in specs if s.target_class == k]
        if truth:
            f = J.fidelity(cands[k].binarized(tau), truth[0].mask(h, w) > 0)
            row = {"class_id": k, "flagged": int(k in report.flagged), "planted": 1,
                   "precision": f.precision, "recall": f.recall, "f1": f.f1}
        else:
            row = {"class_id": k, "flagged": 1, "planted": 0, "precision": 0.0, "recall": 0.0, "f1": 0.0}
        rows.append(row)
        _emit(",".join(_cell(row[c]) for c in EVAL_COLUMNS))
    symbol = report.correctness_symbol
    _emit(f"correctness={symbol} {J.CORRECTNESS_GLYPHS[symbol]}")
    if args.out is not None:
        E.write_rows(rows, args.out, EVAL_COLUMNS)
    return EXIT_OK


EVAL_COLUMNS = ("class_id", "flagged", "planted", "precision", "recall", "f1")


def _evaluate_grid(args) -> int:
    modes = []
    for m in args.modes:
        if m not in MODE_NAMES:
            _usage(args, f"unknown mode {m!r}; expected {sorted(MODE_NAMES)}")
        modes.append(MODE_NAMES[m])
    for p in args.positions:
        if D.POSITION_NAMES.get(p, p) not in D.POSITIONS:
            _usage(args, f"unknown position {p!r}")
    for s in args.shapes:
        if s not in D.SHAPES:
            _usage(args, f"unknown shape {s!r}")
    rows = E.run_grid(args.seed, args.sizes, args.positions, args.shapes, modes,
                      Det.DetectorConfig.desk(seed=args.seed), J.JudgeConfig(threshold=args.threshold, seed=args.seed),
                      target=args.target, scope=args.scope, offset=args.offset)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    out = args.out or args.out_dir / "grid.csv"
    E.write_rows(rows, out)
    plotting.grid_chart(rows, out.with_suffix(".png"))
    for row in rows:
        _emit(",".join(_cell(row[c]) for c in E.GRID_COLUMNS))
    return EXIT_OK


def cmd_patch(args) -> int:
    if args.report is None and args.trigger is None:
        _usage(args, "patch needs a trigger source: --report or --trigger")
    if args.epochs < 0 or not 0 < args.fraction <= 1:
        _usage(args, "--epochs must be >= 0 and --fraction in (0, 1]")
    net = _load_model(args.model)
    data = _load_pack(args.data)
    if args.trigger is not None:
        cand = Det.load_candidate(args.trigger)
    else:
        report = J.DetectionReport.read(args.report)
        if report.model_id != _model_id_of(args.model):
            raise CommandError(f"report is for model {report.model_id}, not {args.model}")
        if not report.flagged:
            raise CommandError("report has no flagged class and no --trigger was given")
        k = args.class_id
        if k is None:
            k = min(report.flagged, key=lambda c: report.scores[c].A)
        elif k not in report.flagged:
            raise CommandError(f"class {k} is not flagged in the report")
        cand = Det.load_candidate(args.report.parent / report.triggers[k]["candidate"])
    if args.epochs == 0:
        # nothing is trained, so keep the input bytes exactly
        shutil.copyfile(args.model, args.out)
        _emit("patched=0")
        return EXIT_OK

    specs = D.read_manifest(args.manifest)[0] if args.manifest is not None else []
    cfg = M.TrainConfig(args.epochs, args.lr, args.batch_size, args.seed)
    test = data.test() if data.has_split else data
    before_acc = M.accuracy(net, test)
    before_restored = _restored_rate(net, test, cand)
    before_truth = _attack_rates(net, data, specs)
    try:
        patched = Det.patch_unlearning(net, cand, data, args.epochs, cfg, args.fraction)
    except ValueError as exc:
        raise CommandError(str(exc)) from exc
    patched.training_meta.update(command="patch", seed=args.seed, config=_run_config(args))
    M.save(patched, args.out)
    after_acc = M.accuracy(patched, test)
    _emit(f"clean_accuracy_before={before_acc:.4f} clean_accuracy_after={after_acc:.4f}")
    _emit(f"restored_success_before={before_restored:.4f} "
          f"restored_success_after={_restored_rate(patched, test, cand):.4f}")
    for spec, b, a in zip(specs, before_truth, _attack_rates(patched, data, specs)):
        _emit(f"attack_success_before[target={spec.target_class}]={b:.4f} "
              f"attack_success_after[target={spec.target_class}]={a:.4f}")
    return EXIT_OK


def _restored_rate(net, test: D.LabeledDataset, cand: Det.TriggerCandidate) -> float:
    pool = test.subset(~test.poisoned & (test.labels != cand.target_class))
    if len(pool) == 0:
        return 0.0
    return float(np.mean(M.classify(net, cand.stamp(pool.images)) == cand.target_class))


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "infect": cmd_infect,
    "inspect": cmd_inspect,
    "evaluate": cmd_evaluate,
    "patch": cmd_patch,
}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        return COMMANDS[args.command](args)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    except M.FormatError as exc:
        print(f"trojanscan: format error ({exc.code}): {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (CommandError, ValueError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"trojanscan: error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
