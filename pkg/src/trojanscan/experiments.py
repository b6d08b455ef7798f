"""Seeded desk-scale fixtures and the size x corner fidelity grid."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import POSITIONS, LabeledDataset, TriggerSpec, attack_success, generate_synthetic, poison
from .detector import DESK_LAMBDAS, FULL_SCALE_LAMBDAS, DetectorConfig, scan_all_classes, solve_for_target
from .judge import JudgeConfig, correctness, fidelity, ground_truth_targets, judge
from .model import Network, TrainConfig, accuracy, build, classify, desk_architecture, model_bytes, model_id, train

logger = logging.getLogger(__name__)

DESK_TRAIN = TrainConfig(epochs=10, learning_rate=3e-3, batch_size=32)
GRID_SIZES = (3, 4, 5)
# one pixel in from the border: valid 3x3 convs see edge pixels less often, so
# a flush-corner trigger is restored shifted one pixel inward
GRID_OFFSET = 1
# (high, low) per lambda for robustness sweeps; each pair spans 100x
SENSITIVITY_PAIRS = ((1e-3, 1e-5), (1e-4, 1e-6), (1e-5, 1e-7), (1e-6, 1e-8), (1e-4, 1e-6), (1e-2, 1e-4))
GRID_COLUMNS = ("shape", "size", "position", "offset", "mode", "target", "precision", "recall", "f1",
                "flagged", "correctness", "attack_success", "restored_success")


@dataclass
class Fixture:
    data: LabeledDataset
    poisoned: LabeledDataset
    specs: list[TriggerSpec]
    clean_net: Network
    infected_net: Network
    seed: int
    extra: dict = field(default_factory=dict)

    @property
    def clean_accuracy(self) -> float:
        return accuracy(self.clean_net, self.data.test())

    @property
    def infected_accuracy(self) -> float:
        return accuracy(self.infected_net, self.data.test())

    def attack_success(self, net: Network | None = None) -> list[float]:
        net = net or self.infected_net
        return [attack_success(lambda x: classify(net, x), self.data, s) for s in self.specs]

    @property
    def model_id(self) -> str:
        return model_id(model_bytes(self.infected_net))


def make_dataset(seed: int = 7, num_classes: int = 5, per_class: int = 200, image_size: int = 16) -> LabeledDataset:
    return generate_synthetic(num_classes, per_class, image_size, seed)


def train_model(data: LabeledDataset, seed: int, cfg: TrainConfig = DESK_TRAIN) -> Network:
    net = build(desk_architecture(data.num_classes, data.image_shape), seed)
    return train(net, data, TrainConfig(cfg.epochs, cfg.learning_rate, cfg.batch_size, seed))


def make_fixture(seed: int = 7, specs: list[TriggerSpec] | None = None, rate: float = 0.1,
                 data: LabeledDataset | None = None, clean_net: Network | None = None,
                 cfg: TrainConfig = DESK_TRAIN) -> Fixture:
    """Clean twin and BadNet-infected model trained identically from the same seed.

    The default trigger is a white 3x3 square in the bottom-right corner
    targeting class 0.
    """
    data = data if data is not None else make_dataset(seed)
    specs = specs or [TriggerSpec("square", "br", 3, 0)]
    clean_net = clean_net if clean_net is not None else train_model(data, seed, cfg)
    poisoned = poison(data, specs, rate, seed)
    infected = train_model(poisoned, seed, cfg)
    return Fixture(data, poisoned, specs, clean_net, infected, seed)


def grid_cell(fix: Fixture, modes, det_cfg: DetectorConfig, judge_cfg: JudgeConfig | None = None,
              scope: str = "all") -> list[dict]:
    """One summary row per detection mode for the fixture's (single) planted trigger.

    ``scope="all"`` scans every class and judges; ``"target"`` only
    restores the planted target, which is enough for fidelity but leaves
    the flag and correctness columns empty.
    """
    spec = fix.specs[0]
    h, w, _ = fix.data.image_shape
    truth = spec.mask(h, w) > 0
    rows = []
    for mode in modes:
        cfg = DetectorConfig(**{**det_cfg.to_dict(), "mode": mode})
        flagged, symbol = "", ""
        if scope == "all":
            results = scan_all_classes(fix.infected_net, fix.data, cfg)
            report = judge(fix.infected_net, fix.data, results, judge_cfg, fix.model_id, mode)
            flagged = " ".join(str(k) for k in report.flagged)
            symbol = correctness(report.flagged, ground_truth_targets(fix.specs))
            result = results[spec.target_class]
        elif scope == "target":
            result = solve_for_target(fix.infected_net, fix.data, spec.target_class, cfg)
        else:
            raise ValueError(f"unknown grid scope {scope!r}")
        fid = fidelity(result.candidate.binarized(cfg.tau), truth)
        rows.append({
            "shape": spec.shape, "size": spec.size, "position": spec.position, "offset": spec.offset, "mode": mode,
            "target": spec.target_class, "precision": fid.precision, "recall": fid.recall, "f1": fid.f1,
            "flagged": flagged, "correctness": symbol,
            "attack_success": fix.attack_success()[0], "restored_success": result.attack_success,
        })
    return rows


def run_grid(seed: int = 7, sizes=GRID_SIZES, positions=POSITIONS, shapes=("square",),
             modes=("tabor", "neural_cleanse_baseline"), det_cfg: DetectorConfig | None = None,
             judge_cfg: JudgeConfig | None = None, target: int = 0, scope: str = "all",
             data: LabeledDataset | None = None, offset: int = GRID_OFFSET) -> list[dict]:
    det_cfg = det_cfg or DetectorConfig.desk(seed=seed)
    data = data if data is not None else make_dataset(seed)
    clean_net = train_model(data, seed)
    rows = []
    for shape in shapes:
        for size in sizes:
            for pos in positions:
                fix = make_fixture(seed, [TriggerSpec(shape, pos, size, target, offset=offset)], data=data, clean_net=clean_net)
                cell = grid_cell(fix, modes, det_cfg, judge_cfg, scope)
                for row in cell:
                    logger.info("grid %s %d %s %s: F1 %.3f", shape, size, pos, row["mode"], row["f1"])
                rows.extend(cell)
    return rows


def write_rows(rows: list[dict], path, columns=GRID_COLUMNS) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(v) for k, v in row.items()})
    return path


def _fmt(v):
    return f"{v:.6f}" if isinstance(v, float) else v


def lambda_variants(pairs=SENSITIVITY_PAIRS, scale: float | None = None) -> list[tuple[float, ...]]:
    """Four lambda vectors drawn from per-term (high, low) sensitivity pairs.

    The pairs are rescaled by ``scale``, by default the median ratio between
    the desk and full-scale lambdas. The vectors are all high, all low and
    the two alternating patterns.
    """
    if scale is None:
        scale = float(np.median(np.array(DESK_LAMBDAS) / np.array(FULL_SCALE_LAMBDAS)))
    hi = [scale * h for h, _ in pairs]
    lo = [scale * l for _, l in pairs]
    picks = [hi, lo, [(hi, lo)[k % 2][k] for k in range(6)], [(lo, hi)[k % 2][k] for k in range(6)]]
    return [tuple(float(v) for v in vec) for vec in picks]
