import csv
import json

import numpy as np
import pytest

from trojanscan import cli
from trojanscan import data as D
from trojanscan import model as M
from trojanscan.detector import load_candidate
from trojanscan.judge import DetectionReport

SMALL = ["--classes", "3", "--per-class", "30", "--size", "12", "--seed", "3"]
FAST_SOLVE = ["--epochs", "3", "--batch-size", "32"]


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    return code, capsys.readouterr()


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    """A small pack, clean model and infected model shared by the tests below."""
    d = tmp_path_factory.mktemp("cli")
    assert cli.main(["gen-data", "--out", str(d / "d.tbrd"), *SMALL]) == 0
    assert cli.main(["train", "--data", str(d / "d.tbrd"), "--out", str(d / "clean.tbrm"), "--epochs", "3"]) == 0
    code = cli.main(["infect", "--data", str(d / "d.tbrd"), "--out", str(d / "inf.tbrm"), "--epochs", "3",
                     "--min-success", "0"])
    assert code == 0
    return d


# ---------------------------------------------------------------- gen-data

def test_gen_data_counts(tmp_path, capsys):
    code, out = run(capsys, "gen-data", "--classes", "5", "--per-class", "200", "--size", "16", "--seed", "7",
                    "--out", tmp_path / "d.tbrd")
    assert code == 0
    assert "samples=1000" in out.out
    assert len(D.load_pack(tmp_path / "d.tbrd")) == 1000
    side = json.loads((tmp_path / "d.tbrd.json").read_text())
    assert side["seed"] == 7 and side["triggers"] == [] and side["config"]["per_class"] == 200


def test_gen_data_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert cli.main(["gen-data", "--out", str(tmp_path / f"{name}.tbrd"), *SMALL]) == 0
    assert (tmp_path / "a.tbrd").read_bytes() == (tmp_path / "b.tbrd").read_bytes()


def test_gen_data_missing_out(capsys):
    code, out = run(capsys, "gen-data", "--classes", "3")
    assert code == 2
    assert "--out" in out.err


def test_gen_data_bad_values(tmp_path, capsys):
    assert run(capsys, "gen-data", "--out", tmp_path / "x", "--classes", "0")[0] == 2
    assert run(capsys, "gen-data", "--out", tmp_path / "x", "--size", "8")[0] == 2


def test_gen_data_from_dir(tmp_path, capsys):
    from PIL import Image

    for k in ("cat", "dog"):
        (tmp_path / "src" / k).mkdir(parents=True)
        for i in range(5):
            Image.fromarray(np.full((12, 12, 3), 40 * i, np.uint8)).save(tmp_path / "src" / k / f"{i}.png")
    code, _ = run(capsys, "gen-data", "--from-dir", tmp_path / "src", "--out", tmp_path / "p.tbrd")
    assert code == 0
    data = D.load_pack(tmp_path / "p.tbrd")
    assert len(data) == 10 and data.num_classes == 2 and data.is_test.sum() == 2


def test_config_file_supplies_defaults(tmp_path, capsys):
    cfg = tmp_path / "run.ini"
    cfg.write_text("[gen-data]\nclasses = 2\nper-class = 7\nsize = 12\n")
    code, out = run(capsys, "--config", cfg, "gen-data", "--out", tmp_path / "c.tbrd", "--per-class", "4")
    assert code == 0
    # the file sets classes, the command line overrides per-class
    assert "samples=8 classes=2" in out.out


def test_config_file_unknown_key(tmp_path, capsys):
    cfg = tmp_path / "run.ini"
    cfg.write_text("[gen-data]\ncolour = red\n")
    assert run(capsys, "--config", cfg, "gen-data", "--out", tmp_path / "c.tbrd")[0] == 2


# ---------------------------------------------------------------- train / infect

def test_train_records_seed_and_config(work):
    net = M.load(work / "clean.tbrm")
    assert net.training_meta["seed"] == 7 and net.training_meta["command"] == "train"
    assert net.training_meta["config"]["epochs"] == 3


def test_infect_writes_manifest(work):
    specs, meta = D.read_manifest(work / "inf.tbrm.triggers.json")
    assert meta["model_id"] == M.model_id((work / "inf.tbrm").read_bytes())
    assert [(s.shape, s.position, s.size, s.target_class) for s in specs] == [("square", "br", 3, 0)]


def test_infect_target_out_of_range(work, tmp_path, capsys):
    code, out = run(capsys, "infect", "--data", work / "d.tbrd", "--out", tmp_path / "m.tbrm", "--target", "3")
    assert code == 2 and "target" in out.err
    assert not (tmp_path / "m.tbrm").exists()


def test_infect_unreachable_success(work, tmp_path, capsys):
    code, out = run(capsys, "infect", "--data", work / "d.tbrd", "--out", tmp_path / "m.tbrm", "--epochs", "1",
                    "--rate", "0.01", "--min-success", "1.01")
    assert code == 1
    assert "attack_success[target=0]" in out.out and "not implanted" in out.err


def test_infect_second_trigger(work, tmp_path, capsys):
    code, out = run(capsys, "infect", "--data", work / "d.tbrd", "--out", tmp_path / "m.tbrm", "--epochs", "1",
                    "--second-trigger", "bitmap:tl:4:2", "--min-success", "0")
    assert code == 0
    assert "attack_success[target=2]" in out.out
    specs, _ = D.read_manifest(tmp_path / "m.tbrm.triggers.json")
    assert [s.target_class for s in specs] == [0, 2] and specs[1].shape == "bitmap"


def test_bad_second_trigger_syntax(work, tmp_path, capsys):
    assert run(capsys, "infect", "--data", work / "d.tbrd", "--out", tmp_path / "m.tbrm",
               "--second-trigger", "square:tl")[0] == 2


# ---------------------------------------------------------------- inspect / evaluate / patch

@pytest.fixture(scope="module")
def inspected(work):
    out = work / "rep"
    code = cli.main(["inspect", "--model", str(work / "inf.tbrm"), "--data", str(work / "d.tbrd"),
                     "--out-dir", str(out), "--manifest", str(work / "inf.tbrm.triggers.json"), *FAST_SOLVE])
    return code, out


def test_inspect_artifacts(inspected, work):
    code, out = inspected
    report = DetectionReport.read(out / "report.json")
    assert code == (3 if report.flagged else 0)
    assert report.model_id == M.model_id((work / "inf.tbrm").read_bytes())
    assert report.config["seed"] == 7 and report.config["detector"]["epochs"] == 3
    for k in range(3):
        assert load_candidate(out / f"class{k}.tbrc").target_class == k
    for k in report.flagged:
        assert (out / f"class{k}_trigger.png").exists() and (out / f"class{k}_mask.png").exists()
    for fig in ("anomaly.png", "quality.png", "triggers.png", "trace.png"):
        assert (out / fig).stat().st_size > 0
    rows = list(csv.DictReader((out / "summary.csv").open()))
    assert [int(r["class_id"]) for r in rows] == [0, 1, 2]
    assert report.correctness_symbol in ("full", "partial", "wrong_class", "fail")


def test_inspect_baseline_mode_tag(work, tmp_path, capsys):
    code, out = run(capsys, "inspect", "--model", work / "inf.tbrm", "--data", work / "d.tbrd",
                    "--out-dir", tmp_path, "--mode", "neural-cleanse", "--no-figures", *FAST_SOLVE)
    assert code in (0, 3)
    assert "mode=neural_cleanse_baseline" in out.out
    assert DetectionReport.read(tmp_path / "report.json").mode == "neural_cleanse_baseline"
    assert not (tmp_path / "anomaly.png").exists()


def test_inspect_format_error(work, tmp_path, capsys):
    code, out = run(capsys, "inspect", "--model", work / "d.tbrd", "--data", work / "d.tbrd",
                    "--out-dir", tmp_path)
    assert code == 4 and "bad magic" in out.err
    blob = (work / "inf.tbrm").read_bytes()
    (tmp_path / "cut.tbrm").write_bytes(blob[: len(blob) // 2])
    assert run(capsys, "inspect", "--model", tmp_path / "cut.tbrm", "--data", work / "d.tbrd",
               "--out-dir", tmp_path)[0] == 4


def test_inspect_bad_lambdas(work, tmp_path, capsys):
    assert run(capsys, "inspect", "--model", work / "inf.tbrm", "--data", work / "d.tbrd",
               "--out-dir", tmp_path, "--lambdas", "1,2")[0] == 2


def test_evaluate_report(inspected, work, tmp_path, capsys):
    _, out = inspected
    code, res = run(capsys, "evaluate", "--report", out / "report.json",
                    "--manifest", work / "inf.tbrm.triggers.json", "--out", tmp_path / "e.csv")
    assert code == 0
    assert "correctness=" in res.out
    rows = list(csv.DictReader((tmp_path / "e.csv").open()))
    assert any(r["planted"] == "1" and r["class_id"] == "0" for r in rows)


def test_evaluate_perfect_restoration(work, tmp_path, capsys):
    """A report whose restored mask equals the planted one scores F1 = 1."""
    from test_detector import candidate_from_spec
    from trojanscan.detector import save_candidate

    specs, meta = D.read_manifest(work / "inf.tbrm.triggers.json")
    save_candidate(candidate_from_spec(specs[0], (12, 12, 3)), tmp_path / "class0.tbrc")
    report = DetectionReport(meta["model_id"], {}, [0], triggers={0: {"candidate": "class0.tbrc"}})
    report.write(tmp_path / "report.json")
    code, res = run(capsys, "evaluate", "--report", tmp_path / "report.json",
                    "--manifest", work / "inf.tbrm.triggers.json")
    assert code == 0
    assert "0,1,1,1.000000,1.000000,1.000000" in res.out
    assert "correctness=full" in res.out


def test_evaluate_model_id_mismatch(inspected, work, tmp_path, capsys):
    _, out = inspected
    doc = json.loads((work / "inf.tbrm.triggers.json").read_text())
    doc["model_id"] = "0000"
    (tmp_path / "m.json").write_text(json.dumps(doc))
    code, res = run(capsys, "evaluate", "--report", out / "report.json", "--manifest", tmp_path / "m.json")
    assert code == 1 and "0000" in res.err


def test_evaluate_needs_inputs(capsys):
    assert run(capsys, "evaluate")[0] == 2


def test_evaluate_grid_rows(tmp_path, capsys):
    code, res = run(capsys, "evaluate", "--grid", "--sizes", "3", "--positions", "br,tl", "--modes", "tabor",
                    "--scope", "target", "--out-dir", tmp_path, "--seed", "7")
    assert code == 0
    rows = list(csv.DictReader((tmp_path / "grid.csv").open()))
    assert len(rows) == 2
    assert [r["position"] for r in rows] == ["br", "tl"]
    assert all(r["offset"] == "1" for r in rows)
    assert (tmp_path / "grid.png").exists()


def test_patch_zero_epochs_identical(work, tmp_path):
    from test_detector import candidate_from_spec
    from trojanscan.detector import save_candidate

    specs, _ = D.read_manifest(work / "inf.tbrm.triggers.json")
    save_candidate(candidate_from_spec(specs[0], (12, 12, 3)), tmp_path / "t.tbrc")
    code = cli.main(["patch", "--model", str(work / "inf.tbrm"), "--data", str(work / "d.tbrd"),
                     "--trigger", str(tmp_path / "t.tbrc"), "--out", str(tmp_path / "p.tbrm"), "--epochs", "0"])
    assert code == 0
    assert (tmp_path / "p.tbrm").read_bytes() == (work / "inf.tbrm").read_bytes()


def test_patch_with_trigger_prints_rates(work, tmp_path, capsys):
    from test_detector import candidate_from_spec
    from trojanscan.detector import save_candidate

    specs, _ = D.read_manifest(work / "inf.tbrm.triggers.json")
    save_candidate(candidate_from_spec(specs[0], (12, 12, 3)), tmp_path / "t.tbrc")
    code, res = run(capsys, "patch", "--model", work / "inf.tbrm", "--data", work / "d.tbrd",
                    "--trigger", tmp_path / "t.tbrc", "--out", tmp_path / "p.tbrm", "--epochs", "1",
                    "--manifest", work / "inf.tbrm.triggers.json")
    assert code == 0
    assert "clean_accuracy_before=" in res.out and "attack_success_after[target=0]=" in res.out
    assert M.load(tmp_path / "p.tbrm").training_meta["command"] == "patch"


def test_patch_missing_trigger_source(work, tmp_path, capsys):
    code, res = run(capsys, "patch", "--model", work / "inf.tbrm", "--data", work / "d.tbrd",
                    "--out", tmp_path / "p.tbrm")
    assert code == 2 and "trigger source" in res.err


def test_patch_report_without_flags(work, tmp_path, capsys):
    mid = M.model_id((work / "inf.tbrm").read_bytes())
    DetectionReport(mid, {}, []).write(tmp_path / "r.json")
    code, res = run(capsys, "patch", "--model", work / "inf.tbrm", "--data", work / "d.tbrd",
                    "--report", tmp_path / "r.json", "--out", tmp_path / "p.tbrm")
    assert code == 1 and "no flagged class" in res.err


def test_missing_file_is_an_error(tmp_path, capsys):
    code, res = run(capsys, "train", "--data", tmp_path / "nope.tbrd", "--out", tmp_path / "m.tbrm")
    assert code == 1 and "nope.tbrd" in res.err
