"""Trigger quality scoring, MAD outlier flagging, verdicts and fidelity."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import LabeledDataset, TriggerSpec
from .detector import SolveResult, TriggerCandidate, crop, detection_pool
from .model import Network, predict
from .tensor import Tensor

ACC_FLOOR = 1e-6
NORM_FLOOR = 1e-12
MAD_SCALE = 1.4826

CORRECTNESS_GLYPHS = {"full": "●", "partial": "◐", "wrong_class": "⊖", "fail": "○"}


@dataclass
class QualityScore:
    class_id: int
    A: float
    components: dict
    anomaly_index: float = 0.0

    def recompute(self) -> float:
        c = self.components
        if c["mask_pixels"] == 0:
            return math.inf
        return metric_a(c["sparsity"], c["smoothness"], c["acc_att"], c["acc_crop"], c["acc_exp"])


def smoothness_count(f: np.ndarray) -> float:
    f = np.asarray(f, dtype=np.float64)
    return float(np.sum(np.diff(f, axis=1) ** 2) + np.sum(np.diff(f, axis=0) ** 2))


def metric_a(sparsity: float, smoothness: float, acc_att: float, acc_crop: float, acc_exp: float) -> float:
    """Log-combined quality of a restored trigger; lower means more trigger-like.

    ``sparsity`` and ``smoothness`` are the normalized counts of the
    binarized mask; the three accuracies are floored before the log.
    """
    return (
        math.log(max(sparsity, NORM_FLOOR))
        + math.log(max(smoothness, NORM_FLOOR))
        - math.log(max(acc_att, ACC_FLOOR))
        - math.log(max(acc_crop, ACC_FLOOR))
        - math.log(max(acc_exp, ACC_FLOOR))
    )


def quality(net: Network, images: np.ndarray, labels: np.ndarray, cand: TriggerCandidate,
            tau: float = 0.01) -> QualityScore:
    """Score a restored trigger on a batch of clean images with true labels.

    acc_att is the share of non-target images sent to the target once
    stamped, acc_crop the accuracy on images with the mask region nulled,
    and acc_exp the probability the network gives the target for M * delta
    on an empty background. Sparsity and smoothness are normalized by
    H*W and H*(W-1) (d^2 and d(d-1) for square images).
    """
    images = np.asarray(images)
    labels = np.asarray(labels)
    if len(images) == 0:
        raise ValueError("quality: empty evaluation batch")
    target = cand.target_class
    h, w = cand.mask_logits.shape
    f = cand.binarized(tau)
    pixels = int(f.sum())
    s = smoothness_count(f)

    others = labels != target
    if others.any():
        stamped = cand.stamp(images[others])
        acc_att = float(np.mean(predict(net, stamped).argmax(1) == target))
    else:
        acc_att = 0.0
    mask = Tensor(cand.mask_array())
    cropped = crop(images, mask).data
    acc_crop = float(np.mean(predict(net, cropped).argmax(1) == labels))
    acc_exp = float(predict(net, cand.trigger_array()[None])[0, target])

    components = {
        "mask_pixels": pixels,
        "sparsity": pixels / (h * w),
        "smoothness_raw": s,
        "smoothness": s / (h * (w - 1)) if w > 1 else 0.0,
        "acc_att": acc_att,
        "acc_crop": acc_crop,
        "acc_exp": acc_exp,
    }
    score = QualityScore(target, math.inf, components)
    if pixels:
        score.A = score.recompute()
    return score


@dataclass
class MadResult:
    flagged: list[int]
    indices: dict[int, float]
    median: float
    mad: float
    status: str = "ok"


def mad_outliers(scores, threshold: float = 2.0) -> MadResult:
    """Flag classes whose score is a low-side MAD outlier.

    ``scores`` is a list of QualityScore (their ``anomaly_index`` is filled
    in) or a mapping/sequence of plain numbers. Infinite scores never get
    flagged.
    """
    if isinstance(scores, dict):
        items = list(scores.items())
    else:
        items = [(s.class_id, s.A) if isinstance(s, QualityScore) else (i, float(s)) for i, s in enumerate(scores)]
    if len(items) < 3:
        raise ValueError("mad_outliers: need at least 3 scores")
    ids = [k for k, _ in items]
    values = np.array([v for _, v in items], dtype=np.float64)
    median = float(np.median(values))
    if not np.isfinite(median):
        result = MadResult([], {k: 0.0 for k in ids}, median, math.nan, "degenerate_spread")
    else:
        dev = np.abs(values - median)
        mad = float(np.median(dev))
        if mad == 0:
            status = "degenerate_spread"
            if np.any(dev > 1e-6):
                status = "error:zero_mad_with_outliers"
            result = MadResult([], {k: 0.0 for k in ids}, median, 0.0, status)
        else:
            index = dev / (MAD_SCALE * mad)
            flagged = [k for k, i, v in zip(ids, index, values) if i > threshold and v < median]
            result = MadResult(flagged, {k: float(i) for k, i in zip(ids, index)}, median, mad)
    if not isinstance(scores, dict):
        for s in scores:
            if isinstance(s, QualityScore):
                s.anomaly_index = result.indices[s.class_id]
    return result


@dataclass
class JudgeConfig:
    threshold: float = 2.0
    eval_size: int = 64
    tau: float = 0.01
    seed: int = 0


@dataclass
class DetectionReport:
    model_id: str
    scores: dict[int, QualityScore]
    flagged: list[int]
    mode: str = "tabor"
    mad_status: str = "ok"
    errors: dict[int, str] = field(default_factory=dict)
    triggers: dict[int, dict] = field(default_factory=dict)
    fidelity: dict = field(default_factory=dict)
    correctness_symbol: str | None = None
    config: dict = field(default_factory=dict)

    @property
    def verdict(self) -> str:
        return "infected" if self.flagged else "clean"

    def to_dict(self) -> dict:
        classes = []
        for k in sorted(self.scores):
            s = self.scores[k]
            classes.append({
                "class_id": k,
                "A": _json_float(s.A),
                "components": {key: _json_float(v) for key, v in s.components.items()},
                "anomaly_index": _json_float(s.anomaly_index),
                "flagged": k in self.flagged,
                **({"error": self.errors[k]} if k in self.errors else {}),
            })
        return {
            "model_id": self.model_id,
            "mode": self.mode,
            "classes": classes,
            "verdict": self.verdict,
            "flagged_classes": sorted(self.flagged),
            "mad_status": self.mad_status,
            "triggers": {str(k): v for k, v in sorted(self.triggers.items())},
            "fidelity": self.fidelity,
            "correctness_symbol": self.correctness_symbol,
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, d: dict) -> DetectionReport:
        scores = {}
        errors = {}
        for c in d["classes"]:
            comps = {k: _from_json_float(v) for k, v in c["components"].items()}
            scores[c["class_id"]] = QualityScore(c["class_id"], _from_json_float(c["A"]), comps,
                                                 _from_json_float(c["anomaly_index"]))
            if "error" in c:
                errors[c["class_id"]] = c["error"]
        flagged = d.get("flagged_classes")
        if flagged is None:
            flagged = [c["class_id"] for c in d["classes"] if c["flagged"]]
        return cls(d["model_id"], scores, flagged, d.get("mode", "tabor"), d.get("mad_status", "ok"),
                   errors, {int(k): v for k, v in d.get("triggers", {}).items()}, d.get("fidelity", {}),
                   d.get("correctness_symbol"), d.get("config", {}))

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path) -> DetectionReport:
        return cls.from_dict(json.loads(Path(path).read_text()))


def _json_float(v):
    if isinstance(v, float) and not math.isfinite(v):
        return "inf" if v > 0 else ("-inf" if v < 0 else "nan")
    return v


def _from_json_float(v):
    return float(v) if isinstance(v, str) else v


def evaluation_batch(data: LabeledDataset, size: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    pool = detection_pool(data)
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(pool), size=min(size, len(pool)), replace=False))
    return pool.images[idx], pool.labels[idx]


def judge(net: Network, data: LabeledDataset, results: dict[int, SolveResult],
          cfg: JudgeConfig | None = None, model_id: str = "", mode: str = "tabor") -> DetectionReport:
    """Score every restored trigger, flag MAD outliers and assemble the report."""
    cfg = cfg or JudgeConfig()
    images, labels = evaluation_batch(data, cfg.eval_size, cfg.seed)
    scores: dict[int, QualityScore] = {}
    errors: dict[int, str] = {}
    for k in sorted(results):
        res = results[k]
        if res.candidate is None:
            errors[k] = res.error or "no candidate"
            scores[k] = QualityScore(k, math.inf, {"mask_pixels": 0})
            continue
        scores[k] = quality(net, images, labels, res.candidate, cfg.tau)
    mad = mad_outliers(list(scores.values()), cfg.threshold)
    return DetectionReport(model_id, scores, sorted(mad.flagged), mode, mad.status, errors)


# ---------------------------------------------------------------- ground-truth comparison


@dataclass
class Fidelity:
    precision: float
    recall: float
    f1: float
    empty_restored: bool = False

    def as_tuple(self) -> tuple[float, float, float]:
        return self.precision, self.recall, self.f1


def fidelity(restored, truth) -> Fidelity:
    """Precision, recall and F1 of a binarized restored mask against the planted one."""
    restored = np.asarray(restored, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if restored.shape != truth.shape:
        raise ValueError(f"fidelity: mask shapes {restored.shape} and {truth.shape} differ")
    if not truth.any():
        raise ValueError("fidelity: ground-truth mask is empty")
    overlap = float(np.sum(restored & truth))
    if not restored.any():
        return Fidelity(0.0, 0.0, 0.0, empty_restored=True)
    precision = overlap / float(restored.sum())
    recall = overlap / float(truth.sum())
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return Fidelity(precision, recall, f1)


def correctness(flagged, targets) -> str:
    """Correctness symbol name: full, partial, wrong_class or fail."""
    flagged, targets = set(flagged), set(targets)
    if not targets:
        return "full" if not flagged else "fail"
    if not flagged:
        return "fail"
    if targets <= flagged:
        return "full" if flagged == targets else "partial"
    return "wrong_class"


def ground_truth_targets(specs: list[TriggerSpec]) -> list[int]:
    return sorted({s.target_class for s in specs})
