"""Trigger restoration by regularized optimization through a frozen classifier.

A candidate trigger is a pair of unconstrained logit arrays; the mask ``M``
and pattern ``delta`` are their sigmoids, so both stay inside [0, 1] without
projection. Stamping follows ``x * (1 - M) + delta * M`` with the 2-D mask
broadcast over colour channels.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import LabeledDataset
from .model import (
    FormatError,
    Network,
    TrainConfig,
    classify,
    decode_entries,
    encode_entries,
    header_entry,
    split_header,
    train,
)
from .tensor import Tensor

logger = logging.getLogger(__name__)

MODES = ("tabor", "neural_cleanse_baseline")
CANDIDATE_MAGIC = b"TBRC"

FULL_SCALE_LAMBDAS = (1e-6, 1e-5, 1e-7, 1e-8, 1e-6, 1e-2)
# 16x16 inputs and a few-layer net need far stronger weights; blocking is lifted most
DESK_LAMBDAS = (1e-3, 1e-2, 1e-4, 1e-5, 1e-1, 10.0)


@dataclass
class DetectorConfig:
    """Solver settings.

    ``lambdas`` weight mask elastic-net, off-trigger pattern elastic-net, mask
    smoothness, off-trigger pattern smoothness, blocking and explanation
    terms, in that order. They are starting values: the solver rescales them
    by ``step`` every epoch depending on whether the attack success on the
    held-out batch reached ``phi``.
    """

    lambdas: tuple[float, ...] = FULL_SCALE_LAMBDAS
    epochs: int = 500
    learning_rate: float = 1e-3
    batch_size: int = 32
    phi: float = 0.95
    step: float = 1.5
    epsilon: float = 1e-3
    patience: int = 3
    mode: str = "tabor"
    tau: float = 0.01
    baseline_lambda: float = 1e-3
    mask_init: float = -3.0
    pattern_init: float = 0.0
    check_size: int = 64
    logit_bound: float = 8.0
    lambda_span: float = 1e4
    warmup: int = 10
    seed: int = 0

    def __post_init__(self):
        self.lambdas = tuple(float(v) for v in self.lambdas)
        self.mode = {"neural-cleanse": "neural_cleanse_baseline"}.get(self.mode, self.mode)
        if len(self.lambdas) != 6 or min(self.lambdas) < 0:
            raise ValueError("lambdas must be six non-negative values")
        if not self.step > 1:
            raise ValueError("step multiplier must exceed 1")
        if not 0 <= self.phi < 1:
            raise ValueError("phi must lie in [0, 1)")
        if self.epsilon <= 0 or not 0 < self.tau < 1:
            raise ValueError("epsilon must be positive and tau in (0, 1)")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.logit_bound <= 0 or self.lambda_span < 1:
            raise ValueError("logit_bound must be positive and lambda_span at least 1")

    @classmethod
    def desk(cls, **overrides) -> DetectorConfig:
        """Settings scaled for 16x16 inputs and a CPU budget of seconds per class."""
        base = dict(lambdas=DESK_LAMBDAS, epochs=40, learning_rate=0.1, batch_size=16)
        base.update(overrides)
        return cls(**base)

    def initial_lambdas(self) -> np.ndarray:
        if self.mode == "neural_cleanse_baseline":
            return np.array([self.baseline_lambda, 0, 0, 0, 0, 0], dtype=np.float64)
        return np.array(self.lambdas, dtype=np.float64)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambdas"] = list(self.lambdas)
        return d


@dataclass(eq=False)
class TriggerCandidate:
    mask_logits: Tensor
    pattern_logits: Tensor
    target_class: int

    @classmethod
    def initial(cls, image_shape, target_class: int, mask_init: float = -3.0,
                pattern_init: float = 0.0, dtype=np.float32) -> TriggerCandidate:
        h, w, c = image_shape
        return cls(
            Tensor(np.full((h, w), mask_init, dtype=dtype)),
            Tensor(np.full((h, w, c), pattern_init, dtype=dtype)),
            target_class,
        )

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.pattern_logits.shape)

    def mask(self) -> Tensor:
        return T.sigmoid(self.mask_logits)

    def pattern(self) -> Tensor:
        return T.sigmoid(self.pattern_logits)

    def mask_array(self) -> np.ndarray:
        return self.mask().data

    def pattern_array(self) -> np.ndarray:
        return self.pattern().data

    def trigger_array(self) -> np.ndarray:
        """M * delta as an (H, W, C) image."""
        return self.mask_array()[..., None] * self.pattern_array()

    def binarized(self, tau: float = 0.01) -> np.ndarray:
        """Pixels whose strongest channel of M * delta exceeds ``tau``."""
        return self.trigger_array().max(axis=-1) > tau

    def copy(self) -> TriggerCandidate:
        return TriggerCandidate(
            Tensor(self.mask_logits.data.copy()), Tensor(self.pattern_logits.data.copy()), self.target_class
        )

    def stamp(self, images: np.ndarray) -> np.ndarray:
        m = self.mask_array()[..., None]
        return (images * (1.0 - m) + self.pattern_array() * m).astype(images.dtype)


# ---------------------------------------------------------------- objective terms


def apply_trigger(x, mask, pattern) -> Tensor:
    """x * (1 - M) + delta * M with the (H, W) mask broadcast across channels."""
    x, mask, pattern = (v if isinstance(v, Tensor) else Tensor(v) for v in (x, mask, pattern))
    h, w = mask.shape
    if tuple(x.shape[-3:-1]) != (h, w) or tuple(pattern.shape) != tuple(x.shape[-3:]):
        raise T.ShapeError(
            f"apply_trigger: image {x.shape}, mask {mask.shape} and pattern {pattern.shape} do not conform"
        )
    m = T.reshape(mask, (h, w, 1))
    return T.add(T.mul(x, T.sub(1.0, m)), T.mul(pattern, m))


def elastic(v: Tensor) -> Tensor:
    return T.add(T.l1_norm(v), T.l2_norm(v))


def off_trigger_pattern(mask: Tensor, pattern: Tensor) -> Tensor:
    """delta' = (1 - M) * delta: colour left outside the mask."""
    h, w = mask.shape
    return T.mul(T.sub(1.0, T.reshape(mask, (h, w, 1))), pattern)


def r1_elastic(mask: Tensor, pattern: Tensor, lam1: float, lam2: float) -> Tensor:
    """Elastic-net size penalty on the mask and on the off-trigger pattern."""
    return T.add(T.mul(elastic(mask), lam1), T.mul(elastic(off_trigger_pattern(mask, pattern)), lam2))


def smoothness(a: Tensor) -> Tensor:
    """Sum of squared horizontal and vertical neighbour differences.

    Extra trailing axes (channels) are summed over as independent planes.
    """
    a = a if isinstance(a, Tensor) else Tensor(a)
    total = Tensor(np.zeros((), dtype=a.dtype))
    if a.shape[1] > 1:
        total = T.add(total, T.sum(T.square(T.sub(a[:, :-1], a[:, 1:]))))
    if a.shape[0] > 1:
        total = T.add(total, T.sum(T.square(T.sub(a[:-1], a[1:]))))
    return total


def r2_smooth(mask: Tensor, pattern: Tensor, lam3: float, lam4: float) -> Tensor:
    return T.add(T.mul(smoothness(mask), lam3), T.mul(smoothness(off_trigger_pattern(mask, pattern)), lam4))


def crop(x, mask) -> Tensor:
    """x * (1 - M): the image with the trigger region nulled."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    h, w = mask.shape
    return T.mul(x, T.sub(1.0, T.reshape(mask, (h, w, 1))))


def r3_blocking(net: Network, images, labels, mask: Tensor, lam5: float) -> Tensor:
    """Cross-entropy of trigger-cropped images against their true labels."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("r3_blocking: empty batch")
    if lam5 == 0:
        return Tensor(np.zeros((), dtype=mask.dtype))
    return T.mul(T.softmax_cross_entropy(net.logits(crop(images, mask)), labels), lam5)


def explanation_image(mask: Tensor, pattern: Tensor) -> Tensor:
    h, w = mask.shape
    return T.reshape(T.mul(T.reshape(mask, (h, w, 1)), pattern), (1, *pattern.shape))


def r4_explanation(net: Network, mask: Tensor, pattern: Tensor, target: int, lam6: float) -> Tensor:
    """The trigger alone on a zero background should classify as ``target``."""
    if lam6 == 0:
        return Tensor(np.zeros((), dtype=mask.dtype))
    logits = net.logits(explanation_image(mask, pattern))
    return T.mul(T.softmax_cross_entropy(logits, [target]), lam6)


def base_loss(net: Network, images, mask: Tensor, pattern: Tensor, target: int) -> Tensor:
    stamped = apply_trigger(images, mask, pattern)
    return T.softmax_cross_entropy(net.logits(stamped), np.full(len(stamped.data), target))


def objective_terms(net: Network, batch, cand: TriggerCandidate, cfg: DetectorConfig,
                    lambdas=None) -> dict[str, Tensor]:
    """Base loss and each regularizer as separate scalar tensors.

    The stamped batch, the cropped batch and the explanation image go
    through the network in a single concatenated forward pass.
    """
    if cfg.mode not in MODES:
        raise ValueError(f"unknown mode {cfg.mode!r}")
    images, labels = batch
    images = np.asarray(images, dtype=cand.mask_logits.dtype)
    labels = np.asarray(labels)
    if len(images) == 0:
        raise ValueError("objective: empty batch")
    lam = cfg.initial_lambdas() if lambdas is None else np.asarray(lambdas, dtype=np.float64)
    mask, pattern = cand.mask(), cand.pattern()
    n = len(images)
    target = cand.target_class
    zero = Tensor(np.zeros((), dtype=images.dtype))

    if cfg.mode == "neural_cleanse_baseline":
        return {
            "base": base_loss(net, images, mask, pattern, target),
            "r1": T.mul(T.l1_norm(mask), float(lam[0])),
            "r2": zero, "r3": zero, "r4": zero,
        }

    parts = [apply_trigger(images, mask, pattern)]
    if lam[4] > 0:
        parts.append(crop(images, mask))
    if lam[5] > 0:
        parts.append(explanation_image(mask, pattern))
    logits = net.logits(T.concat(parts, axis=0) if len(parts) > 1 else parts[0])
    terms = {"base": T.softmax_cross_entropy(logits[:n], np.full(n, target))}
    offset = n
    if lam[4] > 0:
        terms["r3"] = T.mul(T.softmax_cross_entropy(logits[offset : offset + n], labels), float(lam[4]))
        offset += n
    else:
        terms["r3"] = zero
    if lam[5] > 0:
        terms["r4"] = T.mul(T.softmax_cross_entropy(logits[offset : offset + 1], [target]), float(lam[5]))
    else:
        terms["r4"] = zero
    terms["r1"] = r1_elastic(mask, pattern, float(lam[0]), float(lam[1]))
    terms["r2"] = r2_smooth(mask, pattern, float(lam[2]), float(lam[3]))
    return terms


def objective(net: Network, batch, cand: TriggerCandidate, cfg: DetectorConfig, lambdas=None) -> Tensor:
    """Base misclassification loss plus all regularizers of the configured mode."""
    terms = objective_terms(net, batch, cand, cfg, lambdas)
    total = terms["base"]
    for key in ("r1", "r2", "r3", "r4"):
        total = T.add(total, terms[key])
    return total


# ---------------------------------------------------------------- solver


@dataclass
class SolveResult:
    candidate: TriggerCandidate | None
    trace: list[dict] = field(default_factory=list)
    lambdas: list[float] = field(default_factory=list)
    converged: bool = False
    attack_success: float = 0.0
    error: str | None = None

    @property
    def target_class(self) -> int:
        return self.candidate.target_class


def class_seed(seed: int, target: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(target)])


def detection_pool(data: LabeledDataset) -> LabeledDataset:
    """Clean held-out images the defender is assumed to have."""
    pool = data.test() if data.has_split else data
    return pool.clean()


def _success(net: Network, cand: TriggerCandidate, images: np.ndarray) -> float:
    if len(images) == 0:
        return 0.0
    return float(np.mean(classify(net, cand.stamp(images)) == cand.target_class))


def _regularizer_values(net, batch, cand, cfg, lambdas) -> list[float]:
    terms = objective_terms(net, batch, cand, cfg, lambdas)
    return [float(terms[k].item()) for k in ("r1", "r2", "r3", "r4")]


def solve_for_target(net: Network, data: LabeledDataset, target: int, cfg: DetectorConfig,
                     on_epoch=None) -> SolveResult:
    """Restore the trigger that would send every clean image to ``target``.

    Each epoch runs Adam over the optimisation split, then stamps the
    held-out check batch with the current candidate. If the attack success
    there reaches ``phi`` every lambda is multiplied by ``step``, otherwise
    divided by it. The solve stops early once success holds and every
    regularizer value moved less than ``epsilon`` for ``patience`` epochs.

    Returned is the smallest-mask candidate among epochs that reached
    ``phi`` (the most successful one if none did). ``on_epoch`` is called
    with each trace record and the live candidate.
    """
    if not 0 <= target < net.num_classes:
        raise ValueError(f"target {target} outside [0, {net.num_classes})")
    pool = detection_pool(data)
    if len(pool) == 0:
        raise ValueError("solve_for_target: no clean images available")
    rng = np.random.default_rng(class_seed(cfg.seed, target))
    order = rng.permutation(len(pool))
    n_check = min(cfg.check_size, len(pool) // 2)
    check_idx, opt_idx = order[:n_check], order[n_check:]
    if n_check == 0:
        check_idx = opt_idx
    dtype = net.weights[0].dtype
    opt_images = pool.images[opt_idx].astype(dtype)
    opt_labels = pool.labels[opt_idx]
    check = pool.subset(check_idx)
    check_images = check.images[check.labels != target].astype(dtype)
    check_batch = (check.images.astype(dtype), check.labels)

    cand = TriggerCandidate.initial(pool.image_shape, target, cfg.mask_init, cfg.pattern_init, dtype)
    cand.mask_logits.requires_grad = True
    cand.pattern_logits.requires_grad = True
    opt = T.Adam([cand.mask_logits, cand.pattern_logits], learning_rate=cfg.learning_rate)
    lambdas = cfg.initial_lambdas()
    lam_lo, lam_hi = lambdas / cfg.lambda_span, lambdas * cfg.lambda_span

    trace: list[dict] = []
    best: TriggerCandidate | None = None
    best_key = None
    best_objective = np.inf
    prev_regs = None
    stable = 0
    converged = False
    n = len(opt_images)
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            with T.GradTape() as tape:
                loss = objective(net, (opt_images[idx], opt_labels[idx]), cand, cfg, lambdas)
            opt.step(tape.backward(loss))
            # saturated logits would take many epochs to come back once lambda grows
            np.clip(cand.mask_logits.data, -cfg.logit_bound, cfg.logit_bound, out=cand.mask_logits.data)
            np.clip(cand.pattern_logits.data, -cfg.logit_bound, cfg.logit_bound, out=cand.pattern_logits.data)
            total += loss.item() * len(idx)
        epoch_objective = total / max(n, 1)
        best_objective = min(best_objective, epoch_objective)

        success = _success(net, cand, check_images)
        regs = _regularizer_values(net, check_batch, cand, cfg, lambdas)
        mask_l1 = float(cand.mask_array().sum())
        trace.append({
            "epoch": epoch + 1,
            "objective": epoch_objective,
            "best_objective": best_objective,
            "attack_success": success,
            "mask_l1": mask_l1,
            "regularizers": regs,
            "lambdas": lambdas.tolist(),
        })

        if on_epoch is not None:
            on_epoch(trace[-1], cand)
        key = (0, mask_l1) if success >= cfg.phi else (1, -success)
        if best_key is None or key < best_key:
            best_key, best = key, cand.copy()

        if prev_regs is not None and success >= cfg.phi and all(
            abs(a - b) < cfg.epsilon for a, b in zip(regs, prev_regs)
        ):
            stable += 1
        else:
            stable = 0
        prev_regs = regs
        if stable >= cfg.patience and epoch + 1 >= cfg.warmup:
            converged = True
            break
        lambdas = lambdas * cfg.step if success >= cfg.phi else lambdas / cfg.step
        lambdas = np.clip(lambdas, lam_lo, lam_hi)

    cand.mask_logits.requires_grad = False
    cand.pattern_logits.requires_grad = False
    if best is None:
        best = cand.copy()
    final_success = _success(net, best, check_images)
    logger.info("class %d: success %.3f mask L1 %.2f after %d epochs%s", target, final_success,
                float(best.mask_array().sum()), len(trace), "" if converged else " (not converged)")
    return SolveResult(best, trace, lambdas.tolist(), converged, final_success)


def scan_all_classes(net: Network, data: LabeledDataset, cfg: DetectorConfig,
                     jobs: int = 1) -> dict[int, SolveResult]:
    """Solve every class independently; failures become flagged entries."""

    def run(k: int) -> SolveResult:
        try:
            return solve_for_target(net, data, k, cfg)
        except Exception as exc:  # one bad class must not sink the scan
            logger.error("class %d failed: %s", k, exc)
            return SolveResult(None, error=f"{type(exc).__name__}: {exc}")

    classes = range(net.num_classes)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, classes))
    else:
        results = [run(k) for k in classes]
    return dict(zip(classes, results))


# ---------------------------------------------------------------- patching


def patch_unlearning(net: Network, cand: TriggerCandidate, data: LabeledDataset, epochs: int,
                     cfg: TrainConfig | None = None, fraction: float = 0.2, tau: float = 0.01) -> Network:
    """Fine-tune on clean training data where a fraction is stamped but keeps true labels."""
    if not cand.binarized(tau).any():
        raise ValueError("nothing to patch: restored trigger mask is empty")
    cfg = cfg or TrainConfig(epochs=epochs, learning_rate=1e-3, seed=0)
    cfg = replace(cfg, epochs=epochs)
    if epochs == 0:
        return net.copy()
    clean = data.train().clean() if data.has_split else data.clean()
    rng = np.random.default_rng(cfg.seed)
    chosen = rng.choice(len(clean), size=int(round(fraction * len(clean))), replace=False)
    images = clean.images.copy()
    images[chosen] = np.clip(cand.stamp(images[chosen]), 0.0, 1.0)
    mixed = LabeledDataset(images, clean.labels, clean.num_classes)
    patched = train(net, mixed, cfg)
    patched.training_meta["patched"] = True
    return patched


# ---------------------------------------------------------------- export


def candidate_bytes(cand: TriggerCandidate, **meta) -> bytes:
    entries = [
        header_entry({"target_class": cand.target_class, **meta}),
        ("mask_logits", cand.mask_logits.data),
        ("pattern_logits", cand.pattern_logits.data),
    ]
    return encode_entries(CANDIDATE_MAGIC, entries)


def save_candidate(cand: TriggerCandidate, path, **meta) -> Path:
    path = Path(path)
    path.write_bytes(candidate_bytes(cand, **meta))
    return path


def load_candidate(path) -> TriggerCandidate:
    header, entries = split_header(decode_entries(Path(path).read_bytes(), CANDIDATE_MAGIC))
    arrays = dict(entries)
    if set(arrays) != {"mask_logits", "pattern_logits"}:
        raise FormatError(f"candidate archive has entries {sorted(arrays)}")
    return TriggerCandidate(Tensor(arrays["mask_logits"]), Tensor(arrays["pattern_logits"]),
                            int(header["target_class"]))


def export_trigger_pngs(cand: TriggerCandidate, stem, tau: float = 0.01) -> tuple[Path, Path]:
    """Write ``<stem>_trigger.png`` (M * delta, scaled to full range) and ``<stem>_mask.png``."""
    from PIL import Image

    stem = Path(stem)
    trig = cand.trigger_array()
    peak = float(trig.max())
    scaled = trig / peak if peak > 0 else trig
    img = np.round(scaled * 255).astype(np.uint8)
    if img.shape[2] == 1:
        img = img[..., 0]
    trig_path = stem.with_name(stem.name + "_trigger.png")
    mask_path = stem.with_name(stem.name + "_mask.png")
    Image.fromarray(img).save(trig_path)
    Image.fromarray((cand.binarized(tau) * 255).astype(np.uint8)).save(mask_path)
    return trig_path, mask_path
