"""Central finite differences in 64-bit, used as the gradient oracle."""
from __future__ import annotations

import numpy as np


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """d f / d x by central differences; ``f`` maps the array (mutated in place) to a float."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f(x)
        x[i] = old - h
        down = f(x)
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(numeric).max(initial=0.0), np.abs(analytic).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


# ---------------------------------------------------------------- primitive cases

from trojanscan import tensor as T  # noqa: E402


def _away_from_zero(rng, shape, gap=0.1):
    x = rng.uniform(gap, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return x


def _distinct(rng, shape):
    # maxpool and relu need inputs with no near-ties or near-zeros
    n = int(np.prod(shape))
    vals = rng.permutation(n).astype(np.float64) * 0.1 - 0.05 * n + 0.05
    return vals.reshape(shape) + rng.uniform(-0.01, 0.01, size=shape)


def _labels(rng, n, c):
    return rng.integers(0, c, size=n)


PRIMITIVES = {
    "add": (lambda r: [r.normal(size=(3, 4)), r.normal(size=(4,))], lambda a, b: T.add(a, b)),
    "sub": (lambda r: [r.normal(size=(3, 1)), r.normal(size=(3, 4))], lambda a, b: T.sub(a, b)),
    "mul": (lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(3, 1))], lambda a, b: T.mul(a, b)),
    "scalar_mul": (lambda r: [r.normal(size=(5,))], lambda a: T.mul(a, 2.5)),
    "square": (lambda r: [r.normal(size=(4, 3))], T.square),
    "log": (lambda r: [r.uniform(0.2, 3.0, size=(6,))], T.log),
    "relu": (lambda r: [_away_from_zero(r, (4, 5))], T.relu),
    "sigmoid": (lambda r: [r.normal(scale=3, size=(4, 5))], T.sigmoid),
    "softmax": (lambda r: [r.normal(size=(3, 5))], T.softmax),
    "sum": (lambda r: [r.normal(size=(3, 4))], lambda a: T.sum(a, axis=1)),
    "mean": (lambda r: [r.normal(size=(3, 4))], T.mean),
    "l1_norm": (lambda r: [_away_from_zero(r, (7,))], T.l1_norm),
    "l2_norm": (lambda r: [r.normal(size=(3, 3))], T.l2_norm),
    "reshape": (lambda r: [r.normal(size=(2, 6))], lambda a: T.reshape(a, (3, 4))),
    "getitem": (lambda r: [r.normal(size=(4, 5))], lambda a: a[1:3, ::2]),
    "concat": (lambda r: [r.normal(size=(2, 3)), r.normal(size=(1, 3))], lambda a, b: T.concat([a, b], axis=0)),
    "matmul": (lambda r: [r.normal(size=(3, 4)), r.normal(size=(4, 2))], T.matmul),
    "conv2d": (lambda r: [r.normal(size=(2, 5, 6, 2)), r.normal(size=(3, 3, 2, 3))], T.conv2d),
    "maxpool2d": (lambda r: [_distinct(r, (2, 5, 4, 2))], T.maxpool2d),
    "softmax_cross_entropy": (
        lambda r: [r.normal(size=(4, 5))],
        lambda a, _lab=None: T.softmax_cross_entropy(a, [0, 3, 4, 1]),
    ),
    "cross_entropy": (
        lambda r: [r.uniform(0.1, 1.0, size=(3, 4))],
        lambda a: T.cross_entropy(a, np.eye(4)[[1, 0, 3]]),
    ),
}


def check_primitive(name: str, seed: int, h: float = 1e-6) -> float:
    """Max relative error over all inputs of one random instance of a primitive."""
    make, fn = PRIMITIVES[name]
    rng = np.random.default_rng([seed, len(name)])
    arrays = [np.asarray(a, dtype=np.float64) for a in make(rng)]
    probe = [T.Tensor(a.copy()) for a in arrays]
    weights = rng.normal(size=fn(*probe).shape)

    def value(*arrs):
        return float((fn(*[T.Tensor(a) for a in arrs]).data * weights).sum())

    leaves = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
    with T.GradTape() as tape:
        out = fn(*leaves)
        loss = T.sum(T.mul(out, weights))
    grads = tape.gradient(loss, leaves)
    worst = 0.0
    for k, a in enumerate(arrays):
        def f(x, k=k):
            args = [arr if j != k else x for j, arr in enumerate(arrays)]
            return value(*args)
        worst = max(worst, relative_error(grads[k], numeric_grad(f, a.copy(), h)))
    return worst


# ---------------------------------------------------------------- full objective

def objective_instance(seed: int, mode: str = "tabor"):
    """A random 64-bit network, batch, candidate and lambda vector."""
    from trojanscan.detector import DetectorConfig, TriggerCandidate
    from trojanscan.model import build, desk_architecture

    rng = np.random.default_rng([seed, 99])
    shape = (8, 8, 2)
    net = build(desk_architecture(3, shape, width=3), seed, dtype=np.float64)
    for w in net.weights:
        w.data[...] = rng.normal(scale=0.5, size=w.shape)
    images = rng.uniform(size=(4, *shape))
    labels = rng.integers(0, 3, size=4)
    cand = TriggerCandidate(T.Tensor(rng.normal(scale=2, size=shape[:2])),
                            T.Tensor(rng.normal(scale=2, size=shape)), int(rng.integers(0, 3)))
    lambdas = rng.uniform(0.1, 1.0, size=6)
    cfg = DetectorConfig(mode=mode, baseline_lambda=float(lambdas[0]))
    return net, (images, labels), cand, cfg, lambdas


def check_objective(seed: int, mode: str = "tabor", h: float = 1e-6) -> float:
    """Max relative error of d objective / d (mask_logits, pattern_logits)."""
    from trojanscan.detector import TriggerCandidate, objective

    net, batch, cand, cfg, lambdas = objective_instance(seed, mode)
    m0, p0 = cand.mask_logits.data.copy(), cand.pattern_logits.data.copy()

    def value(m, p):
        c = TriggerCandidate(T.Tensor(m), T.Tensor(p), cand.target_class)
        return objective(net, batch, c, cfg, lambdas).item()

    cand.mask_logits.requires_grad = True
    cand.pattern_logits.requires_grad = True
    with T.GradTape() as tape:
        loss = objective(net, batch, cand, cfg, lambdas)
    gm, gp = tape.gradient(loss, [cand.mask_logits, cand.pattern_logits])
    nm = numeric_grad(lambda m: value(m, p0), m0.copy(), h)
    np_ = numeric_grad(lambda p: value(m0, p), p0.copy(), h)
    return max(relative_error(gm, nm), relative_error(gp, np_))
