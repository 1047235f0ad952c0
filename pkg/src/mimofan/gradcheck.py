"""Central finite-difference verification of every differentiable primitive.

Each check draws a random small problem (at most 4x4x6x6), reduces the
primitive's output to a scalar with a fixed random projection, and compares
the tape gradient of every input with central differences in float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .metrics import ClassWeights, dps_loss
from .network import NetworkConfig, build, scale_fuse
from .pyramid import image_pyramid, label_pyramid

FD_EPS = 1e-4
MIN_EPS = 1e-8
PRIMITIVE_TOL = 1e-4
NETWORK_TOL = 1e-3
DENOM_FLOOR = 1e-8


@dataclass(frozen=True)
class CheckResult:
    name: str
    seed: int
    max_rel_error: float
    tolerance: float
    refined: int = 0  # coordinates whose step was shrunk to avoid a ReLU kink

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    return float(np.max(np.abs(analytic - numeric) / (np.abs(numeric) + DENOM_FLOOR)))


def _dims(rng, even=False, min_hw=1):
    n, c = rng.integers(1, 5, size=2)
    if even:
        h, w = 2 * rng.integers(1, 4, size=2)
    else:
        h, w = rng.integers(min_hw, 7, size=2)
    return int(n), int(c), int(h), int(w)


def _conv(rng):
    k = int(rng.integers(1, 4))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    n, c, h, w = _dims(rng, min_hw=max(1, k - 2 * pad))
    cout = int(rng.integers(1, 5))
    arrays = [rng.standard_normal((n, c, h, w)), rng.standard_normal((cout, c, k, k)), rng.standard_normal((1, cout, 1, 1))]
    return (lambda x, wt, b: T.conv2d(x, wt, b, stride=stride, pad=pad)), arrays


def _bn(training):
    def build_case(rng):
        n, c, h, w = _dims(rng)
        while n * h * w < 4:
            n, c, h, w = _dims(rng)
        state = T.BatchNormState(rng.standard_normal(c), rng.uniform(0.5, 2.0, c))
        arrays = [rng.standard_normal((n, c, h, w)) * 2 + 0.5, rng.uniform(0.5, 1.5, (1, c, 1, 1)), rng.standard_normal((1, c, 1, 1))]

        def f(x, g, b):
            st = T.BatchNormState(state.running_mean.copy(), state.running_var.copy())
            return T.batch_norm(x, g, b, st, training)

        return f, arrays

    return build_case


def _relu(rng):
    shape = _dims(rng)
    x = rng.uniform(0.05, 1.5, shape) * rng.choice([-1.0, 1.0], shape)
    return T.relu, [x]


def _concat(rng):
    n, _, h, w = _dims(rng)
    parts = [rng.standard_normal((n, int(rng.integers(1, 5)), h, w)) for _ in range(int(rng.integers(2, 4)))]
    return (lambda *xs: T.concat_channels(xs)), parts


def _weighted_nll(rng):
    shape = _dims(rng)
    weight = rng.uniform(0.1, 2.0, shape)
    return (lambda p: T.weighted_nll(p, weight)), [rng.uniform(0.05, 1.0, shape)]


def _dps(rng):
    scales = int(rng.integers(1, 4))
    n = int(rng.integers(1, 3))
    size = 1 << scales
    masks = label_pyramid(T.Tensor((rng.random((n, 1, size, size)) > 0.5).astype(float)), scales)
    arrays = []
    for s in range(scales):
        fg = rng.uniform(0.05, 0.95, (n, 1, size >> s, size >> s))
        arrays.append(np.concatenate([1 - fg, fg], axis=1))
    weights = ClassWeights(*rng.uniform(0.1, 2.0, 2))
    return (lambda *ps: dps_loss(list(ps), masks, weights)), arrays


def _scale_fuse(rng):
    n = int(rng.integers(1, 4))
    h, w = rng.integers(1, 4, size=2)
    return scale_fuse, [rng.uniform(0.05, 1, (n, 2, 2 * h, 2 * w)), rng.uniform(0.05, 1, (n, 2, h, w))]


def _unary(fn, even=False):
    return lambda rng: (fn, [rng.standard_normal(_dims(rng, even=even))])


def _binary(fn):
    def build_case(rng):
        shape = _dims(rng)
        return fn, [rng.standard_normal(shape), rng.standard_normal(shape)]

    return build_case


PRIMITIVES: dict[str, Callable] = {
    "conv2d": _conv,
    "avg_pool2": _unary(T.avg_pool2, even=True),
    "upsample2_bilinear": _unary(T.upsample2_bilinear),
    "batch_norm_train": _bn(True),
    "batch_norm_eval": _bn(False),
    "relu": _relu,
    "add": _binary(T.add),
    "scale": _unary(lambda x: T.scale(x, -1.7)),
    "concat_channels": _concat,
    "softmax_channels": _unary(T.softmax_channels),
    "sum": _unary(T.tensor_sum),
    "weighted_nll": _weighted_nll,
    "dps_loss": _dps,
    "scale_fuse": _scale_fuse,
}


def _projected(fn, tensors, proj):
    out = fn(*tensors)
    return T.weighted_sum(out, proj)


def check_primitive(name: str, seed: int, eps: float = FD_EPS) -> CheckResult:
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    fn, arrays = PRIMITIVES[name](rng)
    arrays = [np.ascontiguousarray(a, dtype=np.float64) for a in arrays]
    probe = fn(*[T.Tensor(a) for a in arrays])
    proj = rng.standard_normal(probe.shape)

    tensors = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
    with T.Tape("verify64") as tape:
        loss = _projected(fn, tensors, proj)
    T.zero_grad(tensors)
    tape.backward(loss)

    worst = 0.0
    for i, a in enumerate(arrays):
        numeric = np.zeros_like(a)
        for j in range(a.size):
            vals = []
            for delta in (eps, -eps):
                pert = [x.copy() for x in arrays]
                pert[i].reshape(-1)[j] += delta
                vals.append(_projected(fn, [T.Tensor(x) for x in pert], proj).item())
            numeric.reshape(-1)[j] = (vals[0] - vals[1]) / (2 * eps)
        worst = max(worst, rel_error(tensors[i].grad, numeric))
    return CheckResult(name, seed, worst, PRIMITIVE_TOL)


NETWORK_CONFIG = NetworkConfig(arch="mimofan", scales=3, filters=2)
NETWORK_SIZE = 16


def _relu_pattern(tape: T.Tape) -> np.ndarray:
    masks = [n.inputs[0].data.reshape(-1) > 0 for n in tape.nodes if n.op == "relu"]
    return np.concatenate(masks) if masks else np.zeros(0, bool)


def check_network(seed: int, coords: int = 16, eps: float = FD_EPS, config: NetworkConfig = NETWORK_CONFIG) -> CheckResult:
    """End-to-end deep-supervision loss gradient on sampled parameter entries.

    The network is only piecewise smooth. When a stencil point lands on a
    different ReLU activation pattern than the unperturbed point, the central
    difference straddles a kink and says nothing about the derivative, so the
    step is shrunk tenfold (down to ``MIN_EPS``) until both sides stay on the
    same smooth piece.
    """
    rng = np.random.default_rng([seed, 7919])
    model = build(config, seed, dtype=np.float64)
    x = T.Tensor(rng.random((2, 1, NETWORK_SIZE, NETWORK_SIZE)))
    y = (rng.random((2, 1, NETWORK_SIZE, NETWORK_SIZE)) > 0.5).astype(np.float64)
    labels = label_pyramid(T.Tensor(y), config.scales)

    def evaluate():
        with T.Tape("verify64") as tape:
            loss = dps_loss(model.forward(x), labels)
        return loss, tape

    loss, tape = evaluate()
    base = _relu_pattern(tape)
    model.zero_grad()
    tape.backward(loss)

    names = sorted(model.params)
    analytic, numeric = [], []
    refined = 0
    for _ in range(coords):
        p = model.params[names[int(rng.integers(len(names)))]]
        j = int(rng.integers(p.data.size))
        flat = p.data.reshape(-1)
        orig = flat[j]
        h = eps
        while True:
            vals, same = [], True
            for delta in (h, -h):
                flat[j] = orig + delta
                val, t = evaluate()
                vals.append(val.item())
                same = same and np.array_equal(_relu_pattern(t), base)
            flat[j] = orig
            if same or h <= MIN_EPS:
                break
            h /= 10
        refined += h < eps
        analytic.append(p.grad.reshape(-1)[j])
        numeric.append((vals[0] - vals[1]) / (2 * h))
    return CheckResult("network", seed, rel_error(np.array(analytic), np.array(numeric)), NETWORK_TOL, refined)


def run_suite(ops=None, seeds: int = 20) -> list[CheckResult]:
    """Run the checks named in ``ops`` (all primitives plus ``network`` by default)."""
    names = list(ops) if ops else [*PRIMITIVES, "network"]
    results = []
    for name in names:
        if name != "network" and name not in PRIMITIVES:
            raise KeyError(f"unknown check {name!r}; choose from {sorted([*PRIMITIVES, 'network'])}")
        for seed in range(seeds):
            results.append(check_network(seed) if name == "network" else check_primitive(name, seed))
    return results
