"""Rank-4 tensors with tape-based reverse-mode differentiation.

Every tensor is an ``(n, c, h, w)`` array. Operations executed while a
:class:`Tape` is active are recorded on it whenever at least one input
requires a gradient; :meth:`Tape.backward` then walks the recorded nodes in
reverse order exactly once and accumulates gradients into the ``grad`` slot of
every leaf tensor with ``requires_grad=True``.

Gradients accumulate across backward calls. Call :func:`zero_grad` (or
``Tensor.zero_grad``) before each backward pass for fresh gradients.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

from . import kernels

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
PROB_FLOOR = 1e-7

PRECISIONS = {"train32": np.float32, "verify64": np.float64}


class DimensionError(ValueError):
    """Raised when tensor shapes do not satisfy an operation's contract."""


class ContractError(RuntimeError):
    """Raised when the differentiation contract is violated."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        data = np.asarray(data)
        if data.ndim != 4:
            raise DimensionError(f"tensor must be rank 4 (n, c, h, w), got shape {data.shape}")
        if min(data.shape) < 1:
            raise DimensionError(f"all tensor dims must be >= 1, got shape {data.shape}")
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float64)
        self.data = np.ascontiguousarray(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()


class Node(NamedTuple):
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("mimofan_tape", default=None)


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations performed inside the ``with`` block
    are appended in execution order, which is a topological order of the DAG.
    In ``verify64`` mode every recorded output must be float64 and finite.
    """

    def __init__(self, precision: str = "train32"):
        if precision not in PRECISIONS:
            raise ValueError(f"unknown precision {precision!r}; expected one of {sorted(PRECISIONS)}")
        self.precision = precision
        self.nodes: list[Node] = []
        self._produced: set[int] = set()
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def record(self, op, inputs, output, vjp) -> None:
        if self.precision == "verify64":
            if output.dtype != np.float64:
                raise ContractError(f"{op}: verify64 tape requires float64 tensors, got {output.dtype}")
            if not np.all(np.isfinite(output.data)):
                raise FloatingPointError(f"{op}: non-finite values in output")
        self.nodes.append(Node(op, tuple(inputs), output, vjp))
        self._produced.add(id(output))

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._produced

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self.produced(loss):
            raise ContractError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in self._produced:
                    if key in grads:
                        grads[key] = grads[key] + gi
                    else:
                        grads[key] = gi
                else:
                    if t.grad is None:
                        t.grad = np.zeros_like(t.data)
                    t.grad += gi


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def current_tape() -> Tape | None:
    return _active_tape.get()


def _emit(op: str, data: np.ndarray, inputs: Sequence[Tensor], make_vjp) -> Tensor:
    tape = _active_tape.get()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(op, inputs, out, make_vjp())
    elif tape is not None and tape.precision == "verify64" and not np.all(np.isfinite(out.data)):
        raise FloatingPointError(f"{op}: non-finite values in output")
    return out


def _same_shape(op, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        axes = [name for name, x, y in zip("nchw", a.shape, b.shape) if x != y]
        raise DimensionError(f"{op}: shape mismatch on axis {','.join(axes)}: {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# layer primitives
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation; ``kernel`` is (cout, cin, kh, kw), ``bias`` is (1, cout, 1, 1)."""
    n, c, h, w = x.shape
    cout, cin, kh, kw = kernel.shape
    if c != cin:
        raise DimensionError(f"conv2d: channel axis mismatch, input has {c}, kernel expects {cin}")
    if stride < 1 or pad < 0:
        raise DimensionError(f"conv2d: need stride >= 1 and pad >= 0, got stride={stride} pad={pad}")
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if oh < 1 or ow < 1 or h + 2 * pad < kh or w + 2 * pad < kw:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} does not fit padded input {h}x{w} (pad {pad})")
    if bias is not None and bias.shape != (1, cout, 1, 1):
        raise DimensionError(f"conv2d: bias must have shape (1, {cout}, 1, 1), got {bias.shape}")

    if stride == 1 and kh * kw > 1 and cin > cout:
        out, grads = _conv_taps(x, kernel, pad, oh, ow)
    else:
        out, grads = _conv_cols(x, kernel, stride, pad, oh, ow)
    if bias is not None:
        out += bias.data
    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def make_vjp():
        def vjp(g):
            gx, gw = grads(g, x.requires_grad, kernel.requires_grad)
            if bias is None:
                return gx, gw
            return gx, gw, g.sum(axis=(0, 2, 3), keepdims=True)

        return vjp

    return _emit("conv2d", out, inputs, make_vjp)


def _conv_cols(x: Tensor, kernel: Tensor, stride: int, pad: int, oh: int, ow: int):
    # im2col + one GEMM per batch item
    n, c, h, w = x.shape
    cout, cin, kh, kw = kernel.shape
    pointwise = kh == 1 and kw == 1 and stride == 1 and pad == 0
    xdata = x.data

    def columns():
        return xdata.reshape(n, c, h * w) if pointwise else kernels.im2col(xdata, kh, kw, stride, pad)

    wmat = kernel.data.reshape(cout, cin * kh * kw)
    out = np.matmul(wmat, columns()).reshape(n, cout, oh, ow)

    def grads(g, want_x, want_w):
        g2 = g.reshape(n, cout, oh * ow)
        gw = gx = None
        if want_w:
            # columns are recomputed rather than kept alive on the tape
            gw = np.matmul(g2, columns().transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
        if want_x:
            gcols = np.matmul(wmat.T, g2)
            gx = gcols.reshape(x.shape) if pointwise else kernels.col2im(gcols, x.shape, kh, kw, stride, pad)
        return gx, gw

    return out, grads


def _conv_taps(x: Tensor, kernel: Tensor, pad: int, oh: int, ow: int):
    # Stride-1 conv as one GEMM over all kernel taps followed by a shift-and-sum.
    # Cheaper than im2col when the input has more channels than the output.
    n, c, h, w = x.shape
    cout, cin, kh, kw = kernel.shape
    hp, wp = h + 2 * pad, w + 2 * pad
    xdata = x.data

    def padded():
        xp = np.pad(xdata, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xdata
        return xp.reshape(n, c, hp * wp)

    wtaps = np.ascontiguousarray(kernel.data.transpose(2, 3, 0, 1)).reshape(kh * kw * cout, cin)
    y = np.matmul(wtaps, padded()).reshape(n, kh * kw, cout, hp, wp)
    out = kernels.tap_gather(y, kh, kw, oh, ow)
    del y

    def grads(g, want_x, want_w):
        dy = kernels.tap_scatter(g, kh, kw, hp, wp).reshape(n, kh * kw * cout, hp * wp)
        gw = gx = None
        if want_w:
            gt = np.matmul(dy, padded().transpose(0, 2, 1)).sum(axis=0)
            gw = np.ascontiguousarray(gt.reshape(kh, kw, cout, cin).transpose(2, 3, 0, 1))
        if want_x:
            gxp = np.matmul(wtaps.T, dy).reshape(n, c, hp, wp)
            gx = np.ascontiguousarray(gxp[:, :, pad : pad + h, pad : pad + w]) if pad else gxp
        return gx, gw

    return out, grads


def avg_pool2(x: Tensor) -> Tensor:
    """Mean over non-overlapping 2x2 windows."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avg_pool2: spatial dims must be even, got {h}x{w}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def make_vjp():
        def vjp(g):
            q = g * 0.25
            return (np.repeat(np.repeat(q, 2, axis=2), 2, axis=3),)

        return vjp

    return _emit("avg_pool2", out, (x,), make_vjp)


def upsample2_bilinear(x: Tensor) -> Tensor:
    """x2 bilinear upsampling, half-pixel centers, border-clamped."""
    out = kernels.upsample2(x.data)

    def make_vjp():
        return lambda g: (kernels.upsample2_backward(g),)

    return _emit("upsample2_bilinear", out, (x,), make_vjp)


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Per-channel normalization; ``gamma``/``beta`` have shape (1, c, 1, 1).

    Train mode normalizes with biased batch statistics and updates the running
    estimates (unbiased variance) with the state's momentum. Eval mode uses
    the running estimates.
    """
    n, c, h, w = x.shape
    if gamma.shape != (1, c, 1, 1) or beta.shape != (1, c, 1, 1):
        raise DimensionError(f"batch_norm: gamma/beta must have shape (1, {c}, 1, 1)")
    eps = state.eps
    if training:
        m = n * h * w
        mean = x.data.mean(axis=(0, 2, 3), keepdims=True)
        xc = x.data - mean
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        unbiased = var.reshape(c) * (m / (m - 1)) if m > 1 else var.reshape(c)
        mom = state.momentum
        state.running_mean[...] = (1 - mom) * state.running_mean + mom * mean.reshape(c)
        state.running_var[...] = (1 - mom) * state.running_var + mom * unbiased
    else:
        mean = state.running_mean.reshape(1, c, 1, 1).astype(x.dtype)
        var = state.running_var.reshape(1, c, 1, 1).astype(x.dtype)
        xc = x.data - mean
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    out = gamma.data * xhat + beta.data

    def make_vjp():
        gdata = gamma.data

        def vjp(g):
            ggamma = (g * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gbeta = g.sum(axis=(0, 2, 3), keepdims=True)
            gxhat = g * gdata
            if training:
                gx = inv_std * (
                    gxhat
                    - gxhat.mean(axis=(0, 2, 3), keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
                )
            else:
                gx = gxhat * inv_std
            return gx, ggamma, gbeta

        return vjp

    return _emit("batch_norm", out, (x, gamma, beta), make_vjp)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def make_vjp():
        mask = x.data > 0
        return lambda g: (g * mask,)

    return _emit("relu", out, (x,), make_vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)

    def make_vjp():
        return lambda g: (g, g)

    return _emit("add", a.data + b.data, (a, b), make_vjp)


def scale(x: Tensor, k: float) -> Tensor:
    """Multiply by a constant."""

    def make_vjp():
        return lambda g: (g * k,)

    return _emit("scale", x.data * k, (x,), make_vjp)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat_channels: need at least one tensor")
    if len(tensors) == 1:
        return tensors[0]
    n, _, h, w = tensors[0].shape
    for t in tensors[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            axes = [nm for nm, i in (("n", 0), ("h", 2), ("w", 3)) if t.shape[i] != tensors[0].shape[i]]
            raise DimensionError(f"concat_channels: mismatch on axis {','.join(axes)}: {tensors[0].shape} vs {t.shape}")
    out = np.concatenate([t.data for t in tensors], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])

    def make_vjp():
        return lambda g: tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(tensors)))

    return _emit("concat_channels", out, tensors, make_vjp)


def softmax_channels(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def make_vjp():
        return lambda g: (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _emit("softmax_channels", p, (x,), make_vjp)


def tensor_sum(x: Tensor) -> Tensor:
    """Sum of all elements as a (1, 1, 1, 1) tensor."""
    out = np.asarray(x.data.sum(), dtype=x.dtype).reshape(1, 1, 1, 1)

    def make_vjp():
        return lambda g: (np.broadcast_to(g.reshape(()), x.shape).copy(),)

    return _emit("sum", out, (x,), make_vjp)


def weighted_sum(x: Tensor, weight: np.ndarray) -> Tensor:
    """``sum(weight * x)`` for a constant ``weight`` broadcastable to ``x``."""
    weight = np.broadcast_to(np.asarray(weight, dtype=x.dtype), x.shape)
    out = np.asarray((weight * x.data).sum(), dtype=x.dtype).reshape(1, 1, 1, 1)

    def make_vjp():
        return lambda g: (weight * g.reshape(()),)

    return _emit("weighted_sum", out, (x,), make_vjp)


def weighted_nll(prob: Tensor, weight: np.ndarray, floor: float = PROB_FLOOR) -> Tensor:
    """``-sum(weight * log(max(prob, floor)))`` as a scalar tensor.

    ``weight`` is a constant array broadcastable to ``prob`` (class weight
    times one-hot target, already divided by any normalizer).
    """
    weight = np.broadcast_to(np.asarray(weight, dtype=prob.dtype), prob.shape)
    clipped = np.maximum(prob.data, floor)
    out = np.asarray(-(weight * np.log(clipped)).sum(), dtype=prob.dtype).reshape(1, 1, 1, 1)

    def make_vjp():
        live = prob.data > floor

        def vjp(g):
            return (np.where(live, -weight / clipped, 0.0).astype(prob.dtype) * g.reshape(()),)

        return vjp

    return _emit("weighted_nll", out, (prob,), make_vjp)


__all__ = [
    "BN_EPS",
    "BN_MOMENTUM",
    "BatchNormState",
    "ContractError",
    "DimensionError",
    "PRECISIONS",
    "Tape",
    "Tensor",
    "add",
    "avg_pool2",
    "backward",
    "batch_norm",
    "concat_channels",
    "conv2d",
    "current_tape",
    "relu",
    "scale",
    "softmax_channels",
    "tensor_sum",
    "upsample2_bilinear",
    "weighted_nll",
    "weighted_sum",
    "zero_grad",
]
