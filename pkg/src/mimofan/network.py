"""MIMO-FAN topology and the U-Net / ResU-Net baselines.

Layout shared by all architectures: five feature depths, depth ``d`` carries
``filters * 2**min(d, 4)`` channels, and every block is two 3x3 conv +
batch-norm + ReLU layers. Nine blocks plus a 1x1 output head give 19
convolutions along every input-to-output path.

MIMO-FAN keeps one feature path per pyramid scale. The depth-0 block is
shared by all scales. With dense cross-scale connections enabled, encoder
block ``(d, s)`` also sees average-pooled depth ``d-1`` features of every
finer scale, and decoder block ``(d, s)`` sees upsampled depth ``d+1``
features of every coarser scale. Each scale ends in its own 1x1 softmax head.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from .pyramid import ScalePyramid, check_divisible, image_pyramid
from .tensor import (
    BatchNormState,
    DimensionError,
    Tape,
    Tensor,
    add,
    avg_pool2,
    batch_norm,
    concat_channels,
    conv2d,
    relu,
    scale,
    softmax_channels,
    upsample2_bilinear,
)

ARCHS = ("mimofan", "unet", "resunet")
DEPTHS = 5
IN_CHANNELS = 1


class ConfigurationError(ValueError):
    """Model parameters and inputs do not belong to the same configuration."""


@dataclass(frozen=True)
class NetworkConfig:
    arch: str = "mimofan"
    scales: int = 5
    filters: int = 16
    classes: int = 2
    dcc: bool = True
    dps: bool = True
    sf: bool = True

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ConfigurationError(f"unknown arch {self.arch!r}; expected one of {ARCHS}")
        if self.scales < 2:
            raise ConfigurationError(f"scales must be >= 2, got {self.scales}")
        if self.filters < 1:
            raise ConfigurationError(f"filters must be >= 1, got {self.filters}")
        if self.classes != 2:
            raise ConfigurationError("only two classes (background, foreground) are supported")

    def channels(self, depth: int) -> int:
        return self.filters * 2 ** min(depth, 4)

    @property
    def divisor(self) -> int:
        """Spatial sizes must be multiples of this."""
        if self.arch == "mimofan":
            return 1 << (self.scales - 1)
        return 1 << (DEPTHS - 1)

    def to_text(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_text(cls, text: str) -> "NetworkConfig":
        return cls(**json.loads(text))


@dataclass(frozen=True)
class BlockSpec:
    name: str
    cin: int
    cout: int
    residual: bool


def block_specs(config: NetworkConfig) -> list[BlockSpec]:
    """All conv blocks of an architecture, in construction order."""
    c = config.channels
    S = config.scales
    specs = []
    if config.arch == "mimofan":
        specs.append(BlockSpec("enc.d0.shared", IN_CHANNELS, c(0), True))
        for d in range(1, DEPTHS):
            for s in range(S):
                fan = s + 1 if config.dcc else 1
                specs.append(BlockSpec(f"enc.d{d}.s{s}", fan * c(d - 1), c(d), True))
        for d in range(DEPTHS - 2, -1, -1):
            for s in range(S):
                fan = S - s if config.dcc else 1
                specs.append(BlockSpec(f"dec.d{d}.s{s}", fan * c(d + 1), c(d), True))
    else:
        residual = config.arch == "resunet"
        specs.append(BlockSpec("enc.d0", IN_CHANNELS, c(0), residual))
        for d in range(1, DEPTHS):
            specs.append(BlockSpec(f"enc.d{d}", c(d - 1), c(d), residual))
        for d in range(DEPTHS - 2, -1, -1):
            specs.append(BlockSpec(f"dec.d{d}", c(d + 1) + c(d), c(d), residual))
    return specs


def head_names(config: NetworkConfig) -> list[str]:
    if config.arch == "mimofan":
        return [f"head.s{s}" for s in range(config.scales)]
    return ["head"]


def bn_keys(config: NetworkConfig, spec: BlockSpec) -> list[str]:
    """Running-stat keys of a block; the shared block keeps one set per scale."""
    if spec.name == "enc.d0.shared":
        return [f"{spec.name}.bn{i}@s{s}" for s in range(config.scales) for i in (1, 2)]
    return [f"{spec.name}.bn1", f"{spec.name}.bn2"]


class Model:
    """Parameters, batch-norm running statistics and mode of one network."""

    def __init__(self, config: NetworkConfig, params: dict[str, Tensor], bn: dict[str, BatchNormState]):
        self.config = config
        self.params = params
        self.bn = bn
        self.training = True

    def train(self) -> "Model":
        self.training = True
        return self

    def eval(self) -> "Model":
        self.training = False
        return self

    def parameters(self) -> Iterator[Tensor]:
        return iter(self.params.values())

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.params.values())

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: t.data for name, t in self.params.items()}
        for key, st in self.bn.items():
            out[f"{key}.running_mean"] = st.running_mean.reshape(1, -1, 1, 1)
            out[f"{key}.running_var"] = st.running_var.reshape(1, -1, 1, 1)
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = set(self.state_dict())
        missing = expected - set(state)
        extra = set(state) - expected
        if missing or extra:
            raise ConfigurationError(f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for name, t in self.params.items():
            if state[name].shape != t.shape:
                raise ConfigurationError(f"{name}: shape {state[name].shape} != {t.shape}")
            t.data = np.ascontiguousarray(state[name], dtype=t.dtype)
        for key, st in self.bn.items():
            st.running_mean = np.array(state[f"{key}.running_mean"], dtype=st.running_mean.dtype).reshape(-1)
            st.running_var = np.array(state[f"{key}.running_var"], dtype=st.running_var.dtype).reshape(-1)

    def copy(self, dtype=None) -> "Model":
        dtype = dtype or self.dtype
        params = {k: Tensor(v.data.astype(dtype, copy=True), requires_grad=True, name=k) for k, v in self.params.items()}
        bn = {
            k: BatchNormState(v.running_mean.astype(dtype, copy=True), v.running_var.astype(dtype, copy=True), v.momentum, v.eps)
            for k, v in self.bn.items()
        }
        m = Model(self.config, params, bn)
        m.training = self.training
        return m

    def forward(self, image: Tensor, features: dict | None = None) -> list[Tensor]:
        """Probability maps: one per scale for MIMO-FAN, a single map otherwise."""
        if self.config.arch == "mimofan":
            return forward_mimofan(self, image_pyramid(image, self.config.scales), features)
        return [forward_baseline(self, image, features=features)]


def build(config: NetworkConfig, seed: int, dtype=np.float32) -> Model:
    """He-normal conv kernels, zero biases, unit gamma and zero beta."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    bn: dict[str, BatchNormState] = {}

    def conv(name, cin, cout, k):
        std = np.sqrt(2.0 / (cin * k * k))
        w = rng.standard_normal((cout, cin, k, k)) * std
        params[f"{name}.weight"] = Tensor(w.astype(dtype), requires_grad=True, name=f"{name}.weight")
        params[f"{name}.bias"] = Tensor(np.zeros((1, cout, 1, 1), dtype), requires_grad=True, name=f"{name}.bias")

    def norm(name, ch):
        params[f"{name}.gamma"] = Tensor(np.ones((1, ch, 1, 1), dtype), requires_grad=True, name=f"{name}.gamma")
        params[f"{name}.beta"] = Tensor(np.zeros((1, ch, 1, 1), dtype), requires_grad=True, name=f"{name}.beta")

    for spec in block_specs(config):
        conv(f"{spec.name}.conv1", spec.cin, spec.cout, 3)
        norm(f"{spec.name}.bn1", spec.cout)
        conv(f"{spec.name}.conv2", spec.cout, spec.cout, 3)
        norm(f"{spec.name}.bn2", spec.cout)
        if spec.residual and spec.cin != spec.cout:
            conv(f"{spec.name}.proj", spec.cin, spec.cout, 1)
        for key in bn_keys(config, spec):
            bn[key] = BatchNormState.fresh(spec.cout, dtype)
    for name in head_names(config):
        conv(name, config.channels(0), config.classes, 1)
    return Model(config, params, bn)


def _block(model: Model, name: str, x: Tensor, residual: bool, bn_tag: str = "") -> Tensor:
    p = model.params
    h = conv2d(x, p[f"{name}.conv1.weight"], p[f"{name}.conv1.bias"], pad=1)
    h = relu(batch_norm(h, p[f"{name}.bn1.gamma"], p[f"{name}.bn1.beta"], model.bn[f"{name}.bn1{bn_tag}"], model.training))
    h = conv2d(h, p[f"{name}.conv2.weight"], p[f"{name}.conv2.bias"], pad=1)
    h = batch_norm(h, p[f"{name}.bn2.gamma"], p[f"{name}.bn2.beta"], model.bn[f"{name}.bn2{bn_tag}"], model.training)
    if residual:
        proj = f"{name}.proj.weight"
        skip = conv2d(x, p[proj], p[f"{name}.proj.bias"]) if proj in p else x
        h = add(h, skip)
    return relu(h)


def _head(model: Model, name: str, x: Tensor) -> Tensor:
    return softmax_channels(conv2d(x, model.params[f"{name}.weight"], model.params[f"{name}.bias"]))


def forward_mimofan(model: Model, pyramid: ScalePyramid, features: dict | None = None) -> list[Tensor]:
    """Map an image pyramid to one 2-class probability map per scale.

    If ``features`` is a dict it receives every block output keyed as
    ``enc.d{d}.s{s}`` / ``dec.d{d}.s{s}``.
    """
    cfg = model.config
    if cfg.arch != "mimofan":
        raise ConfigurationError(f"forward_mimofan called with a {cfg.arch} model")
    S = cfg.scales
    if len(pyramid) != S:
        raise ConfigurationError(f"pyramid has {len(pyramid)} levels, model expects {S}")
    feats = features if features is not None else {}

    prev = []
    for s in range(S):
        f = _block(model, "enc.d0.shared", pyramid[s], True, bn_tag=f"@s{s}")
        feats[f"enc.d0.s{s}"] = f
        prev.append(f)

    for d in range(1, DEPTHS):
        pooled = _pool_chains(prev) if cfg.dcc else None
        cur = []
        for s in range(S):
            parts = [prev[s]]
            if cfg.dcc:
                parts += [pooled[j][s - j] for j in range(s)]
            f = _block(model, f"enc.d{d}.s{s}", concat_channels(parts), True)
            feats[f"enc.d{d}.s{s}"] = f
            cur.append(f)
        prev = cur

    for d in range(DEPTHS - 2, -1, -1):
        ups = _upsample_chains(prev) if cfg.dcc else None
        cur = []
        for s in range(S):
            parts = [prev[s]]
            if cfg.dcc:
                parts += [ups[j][j - s] for j in range(s + 1, S)]
            f = _block(model, f"dec.d{d}.s{s}", concat_channels(parts), True)
            feats[f"dec.d{d}.s{s}"] = f
            cur.append(f)
        prev = cur

    return [_head(model, f"head.s{s}", prev[s]) for s in range(S)]


def _pool_chains(feats: list[Tensor]) -> list[list[Tensor]]:
    # chains[j][k] = feature of scale j pooled k times (reaching scale j + k)
    S = len(feats)
    chains = []
    for j, f in enumerate(feats):
        chain = [f]
        for _ in range(S - 1 - j):
            chain.append(avg_pool2(chain[-1]))
        chains.append(chain)
    return chains


def _upsample_chains(feats: list[Tensor]) -> list[list[Tensor]]:
    # chains[j][k] = feature of scale j upsampled k times (reaching scale j - k)
    chains = []
    for j, f in enumerate(feats):
        chain = [f]
        for _ in range(j):
            chain.append(upsample2_bilinear(chain[-1]))
        chains.append(chain)
    return chains


def forward_baseline(model: Model, image: Tensor, arch: str | None = None, features: dict | None = None) -> Tensor:
    """Five-level encoder-decoder with skip concatenations (U-Net / ResU-Net)."""
    cfg = model.config
    arch = arch or cfg.arch
    if arch not in ("unet", "resunet") or arch != cfg.arch:
        raise ConfigurationError(f"forward_baseline({arch!r}) does not match a {cfg.arch} model")
    n, c, h, w = image.shape
    if c != IN_CHANNELS:
        raise DimensionError(f"expected {IN_CHANNELS} input channel, got {c}")
    check_divisible(h, w, DEPTHS)
    residual = arch == "resunet"
    feats = features if features is not None else {}
    skips = []
    x = image
    for d in range(DEPTHS):
        if d:
            x = avg_pool2(x)
        x = _block(model, f"enc.d{d}", x, residual)
        feats[f"enc.d{d}"] = x
        skips.append(x)
    for d in range(DEPTHS - 2, -1, -1):
        x = _block(model, f"dec.d{d}", concat_channels([upsample2_bilinear(x), skips[d]]), residual)
        feats[f"dec.d{d}"] = x
    return _head(model, "head", x)


def scale_fuse(p0: Tensor, p1: Tensor) -> Tensor:
    """Mean of the finest probability map and the upsampled second-finest one."""
    if p0.shape[1] != 2 or p1.shape[1] != 2:
        raise DimensionError("scale_fuse: both inputs must be 2-channel probability maps")
    if p0.shape[0] != p1.shape[0] or p0.shape[2:] != (2 * p1.shape[2], 2 * p1.shape[3]):
        raise DimensionError(f"scale_fuse: {p1.shape} is not half the spatial size of {p0.shape}")
    return scale(add(p0, upsample2_bilinear(p1)), 0.5)


def predict_mask(prob: Tensor) -> Tensor:
    """Per-voxel argmax; an exact tie resolves to background."""
    if prob.shape[1] != 2:
        raise DimensionError(f"predict_mask expects 2 channels, got {prob.shape[1]}")
    fg = prob.data[:, 1:2] > prob.data[:, 0:1]
    return Tensor(fg.astype(prob.dtype))


def predict_proba(model: Model, image: Tensor) -> Tensor:
    """Evaluation-mode foreground/background map, scale-fused when enabled."""
    was = model.training
    model.eval()
    try:
        outs = model.forward(image)
    finally:
        model.training = was
    if model.config.arch == "mimofan" and model.config.sf:
        return scale_fuse(outs[0], outs[1])
    return outs[0]


# ---------------------------------------------------------------------------
# layer-graph analysis
# ---------------------------------------------------------------------------


def conv_path_lengths(tape: Tape, sources: list[Tensor], sinks: list[Tensor]) -> np.ndarray:
    """Longest number of conv layers on any path from each source to each sink.

    Walks the recorded op graph; only the data input of a convolution (not its
    kernel or bias) continues a path. Unreachable pairs are ``-1``.
    """
    k = len(sources)
    neg = np.full(k, -np.inf)
    depth: dict[int, np.ndarray] = {}
    for i, t in enumerate(sources):
        v = neg.copy()
        v[i] = 0
        depth[id(t)] = v
    for node in tape.nodes:
        ins = node.inputs[:1] if node.op == "conv2d" else node.inputs
        best = neg.copy()
        for t in ins:
            if id(t) in depth:
                best = np.maximum(best, depth[id(t)])
        if node.op == "conv2d":
            best = best + 1
        if np.isfinite(best).any():
            depth[id(node.output)] = best
    out = np.full((k, len(sinks)), -1, dtype=int)
    for j, t in enumerate(sinks):
        v = depth.get(id(t))
        if v is not None:
            out[:, j] = np.where(np.isfinite(v), v, -1)
    return out


def trace_conv_depths(model: Model, size: int) -> np.ndarray:
    """Run a traced forward on a ``size``x``size`` input and count conv depths."""
    m = model.copy(np.float64)
    image = Tensor(np.zeros((1, IN_CHANNELS, size, size)), requires_grad=True)
    with Tape("verify64") as tape:
        if m.config.arch == "mimofan":
            levels = image_pyramid(Tensor(image.data), m.config.scales).levels
            sources = [Tensor(t.data, requires_grad=True) for t in levels]
            outs = forward_mimofan(m, ScalePyramid(sources, "image"))
        else:
            outs = [forward_baseline(m, image)]
            sources = [image]
    return conv_path_lengths(tape, sources, outs)
