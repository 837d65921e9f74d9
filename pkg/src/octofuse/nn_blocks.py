"""Encoder backbones exposing four stage taps at strides 2, 4, 8 and 16.

Three families share one calling convention:

* ``vgg``: per stage, ``layers`` × (3×3 conv, BN, ReLU) then 2×2 max pool.
* ``resnet``: per stage, 1×1 projection + BN, ``layers`` basic residual
  units, then 2×2 max pool.
* ``densenet``: per stage, a transition (BN, ReLU, 1×1 conv) for s ≥ 2, a
  dense block, then 2×2 average pool.

Taps are taken after each stage's downsampling.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterator, NamedTuple

import numpy as np

from .errors import ConfigurationError
from .tensor import (
    Tensor,
    add,
    avgpool2x,
    batchnorm,
    concat_channels,
    conv2d,
    maxpool2x,
    relu,
)

FAMILIES = ("vgg", "resnet", "densenet")
N_STAGES = 4


@dataclass(frozen=True)
class EncoderSpec:
    family: str = "densenet"
    in_channels: int = 3
    stem_channels: int = 8
    stage_channels: tuple[int, ...] = (16, 24, 32, 40)
    growth_rate: int = 4
    layers_per_block: tuple[int, ...] = (2, 2, 2, 2)

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        object.__setattr__(self, "layers_per_block", tuple(int(c) for c in self.layers_per_block))
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown encoder family {self.family!r}; expected one of {FAMILIES}")
        if len(self.stage_channels) != N_STAGES or len(self.layers_per_block) != N_STAGES:
            raise ConfigurationError("stage_channels and layers_per_block need exactly 4 entries")
        for v in (self.in_channels, self.stem_channels, self.growth_rate, *self.stage_channels, *self.layers_per_block):
            if v < 1:
                raise ConfigurationError(f"encoder spec values must be positive, got {v}")
        if self.family == "densenet":
            prev = self.stem_channels
            for s in range(N_STAGES):
                entering = self.block_input_channels(s)
                if entering < 1:
                    raise ConfigurationError(
                        f"densenet stage {s + 1}: stage_channels {self.stage_channels[s]} leaves no room for "
                        f"{self.layers_per_block[s]} layers of growth {self.growth_rate}"
                    )
                if s == 0 and entering != self.stem_channels:
                    raise ConfigurationError(
                        f"densenet stage 1: stem gives {self.stem_channels} channels but "
                        f"stage_channels[0] - growth*layers = {entering}"
                    )
                if entering > prev:
                    raise ConfigurationError(
                        f"densenet stage {s + 1}: transition would expand {prev} -> {entering} channels"
                    )
                prev = self.stage_channels[s]

    def block_input_channels(self, stage: int) -> int:
        """Channels entering the dense block of ``stage`` (0-based)."""
        return self.stage_channels[stage] - self.growth_rate * self.layers_per_block[stage]

    def with_in_channels(self, in_channels: int) -> "EncoderSpec":
        return EncoderSpec(**{**asdict(self), "in_channels": in_channels})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        d["layers_per_block"] = list(self.layers_per_block)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderSpec":
        return cls(**d)


def desk_densenet(in_channels: int = 3) -> EncoderSpec:
    return EncoderSpec("densenet", in_channels, 8, (16, 24, 32, 40), 4, (2, 2, 2, 2))


def stage_shapes(spec: EncoderSpec, n: int, h: int, w: int) -> list[tuple[int, int, int, int]]:
    """Closed-form tap shapes for an ``n×in×h×w`` input."""
    return [(n, spec.stage_channels[s], h >> (s + 1), w >> (s + 1)) for s in range(N_STAGES)]


class StageFeatures(NamedTuple):
    f1: Tensor
    f2: Tensor
    f3: Tensor
    f4: Tensor

    @property
    def bottom(self) -> Tensor:
        return self.f4


class ParamDecl(NamedTuple):
    name: str
    shape: tuple[int, ...]
    kind: str  # conv_w | bias | gamma | beta


class ParameterSet:
    """Named trainable tensors plus non-trainable BN running buffers."""

    def __init__(self, params: dict[str, Tensor] | None = None, buffers: dict[str, np.ndarray] | None = None):
        self.params: dict[str, Tensor] = dict(params or {})
        self.buffers: dict[str, np.ndarray] = dict(buffers or {})

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return self.params.items()

    def num_parameters(self, prefix: str = "") -> int:
        return int(sum(t.size for k, t in self.params.items() if k.startswith(prefix)))

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def scope(self, prefix: str) -> "ParameterSet":
        """View over names starting with ``prefix`` (prefix stripped, storage shared)."""
        n = len(prefix)
        return ParameterSet(
            {k[n:]: v for k, v in self.params.items() if k.startswith(prefix)},
            {k[n:]: v for k, v in self.buffers.items() if k.startswith(prefix)},
        )

    def update(self, other: "ParameterSet", prefix: str = "") -> None:
        for k, v in other.params.items():
            self.params[prefix + k] = v
        for k, v in other.buffers.items():
            self.buffers[prefix + k] = v

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"param:{k}": v.data for k, v in self.params.items()}
        out.update({f"buffer:{k}": v for k, v in self.buffers.items()})
        return out

    @classmethod
    def from_state_dict(cls, state: dict[str, np.ndarray]) -> "ParameterSet":
        ps = cls()
        for key, arr in state.items():
            kind, _, name = key.partition(":")
            if kind == "param":
                ps.params[name] = Tensor(arr, requires_grad=True, dtype=arr.dtype)
            elif kind == "buffer":
                ps.buffers[name] = np.array(arr, copy=True)
            else:
                raise ConfigurationError(f"unrecognized state entry {key!r}")
        return ps

    def copy(self) -> "ParameterSet":
        return ParameterSet.from_state_dict({k: v.copy() for k, v in self.state_dict().items()})

    def astype(self, dtype) -> "ParameterSet":
        return ParameterSet.from_state_dict({k: v.astype(dtype) for k, v in self.state_dict().items()})


# ---------------------------------------------------------------------------
# Layer helpers: each comes as a (declare, apply) pair keyed by name.
# ---------------------------------------------------------------------------


def declare_conv(decls: list, name: str, cin: int, cout: int, k: int, bias: bool = True) -> None:
    decls.append(ParamDecl(f"{name}.w", (cout, cin, k, k), "conv_w"))
    if bias:
        decls.append(ParamDecl(f"{name}.b", (cout,), "bias"))


def declare_bn(decls: list, name: str, c: int) -> None:
    decls.append(ParamDecl(f"{name}.gamma", (c,), "gamma"))
    decls.append(ParamDecl(f"{name}.beta", (c,), "beta"))


def apply_conv(ps: ParameterSet, name: str, x: Tensor, stride: int = 1) -> Tensor:
    w = ps[f"{name}.w"]
    b = ps.params.get(f"{name}.b")
    return conv2d(x, w, b, stride=stride, padding=w.shape[2] // 2)


def apply_bn(ps: ParameterSet, name: str, x: Tensor, training: bool) -> Tensor:
    return batchnorm(
        x,
        ps[f"{name}.gamma"],
        ps[f"{name}.beta"],
        ps.buffers[f"{name}.running_mean"],
        ps.buffers[f"{name}.running_var"],
        training,
    )


def materialize(decls: list[ParamDecl], seed: int | np.random.Generator) -> ParameterSet:
    """He-normal conv weights, zero biases, BN gamma=1 / beta=0."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    ps = ParameterSet()
    for d in decls:
        if d.kind == "conv_w":
            fan_in = d.shape[1] * d.shape[2] * d.shape[3]
            arr = rng.standard_normal(d.shape) * np.sqrt(2.0 / fan_in)
        elif d.kind == "gamma":
            arr = np.ones(d.shape)
        else:
            arr = np.zeros(d.shape)
        ps.params[d.name] = Tensor(arr, requires_grad=True)
        if d.kind == "gamma":
            stem = d.name[: -len(".gamma")]
            ps.buffers[f"{stem}.running_mean"] = np.zeros(d.shape, dtype=ps.params[d.name].dtype)
            ps.buffers[f"{stem}.running_var"] = np.ones(d.shape, dtype=ps.params[d.name].dtype)
    return ps


# ---------------------------------------------------------------------------
# Dense block
# ---------------------------------------------------------------------------


def declare_dense_block(decls: list, name: str, cin: int, growth_rate: int, layers: int) -> int:
    if growth_rate < 1 or layers < 1:
        raise ConfigurationError(f"dense block needs growth_rate ≥ 1 and layers ≥ 1, got {growth_rate}, {layers}")
    c = cin
    for i in range(layers):
        declare_bn(decls, f"{name}.layer{i}.bn", c)
        declare_conv(decls, f"{name}.layer{i}.conv", c, growth_rate, 3)
        c += growth_rate
    return c


def dense_block(ps: ParameterSet, name: str, x: Tensor, growth_rate: int, layers: int, training: bool = True) -> Tensor:
    """Each layer (BN, ReLU, 3×3 conv) sees the concatenation of everything before it."""
    if growth_rate < 1 or layers < 1:
        raise ConfigurationError(f"dense block needs growth_rate ≥ 1 and layers ≥ 1, got {growth_rate}, {layers}")
    feats = [x]
    for i in range(layers):
        inp = concat_channels(feats) if len(feats) > 1 else x
        h = relu(apply_bn(ps, f"{name}.layer{i}.bn", inp, training))
        feats.append(apply_conv(ps, f"{name}.layer{i}.conv", h))
    return concat_channels(feats)


# ---------------------------------------------------------------------------
# Encoders
# ---------------------------------------------------------------------------


def encoder_layout(spec: EncoderSpec) -> list[ParamDecl]:
    decls: list[ParamDecl] = []
    declare_conv(decls, "stem.conv", spec.in_channels, spec.stem_channels, 3)
    declare_bn(decls, "stem.bn", spec.stem_channels)
    prev = spec.stem_channels
    for s in range(N_STAGES):
        cs = spec.stage_channels[s]
        nl = spec.layers_per_block[s]
        tag = f"stage{s + 1}"
        if spec.family == "vgg":
            c = prev
            for i in range(nl):
                declare_conv(decls, f"{tag}.conv{i}", c, cs, 3)
                declare_bn(decls, f"{tag}.bn{i}", cs)
                c = cs
        elif spec.family == "resnet":
            declare_conv(decls, f"{tag}.proj", prev, cs, 1)
            declare_bn(decls, f"{tag}.proj_bn", cs)
            for i in range(nl):
                declare_conv(decls, f"{tag}.unit{i}.conv_a", cs, cs, 3)
                declare_bn(decls, f"{tag}.unit{i}.bn_a", cs)
                declare_conv(decls, f"{tag}.unit{i}.conv_b", cs, cs, 3)
                declare_bn(decls, f"{tag}.unit{i}.bn_b", cs)
        else:
            entering = spec.block_input_channels(s)
            if s > 0:
                declare_bn(decls, f"{tag}.trans.bn", prev)
                declare_conv(decls, f"{tag}.trans.conv", prev, entering, 1)
            declare_dense_block(decls, f"{tag}.block", entering, spec.growth_rate, nl)
        prev = cs
    return decls


def init_params(spec: EncoderSpec, seed: int | np.random.Generator) -> ParameterSet:
    return materialize(encoder_layout(spec), seed)


def count_parameters(spec: EncoderSpec) -> int:
    return int(sum(np.prod(d.shape) for d in encoder_layout(spec)))


def check_spatial(h: int, w: int, factor: int = 16) -> None:
    if h % factor or w % factor or h < factor or w < factor:
        raise ConfigurationError(f"spatial extents {h}×{w} must be positive multiples of {factor}")


def encoder_forward(spec: EncoderSpec, ps: ParameterSet, x: Tensor, training: bool = True) -> StageFeatures:
    if x.ndim != 4:
        raise ConfigurationError(f"encoder input must be N×C×H×W, got {x.shape}")
    check_spatial(x.shape[2], x.shape[3])
    if x.shape[1] != spec.in_channels:
        raise ConfigurationError(f"encoder expects {spec.in_channels} input channels, got {x.shape[1]}")
    h = relu(apply_bn(ps, "stem.bn", apply_conv(ps, "stem.conv", x), training))
    taps = []
    for s in range(N_STAGES):
        nl = spec.layers_per_block[s]
        tag = f"stage{s + 1}"
        if spec.family == "vgg":
            for i in range(nl):
                h = relu(apply_bn(ps, f"{tag}.bn{i}", apply_conv(ps, f"{tag}.conv{i}", h), training))
            h = maxpool2x(h)
        elif spec.family == "resnet":
            h = apply_bn(ps, f"{tag}.proj_bn", apply_conv(ps, f"{tag}.proj", h), training)
            for i in range(nl):
                u = relu(apply_bn(ps, f"{tag}.unit{i}.bn_a", apply_conv(ps, f"{tag}.unit{i}.conv_a", h), training))
                u = apply_bn(ps, f"{tag}.unit{i}.bn_b", apply_conv(ps, f"{tag}.unit{i}.conv_b", u), training)
                h = relu(add(h, u))
            h = maxpool2x(h)
        else:
            if s > 0:
                h = apply_conv(ps, f"{tag}.trans.conv", relu(apply_bn(ps, f"{tag}.trans.bn", h, training)))
            h = dense_block(ps, f"{tag}.block", h, spec.growth_rate, nl, training)
            h = avgpool2x(h)
        taps.append(h)
    return StageFeatures(*taps)
