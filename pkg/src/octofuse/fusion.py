"""Multi-modal segmentation models sharing one backbone/decoder vocabulary.

Strategies:

* ``single:m`` - one encoder-decoder on modality ``m``.
* ``early`` - modalities stacked on the channel axis, one encoder-decoder.
* ``late`` - one full encoder-decoder per modality, logits averaged.
* ``octopus`` - one encoder per modality; at every stage the M feature maps
  are concatenated and squeezed back to ``C_s`` channels by a 1×1 conv
  (hyper-fusion) before entering a single skip-connection decoder.
  ``octopus+ds`` adds a 1×1 head on the fused bottom features whose loss
  is computed against majority-pooled labels.

Parameter names: ``enc{m}.*`` encoders, ``fuse{s}.*`` hyper-fusion,
``dec.*`` decoder, ``head.*`` and ``deep_head.*`` output heads; late fusion
prefixes each branch with ``branch{m}.``.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ConfigurationError, DataError, DimensionError
from .nn_blocks import (
    N_STAGES,
    EncoderSpec,
    ParamDecl,
    ParameterSet,
    StageFeatures,
    apply_bn,
    apply_conv,
    check_spatial,
    declare_bn,
    declare_conv,
    encoder_forward,
    encoder_layout,
    materialize,
)
from .tensor import (
    Tensor,
    add,
    binary_cross_entropy_with_logits,
    concat_channels,
    conv2d,
    cross_entropy,
    relu,
    scale,
    soft_dice_loss,
    upsample_nearest2x,
)

KINDS = ("single", "early", "late", "octopus")
DEFAULT_DEEP_WEIGHT = 0.3


@dataclass(frozen=True)
class FusionStrategy:
    kind: str
    modality: int = 0
    deep_supervision: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown fusion strategy {self.kind!r}")
        if self.deep_supervision and self.kind != "octopus":
            raise ConfigurationError("deep supervision is only defined for the octopus strategy")

    @classmethod
    def parse(cls, text: str) -> "FusionStrategy":
        t = text.strip().lower()
        if t.startswith("single"):
            _, _, idx = t.partition(":")
            return cls("single", int(idx or 0))
        if t in ("octopus+ds", "octopus+deep", "octopus-ds"):
            return cls("octopus", deep_supervision=True)
        return cls(t)

    def __str__(self) -> str:
        if self.kind == "single":
            return f"single:{self.modality}"
        if self.kind == "octopus" and self.deep_supervision:
            return "octopus+ds"
        return self.kind

    def label(self, modality_names: Sequence[str] | None = None) -> str:
        if self.kind == "single":
            name = modality_names[self.modality] if modality_names else str(self.modality)
            return f"Single modality ({name})"
        if self.kind == "octopus":
            return "Octopus-fusion + deep supervision" if self.deep_supervision else "Octopus-fusion"
        return {"early": "Early-fusion", "late": "Late-fusion"}[self.kind]

    def validate(self, n_modalities: int) -> None:
        if self.kind == "single" and not 0 <= self.modality < n_modalities:
            raise ConfigurationError(f"single-modality index {self.modality} out of range for M={n_modalities}")


@dataclass(frozen=True)
class ModelSpec:
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    n_modalities: int = 2
    strategy: FusionStrategy = field(default_factory=lambda: FusionStrategy("octopus"))
    n_classes: int = 2
    deep_weight: float = DEFAULT_DEEP_WEIGHT
    decoder_channels: tuple[int, ...] | None = None
    loss: str = "ce"

    def __post_init__(self):
        if self.n_modalities < 1:
            raise ConfigurationError("need at least one modality")
        if self.n_classes < 1:
            raise ConfigurationError("n_classes must be ≥ 1")
        if self.loss not in ("ce", "dice"):
            raise ConfigurationError(f"unknown loss {self.loss!r}")
        self.strategy.validate(self.n_modalities)
        if self.decoder_channels is not None:
            object.__setattr__(self, "decoder_channels", tuple(int(c) for c in self.decoder_channels))
            if len(self.decoder_channels) != N_STAGES:
                raise ConfigurationError("decoder_channels needs 4 entries (full-res, /2, /4, /8)")

    @property
    def decoder_widths(self) -> tuple[int, ...]:
        """Output widths of decoder levels at full, /2, /4 and /8 resolution."""
        if self.decoder_channels is not None:
            return self.decoder_channels
        c = self.encoder.stage_channels
        return (max(c[0] // 2, 1), c[0], c[1], c[2])

    def to_dict(self) -> dict:
        return {
            "encoder": self.encoder.to_dict(),
            "n_modalities": self.n_modalities,
            "strategy": str(self.strategy),
            "n_classes": self.n_classes,
            "deep_weight": self.deep_weight,
            "decoder_channels": list(self.decoder_channels) if self.decoder_channels else None,
            "loss": self.loss,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["encoder"] = EncoderSpec.from_dict(d["encoder"])
        d["strategy"] = FusionStrategy.parse(d["strategy"])
        if d.get("decoder_channels") is not None:
            d["decoder_channels"] = tuple(d["decoder_channels"])
        return cls(**d)


class ModelOutput(NamedTuple):
    logits: Tensor
    deep_logits: Tensor | None = None


# ---------------------------------------------------------------------------
# Layouts
# ---------------------------------------------------------------------------


def decoder_layout(encoder: EncoderSpec, widths: Sequence[int], n_classes: int) -> list[ParamDecl]:
    decls: list[ParamDecl] = []
    c = encoder.stage_channels
    path = c[3]
    for level in (3, 2, 1):
        cin = path + c[level - 1]
        declare_conv(decls, f"dec.level{level}.conv", cin, widths[level], 3)
        declare_bn(decls, f"dec.level{level}.bn", widths[level])
        path = widths[level]
    declare_conv(decls, "dec.level0.conv", path, widths[0], 3)
    declare_bn(decls, "dec.level0.bn", widths[0])
    declare_conv(decls, "head", widths[0], n_classes, 1)
    return decls


def fusion_layout(encoder: EncoderSpec, n_modalities: int) -> list[ParamDecl]:
    decls: list[ParamDecl] = []
    for s in range(N_STAGES):
        cs = encoder.stage_channels[s]
        declare_conv(decls, f"fuse{s + 1}", n_modalities * cs, cs, 1)
    return decls


def _prefixed(decls: list[ParamDecl], prefix: str) -> list[ParamDecl]:
    return [ParamDecl(prefix + d.name, d.shape, d.kind) for d in decls]


def model_components(spec: ModelSpec) -> list[tuple[str, list[ParamDecl]]]:
    """Named parameter groups; each group is seeded independently."""
    enc = spec.encoder
    m = spec.n_modalities
    dec = decoder_layout(enc, spec.decoder_widths, spec.n_classes)
    kind = spec.strategy.kind
    if kind == "octopus":
        groups = [(f"enc{i}", _prefixed(encoder_layout(enc), f"enc{i}.")) for i in range(m)]
        groups.append(("fuse", fusion_layout(enc, m)))
        groups.append(("dec", dec))
        if spec.strategy.deep_supervision:
            deep: list[ParamDecl] = []
            declare_conv(deep, "deep_head", enc.stage_channels[3], spec.n_classes, 1)
            groups.append(("deep_head", deep))
        return groups
    if kind == "early":
        return [("enc0", _prefixed(encoder_layout(enc.with_in_channels(enc.in_channels * m)), "enc0.")), ("dec", dec)]
    if kind == "single":
        return [("enc0", _prefixed(encoder_layout(enc), "enc0.")), ("dec", dec)]
    groups = []
    for i in range(m):
        groups.append((f"branch{i}.enc0", _prefixed(encoder_layout(enc), f"branch{i}.enc0.")))
        groups.append((f"branch{i}.dec", _prefixed(dec, f"branch{i}.")))
    return groups


def init_model(spec: ModelSpec, seed: int) -> ParameterSet:
    """He-initialized parameters; each group draws from its own stream keyed by
    (seed, group name), so adding or removing a group leaves the others intact."""
    ps = ParameterSet()
    for name, decls in model_components(spec):
        ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, int(seed) >> 32, zlib.crc32(name.encode())])
        ps.update(materialize(decls, np.random.default_rng(ss)))
    return ps


def parameter_groups(spec: ModelSpec) -> dict[str, int]:
    """Parameter counts split into encoders / fusion / decoder (incl. heads)."""
    out = {"encoders": 0, "fusion": 0, "decoder": 0}
    for name, decls in model_components(spec):
        n = int(sum(np.prod(d.shape) for d in decls))
        if name == "fuse":
            out["fusion"] += n
        elif name.endswith("dec") or name == "deep_head":
            out["decoder"] += n
        else:
            out["encoders"] += n
    return out


def count_model_parameters(spec: ModelSpec) -> int:
    return sum(parameter_groups(spec).values())


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------


def hyper_fuse(stage: int, features: Sequence[Tensor], ps: ParameterSet) -> Tensor:
    """Concatenate per-modality stage features and compact them with a 1×1 conv.

    ``stage`` is 1-based; ``ps`` must hold ``fuse{stage}.w`` of shape
    ``C_s × (M·C_s) × 1 × 1``.
    """
    w = ps[f"fuse{stage}.w"]
    b = ps.params.get(f"fuse{stage}.b")
    features = list(features)
    if not features:
        raise ConfigurationError("hyper_fuse needs at least one modality")
    ref = features[0].shape
    for f in features:
        if f.shape != ref:
            raise DimensionError(f"hyper_fuse: modality features differ in shape ({f.shape} vs {ref})")
    if w.shape[1] != len(features) * ref[1]:
        raise ConfigurationError(
            f"hyper_fuse stage {stage}: layer configured for {w.shape[1] // max(ref[1], 1)} modalities "
            f"({w.shape[1]} channels), got {len(features)}×{ref[1]}"
        )
    return conv2d(concat_channels(features), w, b)


def decode(ps: ParameterSet, skips: Sequence[Tensor], training: bool = True) -> Tensor:
    """Skip-concatenation decoder from the /16 bottom back to full resolution.

    ``ps`` is scoped so that ``dec.*`` and ``head.*`` resolve.
    """
    path = skips[3]
    for level in (3, 2, 1):
        path = concat_channels([upsample_nearest2x(path), skips[level - 1]])
        path = relu(apply_bn(ps, f"dec.level{level}.bn", apply_conv(ps, f"dec.level{level}.conv", path), training))
    path = upsample_nearest2x(path)
    path = relu(apply_bn(ps, "dec.level0.bn", apply_conv(ps, "dec.level0.conv", path), training))
    return apply_conv(ps, "head", path)


def _check_inputs(spec: ModelSpec, inputs: Sequence[Tensor]) -> None:
    if len(inputs) != spec.n_modalities:
        raise ConfigurationError(f"model expects {spec.n_modalities} modalities, got {len(inputs)}")
    ref = inputs[0].shape
    for x in inputs:
        if x.ndim != 4 or x.shape != ref:
            raise DimensionError(f"modality inputs must share an N×C×H×W shape, got {x.shape} vs {ref}")
    check_spatial(ref[2], ref[3])


def unet_forward(encoder: EncoderSpec, ps: ParameterSet, x: Tensor, training: bool = True) -> Tensor:
    """Plain encoder-decoder; ``ps`` holds ``enc0.*``, ``dec.*``, ``head.*``."""
    feats = encoder_forward(encoder, ps.scope("enc0."), x, training)
    return decode(ps, feats, training)


def octopus_forward(spec: ModelSpec, ps: ParameterSet, inputs: Sequence[Tensor], training: bool = True) -> ModelOutput:
    _check_inputs(spec, inputs)
    per_modality: list[StageFeatures] = [
        encoder_forward(spec.encoder, ps.scope(f"enc{i}."), x, training) for i, x in enumerate(inputs)
    ]
    fused = [hyper_fuse(s + 1, [f[s] for f in per_modality], ps) for s in range(N_STAGES)]
    logits = decode(ps, fused, training)
    deep = None
    if "deep_head.w" in ps:
        deep = apply_conv(ps, "deep_head", fused[3])
    return ModelOutput(logits, deep)


def early_forward(spec: ModelSpec, ps: ParameterSet, inputs: Sequence[Tensor], training: bool = True) -> ModelOutput:
    _check_inputs(spec, inputs)
    x = concat_channels(inputs)
    return ModelOutput(unet_forward(spec.encoder.with_in_channels(x.shape[1]), ps, x, training))


def single_forward(spec: ModelSpec, ps: ParameterSet, inputs: Sequence[Tensor], training: bool = True) -> ModelOutput:
    _check_inputs(spec, inputs)
    return ModelOutput(unet_forward(spec.encoder, ps, inputs[spec.strategy.modality], training))


def late_forward(spec: ModelSpec, ps: ParameterSet, inputs: Sequence[Tensor], training: bool = True) -> ModelOutput:
    _check_inputs(spec, inputs)
    total = None
    for i, x in enumerate(inputs):
        branch = unet_forward(spec.encoder, ps.scope(f"branch{i}."), x, training)
        total = branch if total is None else add(total, branch)
    return ModelOutput(scale(total, 1.0 / len(inputs)))


_FORWARD = {
    "octopus": octopus_forward,
    "early": early_forward,
    "single": single_forward,
    "late": late_forward,
}


def forward(spec: ModelSpec, ps: ParameterSet, inputs: Sequence[Tensor], training: bool = True) -> ModelOutput:
    return _FORWARD[spec.strategy.kind](spec, ps, inputs, training)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def majority_downsample(labels: np.ndarray, factor: int, n_classes: int) -> np.ndarray:
    """Per ``factor×factor`` cell, the most frequent label; ties go to the lowest class."""
    labels = np.asarray(labels)
    n, h, w = labels.shape
    if h % factor or w % factor:
        raise DimensionError(f"labels {h}×{w} not divisible by {factor}")
    cells = labels.reshape(n, h // factor, factor, w // factor, factor).transpose(0, 1, 3, 2, 4)
    cells = cells.reshape(n, h // factor, w // factor, factor * factor)
    k = max(n_classes, 2)
    counts = np.stack([(cells == c).sum(axis=-1) for c in range(k)], axis=-1)
    return counts.argmax(axis=-1).astype(labels.dtype)


def _criterion(logits: Tensor, labels: np.ndarray, kind: str) -> Tensor:
    if kind == "dice":
        return soft_dice_loss(logits, labels)
    if logits.shape[1] == 1:
        return binary_cross_entropy_with_logits(logits, labels)
    return cross_entropy(logits, labels)


class LossTerms(NamedTuple):
    total: Tensor
    main: Tensor
    deep: Tensor | None


def segmentation_loss_terms(
    logits: Tensor,
    deep_logits: Tensor | None,
    labels: np.ndarray,
    n_classes: int,
    deep_weight: float = DEFAULT_DEEP_WEIGHT,
    kind: str = "ce",
) -> LossTerms:
    labels = np.asarray(labels)
    hi = max(n_classes, 2) if n_classes > 1 else 2
    if labels.size and (labels.min() < 0 or labels.max() >= hi):
        raise DataError(f"labels must lie in [0, {hi}), got range [{labels.min()}, {labels.max()}]")
    main = _criterion(logits, labels, kind)
    if deep_logits is None:
        return LossTerms(main, main, None)
    factor = logits.shape[2] // deep_logits.shape[2]
    deep = _criterion(deep_logits, majority_downsample(labels, factor, n_classes), kind)
    return LossTerms(add(main, scale(deep, deep_weight)), main, deep)


def segmentation_loss(
    logits: Tensor,
    deep_logits: Tensor | None,
    labels: np.ndarray,
    n_classes: int,
    deep_weight: float = DEFAULT_DEEP_WEIGHT,
    kind: str = "ce",
) -> Tensor:
    return segmentation_loss_terms(logits, deep_logits, labels, n_classes, deep_weight, kind).total


def predict_mask(logits: np.ndarray) -> np.ndarray:
    """Argmax over classes, or sigmoid > 0.5 for a single channel."""
    if logits.shape[1] == 1:
        return (logits[:, 0] > 0).astype(np.int64)
    return logits.argmax(axis=1)
