"""SGD with step decay, the minibatch training loop, and Dice evaluation."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .checkpoint import save_checkpoint
from .data import MultiModalVolume, volume_slices
from .errors import ConfigurationError, ContractError, NonFiniteError, TrainingError
from .fusion import ModelSpec, forward, init_model, predict_mask, segmentation_loss_terms
from .nn_blocks import ParameterSet
from .tensor import Tensor, default_dtype, no_grad

log = logging.getLogger(__name__)

PRECISIONS = {"f32": np.float32, "f64": np.float64}


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.05
    decay_factor: float = 10.0
    decay_every: int = 20
    momentum: float = 0.9
    epochs: int = 60
    batch_size: int = 16
    deep_weight: float = 0.3
    seed: int = 0
    precision: str = "f64"
    max_steps: int | None = None
    eval_every: int = 1

    def __post_init__(self):
        if self.lr0 < 0:
            raise ConfigurationError("lr0 must be ≥ 0")
        if self.decay_every < 1:
            raise ConfigurationError("decay_every must be a positive epoch count (use epochs+1 for a constant lr)")
        if self.decay_factor <= 0:
            raise ConfigurationError("decay_factor must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError("momentum must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigurationError("epochs ≥ 0, batch_size ≥ 1 and eval_every ≥ 1 required")
        if self.precision not in PRECISIONS:
            raise ConfigurationError(f"precision must be one of {sorted(PRECISIONS)}")
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigurationError("max_steps must be ≥ 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        d = dict(d)
        preset = d.pop("preset", None)
        base = PRESETS[preset] if preset else cls()
        return replace(base, **d)


PRESETS = {
    "desk": TrainConfig(),
    # long schedule: lr 0.7, divided by 10 every 35 epochs
    "paper-schedule": TrainConfig(lr0=0.7, decay_factor=10.0, decay_every=35),
}


def lr_at(config: TrainConfig, epoch: int) -> float:
    if epoch < 0:
        raise ConfigurationError("epoch must be ≥ 0")
    k = epoch // config.decay_every
    # multiplying by the reciprocal power underflows to 0 instead of overflowing;
    # rounding to 15 significant digits drops binary representation noise so a
    # decimal schedule stays decimal (0.7 -> 0.07, not 0.06999999999999999)
    return float(f"{config.lr0 * (1.0 / config.decay_factor) ** k:.15g}")


def sgd_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    lr: float,
    momentum: float,
    velocity: dict[str, np.ndarray],
) -> None:
    """In place: ``v <- momentum*v + g``, ``p <- p - lr*v``."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ContractError(f"sgd_step: grad for {name!r} has shape {g.shape}, param {p.shape}")
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(p)
        elif v.shape != p.shape:
            raise ContractError(f"sgd_step: velocity for {name!r} has shape {v.shape}, param {p.shape}")
        v *= momentum
        v += g
        p -= lr * v


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ContractError(f"dice: shapes {pred.shape} and {gt.shape} differ")
    a = pred.astype(bool)
    b = gt.astype(bool)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def foreground_classes(n_classes: int) -> list[int]:
    return [1] if n_classes <= 2 else list(range(1, n_classes))


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------


def stack_samples(volumes: Sequence[MultiModalVolume]) -> tuple[np.ndarray, np.ndarray]:
    """All slices of all volumes: inputs S×M×3×H×W and labels S×H×W."""
    xs, ys = zip(*(volume_slices(v) for v in volumes))
    return np.concatenate(xs), np.concatenate(ys)


def _model_inputs(batch: np.ndarray, dtype) -> list[Tensor]:
    return [Tensor(batch[:, m], dtype=dtype) for m in range(batch.shape[1])]


def predict_volume(spec: ModelSpec, ps: ParameterSet, volume: MultiModalVolume, batch_size: int = 32, dtype=np.float64) -> np.ndarray:
    x, _ = volume_slices(volume)
    out = []
    with no_grad(), default_dtype(dtype):
        for lo in range(0, len(x), batch_size):
            logits = forward(spec, ps, _model_inputs(x[lo : lo + batch_size], dtype), training=False).logits
            out.append(predict_mask(logits.data))
    return np.concatenate(out)


def evaluate(spec: ModelSpec, ps: ParameterSet, volumes: Sequence[MultiModalVolume], batch_size: int = 32, dtype=np.float64) -> np.ndarray:
    """Volumetric Dice per volume and foreground class, shape ``V × classes``."""
    classes = foreground_classes(spec.n_classes)
    scores = np.zeros((len(volumes), len(classes)))
    for i, vol in enumerate(volumes):
        pred = predict_volume(spec, ps, vol, batch_size, dtype)
        for j, c in enumerate(classes):
            scores[i, j] = dice(pred == c, vol.labels == c)
    return scores


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    params: ParameterSet
    loss_curve: list[tuple[int, int, float, float]]
    val_dice: float
    val_scores: np.ndarray
    best_epoch: int
    steps: int
    val_history: list[tuple[int, float]] = field(default_factory=list)

    def save(self, path, spec: ModelSpec, config: TrainConfig | None = None) -> None:
        meta = {"model_spec": spec.to_dict(), "val_dice": self.val_dice, "best_epoch": self.best_epoch}
        if config is not None:
            meta["train_config"] = config.to_dict()
        save_checkpoint(path, self.params.state_dict(), meta)


def write_loss_curve(path, rows: Sequence[tuple[int, int, float, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "step", "loss", "lr"])
        for epoch, step, loss, lr in rows:
            w.writerow([epoch, step, repr(float(loss)), repr(float(lr))])


def train_model(
    spec: ModelSpec,
    train_set: Sequence[MultiModalVolume],
    val_set: Sequence[MultiModalVolume],
    config: TrainConfig,
    init: ParameterSet | None = None,
) -> TrainResult:
    """Minibatch SGD over 2.5-D slices; returns the best-validation-Dice snapshot.

    Deterministic for a given ``config.seed`` when BLAS runs single-threaded.
    """
    if not train_set:
        raise ConfigurationError("empty training set")
    for v in list(train_set) + list(val_set):
        if v.n_modalities != spec.n_modalities:
            raise ConfigurationError(
                f"volume {v.volume_id!r} has {v.n_modalities} modalities, model expects {spec.n_modalities}"
            )
    dtype = PRECISIONS[config.precision]
    spec = replace(spec, deep_weight=config.deep_weight)
    with default_dtype(dtype):
        ps = init.astype(dtype) if init is not None else init_model(spec, config.seed)
    x_all, y_all = stack_samples(train_set)
    x_all = x_all.astype(dtype, copy=False)
    rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), 0x5EED]))
    velocity: dict[str, np.ndarray] = {}
    curve: list[tuple[int, int, float, float]] = []
    history: list[tuple[int, float]] = []
    best = (-math.inf, -1, ps.copy(), np.zeros((0, 0)))
    step = 0

    def validate(epoch):
        nonlocal best
        if not val_set:
            best = (math.nan, epoch, ps.copy(), np.zeros((0, 0)))
            return
        try:
            scores = evaluate(spec, ps, val_set, dtype=dtype)
        except NonFiniteError as exc:
            raise TrainingError(f"training diverged by step {step}: {exc}", step=step) from None
        score = float(scores.mean())
        history.append((epoch, score))
        if score > best[0]:
            best = (score, epoch, ps.copy(), scores)

    if config.epochs == 0:
        validate(-1)
    stop = False
    for epoch in range(config.epochs):
        lr = lr_at(config, epoch)
        order = rng.permutation(len(x_all))
        for lo in range(0, len(order), config.batch_size):
            if config.max_steps is not None and step >= config.max_steps:
                stop = True
                break
            idx = order[lo : lo + config.batch_size]
            try:
                with default_dtype(dtype):
                    out = forward(spec, ps, _model_inputs(x_all[idx], dtype), training=True)
                    terms = segmentation_loss_terms(
                        out.logits, out.deep_logits, y_all[idx], spec.n_classes, config.deep_weight, spec.loss
                    )
                    ps.zero_grad()
                    terms.total.backward()
            except NonFiniteError as exc:
                raise TrainingError(f"training diverged at step {step}: {exc}", step=step) from None
            loss = terms.total.item()
            if not math.isfinite(loss):
                raise TrainingError(f"training diverged at step {step}: loss {loss}", step=step)
            sgd_step(
                {k: t.data for k, t in ps.items()},
                {k: t.grad for k, t in ps.items()},
                lr,
                config.momentum,
                velocity,
            )
            curve.append((epoch, step, loss, lr))
            step += 1
        if stop or (epoch + 1) % config.eval_every == 0 or epoch == config.epochs - 1:
            validate(epoch)
        if stop:
            break
    score, epoch, params, scores = best
    log.debug("trained %s: best val dice %.4f at epoch %d (%d steps)", spec.strategy, score, epoch, step)
    return TrainResult(params, curve, score, scores, epoch, step, history)
