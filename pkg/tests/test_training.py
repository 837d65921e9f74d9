import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from octofuse.checkpoint import load_checkpoint
from octofuse.data import generate_synthetic
from octofuse.errors import ConfigurationError, ContractError, TrainingError
from octofuse.fusion import FusionStrategy, ModelSpec, forward, init_model, segmentation_loss_terms
from octofuse.harness import tiny_densenet
from octofuse.nn_blocks import ParameterSet
from octofuse.tensor import Tensor
from octofuse.training import (
    PRESETS,
    TrainConfig,
    dice,
    evaluate,
    lr_at,
    sgd_step,
    stack_samples,
    train_model,
    write_loss_curve,
)


@pytest.fixture(scope="module")
def volumes():
    return generate_synthetic(0, 8, 2, (2, 16, 16), noise_sigma=0.0, polarity=(1, -1))


def octopus(ds=False, m=2):
    return ModelSpec(tiny_densenet(), m, FusionStrategy("octopus", deep_supervision=ds))


def epoch_means(curve):
    per = {}
    for epoch, _, loss, _ in curve:
        per.setdefault(epoch, []).append(loss)
    return {e: float(np.mean(v)) for e, v in per.items()}


# -- schedule -------------------------------------------------------------------


@pytest.mark.parametrize("epoch, expected", [(0, 0.7), (34, 0.7), (35, 0.07), (69, 0.07), (70, 0.007)])
def test_long_schedule_preset(epoch, expected):
    assert lr_at(PRESETS["paper-schedule"], epoch) == pytest.approx(expected, rel=1e-15)


def test_schedule_arithmetic():
    assert lr_at(TrainConfig(lr0=1.0, decay_factor=2.0, decay_every=1), 3) == 0.125
    cfg = TrainConfig(lr0=0.3, epochs=50, decay_every=51)
    assert {lr_at(cfg, e) for e in range(50)} == {0.3}
    with pytest.raises(ConfigurationError):
        TrainConfig(decay_every=0)
    with pytest.raises(ConfigurationError):
        lr_at(cfg, -1)


@settings(max_examples=50, deadline=None)
@given(
    lr0=st.floats(1e-4, 10.0),
    factor=st.floats(1.0, 100.0),
    every=st.integers(1, 50),
    epoch=st.integers(0, 500),
)
def test_schedule_non_increasing_and_positive(lr0, factor, every, epoch):
    cfg = TrainConfig(lr0=lr0, decay_factor=factor, decay_every=every)
    assert lr_at(cfg, epoch + 1) <= lr_at(cfg, epoch)
    if (epoch + 1) // every * math.log10(factor) < 250:  # representable as a positive double
        assert lr_at(cfg, epoch + 1) > 0


def test_preset_from_dict():
    cfg = TrainConfig.from_dict({"preset": "paper-schedule", "epochs": 3})
    assert (cfg.lr0, cfg.decay_every, cfg.epochs) == (0.7, 35, 3)
    assert TrainConfig() == PRESETS["desk"]
    assert (TrainConfig().lr0, TrainConfig().decay_every, TrainConfig().epochs) == (0.05, 20, 60)


# -- optimizer ------------------------------------------------------------------


def test_sgd_vanilla_step(rng):
    p, g = rng.standard_normal(5), rng.standard_normal(5)
    expected = p - 0.1 * g
    sgd_step({"p": p}, {"p": g}, 0.1, 0.0, {})
    np.testing.assert_array_equal(p, expected)


def test_sgd_momentum_coasts_on_zero_gradient():
    p = np.zeros(3)
    vel = {"p": np.array([1.0, -2.0, 0.5])}
    sgd_step({"p": p}, {"p": np.zeros(3)}, 0.1, 0.9, vel)
    np.testing.assert_allclose(p, -0.1 * 0.9 * np.array([1.0, -2.0, 0.5]), rtol=1e-15)


def test_sgd_quadratic_bowl():
    p = np.array([3.0])
    history = [abs(p[0])]
    for _ in range(200):
        sgd_step({"p": p}, {"p": p.copy()}, 0.1, 0.0, {})
        history.append(abs(p[0]))
    assert all(b < a for a, b in zip(history, history[1:]))
    assert history[-1] < 1e-6
    assert history[-1] == pytest.approx(3.0 * 0.9**200, rel=1e-12)


def test_sgd_shape_mismatch():
    with pytest.raises(ContractError):
        sgd_step({"p": np.zeros(3)}, {"p": np.zeros(4)}, 0.1, 0.0, {})


# -- dice -----------------------------------------------------------------------


def test_dice_examples():
    a = np.zeros((4, 4), dtype=bool)
    a[0, :] = True
    assert dice(a, a) == 1.0
    assert dice(a, ~a) == 0.0
    assert dice(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0
    with pytest.raises(ContractError):
        dice(np.zeros(3), np.zeros(4))


def test_dice_brute_force_oracle():
    a = np.zeros((3, 4), dtype=bool)
    b = np.zeros((3, 4), dtype=bool)
    a.flat[[0, 1, 2, 3]] = True
    b.flat[[1, 2, 3, 8, 9, 10]] = True
    inter = sum(1 for x, y in zip(a.flat, b.flat) if x and y)
    assert (int(a.sum()), int(b.sum()), inter) == (4, 6, 3)
    assert dice(a, b) == 0.6


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.05, 0.95))
def test_dice_symmetry_and_range(seed, p):
    r = np.random.default_rng(seed)
    a, b = r.random((2, 5, 5)) < p, r.random((2, 5, 5)) < p
    assert dice(a, b) == dice(b, a)
    assert 0.0 <= dice(a, b) <= 1.0
    if a.any():
        assert dice(a, a) == 1.0


def test_dice_decreases_with_symmetric_difference():
    # |A|+|B| fixed at 8: moving B's voxels off A one at a time
    a = np.zeros(16, dtype=bool)
    a[:4] = True
    scores = []
    for shift in range(5):
        b = np.zeros(16, dtype=bool)
        b[shift : shift + 4] = True
        scores.append(dice(a, b))
    assert all(y < x for x, y in zip(scores, scores[1:]))


# -- training loop ----------------------------------------------------------------


def test_zero_learning_rate_keeps_parameters(volumes):
    spec = octopus()
    init = init_model(spec, 3)
    cfg = TrainConfig(lr0=0.0, epochs=1, seed=3)
    result = train_model(spec, volumes[:6], volumes[6:], cfg, init=init)
    for k, t in init.items():
        assert result.params[k].data.tobytes() == t.data.tobytes()
    # only batch-norm running statistics may move; with them, the evaluation
    # is that of the untouched parameters
    np.testing.assert_array_equal(result.val_scores, evaluate(spec, result.params, volumes[6:]))


def test_deep_supervision_changes_step0_loss(volumes):
    spec_ds = octopus(ds=True)
    ps = init_model(spec_ds, 0)
    x, y = stack_samples(volumes[:2])
    inputs = [Tensor(x[:, m]) for m in range(2)]
    out = forward(spec_ds, ps, inputs, training=True)
    on = segmentation_loss_terms(out.logits, out.deep_logits, y, 2, 0.3)
    off = segmentation_loss_terms(out.logits, None, y, 2, 0.3)
    assert on.total.item() != off.total.item()
    assert on.total.item() - off.total.item() == pytest.approx(0.3 * on.deep.item(), abs=1e-14)


def test_training_determinism(volumes):
    cfg = TrainConfig(epochs=2, seed=5)
    a = train_model(octopus(ds=True), volumes[:6], volumes[6:], cfg)
    b = train_model(octopus(ds=True), volumes[:6], volumes[6:], cfg)
    assert [r[2] for r in a.loss_curve] == [r[2] for r in b.loss_curve]
    assert all(a.params[k].data.tobytes() == b.params[k].data.tobytes() for k in a.params)


def test_tiny_octopus_halves_its_loss(volumes):
    result = train_model(octopus(), volumes, [], TrainConfig(epochs=31, seed=0))
    means = epoch_means(result.loss_curve)
    assert means[30] < 0.5 * means[0]


def test_end_to_end_gradients_touch_every_parameter(volumes, rng):
    spec = octopus(ds=True, m=2)
    ps = init_model(spec, 0)
    x, y = stack_samples(volumes[:2])
    out = forward(spec, ps, [Tensor(x[:, m] + 0.01 * rng.standard_normal(x[:, m].shape)) for m in range(2)], training=True)
    segmentation_loss_terms(out.logits, out.deep_logits, y, 2, 0.3).total.backward()
    groups = {k.split(".")[0] for k in ps.params}
    assert {"enc0", "enc1", "fuse1", "fuse4", "dec", "head", "deep_head"} <= groups
    for k, t in ps.items():
        assert np.any(t.grad != 0), k


def test_divergence_raises_training_error(volumes):
    with np.errstate(all="ignore"), pytest.raises(TrainingError) as info:
        train_model(octopus(), volumes[:4], [], TrainConfig(lr0=1e100, momentum=0.0, epochs=5, seed=0))
    assert info.value.step >= 0
    assert f"step {info.value.step}" in str(info.value)


def test_max_steps_caps_training(volumes):
    result = train_model(octopus(), volumes[:4], volumes[4:5], TrainConfig(epochs=10, batch_size=2, max_steps=3))
    assert result.steps == 3 and len(result.loss_curve) == 3


def test_modality_mismatch(volumes):
    with pytest.raises(ConfigurationError):
        train_model(octopus(m=3), volumes[:2], [], TrainConfig(epochs=1))


def test_float32_training_runs(volumes):
    result = train_model(octopus(), volumes[:4], volumes[4:5], TrainConfig(epochs=1, precision="f32"))
    assert all(t.data.dtype == np.float32 for t in result.params.params.values())
    assert math.isfinite(result.loss_curve[-1][2])


def test_checkpoint_and_loss_curve_outputs(volumes, tmp_path):
    spec, cfg = octopus(), TrainConfig(epochs=1)
    result = train_model(spec, volumes[:4], volumes[4:5], cfg)
    result.save(tmp_path / "m.octo", spec, cfg)
    meta, arrays = load_checkpoint(tmp_path / "m.octo")
    restored = ParameterSet.from_state_dict(arrays)
    assert all(restored[k].data.tobytes() == result.params[k].data.tobytes() for k in result.params.params)
    assert ModelSpec.from_dict(meta["model_spec"]) == spec
    write_loss_curve(tmp_path / "loss.csv", result.loss_curve)
    with open(tmp_path / "loss.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["epoch", "step", "loss", "lr"]
    assert float(rows[1][2]) == result.loss_curve[0][2]
