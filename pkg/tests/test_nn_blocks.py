import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from octofuse.errors import ConfigurationError
from octofuse.nn_blocks import (
    EncoderSpec,
    ParameterSet,
    count_parameters,
    declare_dense_block,
    dense_block,
    desk_densenet,
    encoder_forward,
    init_params,
    materialize,
    stage_shapes,
)
from octofuse.tensor import Tensor


def test_dense_block_channels(rng):
    decls = []
    out_c = declare_dense_block(decls, "b", 4, 2, 3)
    assert out_c == 10
    ps = materialize(decls, 0)
    y = dense_block(ps, "b", Tensor(rng.standard_normal((2, 4, 4, 4))), 2, 3)
    assert y.shape == (2, 10, 4, 4)
    decls1 = []
    assert declare_dense_block(decls1, "b", 4, 2, 1) == 6
    with pytest.raises(ConfigurationError):
        declare_dense_block([], "b", 4, 2, 0)


def test_dense_block_feeds_forward_all_previous(rng):
    decls = []
    declare_dense_block(decls, "b", 3, 2, 3)
    # layer i sees C + i*growth channels
    assert [d.shape[1] for d in decls if d.name.endswith("conv.w")] == [3, 5, 7]
    ps = materialize(decls, 0)
    x = Tensor(rng.standard_normal((1, 3, 4, 4)))
    y = dense_block(ps, "b", x, 2, 3)
    np.testing.assert_array_equal(y.data[:, :3], x.data)


def test_full_scale_densenet161_width():
    # DenseNet-161: 2112 channels after transition 3 compaction → block 4 of 24 layers × growth 48
    spec = EncoderSpec("densenet", 3, 96, (384, 768, 2112, 2208), 48, (6, 12, 36, 24))
    assert spec.stage_channels[3] == 2208
    assert spec.block_input_channels(3) + 48 * 24 == 2208


def test_desk_densenet_shapes(rng):
    spec = desk_densenet()
    ps = init_params(spec, 0)
    feats = encoder_forward(spec, ps, Tensor(rng.standard_normal((1, 3, 64, 64))))
    assert [f.shape for f in feats] == [(1, 16, 32, 32), (1, 24, 16, 16), (1, 32, 8, 8), (1, 40, 4, 4)]
    assert feats.bottom is feats.f4


def test_vgg_zero_weights_give_zero_features(rng):
    spec = EncoderSpec("vgg", 3, 4, (4, 6, 8, 10), 2, (1, 2, 1, 1))
    ps = init_params(spec, 0)
    for name, t in ps.items():
        if not name.endswith("gamma"):
            t.data[...] = 0.0
    feats = encoder_forward(spec, ps, Tensor(rng.standard_normal((2, 3, 32, 32))))
    for f in feats:
        assert not f.data.any()


def test_full_resolution_input_is_accepted():
    spec = EncoderSpec("densenet", 3, 2, (3, 4, 5, 6), 1, (1, 1, 1, 1))
    feats = encoder_forward(spec, init_params(spec, 0), Tensor(np.zeros((1, 3, 256, 256))))
    assert feats.f4.shape == (1, 6, 16, 16)


def test_bad_spatial_extent():
    spec = desk_densenet()
    with pytest.raises(ConfigurationError):
        encoder_forward(spec, init_params(spec, 0), Tensor(np.zeros((1, 3, 24, 32))))
    with pytest.raises(ConfigurationError):
        encoder_forward(spec, init_params(spec, 0), Tensor(np.zeros((1, 2, 32, 32))))


def test_inconsistent_densenet_spec():
    with pytest.raises(ConfigurationError):
        EncoderSpec("densenet", 3, 8, (17, 24, 32, 40), 4, (2, 2, 2, 2))
    with pytest.raises(ConfigurationError):
        EncoderSpec("densenet", 3, 8, (16, 40, 48, 56), 4, (2, 2, 2, 2))  # transition would expand
    with pytest.raises(ConfigurationError):
        EncoderSpec("alexnet")


def test_init_determinism_and_he_std():
    spec = desk_densenet()
    a, b, c = init_params(spec, 5), init_params(spec, 5), init_params(spec, 6)
    assert all(a[k].data.tobytes() == b[k].data.tobytes() for k in a)
    assert any(a[k].data.tobytes() != c[k].data.tobytes() for k in a if k.endswith(".w"))
    kernel = init_params(EncoderSpec("vgg", 3, 32, (64, 64, 64, 64), 1, (1, 1, 1, 1)), 0)["stage1.conv0.w"].data
    assert kernel.shape == (64, 32, 3, 3)
    assert abs(kernel.std() / np.sqrt(2 / 288) - 1) < 0.10
    for k, t in a.items():
        if k.endswith(".b") or k.endswith(".beta"):
            assert not t.data.any()
        if k.endswith(".gamma"):
            assert np.all(t.data == 1)


@settings(max_examples=12, deadline=None)
@given(
    family=st.sampled_from(["vgg", "resnet", "densenet"]),
    stem=st.integers(1, 4),
    growth=st.integers(1, 3),
    layers=st.lists(st.integers(1, 2), min_size=4, max_size=4),
    extra=st.lists(st.integers(0, 3), min_size=4, max_size=4),
    size=st.sampled_from([16, 32]),
)
def test_stage_shapes_closed_form(family, stem, growth, layers, extra, size):
    if family == "densenet":
        chans, prev = [], stem
        for s in range(4):
            entering = prev if s == 0 else max(1, prev - extra[s])
            prev = entering + growth * layers[s]
            chans.append(prev)
    else:
        chans = [stem + e + 1 for e in extra]
    spec = EncoderSpec(family, 2, stem, tuple(chans), growth, tuple(layers))
    feats = encoder_forward(spec, init_params(spec, 0), Tensor(np.random.default_rng(0).standard_normal((2, 2, size, size))))
    assert [f.shape for f in feats] == stage_shapes(spec, 2, size, size)
    assert count_parameters(spec) == sum(t.size for t in init_params(spec, 1).params.values())


@pytest.mark.parametrize("family", ["vgg", "resnet", "densenet"])
def test_gradient_reaches_stem(family, rng):
    spec = EncoderSpec(family, 3, 4, (6, 8, 10, 12), 2, (1, 1, 1, 1))
    ps = init_params(spec, 0)
    feats = encoder_forward(spec, ps, Tensor(rng.standard_normal((2, 3, 16, 16))))
    (feats.f4 * Tensor(rng.standard_normal(feats.f4.shape))).sum().backward()
    assert np.linalg.norm(ps["stem.conv.w"].grad) > 0


def test_parameter_set_state_round_trip():
    ps = init_params(desk_densenet(), 0)
    clone = ParameterSet.from_state_dict(ps.state_dict())
    assert set(clone.params) == set(ps.params) and set(clone.buffers) == set(ps.buffers)
    scoped = ps.scope("stage1.")
    assert scoped["block.layer0.conv.w"] is ps["stage1.block.layer0.conv.w"]
