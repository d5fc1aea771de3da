"""Dual-stream encoder: extents, zero case, determinism, stream independence."""

import numpy as np
import pytest

from xmsnet import tensor as T
from xmsnet.config import EncoderConfig
from xmsnet.encoder import DualEncoder, encode_pair
from xmsnet.nn import Init
from xmsnet.tensor import ShapeError


def build(seed=0, **kw):
    return DualEncoder(Init(seed), EncoderConfig(**kw))


def image(seed, h=64, w=64, n=None):
    shape = (3, h, w) if n is None else (n, 3, h, w)
    return np.random.default_rng(seed).uniform(0, 1, size=shape).astype(np.float32)


def test_default_extents():
    feats_I, feats_D = encode_pair(build(), image(0), image(1))
    expect = [(16, 16, 16), (32, 8, 8), (64, 4, 4), (128, 2, 2)]
    assert [f.shape for f in feats_I] == expect
    assert [f.shape for f in feats_D] == expect


@pytest.mark.parametrize("h,w", [(32, 32), (32, 96), (128, 64)])
def test_extents_any_multiple_of_32(h, w):
    enc = build(stage_channels=(4, 4, 8, 8))
    feats, _ = enc(image(0, h, w, n=2), image(1, h, w, n=2))
    for i, f in enumerate(feats):
        s = 4 * 2 ** i
        assert f.shape == (2, enc.cfg.stage_channels[i], h // s, w // s)


def test_zero_input_gives_zero_features():
    # biases initialise to zero, so a zero image stays zero through every stage
    enc = build()
    zero = np.zeros((3, 64, 64), np.float32)
    for f in enc(zero, zero)[0] + enc(zero, zero)[1]:
        assert not f.data.any()


def test_bitwise_deterministic():
    a = build(seed=3)(image(0), image(1))
    b = build(seed=3)(image(0), image(1))
    for x, y in zip(a[0] + a[1], b[0] + b[1]):
        assert x.data.tobytes() == y.data.tobytes()


def test_streams_have_independent_weights():
    enc = build()
    assert enc.rgb.stages[0].down.weight is not enc.aux.stages[0].down.weight
    assert not np.array_equal(enc.rgb.stages[0].down.weight.data, enc.aux.stages[0].down.weight.data)


def test_aux_perturbation_leaves_rgb_pyramid_unchanged():
    enc = build()
    rgb = image(0)
    ref, _ = enc(rgb, image(1))
    got, feats_D = enc(rgb, image(2))
    for x, y in zip(ref, got):
        assert np.array_equal(x.data, y.data)
    assert not np.array_equal(feats_D[0].data, enc(rgb, image(1))[1][0].data)


def test_shared_weights_fixture():
    enc = build(share_weights=True)
    assert not hasattr(enc, "aux")
    x = image(4)
    feats_I, feats_D = enc(x, x)
    for a, b in zip(feats_I, feats_D):
        assert np.array_equal(a.data, b.data)


@pytest.mark.parametrize("h,w", [(48, 64), (64, 40)])
def test_extent_not_divisible_by_32(h, w):
    with pytest.raises(ShapeError):
        build()(image(0, h, w), image(1, h, w))


def test_stream_extent_mismatch():
    with pytest.raises(ShapeError):
        build()(image(0, 64, 64), image(1, 32, 32))


def test_bad_stage_count():
    with pytest.raises(ValueError):
        EncoderConfig(stage_channels=(8, 8, 8))


def test_activations_nonnegative():
    for f in build()(image(0) - 0.5, image(1))[0]:
        assert f.data.min() >= 0
