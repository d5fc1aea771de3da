"""Attentive fusion block: decomposition, modal proportion, trio attentions, fuse."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from xmsnet import tensor as T
from xmsnet.config import FusionConfig
from xmsnet.fusion import (TCA, TSA, AttentiveFusion, CrossModalChannel, CrossModalSpatial, Fuse, SharedMean,
                           decompose, fill_parameters, modal_proportion, shared_mean)
from xmsnet.gradcheck import grad_check
from xmsnet.nn import Init
from xmsnet.tensor import ShapeError, Tensor


@pytest.fixture(autouse=True)
def f64():
    with T.precision(np.float64):
        yield


def rand(*shape, seed=0, lo=-1.0, hi=1.0):
    return np.random.default_rng(seed).uniform(lo, hi, size=shape)


def col(v):
    return np.asarray(v, dtype=np.float64).reshape(-1, 1, 1)


def proportion_oracle(s, i, d):
    s, i, d = (np.ravel(x) for x in (s, i, d))

    def cos(u, v):
        return float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v) + 1e-8))
    a, b = cos(s, i), cos(s, d)
    if a < 0 or b < 0 or a + b <= 1e-6:
        a, b = a + 1, b + 1
    return (a + 1e-12) / (a + b + 2e-12)


# ---------------------------------------------------------------- decompose

def test_decompose_examples():
    m, v = decompose(np.full((2, 3, 3), 3.0))
    np.testing.assert_array_equal(m.data, np.full((2, 1, 1), 3.0))
    assert not v.data.any()
    m, v = decompose(np.array([[[1.0, 3], [5, 7]]]))
    assert m.data.item() == 4
    np.testing.assert_array_equal(v.data, [[[-3, -1], [1, 3]]])


@given(hnp.arrays(np.float64, (3, 4, 5), elements=st.floats(-1e3, 1e3)))
@settings(max_examples=40, deadline=None)
def test_decompose_reconstructs(f):
    m, v = decompose(f)
    np.testing.assert_allclose(m.data + v.data, f, atol=1e-6)


# ---------------------------------------------------------------- shared mean

def test_shared_mean_zero_input_gives_bias_image():
    block = SharedMean(Init(0), 3)
    block.mlp.fc1.bias.data[:] = [0.2, -0.1, 0.4]
    block.mlp.fc2.bias.data[:] = [1.0, 2.0, 3.0]
    out = shared_mean(block, col([0.3, 0.5, 0.7]), col([0, 0, 0]))
    hidden = np.maximum([0.2, -0.1, 0.4], 0)
    np.testing.assert_allclose(out.data.ravel(), hidden @ block.mlp.fc2.weight.data + [1, 2, 3])


def test_shared_mean_selects_outer_product_entry():
    block = SharedMean(Init(constant=0.0), 3)
    # hidden unit 0 reads flat index 0 * 3 + 1, i.e. entry (1, 2) in one-based terms
    block.mlp.fc1.weight.data[1, 0] = 1.0
    block.mlp.fc2.weight.data[0, 0] = 1.0
    out = block(col([1, 0, 0]), col([0, 1, 0]))
    np.testing.assert_array_equal(out.data.ravel(), [1, 0, 0])
    # the swapped pair lands on entry (2, 1), which this fixture ignores
    assert not block(col([0, 1, 0]), col([1, 0, 0])).data.any()


def test_shared_mean_swap_differs_without_symmetric_weights():
    block = SharedMean(Init(3), 4)
    a, b = col(rand(4, seed=1)), col(rand(4, seed=2))
    assert not np.allclose(block(a, b).data, block(b, a).data)


def test_shared_mean_channel_mismatch():
    with pytest.raises(ShapeError):
        SharedMean(Init(0), 3)(col([1, 2, 3]), col([1, 2]))


# ---------------------------------------------------------------- modal proportion

def test_proportion_examples():
    m = col([0.3, 0.9, 0.1])
    assert modal_proportion(col([0.5, 0.2, 0.4]), m, m).data.item() == 0.5
    assert abs(modal_proportion(col([1, 0, 0]), col([1, 0, 0]), col([0, 1, 0])).data.item() - 1) < 1e-9


def test_proportion_matches_guarded_oracle():
    rng = np.random.default_rng(11)
    for _ in range(200):
        s, i, d = (rng.normal(size=5) for _ in range(3))
        got = modal_proportion(col(s), col(i), col(d)).data.item()
        assert abs(got - proportion_oracle(s, i, d)) < 1e-9


vec = hnp.arrays(np.float64, 6, elements=st.floats(-10, 10))


@given(vec, vec, vec, st.floats(1e-3, 1e3), st.integers(0, 2))
@settings(max_examples=200, deadline=None)
def test_proportion_range_and_scale_invariance(s, i, d, k, which):
    alpha = modal_proportion(col(s), col(i), col(d)).data.item()
    assert 0.0 <= alpha <= 1.0
    trio = [s, i, d]
    scaled_trio = list(trio)
    scaled_trio[which] = trio[which] * k
    # the cosine's 1e-8 guard shifts cos by ~1e-8 / (|u||v|), so invariance to 1e-6 needs
    # norm products well above that; also excluded is m_S antipodal to both means, where the
    # shifted similarities are both ~0 and the ratio is ill-conditioned
    def shifted(u, v):
        return 1 + u @ v / (np.linalg.norm(u) * np.linalg.norm(v))
    norms = [np.linalg.norm(x) for x in trio + scaled_trio]
    if min(norms) ** 2 > 0.1 and max(shifted(s, i), shifted(s, d)) > 1e-3:
        trio = scaled_trio
        scaled = modal_proportion(*(col(x) for x in trio)).data.item()
        assert abs(scaled - alpha) < 1e-6


def test_proportion_batched_shape():
    rng = np.random.default_rng(0)
    m = [Tensor(rng.normal(size=(5, 4, 1, 1))) for _ in range(3)]
    assert modal_proportion(*m).shape == (5,)


# ---------------------------------------------------------------- TSA / spatial

def test_tsa_zero_weight_fixture_outputs_bias():
    block = TSA(Init(constant=0.0), 3)
    block.fuse.bias.data[:] = 0.7
    np.testing.assert_allclose(block(np.full((3, 4, 4), 2.0)).data, 0.7)
    maps = block.branch_maps(Tensor(np.full((3, 4, 4), 2.0)))
    np.testing.assert_array_equal(maps[0].data, maps[1].data)
    assert not maps[2].data.any()


def test_tsa_single_channel_branches_equal_input():
    v = rand(1, 5, 5, seed=4)
    mx, mean, _ = TSA(Init(0), 1).branch_maps(Tensor(v))
    np.testing.assert_array_equal(mx.data, v)
    np.testing.assert_allclose(mean.data, v)


def test_tsa_matches_branch_oracle():
    from test_tensor import conv_oracle

    block = TSA(Init(5), 3)
    for p in block.parameters():
        if p.ndim == 1:
            p.data[:] = rand(*p.shape, seed=p.size)
    v = rand(3, 6, 6, seed=6)
    stack = np.concatenate([v.max(0, keepdims=True), v.mean(0, keepdims=True),
                            conv_oracle(v, block.conv.weight.data, block.conv.bias.data, 1, 1)])
    ref = conv_oracle(stack, block.fuse.weight.data, block.fuse.bias.data, 1, 1)
    np.testing.assert_allclose(block(v).data, ref, atol=1e-12)


@pytest.mark.parametrize("branches", [("max",), ("mean",), ("conv",), ("max", "mean", "conv")])
def test_tsa_branch_substitution(branches):
    block = TSA(Init(0), 4, branches)
    assert block.fuse.weight.shape[1] == len(branches)
    assert block(rand(4, 5, 5)).shape == (1, 5, 5)


def test_cross_modal_spatial_fixtures():
    block = CrossModalSpatial(Init(constant=0.0))
    s_I, s_D = block(rand(1, 4, 4, seed=1), rand(1, 4, 4, seed=2))
    np.testing.assert_array_equal(s_I.data, 0.5)
    np.testing.assert_array_equal(s_D.data, 0.5)

    block = CrossModalSpatial(Init(7))
    swapped = CrossModalSpatial(Init(7))
    # output channel o reads input channel i; swap both roles
    swapped.conv.weight.data = block.conv.weight.data[::-1, ::-1].copy()
    swapped.conv.bias.data = block.conv.bias.data[::-1].copy()
    a, b = rand(1, 5, 5, seed=3), rand(1, 5, 5, seed=4)
    s_I, s_D = block(a, b)
    t_I, t_D = swapped(b, a)
    np.testing.assert_allclose(t_I.data, s_D.data, atol=1e-12)
    np.testing.assert_allclose(t_D.data, s_I.data, atol=1e-12)
    with pytest.raises(ShapeError):
        block(rand(1, 4, 4), rand(1, 5, 5))


# ---------------------------------------------------------------- TCA / channel

def gate_oracle(v, gamma=1.0, beta=0.0, eps=1e-5):
    norms = np.sqrt((v ** 2).sum(axis=(1, 2)))
    scaled = norms / np.sqrt((norms ** 2).mean() + eps)
    return 1 + np.tanh(gamma * scaled + beta)


def test_tca_constant_and_zero_inputs():
    block = TCA(Init(0), 3)
    v = Tensor(np.full((3, 4, 4), 1.5))
    mx, avg, gate = block.branch_vectors(v)
    np.testing.assert_array_equal(mx.data, avg.data)
    assert np.ptp(gate.data) < 1e-12
    block.gate.beta.data[:] = 0.3
    zero_gate = block.branch_vectors(Tensor(np.zeros((3, 4, 4))))[2]
    np.testing.assert_allclose(zero_gate.data, 1 + np.tanh(0.3))


def test_tca_gate_matches_norm_oracle():
    v = rand(4, 5, 5, seed=9)
    gate = TCA(Init(0), 4).gate(Tensor(v))
    np.testing.assert_allclose(gate.data.ravel(), gate_oracle(v), atol=1e-12)


def test_tca_grouped_projection_oracle():
    block = TCA(Init(2), 3)
    v = rand(3, 4, 4, seed=8)
    branches = np.stack([v.max(axis=(1, 2)), v.mean(axis=(1, 2)), gate_oracle(v)], axis=1)  # c x k
    w = block.proj.weight.data[:, :, 0, 0]
    np.testing.assert_allclose(block(v).data.ravel(), (branches * w).sum(1) + block.proj.bias.data, atol=1e-12)


@pytest.mark.parametrize("branches", [("gct",), ("mean",), ("max",)])
def test_tca_branch_substitution(branches):
    block = TCA(Init(0), 4, branches)
    assert block(rand(4, 5, 5)).shape == (4, 1, 1)


def test_cross_modal_channel_zero_fixture():
    c_I, c_D = CrossModalChannel(Init(constant=0.0), 3)(col(rand(3)), col(rand(3, seed=1)))
    np.testing.assert_array_equal(c_I.data, 0.5)
    np.testing.assert_array_equal(c_D.data, 0.5)
    with pytest.raises(ShapeError):
        CrossModalChannel(Init(0), 3)(col([1, 2, 3]), col([1, 2]))


# ---------------------------------------------------------------- fuse

def identity_token_mlp(fuse: Fuse, c: int):
    fill_parameters(fuse, 0.0)
    fuse.mlp.mlp.fc1.weight.data[:] = np.vstack([np.eye(c), np.eye(c)])
    fuse.mlp.mlp.fc2.weight.data[:] = np.eye(c)


def test_fuse_alpha_one_ignores_aux():
    block = Fuse(Init(1), 3)
    f_I = rand(3, 4, 4, seed=1)
    s, c = rand(1, 4, 4, seed=2, lo=0, hi=1), rand(3, 1, 1, seed=3, lo=0, hi=1)
    one = Tensor(np.array(1.0))
    a = block(f_I, rand(3, 4, 4, seed=4), one, s, s, c, c)
    b = block(f_I, rand(3, 4, 4, seed=5), one, s, s, c, c)
    np.testing.assert_allclose(a.data, b.data, atol=1e-12)


def test_fuse_zero_weight_fixture_outputs_bias():
    block = Fuse(Init(constant=0.0), 3)
    block.mlp.mlp.fc2.bias.data[:] = [0.1, 0.2, 0.3]
    half = np.full((1, 4, 4), 0.5)
    out = block(rand(3, 4, 4), rand(3, 4, 4, seed=1), Tensor(np.array(0.4)), half, half,
                np.full((3, 1, 1), 0.5), np.full((3, 1, 1), 0.5))
    np.testing.assert_allclose(out.data, np.broadcast_to(col([0.1, 0.2, 0.3]), (3, 4, 4)))


def test_fuse_half_alpha_identity_mlp_oracle():
    block = Fuse(Init(0), 3)
    identity_token_mlp(block, 3)
    f_I, f_D = rand(3, 4, 4, seed=1, lo=0), rand(3, 4, 4, seed=2, lo=0)
    s_I, s_D = rand(1, 4, 4, seed=3, lo=0), rand(1, 4, 4, seed=4, lo=0)
    c_I, c_D = rand(3, 1, 1, seed=5, lo=0), rand(3, 1, 1, seed=6, lo=0)
    out = block(f_I, f_D, Tensor(np.array(0.5)), s_I, s_D, c_I, c_D)
    ref = 0.5 * s_I * c_I * f_I + 0.5 * s_D * c_D * f_D
    np.testing.assert_allclose(out.data, ref, atol=1e-12)


def test_fuse_requires_prev_after_first_level():
    block = Fuse(Init(0), 3, c_prev=2)
    with pytest.raises(ShapeError):
        block(rand(3, 4, 4), rand(3, 4, 4))
    assert block(rand(3, 4, 4), rand(3, 4, 4), prev=rand(2, 8, 8)).shape == (3, 4, 4)


@pytest.mark.parametrize("alpha", [0.0, 0.5, 1.0])
def test_aux_gradient_vanishes_as_alpha_grows(alpha):
    block = Fuse(Init(4), 3)
    f_D = Tensor(rand(3, 4, 4, seed=1), requires_grad=True)
    out = block(rand(3, 4, 4, seed=2), f_D, Tensor(np.array(alpha)), rand(1, 4, 4, seed=3, lo=0),
                rand(1, 4, 4, seed=4, lo=0), rand(3, 1, 1, seed=5, lo=0), rand(3, 1, 1, seed=6, lo=0))
    T.backward(T.sum(T.mul(out, Tensor(rand(3, 4, 4, seed=7)))))
    norm = np.linalg.norm(f_D.grad)
    if alpha == 1.0:
        assert norm == 0.0
    else:
        assert norm > 0.0
    test_aux_gradient_vanishes_as_alpha_grows.norms = {
        **getattr(test_aux_gradient_vanishes_as_alpha_grows, "norms", {}), alpha: norm}
    norms = test_aux_gradient_vanishes_as_alpha_grows.norms
    if len(norms) == 3:
        assert norms[0.0] > norms[0.5] > norms[1.0]


# ---------------------------------------------------------------- full block

def test_attentive_fusion_state_invariants():
    block = AttentiveFusion(Init(0), 4, FusionConfig(), c_prev=2)
    f_I, f_D = rand(2, 4, 6, 6, seed=1), rand(2, 4, 6, 6, seed=2)
    st_ = block(Tensor(f_I), Tensor(f_D), prev=Tensor(rand(2, 2, 12, 12)))
    np.testing.assert_allclose(st_.m_I.data + st_.v_I.data, f_I, atol=1e-12)
    np.testing.assert_allclose(st_.m_D.data + st_.v_D.data, f_D, atol=1e-12)
    assert st_.alpha.shape == (2,) and ((st_.alpha.data >= 0) & (st_.alpha.data <= 1)).all()
    for m in (st_.s_I, st_.s_D, st_.c_I, st_.c_D):
        assert ((m.data > 0) & (m.data < 1)).all()
    assert st_.s_I.shape == (2, 1, 6, 6) and st_.c_I.shape == (2, 4, 1, 1)
    assert st_.f_S.shape == (2, 4, 6, 6)


def test_attentive_fusion_identical_inputs_give_half():
    block = AttentiveFusion(Init(0), 4, FusionConfig())
    f = Tensor(rand(4, 6, 6, seed=3, lo=0))
    assert block(f, f).alpha.data.item() == 0.5


@pytest.mark.parametrize("flag", ["use_alpha", "use_tsa", "use_tca"])
def test_ablation_flags_drop_branches(flag):
    block = AttentiveFusion(Init(0), 4, FusionConfig(**{flag: False}))
    st_ = block(Tensor(rand(4, 6, 6)), Tensor(rand(4, 6, 6, seed=1)))
    dropped = {"use_alpha": ("alpha", "m_S"), "use_tsa": ("s_I", "s_D"), "use_tca": ("c_I", "c_D")}[flag]
    assert all(getattr(st_, name) is None for name in dropped)


def test_full_block_gradients():
    block = AttentiveFusion(Init(2), 4, FusionConfig(), c_prev=2)
    for p in block.parameters():
        if p.ndim == 1 and not p.data.any():
            p.data[:] = rand(*p.shape, seed=p.size) * 0.2
    f_I, f_D = Tensor(rand(4, 6, 6, seed=1)), Tensor(rand(4, 6, 6, seed=2))
    prev = Tensor(rand(2, 12, 12, seed=3))
    err = grad_check(lambda a, b, p: block(a, b, p).f_S, [f_I, f_D, prev], params=block.parameters(),
                     max_coords=6)
    assert err < 1e-4
