import numpy as np
import pytest

import oracles
from occvox import gradcheck as gc
from occvox.errors import ShapeError, StateError
from occvox.fusion import (ChannelProjection, DeformableAttentionParams, VoxelFusion,
                           channel_project, deformable_attention, deformable_attention_backward,
                           dual_interaction, fuse_concat, labels_from_logits, prediction_head,
                           trilinear_sample, trilinear_sample_many)
from occvox.io import params_from_bytes, params_to_bytes


def _rng(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------- projections

def test_identity_projection():
    x = _rng().normal(size=(3, 2, 2, 2))
    np.testing.assert_array_equal(channel_project(x, ChannelProjection.identity(3)), x)


def test_zero_weight_projection_gives_bias():
    proj = ChannelProjection(np.zeros((2, 3)), np.array([1.5, -2.0]))
    out = channel_project(_rng().normal(size=(3, 2, 3, 2)), proj)
    np.testing.assert_array_equal(out[0], 1.5)
    np.testing.assert_array_equal(out[1], -2.0)


def _project_oracle(x, w, b):
    C, H, W, Z = x.shape
    out = np.zeros((w.shape[0], H, W, Z))
    for i in range(H):
        for j in range(W):
            for k in range(Z):
                for o in range(w.shape[0]):
                    acc = b[o]
                    if w.ndim == 2:
                        acc += sum(w[o, c] * x[c, i, j, k] for c in range(C))
                    else:
                        for a in range(3):
                            for bb in range(3):
                                for cc in range(3):
                                    ii, jj, kk = i + a - 1, j + bb - 1, k + cc - 1
                                    if 0 <= ii < H and 0 <= jj < W and 0 <= kk < Z:
                                        acc += sum(w[o, c, a, bb, cc] * x[c, ii, jj, kk]
                                                   for c in range(C))
                    out[o, i, j, k] = acc
    return out


@pytest.mark.parametrize("kernel", [1, 3])
def test_projection_matches_loop_oracle(kernel):
    rng = _rng(1)
    proj = ChannelProjection.random(4, 2, rng, kernel)
    x = rng.normal(size=(4, 2, 2, 2) if kernel == 1 else (4, 3, 2, 4))
    np.testing.assert_allclose(channel_project(x, proj), _project_oracle(x, proj.weight, proj.bias),
                               rtol=1e-12, atol=1e-14)


def test_projection_channel_mismatch():
    with pytest.raises(ShapeError):
        channel_project(np.zeros((3, 2, 2, 2)), ChannelProjection.identity(2))


# ----------------------------------------------------------------- sampling

def test_trilinear_integer_position_is_exact():
    t = _rng(2).normal(size=(2, 3, 3, 3))
    np.testing.assert_array_equal(trilinear_sample(t, (1, 2, 0)), t[:, 1, 2, 0])


def test_trilinear_outside_is_zero():
    t = _rng(2).normal(size=(2, 3, 3, 3))
    for pos in [(-1, 0, 0), (3, 1, 1), (0, 0, 4.5), (-2.5, 1, 1)]:
        np.testing.assert_array_equal(trilinear_sample(t, pos), 0.0)


def test_trilinear_cube_midpoint():
    t = np.arange(8, dtype=float).reshape(1, 2, 2, 2)
    assert trilinear_sample(t, (0.5, 0.5, 0.5))[0] == 3.5


def test_trilinear_matches_oracle():
    rng = _rng(3)
    t = rng.normal(size=(3, 4, 3, 2))
    pos = rng.uniform(-1.5, 4.5, size=(300, 3))
    want = np.array([oracles.trilinear(t, p) for p in pos])
    np.testing.assert_allclose(trilinear_sample_many(t, pos), want, rtol=1e-12, atol=1e-14)


# ------------------------------------------------------- deformable attention

def test_degenerate_attention_is_identity():
    v = _rng(4).normal(size=(3, 2, 3, 2))
    params = DeformableAttentionParams.init(3, 3, n_points=1)
    np.testing.assert_array_equal(deformable_attention(v, v, params), v)


def test_averaging_init_with_zero_offsets_returns_value():
    v = _rng(4).normal(size=(3, 2, 3, 2))
    q = _rng(5).normal(size=(2, 2, 3, 2))
    params = DeformableAttentionParams.init(2, 3, n_points=8)
    np.testing.assert_allclose(deformable_attention(q, v, params), v / 8, rtol=1e-14)


def test_zero_value_projection_gives_zero_output():
    rng = _rng(6)
    params = DeformableAttentionParams.random(2, 3, 2, 4, rng)
    params.value_proj = np.zeros_like(params.value_proj)
    out = deformable_attention(rng.normal(size=(2, 3, 3, 3)), rng.normal(size=(3, 3, 3, 3)), params)
    np.testing.assert_array_equal(out, 0.0)


@pytest.mark.parametrize("n_points", [1, 2, 8])
@pytest.mark.parametrize("dims", [(3, 3, 3), (4, 2, 3)])
def test_attention_matches_loop_oracle(n_points, dims):
    rng = _rng(7 + n_points)
    params = DeformableAttentionParams.random(3, 4, 2, n_points, rng, offset_scale=1.5)
    q = rng.normal(size=(3,) + dims)
    v = rng.normal(size=(4,) + dims)
    got = deformable_attention(q, v, params)
    want = oracles.deformable_attention(q, v, params)
    np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-13)


def test_attention_weights_form_a_distribution():
    rng = _rng(8)
    params = DeformableAttentionParams.random(3, 3, n_points=5, rng=rng)
    _, cache = deformable_attention(rng.normal(size=(3, 2, 2, 2)), rng.normal(size=(3, 2, 2, 2)),
                                    params, return_cache=True)
    assert np.all((cache.weights >= 0) & (cache.weights <= 1))
    np.testing.assert_allclose(cache.weights.sum(0), 1.0, atol=1e-14)


def _zero_offset_params(rng, n_points=3, c=3):
    params = DeformableAttentionParams.random(c, c, n_points=n_points, rng=rng)
    params.offset_weight = np.zeros_like(params.offset_weight)
    params.offset_bias = np.zeros_like(params.offset_bias)
    return params


def test_zero_offset_reduces_to_pointwise_mixture():
    rng = _rng(9)
    params = _zero_offset_params(rng)
    q = rng.normal(size=(3, 3, 2, 2))
    v = rng.normal(size=(3, 3, 2, 2))
    logits = np.einsum("sc,chwz->shwz", params.attn_weight, q) + params.attn_bias[:, None, None, None]
    A = np.exp(logits - logits.max(0)) / np.exp(logits - logits.max(0)).sum(0)
    want = np.einsum("shwz,soc,chwz->ohwz", A, params.value_proj, v)
    np.testing.assert_allclose(deformable_attention(q, v, params), want, rtol=1e-12, atol=1e-14)


def test_zero_offset_permutation_equivariance():
    rng = _rng(10)
    params = _zero_offset_params(rng)
    dims = (3, 2, 4)
    q = rng.normal(size=(3,) + dims)
    v = rng.normal(size=(3,) + dims)
    perm = rng.permutation(np.prod(dims))

    def shuffle(t):
        return t.reshape(t.shape[0], -1)[:, perm].reshape(t.shape)

    out = deformable_attention(q, v, params)
    np.testing.assert_allclose(deformable_attention(shuffle(q), shuffle(v), params), shuffle(out),
                               rtol=1e-13, atol=1e-15)


def test_attention_shape_errors():
    params = DeformableAttentionParams.init(2, 3)
    with pytest.raises(ShapeError):
        deformable_attention(np.zeros((2, 2, 2, 2)), np.zeros((3, 2, 2, 3)), params)
    with pytest.raises(ShapeError):
        deformable_attention(np.zeros((3, 2, 2, 2)), np.zeros((3, 2, 2, 2)), params)
    with pytest.raises(ShapeError):
        DeformableAttentionParams(np.zeros((2, 3)), np.zeros(3), np.zeros((2, 3, 3)),
                                  np.zeros((2, 3)), np.zeros((2, 3, 3)))


# ------------------------------------------------------------------ backward

def test_backward_zero_upstream():
    rng = _rng(11)
    params = DeformableAttentionParams.random(2, 2, n_points=3, rng=rng)
    out, cache = deformable_attention(rng.normal(size=(2, 2, 2, 2)), rng.normal(size=(2, 2, 2, 2)),
                                      params, return_cache=True)
    grads = deformable_attention_backward(np.zeros_like(out), cache)
    for g in grads.values():
        np.testing.assert_array_equal(g, 0.0)


def test_backward_scalar_case_weight_sensitivity_is_projected_sample():
    # out = A_1 * W_1 * sample with A_1 = 1, so d out / d A_1 is the projected sample
    rng = _rng(12)
    params = DeformableAttentionParams.random(1, 1, n_points=1, rng=rng, offset_scale=0.0)
    q, v = rng.normal(size=(1, 1, 1, 1)), rng.normal(size=(1, 1, 1, 1))
    out, cache = deformable_attention(q, v, params, return_cache=True)
    assert cache.weights[0, 0] == 1.0
    projected = params.value_proj[0, 0, 0] * v[0, 0, 0, 0]
    assert cache.projected[0, 0, 0] == pytest.approx(projected, rel=1e-15)
    assert out[0, 0, 0, 0] == pytest.approx(projected, rel=1e-15)
    grads = deformable_attention_backward(np.ones_like(out), cache)
    assert grads["value_proj"][0, 0, 0] == pytest.approx(v[0, 0, 0, 0], rel=1e-15)


def test_backward_rejects_bad_cache():
    rng = _rng(13)
    params = DeformableAttentionParams.init(2, 2)
    out, cache = deformable_attention(rng.normal(size=(2, 2, 2, 2)), rng.normal(size=(2, 2, 2, 2)),
                                      params, return_cache=True)
    with pytest.raises(StateError):
        deformable_attention_backward(out, {"not": "a cache"})
    with pytest.raises(StateError):
        deformable_attention_backward(np.zeros((2, 3, 2, 2)), cache)


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("n_points", gc.ATTENTION_POINTS)
def test_attention_gradients_finite_differences(seed, n_points):
    for r in gc.check_attention(seed, n_points):
        assert r.ok, r


def test_gradcheck_detects_a_wrong_gradient():
    num = np.array([1.0, 2.0])
    assert not gc.compare("x", 0, num * (1 + 1e-3), num).ok
    assert gc.compare("x", 0, num * (1 + 1e-6), num).ok


# ------------------------------------------------------ composition & heads

def test_dual_interaction_symmetry():
    rng = _rng(14)
    params = DeformableAttentionParams.random(3, 3, n_points=2, rng=rng)
    v = rng.normal(size=(3, 2, 2, 3))
    f1, f2 = dual_interaction(v, v, (params, params))
    np.testing.assert_array_equal(f1, f2)


def test_dual_interaction_identity():
    rng = _rng(15)
    vi, vs = rng.normal(size=(2, 2, 3, 2)), rng.normal(size=(2, 2, 3, 2))
    ident = DeformableAttentionParams.init(2, 2, n_points=1)
    f1, f2 = dual_interaction(vi, vs, (ident, ident))
    np.testing.assert_array_equal(f1, vs)
    np.testing.assert_array_equal(f2, vi)


def test_dual_interaction_composes_two_calls():
    rng = _rng(16)
    pa = DeformableAttentionParams.random(3, 2, n_points=4, rng=rng)
    pb = DeformableAttentionParams.random(2, 3, n_points=4, rng=rng)
    vi, vs = rng.normal(size=(3, 3, 2, 2)), rng.normal(size=(2, 3, 2, 2))
    f1, f2 = dual_interaction(vi, vs, (pa, pb))
    np.testing.assert_array_equal(f1, deformable_attention(vi, vs, pa))
    np.testing.assert_array_equal(f2, deformable_attention(vs, vi, pb))


def test_fuse_concat_order_and_slicing():
    rng = _rng(17)
    parts = [rng.normal(size=(c, 2, 2, 2)) for c in (1, 2, 3, 1)]
    out = fuse_concat(*parts)
    assert out.shape[0] == 7
    edges = np.cumsum([0, 1, 2, 3, 1])
    for p, a, b in zip(parts, edges[:-1], edges[1:]):
        np.testing.assert_array_equal(out[a:b], p)
    ones = [np.full((1, 2, 2, 2), float(i)) for i in range(4)]
    np.testing.assert_array_equal(fuse_concat(*ones)[:, 0, 0, 0], [0, 1, 2, 3])
    with pytest.raises(ShapeError):
        fuse_concat(parts[0], parts[1], parts[2], np.zeros((1, 2, 2, 3)))


def test_prediction_head_identity_and_ties():
    x = _rng(18).normal(size=(4, 2, 2, 2))
    np.testing.assert_array_equal(prediction_head(x, [ChannelProjection.identity(4)], 4), x)
    const = prediction_head(np.zeros((4, 2, 2, 2)), [ChannelProjection(np.zeros((3, 4)))], 3)
    np.testing.assert_array_equal(labels_from_logits(const), 0)
    with pytest.raises(ShapeError):
        prediction_head(x, [ChannelProjection.identity(4)], 5)


def test_prediction_head_matches_composed_projections():
    rng = _rng(19)
    stack = [ChannelProjection.random(4, 6, rng), ChannelProjection.random(6, 3, rng, kernel=3)]
    x = rng.normal(size=(4, 3, 2, 2))
    want = _project_oracle(_project_oracle(x, stack[0].weight, stack[0].bias),
                           stack[1].weight, stack[1].bias)
    np.testing.assert_allclose(prediction_head(x, stack, 3), want, rtol=1e-12, atol=1e-13)


def test_voxel_fusion_forward_and_parameter_roundtrip():
    rng = _rng(20)
    images = [rng.normal(size=(3, 3, 2, 2)) for _ in range(2)]
    sem = rng.random(size=(5, 3, 2, 2))
    module = VoxelFusion(2, 3, 5, channels=4, n_points=2, seed=1)
    out = module.forward(images, sem)
    assert out["fused"].shape == (16, 3, 2, 2)
    assert out["logits"].shape == out["logits_img"].shape == (5, 3, 2, 2)
    other = VoxelFusion(2, 3, 5, channels=4, n_points=2, seed=99)
    other.load_parameters(params_from_bytes(params_to_bytes(module.parameters())))
    again = other.forward(images, sem)
    for key in out:
        np.testing.assert_array_equal(again[key], out[key])
