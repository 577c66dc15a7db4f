import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stmx import reparam as rp
from stmx.tensor import BNStats, ShapeError, batchnorm, dwconv2d


def grid(rng, t=3, h=6, w=5, c=8):
    return rng.uniform(-2, 2, (t, h, w, c)).astype(np.float32)


# -- single-conv folds ------------------------------------------------------


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31), kind=st.sampled_from(["spatial", "temporal"]), k=st.sampled_from([1, 3, 5]))
def test_fold_bn_matches_two_pass_forward(seed, kind, k):
    rng = np.random.default_rng(seed)
    conv = rp.random_conv(rng, kind, 6, k, bn=True, skip=False)
    x = grid(rng, c=6)
    np.testing.assert_allclose(rp.fold_bn(conv).forward(x), conv.forward(x), atol=1e-5, rtol=0)


def test_fold_bn_formula(rng):
    conv = rp.random_conv(rng, "spatial", 4, 3, bn=True, skip=False)
    s, shift = conv.bn.scale_shift()
    folded = rp.fold_bn(conv)
    np.testing.assert_allclose(folded.kernel, conv.kernel * s[:, None, None], rtol=1e-6)
    np.testing.assert_allclose(folded.bias, conv.bias + shift * conv.kernel.sum(axis=(1, 2)), rtol=1e-5, atol=1e-6)
    assert folded.bn is None and not folded.skip


def test_post_bn_zero_padding_breaks_fold_at_borders(rng):
    # bn(pad with 0) differs from pad(bn(x)) with 0 at the border; only the former folds exactly
    conv = rp.random_conv(rng, "spatial", 5, 3, bn=True, skip=False)
    x = grid(rng, c=5)
    folded = rp.fold_bn(conv)
    zero_padded = dwconv2d(batchnorm(x, conv.bn), conv.kernel, conv.bias)
    diff = np.abs(folded.forward(x) - zero_padded)
    assert diff[:, 1:-1, 1:-1].max() < 1e-5
    assert diff[:, 0, :].max() > 1e-3


def test_fold_skip_adds_exactly_one_to_center(rng):
    for kind, k in (("spatial", 3), ("spatial", 7), ("temporal", 3)):
        conv = rp.random_conv(rng, kind, 6, k, bn=False, skip=True)
        folded = rp.fold_skip(conv)
        delta = folded.kernel - conv.kernel
        center = (slice(None),) + (k // 2,) * (conv.kernel.ndim - 1)
        np.testing.assert_array_equal(folded.kernel[center], conv.kernel[center] + np.float32(1.0))
        mask = np.ones(conv.kernel.shape, bool)
        mask[center] = False
        np.testing.assert_array_equal(folded.kernel[mask], conv.kernel[mask])
        np.testing.assert_array_equal(folded.bias, conv.bias)
        assert np.all(delta[mask] == 0)


def test_fold_skip_forward_close(rng):
    conv = rp.random_conv(rng, "spatial", 6, 3, bn=False, skip=True)
    x = grid(rng, c=6)
    np.testing.assert_allclose(rp.fold_skip(conv).forward(x), conv.forward(x), atol=1e-6)


def test_fold_skip_requires_bn_folded(rng):
    with pytest.raises(rp.FoldError):
        rp.fold_skip(rp.random_conv(rng, "spatial", 4))


def test_folds_are_no_ops_when_nothing_to_fold(rng):
    conv = rp.random_conv(rng, "spatial", 4, bn=False, skip=False)
    assert rp.fold_bn(conv) is conv
    assert rp.fold_skip(conv) is conv


def test_conv_validation():
    with pytest.raises(ShapeError):
        rp.FusableConv("spatial", np.zeros((2, 2, 2)), np.zeros(2))
    with pytest.raises(ShapeError):
        rp.FusableConv("temporal", np.zeros((2, 3, 3)), np.zeros(2))
    with pytest.raises(ValueError):
        rp.FusableConv("diagonal", np.zeros((2, 3)), np.zeros(2))
    with pytest.raises(ShapeError):
        rp.FusableConv("temporal", np.zeros((2, 3)), np.zeros(2), BNStats.identity(3))


# -- blocks ---------------------------------------------------------------


def _blocks(rng, t=3, c=16):
    return {
        "st-repmixer": (rp.random_repmixer(rng, c), rp.st_repmixer_forward),
        "st-attention": (rp.random_attention(rng, t, c, 2, cpe_size=5), rp.st_attention_forward),
        "convffn": (rp.random_convffn(rng, c), rp.convffn_forward),
    }


@pytest.mark.parametrize("name", ["st-repmixer", "st-attention", "convffn"])
def test_block_fusion_equivalence(rng, name):
    params, fwd = _blocks(rng)[name]
    fused, changed = rp.reparameterize_block(params)
    assert changed and fused.is_folded
    for _ in range(5):
        x = grid(rng, c=16)
        np.testing.assert_allclose(fwd(x, fused, "fused"), fwd(x, params, "train"), atol=1e-4)


@pytest.mark.parametrize("name", ["st-repmixer", "st-attention", "convffn"])
def test_reparameterize_is_idempotent(rng, name):
    params, _ = _blocks(rng)[name]
    fused, _ = rp.reparameterize_block(params)
    again, changed = rp.reparameterize_block(fused)
    assert again is fused and not changed


def test_fused_mode_needs_folded_params(rng):
    params, fwd = _blocks(rng)["st-repmixer"]
    with pytest.raises(rp.FoldError):
        fwd(grid(rng, c=16), params, "fused")


def test_unknown_mode_rejected(rng):
    params, fwd = _blocks(rng)["st-repmixer"]
    with pytest.raises(ValueError):
        fwd(grid(rng, c=16), params, "eval")


def test_channel_mismatch_rejected(rng):
    params, fwd = _blocks(rng)["st-repmixer"]
    with pytest.raises(ShapeError):
        fwd(grid(rng, c=8), params, "train")


def test_attention_heads_must_divide_channels(rng):
    with pytest.raises(ValueError):
        rp.random_attention(rng, 2, 10, 3)


def test_temporal_branch_mixes_frames(rng):
    params = rp.random_repmixer(rng, 8)
    x = grid(rng, c=8)
    y0 = rp.st_repmixer_forward(x, params)
    x2 = x.copy()
    x2[0] += 1.0
    y1 = rp.st_repmixer_forward(x2, params)
    assert np.abs(y1[1] - y0[1]).max() > 0
    base0, base1 = rp.repmixer_forward(x, params.spatial), rp.repmixer_forward(x2, params.spatial)
    np.testing.assert_array_equal(base0[1], base1[1])


def test_tpe_breaks_frame_permutation_symmetry(rng):
    p = rp.random_attention(rng, 3, 8, 2, cpe_size=3)
    x = np.repeat(grid(rng, t=1, c=8), 3, axis=0)
    y = rp.st_attention_forward(x, p)
    assert np.abs(y[0] - y[1]).max() > 1e-4


# -- baseline reduction --------------------------------------------------


def test_identity_temporal_reduces_to_spatial_baseline(rng):
    for _ in range(10):
        spatial = rp.random_conv(rng, "spatial", 8, 3)
        params = rp.STRepMixerParams(rp.identity_temporal(8), spatial)
        x = grid(rng, c=8)
        np.testing.assert_array_equal(rp.st_repmixer_forward(x, params, "train"), rp.repmixer_forward(x, spatial, "train"))
        fused, _ = rp.reparameterize_block(params)
        np.testing.assert_array_equal(fused.temporal.kernel, np.tile([0, 1, 0], (8, 1)).astype(np.float32))
        np.testing.assert_array_equal(
            rp.st_repmixer_forward(x, fused, "fused"), rp.repmixer_forward(x, fused.spatial, "fused"))


def test_zero_tpe_single_frame_attention_equals_baseline(rng):
    p = rp.random_attention(rng, 1, 16, 2, cpe_size=3, tpe="zeros")
    for _ in range(5):
        x = grid(rng, t=1, c=16)
        np.testing.assert_array_equal(rp.st_attention_forward(x, p), rp.attention_forward(x, p))


def test_joint_attention_differs_from_per_frame_for_several_frames(rng):
    # joint attention mixes tokens across frames, so the reduction only holds at T=1
    p = rp.random_attention(rng, 3, 16, 2, cpe_size=3, tpe="zeros")
    x = grid(rng, c=16)
    assert np.abs(rp.st_attention_forward(x, p) - rp.attention_forward(x, p)).max() > 1e-4


def test_ffn_has_no_fusable_parts(rng):
    p = rp.random_ffn(rng, 8)
    x = grid(rng, c=8)
    np.testing.assert_array_equal(rp.ffn_forward(x, p, "train"), rp.ffn_forward(x, p, "fused"))
