import numpy as np
import pytest

from mvgmn import fusion as F
from mvgmn import tensor as T
from mvgmn.errors import ConfigurationError, InputError
from mvgmn.rng import Xoshiro256pp
from mvgmn.tensor import Tensor, check_gradients


def make_params(d_sk, d_rgb, d_k, d, mode="cross_attention", seed=0, requires=False):
    rng = np.random.default_rng(seed)

    def p(shape):
        return Tensor(rng.standard_normal(shape) * 0.5, requires_grad=requires)

    return F.FusionParams(
        w_query=p((d_sk, d_k)),
        w_key=p((d_rgb, d_k)),
        w_value=p((d_rgb, d)),
        fusion_mode=mode,
        w_skeleton=p((d_sk, d)),
        w_linear=p((d_sk + d_rgb, d)),
    )


def make_frame(d_sk, d_rgb, n_p, seed=0):
    rng = np.random.default_rng(seed)
    return F.FrameTokens(
        rgb_patches=Tensor(rng.standard_normal((n_p, d_rgb))),
        skeleton_token=Tensor(rng.standard_normal(d_sk)),
    )


# ---------------------------------------------------------------------------
# segment sampling and alignment
# ---------------------------------------------------------------------------


def test_sample_segments_one_per_frame():
    rng = Xoshiro256pp(1)
    assert F.sample_segments(8, 8, rng) == list(range(8))


def test_sample_segments_forced_ranges():
    idx = F.sample_segments(16, 8, Xoshiro256pp(2))
    for i, j in enumerate(idx):
        assert j in (2 * i, 2 * i + 1)
    assert idx == sorted(idx)


def test_sample_segments_deterministic():
    assert F.sample_segments(100, 7, Xoshiro256pp(3)) == F.sample_segments(
        100, 7, Xoshiro256pp(3)
    )


def test_sample_segments_rejects_short_input():
    with pytest.raises(InputError):
        F.sample_segments(5, 8, Xoshiro256pp(0))


def test_align_tokens_stride_two():
    sk = np.arange(16)[:, None] * np.ones((16, 3))
    rgb = np.zeros((8, 2, 4))
    frames = F.align_tokens(sk, rgb)
    got = [int(f.skeleton_token.data[0]) for f in frames]
    assert got == [0, 2, 4, 6, 8, 10, 12, 14]
    np.testing.assert_array_equal(
        F.skeleton_alignment_indices(16, 8), [0, 2, 4, 6, 8, 10, 12, 14]
    )


def test_align_tokens_identity_when_equal():
    frames = F.align_tokens(np.arange(8)[:, None], np.zeros((8, 1, 2)))
    assert [int(f.skeleton_token.data[0]) for f in frames] == list(range(8))


def test_align_tokens_non_integer_ratio():
    with pytest.raises(ConfigurationError):
        F.align_tokens(np.zeros((15, 2)), np.zeros((8, 1, 2)))


# ---------------------------------------------------------------------------
# cross-attention fusion
# ---------------------------------------------------------------------------


def test_zero_skeleton_token_gives_mean_of_values():
    params = make_params(3, 4, 2, 5, seed=1)
    frame = make_frame(3, 4, 6, seed=2)
    frame.skeleton_token.data[:] = 0.0
    out = F.cross_attention_fuse(frame, params)
    values = frame.rgb_patches.data @ params.w_value.data
    np.testing.assert_allclose(out.data, values.mean(axis=0), atol=1e-12)


def test_single_patch_ignores_query():
    params = make_params(3, 4, 2, 5, seed=3)
    frame = make_frame(3, 4, 1, seed=4)
    out1 = F.cross_attention_fuse(frame, params)
    frame.skeleton_token.data *= 37.0  # scaling the query cannot matter
    out2 = F.cross_attention_fuse(frame, params)
    expect = frame.rgb_patches.data[0] @ params.w_value.data
    np.testing.assert_allclose(out1.data, expect, atol=1e-12)
    np.testing.assert_allclose(out1.data, out2.data, atol=1e-12)


def test_scalar_attention_hand_oracle():
    # post-projection Q=[1], K rows [1],[0], V rows [2],[4]:
    # weights = softmax([1, 0]) -> 0.7311*2 + 0.2689*4 = 2.5379
    out = F.cross_attention_pool(
        Tensor([[1.0]]),
        Tensor([[[1.0], [0.0]]]),
        Tensor([[[2.0], [4.0]]]),
    )
    np.testing.assert_allclose(out.data, [[2.5379]], atol=1e-3)


def test_attention_invariant_to_patch_permutation():
    params = make_params(3, 4, 2, 5, seed=5)
    frame = make_frame(3, 4, 7, seed=6)
    out = F.cross_attention_fuse(frame, params)
    perm = np.random.default_rng(7).permutation(7)
    shuffled = F.FrameTokens(
        rgb_patches=Tensor(frame.rgb_patches.data[perm]),
        skeleton_token=frame.skeleton_token,
    )
    out_p = F.cross_attention_fuse(shuffled, params)
    np.testing.assert_allclose(out.data, out_p.data, atol=1e-12)


def test_attention_weights_sum_to_one():
    params = make_params(3, 4, 2, 5, seed=8)
    frame = make_frame(3, 4, 5, seed=9)
    q = frame.skeleton_token.data @ params.w_query.data
    k = frame.rgb_patches.data @ params.w_key.data
    scores = (k @ q) / np.sqrt(2.0)
    w = T.softmax_rows(Tensor(scores[None, :])).data
    assert w.sum() == pytest.approx(1.0, abs=1e-9)
    assert np.all(w >= 0) and np.all(w <= 1)


# ---------------------------------------------------------------------------
# sequence fusion and variants
# ---------------------------------------------------------------------------


def test_fuse_sequence_single_frame_matches_single_fusion():
    params = make_params(3, 4, 2, 5, seed=10)
    frame = make_frame(3, 4, 6, seed=11)
    seq = F.fuse_sequence([frame], params)
    single = F.cross_attention_fuse(frame, params)
    assert seq.shape == (1, 5)
    np.testing.assert_allclose(seq.data[0], single.data, atol=1e-12)


def test_mean_mode_with_identical_projections():
    params = make_params(2, 2, 2, 3, mode="mean", seed=12)
    # force both projected modalities to the same vector
    params.w_skeleton.data[:] = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    params.w_value.data[:] = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    token = np.array([0.3, -0.7])
    frame = F.FrameTokens(
        rgb_patches=Tensor(np.stack([token, token])), skeleton_token=Tensor(token)
    )
    out = F.fuse_sequence([frame], params)
    np.testing.assert_allclose(out.data[0], [0.3, -0.7, 0.0], atol=1e-12)


def test_three_fusion_modes_are_distinct():
    frames = [make_frame(3, 4, 5, seed=s) for s in range(2)]
    outs = {}
    for mode in F.FUSION_MODES:
        params = make_params(3, 4, 2, 5, mode=mode, seed=13)
        outs[mode] = F.fuse_sequence(frames, params).data
    assert not np.allclose(outs["cross_attention"], outs["mean"])
    assert not np.allclose(outs["cross_attention"], outs["linear"])
    assert not np.allclose(outs["mean"], outs["linear"])


def test_fuse_sequence_rejects_empty():
    with pytest.raises(InputError):
        F.fuse_sequence([], make_params(2, 2, 2, 2))


def test_fuse_frames_rejects_zero_patches():
    params = make_params(3, 4, 2, 5)
    with pytest.raises(InputError):
        F.fuse_frames(
            Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 0, 4))), params
        )


def test_unknown_fusion_mode_rejected():
    with pytest.raises(ConfigurationError):
        make_params(2, 2, 2, 2, mode="max")


@pytest.mark.parametrize("mode", F.FUSION_MODES)
def test_fusion_gradients(mode):
    params = make_params(3, 4, 2, 5, mode=mode, seed=14, requires=True)
    rng = np.random.default_rng(15)
    sk = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    patches = Tensor(rng.standard_normal((4, 6, 4)), requires_grad=True)

    def loss():
        out = F.fuse_frames(sk, patches, params)
        return T.sum_all(T.mul(out, out))

    assert check_gradients(loss, [sk, patches, *params.tensors()], h=1e-5) < 1e-4
