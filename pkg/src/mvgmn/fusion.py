"""Per-frame fusion of skeleton tokens with RGB patch tokens.

Each frame carries one skeleton-derived token and a set of RGB patch tokens.
The default mode projects the skeleton token to a query that attends over the
projected patches; ablation variants are mean fusion (average of a projected
skeleton token and the mean projected patch) and linear fusion (a single
learned map over the concatenated skeleton token and mean patch).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError, InputError
from .rng import Xoshiro256pp
from .tensor import (
    Tensor,
    add,
    bmm,
    concat,
    matmul,
    mean_axis,
    mul,
    reshape,
    softmax_rows,
)

FUSION_MODES = ("cross_attention", "mean", "linear")


@dataclass
class FrameTokens:
    """One frame's modality tokens: [N_p, D_rgb] patches plus a [D_sk] token."""

    rgb_patches: Tensor
    skeleton_token: Tensor


@dataclass
class FusionParams:
    """Trainable fusion weights; the active subset depends on fusion_mode."""

    w_query: Tensor  # [D_sk, d_k]
    w_key: Tensor  # [D_rgb, d_k]
    w_value: Tensor  # [D_rgb, D]
    fusion_mode: str = "cross_attention"
    w_skeleton: Tensor | None = None  # [D_sk, D], mean mode
    w_linear: Tensor | None = None  # [D_sk + D_rgb, D], linear mode

    def __post_init__(self):
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigurationError(
                f"unknown fusion mode {self.fusion_mode!r}; expected one of {FUSION_MODES}"
            )

    def tensors(self) -> list[Tensor]:
        out = [self.w_query, self.w_key, self.w_value]
        if self.w_skeleton is not None:
            out.append(self.w_skeleton)
        if self.w_linear is not None:
            out.append(self.w_linear)
        return out


def sample_segments(length: int, num_segments: int, rng: Xoshiro256pp) -> list[int]:
    """One frame index per equal segment of [0, length), strictly increasing."""
    if num_segments < 1:
        raise InputError("num_segments must be at least 1")
    if length < num_segments:
        raise InputError(
            f"cannot sample {num_segments} segments from {length} frames"
        )
    indices = []
    for i in range(num_segments):
        lo = (i * length) // num_segments
        hi = ((i + 1) * length) // num_segments
        indices.append(lo + rng.below(hi - lo))
    return indices


def align_tokens(sk_tokens, rgb_frames) -> list[FrameTokens]:
    """Pair RGB frame i with skeleton token i*(T_sk/T); ratio must be integral."""
    sk = sk_tokens.data if isinstance(sk_tokens, Tensor) else np.asarray(sk_tokens)
    rgb = rgb_frames.data if isinstance(rgb_frames, Tensor) else np.asarray(rgb_frames)
    t_sk, t_rgb = sk.shape[0], rgb.shape[0]
    if t_rgb < 1 or t_sk % t_rgb != 0:
        raise ConfigurationError(
            f"skeleton count {t_sk} is not an integer multiple of RGB count {t_rgb}"
        )
    ratio = t_sk // t_rgb
    return [
        FrameTokens(rgb_patches=Tensor(rgb[i]), skeleton_token=Tensor(sk[i * ratio]))
        for i in range(t_rgb)
    ]


def skeleton_alignment_indices(t_sk: int, t_rgb: int) -> np.ndarray:
    """Skeleton indices paired with each RGB frame under the stride rule."""
    if t_rgb < 1 or t_sk % t_rgb != 0:
        raise ConfigurationError(
            f"skeleton count {t_sk} is not an integer multiple of RGB count {t_rgb}"
        )
    return np.arange(t_rgb) * (t_sk // t_rgb)


def cross_attention_pool(query: Tensor, keys: Tensor, values: Tensor) -> Tensor:
    """Scaled dot-product pooling of value rows, batched over frames.

    ``query`` is [F, d_k], ``keys`` [F, P, d_k], ``values`` [F, P, D]; each
    frame's attention weights are a softmax over its P patch scores.
    """
    f, d_k = query.shape
    scores = bmm(keys, reshape(query, (f, d_k, 1)))  # [F, P, 1]
    scores = mul(reshape(scores, (f, keys.shape[1])), 1.0 / math.sqrt(d_k))
    weights = softmax_rows(scores)  # [F, P]
    pooled = bmm(reshape(weights, (f, 1, keys.shape[1])), values)
    return reshape(pooled, (f, values.shape[2]))


def _project_patches(patches: Tensor, weight: Tensor) -> Tensor:
    f, p, d_in = patches.shape
    flat = matmul(reshape(patches, (f * p, d_in)), weight)
    return reshape(flat, (f, p, weight.shape[1]))


def fuse_frames(sk_tokens: Tensor, patches: Tensor, params: FusionParams) -> Tensor:
    """Fuse a batch of frames: sk_tokens [F, D_sk], patches [F, P, D_rgb] -> [F, D]."""
    if sk_tokens.shape[0] != patches.shape[0]:
        raise DimensionError(
            f"frame counts disagree: {sk_tokens.shape} vs {patches.shape}"
        )
    if patches.shape[1] < 1:
        raise InputError("each frame needs at least one RGB patch")
    mode = params.fusion_mode
    if mode == "cross_attention":
        query = matmul(sk_tokens, params.w_query)
        keys = _project_patches(patches, params.w_key)
        values = _project_patches(patches, params.w_value)
        return cross_attention_pool(query, keys, values)
    mean_patch = mean_axis(patches, axis=1)  # [F, D_rgb]
    if mode == "mean":
        if params.w_skeleton is None:
            raise ConfigurationError("mean fusion requires w_skeleton")
        projected_sk = matmul(sk_tokens, params.w_skeleton)
        projected_patch = matmul(mean_patch, params.w_value)
        return mul(add(projected_sk, projected_patch), 0.5)
    if params.w_linear is None:
        raise ConfigurationError("linear fusion requires w_linear")
    return matmul(concat([sk_tokens, mean_patch], axis=1), params.w_linear)


def cross_attention_fuse(frame: FrameTokens, params: FusionParams) -> Tensor:
    """Single-frame fusion under the attention mode; returns a [D] token."""
    if params.fusion_mode != "cross_attention":
        raise ConfigurationError("cross_attention_fuse requires cross_attention mode")
    sk = reshape(frame.skeleton_token, (1, frame.skeleton_token.shape[0]))
    patches = reshape(frame.rgb_patches, (1,) + frame.rgb_patches.shape)
    fused = fuse_frames(sk, patches, params)
    return reshape(fused, (fused.shape[1],))


def fuse_sequence(frames: list[FrameTokens], params: FusionParams) -> Tensor:
    """Fuse every frame of a sample and stack in time order: [T, D]."""
    if not frames:
        raise InputError("fuse_sequence requires at least one frame")
    sk = concat(
        [reshape(f.skeleton_token, (1, -1)) for f in frames], axis=0
    )
    patches = concat(
        [reshape(f.rgb_patches, (1,) + f.rgb_patches.shape) for f in frames], axis=0
    )
    return fuse_frames(sk, patches, params)
