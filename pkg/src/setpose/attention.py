"""Attention building blocks: scaled dot-product, multi-head, positional
encodings, and single-scale deformable sampling attention.

All operations are pure functions of their inputs and parameters and are
differentiable end to end through the tensor core.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from setpose import tensor as T
from setpose.tensor import RngState, ShapeMismatch, Tape, Tensor


class OddDimension(ValueError):
    """Sinusoidal encodings need an even model dimension."""


@dataclass(frozen=True)
class AttentionConfig:
    """Model width and head count; the per-head width is derived."""

    d_model: int
    heads: int

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ShapeMismatch(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.d_k < 1:
            raise ShapeMismatch("per-head width must be at least 1")

    @property
    def d_k(self) -> int:
        return self.d_model // self.heads


@dataclass(frozen=True)
class DeformableConfig:
    """Sampling budget for deformable attention; single-scale only."""

    sample_points: int = 4
    levels: int = field(default=1)

    def __post_init__(self):
        if self.sample_points < 1:
            raise ValueError("sample_points must be >= 1")
        if self.levels != 1:
            raise ValueError("only single-scale (levels=1) deformable attention is supported")


def scaled_dot_attention(q, k, v) -> Tensor:
    """softmax(q k^T / sqrt(d_k)) v over row-stacked queries/keys/values."""
    q, k, v = T.as_tensor(q), T.as_tensor(k), T.as_tensor(v)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeMismatch("attention operands must be 2-d")
    if q.shape[1] != k.shape[1]:
        raise ShapeMismatch(f"query/key widths differ: {q.shape} vs {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise ShapeMismatch(f"key/value counts differ: {k.shape} vs {v.shape}")
    logits = T.matmul(q, k.T) / float(np.sqrt(q.shape[1]))
    return T.matmul(T.softmax_rows(logits), v)


def init_mha_params(cfg: AttentionConfig, rng: RngState, tape: Tape | None = None) -> dict[str, Tensor]:
    """Per-head projection matrices plus the output projection, fan-in uniform."""
    bound = 1.0 / np.sqrt(cfg.d_model)
    params: dict[str, Tensor] = {}
    for role in ("wq", "wk", "wv"):
        for h in range(cfg.heads):
            params[f"{role}.{h}"] = Tensor(rng.uniform((cfg.d_model, cfg.d_k), -bound, bound), tape)
    params["wo"] = Tensor(rng.uniform((cfg.d_model, cfg.d_model), -bound, bound), tape)
    return params


def multi_head_attention(x_q, x_kv, cfg: AttentionConfig, params: Mapping[str, Tensor]) -> Tensor:
    """Project per head, attend, concatenate, and project back to d_model."""
    x_q, x_kv = T.as_tensor(x_q), T.as_tensor(x_kv)
    if x_q.shape[1] != cfg.d_model or x_kv.shape[1] != cfg.d_model:
        raise ShapeMismatch(f"feature width must equal d_model={cfg.d_model}")
    head_outputs = []
    for h in range(cfg.heads):
        qh = T.matmul(x_q, params[f"wq.{h}"])
        kh = T.matmul(x_kv, params[f"wk.{h}"])
        vh = T.matmul(x_kv, params[f"wv.{h}"])
        head_outputs.append(scaled_dot_attention(qh, kh, vh))
    return T.matmul(T.concat(head_outputs, axis=1), params["wo"])


def sinusoidal_pos_encoding(n: int, d_model: int) -> Tensor:
    """Interleaved sin/cos encodings at geometric frequencies, base 10000."""
    if d_model % 2 != 0:
        raise OddDimension(f"d_model must be even, got {d_model}")
    pos = np.arange(n, dtype=np.float64)[:, None]
    freqs = np.exp(-np.log(10000.0) * np.arange(0, d_model, 2, dtype=np.float64) / d_model)
    enc = np.zeros((n, d_model))
    enc[:, 0::2] = np.sin(pos * freqs)
    enc[:, 1::2] = np.cos(pos * freqs)
    return Tensor(enc)


def init_deformable_params(
    d_model: int, cfg: DeformableConfig, rng: RngState, tape: Tape | None = None
) -> dict[str, Tensor]:
    """Offset/weight predictors and the output projection."""
    bound = 1.0 / np.sqrt(d_model)
    p = cfg.sample_points
    return {
        "w_off": Tensor(rng.uniform((d_model, 2 * p), -bound, bound), tape),
        "b_off": Tensor(rng.uniform((2 * p,), -bound, bound), tape),
        "w_aw": Tensor(rng.uniform((d_model, p), -bound, bound), tape),
        "b_aw": Tensor(rng.uniform((p,), -bound, bound), tape),
        "w_out": Tensor(rng.uniform((d_model, d_model), -bound, bound), tape),
        "b_out": Tensor(rng.uniform((d_model,), -bound, bound), tape),
    }


def deformable_attention(
    queries,
    ref_points,
    feature_map,
    cfg: DeformableConfig,
    params: Mapping[str, Tensor],
) -> Tensor:
    """Sample the feature map at learned offsets around each reference point.

    Each query predicts ``sample_points`` offsets (in pixel units of the map
    grid) and softmax-normalized mixing weights from its own vector; the
    weighted sum of the bilinear samples goes through an output projection.
    """
    queries = T.as_tensor(queries)
    feature_map = T.as_tensor(feature_map)
    refs = np.asarray(ref_points, dtype=np.float64)
    m, d_model = queries.shape
    if refs.shape != (m, 2):
        raise ShapeMismatch(f"need one (x, y) reference per query, got {refs.shape}")
    if feature_map.ndim != 3 or feature_map.shape[2] != d_model:
        raise ShapeMismatch(f"feature map must be [h, w, {d_model}], got {feature_map.shape}")
    p = cfg.sample_points

    offsets = T.add(T.matmul(queries, params["w_off"]), params["b_off"])  # [m, 2p]
    locs = T.add(offsets.reshape(m * p, 2), Tensor(np.repeat(refs, p, axis=0)))
    samples = T.bilinear_sample(feature_map, locs).reshape(m, p, d_model)
    weights = T.softmax_rows(T.add(T.matmul(queries, params["w_aw"]), params["b_aw"]))  # [m, p]
    mixed = T.tsum(T.mul(samples, weights.reshape(m, p, 1)), axis=1)  # [m, d_model]
    return T.add(T.matmul(mixed, params["w_out"]), params["b_out"])
