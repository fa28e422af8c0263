"""Toy end-to-end pose regression network.

Patch projection stands in for a convolutional backbone; a stack of
deformable self-attention encoder layers refines the patch tokens; a set of
learned queries decodes directly into per-query scores and keypoint triples
(x, y, confidence), all sigmoid-bounded, with no decoding post-processing.
An auxiliary per-token head emits keypoint heatmaps at the patch grid
resolution. The optional refinement decoder exists for the one-stage versus
two-stage latency comparison: it re-processes the query embeddings and adds
coordinate deltas.

The decoder uses standard scaled dot-product attention for self- and
cross-attention; the deformable sampling path lives in the encoder.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from setpose import tensor as T
from setpose.attention import (
    AttentionConfig,
    DeformableConfig,
    deformable_attention,
    multi_head_attention,
    sinusoidal_pos_encoding,
)
from setpose.tensor import RngState, ShapeMismatch, Tape, Tensor

CHECKPOINT_MAGIC = b"JCRA"
CHECKPOINT_VERSION = 1
LN_EPS = 1e-5


class CheckpointMismatch(ValueError):
    """Checkpoint config or tensor layout does not match expectations."""


@dataclass(frozen=True)
class ModelConfig:
    image_size: tuple[int, int] = (64, 64)
    patch: int = 8
    d_model: int = 64
    heads: int = 4
    encoder_layers: int = 6
    decoder_layers: int = 5
    num_queries: int = 300
    num_keypoints: int = 17
    ffn_dim: int = 256
    channels: int = 1
    sample_points: int = 4
    refinement_decoder: bool = False

    def __post_init__(self):
        h, w = self.image_size
        if self.encoder_layers < 1 or self.decoder_layers < 1:
            raise ValueError("encoder_layers and decoder_layers must be >= 1")
        if h % self.patch or w % self.patch:
            raise ValueError(f"image size {self.image_size} not divisible by patch {self.patch}")
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if self.d_model % 2:
            raise ValueError("d_model must be even for sinusoidal encodings")
        for name in ("num_queries", "num_keypoints", "ffn_dim", "channels", "sample_points"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def grid(self) -> tuple[int, int]:
        return (self.image_size[0] // self.patch, self.image_size[1] // self.patch)

    @property
    def num_tokens(self) -> int:
        gh, gw = self.grid
        return gh * gw

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "image_size" in d:
            d["image_size"] = tuple(d["image_size"])
        return cls(**d)


@dataclass
class PoseOutput:
    """Per-image set prediction: scores [Q] and keypoints [Q, K, 3].

    Coordinates live in the normalized [0, 1] frame; the third channel is the
    per-keypoint confidence. All values are sigmoid outputs in (0, 1).
    """

    scores: Tensor
    keypoints: Tensor


# -- parameters -----------------------------------------------------------------


def _attention_block_spec(prefix: str, d: int, heads: int) -> list[tuple[str, tuple, int]]:
    d_k = d // heads
    spec = []
    for role in ("wq", "wk", "wv"):
        for h in range(heads):
            spec.append((f"{prefix}.{role}.{h}", (d, d_k), d))
    spec.append((f"{prefix}.wo", (d, d), d))
    return spec


def _decoder_layer_spec(prefix: str, cfg: ModelConfig) -> list[tuple[str, tuple, int]]:
    d, f = cfg.d_model, cfg.ffn_dim
    spec = []
    spec += _attention_block_spec(f"{prefix}.self", d, cfg.heads)
    spec.append((f"{prefix}.ln1.g", (d,), 0))
    spec.append((f"{prefix}.ln1.b", (d,), 0))
    spec += _attention_block_spec(f"{prefix}.cross", d, cfg.heads)
    spec.append((f"{prefix}.ln2.g", (d,), 0))
    spec.append((f"{prefix}.ln2.b", (d,), 0))
    spec.append((f"{prefix}.ffn.w1", (d, f), d))
    spec.append((f"{prefix}.ffn.b1", (f,), d))
    spec.append((f"{prefix}.ffn.w2", (f, d), f))
    spec.append((f"{prefix}.ffn.b2", (d,), f))
    spec.append((f"{prefix}.ln3.g", (d,), 0))
    spec.append((f"{prefix}.ln3.b", (d,), 0))
    return spec


def _param_spec(cfg: ModelConfig) -> list[tuple[str, tuple, int]]:
    """(name, shape, fan_in) for every learned tensor; fan_in 0 marks a
    layer-norm parameter initialized to identity instead of uniform noise."""
    d, f, p = cfg.d_model, cfg.ffn_dim, cfg.sample_points
    k = cfg.num_keypoints
    patch_in = cfg.patch * cfg.patch * cfg.channels
    spec: list[tuple[str, tuple, int]] = [
        ("patch.w", (patch_in, d), patch_in),
        ("patch.b", (d,), patch_in),
    ]
    for i in range(cfg.encoder_layers):
        pre = f"enc.{i}"
        spec += [
            (f"{pre}.att.w_off", (d, 2 * p), d),
            (f"{pre}.att.b_off", (2 * p,), d),
            (f"{pre}.att.w_aw", (d, p), d),
            (f"{pre}.att.b_aw", (p,), d),
            (f"{pre}.att.w_out", (d, d), d),
            (f"{pre}.att.b_out", (d,), d),
            (f"{pre}.ln1.g", (d,), 0),
            (f"{pre}.ln1.b", (d,), 0),
            (f"{pre}.ffn.w1", (d, f), d),
            (f"{pre}.ffn.b1", (f,), d),
            (f"{pre}.ffn.w2", (f, d), f),
            (f"{pre}.ffn.b2", (d,), f),
            (f"{pre}.ln2.g", (d,), 0),
            (f"{pre}.ln2.b", (d,), 0),
        ]
    # fan-in 1: embeddings are lookups, not linear maps; the wide init keeps
    # initial query predictions spread out, which stabilizes set matching
    spec.append(("query.embed", (cfg.num_queries, d), 1))
    for i in range(cfg.decoder_layers):
        spec += _decoder_layer_spec(f"dec.{i}", cfg)
    spec += [
        ("head.score.w", (d, 1), d),
        ("head.score.b", (1,), d),
        ("head.kp.w", (d, 3 * k), d),
        ("head.kp.b", (3 * k,), d),
        ("head.hm.w", (d, k), d),
        ("head.hm.b", (k,), d),
    ]
    if cfg.refinement_decoder:
        for i in range(cfg.decoder_layers):
            spec += _decoder_layer_spec(f"ref.{i}", cfg)
        spec += [
            ("head.delta.w", (d, 2 * k), d),
            ("head.delta.b", (2 * k,), d),
        ]
    return spec


def init_params(cfg: ModelConfig, rng: RngState | int) -> dict[str, Tensor]:
    """Uniform [-1/sqrt(fan_in), 1/sqrt(fan_in)] init in a fixed draw order;
    layer norms start as the identity transform."""
    if isinstance(rng, int):
        rng = RngState(rng)
    params: dict[str, Tensor] = {}
    for name, shape, fan_in in _param_spec(cfg):
        if fan_in == 0:
            value = np.ones(shape) if name.endswith(".g") else np.zeros(shape)
        elif name.endswith(".att.w_off") or name.endswith(".att.b_off"):
            # zero offsets: every token starts by sampling its own position,
            # so the first encoder pass is an identity-like feature read
            value = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(fan_in)
            value = rng.uniform(shape, -bound, bound)
        params[name] = Tensor(value)
    return params


def attach_params(params: Mapping[str, Tensor], tape: Tape) -> None:
    for p in params.values():
        tape.watch(p)


def detach_params(params: Mapping[str, Tensor]) -> None:
    for p in params.values():
        p.detach()


def _sub(params: Mapping[str, Tensor], prefix: str) -> dict[str, Tensor]:
    cut = len(prefix) + 1
    return {k[cut:]: v for k, v in params.items() if k.startswith(prefix + ".")}


# -- building blocks ----------------------------------------------------------------


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    m = x.mean(axis=1, keepdims=True)
    centered = T.sub(x, m)
    var = T.power(centered, 2.0).mean(axis=1, keepdims=True)
    normed = T.div(centered, T.sqrt(T.add(var, eps)))
    return T.add(T.mul(normed, gain), bias)


def _ffn(x: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    hidden = T.relu(T.add(T.matmul(x, params["w1"]), params["b1"]))
    return T.add(T.matmul(hidden, params["w2"]), params["b2"])


# -- forward stages -----------------------------------------------------------------


def extract_features(image, cfg: ModelConfig, params: Mapping[str, Tensor]) -> Tensor:
    """Non-overlapping patch projection plus sinusoidal positional encoding."""
    image = T.as_tensor(image)
    h, w = cfg.image_size
    if image.shape != (h, w, cfg.channels):
        raise ShapeMismatch(f"expected image {(h, w, cfg.channels)}, got {image.shape}")
    gh, gw = cfg.grid
    p = cfg.patch
    patches = image.reshape(gh, p, gw, p, cfg.channels).transpose((0, 2, 1, 3, 4))
    flat = patches.reshape(gh * gw, p * p * cfg.channels)
    tokens = T.add(T.matmul(flat, params["patch.w"]), params["patch.b"])
    return T.add(tokens, sinusoidal_pos_encoding(cfg.num_tokens, cfg.d_model))


def patch_centers(cfg: ModelConfig) -> np.ndarray:
    """Reference (x, y) of each token on the feature grid, row-major."""
    gh, gw = cfg.grid
    rr, cc = np.mgrid[0:gh, 0:gw]
    return np.stack([cc.reshape(-1), rr.reshape(-1)], axis=1).astype(np.float64)


def encode(
    tokens: Tensor,
    cfg: ModelConfig,
    params: Mapping[str, Tensor],
    grid_rc: np.ndarray | None = None,
) -> Tensor:
    """Deformable self-attention encoder stack over the patch tokens.

    ``grid_rc`` gives each token's (row, col) grid cell; by default tokens are
    in row-major order. The feature map sampled by deformable attention is
    rebuilt from the current tokens at their grid cells every layer, so
    permuting tokens together with their cells permutes the output rows
    exactly.
    """
    gh, gw = cfg.grid
    if tokens.shape != (cfg.num_tokens, cfg.d_model):
        raise ShapeMismatch(f"expected tokens {(cfg.num_tokens, cfg.d_model)}, got {tokens.shape}")
    if grid_rc is None:
        rr, cc = np.mgrid[0:gh, 0:gw]
        grid_rc = np.stack([rr.reshape(-1), cc.reshape(-1)], axis=1)
    grid_rc = np.asarray(grid_rc, dtype=np.intp)
    flat_idx = grid_rc[:, 0] * gw + grid_rc[:, 1]
    if sorted(flat_idx.tolist()) != list(range(cfg.num_tokens)):
        raise ShapeMismatch("grid_rc must cover every grid cell exactly once")
    to_rowmajor = np.argsort(flat_idx)
    refs = grid_rc[:, ::-1].astype(np.float64)  # (x, y) = (col, row)
    dcfg = DeformableConfig(sample_points=cfg.sample_points)

    x = tokens
    for i in range(cfg.encoder_layers):
        pre = f"enc.{i}"
        fmap = T.gather_rows(x, to_rowmajor).reshape(gh, gw, cfg.d_model)
        att = deformable_attention(x, refs, fmap, dcfg, _sub(params, f"{pre}.att"))
        x = layer_norm(T.add(x, att), params[f"{pre}.ln1.g"], params[f"{pre}.ln1.b"])
        x = layer_norm(T.add(x, _ffn(x, _sub(params, f"{pre}.ffn"))), params[f"{pre}.ln2.g"], params[f"{pre}.ln2.b"])
    return x


def _decoder_stack(q: Tensor, memory: Tensor, cfg: ModelConfig, params: Mapping[str, Tensor], prefix: str) -> Tensor:
    acfg = AttentionConfig(d_model=cfg.d_model, heads=cfg.heads)
    for i in range(cfg.decoder_layers):
        pre = f"{prefix}.{i}"
        q = layer_norm(
            T.add(q, multi_head_attention(q, q, acfg, _sub(params, f"{pre}.self"))),
            params[f"{pre}.ln1.g"],
            params[f"{pre}.ln1.b"],
        )
        q = layer_norm(
            T.add(q, multi_head_attention(q, memory, acfg, _sub(params, f"{pre}.cross"))),
            params[f"{pre}.ln2.g"],
            params[f"{pre}.ln2.b"],
        )
        q = layer_norm(
            T.add(q, _ffn(q, _sub(params, f"{pre}.ffn"))),
            params[f"{pre}.ln3.g"],
            params[f"{pre}.ln3.b"],
        )
    return q


def decode(memory: Tensor, cfg: ModelConfig, params: Mapping[str, Tensor]) -> PoseOutput:
    """Queries self-attend, cross-attend to memory, and regress score + K x 3."""
    embeddings = _decoder_stack(params["query.embed"], memory, cfg, params, "dec")
    return _readout(embeddings, cfg, params)


def _readout(embeddings: Tensor, cfg: ModelConfig, params: Mapping[str, Tensor]) -> PoseOutput:
    scores = T.sigmoid(T.add(T.matmul(embeddings, params["head.score.w"]), params["head.score.b"]))
    kps = T.sigmoid(T.add(T.matmul(embeddings, params["head.kp.w"]), params["head.kp.b"]))
    return PoseOutput(
        scores=scores.reshape(cfg.num_queries),
        keypoints=kps.reshape(cfg.num_queries, cfg.num_keypoints, 3),
    )


def heatmap_head(memory: Tensor, cfg: ModelConfig, params: Mapping[str, Tensor]) -> Tensor:
    gh, gw = cfg.grid
    hm = T.sigmoid(T.add(T.matmul(memory, params["head.hm.w"]), params["head.hm.b"]))
    return hm.reshape(gh, gw, cfg.num_keypoints)


def forward(
    image, cfg: ModelConfig, params: Mapping[str, Tensor], tape: Tape | None = None
) -> tuple[PoseOutput, Tensor]:
    """Full one-stage pass: features -> encoder -> {decoder, heatmap head}."""
    if tape is not None:
        attach_params(params, tape)
    else:
        detach_params(params)
    tokens = extract_features(image, cfg, params)
    memory = encode(tokens, cfg, params)
    return decode(memory, cfg, params), heatmap_head(memory, cfg, params)


def forward_two_stage(
    image, cfg: ModelConfig, params: Mapping[str, Tensor], tape: Tape | None = None
) -> tuple[PoseOutput, Tensor]:
    """Benchmark variant: a refinement decoder adds deltas to stage-1 poses."""
    if not cfg.refinement_decoder:
        raise ValueError("config does not enable the refinement decoder")
    if tape is not None:
        attach_params(params, tape)
    else:
        detach_params(params)
    tokens = extract_features(image, cfg, params)
    memory = encode(tokens, cfg, params)
    stage1 = _decoder_stack(params["query.embed"], memory, cfg, params, "dec")
    pose = _readout(stage1, cfg, params)
    refined = _decoder_stack(stage1, memory, cfg, params, "ref")
    deltas = T.add(T.matmul(refined, params["head.delta.w"]), params["head.delta.b"])
    deltas = deltas.reshape(cfg.num_queries, cfg.num_keypoints, 2)
    xy = T.clip(T.add(pose.keypoints[:, :, 0:2], deltas), 0.0, 1.0)
    keypoints = T.concat([xy, pose.keypoints[:, :, 2:3]], axis=2)
    return PoseOutput(scores=pose.scores, keypoints=keypoints), heatmap_head(memory, cfg, params)


# -- checkpoints ------------------------------------------------------------------------


def save_checkpoint(path: str, cfg: ModelConfig, params: Mapping[str, Tensor]) -> None:
    """Versioned binary container: magic, config echo, named float64 tensors."""
    cfg_blob = json.dumps(cfg.to_dict(), sort_keys=True).encode("utf-8")
    names = sorted(params)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(cfg_blob)))
        fh.write(cfg_blob)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            blob = name.encode("utf-8")
            data = params[name].data
            fh.write(struct.pack("<H", len(blob)))
            fh.write(blob)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.astype("<f8").tobytes())


def load_checkpoint(path: str, expect_cfg: ModelConfig | None = None) -> tuple[ModelConfig, dict[str, Tensor]]:
    """Read a checkpoint; rejects bad magic/version, layout, or config drift."""
    with open(path, "rb") as fh:
        blob = fh.read()
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise CheckpointMismatch("truncated checkpoint")
        out = blob[off : off + n]
        off += n
        return out

    if take(4) != CHECKPOINT_MAGIC:
        raise CheckpointMismatch("bad magic bytes")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointMismatch(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack("<I", take(4))
    cfg = ModelConfig.from_dict(json.loads(take(cfg_len).decode("utf-8")))
    if expect_cfg is not None and cfg != expect_cfg:
        raise CheckpointMismatch("checkpoint config does not match the expected config")
    (count,) = struct.unpack("<I", take(4))
    params: dict[str, Tensor] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n_vals = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(take(8 * n_vals), dtype="<f8").reshape(shape).astype(np.float64)
        params[name] = Tensor(data)
    expected = {name: shape for name, shape, _ in _param_spec(cfg)}
    actual = {name: params[name].shape for name in params}
    if expected != actual:
        raise CheckpointMismatch("checkpoint tensors do not match the config's layout")
    return cfg, params
