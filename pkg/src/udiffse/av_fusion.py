"""Cross-attention fusion of audio feature maps with visual embeddings.

Audio columns (one ``F_i`` vector per channel and time index) are the
queries; visual frames give the keys and values.  The attended vectors are
projected back to ``F_i``, group-normalized and added to the input.

Embedding file layout (little-endian)::

    b"AVEMB1"  u32 T_v  u32 p  float32[T_v * p] (row-major)
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

EMBED_MAGIC = b"AVEMB1"
EMBED_DIM = 768
VIDEO_FPS = 25.0
GROUPNORM_EPS = 1e-6


@dataclass
class VisualEmbedding:
    data: np.ndarray
    frame_rate: float = VIDEO_FPS

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2:
            raise ValueError(f"visual embedding must be (T_v, p), got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("visual embedding contains non-finite values")

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


def n_video_frames(duration: float, fps: float = VIDEO_FPS) -> int:
    return int(round(fps * duration))


def write_visual_embedding(path, emb: VisualEmbedding) -> None:
    data = np.ascontiguousarray(emb.data, dtype="<f4")
    n_frames, dim = data.shape
    Path(path).write_bytes(EMBED_MAGIC + struct.pack("<II", n_frames, dim) + data.tobytes())


def load_visual_embedding(path, expected_dim: int | None = None) -> VisualEmbedding:
    raw = Path(path).read_bytes()
    header = len(EMBED_MAGIC) + 8
    if raw[: len(EMBED_MAGIC)] != EMBED_MAGIC:
        raise ValueError(f"{path}: bad magic, not a visual embedding file")
    if len(raw) < header:
        raise ValueError(f"{path}: truncated header: expected at least {header} bytes, got {len(raw)}")
    n_frames, dim = struct.unpack("<II", raw[len(EMBED_MAGIC) : header])
    expected = header + 4 * n_frames * dim
    if len(raw) != expected:
        raise ValueError(
            f"{path}: size mismatch: expected {expected} bytes for {n_frames}x{dim}, got {len(raw)}"
        )
    if expected_dim is not None and dim != expected_dim:
        raise ValueError(f"{path}: embedding dim {dim} != expected {expected_dim}")
    data = np.frombuffer(raw, dtype="<f4", offset=header).reshape(n_frames, dim)
    return VisualEmbedding(data.astype(np.float32))


def default_groups(channels: int, max_groups: int = 8) -> int:
    """Largest divisor of ``channels`` not exceeding ``min(max_groups, channels)``."""
    for g in range(min(max_groups, channels), 0, -1):
        if channels % g == 0:
            return g
    return 1


def group_norm(x, groups: int, gain, bias, eps: float = GROUPNORM_EPS) -> np.ndarray:
    """GroupNorm over a ``(C, F, T)`` map with per-channel affine parameters."""
    x = np.asarray(x, dtype=np.float64)
    n_ch = x.shape[0]
    if n_ch % groups:
        raise ValueError(f"{n_ch} channels cannot be split into {groups} groups")
    g = x.reshape(groups, -1)
    mean = g.mean(axis=1, keepdims=True)
    var = g.var(axis=1, keepdims=True)
    normed = ((g - mean) / np.sqrt(var + eps)).reshape(x.shape)
    return normed * np.asarray(gain)[:, None, None] + np.asarray(bias)[:, None, None]


def softmax(z, axis=-1):
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class FusionBlock:
    """Single-head cross-attention block for one U-Net stage.

    Projections act on column vectors: ``W_q`` is ``(d, F)``, ``W_k`` and
    ``W_v`` are ``(d, p)``, ``W_o`` is ``(F, d)``.
    """

    W_q: np.ndarray
    W_k: np.ndarray
    W_v: np.ndarray
    W_o: np.ndarray
    gain: np.ndarray
    bias: np.ndarray
    groups: int
    layer: int = 0

    def __post_init__(self):
        d, n_freq = self.W_q.shape
        if self.W_k.shape[0] != d or self.W_v.shape != self.W_k.shape or self.W_o.shape != (n_freq, d):
            raise ValueError("inconsistent projection shapes")
        if self.gain.shape != self.bias.shape or self.gain.ndim != 1:
            raise ValueError("gain and bias must be equal-length vectors")
        if self.gain.size % self.groups:
            raise ValueError(f"{self.gain.size} channels not divisible into {self.groups} groups")

    @property
    def channels(self) -> int:
        return self.gain.size

    @property
    def n_freq(self) -> int:
        return self.W_q.shape[1]

    @property
    def width(self) -> int:
        return self.W_q.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.W_k.shape[1]

    @classmethod
    def random(cls, channels, n_freq, embed_dim=EMBED_DIM, width=None, rng=None, layer=0):
        rng = np.random.default_rng(rng)
        width = width or math.ceil(n_freq / 2)
        if min(channels, n_freq, embed_dim, width) < 1:
            raise ValueError("all block dimensions must be >= 1")

        def init(rows, cols):
            return rng.standard_normal((rows, cols)) / np.sqrt(cols)

        return cls(
            W_q=init(width, n_freq),
            W_k=init(width, embed_dim),
            W_v=init(width, embed_dim),
            W_o=init(n_freq, width),
            gain=np.ones(channels),
            bias=np.zeros(channels),
            groups=default_groups(channels),
            layer=layer,
        )


def attention_weights(block: FusionBlock, e_a, v) -> np.ndarray:
    """Softmax weights of shape ``(C, T, T_v)``."""
    e_a, vis = _check_inputs(block, e_a, v)
    queries = np.einsum("df,cft->ctd", block.W_q, e_a)
    keys = vis @ block.W_k.T
    return softmax(queries @ keys.T / np.sqrt(block.width), axis=-1)


def cross_attention_fuse(block: FusionBlock, e_a, v, return_weights: bool = False):
    e_a, vis = _check_inputs(block, e_a, v)
    weights = attention_weights(block, e_a, vis)
    values = vis @ block.W_v.T
    attended = weights @ values  # (C, T, d)
    fused = np.einsum("fd,ctd->cft", block.W_o, attended)
    out = e_a + group_norm(fused, block.groups, block.gain, block.bias)
    if return_weights:
        return out, weights
    return out


def _check_inputs(block, e_a, v):
    e_a = np.asarray(e_a, dtype=np.float64)
    vis = np.asarray(getattr(v, "data", v), dtype=np.float64)
    if e_a.ndim != 3 or e_a.shape[0] != block.channels or e_a.shape[1] != block.n_freq:
        raise ValueError(
            f"audio features {e_a.shape} do not match block (C={block.channels}, F={block.n_freq})"
        )
    if vis.ndim != 2 or vis.shape[1] != block.embed_dim:
        raise ValueError(f"visual features {vis.shape} do not have {block.embed_dim} columns")
    if vis.shape[0] == 0:
        raise ValueError("visual embedding has no frames")
    return e_a, vis
