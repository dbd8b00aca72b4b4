"""Frame-wise multi-head attention with frame-level causal masking and KV caching.

Causality is enforced by gathering only the allowed key frames for each query
frame (never by additive masking), so outputs of earlier frames are bitwise
independent of later frames. Cached keys are stored after relative-pose
encoding; scores factor through the relative pose, which is what makes the
cache reusable as the viewing window slides.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .cape import CapeConfig, key_matrix, query_matrix
from .geometry import Pose, PoseDistanceParams, pose_distance


class AttentionError(ValueError):
    pass


@dataclass
class FrameTokens:
    """Tokens of one frame: (n_spatial, width) plus pose and noise level."""

    frame_id: int
    tokens: np.ndarray
    pose: Pose
    noise_level: int = 0


@dataclass(frozen=True)
class AttentionConfig:
    heads: int
    head_dim: int
    window_k: int | None = None  # None: unbounded window
    cape: CapeConfig = None
    causal: bool = True

    def __post_init__(self):
        if self.cape is None:
            object.__setattr__(self, "cape", CapeConfig(head_dim=self.head_dim))
        if self.cape.enabled and self.head_dim % 4 != 0:
            raise AttentionError("head_dim must be divisible by 4 with pose encoding enabled")
        if self.cape.enabled and self.cape.head_dim != self.head_dim:
            raise AttentionError("cape.head_dim must match head_dim")
        if self.window_k is not None and self.window_k < 1:
            raise AttentionError("window_k must be >= 1")

    @property
    def width(self) -> int:
        return self.heads * self.head_dim


@dataclass
class CacheEntry:
    frame_id: int
    arrival: int
    keys: np.ndarray  # (heads, n_spatial, head_dim), stored post pose-encoding
    values: np.ndarray  # (heads, n_spatial, head_dim)
    pose: Pose
    noise_level: int


class KVCacheLayer:
    """Per-attention-layer store of committed frames' key/value blocks.

    Single-writer: append calls must be serialized by the owner (the engine
    Session does this). `capacity` caps the entry count with FIFO eviction;
    unbounded by default.
    """

    def __init__(self, capacity: int | None = None):
        if capacity is not None and capacity < 1:
            raise AttentionError("capacity must be >= 1")
        self.capacity = capacity
        self.entries: list[CacheEntry] = []
        self._next_arrival = 0

    def __len__(self) -> int:
        return len(self.entries)

    def frame_ids(self) -> list[int]:
        return [e.frame_id for e in self.entries]

    def append(self, frame_id: int, keys, values, pose: Pose, noise_level: int) -> CacheEntry:
        if any(e.frame_id == frame_id for e in self.entries):
            raise AttentionError(f"frame_id {frame_id} already cached")
        keys = np.asarray(keys)
        values = np.asarray(values)
        if keys.ndim != 3 or keys.shape != values.shape:
            raise AttentionError("keys/values must both be (heads, n_spatial, head_dim)")
        entry = CacheEntry(frame_id, self._next_arrival, keys, values, pose, noise_level)
        self._next_arrival += 1
        self.entries.append(entry)
        if self.capacity is not None and len(self.entries) > self.capacity:
            self.entries.pop(0)
        return entry

    def subset(self, frame_ids) -> "KVCacheLayer":
        """View restricted to the given frames, preserving arrival order."""
        wanted = set(frame_ids)
        sub = KVCacheLayer(capacity=None)
        sub.entries = [e for e in self.entries if e.frame_id in wanted]
        sub._next_arrival = self._next_arrival
        return sub

    def size_bytes(self) -> int:
        return sum(e.keys.nbytes + e.values.nbytes for e in self.entries)


def cache_append(cache: KVCacheLayer, frame: FrameTokens, keys, values) -> CacheEntry:
    return cache.append(frame.frame_id, keys, values, frame.pose, frame.noise_level)


def build_frame_causal_mask(query_frames, key_frames, causal: bool = True) -> np.ndarray:
    """Frame-granular boolean mask: query frame i may attend to key frame j iff j <= i.

    Positions are arrival indices within the sequence. With causal=False the
    mask is all-true. Expand with np.repeat for token-level masks.
    """
    q = np.asarray(list(query_frames))
    k = np.asarray(list(key_frames))
    if not causal:
        return np.ones((len(q), len(k)), dtype=bool)
    return k[None, :] <= q[:, None]


class FlopCounter:
    """Accumulates attention FLOPs (score and value matmuls, 2 flops per MAC)."""

    def __init__(self):
        self.total = 0

    def add_attention(self, heads: int, n_q: int, n_k: int, head_dim: int):
        self.total += 4 * heads * n_q * n_k * head_dim


def split_heads(tokens: np.ndarray, heads: int) -> np.ndarray:
    """(n_spatial, width) -> (heads, n_spatial, head_dim)."""
    s, w = tokens.shape
    return tokens.reshape(s, heads, w // heads).transpose(1, 0, 2)


def merge_heads(tokens: np.ndarray) -> np.ndarray:
    """(heads, n_spatial, head_dim) -> (n_spatial, width)."""
    h, s, d = tokens.shape
    return tokens.transpose(1, 0, 2).reshape(s, h * d)


def encode_frame_kv(frame: FrameTokens, config: AttentionConfig):
    """Per-head keys (pose-encoded) and values for caching a frame."""
    per_head = split_heads(np.asarray(frame.tokens), config.heads)
    values = per_head
    if config.cape.enabled:
        keys = apply_pose_blockwise(per_head, key_matrix(frame.pose))
    else:
        keys = per_head
    return keys, values


def apply_pose_blockwise(x: np.ndarray, mat4: np.ndarray) -> np.ndarray:
    """Apply a single 4x4 matrix to each 4-block of the last axis of x."""
    shape = x.shape
    out = x.reshape(-1, 4) @ mat4.T.astype(x.dtype, copy=False)
    return out.reshape(shape)


def attend(q_heads: np.ndarray, k_heads: np.ndarray, v_heads: np.ndarray, counter: FlopCounter | None = None):
    """Kernel wrapper: (H, Nq, D) x (H, Nk, D) -> (H, Nq, D), softmax over keys."""
    h, nq, d = q_heads.shape
    scale = 1.0 / math.sqrt(d)
    out, _ = kernels.attention_forward(
        np.ascontiguousarray(q_heads), np.ascontiguousarray(k_heads), np.ascontiguousarray(v_heads), scale
    )
    if counter is not None:
        counter.add_attention(h, nq, k_heads.shape[1], d)
    return out


def framewise_attention(
    query_frames: list[FrameTokens],
    config: AttentionConfig,
    cache: KVCacheLayer | None = None,
    counter: FlopCounter | None = None,
) -> list[np.ndarray]:
    """Multi-head attention across frames with pose-encoded queries and keys.

    Cached frames precede all in-batch frames in arrival order. Query frame i
    attends to the cache plus in-batch frames j <= i (all frames when
    config.causal is false). Query/key vectors are the tokens themselves; the
    denoiser applies its learned projections before using the same machinery.
    """
    if not query_frames:
        return []
    widths = {np.asarray(f.tokens).shape for f in query_frames}
    if len(widths) != 1:
        raise AttentionError(f"inconsistent token shapes across frames: {widths}")
    (s, w) = widths.pop()
    if w != config.width:
        raise AttentionError(f"token width {w} != heads*head_dim {config.width}")

    cached_k = [e.keys for e in cache.entries] if cache is not None else []
    cached_v = [e.values for e in cache.entries] if cache is not None else []

    frame_k, frame_v, frame_q = [], [], []
    for f in query_frames:
        per_head = split_heads(np.asarray(f.tokens), config.heads)
        frame_v.append(per_head)
        if config.cape.enabled:
            frame_k.append(apply_pose_blockwise(per_head, key_matrix(f.pose)))
            frame_q.append(apply_pose_blockwise(per_head, query_matrix(f.pose)))
        else:
            frame_k.append(per_head)
            frame_q.append(per_head)

    outputs = []
    for i, f in enumerate(query_frames):
        last = i + 1 if config.causal else len(query_frames)
        ks = cached_k + frame_k[:last]
        vs = cached_v + frame_v[:last]
        out = attend(frame_q[i], np.concatenate(ks, axis=1), np.concatenate(vs, axis=1), counter)
        outputs.append(merge_heads(out).astype(f.tokens.dtype, copy=False))
    return outputs


def select_window(
    cache: KVCacheLayer,
    query_pose: Pose,
    k: int | None,
    params: PoseDistanceParams,
) -> list[CacheEntry]:
    """Top-k cache entries nearest to the query pose, in arrival order.

    Ties break toward earlier arrival; k=None or k >= size returns everything.
    """
    if k is not None and k < 1:
        raise AttentionError("window size must be >= 1")
    if k is None or k >= len(cache.entries):
        return list(cache.entries)
    ranked = sorted(
        cache.entries, key=lambda e: (pose_distance(e.pose, query_pose, params), e.arrival)
    )
    chosen = ranked[:k]
    return sorted(chosen, key=lambda e: e.arrival)
