"""Relative camera pose encoding for attention queries and keys.

Keys are transformed blockwise by the camera's homogeneous 4x4 matrix, queries
by its inverse transpose, so the pre-softmax score depends only on the relative
pose between the two cameras:

    <encode_query(q, P_q), encode_key(k, P_k)> = <q, phi(P_q^-1 P_k) k>

No learnable parameters are added; the feature dimension must be divisible by
4 so the 4x4 matrix tiles it exactly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, inverse, relative, rotation_about_axis


class CapeError(ValueError):
    pass


@dataclass(frozen=True)
class CapeConfig:
    head_dim: int
    enabled: bool = True

    def __post_init__(self):
        if self.head_dim % 4 != 0 or self.head_dim <= 0:
            raise CapeError(f"head_dim must be a positive multiple of 4, got {self.head_dim}")


def _apply_blockwise(v: np.ndarray, psi: np.ndarray) -> np.ndarray:
    """Apply a 4x4 matrix to each consecutive 4-block of the last axis."""
    v = np.asarray(v)
    d = v.shape[-1]
    if d % 4 != 0:
        raise CapeError(f"vector dimension {d} is not divisible by 4")
    blocks = v.reshape(-1, 4)
    out = blocks @ psi.T.astype(v.dtype, copy=False)
    return out.reshape(v.shape)


def key_matrix(p: Pose) -> np.ndarray:
    """The 4x4 applied to key blocks (the pose matrix itself)."""
    return p.matrix()


def query_matrix(p: Pose) -> np.ndarray:
    """The 4x4 applied to query blocks (inverse transpose of the pose matrix)."""
    return inverse(p).matrix().T


def phi(p: Pose, d: int) -> np.ndarray:
    """Dense d x d block-diagonal tiling of the pose matrix (d/4 blocks).

    Kept for analysis and as the oracle form; the encode functions apply the
    same map blockwise in O(d) per token instead of materializing this.
    """
    if d % 4 != 0 or d <= 0:
        raise CapeError(f"d must be a positive multiple of 4, got {d}")
    return np.kron(np.eye(d // 4), p.matrix())


def encode_key(v: np.ndarray, p: Pose) -> np.ndarray:
    """Blockwise phi(P) v for arrays of shape (..., d)."""
    return _apply_blockwise(v, key_matrix(p))


def encode_query(v: np.ndarray, p: Pose) -> np.ndarray:
    """Blockwise phi(P^-T) v for arrays of shape (..., d)."""
    return _apply_blockwise(v, query_matrix(p))


def score(q: np.ndarray, k: np.ndarray, p_q: Pose, p_k: Pose) -> float:
    """Pre-softmax attention score between one encoded query and key."""
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    k = np.asarray(k, dtype=np.float64).reshape(-1)
    if q.shape != k.shape:
        raise CapeError(f"q and k dims differ: {q.shape} vs {k.shape}")
    return float(encode_query(q, p_q) @ encode_key(k, p_k))


@dataclass
class SweepCurve:
    """Score as a function of one relative-pose parameter.

    parameter: degrees (rotation mode) or scene units (translation mode),
    strictly increasing; score: pre-softmax attention score at each value.
    """

    mode: str
    parameter: np.ndarray
    score: np.ndarray
    cape_enabled: bool = True
    axis: tuple = field(default=(0.0, 0.0, 1.0))

    def __post_init__(self):
        self.parameter = np.asarray(self.parameter, dtype=np.float64)
        self.score = np.asarray(self.score, dtype=np.float64)
        if self.parameter.shape != self.score.shape:
            raise CapeError("parameter and score must have the same length")
        if not np.all(np.diff(self.parameter) > 0):
            raise CapeError("parameter values must be strictly increasing")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["parameter", "score"])
            for x, s in zip(self.parameter, self.score):
                w.writerow([repr(float(x)), repr(float(s))])


def sweep_analysis(
    q: np.ndarray,
    k: np.ndarray,
    mode: str,
    axis=(0.0, 0.0, 1.0),
    sweep_range=None,
    n_samples: int = 145,
    enabled: bool = True,
) -> SweepCurve:
    """Score sweep over a single relative-pose degree of freedom.

    mode "rotation": the key pose rotates about `axis` by each angle in
    degrees (default range 0..720). mode "translation": the key pose
    translates along `axis` by each magnitude in scene units (default range
    -2..2). The query pose stays at identity, so the swept parameter IS the
    relative pose. With enabled=False the raw dot product is recorded,
    which is constant by construction.
    """
    if n_samples < 3:
        raise CapeError("n_samples must be >= 3")
    axis = np.asarray(axis, dtype=np.float64)
    norm = np.linalg.norm(axis)
    if norm == 0.0:
        raise CapeError("sweep axis must be nonzero")
    axis = axis / norm
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    k = np.asarray(k, dtype=np.float64).reshape(-1)
    if q.shape != k.shape:
        raise CapeError("q and k must have the same dimension")
    if q.shape[0] % 4 != 0:
        raise CapeError("vector dimension must be divisible by 4")

    if mode == "rotation":
        lo, hi = sweep_range if sweep_range is not None else (0.0, 720.0)
    elif mode == "translation":
        lo, hi = sweep_range if sweep_range is not None else (-2.0, 2.0)
    else:
        raise CapeError(f"unknown sweep mode {mode!r}")
    params = np.linspace(lo, hi, n_samples)

    p_query = Pose.identity()
    scores = np.empty(n_samples)
    for i, val in enumerate(params):
        if mode == "rotation":
            p_key = Pose(rotation_about_axis(axis, np.radians(val)), np.zeros(3))
        else:
            p_key = Pose(np.eye(3), axis * val)
        scores[i] = score(q, k, p_query, p_key) if enabled else float(q @ k)
    return SweepCurve(mode=mode, parameter=params, score=scores, cape_enabled=enabled, axis=tuple(axis))
