"""SE(3) camera pose math: composition, relative poses, geodesics, pose distance.

Convention: poses are camera-to-world rigid transforms. The relative pose
between a query camera q and a key camera k is ``inverse(q) @ k``, which is
invariant under any rigid change of the world frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

ROT_TOL = 1e-6


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Pose:
    """Rigid camera-to-world transform: 3x3 rotation + 3-vector translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise GeometryError(f"rotation must be 3x3, got {r.shape}")
        if np.abs(r @ r.T - np.eye(3)).max() > ROT_TOL:
            raise GeometryError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > ROT_TOL:
            raise GeometryError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def matrix(self) -> np.ndarray:
        """Homogeneous 4x4 form; bottom row is exactly (0, 0, 0, 1)."""
        m = np.zeros((4, 4), dtype=np.float64)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        m[3, 3] = 1.0
        return m

    @staticmethod
    def from_matrix(m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise GeometryError(f"expected 4x4 matrix, got {m.shape}")
        if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
            raise GeometryError("bottom row must be (0, 0, 0, 1)")
        return Pose(m[:3, :3], m[:3, 3])

    def to_json(self) -> list:
        """Row-major 4x4 nested list, the wire format for poses."""
        return self.matrix().tolist()

    @staticmethod
    def from_json(data) -> "Pose":
        return Pose.from_matrix(np.asarray(data, dtype=np.float64))


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics in pixels. Camera frame: x right, y down, z forward."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError("principal point must lie inside the image")

    def to_json(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }

    @staticmethod
    def from_json(data: dict) -> "Intrinsics":
        return Intrinsics(
            fx=float(data["fx"]),
            fy=float(data["fy"]),
            cx=float(data["cx"]),
            cy=float(data["cy"]),
            width=int(data["width"]),
            height=int(data["height"]),
        )


@dataclass(frozen=True)
class PoseDistanceParams:
    """Weights for the pose-space metric used by window selection.

    rotation_weight converts radians to scene units; translation_scale divides
    translation distance (normally the scene normalization scale).
    """

    rotation_weight: float = 1.0
    translation_scale: float = 1.0

    def __post_init__(self):
        if self.rotation_weight < 0:
            raise GeometryError("rotation_weight must be >= 0")
        if self.translation_scale <= 0:
            raise GeometryError("translation_scale must be > 0")


def compose(a: Pose, b: Pose) -> Pose:
    """Homogeneous product a @ b."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(p: Pose) -> Pose:
    return Pose(p.rotation.T, -(p.rotation.T @ p.translation))


def relative(p_query: Pose, p_key: Pose) -> Pose:
    """inverse(p_query) @ p_key; invariant under left world-frame changes."""
    return compose(inverse(p_query), p_key)


def rotation_geodesic(a: np.ndarray, b: np.ndarray) -> float:
    """Angle in [0, pi] of the rotation taking a to b.

    Equivalent to arccos((trace(a^T b) - 1) / 2) but evaluated via atan2 of the
    skew-part magnitude, which stays exact near 0 where arccos loses precision.
    """
    r = np.asarray(a).T @ np.asarray(b)
    cos_angle = (np.trace(r) - 1.0) / 2.0
    sin_angle = 0.5 * math.sqrt(
        (r[2, 1] - r[1, 2]) ** 2 + (r[0, 2] - r[2, 0]) ** 2 + (r[1, 0] - r[0, 1]) ** 2
    )
    return float(math.atan2(sin_angle, cos_angle))


def pose_distance(a: Pose, b: Pose, params: PoseDistanceParams) -> float:
    """Scaled translation distance plus weighted rotation geodesic."""
    t_term = float(np.linalg.norm(a.translation - b.translation)) / params.translation_scale
    r_term = params.rotation_weight * rotation_geodesic(a.rotation, b.rotation)
    return t_term + r_term


def normalize_scene_scale(poses: list[Pose]) -> tuple[list[Pose], float]:
    """Divide all translations by the max translation norm (1 if all zero)."""
    if not poses:
        raise GeometryError("normalize_scene_scale needs at least one pose")
    scale = max(float(np.linalg.norm(p.translation)) for p in poses)
    if scale == 0.0:
        return list(poses), 1.0
    return [Pose(p.rotation, p.translation / scale) for p in poses], scale


def rotation_about_axis(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix about a unit axis."""
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n == 0:
        raise GeometryError("axis must be nonzero")
    x, y, z = axis / n
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation via normalized quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def random_pose(rng: np.random.Generator, translation_scale: float = 1.0) -> Pose:
    return Pose(random_rotation(rng), rng.normal(size=3) * translation_scale)


def look_at(eye: np.ndarray, target: np.ndarray, up=(0.0, 1.0, 0.0)) -> Pose:
    """Camera-to-world pose with z pointing from eye toward target, y down-ish.

    Uses the x-right / y-down / z-forward camera frame; `up` is the world-up
    hint used to fix the roll.
    """
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise GeometryError("look_at eye and target coincide")
    fwd = fwd / n
    world_up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, world_up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    # Columns (right, down, fwd) are orthonormal with right x down = fwd.
    return Pose(np.stack([right, down, fwd], axis=1), eye)
