"""Procedural box-room scenes with spheres, deterministic ray-cast rendering,
camera trajectory sampling, dataset generation, and a ground-truth-geometry
warp used as the consistency oracle.

The renderer is intentionally simple (flat Lambertian shading, no shadows) but
view-dependent enough that synthesizing unseen views requires real geometry
reasoning at tiny resolutions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import kernels
from .geometry import GeometryError, Intrinsics, Pose, look_at, normalize_scene_scale

SCHEMA_VERSION = 1
AMBIENT = 0.2
CAMERA_MARGIN = 0.35  # min distance from cameras to walls


class WorldgenError(RuntimeError):
    pass


@dataclass
class SceneSpec:
    seed: int
    room_min: np.ndarray
    room_max: np.ndarray
    face_colors: np.ndarray  # (6, 3) for faces (-x, +x, -y, +y, -z, +z)
    sphere_centers: np.ndarray  # (S, 3)
    sphere_radii: np.ndarray  # (S,)
    sphere_colors: np.ndarray  # (S, 3)
    light_dir: np.ndarray  # unit, direction light travels
    ambient: float = AMBIENT

    def validate(self):
        if np.any(self.sphere_radii <= 0):
            raise WorldgenError("sphere radii must be positive")
        lo = self.room_min[None] + self.sphere_radii[:, None]
        hi = self.room_max[None] - self.sphere_radii[:, None]
        if np.any(self.sphere_centers < lo) or np.any(self.sphere_centers > hi):
            raise WorldgenError("spheres must lie inside the room")
        for colors in (self.face_colors, self.sphere_colors):
            if np.any(colors < 0) or np.any(colors > 1):
                raise WorldgenError("colors must lie in [0, 1]")
        return self

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "room_min": self.room_min.tolist(),
            "room_max": self.room_max.tolist(),
            "face_colors": self.face_colors.tolist(),
            "sphere_centers": self.sphere_centers.tolist(),
            "sphere_radii": self.sphere_radii.tolist(),
            "sphere_colors": self.sphere_colors.tolist(),
            "light_dir": self.light_dir.tolist(),
            "ambient": self.ambient,
        }

    @staticmethod
    def from_json(d: dict) -> "SceneSpec":
        return SceneSpec(
            seed=int(d["seed"]),
            room_min=np.asarray(d["room_min"], dtype=np.float64),
            room_max=np.asarray(d["room_max"], dtype=np.float64),
            face_colors=np.asarray(d["face_colors"], dtype=np.float64),
            sphere_centers=np.asarray(d["sphere_centers"], dtype=np.float64),
            sphere_radii=np.asarray(d["sphere_radii"], dtype=np.float64),
            sphere_colors=np.asarray(d["sphere_colors"], dtype=np.float64),
            light_dir=np.asarray(d["light_dir"], dtype=np.float64),
            ambient=float(d["ambient"]),
        )


def sample_scene(seed: int) -> SceneSpec:
    """Random room, sphere arrangement, and light; reproducible from seed."""
    rng = np.random.default_rng([seed, 0x5CE11E])
    half = rng.uniform(1.7, 2.3, size=3)
    room_min, room_max = -half, half
    face_colors = rng.uniform(0.15, 1.0, size=(6, 3))
    n_spheres = int(rng.integers(3, 9))
    radii = rng.uniform(0.25, 0.55, size=n_spheres)
    centers = np.empty((n_spheres, 3))
    for i in range(n_spheres):
        # Central cluster so orbiting cameras keep the spheres in view.
        centers[i] = rng.uniform(-0.8, 0.8, size=3) * (half - radii[i] - 0.1) / half
    colors = rng.uniform(0.1, 1.0, size=(n_spheres, 3))
    light = rng.normal(size=3)
    light[1] = -abs(light[1]) - 0.5  # bias downward so floors and tops differ
    light /= np.linalg.norm(light)
    return SceneSpec(
        seed=seed,
        room_min=room_min,
        room_max=room_max,
        face_colors=face_colors,
        sphere_centers=centers,
        sphere_radii=radii,
        sphere_colors=colors,
        light_dir=light,
    ).validate()


def default_intrinsics(size: int) -> Intrinsics:
    # ~60 degree horizontal field of view
    f = 0.866 * size
    return Intrinsics(fx=f, fy=f, cx=size / 2.0, cy=size / 2.0, width=size, height=size)


def _ray_grid(pose: Pose, intr: Intrinsics) -> np.ndarray:
    """(H*W, 3) unit world-space ray directions through pixel centers."""
    xs = (np.arange(intr.width) + 0.5 - intr.cx) / intr.fx
    ys = (np.arange(intr.height) + 0.5 - intr.cy) / intr.fy
    gx, gy = np.meshgrid(xs, ys)
    dirs = np.stack([gx, gy, np.ones_like(gx)], axis=-1).reshape(-1, 3)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return dirs @ pose.rotation.T


def _trace(scene: SceneSpec, pose: Pose, intr: Intrinsics):
    origin = np.ascontiguousarray(pose.translation, dtype=np.float64)
    if np.any(origin <= scene.room_min) or np.any(origin >= scene.room_max):
        raise WorldgenError(f"camera origin {origin} outside room")
    dirs = np.ascontiguousarray(_ray_grid(pose, intr))
    rgb, dist = kernels.trace_rays(
        origin,
        dirs,
        np.ascontiguousarray(scene.sphere_centers),
        np.ascontiguousarray(scene.sphere_radii),
        np.ascontiguousarray(scene.sphere_colors),
        np.ascontiguousarray(scene.room_min),
        np.ascontiguousarray(scene.room_max),
        np.ascontiguousarray(scene.face_colors),
        np.ascontiguousarray(scene.light_dir),
        scene.ambient,
    )
    return rgb.reshape(intr.height, intr.width, 3), dist.reshape(intr.height, intr.width)


def render(scene: SceneSpec, pose: Pose, intr: Intrinsics) -> np.ndarray:
    """(H, W, 3) float32 image in [-1, 1]."""
    rgb, _ = _trace(scene, pose, intr)
    return (rgb * 2.0 - 1.0).astype(np.float32)


def depth(scene: SceneSpec, pose: Pose, intr: Intrinsics) -> np.ndarray:
    """(H, W) Euclidean hit distance along each pixel's ray, scene units."""
    _, dist = _trace(scene, pose, intr)
    return dist


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

TRAJECTORY_KINDS = ("orbit", "random-walk", "return-back", "forward-push")


@dataclass(frozen=True)
class TrajectorySpec:
    kind: str
    count: int
    radius: float = 1.5
    step: float = 0.25
    target: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.kind not in TRAJECTORY_KINDS:
            raise WorldgenError(f"unknown trajectory kind {self.kind!r}")
        if self.count < 1:
            raise WorldgenError("count must be >= 1")


def _clamp_to_room(p: np.ndarray, scene: SceneSpec) -> np.ndarray:
    return np.clip(p, scene.room_min + CAMERA_MARGIN, scene.room_max - CAMERA_MARGIN)


def trajectory_poses(spec: TrajectorySpec, scene: SceneSpec, rng: np.random.Generator) -> list[Pose]:
    """Camera poses inside the room, all looking at the trajectory target."""
    target = np.asarray(spec.target, dtype=np.float64)
    poses = []
    if spec.kind in ("orbit", "return-back"):
        phase = rng.uniform(0.0, 2.0 * np.pi)
        height = rng.uniform(-0.5, 0.7)
        n = spec.count if spec.kind == "orbit" else spec.count // 2 + 1
        angles = phase + np.linspace(0.0, 1.5 * np.pi, n)
        eyes = [
            np.array([spec.radius * np.cos(a), height, spec.radius * np.sin(a)]) for a in angles
        ]
        if spec.kind == "return-back":
            eyes = (eyes + eyes[-2::-1])[: spec.count]
    elif spec.kind == "forward-push":
        start = rng.uniform(-1.0, 1.0, size=3)
        start = start / (np.linalg.norm(start) + 1e-9) * spec.radius
        ts = np.linspace(0.0, 0.6, spec.count)
        eyes = [start * (1.0 - t) + target * t for t in ts]
    else:  # random-walk
        p = rng.uniform(-1.0, 1.0, size=3)
        p = p / (np.linalg.norm(p) + 1e-9) * spec.radius
        eyes = []
        for _ in range(spec.count):
            eyes.append(p.copy())
            p = p + rng.normal(scale=spec.step, size=3)
            p = _clamp_to_room(p, scene)
    for eye in eyes:
        eye = _clamp_to_room(np.asarray(eye, dtype=np.float64), scene)
        if np.linalg.norm(eye - target) < 1e-6:
            eye = eye + np.array([0.0, 0.0, 1e-3])
        poses.append(look_at(eye, target))
    return poses


def scene_pose_pool(scene: SceneSpec, rng: np.random.Generator, per_kind: int = 16) -> list[Pose]:
    """Mixed-trajectory pose pool used for training-sequence sampling."""
    pool = []
    for kind in TRAJECTORY_KINDS:
        radius = rng.uniform(1.2, 1.7)
        spec = TrajectorySpec(kind=kind, count=per_kind, radius=radius, step=0.25)
        pool.extend(trajectory_poses(spec, scene, rng))
    return pool


def sample_training_sequence(
    scene: SceneSpec,
    pool: list[Pose],
    intr: Intrinsics,
    n_frames: int,
    rng: np.random.Generator,
):
    """Draw n_frames distinct pool poses in shuffled (non-contiguous) order.

    Returns (images, normalized poses, scale): translations are divided by the
    pool's scene scale so they match the model's training distribution.
    """
    if n_frames < 2:
        raise WorldgenError("n_frames must be >= 2")
    if len(pool) < n_frames:
        raise WorldgenError(f"pose pool {len(pool)} smaller than n_frames {n_frames}")
    idx = rng.choice(len(pool), size=n_frames, replace=False)
    normalized, scale = normalize_scene_scale(pool)
    images = np.stack([render(scene, pool[i], intr) for i in idx])
    return images, [normalized[i] for i in idx], scale


# ---------------------------------------------------------------------------
# dataset on disk
# ---------------------------------------------------------------------------

SCENE_MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "seed", "scene_spec", "intrinsics", "scale", "poses", "files"],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "seed": {"type": "integer"},
        "scene_spec": {"type": "object"},
        "intrinsics": {"type": "object"},
        "scale": {"type": "number", "exclusiveMinimum": 0},
        "poses": {
            "type": "array",
            "items": {
                "type": "array",
                "minItems": 4,
                "maxItems": 4,
                "items": {"type": "array", "minItems": 4, "maxItems": 4, "items": {"type": "number"}},
            },
        },
        "files": {"type": "array", "items": {"type": "string"}},
    },
}

DATASET_MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "seed", "image_size", "poses_per_scene", "intrinsics", "scenes"],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "seed": {"type": "integer"},
        "image_size": {"type": "integer", "minimum": 4},
        "poses_per_scene": {"type": "integer", "minimum": 2},
        "intrinsics": {"type": "object"},
        "scenes": {"type": "array", "items": {"type": "string"}},
    },
}


def validate_manifest(data: dict, schema: dict) -> None:
    import jsonschema

    jsonschema.validate(data, schema)


def image_to_png(path, image: np.ndarray) -> None:
    """[-1, 1] float image to 8-bit sRGB PNG."""
    u8 = np.clip(np.round((np.asarray(image) + 1.0) * 127.5), 0, 255).astype(np.uint8)
    Image.fromarray(u8, mode="RGB").save(path)


def png_to_image(path) -> np.ndarray:
    u8 = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
    return u8 / 127.5 - 1.0


@dataclass
class SceneBundle:
    """Everything about one stored scene, poses in original scene units."""

    spec: SceneSpec
    intrinsics: Intrinsics
    poses: list
    scale: float
    images: np.ndarray  # (P, H, W, 3) in [-1, 1], loaded from PNG

    def normalized_poses(self) -> list:
        return [Pose(p.rotation, p.translation / self.scale) for p in self.poses]


def make_dataset(
    n_scenes: int,
    out_dir,
    seed: int = 0,
    image_size: int = 16,
    poses_per_scene: int = 64,
) -> dict:
    """Write scenes to out_dir and return the top-level manifest dict."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    intr = default_intrinsics(image_size)
    per_kind = (poses_per_scene + len(TRAJECTORY_KINDS) - 1) // len(TRAJECTORY_KINDS)
    scene_names = []
    for si in range(n_scenes):
        scene_seed = seed * 100_003 + si
        scene = sample_scene(scene_seed)
        rng = np.random.default_rng([seed, 0xD47A, si])
        pool = scene_pose_pool(scene, rng, per_kind=per_kind)[:poses_per_scene]
        _, scale = normalize_scene_scale(pool)
        name = f"scene_{si:04d}"
        scene_dir = out / name
        scene_dir.mkdir(exist_ok=True)
        files = []
        for pi, pose in enumerate(pool):
            fname = f"frame_{pi:04d}.png"
            image_to_png(scene_dir / fname, render(scene, pose, intr))
            files.append(fname)
        manifest = {
            "schema_version": SCHEMA_VERSION,
            "seed": scene_seed,
            "scene_spec": scene.to_json(),
            "intrinsics": intr.to_json(),
            "scale": scale,
            "poses": [p.to_json() for p in pool],
            "files": files,
        }
        validate_manifest(manifest, SCENE_MANIFEST_SCHEMA)
        (scene_dir / "manifest.json").write_text(json.dumps(manifest, indent=1))
        scene_names.append(name)
    top = {
        "schema_version": SCHEMA_VERSION,
        "seed": seed,
        "image_size": image_size,
        "poses_per_scene": poses_per_scene,
        "intrinsics": intr.to_json(),
        "scenes": scene_names,
    }
    validate_manifest(top, DATASET_MANIFEST_SCHEMA)
    (out / "manifest.json").write_text(json.dumps(top, indent=1))
    return top


def load_dataset_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise WorldgenError(f"no dataset manifest at {path}")
    data = json.loads(path.read_text())
    validate_manifest(data, DATASET_MANIFEST_SCHEMA)
    return data


def load_scene(root, name: str) -> SceneBundle:
    scene_dir = Path(root) / name
    data = json.loads((scene_dir / "manifest.json").read_text())
    validate_manifest(data, SCENE_MANIFEST_SCHEMA)
    images = []
    for fname in data["files"]:
        fpath = scene_dir / fname
        if not fpath.exists():
            raise WorldgenError(f"missing referenced image {fpath}")
        images.append(png_to_image(fpath))
    return SceneBundle(
        spec=SceneSpec.from_json(data["scene_spec"]),
        intrinsics=Intrinsics.from_json(data["intrinsics"]),
        poses=[Pose.from_json(p) for p in data["poses"]],
        scale=float(data["scale"]),
        images=np.stack(images),
    )


# ---------------------------------------------------------------------------
# depth-based warp (the consistency oracle)
# ---------------------------------------------------------------------------


def warp(
    image_i: np.ndarray,
    depth_i: np.ndarray,
    pose_i: Pose,
    pose_j: Pose,
    intr: Intrinsics,
    depth_j: np.ndarray | None = None,
    z_tol: float = 0.01,
):
    """Forward-splat view i into view j's image plane using view i's depth.

    Nearest splat wins per target pixel. The validity mask marks target pixels
    that received an in-bounds splat; when depth_j is given, a splat must also
    agree with view j's depth at its landing pixel within z_tol (relative).
    The symmetric test rejects both occluded splats and nearest-neighbor edge
    bleed, and is exact (full mask) for the identity warp. Returns
    (warped image, mask).
    """
    h, w = depth_i.shape
    if image_i.shape[:2] != (h, w):
        raise WorldgenError("image and depth shapes differ")
    dirs = _ray_grid(pose_i, intr)
    points = pose_i.translation[None, :] + dirs * depth_i.reshape(-1, 1)

    rel = points - pose_j.translation[None, :]
    cam = rel @ pose_j.rotation  # camera coords: column-rotation transpose
    z = cam[:, 2]
    in_front = z > 1e-9
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * cam[:, 0] / z + intr.cx
        v = intr.fy * cam[:, 1] / z + intr.cy
    col = np.round(u - 0.5).astype(np.int64)
    row = np.round(v - 0.5).astype(np.int64)
    ok = in_front & (col >= 0) & (col < w) & (row >= 0) & (row < h)

    dist = np.linalg.norm(rel, axis=1)
    if depth_j is not None:
        flatd = np.asarray(depth_j).reshape(h, w)
        dj = flatd[np.clip(row, 0, h - 1), np.clip(col, 0, w - 1)]
        ok &= np.where(ok, np.abs(dist - dj) <= dj * z_tol, False)

    src = np.nonzero(ok)[0]
    tgt = row[src] * w + col[src]
    order = np.lexsort((dist[src], tgt))
    tgt_sorted = tgt[order]
    first = np.ones(len(tgt_sorted), dtype=bool)
    first[1:] = tgt_sorted[1:] != tgt_sorted[:-1]
    winners = src[order][first]
    targets = tgt_sorted[first]

    out = np.zeros_like(np.asarray(image_i))
    mask = np.zeros(h * w, dtype=bool)
    flat_img = np.asarray(image_i).reshape(h * w, -1)
    out.reshape(h * w, -1)[targets] = flat_img[winners]
    mask[targets] = True
    return out, mask.reshape(h, w)
