"""Pure-numpy implementations of the hot kernels.

Same contracts as the compiled module arnvs.kernels._core; used as the
fallback when the extension is unavailable or ARNVS_PURE_PYTHON is set.
"""

import numpy as np

BACKEND_NAME = "pure"


def attention_forward(q, k, v, scale):
    """Scaled dot-product attention over gathered keys.

    q: (B, Nq, D), k/v: (B, Nk, D) with B folding batch x heads. Returns
    (out (B, Nq, D), probs (B, Nq, Nk)). Softmax is taken over the full key
    axis; callers restrict causality by gathering only allowed keys.
    """
    scores = (q @ k.transpose(0, 2, 1)) * scale
    scores -= scores.max(axis=2, keepdims=True)
    probs = np.exp(scores)
    probs /= probs.sum(axis=2, keepdims=True)
    return probs @ v, probs


def trace_rays(
    origin,
    dirs,
    sphere_centers,
    sphere_radii,
    sphere_colors,
    room_min,
    room_max,
    face_colors,
    light_dir,
    ambient,
):
    """Cast rays from a single origin into a box room with spheres.

    dirs: (N, 3) unit directions; sphere_* arrays describe up to S spheres;
    face_colors: (6, 3) box face colors ordered (-x, +x, -y, +y, -z, +z).
    Returns (rgb (N, 3) in [0, 1], depth (N,) Euclidean hit distance).
    The origin must lie strictly inside the room.
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    n = dirs.shape[0]
    origin = np.asarray(origin, dtype=np.float64)

    # Box exit distance per axis; ray starts inside, so every axis bounds t.
    with np.errstate(divide="ignore"):
        inv = np.where(dirs != 0.0, 1.0 / dirs, np.inf)
    bound = np.where(dirs >= 0.0, room_max, room_min)
    t_axis = np.where(np.isinf(inv), np.inf, (bound - origin) * inv)
    axis = np.argmin(t_axis, axis=1)
    t_hit = t_axis[np.arange(n), axis]
    face = 2 * axis + (dirs[np.arange(n), axis] >= 0.0).astype(np.int64)
    color = np.asarray(face_colors, dtype=np.float64)[face]
    # Inward normal of the hit face.
    normal = np.zeros((n, 3))
    normal[np.arange(n), axis] = np.where(dirs[np.arange(n), axis] >= 0.0, -1.0, 1.0)

    centers = np.asarray(sphere_centers, dtype=np.float64).reshape(-1, 3)
    radii = np.asarray(sphere_radii, dtype=np.float64).reshape(-1)
    for c, r, col in zip(centers, radii, np.asarray(sphere_colors).reshape(-1, 3)):
        oc = origin - c
        b = dirs @ oc
        disc = b * b - (oc @ oc - r * r)
        ok = disc >= 0.0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t0 = -b - sq
        t1 = -b + sq
        t = np.where(t0 > 1e-9, t0, t1)
        hit = ok & (t > 1e-9) & (t < t_hit)
        if not hit.any():
            continue
        p = origin + dirs[hit] * t[hit, None]
        normal[hit] = (p - c) / r
        color[hit] = col
        t_hit = np.where(hit, t, t_hit)

    lambert = np.maximum(0.0, -(normal @ np.asarray(light_dir, dtype=np.float64)))
    rgb = color * (ambient + (1.0 - ambient) * lambert)[:, None]
    return np.clip(rgb, 0.0, 1.0), t_hit
