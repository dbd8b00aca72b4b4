"""Parity between the compiled kernel core and the pure-numpy fallback."""

import numpy as np
import pytest

from arnvs import kernels


def both_backends():
    backs = kernels.backends()
    if "compiled" not in backs:
        pytest.skip("compiled extension not available")
    return backs["pure"], backs["compiled"]


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_attention_forward_parity(dtype):
    pure, core = both_backends()
    rng = np.random.default_rng(0)
    q = rng.normal(size=(6, 5, 16)).astype(dtype)
    k = rng.normal(size=(6, 9, 16)).astype(dtype)
    v = rng.normal(size=(6, 9, 16)).astype(dtype)
    out_p, probs_p = pure.attention_forward(q, k, v, 0.25)
    out_c, probs_c = core.attention_forward(q, k, v, 0.25)
    tol = 1e-6 if dtype == np.float32 else 1e-12
    np.testing.assert_allclose(out_c, out_p, rtol=tol, atol=tol)
    np.testing.assert_allclose(probs_c, probs_p, rtol=tol, atol=tol)
    assert out_c.dtype == dtype


def test_attention_probs_are_normalized():
    _, core = both_backends()
    rng = np.random.default_rng(1)
    q = rng.normal(size=(2, 3, 8)).astype(np.float64)
    k = rng.normal(size=(2, 7, 8)).astype(np.float64)
    v = rng.normal(size=(2, 7, 8)).astype(np.float64)
    _, probs = core.attention_forward(q, k, v, 1.0)
    np.testing.assert_allclose(probs.sum(axis=2), 1.0, atol=1e-12)
    assert np.all(probs >= 0)


def test_trace_rays_parity():
    pure, core = both_backends()
    from arnvs.geometry import look_at
    from arnvs.worldgen import _ray_grid, default_intrinsics, sample_scene

    scene = sample_scene(3)
    pose = look_at(np.array([1.1, 0.2, -1.0]), np.zeros(3))
    intr = default_intrinsics(24)
    dirs = np.ascontiguousarray(_ray_grid(pose, intr))
    args = (
        np.ascontiguousarray(pose.translation),
        dirs,
        np.ascontiguousarray(scene.sphere_centers),
        np.ascontiguousarray(scene.sphere_radii),
        np.ascontiguousarray(scene.sphere_colors),
        np.ascontiguousarray(scene.room_min),
        np.ascontiguousarray(scene.room_max),
        np.ascontiguousarray(scene.face_colors),
        np.ascontiguousarray(scene.light_dir),
        0.2,
    )
    rgb_p, depth_p = pure.trace_rays(*args)
    rgb_c, depth_c = core.trace_rays(*args)
    np.testing.assert_allclose(rgb_c, rgb_p, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(depth_c, depth_p, rtol=1e-12, atol=1e-12)


def test_trace_rays_handles_zero_spheres():
    pure, core = both_backends()
    origin = np.zeros(3)
    dirs = np.ascontiguousarray(np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]))
    args = (
        origin,
        dirs,
        np.zeros((0, 3)),
        np.zeros(0),
        np.zeros((0, 3)),
        np.full(3, -2.0),
        np.full(3, 2.0),
        np.full((6, 3), 0.5),
        np.array([0.0, -1.0, 0.0]),
        0.2,
    )
    for impl in (pure, core):
        rgb, d = impl.trace_rays(*args)
        np.testing.assert_allclose(d, [2.0, 2.0])


def test_backend_selection_env(monkeypatch):
    import importlib
    import os
    import subprocess
    import sys

    code = "import arnvs.kernels as k; print(k.BACKEND)"
    env = dict(os.environ, ARNVS_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, env=env)
    assert out.stdout.strip() == "pure"
    env.pop("ARNVS_PURE_PYTHON")
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, env=env)
    assert out.stdout.strip() in ("mixed", "pure")
