import numpy as np
import pytest

from arnvs.cape import (
    CapeConfig,
    CapeError,
    encode_key,
    encode_query,
    phi,
    score,
    sweep_analysis,
)
from arnvs.geometry import Pose, compose, random_pose, relative


def test_cape_config_rejects_bad_head_dim():
    CapeConfig(head_dim=8)
    with pytest.raises(CapeError):
        CapeConfig(head_dim=6)


def test_phi_identity_and_single_block():
    np.testing.assert_array_equal(phi(Pose.identity(), 8), np.eye(8))
    p = random_pose(np.random.default_rng(1))
    np.testing.assert_array_equal(phi(p, 4), p.matrix())
    with pytest.raises(CapeError):
        phi(p, 6)


def test_phi_blockwise_equals_per_block_application():
    rng = np.random.default_rng(2)
    p = random_pose(rng)
    v = rng.normal(size=12)
    dense = phi(p, 12) @ v
    # Oracle: apply the 4x4 to each consecutive 4-block separately.
    blocks = [p.matrix() @ v[4 * i : 4 * i + 4] for i in range(3)]
    np.testing.assert_allclose(dense, np.concatenate(blocks), atol=1e-12)
    # Off-block entries are exactly zero.
    m = phi(p, 12)
    mask = np.kron(np.eye(3, dtype=bool), np.ones((4, 4), dtype=bool))
    assert np.all(m[~mask] == 0.0)


def test_encode_key_trivial_and_linear():
    rng = np.random.default_rng(3)
    v = rng.normal(size=16)
    np.testing.assert_allclose(encode_key(v, Pose.identity()), v, atol=1e-15)
    p = random_pose(rng)
    np.testing.assert_allclose(encode_key(2.5 * v, p), 2.5 * encode_key(v, p), atol=1e-12)


def test_encode_key_matches_dense_matmul_oracle():
    rng = np.random.default_rng(4)
    p = random_pose(rng)
    v = rng.normal(size=24)
    np.testing.assert_allclose(encode_key(v, p), phi(p, 24) @ v, atol=1e-12)


def test_encode_query_trivial_orthogonal_and_dense_oracle():
    rng = np.random.default_rng(5)
    v = rng.normal(size=16)
    np.testing.assert_allclose(encode_query(v, Pose.identity()), v, atol=1e-15)
    # Pure rotation: R^-T = R, so query and key encodings coincide.
    p_rot = Pose(random_pose(rng).rotation, np.zeros(3))
    np.testing.assert_allclose(encode_query(v, p_rot), encode_key(v, p_rot), atol=1e-12)
    # Dense oracle with the explicit inverse-transpose tiling.
    p = random_pose(rng)
    psi_q = np.linalg.inv(p.matrix()).T
    dense = np.kron(np.eye(4), psi_q)
    np.testing.assert_allclose(encode_query(v, p), dense @ v, atol=1e-12)


def test_score_same_pose_is_plain_dot_product():
    rng = np.random.default_rng(6)
    q, k = rng.normal(size=8), rng.normal(size=8)
    p = random_pose(rng)
    assert score(q, k, p, p) == pytest.approx(float(q @ k), rel=1e-9)


def test_score_factorizes_through_relative_pose():
    rng = np.random.default_rng(7)
    for _ in range(20):
        q, k = rng.normal(size=16), rng.normal(size=16)
        p_q, p_k = random_pose(rng), random_pose(rng)
        s = score(q, k, p_q, p_k)
        expected = float(q @ (phi(relative(p_q, p_k), 16) @ k))
        assert abs(s - expected) <= 1e-6 * (1.0 + abs(s))


def test_score_invariant_under_global_frame_change():
    rng = np.random.default_rng(8)
    q, k = rng.normal(size=16), rng.normal(size=16)
    p_a, p_b = random_pose(rng), random_pose(rng)
    base = score(q, k, p_a, p_b)
    for _ in range(100):
        g = random_pose(rng)
        moved = score(q, k, compose(g, p_a), compose(g, p_b))
        assert moved == pytest.approx(base, rel=1e-6, abs=1e-6)


def test_score_matches_dense_two_sided_oracle():
    rng = np.random.default_rng(9)
    q, k = rng.normal(size=12), rng.normal(size=12)
    p_q, p_k = random_pose(rng), random_pose(rng)
    dense_q = np.kron(np.eye(3), np.linalg.inv(p_q.matrix()).T) @ q
    dense_k = np.kron(np.eye(3), p_k.matrix()) @ k
    assert score(q, k, p_q, p_k) == pytest.approx(float(dense_q @ dense_k), rel=1e-9)


def test_rotation_sweep_is_360_periodic():
    rng = np.random.default_rng(10)
    q, k = rng.normal(size=16), rng.normal(size=16)
    curve = sweep_analysis(q, k, "rotation", axis=(0, 1, 0), sweep_range=(0.0, 720.0), n_samples=145)
    half = 72  # 720 deg over 145 samples -> exactly 5 deg per step
    scale = 1.0 + np.abs(curve.score).max()
    diffs = np.abs(curve.score[: half + 1] - curve.score[half : 2 * half + 1])
    assert diffs.max() < 1e-6 * scale
    assert abs(curve.score[0] - curve.score[half]) < 1e-6 * scale


def test_translation_sweep_is_affine():
    rng = np.random.default_rng(11)
    q, k = rng.normal(size=16), rng.normal(size=16)
    curve = sweep_analysis(q, k, "translation", axis=(1, 0, 0), sweep_range=(0.0, 2.0), n_samples=21)
    s0 = curve.score[0]
    s1 = curve.score[10]  # t = 1.0
    s2 = curve.score[20]  # t = 2.0
    assert (s2 - s0) == pytest.approx(2.0 * (s1 - s0), rel=1e-9, abs=1e-12)
    coeffs = np.polyfit(curve.parameter, curve.score, 1)
    resid = curve.score - np.polyval(coeffs, curve.parameter)
    assert np.abs(resid).max() < 1e-9 * (1.0 + np.abs(curve.score).max())


def test_disabled_sweep_is_constant():
    rng = np.random.default_rng(12)
    q, k = rng.normal(size=16), rng.normal(size=16)
    for mode in ("rotation", "translation"):
        curve = sweep_analysis(q, k, mode, enabled=False)
        assert np.ptp(curve.score) == 0.0


def test_sweep_rejects_zero_axis_and_mismatched_dims():
    rng = np.random.default_rng(13)
    q, k = rng.normal(size=16), rng.normal(size=16)
    with pytest.raises(CapeError):
        sweep_analysis(q, k, "rotation", axis=(0, 0, 0))
    with pytest.raises(CapeError):
        score(q, rng.normal(size=12), Pose.identity(), Pose.identity())


def test_sweep_csv_round_trip(tmp_path):
    rng = np.random.default_rng(14)
    curve = sweep_analysis(rng.normal(size=8), rng.normal(size=8), "rotation", n_samples=9)
    path = tmp_path / "curve.csv"
    curve.to_csv(path)
    rows = path.read_text().strip().splitlines()
    assert rows[0] == "parameter,score"
    data = np.array([[float(x) for x in r.split(",")] for r in rows[1:]])
    np.testing.assert_allclose(data[:, 0], curve.parameter)
    np.testing.assert_allclose(data[:, 1], curve.score)
