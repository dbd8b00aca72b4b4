import math

import numpy as np
import pytest

from arnvs.geometry import look_at
from arnvs.metrics import (
    AblationTable,
    EvalReport,
    MetricsError,
    drift_curve,
    psnr,
    reference_ablation_psnr,
    warp_consistency,
    write_metrics_csv,
)
from arnvs.worldgen import default_intrinsics, depth, render, sample_scene


def test_psnr_identical_hits_cap():
    x = np.random.default_rng(0).uniform(-1, 1, size=(8, 8, 3))
    assert psnr(x, x) == 99.0


def test_psnr_half_gray_vs_black_closed_form():
    black = np.full((4, 4, 3), -1.0)  # 0.0 in [0, 1] units
    gray = np.zeros((4, 4, 3))  # 0.5 in [0, 1] units
    assert psnr(black, gray) == pytest.approx(10 * math.log10(1 / 0.25), abs=1e-9)


def test_psnr_monotone_under_noise_and_shape_check():
    rng = np.random.default_rng(1)
    x = rng.uniform(-0.5, 0.5, size=(8, 8, 3))
    small = psnr(x, np.clip(x + rng.normal(scale=0.01, size=x.shape), -1, 1))
    big = psnr(x, np.clip(x + rng.normal(scale=0.2, size=x.shape), -1, 1))
    assert big < small
    with pytest.raises(MetricsError):
        psnr(x, x[:4])


def test_warp_consistency_identical_poses_is_plain_psnr():
    scene = sample_scene(1)
    intr = default_intrinsics(16)
    pose = look_at(np.array([1.2, 0.1, -0.8]), np.zeros(3))
    gen_i = render(scene, pose, intr)
    rng = np.random.default_rng(2)
    gen_j = np.clip(gen_i + rng.normal(scale=0.05, size=gen_i.shape).astype(np.float32), -1, 1)
    d = depth(scene, pose, intr)
    got = warp_consistency(gen_i, gen_j, d, pose, pose, intr, gt_depth_j=d)
    assert got == pytest.approx(psnr(gen_i, gen_j), abs=1e-9)


def test_warp_consistency_gt_vs_gt_over_30db_and_random_pair_low():
    scene = sample_scene(4)
    intr = default_intrinsics(32)
    pa = look_at(np.array([1.2, 0.2, -0.9]), np.zeros(3))
    pb = look_at(np.array([0.95, 0.3, -1.1]), np.zeros(3))
    img_a, img_b = render(scene, pa, intr), render(scene, pb, intr)
    d_a, d_b = depth(scene, pa, intr), depth(scene, pb, intr)
    good = warp_consistency(img_a, img_b, d_a, pa, pb, intr, gt_depth_j=d_b)
    assert good is not None and good > 30.0

    # Unrelated image baseline scores far below the consistency of true pairs.
    rng = np.random.default_rng(7)
    noise = rng.uniform(-1.0, 1.0, size=img_b.shape).astype(np.float32)
    bad = warp_consistency(img_a, noise, d_a, pa, pb, intr, gt_depth_j=d_b)
    assert bad is not None and bad < 12.0
    other = render(sample_scene(99), pb, intr)  # different scene, same pose
    worse = warp_consistency(img_a, other, d_a, pa, pb, intr, gt_depth_j=d_b)
    assert worse is not None and worse < good - 10.0


def test_warp_consistency_empty_mask_is_missing_value():
    scene = sample_scene(5)
    intr = default_intrinsics(8)
    pa = look_at(np.array([0.0, 0.0, -1.5]), np.zeros(3))
    pb = look_at(np.array([0.0, 0.0, 1.5]), np.zeros(3))  # opposite direction
    img = render(scene, pa, intr)
    d_a = depth(scene, pa, intr)
    far = np.full((8, 8), 1e-6)  # z-test can never match
    got = warp_consistency(img, img, d_a, pa, pb, intr, gt_depth_j=far)
    assert got is None


def test_drift_curve_slopes():
    assert drift_curve([10.0, 10.0, 10.0, 10.0, 10.0]) == 0.0
    x = np.arange(8, dtype=float)
    assert drift_curve(20.0 - 0.5 * x) == pytest.approx(-0.5, abs=1e-12)
    rng = np.random.default_rng(3)
    noisy = 20.0 - 0.5 * np.arange(200) + rng.normal(scale=0.5, size=200)
    assert drift_curve(noisy) == pytest.approx(-0.5, abs=0.02)
    with pytest.raises(MetricsError):
        drift_curve([1.0, 2.0, 3.0])


def test_eval_report_properties():
    rep = EvalReport(per_frame_psnr=[20.0, 19.0, 18.0, 17.0], warp_psnr=[30.0, None, 25.0])
    assert rep.mean_psnr == pytest.approx(18.5)
    assert rep.warp_mean == pytest.approx(27.5)
    assert rep.drift_slope == pytest.approx(-1.0)
    short = EvalReport(per_frame_psnr=[20.0])
    assert short.drift_slope is None
    with pytest.raises(MetricsError):
        EvalReport(per_frame_psnr=[])


def test_ablation_table_single_run_and_reference_value():
    rep = EvalReport(per_frame_psnr=[15.0, 16.0])
    table = AblationTable.from_reports({("causal-ar", 1, 8): rep})
    text = table.to_text()
    assert "15.50" in text
    assert "18.08" in text  # published causal N=1 F=8 comparison value
    assert "--" in text
    assert reference_ablation_psnr()["causal-ar"]["1"]["8"] == 18.08


def test_ablation_table_csv_round_trip(tmp_path):
    runs = {
        ("causal-ar", 1, 8): EvalReport(per_frame_psnr=[15.0, 16.0]),
        ("noncausal-parallel", 2, 4): EvalReport(per_frame_psnr=[11.25]),
    }
    table = AblationTable.from_reports(runs)
    text = table.to_csv(tmp_path / "ablation.csv")
    assert (tmp_path / "ablation.csv").read_text() == text
    parsed = AblationTable.parse_csv(text)
    assert parsed[("causal-ar", 1, 8)] == pytest.approx(15.5)
    assert parsed[("noncausal-parallel", 2, 4)] == pytest.approx(11.25)
    assert ("noncausal-ar", 1, 2) not in parsed


def test_metrics_csv_schema(tmp_path):
    rows = [
        dict(run_id="r0", model="ck.arnvs", mode="causal-ar", N=1, F=8, frame_idx=0, psnr=21.0, warp_psnr=25.0),
        dict(run_id="r0", model="ck.arnvs", mode="causal-ar", N=1, F=8, frame_idx=1, psnr=20.0, warp_psnr=None),
    ]
    path = tmp_path / "metrics.csv"
    write_metrics_csv(path, rows)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "run_id,model,mode,N,F,frame_idx,psnr,warp_psnr"
    assert lines[2].endswith("--")
