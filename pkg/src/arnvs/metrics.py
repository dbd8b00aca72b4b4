"""PSNR, drift slopes over rollouts, warp-consistency, and ablation tables."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .geometry import Intrinsics, Pose
from .worldgen import warp

PSNR_CAP = 99.0
ABLATION_MODES = ("causal-ar", "noncausal-parallel", "noncausal-ar")
ABLATION_N = (1, 2, 4)
ABLATION_F = (2, 4, 8, 32)


class MetricsError(ValueError):
    pass


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB between two [-1, 1] images, capped at 99 dB."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise MetricsError(f"shape mismatch: {a.shape} vs {b.shape}")
    diff = (a.astype(np.float64) - b.astype(np.float64)) / 2.0  # to [0, 1] units
    mse = float(np.mean(diff * diff))
    if mse < 1e-10:
        return PSNR_CAP
    return 10.0 * math.log10(1.0 / mse)


def masked_psnr(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> float | None:
    """PSNR over masked pixels; None when the mask is empty (missing value)."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return None
    diff = (np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) / 2.0
    mse = float(np.mean((diff * diff)[mask]))
    if mse < 1e-10:
        return PSNR_CAP
    return 10.0 * math.log10(1.0 / mse)


def warp_consistency(
    gen_i: np.ndarray,
    gen_j: np.ndarray,
    gt_depth_i: np.ndarray,
    pose_i: Pose,
    pose_j: Pose,
    intrinsics: Intrinsics,
    gt_depth_j: np.ndarray | None = None,
) -> float | None:
    """Masked PSNR of view i warped into view j against the view-j image.

    Ground-truth depth gives exact correspondences; gt_depth_j additionally
    enables the symmetric z-test that rejects occlusions and edge bleed.
    Returns None (a missing value, never zero) when no pixel survives.
    """
    warped, mask = warp(gen_i, gt_depth_i, pose_i, pose_j, intrinsics, depth_j=gt_depth_j)
    return masked_psnr(warped, gen_j, mask)


def drift_curve(per_frame_psnr) -> float:
    """Least-squares slope of PSNR against frame index, dB per frame."""
    y = np.asarray(per_frame_psnr, dtype=np.float64)
    if y.ndim != 1 or y.shape[0] < 4:
        raise MetricsError("drift_curve needs at least 4 frames")
    x = np.arange(y.shape[0], dtype=np.float64)
    xc = x - x.mean()
    yc = y - y.mean()
    return float((xc * yc).sum() / (xc * xc).sum())


@dataclass
class EvalReport:
    """Evaluation of one rollout run against ground truth."""

    per_frame_psnr: list
    warp_psnr: list = field(default_factory=list)  # may contain None entries
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.per_frame_psnr:
            raise MetricsError("per_frame_psnr must be nonempty")

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.per_frame_psnr))

    @property
    def warp_mean(self) -> float | None:
        vals = [v for v in self.warp_psnr if v is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def drift_slope(self) -> float | None:
        if len(self.per_frame_psnr) < 4:
            return None
        slope = drift_curve(self.per_frame_psnr)
        if not math.isfinite(slope):
            raise MetricsError("drift slope is not finite")
        return slope

    def to_json(self) -> dict:
        return {
            "per_frame_psnr": [float(v) for v in self.per_frame_psnr],
            "warp_psnr": [None if v is None else float(v) for v in self.warp_psnr],
            "mean_psnr": self.mean_psnr,
            "warp_mean": self.warp_mean,
            "drift_slope": self.drift_slope,
            "config": self.config,
        }


def reference_ablation_psnr() -> dict:
    """Bundled published comparison values keyed [mode][N][F]."""
    text = resources.files("arnvs").joinpath("data/reference_ablation.json").read_text()
    return json.loads(text)["psnr"]


@dataclass
class AblationTable:
    """mean-PSNR grid over (mode, N) rows and F columns, plus reference values."""

    cells: dict  # (mode, n, f) -> float
    reference: dict  # same keying, from the bundled constants
    n_axis: tuple = ABLATION_N
    f_axis: tuple = ABLATION_F

    @staticmethod
    def from_reports(runs: dict) -> "AblationTable":
        cells = {}
        for (mode, n, f), report in runs.items():
            if mode not in ABLATION_MODES:
                raise MetricsError(f"unknown ablation mode {mode!r}")
            cells[(mode, int(n), int(f))] = report.mean_psnr
        ref_raw = reference_ablation_psnr()
        reference = {}
        for mode, by_n in ref_raw.items():
            for n, by_f in by_n.items():
                for f, val in by_f.items():
                    reference[(mode, int(n), int(f))] = val
        # Canonical grid extended by whatever was actually measured.
        n_axis = tuple(sorted(set(ABLATION_N) | {n for _, n, _ in cells}))
        f_axis = tuple(sorted(set(ABLATION_F) | {f for _, _, f in cells}))
        return AblationTable(cells=cells, reference=reference, n_axis=n_axis, f_axis=f_axis)

    def to_text(self) -> str:
        headers = ["mode", "N"] + [f"F={f}" for f in self.f_axis] + [f"ref F={f}" for f in self.f_axis]
        rows = []
        for mode in ABLATION_MODES:
            for n in self.n_axis:
                ours = [self.cells.get((mode, n, f)) for f in self.f_axis]
                refs = [self.reference.get((mode, n, f)) for f in self.f_axis]
                if all(v is None for v in ours):
                    continue
                fmt = lambda v: "--" if v is None else f"{v:.2f}"
                rows.append([mode, str(n)] + [fmt(v) for v in ours + refs])
        widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(headers)]
        lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
        for r in rows:
            lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)))
        return "\n".join(lines)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["mode", "n_inputs", "total_frames", "mean_psnr", "reference_psnr"])
        for mode in ABLATION_MODES:
            for n in self.n_axis:
                for f in self.f_axis:
                    ours = self.cells.get((mode, n, f))
                    ref = self.reference.get((mode, n, f))
                    w.writerow(
                        [
                            mode,
                            n,
                            f,
                            "--" if ours is None else repr(float(ours)),
                            "--" if ref is None else repr(float(ref)),
                        ]
                    )
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @staticmethod
    def parse_csv(text: str) -> dict:
        """Parse-back of to_csv output: (mode, n, f) -> float for filled cells."""
        out = {}
        rows = list(csv.reader(io.StringIO(text)))
        for mode, n, f, val, _ref in rows[1:]:
            if val != "--":
                out[(mode, int(n), int(f))] = float(val)
        return out


METRICS_CSV_FIELDS = ["run_id", "model", "mode", "N", "F", "frame_idx", "psnr", "warp_psnr"]


def write_metrics_csv(path, rows: list[dict]) -> None:
    """Per-frame metrics rows in the documented schema."""
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRICS_CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            out = dict(row)
            if out.get("warp_psnr") is None:
                out["warp_psnr"] = "--"
            w.writerow(out)
