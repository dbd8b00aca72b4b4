import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from arnvs.cli import main

TINY = {
    "seed": 1,
    "dataset": {"scenes": 3, "poses_per_scene": 8, "image_size": 8, "eval_scenes": 1},
    "model": {
        "image_size": 8,
        "patch_size": 2,
        "width": 16,
        "depth": 2,
        "heads": 2,
        "head_dim": 8,
        "framewise_attention_at": [1],
        "noise_embed_dim": 8,
        "dtype": "float32",
    },
    "schedule": {"kind": "cosine", "timesteps": 8},
    "sampler": {"num_steps": 4},
    "augmentation": {"context_noise_level": 1},
    "train": {"steps": 3, "batch_size": 2, "frames_per_sequence": 3, "checkpoint_every": 2},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(TINY))
    runner = CliRunner()
    ds = root / "dataset"
    res = runner.invoke(main, ["render-dataset", "--config", str(cfg_path), "--out", str(ds)])
    assert res.exit_code == 0, res.output
    train_dir = root / "train"
    res = runner.invoke(
        main, ["train", "--config", str(cfg_path), "--dataset", str(ds), "--out", str(train_dir)]
    )
    assert res.exit_code == 0, res.output
    return dict(root=root, cfg=cfg_path, dataset=ds, train=train_dir, runner=runner)


def test_render_dataset_layout(workspace):
    ds = workspace["dataset"]
    assert (ds / "manifest.json").exists()
    assert (ds / "config.json").exists()
    scenes = sorted(p.name for p in ds.iterdir() if p.is_dir())
    assert scenes == ["scene_0000", "scene_0001", "scene_0002"]
    assert len(list((ds / "scene_0000").glob("frame_*.png"))) == 8


def test_render_dataset_scene_override_and_bad_config(tmp_path, workspace):
    runner = workspace["runner"]
    out = tmp_path / "one"
    res = runner.invoke(
        main,
        ["render-dataset", "--config", str(workspace["cfg"]), "--out", str(out), "--scenes", "1",
         "--set", 'dataset.poses_per_scene=4'],
    )
    assert res.exit_code == 0, res.output
    assert len(json.loads((out / "manifest.json").read_text())["scenes"]) == 1

    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nope": 1}))
    res = runner.invoke(main, ["render-dataset", "--config", str(bad), "--out", str(tmp_path / "x")])
    assert res.exit_code == 2


def test_train_outputs(workspace):
    train_dir = workspace["train"]
    assert (train_dir / "config.json").exists()
    assert (train_dir / "checkpoints" / "latest.arnvs").exists()
    rows = (train_dir / "loss.csv").read_text().strip().splitlines()
    assert rows[0] == "step,loss"
    assert len(rows) == 1 + TINY["train"]["steps"]  # one row per step


def test_train_zero_steps_checkpoints_init(tmp_path, workspace):
    runner = workspace["runner"]
    out = tmp_path / "zero"
    res = runner.invoke(
        main,
        ["train", "--config", str(workspace["cfg"]), "--dataset", str(workspace["dataset"]),
         "--out", str(out), "--steps", "0"],
    )
    assert res.exit_code == 0, res.output
    assert (out / "checkpoints" / "latest.arnvs").exists()
    assert (out / "loss.csv").read_text().strip() == "step,loss"


def test_train_resume_matches_uninterrupted(tmp_path, workspace):
    from arnvs.checkpoint import load_checkpoint

    runner = workspace["runner"]
    full = tmp_path / "full"
    res = runner.invoke(
        main,
        ["train", "--config", str(workspace["cfg"]), "--dataset", str(workspace["dataset"]),
         "--out", str(full), "--steps", "4"],
    )
    assert res.exit_code == 0, res.output

    part = tmp_path / "part"
    res = runner.invoke(
        main,
        ["train", "--config", str(workspace["cfg"]), "--dataset", str(workspace["dataset"]),
         "--out", str(part), "--steps", "2"],
    )
    assert res.exit_code == 0, res.output
    res = runner.invoke(
        main,
        ["train", "--config", str(workspace["cfg"]), "--dataset", str(workspace["dataset"]),
         "--out", str(part), "--steps", "4", "--resume", str(part / "checkpoints" / "latest.arnvs")],
    )
    assert res.exit_code == 0, res.output

    a, _, _, _ = load_checkpoint(full / "checkpoints" / "latest.arnvs")
    b, _, _, _ = load_checkpoint(part / "checkpoints" / "latest.arnvs")
    assert a.step == b.step == 4
    for k in a.params:
        assert np.array_equal(a.params[k], b.params[k]), k
    assert (full / "loss.csv").read_text() == (part / "loss.csv").read_text()


def test_rollout_and_eval(tmp_path, workspace):
    runner = workspace["runner"]
    run = tmp_path / "run"
    res = runner.invoke(
        main,
        ["rollout", "--config", str(workspace["cfg"]), "--checkpoint",
         str(workspace["train"] / "checkpoints" / "latest.arnvs"), "--dataset", str(workspace["dataset"]),
         "--inputs", "1", "--targets", "3", "--out", str(run)],
    )
    assert res.exit_code == 0, res.output
    manifest = json.loads((run / "manifest.json").read_text())
    assert len(manifest["files"]) == 3
    assert manifest["scene"] == "scene_0002"  # defaults to the eval split

    res = runner.invoke(main, ["eval", "--run", str(run)])
    assert res.exit_code == 0, res.output
    report = json.loads((run / "reports" / "eval.json").read_text())
    assert len(report["per_frame_psnr"]) == 3
    lines = (run / "metrics.csv").read_text().strip().splitlines()
    assert lines[0] == "run_id,model,mode,N,F,frame_idx,psnr,warp_psnr"
    assert len(lines) == 4


def test_rollout_deterministic_across_runs(tmp_path, workspace):
    runner = workspace["runner"]
    outs = []
    for name in ("r1", "r2"):
        run = tmp_path / name
        res = runner.invoke(
            main,
            ["rollout", "--config", str(workspace["cfg"]), "--checkpoint",
             str(workspace["train"] / "checkpoints" / "latest.arnvs"), "--dataset",
             str(workspace["dataset"]), "--inputs", "1", "--targets", "2", "--out", str(run)],
        )
        assert res.exit_code == 0, res.output
        outs.append([(run / "images" / f).read_bytes() for f in ["frame_0000.png", "frame_0001.png"]])
    assert outs[0] == outs[1]


def test_eval_of_gt_copies_hits_cap(tmp_path, workspace):
    from arnvs.worldgen import load_scene

    runner = workspace["runner"]
    ds = workspace["dataset"]
    bundle = load_scene(ds, "scene_0002")
    run = tmp_path / "gtrun"
    (run / "images").mkdir(parents=True)
    tgt = [2, 3, 4, 5]
    files = []
    for i, t in enumerate(tgt):
        name = f"frame_{i:04d}.png"
        (run / "images" / name).write_bytes((Path(ds) / "scene_0002" / f"frame_{t:04d}.png").read_bytes())
        files.append(name)
    norm = bundle.normalized_poses()
    manifest = {
        "config": {},
        "poses": [norm[t].to_json() for t in tgt],
        "files": files,
        "diagnostics": [],
        "dataset": str(ds),
        "scene": "scene_0002",
        "checkpoint": "gt-copy",
        "target_indices": tgt,
        "n_inputs": 0,
        "mode": "causal-ar",
    }
    (run / "manifest.json").write_text(json.dumps(manifest))
    res = runner.invoke(main, ["eval", "--run", str(run)])
    assert res.exit_code == 0, res.output
    report = json.loads((run / "reports" / "eval.json").read_text())
    assert all(p == 99.0 for p in report["per_frame_psnr"])
    assert report["drift_slope"] == 0.0


def test_cape_analyze(tmp_path, workspace):
    runner = workspace["runner"]
    out = tmp_path / "cape"
    res = runner.invoke(main, ["cape-analyze", "--config", str(workspace["cfg"]), "--out", str(out)])
    assert res.exit_code == 0, res.output
    for name in ("rotation_cape", "translation_cape", "rotation_nocape", "translation_nocape"):
        assert (out / f"{name}.csv").exists()
    summary = json.loads((out / "summary.json").read_text())
    assert summary["cape"]["rotation_periodic"]
    assert summary["cape"]["translation_affine"]
    assert summary["cape"]["varies_with_pose"]
    assert summary["nocape"]["constant"]


def test_ablate_tiny_grid(tmp_path, workspace):
    runner = workspace["runner"]
    ck = str(workspace["train"] / "checkpoints" / "latest.arnvs")
    out = tmp_path / "ablate"
    res = runner.invoke(
        main,
        ["ablate", "--config", str(workspace["cfg"]), "--causal-ckpt", ck, "--noncausal-ckpt", ck,
         "--dataset", str(workspace["dataset"]), "--out", str(out),
         "--n-values", "1", "--f-values", "3"],
    )
    assert res.exit_code == 0, res.output
    text = (out / "ablation.txt").read_text()
    assert "causal-ar" in text and "noncausal-parallel" in text
    csv_text = (out / "ablation.csv").read_text()
    from arnvs.metrics import AblationTable

    parsed = AblationTable.parse_csv(csv_text)
    assert ("causal-ar", 1, 3) in parsed


def test_missing_checkpoint_is_io_error(tmp_path, workspace):
    runner = workspace["runner"]
    res = runner.invoke(
        main,
        ["rollout", "--config", str(workspace["cfg"]), "--checkpoint", str(tmp_path / "nope.arnvs"),
         "--dataset", str(workspace["dataset"]), "--out", str(tmp_path / "r")],
    )
    assert res.exit_code == 3
