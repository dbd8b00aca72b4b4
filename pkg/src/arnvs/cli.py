"""Operator entry point.

Subcommands: render-dataset, train, rollout, eval, cape-analyze, ablate,
serve. Exit codes: 0 success, 2 config error, 3 I/O error, 4 numeric failure.
Every command takes --config (JSON or TOML) plus overriding flags and writes
the merged config into its run directory.
"""

from __future__ import annotations

import csv
import functools
import json
import math
import sys
from pathlib import Path

import click
import numpy as np

from . import metrics as metrics_mod
from . import worldgen
from .cape import sweep_analysis
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .denoiser import DenoiserError
from .diffusion import DiffusionError, make_schedule
from .engine import (
    EngineError,
    autoregressive_with_parallel_model,
    generate_parallel_baseline,
    rollout as run_rollout,
)
from .geometry import GeometryError, Pose
from .metrics import AblationTable, EvalReport, drift_curve, psnr, warp_consistency, write_metrics_csv
from .training import SceneFrames, TrainingError, init_train_state, train
from .worldgen import WorldgenError, load_dataset_manifest, load_scene, make_dataset

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def _exit_codes(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ConfigError, GeometryError, DenoiserError, DiffusionError) as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(EXIT_CONFIG)
        except (OSError, WorldgenError, CheckpointError) as exc:
            click.echo(f"i/o error: {exc}", err=True)
            sys.exit(EXIT_IO)
        except (TrainingError, EngineError, metrics_mod.MetricsError, FloatingPointError) as exc:
            click.echo(f"numeric failure: {exc}", err=True)
            sys.exit(EXIT_NUMERIC)

    return wrapper


def _parse_overrides(pairs) -> dict:
    out = {}
    for item in pairs:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        out[key.strip()] = json.loads(raw)
    return out


@click.group()
def main():
    """Autoregressive novel view synthesis toolkit."""


@main.command("render-dataset")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--scenes", type=int, default=None, help="override dataset.scenes")
@click.option("--seed", type=int, default=None, help="override global seed")
@click.option("--set", "sets", multiple=True, help="dotted config override key=json")
@_exit_codes
def cmd_render_dataset(config_path, out_dir, scenes, seed, sets):
    """Generate a procedural scene dataset."""
    overrides = _parse_overrides(sets)
    if scenes is not None:
        overrides["dataset.scenes"] = scenes
    if seed is not None:
        overrides["seed"] = seed
    cfg = load_config(config_path, overrides)
    out = Path(out_dir)
    manifest = make_dataset(
        cfg.dataset.scenes,
        out,
        seed=cfg.seed,
        image_size=cfg.dataset.image_size,
        poses_per_scene=cfg.dataset.poses_per_scene,
    )
    cfg.write(out / "config.json")
    click.echo(json.dumps(manifest, indent=1))


def _load_training_scenes(dataset_dir, cfg: RunConfig, for_eval: bool = False):
    manifest = load_dataset_manifest(dataset_dir)
    names = manifest["scenes"]
    n_eval = min(cfg.dataset.eval_scenes, max(0, len(names) - 1))
    split = names[len(names) - n_eval :] if for_eval else names[: len(names) - n_eval]
    if not split:
        raise ConfigError(f"dataset split empty (eval={for_eval}, scenes={len(names)})")
    out = []
    for name in split:
        bundle = load_scene(dataset_dir, name)
        out.append(
            (
                name,
                bundle,
                SceneFrames(
                    images=bundle.images.astype(np.float32),
                    poses=bundle.normalized_poses(),
                    scale=bundle.scale,
                ),
            )
        )
    return out


@main.command("train")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--dataset", "dataset_dir", type=click.Path(), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--steps", type=int, default=None, help="total steps (override train.steps)")
@click.option("--non-causal", is_flag=True, help="train the joint-denoising baseline")
@click.option("--resume", "resume_path", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--set", "sets", multiple=True)
@_exit_codes
def cmd_train(config_path, dataset_dir, out_dir, steps, non_causal, resume_path, seed, sets):
    """Train the denoiser; writes checkpoints and a per-step loss CSV."""
    overrides = _parse_overrides(sets)
    if steps is not None:
        overrides["train.steps"] = steps
    if seed is not None:
        overrides["seed"] = seed
    if non_causal:
        overrides["train.causal"] = False
    cfg = load_config(config_path, overrides)

    out = Path(out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    cfg.write(out / "config.json")

    dconfig = cfg.denoiser_config()
    schedule = make_schedule(cfg.schedule.kind, cfg.schedule.timesteps)
    opt = cfg.optimizer_config()
    scenes = [sf for _, _, sf in _load_training_scenes(dataset_dir, cfg)]

    if resume_path:
        state, dconfig, schedule, opt = load_checkpoint(resume_path)
        click.echo(f"resumed from {resume_path} at step {state.step}")
    else:
        state = init_train_state(dconfig, cfg.seed)

    loss_csv = out / "loss.csv"
    mode = "a" if resume_path and loss_csv.exists() else "w"
    remaining = cfg.train.steps - state.step
    if remaining < 0:
        raise ConfigError(f"checkpoint already at step {state.step} > train.steps {cfg.train.steps}")

    with open(loss_csv, mode, newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if mode == "w":
            writer.writerow(["step", "loss"])

        def log_fn(step, loss):
            writer.writerow([step, repr(float(loss))])
            if step % max(1, cfg.train.checkpoint_every) == 0 or step == cfg.train.steps:
                save_checkpoint(out / "checkpoints" / f"step_{step:06d}.arnvs", state, dconfig, schedule, opt)
            if step % 100 == 0 or step == cfg.train.steps:
                click.echo(f"step {step}: loss {loss:.4f}")

        train(
            state,
            scenes,
            dconfig,
            schedule,
            opt,
            steps=remaining,
            batch_size=cfg.train.batch_size,
            frames_per_sequence=cfg.train.frames_per_sequence,
            seed=cfg.seed,
            causal=cfg.train.causal,
            log_fn=log_fn,
        )
    save_checkpoint(out / "checkpoints" / "latest.arnvs", state, dconfig, schedule, opt)
    click.echo(f"finished at step {state.step}; checkpoints in {out/'checkpoints'}")


def _spread_indices(total: int, n: int, rng: np.random.Generator):
    """n distinct pool indices spread over the pool, then the rest shuffled."""
    order = rng.permutation(total)
    return [int(i) for i in order[:n]], [int(i) for i in order[n:]]


@main.command("rollout")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--checkpoint", "ckpt_path", type=click.Path(), required=True)
@click.option("--dataset", "dataset_dir", type=click.Path(), required=True)
@click.option("--scene", "scene_name", default=None, help="scene name (default: first eval scene)")
@click.option("--inputs", "n_inputs", type=int, default=1)
@click.option("--targets", "n_targets", type=int, default=7)
@click.option("--window-k", "window_k", default=None,
              help="int or 'all'; a comma list such as '1,4,all' sweeps and compares")
@click.option("--trajectory", "trajectory", type=click.Choice(worldgen.TRAJECTORY_KINDS), default=None)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--seed", type=int, default=None)
@click.option("--use-ema/--no-ema", default=True)
@click.option("--set", "sets", multiple=True)
@_exit_codes
def cmd_rollout(config_path, ckpt_path, dataset_dir, scene_name, n_inputs, n_targets, window_k, trajectory, out_dir, seed, use_ema, sets):
    """Autoregressive rollout of a trained model over dataset views."""
    overrides = _parse_overrides(sets)
    if seed is not None:
        overrides["seed"] = seed
    sweep = None
    if window_k is not None:
        values = [v.strip() for v in str(window_k).split(",") if v.strip()]
        parsed = [None if v == "all" else int(v) for v in values]
        if len(parsed) == 1:
            overrides["window.window_k"] = parsed[0]
        else:
            sweep = parsed
    cfg = load_config(config_path, overrides)

    state, dconfig, schedule, _ = load_checkpoint(ckpt_path)
    params = state.ema if use_ema else state.params
    manifest = load_dataset_manifest(dataset_dir)
    if scene_name is None:
        scene_name = manifest["scenes"][-1]
    bundle = load_scene(dataset_dir, scene_name)
    norm_poses = bundle.normalized_poses()
    rng = np.random.default_rng([cfg.seed, 0x2011])

    in_idx, rest = _spread_indices(len(norm_poses), n_inputs, rng)
    inputs = [(bundle.images[i].astype(dconfig.np_dtype), norm_poses[i]) for i in in_idx]
    if trajectory is None:
        tgt_idx = rest[:n_targets]
        if len(tgt_idx) < n_targets:
            raise ConfigError(f"scene pool too small for {n_targets} targets")
        target_poses = [norm_poses[i] for i in tgt_idx]
    else:
        tgt_idx = None
        spec = worldgen.TrajectorySpec(kind=trajectory, count=n_targets, radius=1.4)
        free = worldgen.trajectory_poses(spec, bundle.spec, rng)
        target_poses = [Pose(p.rotation, p.translation / bundle.scale) for p in free]

    run = Path(out_dir)
    run.mkdir(parents=True, exist_ok=True)
    cfg.write(run / "config.json")
    extra = {
        "dataset": str(dataset_dir),
        "scene": scene_name,
        "checkpoint": str(ckpt_path),
        "input_indices": in_idx,
        "target_indices": tgt_idx,
        "mode": "causal-ar",
        "n_inputs": n_inputs,
    }

    def one_rollout(k, into: Path):
        result = run_rollout(params, inputs, target_poses, dconfig, schedule, cfg.rollout_config())
        into.mkdir(parents=True, exist_ok=True)
        result.save(into)
        data = json.loads((into / "manifest.json").read_text())
        data.update(extra)
        (into / "manifest.json").write_text(json.dumps(data, indent=1))
        return result

    if sweep is None:
        result = one_rollout(cfg.window.window_k, run)
        click.echo(f"rollout written to {run} ({len(result.images)} frames)")
        return

    # Window sweep: per-k subdirectories plus a FLOP / PSNR comparison table.
    rows = []
    for k in sweep:
        cfg.window.window_k = k
        label = "all" if k is None else str(k)
        result = one_rollout(k, run / f"window_{label}")
        flops = sum(d.attention_flops for d in result.diagnostics)
        mean_psnr = None
        if tgt_idx is not None:
            mean_psnr = float(
                np.mean([psnr(img, bundle.images[t]) for img, t in zip(result.images, tgt_idx)])
            )
        rows.append((label, flops, mean_psnr))
    with open(run / "window_sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["window_k", "attention_flops", "mean_psnr"])
        for label, flops, mean_psnr in rows:
            w.writerow([label, flops, "--" if mean_psnr is None else repr(mean_psnr)])
    for label, flops, mean_psnr in rows:
        shown = "--" if mean_psnr is None else f"{mean_psnr:.2f} dB"
        click.echo(f"window_k={label:>4}: attention flops {flops:>14,}  psnr {shown}")


def _eval_run_dir(run_dir, dataset_dir=None) -> EvalReport:
    run = Path(run_dir)
    data = json.loads((run / "manifest.json").read_text())
    dataset = dataset_dir or data.get("dataset")
    if dataset is None:
        raise ConfigError("run manifest lacks a dataset path; pass --dataset")
    bundle = load_scene(dataset, data["scene"])
    gen = [worldgen.png_to_image(run / "images" / f) for f in data["files"]]
    if not gen:
        raise ConfigError("run contains no generated frames")
    poses_model = [Pose.from_json(p) for p in data["poses"]]
    poses_world = [Pose(p.rotation, p.translation * bundle.scale) for p in poses_model]

    tgt_idx = data.get("target_indices")
    frame_psnr, missing = [], 0
    for i, img in enumerate(gen):
        if tgt_idx is not None and i < len(tgt_idx):
            gt = bundle.images[tgt_idx[i]]
            frame_psnr.append(psnr(img, gt))
        else:
            missing += 1
    warps = []
    for i in range(len(gen) - 1):
        d_i = worldgen.depth(bundle.spec, poses_world[i], bundle.intrinsics)
        d_j = worldgen.depth(bundle.spec, poses_world[i + 1], bundle.intrinsics)
        warps.append(
            warp_consistency(
                gen[i], gen[i + 1], d_i, poses_world[i], poses_world[i + 1], bundle.intrinsics, gt_depth_j=d_j
            )
        )
    if not frame_psnr:
        raise ConfigError("no ground-truth targets available to score (trajectory run)")
    report = EvalReport(per_frame_psnr=frame_psnr, warp_psnr=warps, config={"missing_frames": missing, **{k: data[k] for k in ("scene", "mode", "n_inputs") if k in data}})
    return report


@main.command("eval")
@click.option("--run", "run_dir", type=click.Path(), required=True)
@click.option("--dataset", "dataset_dir", type=click.Path(), default=None)
@_exit_codes
def cmd_eval(run_dir, dataset_dir):
    """Score a rollout run directory against dataset ground truth."""
    report = _eval_run_dir(run_dir, dataset_dir)
    run = Path(run_dir)
    (run / "reports").mkdir(exist_ok=True)
    (run / "reports" / "eval.json").write_text(json.dumps(report.to_json(), indent=1))
    data = json.loads((run / "manifest.json").read_text())
    rows = [
        dict(
            run_id=run.name,
            model=data.get("checkpoint", "?"),
            mode=data.get("mode", "causal-ar"),
            N=data.get("n_inputs", "?"),
            F=len(report.per_frame_psnr) + int(data.get("n_inputs") or 0),
            frame_idx=i,
            psnr=report.per_frame_psnr[i],
            warp_psnr=report.warp_psnr[i] if i < len(report.warp_psnr) else None,
        )
        for i in range(len(report.per_frame_psnr))
    ]
    write_metrics_csv(run / "metrics.csv", rows)
    if report.config.get("missing_frames"):
        click.echo(f"warning: {report.config['missing_frames']} frames lacked ground truth", err=True)
    click.echo(json.dumps(report.to_json()["config"] | {"mean_psnr": report.mean_psnr, "warp_mean": report.warp_mean, "drift_slope": report.drift_slope}, indent=1))


@main.command("cape-analyze")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--samples", type=int, default=145)
@click.option("--seed", type=int, default=None)
@click.option("--set", "sets", multiple=True)
@_exit_codes
def cmd_cape_analyze(config_path, out_dir, samples, seed, sets):
    """Score sweeps over relative rotation/translation, with and without encoding."""
    overrides = _parse_overrides(sets)
    if seed is not None:
        overrides["seed"] = seed
    cfg = load_config(config_path, overrides)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "config.json")
    rng = np.random.default_rng([cfg.seed, 0xCA9E])
    d = cfg.model.head_dim
    q, k = rng.normal(size=d), rng.normal(size=d)

    summary = {}
    for enabled in (True, False):
        tag = "cape" if enabled else "nocape"
        rot = sweep_analysis(q, k, "rotation", axis=(0, 1, 0), n_samples=samples, enabled=enabled)
        tra = sweep_analysis(q, k, "translation", axis=(1, 0, 0), n_samples=samples, enabled=enabled)
        rot.to_csv(out / f"rotation_{tag}.csv")
        tra.to_csv(out / f"translation_{tag}.csv")
        scale = 1.0 + float(np.abs(rot.score).max())
        half = np.searchsorted(rot.parameter, rot.parameter[0] + 360.0)
        periodic_err = (
            float(np.abs(rot.score[: len(rot.score) - half] - rot.score[half:]).max())
            if half < len(rot.score)
            else 0.0
        )
        coeffs = np.polyfit(tra.parameter, tra.score, 1)
        resid = float(np.abs(tra.score - np.polyval(coeffs, tra.parameter)).max())
        summary[tag] = {
            "rotation_periodicity_error": periodic_err,
            "rotation_periodic": bool(periodic_err < 1e-6 * scale),
            "translation_linear_residual": resid,
            "translation_affine": bool(resid < 1e-9 * (1.0 + float(np.abs(tra.score).max()))),
            "rotation_score_range": float(np.ptp(rot.score)),
            "translation_score_range": float(np.ptp(tra.score)),
        }
    summary["cape"]["varies_with_pose"] = bool(
        summary["cape"]["rotation_score_range"] > 1e-6 and summary["cape"]["translation_score_range"] > 1e-6
    )
    summary["nocape"]["constant"] = bool(
        summary["nocape"]["rotation_score_range"] == 0.0 and summary["nocape"]["translation_score_range"] == 0.0
    )
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    click.echo(json.dumps(summary, indent=1))
    if not (summary["cape"]["rotation_periodic"] and summary["cape"]["translation_affine"] and summary["nocape"]["constant"]):
        sys.exit(EXIT_NUMERIC)


@main.command("ablate")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--causal-ckpt", "causal_ckpt", type=click.Path(), required=True)
@click.option("--noncausal-ckpt", "noncausal_ckpt", type=click.Path(), default=None)
@click.option("--dataset", "dataset_dir", type=click.Path(), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--n-values", "n_values", default="1,2,4")
@click.option("--f-values", "f_values", default="2,4,8,32")
@click.option("--eval-scenes", "eval_scenes", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--set", "sets", multiple=True)
@_exit_codes
def cmd_ablate(config_path, causal_ckpt, noncausal_ckpt, dataset_dir, out_dir, n_values, f_values, eval_scenes, seed, sets):
    """Causal-AR vs non-causal baselines over the N x F grid."""
    overrides = _parse_overrides(sets)
    if seed is not None:
        overrides["seed"] = seed
    if eval_scenes is not None:
        overrides["dataset.eval_scenes"] = eval_scenes
    cfg = load_config(config_path, overrides)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "config.json")

    ns = [int(x) for x in str(n_values).split(",") if x]
    fs = [int(x) for x in str(f_values).split(",") if x]
    runs = ablation_grid(cfg, causal_ckpt, noncausal_ckpt, dataset_dir, ns, fs)
    table = AblationTable.from_reports(runs)
    table.to_csv(out / "ablation.csv")
    text = table.to_text()
    (out / "ablation.txt").write_text(text + "\n")
    click.echo(text)


def ablation_grid(cfg: RunConfig, causal_ckpt, noncausal_ckpt, dataset_dir, ns, fs) -> dict:
    """Mean-PSNR EvalReports keyed (mode, N, F); shared eval split."""
    models = {}
    state, dconfig, schedule, _ = load_checkpoint(causal_ckpt)
    models["causal"] = (state.ema, dconfig, schedule)
    if noncausal_ckpt:
        state_nc, dconfig_nc, schedule_nc, _ = load_checkpoint(noncausal_ckpt)
        models["noncausal"] = (state_nc.ema, dconfig_nc, schedule_nc)

    eval_split = _load_training_scenes(dataset_dir, cfg, for_eval=True)
    runs = {}
    for mode in ("causal-ar", "noncausal-parallel", "noncausal-ar"):
        model_key = "causal" if mode == "causal-ar" else "noncausal"
        if model_key not in models:
            continue
        params, dconfig, schedule = models[model_key]
        for n in ns:
            for f in fs:
                if f <= n:
                    continue
                per_frame = []
                for si, (name, bundle, frames) in enumerate(eval_split):
                    rng = np.random.default_rng([cfg.seed, 0xAB1A7E, n, f, si])
                    in_idx, rest = _spread_indices(len(frames.poses), n, rng)
                    tgt_idx = rest[: f - n]
                    if len(tgt_idx) < f - n:
                        continue
                    inputs = [(frames.images[i].astype(dconfig.np_dtype), frames.poses[i]) for i in in_idx]
                    targets = [frames.poses[i] for i in tgt_idx]
                    rcfg = cfg.rollout_config(seed=int(rng.integers(2**31)))
                    if mode == "causal-ar":
                        res = run_rollout(params, inputs, targets, dconfig, schedule, rcfg)
                    elif mode == "noncausal-parallel":
                        res = generate_parallel_baseline(params, inputs, targets, dconfig, schedule, rcfg)
                    else:
                        res = autoregressive_with_parallel_model(params, inputs, targets, dconfig, schedule, rcfg)
                    per_frame.extend(
                        psnr(img, bundle.images[ti]) for img, ti in zip(res.images, tgt_idx)
                    )
                if per_frame:
                    runs[(mode, n, f)] = EvalReport(per_frame_psnr=per_frame, config={"mode": mode, "N": n, "F": f})
    return runs


@main.command("serve")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--checkpoint", "ckpt_path", type=click.Path(), required=True)
@click.option("--host", default=None)
@click.option("--port", type=int, default=None)
@click.option("--set", "sets", multiple=True)
@_exit_codes
def cmd_serve(config_path, ckpt_path, host, port, sets):
    """Serve the streaming view-synthesis API (HTTP + WebSocket)."""
    import uvicorn

    overrides = _parse_overrides(sets)
    if host is not None:
        overrides["service.host"] = host
    if port is not None:
        overrides["service.port"] = port
    cfg = load_config(config_path, overrides)
    from .service import create_app

    app = create_app(ckpt_path, cfg)
    uvicorn.run(app, host=cfg.service.host, port=cfg.service.port, log_level="info")


if __name__ == "__main__":
    main()
