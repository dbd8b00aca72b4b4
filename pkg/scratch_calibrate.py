"""Scratch calibration for the toy training protocol (not part of the package)."""
import json
import time
from pathlib import Path

import numpy as np

from arnvs.checkpoint import save_checkpoint
from arnvs.config import load_config
from arnvs.denoiser import DenoiserConfig
from arnvs.diffusion import make_schedule
from arnvs.engine import generate_parallel_baseline, rollout
from arnvs.metrics import psnr
from arnvs.training import OptimizerConfig, SceneFrames, init_train_state, train
from arnvs.worldgen import load_dataset_manifest, load_scene, make_dataset

ROOT = Path("/root/calib")
ROOT.mkdir(exist_ok=True)

t0 = time.time()
ds = ROOT / "dataset"
if not (ds / "manifest.json").exists():
    make_dataset(52, ds, seed=0, image_size=16, poses_per_scene=64)
print(f"dataset: {time.time()-t0:.1f}s", flush=True)

cfg = load_config(None, {
    "seed": 0,
    "dataset.eval_scenes": 4,
    "model.width": 128, "model.depth": 5, "model.framewise_attention_at": [2, 3, 4],
    "train.steps": 2500, "train.batch_size": 2, "train.lr": 2e-4,
})
dconfig = cfg.denoiser_config()
schedule = make_schedule("cosine", 64)
opt = cfg.optimizer_config()

manifest = load_dataset_manifest(ds)
names = manifest["scenes"]
bundles = {n: load_scene(ds, n) for n in names}
train_scenes = [
    SceneFrames(images=bundles[n].images.astype(np.float32), poses=bundles[n].normalized_poses(), scale=bundles[n].scale)
    for n in names[:-4]
]
eval_scenes = names[-4:]

for tag, causal in (("causal", True), ("noncausal", False)):
    state = init_train_state(dconfig, cfg.seed)
    t0 = time.time()
    losses = []
    train(state, train_scenes, dconfig, schedule, opt, steps=cfg.train.steps,
          batch_size=cfg.train.batch_size, frames_per_sequence=8, seed=cfg.seed,
          causal=causal, log_fn=lambda s, l: losses.append((s, l)))
    print(f"{tag}: {cfg.train.steps} steps in {time.time()-t0:.0f}s; "
          f"loss {losses[0][1]:.3f} -> {np.mean([l for _, l in losses[-50:]]):.4f}", flush=True)
    save_checkpoint(ROOT / f"{tag}.arnvs", state, dconfig, schedule, opt)

    # quick N-ordering eval on held-out scenes (causal AR)
    results = {}
    for n in (1, 2, 4):
        vals = []
        for si, name in enumerate(eval_scenes):
            b = bundles[name]
            poses = b.normalized_poses()
            rng = np.random.default_rng([7, n, si])
            order = rng.permutation(len(poses))
            in_idx, tgt_idx = order[:n].tolist(), order[n : n + 8 - n].tolist()
            inputs = [(b.images[i].astype(np.float32), poses[i]) for i in in_idx]
            targets = [poses[i] for i in tgt_idx]
            rcfg = cfg.rollout_config(seed=int(rng.integers(2**31)))
            if causal:
                res = rollout(state.ema, inputs, targets, dconfig, schedule, rcfg)
            else:
                res = generate_parallel_baseline(state.ema, inputs, targets, dconfig, schedule, rcfg)
            vals.extend(psnr(img, b.images[t]) for img, t in zip(res.images, tgt_idx))
        results[n] = float(np.mean(vals))
    print(f"{tag} PSNR by N (F=8): {json.dumps(results)}", flush=True)
print("done", flush=True)
