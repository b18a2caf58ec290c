"""Scratch: sweep render configs for visual-BC feasibility."""
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from vila import autodiff as ad
from vila import models, synthworld as sw, training
from vila.synthworld import dynamics, render, sample_start_state


def train_probe(ds, views, steps, lr, seed=1):
    rng = np.random.default_rng(seed)
    mlp = models.Mlp((ds.obs_dim, 256, 256, 3), "relu", rng)
    params = mlp.params
    opt = training.init_optim(params)
    tc = training.TrainConfig(weight_decay=0.0)
    srng = np.random.default_rng(seed + 1)
    n, t = ds.num_trajectories, ds.horizon
    for _ in range(steps):
        trajs = srng.integers(0, n, 256)
        ts = srng.integers(0, t, 256)
        vs = srng.choice(views, 256)
        obs = ds.obs[trajs, ts, vs]
        gt = ds.actions[trajs, ts]
        pred = ad.scale(ad.tanh(mlp.apply(ad.Tensor(obs))), 0.08)
        loss = ad.mse(pred, ad.Tensor(gt))
        ad.backward(loss)
        grads = [p.grad for p in params]
        training.clip_global_norm(grads, 1.0)
        training.optimizer_step(params, grads, opt, lr, tc)
        for p in params:
            p.grad = None
    return mlp, float(loss.data)


def rollout_rates(mlp, world, poses, eps, thresholds):
    mins = []
    for pose in poses:
        for ep in range(eps):
            r = np.random.default_rng(np.random.SeedSequence([0, 5, pose.pose_id, ep]))
            state = sample_start_state(r, world)
            dmin = np.inf
            for _ in range(world.horizon):
                obs = render(state, pose, world).reshape(1, -1)
                a = 0.08 * np.tanh(mlp.forward_np(obs))[0]
                state = dynamics(state, a)
                dmin = min(dmin, float(np.linalg.norm(state.agent_pos - state.target_pos)))
            mins.append(dmin)
    mins = np.array(mins)
    return {th: float((mins < th).mean()) for th in thresholds}, float(np.median(mins))


CONFIGS = {
    "current": {},
    "sharp":     {"blob_radius": 0.22, "focal_px": 26.0},
    "asym":      {"blob_radius": 0.22, "focal_px": 26.0, "target_radius": 0.5},
    "asym_zoom": {"blob_radius": 0.2, "focal_px": 32.0, "target_radius": 0.45,
                  "start_range": 0.7},
}


def main():
    which = sys.argv[1:] or list(CONFIGS)
    for name in which:
        cfg = sw.WorldConfig(num_trajectories=100, horizon=60, **CONFIGS[name])
        out = Path(f"/tmp/sweep/{name}")
        t0 = time.time()
        if not (out / "manifest.json").exists():
            sw.generate_dataset(cfg, 0, out)
        ds = sw.load_dataset(out)
        base = float((ds.actions.astype(np.float64) ** 2).mean())
        mlp, mse = train_probe(ds, np.array(ds.grid.seen_ids()), 5000, 1e-3)
        world = ds.world_config()
        poses = [world_pose for world_pose in ds.grid.poses
                 if world_pose.pose_id in ds.grid.seen_ids()[:2]]
        rates, med = rollout_rates(mlp, world, poses, 25, [0.05, 0.08, 0.10, 0.15])
        print(f"[{name}] base={base:.2e} mse={mse:.2e} median_dmin={med:.3f} "
              f"rates={rates} ({time.time()-t0:.0f}s)", flush=True)


if __name__ == "__main__":
    main()
