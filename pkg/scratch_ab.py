"""Scratch: full vs la_only A/B at desk scale, multi-threshold readout."""
import sys
import time

import numpy as np

from vila import analysis, models, synthworld as sw, training
from vila.config import config_from_dict
from vila.objectives import LossConfig
from vila.synthworld import dynamics, render, sample_start_state

SEED = int(sys.argv[1]) if len(sys.argv) > 1 else 0
DATA = sys.argv[2] if len(sys.argv) > 2 else "/tmp/trend4/data_0"


def run_variant(ds, la_only, seed):
    doc = {
        "world": {"num_trajectories": 200, "horizon": 60, "noise_scale": 0.3},
        "model": {"feature_dim": 64, "head_hidden": 64},
        "train": {"epochs": 20, "epochs_stage2": 300, "epochs_head": 800, "seed": seed},
        "eval": {"episodes_per_view": 20, "dump_per_view": 150, "seed": seed},
    }
    if la_only:
        doc["loss"] = {"contrastive": "none", "structural": "none"}
    cfg = config_from_dict(doc)
    t0 = time.time()
    bundle, _ = training.train_stage1(ds, cfg.model, cfg.train, cfg.loss)
    training.train_stage2(ds, bundle, cfg.train)
    training.train_action_head(ds, bundle, "frozen", cfg.train)
    print(f"  train {time.time()-t0:.0f}s", flush=True)
    return bundle, cfg


def dmin_table(ds, bundle, seed, episodes=20):
    world = ds.world_config()
    out = {}
    for pose in ds.grid.poses:
        mins = []
        for ep in range(episodes):
            r = np.random.default_rng(np.random.SeedSequence([seed, 5, pose.pose_id, ep]))
            state = sample_start_state(r, world)
            dmin = np.inf
            for _ in range(world.horizon):
                obs = render(state, pose, world).reshape(1, -1)
                s = models.encode(bundle, obs)
                a = models.action_head(bundle, s, models.latent_policy(bundle, s))[0]
                state = dynamics(state, a)
                dmin = min(dmin, float(np.linalg.norm(state.agent_pos - state.target_pos)))
            mins.append(dmin)
        out[pose.pose_id] = np.array(mins)
    return out


def summarize(ds, table, tag):
    seen, unseen = set(ds.grid.seen_ids()), set(ds.grid.unseen_ids())
    for th in (0.05, 0.08, 0.10):
        s = np.mean([(table[i] < th).mean() for i in seen])
        u = np.mean([(table[i] < th).mean() for i in unseen])
        print(f"  {tag} @ {th}: seen={s:.3f} unseen={u:.3f}", flush=True)


def main():
    ds = sw.load_dataset(DATA)
    for name, la_only in (("full", False), ("la_only", True)):
        print(f"[seed {SEED}] {name}", flush=True)
        bundle, cfg = run_variant(ds, la_only, SEED)
        t0 = time.time()
        ent = analysis.compute_entropies(ds, bundle, cfg.eval)
        mse_u = analysis.action_mse(ds, bundle, ds.grid.unseen_ids(), 1024, SEED, 1)
        table = dmin_table(ds, bundle, SEED)
        print(f"  eval {time.time()-t0:.0f}s ve_unseen={ent['view_entropy_unseen']:.3f} "
              f"ae={ent['action_entropy']:.3f} mse_unseen={mse_u:.5f}", flush=True)
        summarize(ds, table, name)
        models.save_checkpoint(bundle, f"/tmp/ab_{name}_{SEED}.vilm")


if __name__ == "__main__":
    main()
