"""Scratch: desk-scale trend experiment (full vs la_only), one seed."""
import json
import sys
import time
import tempfile
from pathlib import Path

from vila import synthworld as sw
from vila.config import config_from_dict
from vila.cli import run_pipeline

SEED = int(sys.argv[1]) if len(sys.argv) > 1 else 0
OUT = Path(sys.argv[2]) if len(sys.argv) > 2 else Path("/tmp/trend")


def desk_doc(seed, la_only):
    doc = {
        "world": {"num_trajectories": 200, "horizon": 60, "noise_scale": 0.3},
        "train": {"epochs": 20, "epochs_stage2": 150, "epochs_head": 300, "seed": seed},
        "eval": {"episodes_per_view": 20, "dump_per_view": 500, "seed": seed},
    }
    if la_only:
        doc["loss"] = {"contrastive": "none", "structural": "none"}
    return doc


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    data_dir = OUT / f"data_{SEED}"
    t0 = time.time()
    cfg = config_from_dict(desk_doc(SEED, False))
    if not (data_dir / "manifest.json").exists():
        sw.generate_dataset(cfg.world, SEED, data_dir)
    ds = sw.load_dataset(data_dir)
    print(f"[seed {SEED}] data ready {time.time()-t0:.0f}s", flush=True)

    for name, la_only in (("full", False), ("la_only", True)):
        t1 = time.time()
        cfg = config_from_dict(desk_doc(SEED, la_only))
        report = run_pipeline(ds, cfg, OUT / f"{name}_{SEED}", head_mode="frozen")
        print(
            f"[seed {SEED}] {name}: {time.time()-t1:.0f}s "
            f"seen={report.seen_mean:.3f} unseen={report.unseen_mean:.3f} "
            f"rel={report.rel_percent} "
            f"ve_seen={report.view_entropy_seen:.3f} ve_unseen={report.view_entropy_unseen:.3f} "
            f"ae={report.action_entropy:.3f} "
            f"mse_seen={report.action_mse_seen:.5f} mse_unseen={report.action_mse_unseen:.5f}",
            flush=True,
        )


if __name__ == "__main__":
    main()
