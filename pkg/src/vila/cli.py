"""Command-line entry point for the full pipeline.

Subcommands: gen-data, train-stage1, train-stage2, train-policy, eval,
metrics, ablate, grad-check. Every subcommand is deterministic given its
inputs and seeds; VILA_THREADS caps worker parallelism without changing
any output byte. Exit codes: 0 success, 1 failure (config, training, or
I/O), 2 usage errors from argument parsing.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from pathlib import Path

from . import analysis, models, objectives, synthworld, training
from .config import ConfigError, RunConfig, config_from_dict, parse_config, write_provenance


def _load_config(path: str | None) -> RunConfig:
    if path is None:
        return config_from_dict({})
    return parse_config(path)


def _load_dataset_checked(path, cfg: RunConfig) -> synthworld.Dataset:
    ds = synthworld.load_dataset(path)
    if ds.obs_dim != cfg.model.obs_dim:
        raise ConfigError(
            f"dataset images ({ds.obs_dim} px) do not match model.obs_dim "
            f"({cfg.model.obs_dim}); check world.image_size"
        )
    return ds


def _curves_path(ckpt_path) -> Path:
    return Path(ckpt_path).with_suffix(".curves.csv")


def _prefixed(history, stage: str):
    return [(step, f"{stage}/{name}", value) for step, name, value in history]


# ---------------------------------------------------------------------------
# pipeline driver (also used by the ablation harness and the test suite)

def run_pipeline(dataset: synthworld.Dataset, cfg: RunConfig, out_dir,
                 head_mode: str = "frozen") -> analysis.MetricsReport:
    """Stage 1 -> stage 2 -> action head -> evaluation, with artifacts."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    bundle, hist1 = training.train_stage1(dataset, cfg.model, cfg.train, cfg.loss)
    hist2 = training.train_stage2(dataset, bundle, cfg.train)
    hist3 = training.train_action_head(dataset, bundle, head_mode, cfg.train)
    models.save_checkpoint(bundle, out_dir / "policy.vilm")
    curves = out_dir / "curves.csv"
    training.write_history(curves, _prefixed(hist1, "stage1"))
    training.write_history(curves, _prefixed(hist2, "stage2"))
    training.write_history(curves, _prefixed(hist3, "head"))

    report = analysis.evaluate_views(dataset, bundle, cfg.eval)
    analysis.save_report(report, out_dir / "report.json")
    analysis.report_csv(report, out_dir / "report.csv")
    write_provenance(cfg, out_dir)
    return report


# ---------------------------------------------------------------------------
# ablation harness

def default_ablation_suite() -> list[dict]:
    """Loss-variant rows, offset-range rows, and the latent-width grid."""
    cells = [
        {"variant": "full", "overrides": {}},
        {"variant": "wnce_cka", "overrides": {"loss": {"structural": "cka"}}},
        {"variant": "wnce_only", "overrides": {"loss": {"structural": "none"}}},
        {"variant": "nce_only",
         "overrides": {"loss": {"contrastive": "standard", "structural": "none"}}},
        {"variant": "struct_only", "overrides": {"loss": {"contrastive": "none"}}},
        {"variant": "la_only",
         "overrides": {"loss": {"contrastive": "none", "structural": "none"}}},
        {"variant": "plus_act", "overrides": {"loss": {"action_reg_lambda": 1.0}}},
        {"variant": "softdtw_weights", "overrides": {"loss": {"distance": "softdtw"}}},
        {"variant": "offset_1_16", "overrides": {"train": {"k_max": 16}}},
        {"variant": "offset_1_5", "overrides": {"train": {"k_max": 5}}},
        {"variant": "offset_fixed_10", "overrides": {"train": {"fixed_offset": 10}}},
    ]
    for dim in (32, 64, 128, 256, 512):
        cells.append(
            {"variant": f"dz_{dim}", "overrides": {"model": {"latent_dim": dim}}}
        )
    return cells


def _merge_overrides(doc: dict, overrides: dict) -> dict:
    merged = copy.deepcopy(doc)
    for section, values in overrides.items():
        merged.setdefault(section, {}).update(values)
    return merged


def run_ablation(dataset: synthworld.Dataset, cfg: RunConfig, out_dir,
                 suite: list[dict] | None = None, head_mode: str = "frozen") -> list[dict]:
    """Run every suite cell through the full pipeline; per-cell failures
    are recorded in the results table instead of aborting the sweep."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    suite = default_ablation_suite() if suite is None else suite
    base_doc = cfg.to_dict()
    rows = []
    for cell in suite:
        variant = cell["variant"]
        row = {"variant": variant, "seen": "", "unseen": "", "rel": "", "error": ""}
        try:
            cell_cfg = config_from_dict(_merge_overrides(base_doc, cell.get("overrides", {})))
            report = run_pipeline(dataset, cell_cfg, out_dir / variant, head_mode)
            row.update(
                seen=report.seen_mean,
                unseen=report.unseen_mean,
                rel="" if report.rel_percent is None else report.rel_percent,
            )
        except Exception as err:  # recorded, not fatal
            row["error"] = f"{type(err).__name__}: {err}"
        rows.append(row)

    with open(out_dir / "results.csv", "w", encoding="utf-8") as f:
        f.write("variant,seen,unseen,rel,error\n")
        for row in rows:
            err = str(row["error"]).replace('"', "'")
            f.write(f'{row["variant"]},{row["seen"]},{row["unseen"]},{row["rel"]},"{err}"\n')
    return rows


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args) -> int:
    cfg = _load_config(args.config)
    synthworld.generate_dataset(cfg.world, args.seed, args.out)
    write_provenance(cfg, args.out)
    return 0


def cmd_train_stage1(args) -> int:
    cfg = _load_config(args.config)
    ds = _load_dataset_checked(args.data, cfg)
    bundle, history = training.train_stage1(ds, cfg.model, cfg.train, cfg.loss)
    models.save_checkpoint(bundle, args.out)
    training.write_history(_curves_path(args.out), _prefixed(history, "stage1"))
    write_provenance(cfg, Path(args.out).parent)
    return 0


def cmd_train_stage2(args) -> int:
    cfg = _load_config(args.config)
    ds = _load_dataset_checked(args.data, cfg)
    bundle = models.load_checkpoint(args.ckpt)
    history = training.train_stage2(ds, bundle, cfg.train)
    models.save_checkpoint(bundle, args.out)
    training.write_history(_curves_path(args.out), _prefixed(history, "stage2"))
    write_provenance(cfg, Path(args.out).parent)
    return 0


def cmd_train_policy(args) -> int:
    cfg = _load_config(args.config)
    ds = _load_dataset_checked(args.data, cfg)
    bundle = models.load_checkpoint(args.ckpt)
    history = training.train_action_head(ds, bundle, args.mode, cfg.train)
    models.save_checkpoint(bundle, args.out)
    training.write_history(_curves_path(args.out), _prefixed(history, "head"))
    write_provenance(cfg, Path(args.out).parent)
    return 0


def _load_for_inference(args, cfg):
    """Dataset + checkpoint pair, validated against each other."""
    ds = synthworld.load_dataset(args.data)
    bundle = models.load_checkpoint(args.ckpt)
    if ds.obs_dim != bundle.config.obs_dim:
        raise ConfigError(
            f"dataset images ({ds.obs_dim} px) do not match the checkpoint "
            f"(obs_dim {bundle.config.obs_dim})"
        )
    return ds, bundle


def cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    if args.episodes is not None:
        cfg.eval.episodes_per_view = args.episodes
    ds, bundle = _load_for_inference(args, cfg)
    report = analysis.evaluate_views(ds, bundle, cfg.eval)
    analysis.save_report(report, args.out)
    analysis.report_csv(report, Path(args.out).with_suffix(".csv"))
    write_provenance(cfg, Path(args.out).parent)
    print(json.dumps(report.to_dict(), indent=2))
    return 0


def cmd_metrics(args) -> int:
    cfg = _load_config(args.config)
    ds, bundle = _load_for_inference(args, cfg)
    entropies = analysis.compute_entropies(ds, bundle, cfg.eval)
    if args.pca is not None:
        dump = analysis.collect_feature_dump(ds, bundle, cfg.eval)
        coords = analysis.pca2_export(dump, seed=cfg.eval.seed)
        with open(args.pca, "w", encoding="utf-8") as f:
            f.write("view_id,x,y\n")
            for view, (x, y) in zip(dump.view_ids, coords):
                f.write(f"{view},{x!r},{y!r}\n")
    payload = json.dumps(entropies, indent=2)
    if args.out is not None:
        Path(args.out).write_text(payload + "\n", encoding="utf-8")
    print(payload)
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args.config)
    ds = _load_dataset_checked(args.data, cfg)
    suite = None
    if args.suite is not None:
        with open(args.suite, encoding="utf-8") as f:
            suite = json.load(f)
    rows = run_ablation(ds, cfg, args.out, suite)
    failures = [r for r in rows if r["error"]]
    for row in rows:
        print(f"{row['variant']}: seen={row['seen']} unseen={row['unseen']} "
              f"rel={row['rel']} {row['error']}")
    return 1 if failures else 0


def cmd_grad_check(args) -> int:
    results = objectives.gradient_check_suite(seed=args.seed)
    worst = max(results.values())
    for name, err in results.items():
        print(f"{name:>20}: max relative error {err:.3e}")
    print(f"{'worst':>20}: {worst:.3e}")
    return 0 if worst < 1e-3 else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vila",
        description="Two-stage view-invariant latent-action pipeline on a "
                    "synthetic multi-view world.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a multi-view dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train-stage1", help="representation pretraining")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train_stage1)

    p = sub.add_parser("train-stage2", help="latent behavior cloning")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train_stage2)

    p = sub.add_parser("train-policy", help="downstream action-head training")
    p.add_argument("--mode", choices=("frozen", "finetune"), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train_policy)

    p = sub.add_parser("eval", help="rollout + entropy evaluation report")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("metrics", help="entropy diagnostics only")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--pca", default=None, help="optional 2-D PCA coordinate CSV")
    p.set_defaults(fn=cmd_metrics)

    p = sub.add_parser("ablate", help="run the ablation grid")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--suite", default=None, help="JSON list of suite cells")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("grad-check", help="finite-difference objective suite")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_grad_check)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, training.TrainingError, ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
