import json
from pathlib import Path

import numpy as np
import pytest

from vila import analysis, models, synthworld as sw
from vila.cli import default_ablation_suite, main, run_ablation, run_pipeline
from vila.config import (
    ConfigError,
    config_from_dict,
    package_version,
    parse_config,
    write_provenance,
)

from conftest import tiny_doc


# ---------------------------------------------------------------------------
# config parsing

def test_empty_document_yields_documented_defaults():
    cfg = config_from_dict({})
    assert cfg.loss.tau == 1.0
    assert cfg.loss.beta == 0.001
    assert cfg.loss.lambda1 == 1.0 and cfg.loss.lambda2 == 1.0
    assert cfg.model.latent_dim == 128
    assert cfg.model.idm_hidden == 1024 and cfg.model.fdm_hidden == 1024
    assert cfg.train.k_max == 10
    assert cfg.train.n_time == 16 and cfg.train.n_views == 8
    assert cfg.train.lr_stage1 == 1e-4 and cfg.train.lr_stage2 == 5e-5
    assert cfg.train.epochs == 100
    assert cfg.train.grad_clip_norm == 1.0
    assert cfg.train.ema_coef == 0.001 and cfg.train.ema_interval_epochs == 1
    assert cfg.train.bc_batch == 256
    assert cfg.eval.knn_k == 50 and cfg.eval.kmeans_clusters == 10
    assert cfg.eval.dump_per_view == 500
    assert cfg.model.obs_dim == 32 * 32  # resolved from image size


def test_unknown_key_is_rejected_by_name():
    with pytest.raises(ConfigError, match="betaa"):
        config_from_dict({"loss": {"betaa": 0.1}})
    with pytest.raises(ConfigError, match="wurld"):
        config_from_dict({"wurld": {}})


def test_type_mismatch_names_the_key():
    with pytest.raises(ConfigError, match="train.epochs"):
        config_from_dict({"train": {"epochs": "many"}})
    with pytest.raises(ConfigError, match="loss.tau"):
        config_from_dict({"loss": {"tau": "hot"}})


def test_constraint_violation_names_the_key():
    with pytest.raises(ConfigError, match="tau"):
        config_from_dict({"loss": {"tau": -1.0}})
    with pytest.raises(ConfigError, match="k_max"):
        config_from_dict({"world": {"horizon": 8}, "train": {"k_max": 10}})
    with pytest.raises(ConfigError, match="n_views"):
        config_from_dict({"train": {"n_views": 11}})


def test_obs_dim_is_resolved_and_checked():
    cfg = config_from_dict({"world": {"image_size": 16}})
    assert cfg.model.obs_dim == 256
    with pytest.raises(ConfigError, match="obs_dim"):
        config_from_dict({"world": {"image_size": 16}, "model": {"obs_dim": 999}})


def test_a_max_mirrors_world():
    cfg = config_from_dict({"world": {"a_max": 0.05}})
    assert cfg.model.a_max == 0.05


def test_parse_serialize_parse_is_identity(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(tiny_doc()))
    cfg = parse_config(path)
    again = config_from_dict(cfg.to_dict())
    assert again == cfg
    assert again.to_dict() == cfg.to_dict()


def test_optional_fields_accept_null_and_int():
    cfg = config_from_dict({"train": {"epochs_stage2": None, "fixed_offset": 3}})
    assert cfg.train.epochs_stage2 is None
    assert cfg.train.fixed_offset == 3
    with pytest.raises(ConfigError, match="fixed_offset"):
        config_from_dict({"train": {"fixed_offset": "ten"}})


def test_invalid_json_reports_the_file(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{nope")
    with pytest.raises(ConfigError, match="bad.json"):
        parse_config(path)


def test_write_provenance_emits_config_and_version(tmp_path):
    cfg = config_from_dict({})
    write_provenance(cfg, tmp_path)
    echoed = json.loads((tmp_path / "resolved_config.json").read_text())
    assert config_from_dict(echoed) == cfg
    assert package_version() in (tmp_path / "version.txt").read_text()


# ---------------------------------------------------------------------------
# CLI end to end

@pytest.fixture(scope="module")
def cli_workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(tiny_doc()))
    data_dir = root / "data"
    code = main(["gen-data", "--config", str(cfg_path), "--out", str(data_dir),
                 "--seed", "3"])
    assert code == 0
    return root, cfg_path, data_dir


def test_cli_gen_data_writes_dataset_and_provenance(cli_workspace):
    root, cfg_path, data_dir = cli_workspace
    assert (data_dir / "manifest.json").exists()
    assert (data_dir / "resolved_config.json").exists()
    assert (data_dir / "version.txt").exists()
    assert len(list(data_dir.glob("traj_*.bin"))) == 8


def test_cli_full_pipeline_runs(cli_workspace):
    root, cfg_path, data_dir = cli_workspace
    s1 = root / "stage1.vilm"
    assert main(["train-stage1", "--data", str(data_dir), "--config", str(cfg_path),
                 "--out", str(s1)]) == 0
    assert s1.exists() and (root / "stage1.curves.csv").exists()

    s2 = root / "stage2.vilm"
    assert main(["train-stage2", "--data", str(data_dir), "--config", str(cfg_path),
                 "--ckpt", str(s1), "--out", str(s2)]) == 0

    pol = root / "policy.vilm"
    assert main(["train-policy", "--mode", "frozen", "--data", str(data_dir),
                 "--config", str(cfg_path), "--ckpt", str(s2), "--out", str(pol)]) == 0

    report = root / "report.json"
    assert main(["eval", "--ckpt", str(pol), "--data", str(data_dir),
                 "--config", str(cfg_path), "--episodes", "1",
                 "--out", str(report)]) == 0
    payload = json.loads(report.read_text())
    assert set(payload) >= {"view_entropy_seen", "view_entropy_unseen",
                            "action_entropy", "per_view_success", "seen_mean",
                            "unseen_mean", "rel_percent"}
    assert (root / "report.csv").exists()

    metrics = root / "metrics.json"
    pca = root / "pca.csv"
    assert main(["metrics", "--ckpt", str(pol), "--data", str(data_dir),
                 "--config", str(cfg_path), "--out", str(metrics),
                 "--pca", str(pca)]) == 0
    ent = json.loads(metrics.read_text())
    assert 0.0 <= ent["view_entropy_seen"] <= np.log(25) + 1e-9
    assert pca.read_text().startswith("view_id,x,y")


def test_cli_grad_check_exits_zero():
    assert main(["grad-check", "--seed", "1"]) == 0


def test_cli_surfaces_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"loss": {"betaa": 1}}))
    code = main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "d"),
                 "--seed", "0"])
    assert code == 1
    assert "betaa" in capsys.readouterr().err


def test_cli_eval_rejects_mismatched_dataset(tmp_path, cli_workspace):
    root, cfg_path, data_dir = cli_workspace
    code = main(["train-stage1", "--data", str(data_dir), "--out",
                 str(tmp_path / "x.vilm")])  # default config expects 32x32
    assert code == 1


# ---------------------------------------------------------------------------
# ablation harness

def test_default_ablation_suite_covers_spec_grid():
    names = [cell["variant"] for cell in default_ablation_suite()]
    for required in ("full", "wnce_cka", "wnce_only", "nce_only", "struct_only",
                     "la_only", "plus_act", "offset_1_16", "offset_1_5",
                     "offset_fixed_10", "dz_32", "dz_64", "dz_128", "dz_256",
                     "dz_512"):
        assert required in names
    assert len(names) == len(set(names))


def test_run_ablation_records_rows_and_failures(tmp_path, tiny_dataset, tiny_cfg):
    suite = [
        {"variant": "la_only",
         "overrides": {"loss": {"contrastive": "none", "structural": "none"}}},
        {"variant": "broken", "overrides": {"loss": {"tau": -3.0}}},
    ]
    rows = run_ablation(tiny_dataset, tiny_cfg, tmp_path, suite)
    assert [r["variant"] for r in rows] == ["la_only", "broken"]
    assert rows[0]["error"] == "" and rows[0]["seen"] != ""
    assert "tau" in rows[1]["error"]

    csv_lines = (tmp_path / "results.csv").read_text().strip().splitlines()
    assert csv_lines[0] == "variant,seen,unseen,rel,error"
    assert len(csv_lines) == 3
    # variant ids round-trip through the CSV
    assert [l.split(",")[0] for l in csv_lines[1:]] == ["la_only", "broken"]
    assert (tmp_path / "la_only" / "report.json").exists()


def test_run_pipeline_emits_all_artifacts(tmp_path, tiny_dataset, tiny_cfg):
    report = run_pipeline(tiny_dataset, tiny_cfg, tmp_path / "run")
    for name in ("policy.vilm", "curves.csv", "report.json", "report.csv",
                 "resolved_config.json", "version.txt"):
        assert (tmp_path / "run" / name).exists()
    saved = analysis.load_report(tmp_path / "run" / "report.json")
    assert saved == report
