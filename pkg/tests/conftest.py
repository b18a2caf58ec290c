import pytest

from vila import synthworld as sw
from vila.config import config_from_dict

TINY_DOC = {
    "world": {"num_trajectories": 8, "horizon": 16, "image_size": 16,
              "focal_px": 13.0, "noise_scale": 0.3},
    "model": {"feature_dim": 16, "latent_dim": 8, "idm_hidden": 32, "fdm_hidden": 32,
              "encoder_hidden": 32, "policy_hidden": 24, "head_hidden": 24},
    "train": {"k_max": 4, "n_time": 4, "n_views": 4, "epochs": 2, "bc_batch": 32,
              "seed": 5},
    "eval": {"episodes_per_view": 2, "dump_per_view": 10, "knn_k": 8,
             "action_seq_len": 6, "mse_samples": 128},
}


def tiny_doc():
    return {k: dict(v) for k, v in TINY_DOC.items()}


@pytest.fixture(scope="session")
def tiny_cfg():
    return config_from_dict(tiny_doc())


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, tiny_cfg):
    out = tmp_path_factory.mktemp("tiny_ds")
    sw.generate_dataset(tiny_cfg.world, seed=21, out_dir=out)
    return sw.load_dataset(out)
