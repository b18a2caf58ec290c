import numpy as np
import pytest

from vila import analysis, models, training
from vila.autodiff import Tensor
from vila.config import config_from_dict
from vila.objectives import LossConfig
from vila.training import (
    OptimState,
    TrainConfig,
    TrainingError,
    clip_global_norm,
    init_optim,
    optimizer_step,
    sample_batch,
    train_action_head,
    train_stage1,
    train_stage2,
)

from conftest import tiny_doc


# ---------------------------------------------------------------------------
# optimizer

def test_zero_gradient_without_decay_leaves_params_unchanged():
    p = Tensor(np.array([1.0, -2.0], dtype=np.float32), requires_grad=True)
    cfg = TrainConfig(weight_decay=0.0)
    state = init_optim([p])
    optimizer_step([p], [np.zeros(2, np.float32)], state, lr=0.1, cfg=cfg)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_first_step_moves_against_gradient_sign():
    p = Tensor(np.array([0.0, 0.0], dtype=np.float32), requires_grad=True)
    g = np.array([0.25, -3.0], dtype=np.float32)
    cfg = TrainConfig(weight_decay=0.0)
    optimizer_step([p], [g], init_optim([p]), lr=0.01, cfg=cfg)
    # bias-corrected first Adam step is ~ -lr * sign(g)
    np.testing.assert_allclose(p.data, [-0.01, 0.01], rtol=1e-3)


def test_adamw_converges_on_quadratic_bowl():
    p = Tensor(np.array([0.9, -0.6, 0.45], dtype=np.float32), requires_grad=True)
    cfg = TrainConfig(weight_decay=0.0)
    state = init_optim([p])
    for _ in range(500):
        optimizer_step([p], [p.data.copy()], state, lr=1e-2, cfg=cfg)
    assert np.linalg.norm(p.data) < 1e-3


def test_weight_decay_shrinks_params_without_gradient():
    p = Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)
    cfg = TrainConfig(weight_decay=0.1)
    optimizer_step([p], [np.zeros(1, np.float32)], init_optim([p]), lr=0.1, cfg=cfg)
    assert p.data[0] == pytest.approx(1.0 - 0.1 * 0.1)


def test_clip_is_identity_below_threshold():
    g = [np.array([0.3, 0.4], dtype=np.float32)]
    norm = clip_global_norm(g, max_norm=1.0)
    assert norm == pytest.approx(0.5)
    np.testing.assert_allclose(g[0], [0.3, 0.4])


def test_clip_rescales_to_exactly_max_norm():
    g = [np.array([3.0], dtype=np.float32), np.array([4.0], dtype=np.float32)]
    clip_global_norm(g, max_norm=1.0)
    np.testing.assert_allclose([g[0][0], g[1][0]], [0.6, 0.8], atol=1e-6)
    total = np.sqrt(sum(float((x**2).sum()) for x in g))
    assert total == pytest.approx(1.0, abs=1e-6)


def test_full_bundle_optimizer_step_never_touches_target_encoder(tiny_cfg):
    bundle = models.init_bundle(tiny_cfg.model, seed=1)
    target_before = models.param_hash(bundle.target_encoder)
    trainable = [p for net in bundle.nets().values() for p in net.params
                 if p.requires_grad]
    grads = [np.ones_like(p.data) for p in trainable]
    optimizer_step(trainable, grads, init_optim(trainable), lr=0.01,
                   cfg=TrainConfig())
    assert models.param_hash(bundle.target_encoder) == target_before
    assert models.param_hash(bundle.encoder) != target_before


# ---------------------------------------------------------------------------
# batch sampling

def test_sample_batch_yields_n_times_v_tuples(tiny_dataset):
    cfg = TrainConfig(k_max=4, n_time=4, n_views=4)
    rng = np.random.default_rng(0)
    idx = sample_batch(tiny_dataset, cfg, rng)
    assert idx.entries.shape == (16, 3)
    assert 1 <= idx.k <= 4


def test_sampled_times_leave_room_for_the_offset(tiny_dataset):
    cfg = TrainConfig(k_max=4, n_time=8, n_views=3)
    rng = np.random.default_rng(1)
    for _ in range(200):
        idx = sample_batch(tiny_dataset, cfg, rng)
        assert (idx.entries[:, 1] + idx.k <= tiny_dataset.horizon).all()
        assert np.isin(idx.entries[:, 2], tiny_dataset.grid.seen_ids()).all()


def test_views_within_a_base_index_are_distinct(tiny_dataset):
    cfg = TrainConfig(k_max=4, n_time=4, n_views=4)
    rng = np.random.default_rng(2)
    idx = sample_batch(tiny_dataset, cfg, rng)
    for i in range(4):
        views = idx.entries[4 * i:4 * (i + 1), 2]
        assert len(set(views.tolist())) == 4


def test_offset_distribution_is_uniform(tiny_dataset):
    cfg = TrainConfig(k_max=10, n_time=1, n_views=2)
    rng = np.random.default_rng(3)
    n = 10_000
    counts = np.zeros(10)
    for _ in range(n):
        counts[sample_batch(tiny_dataset, cfg, rng).k - 1] += 1
    expected = n / 10
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    # chi-square critical value for df=9 at p=0.01
    assert chi2 < 21.666, counts


def test_fixed_offset_pins_k(tiny_dataset):
    cfg = TrainConfig(k_max=10, n_time=2, n_views=2, fixed_offset=7)
    rng = np.random.default_rng(4)
    assert all(sample_batch(tiny_dataset, cfg, rng).k == 7 for _ in range(20))


def test_sample_batch_rejects_too_many_views(tiny_dataset):
    cfg = TrainConfig(n_views=11)
    with pytest.raises(TrainingError, match="exceeds"):
        sample_batch(tiny_dataset, cfg, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# stage 1

def test_stage1_zero_lambdas_equal_disabled_terms(tiny_dataset, tiny_cfg):
    t_cfg = TrainConfig(**{**tiny_cfg.train.__dict__, "epochs": 1})
    by_lambda = train_stage1(tiny_dataset, tiny_cfg.model, t_cfg,
                             LossConfig(lambda1=0.0, lambda2=0.0))
    by_mode = train_stage1(tiny_dataset, tiny_cfg.model, t_cfg,
                           LossConfig(contrastive="none", structural="none"))
    assert by_lambda[1] == by_mode[1]
    assert models.bundle_hashes(by_lambda[0]) == models.bundle_hashes(by_mode[0])


def test_stage1_history_covers_every_step(tiny_dataset, tiny_cfg):
    t_cfg = TrainConfig(**{**tiny_cfg.train.__dict__, "epochs": 2})
    _, history = train_stage1(tiny_dataset, tiny_cfg.model, t_cfg, LossConfig())
    steps = {row[0] for row in history}
    batch = t_cfg.n_time * t_cfg.n_views
    usable = tiny_dataset.num_trajectories * (tiny_dataset.horizon - t_cfg.k_max + 1)
    per_epoch = -(-usable // batch)
    assert steps == set(range(2 * per_epoch))
    by_component = {row[1] for row in history}
    assert by_component == {"la", "contrastive", "structural", "total"}


def test_stage1_logged_total_is_sum_of_components(tiny_dataset, tiny_cfg):
    t_cfg = TrainConfig(**{**tiny_cfg.train.__dict__, "epochs": 1})
    _, history = train_stage1(tiny_dataset, tiny_cfg.model, t_cfg, LossConfig())
    per_step = {}
    for step, name, value in history:
        per_step.setdefault(step, {})[name] = value
    for comps in per_step.values():
        rest = sum(v for k, v in comps.items() if k != "total")
        assert comps["total"] == pytest.approx(rest, abs=1e-6)


def test_stage1_is_bit_deterministic(tiny_dataset, tiny_cfg):
    t_cfg = TrainConfig(**{**tiny_cfg.train.__dict__, "epochs": 1})
    b1, h1 = train_stage1(tiny_dataset, tiny_cfg.model, t_cfg, LossConfig())
    b2, h2 = train_stage1(tiny_dataset, tiny_cfg.model, t_cfg, LossConfig())
    assert h1 == h2
    assert models.bundle_hashes(b1) == models.bundle_hashes(b2)


def test_stage1_rejects_oversized_offset(tiny_dataset, tiny_cfg):
    t_cfg = TrainConfig(**{**tiny_cfg.train.__dict__, "k_max": 16})
    with pytest.raises(TrainingError, match="horizon"):
        train_stage1(tiny_dataset, tiny_cfg.model, t_cfg, LossConfig())


def test_stage1_improves_prediction_loss(tiny_dataset, tiny_cfg):
    # The strict halving check lives in the acceptance suite at desk
    # scale; this guards the descent direction at toy scale.
    t_cfg = TrainConfig(**{**tiny_cfg.train.__dict__, "epochs": 8})
    _, history = train_stage1(tiny_dataset, tiny_cfg.model, t_cfg, LossConfig())
    la = [v for _, name, v in history if name == "la"]
    assert np.mean(la[-10:]) < 0.95 * np.mean(la[:10])


# ---------------------------------------------------------------------------
# stage 2 and the action head

@pytest.fixture(scope="module")
def stage1_bundle(tiny_dataset):
    doc = tiny_doc()
    doc["train"]["epochs"] = 4
    cfg = config_from_dict(doc)
    bundle, _ = train_stage1(tiny_dataset, cfg.model, cfg.train, LossConfig())
    return bundle, cfg


def test_stage2_freezes_encoder_and_idm(tiny_dataset, stage1_bundle):
    bundle, cfg = stage1_bundle
    before = {n: models.param_hash(getattr(bundle, n))
              for n in ("encoder", "target_encoder", "idm", "fdm")}
    t_cfg = TrainConfig(**{**cfg.train.__dict__, "epochs_stage2": 3})
    history = train_stage2(tiny_dataset, bundle, t_cfg)
    after = {n: models.param_hash(getattr(bundle, n))
             for n in ("encoder", "target_encoder", "idm", "fdm")}
    assert after == before
    losses = [v for _, _, v in history]
    assert losses[-1] < losses[0]


def test_stage2_same_seed_same_final_loss(tiny_dataset, stage1_bundle):
    bundle, cfg = stage1_bundle
    t_cfg = TrainConfig(**{**cfg.train.__dict__, "epochs_stage2": 2})
    pi_init = [p.data.copy() for p in bundle.latent_policy.params]

    def run():
        for p, init in zip(bundle.latent_policy.params, pi_init):
            np.copyto(p.data, init)
        return train_stage2(tiny_dataset, bundle, t_cfg)

    assert run() == run()


def test_frozen_head_training_improves_action_mse(tiny_dataset, stage1_bundle):
    bundle, cfg = stage1_bundle
    t_cfg = TrainConfig(**{**cfg.train.__dict__, "epochs_stage2": 3,
                           "epochs_head": 30})
    train_stage2(tiny_dataset, bundle, t_cfg)
    seen = tiny_dataset.grid.seen_ids()
    before = analysis.action_mse(tiny_dataset, bundle, seen, 256, seed=0)
    encoder_before = models.param_hash(bundle.encoder)
    policy_before = models.param_hash(bundle.latent_policy)
    history = train_action_head(tiny_dataset, bundle, "frozen", t_cfg)
    assert models.param_hash(bundle.encoder) == encoder_before
    assert models.param_hash(bundle.latent_policy) == policy_before
    after = analysis.action_mse(tiny_dataset, bundle, seen, 256, seed=0)
    assert after < before
    assert history[-1][2] < history[0][2]


def test_finetune_head_training_updates_encoder(tiny_dataset, stage1_bundle):
    bundle, cfg = stage1_bundle
    src = models.bundle_hashes(bundle)
    # work on a fresh copy so module-scoped fixture state survives
    import tempfile, os
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "b.vilm")
        models.save_checkpoint(bundle, path)
        copy = models.load_checkpoint(path)
    assert models.bundle_hashes(copy) == src
    t_cfg = TrainConfig(**{**cfg.train.__dict__, "epochs_head": 1})
    train_action_head(tiny_dataset, copy, "finetune", t_cfg)
    assert models.param_hash(copy.encoder) != src["encoder"]
    assert models.param_hash(copy.latent_policy) != src["latent_policy"]
    assert models.param_hash(copy.idm) == src["idm"]


def test_action_head_rejects_unknown_mode(tiny_dataset, stage1_bundle):
    bundle, cfg = stage1_bundle
    with pytest.raises(ValueError, match="mode"):
        train_action_head(tiny_dataset, bundle, "partial", cfg.train)


# ---------------------------------------------------------------------------
# history CSV

def test_write_history_appends_with_single_header(tmp_path):
    path = tmp_path / "curves.csv"
    training.write_history(path, [(0, "la", 1.5), (1, "la", 1.25)])
    training.write_history(path, [(0, "latent_bc", 0.5)])
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "step,component,value"
    assert len(lines) == 4
    assert lines[-1] == "0,latent_bc,0.5"
