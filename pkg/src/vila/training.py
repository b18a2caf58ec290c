"""Batch sampling, the two training stages, action-head training, and the
AdamW/clipping machinery.

Stage 1 trains encoder + IDM + FDM on the combined representation loss and
refreshes the EMA target encoder every few epochs. Stage 2 freezes the
encoder and IDM and behavior-clones the latent policy onto IDM outputs at
the maximum offset. Action-head training behavior-clones low-level actions
on seen views, either with everything else frozen or with the encoder and
latent policy fine-tuned at a tenth of the head learning rate.

All randomness flows through per-purpose SeedSequence streams, so runs are
bit-reproducible regardless of worker counts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import models, objectives
from .models import ModelBundle, ModelConfig
from .objectives import Batch, LossConfig
from .synthworld import Dataset

_STAGE1_STREAM = 1
_STAGE2_STREAM = 2
_HEAD_STREAM = 3
_AUX_HEAD_SEED_TAG = 9


class TrainingError(RuntimeError):
    """Raised when a run diverges (non-finite loss) or is misconfigured."""


@dataclass
class TrainConfig:
    k_max: int = 10
    n_time: int = 16
    n_views: int = 8
    lr_stage1: float = 1e-4
    lr_stage2: float = 5e-5
    lr_head: float = 1e-3
    epochs: int = 100
    epochs_stage2: int | None = None
    epochs_head: int | None = None
    bc_batch: int = 256
    grad_clip_norm: float = 1.0
    ema_coef: float = 0.001
    ema_interval_epochs: int = 1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    weight_decay: float = 0.01
    adam_eps: float = 1e-8
    fixed_offset: int | None = None
    seed: int = 0

    def validate(self):
        for name in ("k_max", "n_time", "n_views", "epochs", "bc_batch",
                     "ema_interval_epochs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"train config field {name!r} must be > 0")
        for name in ("lr_stage1", "lr_stage2", "lr_head", "grad_clip_norm"):
            if getattr(self, name) <= 0:
                raise ValueError(f"train config field {name!r} must be > 0")
        if not 0.0 <= self.ema_coef <= 1.0:
            raise ValueError("train config field 'ema_coef' must be in [0, 1]")
        if self.weight_decay < 0:
            raise ValueError("train config field 'weight_decay' must be >= 0")
        if self.fixed_offset is not None and not 1 <= self.fixed_offset <= self.k_max:
            raise ValueError("train config field 'fixed_offset' must lie in 1..k_max")
        return self

    def stage2_epochs(self) -> int:
        return self.epochs if self.epochs_stage2 is None else self.epochs_stage2

    def head_epochs(self) -> int:
        return self.epochs if self.epochs_head is None else self.epochs_head


def _check_compat(dataset: Dataset, cfg: TrainConfig):
    if cfg.k_max >= dataset.horizon:
        raise TrainingError(
            f"k_max {cfg.k_max} must be < trajectory horizon {dataset.horizon}"
        )
    n_seen = len(dataset.grid.seen_ids())
    if cfg.n_views > n_seen:
        raise TrainingError(f"n_views {cfg.n_views} exceeds {n_seen} seen views")


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class OptimState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0


def init_optim(params) -> OptimState:
    return OptimState(
        m=[np.zeros_like(p.data) for p in params],
        v=[np.zeros_like(p.data) for p in params],
    )


def optimizer_step(params, grads, state: OptimState, lr: float, cfg: TrainConfig):
    """AdamW: bias-corrected Adam with decoupled weight decay."""
    state.step += 1
    t = state.step
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        np.copyto(m, b1 * m + (1.0 - b1) * g)
        np.copyto(v, b2 * v + (1.0 - b2) * g * g)
        update = (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        np.copyto(p.data, p.data - lr * (update + cfg.weight_decay * p.data))


def clip_global_norm(grads, max_norm: float) -> float:
    """Scale all grads jointly so their global L2 norm is <= max_norm.

    Returns the pre-clip norm."""
    if max_norm <= 0:
        raise ValueError(f"max_norm must be > 0, got {max_norm}")
    total = 0.0
    for g in grads:
        total += float(np.sum(g.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if norm > max_norm:
        factor = np.float32(max_norm / norm)
        for g in grads:
            np.multiply(g, factor, out=g, casting="same_kind")
    return norm


# ---------------------------------------------------------------------------
# batch sampling

@dataclass
class BatchIndices:
    k: int
    entries: np.ndarray  # (B, 3) rows of (trajectory, t, view)


def sample_batch(dataset: Dataset, cfg: TrainConfig, rng: np.random.Generator,
                 split: str = "seen") -> BatchIndices:
    """One contrastive batch: a shared offset k, N base (trajectory, t)
    pairs with t + k <= T, and V distinct views per pair."""
    view_ids = np.array(
        dataset.grid.seen_ids() if split == "seen" else dataset.grid.unseen_ids()
    )
    if cfg.n_views > len(view_ids):
        raise TrainingError(f"n_views {cfg.n_views} exceeds {len(view_ids)} {split} views")
    if cfg.fixed_offset is not None:
        k = cfg.fixed_offset
    else:
        k = int(rng.integers(1, cfg.k_max + 1))
    trajs = rng.integers(0, dataset.num_trajectories, size=cfg.n_time)
    ts = rng.integers(0, dataset.horizon - k + 1, size=cfg.n_time)
    entries = np.empty((cfg.n_time * cfg.n_views, 3), dtype=np.int64)
    row = 0
    for i in range(cfg.n_time):
        views = rng.choice(view_ids, size=cfg.n_views, replace=False)
        for v in views:
            entries[row] = (trajs[i], ts[i], v)
            row += 1
    return BatchIndices(k=k, entries=entries)


def _gather_obs(dataset: Dataset, trajs, ts, views) -> np.ndarray:
    return dataset.obs[trajs, ts, views]


def _gather_actions(dataset: Dataset, trajs, ts, k: int) -> np.ndarray:
    steps = ts[:, None] + np.arange(k)[None, :]
    return dataset.actions[trajs[:, None], steps]


def assemble_batch(dataset: Dataset, bundle: ModelBundle, idx: BatchIndices) -> Batch:
    trajs, ts, views = idx.entries[:, 0], idx.entries[:, 1], idx.entries[:, 2]
    obs_t = _gather_obs(dataset, trajs, ts, views)
    obs_tk = _gather_obs(dataset, trajs, ts + idx.k, views)
    s_t = models.encode(bundle, ad.Tensor(obs_t))
    s_tk = models.encode(bundle, ad.Tensor(obs_tk))
    s_tk_target = models.encode_target(bundle, obs_tk)
    gt_actions = _gather_actions(dataset, trajs, ts, idx.k)
    return Batch(
        k=idx.k, s_t=s_t, s_tk=s_tk, s_tk_target=s_tk_target,
        gt_actions=gt_actions, ids=idx.entries,
    )


def _steps_per_epoch(usable: int, batch: int) -> int:
    return max(1, math.ceil(usable / batch))


def _grads_of(params, context: str):
    grads = []
    for p in params:
        if p.grad is None:
            raise TrainingError(f"{context}: parameter received no gradient")
        grads.append(p.grad)
    return grads


# ---------------------------------------------------------------------------
# stage 1

def train_stage1(dataset: Dataset, model_cfg: ModelConfig, train_cfg: TrainConfig,
                 loss_cfg: LossConfig):
    """Representation pretraining; returns (bundle, history) where history
    rows are (step, component, value)."""
    train_cfg.validate()
    loss_cfg.validate()
    _check_compat(dataset, train_cfg)
    bundle = models.init_bundle(model_cfg, train_cfg.seed)

    params = bundle.encoder.params + bundle.idm.params + bundle.fdm.params
    aux_head = None
    if loss_cfg.action_reg_lambda > 0:
        aux_rng = np.random.default_rng(
            np.random.SeedSequence([train_cfg.seed, _AUX_HEAD_SEED_TAG])
        )
        aux = models.Mlp(
            (model_cfg.latent_dim, train_cfg.k_max * model_cfg.action_dim),
            model_cfg.nonlinearity, aux_rng,
        )
        aux_head = (aux.params[0], aux.params[1])
        params = params + aux.params

    opt = init_optim(params)
    rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, _STAGE1_STREAM]))
    batch_size = train_cfg.n_time * train_cfg.n_views
    usable = dataset.num_trajectories * (dataset.horizon - train_cfg.k_max + 1)
    steps = _steps_per_epoch(usable, batch_size)

    history = []
    target_hash_before = models.param_hash(bundle.target_encoder)
    step = 0
    for epoch in range(train_cfg.epochs):
        for _ in range(steps):
            idx = sample_batch(dataset, train_cfg, rng, split="seen")
            batch = assemble_batch(dataset, bundle, idx)
            try:
                breakdown = objectives.combined_loss(bundle, batch, loss_cfg, aux_head)
                ad.backward(breakdown.total)
            except ad.NonFiniteError as err:
                raise TrainingError(f"stage 1 diverged at step {step}: {err}") from err
            grads = _grads_of(params, "stage 1")
            clip_global_norm(grads, train_cfg.grad_clip_norm)
            optimizer_step(params, grads, opt, train_cfg.lr_stage1, train_cfg)
            for p in params:
                p.grad = None
            for name, value in breakdown.components.items():
                history.append((step, name, value))
            step += 1
        if (epoch + 1) % train_cfg.ema_interval_epochs == 0:
            if models.param_hash(bundle.target_encoder) != target_hash_before:
                raise TrainingError("target encoder changed outside ema_update")
            models.ema_update(bundle, train_cfg.ema_coef)
            target_hash_before = models.param_hash(bundle.target_encoder)
    return bundle, history


# ---------------------------------------------------------------------------
# stage 2

def _sample_bc_indices(dataset: Dataset, rng, batch: int, k: int, seen_ids):
    trajs = rng.integers(0, dataset.num_trajectories, size=batch)
    ts = rng.integers(0, dataset.horizon - k + 1, size=batch)
    views = rng.choice(np.asarray(seen_ids), size=batch, replace=True)
    return trajs, ts, views


def _precompute_seen_features(dataset: Dataset, bundle: ModelBundle, seen_ids,
                              chunk: int = 4096) -> np.ndarray:
    """Encode every (trajectory, t, seen view) observation once.

    Frozen-encoder stages gather from this cache instead of re-encoding
    per step, which makes their per-step cost independent of image size.
    Layout: (n, T+1, len(seen_ids), feature_dim); seen_ids must be sorted.
    """
    n, t1 = dataset.obs.shape[0], dataset.obs.shape[1]
    obs = dataset.obs[:, :, seen_ids]  # (n, T+1, S, H*W)
    flat = obs.reshape(-1, dataset.obs_dim)
    feats = np.empty((flat.shape[0], bundle.config.feature_dim), dtype=np.float32)
    for lo in range(0, flat.shape[0], chunk):
        feats[lo:lo + chunk] = models.encode(bundle, flat[lo:lo + chunk])
    return feats.reshape(n, t1, len(seen_ids), bundle.config.feature_dim)


def train_stage2(dataset: Dataset, bundle: ModelBundle, train_cfg: TrainConfig):
    """Latent behavior cloning of the policy onto frozen IDM outputs at the
    fixed maximum offset."""
    train_cfg.validate()
    _check_compat(dataset, train_cfg)
    frozen = {name: models.param_hash(getattr(bundle, name))
              for name in ("encoder", "target_encoder", "idm", "fdm")}

    params = bundle.latent_policy.params
    opt = init_optim(params)
    rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, _STAGE2_STREAM]))
    k = train_cfg.k_max
    usable = dataset.num_trajectories * (dataset.horizon - k + 1)
    steps = _steps_per_epoch(usable, train_cfg.bc_batch)
    seen_ids = dataset.grid.seen_ids()
    cache = _precompute_seen_features(dataset, bundle, seen_ids)
    view_slot = {view: i for i, view in enumerate(seen_ids)}

    history = []
    step = 0
    for _ in range(train_cfg.stage2_epochs()):
        for _ in range(steps):
            trajs, ts, views = _sample_bc_indices(dataset, rng, train_cfg.bc_batch, k, seen_ids)
            slots = np.array([view_slot[v] for v in views])
            s_t = cache[trajs, ts, slots]
            s_tk = cache[trajs, ts + k, slots]
            try:
                loss = objectives.latent_bc_loss(bundle, s_t, s_tk)
                ad.backward(loss)
            except ad.NonFiniteError as err:
                raise TrainingError(f"stage 2 diverged at step {step}: {err}") from err
            grads = _grads_of(params, "stage 2")
            clip_global_norm(grads, train_cfg.grad_clip_norm)
            optimizer_step(params, grads, opt, train_cfg.lr_stage2, train_cfg)
            for p in params:
                p.grad = None
            history.append((step, "latent_bc", float(loss.data)))
            step += 1

    after = {name: models.param_hash(getattr(bundle, name))
             for name in ("encoder", "target_encoder", "idm", "fdm")}
    if after != frozen:
        raise TrainingError("stage 2 modified frozen parameters")
    return history


# ---------------------------------------------------------------------------
# downstream action head

def train_action_head(dataset: Dataset, bundle: ModelBundle, mode: str,
                      train_cfg: TrainConfig):
    """Behavior-clone low-level actions on seen views.

    ``frozen`` updates only the head; ``finetune`` also updates the encoder
    and latent policy at a tenth of the head learning rate."""
    if mode not in ("frozen", "finetune"):
        raise ValueError(f"unknown action-head mode {mode!r}")
    train_cfg.validate()
    _check_compat(dataset, train_cfg)
    frozen_names = ("target_encoder", "idm", "fdm")
    if mode == "frozen":
        frozen_names += ("encoder", "latent_policy")
    frozen = {name: models.param_hash(getattr(bundle, name)) for name in frozen_names}

    groups = [(bundle.action_head.params, train_cfg.lr_head)]
    if mode == "finetune":
        groups.append(
            (bundle.encoder.params + bundle.latent_policy.params, train_cfg.lr_head * 0.1)
        )
    states = [init_optim(params) for params, _ in groups]
    all_params = [p for params, _ in groups for p in params]

    rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, _HEAD_STREAM]))
    usable = dataset.num_trajectories * dataset.horizon
    steps = _steps_per_epoch(usable, train_cfg.bc_batch)
    seen_ids = dataset.grid.seen_ids()
    cache = None
    view_slot = {view: i for i, view in enumerate(seen_ids)}
    if mode == "frozen":
        cache = _precompute_seen_features(dataset, bundle, seen_ids)

    history = []
    step = 0
    for _ in range(train_cfg.head_epochs()):
        for _ in range(steps):
            trajs, ts, views = _sample_bc_indices(dataset, rng, train_cfg.bc_batch, 1, seen_ids)
            actions = dataset.actions[trajs, ts]
            if mode == "finetune":
                obs = _gather_obs(dataset, trajs, ts, views)
                s_t = models.encode(bundle, ad.Tensor(obs))
                z_hat = models.latent_policy(bundle, s_t)
            else:
                slots = np.array([view_slot[v] for v in views])
                s_np = cache[trajs, ts, slots]
                s_t = ad.Tensor(s_np)
                z_hat = ad.Tensor(models.latent_policy(bundle, s_np))
            pred = models.action_head(bundle, s_t, z_hat)
            try:
                loss = objectives.future_prediction_loss(pred, actions)
                ad.backward(loss)
            except ad.NonFiniteError as err:
                raise TrainingError(f"action head diverged at step {step}: {err}") from err
            grads = _grads_of(all_params, "action head")
            clip_global_norm(grads, train_cfg.grad_clip_norm)
            offset = 0
            for (params, lr), state in zip(groups, states):
                optimizer_step(params, grads[offset:offset + len(params)], state, lr, train_cfg)
                offset += len(params)
            for p in all_params:
                p.grad = None
            history.append((step, "action_bc", float(loss.data)))
            step += 1

    after = {name: models.param_hash(getattr(bundle, name)) for name in frozen_names}
    if after != frozen:
        raise TrainingError(f"action head ({mode}) modified frozen parameters")
    return history


# ---------------------------------------------------------------------------
# loss-curve CSV

def write_history(path, history):
    """Append (step, component, value) rows to a CSV, creating the header
    if the file is new."""
    path = Path(path)
    fresh = not path.exists()
    with open(path, "a", encoding="utf-8") as f:
        if fresh:
            f.write("step,component,value\n")
        for step, component, value in history:
            f.write(f"{step},{component},{value!r}\n")
