"""Training objectives for the two-stage pipeline.

Stage 1 combines three terms: a temporal-consistency loss on predicted
future features, a weighted InfoNCE over latent actions whose pair weights
come from ground-truth action-sequence distances, and a structural loss
matching the batch cosine-similarity matrix of latent actions to that of
the flattened GT sequences. Stage 2 is latent behavior cloning. Ablation
variants (standard InfoNCE, RBF-kernel CKA alignment, auxiliary action
regression, soft-DTW distances) live here too.

Conventions, followed literally:
  * weight rows are softmax over the full batch, so the self-pair (zero
    distance) stays in the denominator; a renormalized variant that drops
    it is behind a config flag,
  * the InfoNCE denominator includes the anchor itself for the weighted
    form and excludes it for the standard form,
  * the temporal-consistency and behavior-cloning losses are means over
    the batch of per-sample squared L2 errors; the InfoNCE double sum is
    not batch-normalized.
"""

from __future__ import annotations

import warnings
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import models
from .autodiff import Tensor

_CONTRASTIVE_MODES = ("weighted", "standard", "none")
_STRUCTURAL_MODES = ("cosine", "cka", "none")
_DISTANCE_MODES = ("l2", "softdtw")


@dataclass
class LossConfig:
    lambda1: float = 1.0
    lambda2: float = 1.0
    tau: float = 1.0
    beta: float = 0.001
    renormalize_weights: bool = False
    contrastive: str = "weighted"
    structural: str = "cosine"
    action_reg_lambda: float = 0.0
    distance: str = "l2"
    softdtw_gamma: float = 0.1
    eps: float = 1e-8

    def validate(self):
        if self.tau <= 0:
            raise ValueError("loss config field 'tau' must be > 0")
        if self.beta <= 0:
            raise ValueError("loss config field 'beta' must be > 0")
        if self.lambda1 < 0 or self.lambda2 < 0 or self.action_reg_lambda < 0:
            raise ValueError("loss weights must be >= 0")
        if self.contrastive not in _CONTRASTIVE_MODES:
            raise ValueError(f"unknown contrastive mode {self.contrastive!r}")
        if self.structural not in _STRUCTURAL_MODES:
            raise ValueError(f"unknown structural mode {self.structural!r}")
        if self.distance not in _DISTANCE_MODES:
            raise ValueError(f"unknown distance mode {self.distance!r}")
        if self.softdtw_gamma <= 0:
            raise ValueError("loss config field 'softdtw_gamma' must be > 0")
        return self


@dataclass
class Batch:
    """One stage-1 training batch of B = N*V transitions sharing offset k.

    ``s_t``/``s_tk`` are graph tensors from the online encoder;
    ``s_tk_target`` is a plain array from the target encoder, so it can
    never carry gradient. ``ids`` rows are (trajectory, t, view)."""

    k: int
    s_t: Tensor
    s_tk: Tensor
    s_tk_target: np.ndarray
    gt_actions: np.ndarray
    ids: np.ndarray


@dataclass
class LossBreakdown:
    total: Tensor
    components: dict[str, float] = field(default_factory=dict)
    z: Tensor | None = None


def _const(arr: np.ndarray, like: Tensor) -> Tensor:
    return ad.Tensor(np.asarray(arr, dtype=like.data.dtype))


# ---------------------------------------------------------------------------
# stage-1 components

def future_prediction_loss(pred: Tensor, target) -> Tensor:
    """Mean over the batch of per-row squared L2 prediction error."""
    target = ad.as_tensor(target)
    if pred.data.shape != target.data.shape:
        raise ad.ShapeError(
            f"prediction/target shape mismatch: {pred.data.shape} vs {target.data.shape}"
        )
    return ad.scale(ad.frobenius_sq(pred, target), 1.0 / pred.data.shape[0])


def _latent_action_core(bundle, batch: Batch):
    z = models.idm(bundle, batch.s_t, batch.s_tk)
    pred = models.fdm(bundle, batch.s_t, z)
    la = future_prediction_loss(pred, _const(batch.s_tk_target, pred))
    return la, z


def latent_action_loss(bundle, batch: Batch) -> Tensor:
    """Temporal-consistency loss; gradient reaches the online encoder, the
    IDM and the FDM but never the target encoder."""
    return _latent_action_core(bundle, batch)[0]


def action_distance(a_i: np.ndarray, a_j: np.ndarray) -> float:
    """Squared Frobenius distance between two k x D sequences, over k*D."""
    a_i = np.asarray(a_i, dtype=np.float64)
    a_j = np.asarray(a_j, dtype=np.float64)
    if a_i.shape != a_j.shape:
        raise ad.ShapeError(f"action sequence shape mismatch: {a_i.shape} vs {a_j.shape}")
    return float(np.sum((a_i - a_j) ** 2) / a_i.size)


def action_distance_matrix(gt_actions: np.ndarray) -> np.ndarray:
    """All-pairs normalized squared distances, (B, B) float64."""
    flat = np.asarray(gt_actions, dtype=np.float64).reshape(len(gt_actions), -1)
    diff = flat[:, None, :] - flat[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff) / flat.shape[1]


def action_weights(dmat: np.ndarray, beta: float) -> np.ndarray:
    """Row-stochastic softmax of -d/beta; the zero-distance diagonal stays
    in the normalization."""
    if beta <= 0:
        raise ValueError(f"beta must be > 0, got {beta}")
    dmat = np.asarray(dmat, dtype=np.float64)
    if dmat.ndim != 2 or dmat.shape[0] != dmat.shape[1]:
        raise ad.ShapeError(f"distance matrix must be square, got {dmat.shape}")
    if not np.allclose(np.diag(dmat), 0.0, atol=1e-9):
        raise ValueError("distance matrix must have a zero diagonal")
    if not np.allclose(dmat, dmat.T, atol=1e-9):
        raise ValueError("distance matrix must be symmetric")
    logits = -dmat / beta
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def weighted_infonce(z: Tensor, weights: np.ndarray, tau: float,
                     renormalize: bool = False, eps: float = 1e-8) -> Tensor:
    """Action-weighted contrastive loss over cosine similarities.

    The j != i numerator pairs are weighted by the (constant) action
    weights; every row's denominator runs over all B samples including i.
    """
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    b = z.data.shape[0]
    if b < 2:
        raise ValueError(f"weighted infonce needs a batch of >= 2, got {b}")
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (b, b):
        raise ad.ShapeError(f"weights shape {weights.shape} does not match batch {b}")
    off_diag = weights * (1.0 - np.eye(b))
    if renormalize:
        off_diag = off_diag / off_diag.sum(axis=1, keepdims=True)
    z_hat = ad.l2_normalize(z, eps=eps, axis=1)
    logits = ad.scale(ad.matmul(z_hat, ad.transpose(z_hat)), 1.0 / tau)
    log_probs = ad.sub(logits, ad.logsumexp(logits, axis=1, keepdims=True))
    return ad.scale(ad.reduce_sum(ad.mul(log_probs, _const(off_diag, z))), -1.0)


def _normalize_rows_np(mat: np.ndarray, eps: float) -> np.ndarray:
    norms = np.sqrt(np.sum(mat * mat, axis=1, keepdims=True))
    return mat / np.maximum(norms, eps)


def structural_loss(z: Tensor, gt_actions: np.ndarray, eps: float = 1e-8) -> Tensor:
    """Squared Frobenius gap between the latent-action and GT-action
    cosine-similarity matrices; the GT side is constant."""
    b = z.data.shape[0]
    if b < 2:
        raise ValueError(f"structural loss needs a batch of >= 2, got {b}")
    flat = np.asarray(gt_actions, dtype=np.float64).reshape(b, -1)
    a_hat = _normalize_rows_np(flat, eps)
    s_gt = a_hat @ a_hat.T
    z_hat = ad.l2_normalize(z, eps=eps, axis=1)
    s_z = ad.matmul(z_hat, ad.transpose(z_hat))
    return ad.frobenius_sq(_const(s_gt, z), s_z)


def pairwise_action_distances(gt_actions: np.ndarray, cfg: LossConfig) -> np.ndarray:
    if cfg.distance == "l2":
        return action_distance_matrix(gt_actions)
    sdtw = soft_dtw_divergence_matrix(gt_actions, cfg.softdtw_gamma)
    return sdtw / gt_actions[0].size


def combined_loss(bundle, batch: Batch, cfg: LossConfig, aux_head=None) -> LossBreakdown:
    """Total stage-1 objective with per-term contributions for logging.

    Terms with a zero weight are skipped entirely, so a run with
    lambda1 = lambda2 = 0 produces bit-identical values and gradients to
    the plain temporal-consistency loss. Logged components are the
    weighted contributions, so they sum to the total.
    """
    la, z = _latent_action_core(bundle, batch)
    total = la
    comps = {"la": float(la.data)}

    if cfg.contrastive != "none" and cfg.lambda1 > 0:
        if cfg.contrastive == "weighted":
            dmat = pairwise_action_distances(batch.gt_actions, cfg)
            w = action_weights(dmat, cfg.beta)
            term = weighted_infonce(z, w, cfg.tau, cfg.renormalize_weights, cfg.eps)
        else:
            term = standard_infonce(z, batch.ids, cfg.tau, cfg.eps)
        contrib = ad.scale(term, cfg.lambda1)
        total = ad.add(total, contrib)
        comps["contrastive"] = float(contrib.data)

    if cfg.structural != "none" and cfg.lambda2 > 0:
        if cfg.structural == "cosine":
            term = structural_loss(z, batch.gt_actions, cfg.eps)
        else:
            term = cka_loss(z, batch.gt_actions)
        contrib = ad.scale(term, cfg.lambda2)
        total = ad.add(total, contrib)
        comps["structural"] = float(contrib.data)

    if cfg.action_reg_lambda > 0:
        if aux_head is None:
            raise ValueError("action_reg_lambda > 0 requires an auxiliary head")
        k_d = batch.gt_actions[0].size
        w_full, b_full = aux_head
        term = action_regression_loss(
            z, batch.gt_actions,
            ad.narrow(w_full, 1, 0, k_d), ad.narrow(b_full, 0, 0, k_d),
        )
        contrib = ad.scale(term, cfg.action_reg_lambda)
        total = ad.add(total, contrib)
        comps["action_reg"] = float(contrib.data)

    # Logged total is the 64-bit sum of the logged contributions, so the
    # logging stream is internally consistent to much better than 1e-6.
    comps["total"] = float(sum(comps.values()))
    return LossBreakdown(total=total, components=comps, z=z)


# ---------------------------------------------------------------------------
# stage 2

def latent_bc_loss(bundle, s_t: np.ndarray, s_tk: np.ndarray) -> Tensor:
    """Behavior cloning in latent-action space.

    ``s_t``/``s_tk`` are plain arrays from the frozen encoder; the IDM
    target is computed on the numpy path, so gradients reach only the
    latent policy."""
    target = models.idm(bundle, s_t, s_tk)
    pred = models.latent_policy(bundle, ad.Tensor(s_t))
    return future_prediction_loss(pred, _const(target, pred))


# ---------------------------------------------------------------------------
# ablation losses

def standard_infonce(z: Tensor, ids: np.ndarray, tau: float, eps: float = 1e-8) -> Tensor:
    """InfoNCE with positives from the same transition seen from other
    views; the denominator excludes the anchor itself."""
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    b = z.data.shape[0]
    ids = np.asarray(ids)
    same = (ids[:, None, 0] == ids[None, :, 0]) & (ids[:, None, 1] == ids[None, :, 1])
    positives = same & ~np.eye(b, dtype=bool)
    pos_counts = positives.sum(axis=1)
    anchors = pos_counts > 0
    if not anchors.any():
        raise ValueError("standard infonce needs at least one anchor with a positive")
    if not anchors.all():
        warnings.warn(
            f"{int((~anchors).sum())} anchors have no positive and are excluded",
            stacklevel=2,
        )
    # coeff[i, j] = 1 / (n_anchors * n_positives_i) for each positive pair.
    coeff = np.zeros((b, b), dtype=np.float64)
    coeff[anchors] = positives[anchors] / pos_counts[anchors, None]
    coeff /= anchors.sum()

    z_hat = ad.l2_normalize(z, eps=eps, axis=1)
    logits = ad.scale(ad.matmul(z_hat, ad.transpose(z_hat)), 1.0 / tau)
    # Push the diagonal far down so the anchor drops out of its denominator.
    masked = ad.add(logits, _const(np.eye(b) * -1e30, z))
    log_probs = ad.sub(logits, ad.logsumexp(masked, axis=1, keepdims=True))
    return ad.scale(ad.reduce_sum(ad.mul(log_probs, _const(coeff, z))), -1.0)


def _pairwise_sq_dists(z: Tensor) -> Tensor:
    r = ad.reduce_sum(ad.mul(z, z), axis=1, keepdims=True)
    g = ad.matmul(z, ad.transpose(z))
    return ad.add(ad.sub(r, ad.scale(g, 2.0)), ad.transpose(r))


def _median_offdiag_distance(sq_dists: np.ndarray) -> float:
    b = sq_dists.shape[0]
    off = np.sqrt(np.maximum(sq_dists[~np.eye(b, dtype=bool)], 0.0))
    return float(np.median(off))


def cka_loss(z: Tensor, gt_actions: np.ndarray,
             sigma_z: float | None = None, sigma_a: float | None = None) -> Tensor:
    """1 - CKA between RBF kernels of latent actions and flattened GT
    sequences; bandwidths default to each set's median pairwise distance."""
    b = z.data.shape[0]
    if b < 3:
        raise ValueError(f"cka loss needs a batch of >= 3, got {b}")
    flat = np.asarray(gt_actions, dtype=np.float64).reshape(b, -1)

    dz = _pairwise_sq_dists(z)
    da = ((flat[:, None, :] - flat[None, :, :]) ** 2).sum(axis=2)
    if sigma_z is None:
        sigma_z = _median_offdiag_distance(dz.data)
    if sigma_a is None:
        sigma_a = _median_offdiag_distance(da)
    if sigma_z <= 0 or sigma_a <= 0:
        raise ValueError("cka loss needs inputs with nonzero variance")

    h = np.eye(b) - 1.0 / b
    k_mat = ad.exp(ad.scale(dz, -1.0 / (2.0 * sigma_z**2)))
    l_mat = np.exp(-da / (2.0 * sigma_a**2))
    hlh = h @ l_mat @ h
    norm_l = float(np.sqrt((hlh * hlh).sum()))
    if norm_l == 0.0:
        raise ValueError("cka loss needs inputs with nonzero variance")

    h_const = _const(h, z)
    hkh = ad.matmul(ad.matmul(h_const, k_mat), h_const)
    hsic = ad.reduce_sum(ad.mul(hkh, _const(hlh, z)))
    norm_k = ad.sqrt(ad.clip_min(ad.reduce_sum(ad.mul(hkh, hkh)), 1e-30))
    cka = ad.div(hsic, ad.scale(norm_k, norm_l))
    return ad.sub(_const(np.asarray(1.0), z), cka)


def action_regression_loss(z: Tensor, gt_actions: np.ndarray, head_w, head_b) -> Tensor:
    """MSE of a linear readout from z against the flattened GT sequence."""
    b = z.data.shape[0]
    flat = np.asarray(gt_actions).reshape(b, -1)
    head_w, head_b = ad.as_tensor(head_w), ad.as_tensor(head_b)
    if head_w.data.shape[1] != flat.shape[1]:
        raise ad.ShapeError(
            f"regression head emits {head_w.data.shape[1]} outputs, "
            f"sequences have {flat.shape[1]} entries"
        )
    pred = ad.affine(z, head_w, head_b)
    return ad.mse(pred, _const(flat, z))


# ---------------------------------------------------------------------------
# sequence distances

def dtw_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Classic DTW with squared-Euclidean step cost."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("dtw of an empty sequence")
    m, n = a.shape[0], b.shape[0]
    cost = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    r = np.full((m + 1, n + 1), np.inf)
    r[0, 0] = 0.0
    for i in range(1, m + 1):
        for j in range(1, n + 1):
            r[i, j] = cost[i - 1, j - 1] + min(r[i - 1, j], r[i, j - 1], r[i - 1, j - 1])
    return float(r[m, n])


_SDTW_BIG = 1e30


def _softmin3(a: Tensor, b: Tensor, c: Tensor, gamma: float) -> Tensor:
    v = ad.concat([ad.reshape(a, (1,)), ad.reshape(b, (1,)), ad.reshape(c, (1,))], axis=0)
    return ad.scale(ad.logsumexp(ad.scale(v, -1.0 / gamma), axis=0), -gamma)


def soft_dtw_distance(a, b, gamma: float = 0.1):
    """Soft-DTW: the DTW recurrence with min replaced by softmin_gamma.

    Differentiable when given Tensors; with ndarrays it returns a float.
    """
    if gamma <= 0:
        raise ValueError(f"soft dtw needs gamma > 0, got {gamma}")
    tensor_in = isinstance(a, Tensor) or isinstance(b, Tensor)
    a, b = ad.as_tensor(a), ad.as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ad.ShapeError("soft dtw expects (length, dim) sequences")
    m, n = a.data.shape[0], b.data.shape[0]
    if m == 0 or n == 0:
        raise ValueError("soft dtw of an empty sequence")

    big = ad.Tensor(np.asarray(_SDTW_BIG, dtype=a.data.dtype))
    zero = ad.Tensor(np.asarray(0.0, dtype=a.data.dtype))
    prev = [zero] + [big] * n
    for i in range(m):
        row_i = ad.narrow(a, 0, i, 1)
        cur = [big]
        for j in range(n):
            d = ad.sub(row_i, ad.narrow(b, 0, j, 1))
            cost = ad.reduce_sum(ad.mul(d, d))
            cur.append(ad.add(cost, _softmin3(prev[j + 1], cur[j], prev[j], gamma)))
        prev = cur
    out = prev[n]
    return out if tensor_in else float(out.data)


def soft_dtw_matrix(actions: np.ndarray, gamma: float) -> np.ndarray:
    """All-pairs soft-DTW over a (B, k, D) stack, vectorized over pairs."""
    if gamma <= 0:
        raise ValueError(f"soft dtw needs gamma > 0, got {gamma}")
    acts = np.asarray(actions, dtype=np.float64)
    b, k = acts.shape[0], acts.shape[1]
    # cost[p, q, i, j] = ||a_p[i] - a_q[j]||^2
    diff = acts[:, None, :, None, :] - acts[None, :, None, :, :]
    cost = np.einsum("pqijd,pqijd->pqij", diff, diff)
    r = np.full((b, b, k + 1, k + 1), _SDTW_BIG)
    r[:, :, 0, 0] = 0.0
    for i in range(1, k + 1):
        for j in range(1, k + 1):
            r1, r2, r3 = r[:, :, i - 1, j], r[:, :, i, j - 1], r[:, :, i - 1, j - 1]
            mn = np.minimum(np.minimum(r1, r2), r3)
            softmin = mn - gamma * np.log(
                np.exp(-(r1 - mn) / gamma)
                + np.exp(-(r2 - mn) / gamma)
                + np.exp(-(r3 - mn) / gamma)
            )
            r[:, :, i, j] = cost[:, :, i - 1, j - 1] + softmin
    return r[:, :, k, k]


def soft_dtw_divergence_matrix(actions: np.ndarray, gamma: float) -> np.ndarray:
    """Debiased all-pairs soft-DTW: d(x,y) - (d(x,x) + d(y,y)) / 2.

    Soft-DTW of a sequence with itself is negative, so the raw matrix has
    no zero diagonal; this symmetric form restores it for use as a weight
    distance."""
    raw = soft_dtw_matrix(actions, gamma)
    self_d = np.diag(raw)
    out = raw - 0.5 * (self_d[:, None] + self_d[None, :])
    np.fill_diagonal(out, 0.0)
    return out


# ---------------------------------------------------------------------------
# finite-difference verification of every objective

@contextmanager
def _swapped_params(net, leaves):
    original = net.params
    net.params = list(leaves)
    try:
        yield
    finally:
        net.params = original


def gradient_check_suite(seed: int = 0, batch: int = 8) -> dict[str, float]:
    """Check every training objective against central differences.

    Builds small tanh networks (so the losses stay smooth at the probe
    step) and returns the max relative gradient error per objective; each
    should come out well below 1e-3.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7]))
    feat, latent, d_act, k, seq = 10, 8, 3, 4, 5
    cfg = models.ModelConfig(
        obs_dim=18, feature_dim=feat, latent_dim=latent, idm_hidden=12,
        fdm_hidden=12, encoder_hidden=10, policy_hidden=10, head_hidden=8,
        action_dim=d_act, nonlinearity="tanh",
    )
    bundle = models.init_bundle(cfg, seed)
    n_idm, n_fdm = len(bundle.idm.params), len(bundle.fdm.params)
    n_enc, n_pi = len(bundle.encoder.params), len(bundle.latent_policy.params)

    gt = rng.uniform(-1.0, 1.0, size=(batch, k, d_act))
    ids = np.array([(i // 2, 3 * (i // 2), i % 2) for i in range(batch)], dtype=np.int64)
    obs_t0 = rng.uniform(-1.0, 1.0, size=(batch, cfg.obs_dim))
    obs_tk0 = rng.uniform(-1.0, 1.0, size=(batch, cfg.obs_dim))
    s_t0 = rng.uniform(-1.0, 1.0, size=(batch, feat))
    s_tk0 = rng.uniform(-1.0, 1.0, size=(batch, feat))
    target = rng.uniform(-1.0, 1.0, size=(batch, feat))
    z0 = rng.uniform(-1.0, 1.0, size=(batch, latent))
    results = {}

    def make_batch(s_t, s_tk):
        return Batch(k=k, s_t=s_t, s_tk=s_tk, s_tk_target=target,
                     gt_actions=gt, ids=ids)

    def f_latent_action(s_t, s_tk, *ps):
        with _swapped_params(bundle.idm, ps[:n_idm]), \
             _swapped_params(bundle.fdm, ps[n_idm:]):
            return latent_action_loss(bundle, make_batch(s_t, s_tk))

    net_data = [p.data for p in bundle.idm.params + bundle.fdm.params]
    results["latent_action"] = ad.grad_check(f_latent_action, [s_t0, s_tk0, *net_data])

    w = action_weights(action_distance_matrix(gt), beta=0.25)
    results["weighted_infonce"] = ad.grad_check(
        lambda z: weighted_infonce(z, w, tau=1.0), [z0]
    )
    results["structural"] = ad.grad_check(lambda z: structural_loss(z, gt), [z0])
    results["standard_infonce"] = ad.grad_check(
        lambda z: standard_infonce(z, ids, tau=1.0), [z0]
    )

    combined_cfg = LossConfig(beta=0.25).validate()

    def f_combined(obs_t, obs_tk, *ps):
        with _swapped_params(bundle.encoder, ps[:n_enc]), \
             _swapped_params(bundle.idm, ps[n_enc:n_enc + n_idm]), \
             _swapped_params(bundle.fdm, ps[n_enc + n_idm:]):
            s_t = models.encode(bundle, obs_t)
            s_tk = models.encode(bundle, obs_tk)
            return combined_loss(bundle, make_batch(s_t, s_tk), combined_cfg).total

    net_data = [p.data for p in bundle.encoder.params + bundle.idm.params
                + bundle.fdm.params]
    results["combined"] = ad.grad_check(f_combined, [obs_t0, obs_tk0, *net_data])

    def f_latent_bc(*ps):
        with _swapped_params(bundle.latent_policy, ps):
            return latent_bc_loss(bundle, s_t0, s_tk0)

    results["latent_bc"] = ad.grad_check(
        f_latent_bc, [p.data for p in bundle.latent_policy.params]
    )

    dz0 = _pairwise_sq_dists(ad.Tensor(z0)).data
    da0 = ((gt.reshape(batch, -1)[:, None, :] - gt.reshape(batch, -1)[None, :, :]) ** 2).sum(axis=2)
    sigma_z = _median_offdiag_distance(dz0)
    sigma_a = _median_offdiag_distance(da0)
    results["cka"] = ad.grad_check(
        lambda z: cka_loss(z, gt, sigma_z, sigma_a), [z0]
    )

    bound = np.sqrt(6.0 / (latent + k * d_act))
    head_w0 = rng.uniform(-bound, bound, size=(latent, k * d_act))
    head_b0 = np.zeros(k * d_act)
    results["action_regression"] = ad.grad_check(
        lambda z, hw, hb: action_regression_loss(z, gt, hw, hb), [z0, head_w0, head_b0]
    )

    seq_a0 = rng.uniform(-1.0, 1.0, size=(batch, seq, d_act))
    seq_b0 = rng.uniform(-1.0, 1.0, size=(batch, seq, d_act))

    def f_soft_dtw(a, b):
        total = None
        for i in range(batch):
            a_i = ad.reshape(ad.narrow(a, 0, i, 1), (seq, d_act))
            b_i = ad.reshape(ad.narrow(b, 0, i, 1), (seq, d_act))
            d = soft_dtw_distance(a_i, b_i, gamma=0.1)
            total = d if total is None else ad.add(total, d)
        return ad.scale(total, 1.0 / batch)

    results["soft_dtw"] = ad.grad_check(f_soft_dtw, [seq_a0, seq_b0])
    return results
