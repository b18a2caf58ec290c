"""Representation diagnostics and policy evaluation.

View entropy asks how mixed camera views are among each feature's nearest
neighbors (higher = more view-invariant); action entropy does the same
with k-means labels of 10-step GT action sequences (lower = neighbors
share dynamics). Both use natural logs, so the uniform upper bounds are
ln 25 = 3.219 over views and ln 10 = 2.303 over action clusters.

Rollout evaluation runs the trained policy per camera pose and reports
seen/unseen success means plus their percent ratio. All kernels here are
brute force on purpose: kNN is an exact stable sort over true distances
and k-means is plain seeded Lloyd, so tests can match them against
independent oracles exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import models
from .models import ModelBundle
from .synthworld import CameraPose, Dataset, WorldConfig, WorldState, dynamics, render, sample_start_state

_DUMP_STREAM = 4
_ROLLOUT_STREAM = 5
_MSE_STREAM = 6

_KMEANS_MAX_ITERS = 300


@dataclass
class EvalConfig:
    episodes_per_view: int = 20
    success_threshold: float = 0.05
    dump_per_view: int = 500
    knn_k: int = 50
    kmeans_clusters: int = 10
    action_seq_len: int = 10
    features: str = "latent"  # latent | encoder
    mse_samples: int = 1024
    seed: int = 0

    def validate(self):
        for name in ("episodes_per_view", "dump_per_view", "knn_k",
                     "kmeans_clusters", "action_seq_len", "mse_samples"):
            if getattr(self, name) <= 0:
                raise ValueError(f"eval config field {name!r} must be > 0")
        if self.success_threshold <= 0:
            raise ValueError("eval config field 'success_threshold' must be > 0")
        if self.features not in ("latent", "encoder"):
            raise ValueError(f"unknown feature kind {self.features!r}")
        return self


@dataclass
class FeatureDump:
    features: np.ndarray      # (M, F)
    view_ids: np.ndarray      # (M,)
    action_seqs: np.ndarray   # (M, L*D) flattened GT sequences
    provenance: np.ndarray    # (M, 2) rows of (trajectory, t)
    action_labels: np.ndarray | None = None

    def __len__(self) -> int:
        return self.features.shape[0]


# ---------------------------------------------------------------------------
# kNN and entropies

def _exact_row(feats64: np.ndarray, q: int) -> np.ndarray:
    d = ((feats64 - feats64[q]) ** 2).sum(axis=1)
    d[q] = np.inf
    return d


def _order_by_distance_then_index(d: np.ndarray, idx: np.ndarray, k: int) -> np.ndarray:
    order = np.lexsort((idx, d))[:k]
    return idx[order]


def knn(features: np.ndarray, query_index: int, k: int) -> np.ndarray:
    """Indices of the k nearest neighbors by L2 distance (computed in
    64-bit), self excluded, ties broken toward the smaller index."""
    feats = np.asarray(features, dtype=np.float64)
    m = feats.shape[0]
    if k >= m:
        raise ValueError(f"k={k} must be < number of points {m}")
    d = _exact_row(feats, query_index)
    return _order_by_distance_then_index(d, np.arange(m), k)


def knn_all(features: np.ndarray, k: int, block: int = 256) -> np.ndarray:
    """(M, k) neighbor table; identical semantics to per-query ``knn``.

    Candidates come from Gram-expanded distances (fast); the returned
    ranking always uses exact subtractive distances on the candidate set,
    with a full exact fallback whenever the Gram error bound could reach
    across the selection boundary.
    """
    feats = np.asarray(features, dtype=np.float64)
    m = feats.shape[0]
    if k >= m:
        raise ValueError(f"k={k} must be < number of points {m}")
    sq = np.einsum("ij,ij->i", feats, feats)
    # |approx - exact| is bounded by ~n_dim * eps * 4 * max||x||^2; take a
    # wide safety factor on top.
    tol = 4.0 * feats.shape[1] * np.finfo(np.float64).eps * max(1.0, 4.0 * float(sq.max()))
    pad = min(32, m - 1 - k)
    out = np.empty((m, k), dtype=np.int64)
    for lo in range(0, m, block):
        hi = min(lo + block, m)
        approx = sq[None, :] - 2.0 * (feats[lo:hi] @ feats.T) + sq[lo:hi, None]
        approx[np.arange(hi - lo), np.arange(lo, hi)] = np.inf
        for i in range(hi - lo):
            q = lo + i
            cand = np.argpartition(approx[i], k + pad - 1)[: k + pad]
            d_cand = ((feats[cand] - feats[q]) ** 2).sum(axis=1)
            ordered = _order_by_distance_then_index(d_cand, cand, k + pad)
            kth = ((feats[ordered[k - 1]] - feats[q]) ** 2).sum()
            boundary = float(approx[i][cand].max())
            if kth < boundary - tol:
                out[q] = ordered[:k]
            else:
                out[q] = _order_by_distance_then_index(
                    _exact_row(feats, q), np.arange(m), k
                )
    return out


def _mean_neighbor_entropy(neighbor_labels: np.ndarray, query_mask: np.ndarray) -> float:
    """Mean Shannon entropy (nats) of neighbor-label histograms."""
    if not query_mask.any():
        raise ValueError("entropy restriction selects no features")
    rows = neighbor_labels[query_mask]
    n, k = rows.shape
    n_labels = int(rows.max()) + 1
    flat = rows + np.arange(n)[:, None] * n_labels
    counts = np.bincount(flat.ravel(), minlength=n * n_labels).reshape(n, n_labels)
    p = counts / k
    ent = -np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0).sum(axis=1)
    return float(ent.mean())


def view_entropy(dump: FeatureDump, seen_ids, k: int = 50, restrict: str = "all",
                 neighbors: np.ndarray | None = None,
                 restrict_candidates: bool = False) -> float:
    """Mean entropy of neighbor view IDs over queries whose own view falls
    in ``restrict``.

    By default candidates span the whole dump and only the query set is
    restricted; ``restrict_candidates=True`` additionally limits the
    neighbor search to the restriction set itself (the alternative reading
    of seen/unseen entropies)."""
    if restrict not in ("seen", "unseen", "all"):
        raise ValueError(f"unknown restriction {restrict!r}")
    if restrict == "all":
        mask = np.ones(len(dump), dtype=bool)
    else:
        in_seen = np.isin(dump.view_ids, np.asarray(list(seen_ids)))
        mask = in_seen if restrict == "seen" else ~in_seen
    if restrict_candidates and restrict != "all":
        subset = np.flatnonzero(mask)
        sub_neighbors = knn_all(dump.features[subset], k)
        neighbor_views = dump.view_ids[subset][sub_neighbors]
        return _mean_neighbor_entropy(neighbor_views,
                                      np.ones(len(subset), dtype=bool))
    if neighbors is None:
        neighbors = knn_all(dump.features, k)
    return _mean_neighbor_entropy(dump.view_ids[neighbors], mask)


def action_entropy(dump: FeatureDump, k: int = 50,
                   neighbors: np.ndarray | None = None) -> float:
    if dump.action_labels is None:
        raise ValueError("dump has no action labels; run kmeans first")
    if neighbors is None:
        neighbors = knn_all(dump.features, k)
    return _mean_neighbor_entropy(dump.action_labels[neighbors],
                                  np.ones(len(dump), dtype=bool))


# ---------------------------------------------------------------------------
# k-means

def kmeans(points: np.ndarray, n_clusters: int, seed: int):
    """Seeded k-means++ followed by Lloyd iterations to an assignment
    fixpoint (or 300 iterations); empty clusters re-seed to the point
    farthest from its assigned centroid. Returns (labels, centroids)."""
    x = np.asarray(points, dtype=np.float64)
    m = x.shape[0]
    if m < n_clusters:
        raise ValueError(f"kmeans needs >= {n_clusters} points, got {m}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed)]))

    # k-means++ seeding
    centroids = np.empty((n_clusters, x.shape[1]))
    chosen = [int(rng.integers(m))]
    centroids[0] = x[chosen[0]]
    d2 = ((x - centroids[0]) ** 2).sum(axis=1)
    for c in range(1, n_clusters):
        total = d2.sum()
        if total <= 0:
            # Fewer distinct points than clusters; fall back to the
            # smallest unchosen index (duplicate centroids are fine).
            pick = next(i for i in range(m) if i not in chosen)
        else:
            pick = int(rng.choice(m, p=d2 / total))
        chosen.append(pick)
        centroids[c] = x[pick]
        d2 = np.minimum(d2, ((x - centroids[c]) ** 2).sum(axis=1))

    labels = np.full(m, -1, dtype=np.int64)
    for _ in range(_KMEANS_MAX_ITERS):
        dists = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_labels = np.argmin(dists, axis=1)
        member_d2 = dists[np.arange(m), new_labels]
        for c in range(n_clusters):
            if not (new_labels == c).any():
                far = int(np.argmax(member_d2))
                centroids[c] = x[far]
                new_labels[far] = c
                member_d2[far] = 0.0
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for c in range(n_clusters):
            centroids[c] = x[labels == c].mean(axis=0)
    return labels, centroids


def inertia(points: np.ndarray, labels: np.ndarray, centroids: np.ndarray) -> float:
    x = np.asarray(points, dtype=np.float64)
    return float(((x - centroids[labels]) ** 2).sum())


# ---------------------------------------------------------------------------
# feature dumps

def _policy_features(bundle: ModelBundle, obs: np.ndarray, kind: str) -> np.ndarray:
    s = models.encode(bundle, obs)
    if kind == "encoder":
        return s
    return models.latent_policy(bundle, s)


def collect_feature_dump(dataset: Dataset, bundle: ModelBundle, cfg: EvalConfig) -> FeatureDump:
    """Sample ``dump_per_view`` transitions per view, featurize them, and
    label each with the k-means cluster of its 10-step GT sequence."""
    cfg.validate()
    seq_len = cfg.action_seq_len
    if seq_len > dataset.horizon:
        raise ValueError(f"action_seq_len {seq_len} exceeds horizon {dataset.horizon}")
    feats, views, seqs, prov = [], [], [], []
    for pose in dataset.grid.poses:
        rng = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, _DUMP_STREAM, pose.pose_id])
        )
        trajs = rng.integers(0, dataset.num_trajectories, size=cfg.dump_per_view)
        ts = rng.integers(0, dataset.horizon - seq_len + 1, size=cfg.dump_per_view)
        obs = dataset.obs[trajs, ts, pose.pose_id]
        feats.append(_policy_features(bundle, obs, cfg.features))
        views.append(np.full(cfg.dump_per_view, pose.pose_id, dtype=np.int64))
        steps = ts[:, None] + np.arange(seq_len)[None, :]
        seqs.append(dataset.actions[trajs[:, None], steps].reshape(cfg.dump_per_view, -1))
        prov.append(np.stack([trajs, ts], axis=1))
    dump = FeatureDump(
        features=np.concatenate(feats, axis=0),
        view_ids=np.concatenate(views),
        action_seqs=np.concatenate(seqs, axis=0).astype(np.float64),
        provenance=np.concatenate(prov, axis=0),
    )
    labels, _ = kmeans(dump.action_seqs, cfg.kmeans_clusters, cfg.seed)
    dump.action_labels = labels
    return dump


# ---------------------------------------------------------------------------
# rollouts and reports

def rollout_success(bundle: ModelBundle, world_cfg: WorldConfig, pose: CameraPose,
                    episodes: int, threshold: float, seed: int,
                    action_fn=None) -> float:
    """Fraction of seeded episodes where the policy reaches the target
    within the horizon.

    ``action_fn(state, obs) -> action`` substitutes for the learned policy
    when given (used to sanity-check against oracle and random
    controllers)."""
    hits = 0
    for ep in range(episodes):
        rng = np.random.default_rng(
            np.random.SeedSequence([int(seed), _ROLLOUT_STREAM, pose.pose_id, ep])
        )
        state = sample_start_state(rng, world_cfg)
        for _ in range(world_cfg.horizon):
            obs = render(state, pose, world_cfg).reshape(1, -1)
            if action_fn is not None:
                act = np.asarray(action_fn(state, obs), dtype=np.float32)
            else:
                s = models.encode(bundle, obs)
                z_hat = models.latent_policy(bundle, s)
                act = models.action_head(bundle, s, z_hat)[0]
            state = dynamics(state, act)
            if np.linalg.norm(state.agent_pos - state.target_pos) < threshold:
                hits += 1
                break
    return hits / episodes


def action_mse(dataset: Dataset, bundle: ModelBundle, view_ids, samples: int,
               seed: int, stream_tag: int = 0) -> float:
    """Mean squared error of predicted vs GT actions on the given views."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), _MSE_STREAM, stream_tag]))
    trajs = rng.integers(0, dataset.num_trajectories, size=samples)
    ts = rng.integers(0, dataset.horizon, size=samples)
    views = rng.choice(np.asarray(list(view_ids)), size=samples, replace=True)
    obs = dataset.obs[trajs, ts, views]
    s = models.encode(bundle, obs)
    pred = models.action_head(bundle, s, models.latent_policy(bundle, s))
    gt = dataset.actions[trajs, ts]
    return float(np.mean((pred.astype(np.float64) - gt.astype(np.float64)) ** 2))


@dataclass
class MetricsReport:
    view_entropy_seen: float
    view_entropy_unseen: float
    action_entropy: float
    per_view_success: list[dict]
    seen_mean: float
    unseen_mean: float
    rel_percent: float | None
    action_mse_seen: float
    action_mse_unseen: float
    success_threshold: float
    horizon: int
    episodes_per_view: int
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "view_entropy_seen": self.view_entropy_seen,
            "view_entropy_unseen": self.view_entropy_unseen,
            "action_entropy": self.action_entropy,
            "per_view_success": self.per_view_success,
            "seen_mean": self.seen_mean,
            "unseen_mean": self.unseen_mean,
            "rel_percent": self.rel_percent,
            "action_mse_seen": self.action_mse_seen,
            "action_mse_unseen": self.action_mse_unseen,
            "success_threshold": self.success_threshold,
            "horizon": self.horizon,
            "episodes_per_view": self.episodes_per_view,
            "extras": self.extras,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**d)


def rel_ratio(seen_mean: float, unseen_mean: float) -> float | None:
    """100 * unseen / seen, or None when the seen mean is zero."""
    if seen_mean <= 0:
        return None
    return 100.0 * unseen_mean / seen_mean


def compute_entropies(dataset: Dataset, bundle: ModelBundle, cfg: EvalConfig):
    dump = collect_feature_dump(dataset, bundle, cfg)
    seen = dataset.grid.seen_ids()
    neighbors = knn_all(dump.features, cfg.knn_k)
    return {
        "view_entropy_seen": view_entropy(dump, seen, cfg.knn_k, "seen", neighbors),
        "view_entropy_unseen": view_entropy(dump, seen, cfg.knn_k, "unseen", neighbors),
        "action_entropy": action_entropy(dump, cfg.knn_k, neighbors),
    }


def evaluate_views(dataset: Dataset, bundle: ModelBundle, cfg: EvalConfig) -> MetricsReport:
    """Per-pose rollout success, seen/unseen means and ratio, BC errors,
    and fresh-dump entropies."""
    cfg.validate()
    world = dataset.world_config()
    per_view = []
    rates = {}
    for pose in dataset.grid.poses:
        rate = rollout_success(bundle, world, pose, cfg.episodes_per_view,
                               cfg.success_threshold, cfg.seed)
        rates[pose.pose_id] = rate
        per_view.append({"view_id": pose.pose_id, "split": pose.split, "success_rate": rate})
    seen_ids = dataset.grid.seen_ids()
    unseen_ids = dataset.grid.unseen_ids()
    seen_mean = float(np.mean([rates[i] for i in seen_ids]))
    unseen_mean = float(np.mean([rates[i] for i in unseen_ids]))
    entropies = compute_entropies(dataset, bundle, cfg)
    return MetricsReport(
        view_entropy_seen=entropies["view_entropy_seen"],
        view_entropy_unseen=entropies["view_entropy_unseen"],
        action_entropy=entropies["action_entropy"],
        per_view_success=per_view,
        seen_mean=seen_mean,
        unseen_mean=unseen_mean,
        rel_percent=rel_ratio(seen_mean, unseen_mean),
        action_mse_seen=action_mse(dataset, bundle, seen_ids, cfg.mse_samples, cfg.seed, 0),
        action_mse_unseen=action_mse(dataset, bundle, unseen_ids, cfg.mse_samples, cfg.seed, 1),
        success_threshold=cfg.success_threshold,
        horizon=dataset.horizon,
        episodes_per_view=cfg.episodes_per_view,
    )


def save_report(report: MetricsReport, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report.to_dict(), f, indent=2)


def load_report(path) -> MetricsReport:
    with open(path, encoding="utf-8") as f:
        return MetricsReport.from_dict(json.load(f))


def report_csv(report: MetricsReport, path):
    """CSV twin of the JSON report: metric,view_id,value rows."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("metric,view_id,value\n")
        for row in report.per_view_success:
            f.write(f"success_rate,{row['view_id']},{row['success_rate']!r}\n")
        for name in ("view_entropy_seen", "view_entropy_unseen", "action_entropy",
                     "seen_mean", "unseen_mean", "rel_percent",
                     "action_mse_seen", "action_mse_unseen"):
            value = getattr(report, name)
            f.write(f"{name},,{'' if value is None else repr(value)}\n")


# ---------------------------------------------------------------------------
# 2-D projection export

def pca2_export(dump: FeatureDump, seed: int = 0, iters: int = 500,
                tol: float = 1e-12) -> np.ndarray:
    """Top-2 principal-component coordinates via seeded power iteration on
    the centered covariance."""
    x = dump.features.astype(np.float64)
    m = x.shape[0]
    if m < 2:
        raise ValueError("pca export needs at least 2 features")
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / (m - 1)
    if not (np.diag(cov) > 0).any():
        raise ValueError("pca export needs nonzero variance")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed)]))
    comps = []
    work = cov.copy()
    for _ in range(2):
        v = rng.normal(size=cov.shape[0])
        v = _orthonormalize(v, comps)
        for _ in range(iters):
            nxt = _orthonormalize(work @ v, comps)
            if nxt is None:
                # Deflated matrix is rank-deficient; any unit vector
                # orthogonal to earlier components carries zero variance.
                nxt = _deterministic_orthogonal(comps, cov.shape[0])
                v = nxt
                break
            if np.abs(nxt - v).max() < tol:
                v = nxt
                break
            v = nxt
        # Deterministic sign: largest-magnitude coordinate positive.
        pivot = int(np.argmax(np.abs(v)))
        if v[pivot] < 0:
            v = -v
        lam = float(v @ work @ v)
        comps.append(v)
        work = work - lam * np.outer(v, v)
    return xc @ np.stack(comps, axis=1)


def _orthonormalize(v: np.ndarray, comps) -> np.ndarray | None:
    for c in comps:
        v = v - (v @ c) * c
    norm = np.linalg.norm(v)
    if norm < 1e-12:
        return None
    return v / norm


def _deterministic_orthogonal(comps, dim: int) -> np.ndarray:
    for i in range(dim):
        e = np.zeros(dim)
        e[i] = 1.0
        out = _orthonormalize(e, comps)
        if out is not None:
            return out
    raise ValueError("no orthogonal direction available")
