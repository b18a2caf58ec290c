"""Synthetic multi-view control world and its on-disk dataset format.

A point agent moves through [-1, 1]^3 toward a fixed target under clamped
additive dynamics. Episodes are demonstrated by a noisy proportional
controller and rendered from a 5x5 grid of cameras (azimuth x elevation
bins around the origin) as low-resolution grayscale images: agent and
target become Gaussian splats under a pinhole projection. Splat width
scales as focal * blob_radius / depth, so apparent size carries the
depth cue a real camera would provide; without it the state would not be
recoverable from a single frame and no single-view policy could act.

Dataset directory layout: ``manifest.json`` plus one ``traj_{i:05}.bin``
per episode. Binary layout: magic ``VILD``, u32 version, u32 T, u32 V,
u32 H, u32 W, u32 D, then little-endian float32 states [(T+1) * 6],
actions [T * D], observations [(T+1) * V * H * W], row-major, time-major.

Everything is deterministic: per-trajectory RNG streams are derived from
(master seed, trajectory index), so parallel and serial generation write
byte-identical files.
"""

from __future__ import annotations

import json
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ACTION_DIM = 3
STATE_FLOATS = 6  # agent xyz + target xyz

DATA_MAGIC = b"VILD"
DATA_VERSION = 1

AZIMUTH_CENTERS = (-72.0, -36.0, 0.0, 36.0, 72.0)
ELEVATION_CENTERS = (-12.0, -6.0, 0.0, 6.0, 12.0)
AZIMUTH_HALF_WIDTH = 18.0
ELEVATION_HALF_WIDTH = 3.0

# Fixed seen/unseen pattern over the (elevation row, azimuth column) grid:
# 10 seen cells covering every azimuth column while leaving contiguous
# unseen regions. pose_id = row * 5 + col.
SEEN_CELLS = frozenset(
    {(0, 0), (0, 2), (0, 4), (1, 1), (1, 3), (2, 0), (2, 4), (3, 2), (4, 1), (4, 3)}
)
SEEN_PATTERN_NAME = "fixed-checker-v1"

# RNG stream tags so the grid and each trajectory draw from disjoint streams.
_GRID_STREAM = 0
_TRAJ_STREAM = 1


def worker_count() -> int:
    """Worker cap from VILA_THREADS (defaults to the CPU count)."""
    raw = os.environ.get("VILA_THREADS", "")
    if raw.strip():
        return max(1, int(raw))
    return os.cpu_count() or 1


@dataclass
class WorldConfig:
    num_trajectories: int = 200
    horizon: int = 60
    image_size: int = 32
    a_max: float = 0.08
    gain: float = 0.25
    noise_scale: float = 0.01  # action noise sigma = noise_scale * a_max
    focal_px: float = 26.0
    # Splat radii in world units; pixel sigma = focal * radius / depth. The
    # target disc is larger and dimmer than the agent peak so the two stay
    # distinguishable when they overlap.
    blob_radius: float = 0.22
    target_radius: float | None = 0.5  # None means same as blob_radius
    agent_intensity: float = 1.0
    target_intensity: float = 0.6
    camera_radius: float = 3.0
    jitter: float = 0.5
    start_range: float = 0.8
    min_start_gap: float = 0.5

    def validate(self):
        if self.num_trajectories <= 0:
            raise ValueError("world config field 'num_trajectories' must be > 0")
        if self.horizon <= 0:
            raise ValueError("world config field 'horizon' must be > 0")
        if self.image_size <= 0:
            raise ValueError("world config field 'image_size' must be > 0")
        for name in ("a_max", "gain", "focal_px", "blob_radius", "camera_radius"):
            if getattr(self, name) <= 0:
                raise ValueError(f"world config field {name!r} must be > 0")
        if self.target_radius is not None and self.target_radius <= 0:
            raise ValueError("world config field 'target_radius' must be > 0")
        if not 0.0 <= self.jitter < 1.0:
            raise ValueError("world config field 'jitter' must be in [0, 1)")
        if not 0.0 < self.start_range <= 1.0:
            raise ValueError("world config field 'start_range' must be in (0, 1]")
        if not 0.0 <= self.min_start_gap < 2.0 * self.start_range:
            raise ValueError(
                "world config field 'min_start_gap' must be in [0, 2 * start_range)"
            )
        return self


@dataclass
class WorldState:
    agent_pos: np.ndarray
    target_pos: np.ndarray
    step_index: int = 0

    def flat(self) -> np.ndarray:
        return np.concatenate([self.agent_pos, self.target_pos]).astype(np.float32)


@dataclass
class CameraPose:
    azimuth_deg: float
    elevation_deg: float
    radius: float
    pose_id: int
    split: str  # "seen" | "unseen"

    def position(self) -> np.ndarray:
        az = np.deg2rad(self.azimuth_deg)
        el = np.deg2rad(self.elevation_deg)
        return self.radius * np.array(
            [np.cos(el) * np.sin(az), np.cos(el) * np.cos(az), np.sin(el)]
        )

    def to_dict(self) -> dict:
        return {
            "azimuth_deg": self.azimuth_deg,
            "elevation_deg": self.elevation_deg,
            "radius": self.radius,
            "pose_id": self.pose_id,
            "split": self.split,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraPose":
        return cls(
            azimuth_deg=float(d["azimuth_deg"]),
            elevation_deg=float(d["elevation_deg"]),
            radius=float(d["radius"]),
            pose_id=int(d["pose_id"]),
            split=str(d["split"]),
        )


@dataclass
class ViewGrid:
    poses: list[CameraPose]

    def seen_ids(self) -> list[int]:
        return [p.pose_id for p in self.poses if p.split == "seen"]

    def unseen_ids(self) -> list[int]:
        return [p.pose_id for p in self.poses if p.split == "unseen"]

    def __len__(self) -> int:
        return len(self.poses)


def make_view_grid(seed: int, jitter: float = 0.5, radius: float = 3.0) -> ViewGrid:
    """25 poses, one per (elevation, azimuth) bin, each jittered by up to
    +/- jitter * half-bin-width around its center."""
    if not 0.0 <= jitter < 1.0:
        raise ValueError(f"jitter must be in [0, 1), got {jitter}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), _GRID_STREAM]))
    poses = []
    for row, el_center in enumerate(ELEVATION_CENTERS):
        for col, az_center in enumerate(AZIMUTH_CENTERS):
            az = az_center + rng.uniform(-1.0, 1.0) * jitter * AZIMUTH_HALF_WIDTH
            el = el_center + rng.uniform(-1.0, 1.0) * jitter * ELEVATION_HALF_WIDTH
            split = "seen" if (row, col) in SEEN_CELLS else "unseen"
            poses.append(CameraPose(az, el, radius, row * 5 + col, split))
    return ViewGrid(poses)


# ---------------------------------------------------------------------------
# rendering

def _camera_basis(pose: CameraPose):
    position = pose.position()
    forward = -position / np.linalg.norm(position)
    world_up = np.array([0.0, 0.0, 1.0])
    right = np.cross(forward, world_up)
    right /= np.linalg.norm(right)
    cam_up = np.cross(right, forward)
    return position, right, cam_up, forward


def render_states(states: np.ndarray, pose: CameraPose, cfg: WorldConfig) -> np.ndarray:
    """Render a (M, 6) stack of states under one pose -> (M, H, W) float32.

    Points behind the camera contribute nothing. This is the single
    rendering code path; datasets, re-render checks and rollouts all go
    through it, which is what makes re-rendering bit-exact.
    """
    if pose.radius <= 0:
        raise ValueError(f"camera radius must be > 0, got {pose.radius}")
    states = np.asarray(states, dtype=np.float64).reshape(-1, STATE_FLOATS)
    size = cfg.image_size
    half = size / 2.0
    position, right, cam_up, forward = _camera_basis(pose)

    img = np.zeros((states.shape[0], size, size))
    cols = np.arange(size, dtype=np.float64)
    rows = np.arange(size, dtype=np.float64)
    target_radius = cfg.blob_radius if cfg.target_radius is None else cfg.target_radius
    splats = (
        (0, cfg.agent_intensity, cfg.blob_radius),
        (3, cfg.target_intensity, target_radius),
    )
    for offset, intensity, radius in splats:
        rel = states[:, offset:offset + 3] - position
        x = rel @ right
        y = rel @ cam_up
        z = rel @ forward
        visible = z > 1e-9
        z_safe = np.where(visible, z, 1.0)
        u0 = half + cfg.focal_px * x / z_safe
        v0 = half - cfg.focal_px * y / z_safe
        sigma = cfg.focal_px * radius / z_safe
        # (M, H, W) squared pixel distances to each splat center.
        du2 = (cols[None, None, :] - u0[:, None, None]) ** 2
        dv2 = (rows[None, :, None] - v0[:, None, None]) ** 2
        blob = intensity * np.exp(-(du2 + dv2) / (2.0 * sigma**2)[:, None, None])
        img += np.where(visible[:, None, None], blob, 0.0)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def render(state: WorldState, pose: CameraPose, cfg: WorldConfig) -> np.ndarray:
    """Render a single state -> (H, W) float32 image in [0, 1]."""
    return render_states(state.flat()[None, :], pose, cfg)[0]


# ---------------------------------------------------------------------------
# dynamics and demonstrations

def dynamics(state: WorldState, action: np.ndarray) -> WorldState:
    delta = np.asarray(action, dtype=np.float32)
    agent = np.clip(state.agent_pos.astype(np.float32) + delta, -1.0, 1.0)
    return WorldState(agent, state.target_pos.copy(), state.step_index + 1)


def scripted_policy(state: WorldState, rng: np.random.Generator, cfg: WorldConfig) -> np.ndarray:
    """Noisy proportional controller toward the target, clamped to the box."""
    gap = state.target_pos.astype(np.float64) - state.agent_pos.astype(np.float64)
    noise = rng.normal(0.0, cfg.noise_scale * cfg.a_max, size=ACTION_DIM)
    delta = (cfg.gain * gap + noise).astype(np.float32)
    a_max = np.float32(cfg.a_max)
    return np.clip(delta, -a_max, a_max)


def sample_start_state(rng: np.random.Generator, cfg: WorldConfig) -> WorldState:
    """Uniform start; the target is redrawn until it sits at least
    min_start_gap away, so episodes never begin already solved."""
    agent = rng.uniform(-cfg.start_range, cfg.start_range, size=3).astype(np.float32)
    while True:
        target = rng.uniform(-cfg.start_range, cfg.start_range, size=3).astype(np.float32)
        if np.linalg.norm(target - agent) >= cfg.min_start_gap:
            return WorldState(agent, target, 0)


def rollout_demo(rng: np.random.Generator, cfg: WorldConfig):
    """One scripted episode -> (states (T+1, 6) f32, actions (T, 3) f32)."""
    state = sample_start_state(rng, cfg)
    states = np.empty((cfg.horizon + 1, STATE_FLOATS), dtype=np.float32)
    actions = np.empty((cfg.horizon, ACTION_DIM), dtype=np.float32)
    states[0] = state.flat()
    for t in range(cfg.horizon):
        actions[t] = scripted_policy(state, rng, cfg)
        state = dynamics(state, actions[t])
        states[t + 1] = state.flat()
    return states, actions


def resimulate(states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Fold dynamics over stored actions from states[0]."""
    state = WorldState(states[0, :3].copy(), states[0, 3:].copy(), 0)
    out = np.empty_like(states)
    out[0] = state.flat()
    for t in range(actions.shape[0]):
        state = dynamics(state, actions[t])
        out[t + 1] = state.flat()
    return out


# ---------------------------------------------------------------------------
# dataset generation and loading

@dataclass
class DatasetManifest:
    num_trajectories: int
    horizon: int
    image_size: int
    action_dim: int
    poses: list[dict]
    seed: int
    format_version: int
    world: dict = field(default_factory=dict)
    seen_pattern: str = SEEN_PATTERN_NAME

    def to_dict(self) -> dict:
        return {
            "num_trajectories": self.num_trajectories,
            "horizon": self.horizon,
            "image_size": self.image_size,
            "action_dim": self.action_dim,
            "poses": self.poses,
            "seed": self.seed,
            "format_version": self.format_version,
            "world": self.world,
            "seen_pattern": self.seen_pattern,
        }


def _traj_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), _TRAJ_STREAM, int(index)]))


def _generate_one(cfg: WorldConfig, seed: int, index: int, grid: ViewGrid):
    rng = _traj_rng(seed, index)
    states, actions = rollout_demo(rng, cfg)
    obs = np.stack(
        [render_states(states, pose, cfg) for pose in grid.poses], axis=1
    )  # (T+1, V, H, W)
    return states, actions, obs


def _traj_path(out_dir: Path, index: int) -> Path:
    return out_dir / f"traj_{index:05}.bin"


def _write_traj(path: Path, cfg: WorldConfig, states, actions, obs):
    header = struct.pack(
        "<4sIIIIII", DATA_MAGIC, DATA_VERSION, cfg.horizon, obs.shape[1],
        cfg.image_size, cfg.image_size, ACTION_DIM,
    )
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(states, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(actions, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(obs, dtype="<f4").tobytes())


def generate_dataset(cfg: WorldConfig, seed: int, out_dir) -> DatasetManifest:
    """Roll out and render every trajectory; write the dataset directory.

    Trajectories may render in parallel (VILA_THREADS workers) but files
    are written serially in index order, so output bytes never depend on
    the worker count.
    """
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    grid = make_view_grid(seed, cfg.jitter, cfg.camera_radius)

    workers = worker_count()
    indices = list(range(cfg.num_trajectories))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        # Chunked so at most ~2 * workers rendered trajectories are alive.
        chunk = max(1, 2 * workers)
        for lo in range(0, len(indices), chunk):
            batch = indices[lo:lo + chunk]
            results = pool.map(lambda i: _generate_one(cfg, seed, i, grid), batch)
            for i, (states, actions, obs) in zip(batch, results):
                _write_traj(_traj_path(out_dir, i), cfg, states, actions, obs)

    manifest = DatasetManifest(
        num_trajectories=cfg.num_trajectories,
        horizon=cfg.horizon,
        image_size=cfg.image_size,
        action_dim=ACTION_DIM,
        poses=[p.to_dict() for p in grid.poses],
        seed=int(seed),
        format_version=DATA_VERSION,
        world={
            "a_max": cfg.a_max,
            "gain": cfg.gain,
            "noise_scale": cfg.noise_scale,
            "focal_px": cfg.focal_px,
            "blob_radius": cfg.blob_radius,
            "target_radius": cfg.target_radius,
            "agent_intensity": cfg.agent_intensity,
            "target_intensity": cfg.target_intensity,
            "camera_radius": cfg.camera_radius,
            "jitter": cfg.jitter,
            "start_range": cfg.start_range,
            "min_start_gap": cfg.min_start_gap,
        },
    )
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest.to_dict(), f, indent=2)
    return manifest


@dataclass
class Dataset:
    manifest: DatasetManifest
    grid: ViewGrid
    states: np.ndarray   # (n, T+1, 6)
    actions: np.ndarray  # (n, T, 3)
    obs: np.ndarray      # (n, T+1, V, H*W)

    @property
    def num_trajectories(self) -> int:
        return self.states.shape[0]

    @property
    def horizon(self) -> int:
        return self.actions.shape[1]

    @property
    def obs_dim(self) -> int:
        return self.obs.shape[3]

    def world_config(self) -> WorldConfig:
        w = self.manifest.world
        return WorldConfig(
            num_trajectories=self.manifest.num_trajectories,
            horizon=self.manifest.horizon,
            image_size=self.manifest.image_size,
            **w,
        ).validate()


def load_dataset(path) -> Dataset:
    path = Path(path)
    with open(path / "manifest.json", encoding="utf-8") as f:
        raw = json.load(f)
    manifest = DatasetManifest(**raw)
    if manifest.format_version != DATA_VERSION:
        raise ValueError(f"unsupported dataset format version {manifest.format_version}")
    grid = ViewGrid([CameraPose.from_dict(d) for d in manifest.poses])
    ids = sorted(p.pose_id for p in grid.poses)
    if ids != list(range(25)) or len(grid.seen_ids()) != 10:
        raise ValueError("manifest poses must be ids 0..24 with 10 seen views")

    n, t, size = manifest.num_trajectories, manifest.horizon, manifest.image_size
    v = len(grid.poses)
    states = np.empty((n, t + 1, STATE_FLOATS), dtype=np.float32)
    actions = np.empty((n, t, ACTION_DIM), dtype=np.float32)
    obs = np.empty((n, t + 1, v, size * size), dtype=np.float32)
    header_len = struct.calcsize("<4sIIIIII")
    for i in range(n):
        blob = _traj_path(path, i).read_bytes()
        magic, version, t_i, v_i, h_i, w_i, d_i = struct.unpack_from("<4sIIIIII", blob)
        if magic != DATA_MAGIC:
            raise ValueError(f"trajectory {i}: bad magic {magic!r}")
        if (version, t_i, v_i, h_i, w_i, d_i) != (DATA_VERSION, t, v, size, size, ACTION_DIM):
            raise ValueError(f"trajectory {i}: header disagrees with manifest")
        flat = np.frombuffer(blob, dtype="<f4", offset=header_len)
        n_state = (t + 1) * STATE_FLOATS
        n_act = t * ACTION_DIM
        n_obs = (t + 1) * v * size * size
        if flat.size != n_state + n_act + n_obs:
            raise ValueError(f"trajectory {i}: payload size mismatch")
        states[i] = flat[:n_state].reshape(t + 1, STATE_FLOATS)
        actions[i] = flat[n_state:n_state + n_act].reshape(t, ACTION_DIM)
        obs[i] = flat[n_state + n_act:].reshape(t + 1, v, size * size)
    return Dataset(manifest, grid, states, actions, obs)
