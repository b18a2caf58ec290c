"""Run configuration: strict JSON parsing over documented defaults.

A config document has five optional sections (world, model, train, loss,
eval); every missing field falls back to its dataclass default, unknown
keys are rejected by name, and the fully resolved config serializes back
to an identical document. Resolution derives the encoder input width from
the image size and mirrors the action box into the model section.
"""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass
from pathlib import Path

from .analysis import EvalConfig
from .models import ModelConfig
from .objectives import LossConfig
from .synthworld import WorldConfig
from .training import TrainConfig

N_SEEN_VIEWS = 10


class ConfigError(ValueError):
    """Config parse or constraint failure; the message names the key."""


_SECTIONS = (
    ("world", WorldConfig),
    ("model", ModelConfig),
    ("train", TrainConfig),
    ("loss", LossConfig),
    ("eval", EvalConfig),
)


def _coerce(value, hint, keypath: str):
    if hint is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif hint is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif hint is bool:
        if isinstance(value, bool):
            return value
    elif hint is str:
        if isinstance(value, str):
            return value
    elif isinstance(hint, types.UnionType) or typing.get_origin(hint) is typing.Union:
        args = typing.get_args(hint)
        if value is None and type(None) in args:
            return None
        for arg in args:
            if arg is type(None):
                continue
            try:
                return _coerce(value, arg, keypath)
            except ConfigError:
                pass
    raise ConfigError(f"config key {keypath!r}: expected {hint}, got {value!r}")


def _build_section(cls, raw: dict, section: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"config section {section!r} must be an object")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"unknown config key {section + '.' + key!r}")
        kwargs[key] = _coerce(value, hints[key], f"{section}.{key}")
    try:
        return cls(**kwargs).validate()
    except ValueError as err:
        raise ConfigError(f"config section {section!r}: {err}") from err


@dataclass
class RunConfig:
    world: WorldConfig
    model: ModelConfig
    train: TrainConfig
    loss: LossConfig
    eval: EvalConfig

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name, _ in _SECTIONS}


def config_from_dict(doc: dict) -> RunConfig:
    """Build and resolve a RunConfig from a parsed JSON document."""
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    for key in doc:
        if key not in {name for name, _ in _SECTIONS}:
            raise ConfigError(f"unknown config key {key!r}")
    parts = {
        name: _build_section(cls, doc.get(name, {}), name) for name, cls in _SECTIONS
    }
    cfg = RunConfig(**parts)
    _resolve(cfg, doc)
    return cfg


def _resolve(cfg: RunConfig, doc: dict):
    obs_dim = cfg.world.image_size * cfg.world.image_size
    model_raw = doc.get("model", {})
    if "obs_dim" in model_raw and model_raw["obs_dim"] != obs_dim:
        raise ConfigError(
            f"config key 'model.obs_dim': {model_raw['obs_dim']} does not match "
            f"image_size^2 = {obs_dim}"
        )
    cfg.model.obs_dim = obs_dim
    if "a_max" in model_raw and float(model_raw["a_max"]) != cfg.world.a_max:
        raise ConfigError(
            "config key 'model.a_max': must match world.a_max "
            f"({model_raw['a_max']} vs {cfg.world.a_max})"
        )
    cfg.model.a_max = cfg.world.a_max
    if cfg.train.k_max >= cfg.world.horizon:
        raise ConfigError(
            f"config key 'train.k_max': must be < world.horizon "
            f"({cfg.train.k_max} vs {cfg.world.horizon})"
        )
    if cfg.train.n_views > N_SEEN_VIEWS:
        raise ConfigError(
            f"config key 'train.n_views': must be <= {N_SEEN_VIEWS} seen views"
        )
    if cfg.eval.action_seq_len > cfg.world.horizon:
        raise ConfigError("config key 'eval.action_seq_len': must be <= world.horizon")


def parse_config(path) -> RunConfig:
    path = Path(path)
    with open(path, encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as err:
            raise ConfigError(f"config file {path}: invalid JSON ({err})") from err
    return config_from_dict(doc)


def package_version() -> str:
    import subprocess

    from . import __version__

    describe = ""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5,
            cwd=Path(__file__).resolve().parent,
        )
        if out.returncode == 0:
            describe = out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return f"vila {__version__}" + (f" ({describe})" if describe else "")


def write_provenance(cfg: RunConfig, out_dir):
    """Echo the resolved config plus a version string into an output dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "resolved_config.json", "w", encoding="utf-8") as f:
        json.dump(cfg.to_dict(), f, indent=2)
    (out_dir / "version.txt").write_text(package_version() + "\n", encoding="utf-8")
