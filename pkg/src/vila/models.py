"""Network definitions and parameter management.

Six MLPs share one parameter bundle: the online encoder, its EMA target
copy, the inverse and forward dynamics heads, the latent policy, and the
downstream action head. Every forward accepts either a graph ``Tensor``
(training path) or a plain ndarray (inference path); both run the exact
same numpy arithmetic, so the two paths agree bit for bit.

Parameter counts per network (h = hidden width):
  encoder        obs*h + h + h*h + h + h*feat + feat
  idm            2*feat*h + h + h*latent + latent
  fdm            (feat+latent)*h + h + h*feat + feat
  latent_policy  feat*h + h + h*h + h + h*latent + latent
  action_head    (feat+latent)*h + h + h*action + action
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

CHECKPOINT_MAGIC = b"VILM"
CHECKPOINT_VERSION = 1

# Serialization order of the networks inside a checkpoint.
NET_NAMES = ("encoder", "target_encoder", "idm", "fdm", "latent_policy", "action_head")

_NONLINEARITIES = {"relu": ad.relu, "tanh": ad.tanh}
_NONLINEARITIES_NP = {"relu": lambda x: np.maximum(x, 0), "tanh": np.tanh}


@dataclass
class ModelConfig:
    obs_dim: int = 1024
    feature_dim: int = 128
    latent_dim: int = 128
    idm_hidden: int = 1024
    fdm_hidden: int = 1024
    encoder_hidden: int = 256
    policy_hidden: int = 256
    head_hidden: int = 256
    action_dim: int = 3
    a_max: float = 0.08
    nonlinearity: str = "relu"

    def validate(self):
        for f in dataclasses.fields(self):
            if f.name in ("a_max", "nonlinearity"):
                continue
            if getattr(self, f.name) <= 0:
                raise ValueError(f"model config field {f.name!r} must be > 0")
        if self.a_max <= 0:
            raise ValueError("model config field 'a_max' must be > 0")
        if self.nonlinearity not in _NONLINEARITIES:
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")
        return self


class Mlp:
    """Fully connected stack with a linear output layer.

    Weights are Glorot-uniform, biases zero. Parameters are stored as
    float32 Tensors in [W0, b0, W1, b1, ...] order.
    """

    def __init__(self, dims, nonlinearity: str, rng: np.random.Generator | None,
                 trainable: bool = True):
        self.dims = tuple(int(d) for d in dims)
        self.nonlinearity = nonlinearity
        self.params: list[ad.Tensor] = []
        for fan_in, fan_out in zip(self.dims[:-1], self.dims[1:]):
            if rng is None:
                w = np.zeros((fan_in, fan_out), dtype=np.float32)
            else:
                bound = np.sqrt(6.0 / (fan_in + fan_out))
                w = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(np.float32)
            b = np.zeros(fan_out, dtype=np.float32)
            self.params.append(ad.Tensor(w, requires_grad=trainable))
            self.params.append(ad.Tensor(b, requires_grad=trainable))

    def apply(self, x: ad.Tensor) -> ad.Tensor:
        if x.data.ndim != 2 or x.data.shape[1] != self.dims[0]:
            raise ad.ShapeError(
                f"mlp expects input (B, {self.dims[0]}), got shape {x.data.shape}"
            )
        act = _NONLINEARITIES[self.nonlinearity]
        h = x
        n_layers = len(self.dims) - 1
        for i in range(n_layers):
            h = ad.affine(h, self.params[2 * i], self.params[2 * i + 1])
            if i < n_layers - 1:
                h = act(h)
        return h

    def forward_np(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.dims[0]:
            raise ad.ShapeError(
                f"mlp expects input (B, {self.dims[0]}), got shape {x.shape}"
            )
        act = _NONLINEARITIES_NP[self.nonlinearity]
        h = x
        n_layers = len(self.dims) - 1
        for i in range(n_layers):
            h = h @ self.params[2 * i].data + self.params[2 * i + 1].data
            if i < n_layers - 1:
                h = act(h)
        return h

    def copy_from(self, other: "Mlp"):
        for mine, theirs in zip(self.params, other.params):
            np.copyto(mine.data, theirs.data)

    def num_params(self) -> int:
        return sum(p.data.size for p in self.params)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


@dataclass
class ModelBundle:
    config: ModelConfig
    encoder: Mlp
    target_encoder: Mlp
    idm: Mlp
    fdm: Mlp
    latent_policy: Mlp
    action_head: Mlp

    def nets(self) -> dict[str, Mlp]:
        return {name: getattr(self, name) for name in NET_NAMES}


def _net_dims(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    return {
        "encoder": (cfg.obs_dim, cfg.encoder_hidden, cfg.encoder_hidden, cfg.feature_dim),
        "target_encoder": (cfg.obs_dim, cfg.encoder_hidden, cfg.encoder_hidden, cfg.feature_dim),
        "idm": (2 * cfg.feature_dim, cfg.idm_hidden, cfg.latent_dim),
        "fdm": (cfg.feature_dim + cfg.latent_dim, cfg.fdm_hidden, cfg.feature_dim),
        "latent_policy": (cfg.feature_dim, cfg.policy_hidden, cfg.policy_hidden, cfg.latent_dim),
        "action_head": (cfg.feature_dim + cfg.latent_dim, cfg.head_hidden, cfg.action_dim),
    }


def init_bundle(config: ModelConfig, seed: int) -> ModelBundle:
    """Seeded Glorot-uniform bundle; the target encoder starts as an exact
    copy of the online encoder and never receives gradients."""
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed)]))
    dims = _net_dims(config)
    encoder = Mlp(dims["encoder"], config.nonlinearity, rng)
    idm = Mlp(dims["idm"], config.nonlinearity, rng)
    fdm = Mlp(dims["fdm"], config.nonlinearity, rng)
    latent_policy = Mlp(dims["latent_policy"], config.nonlinearity, rng)
    action_head = Mlp(dims["action_head"], config.nonlinearity, rng)
    target_encoder = Mlp(dims["target_encoder"], config.nonlinearity, None, trainable=False)
    target_encoder.copy_from(encoder)
    return ModelBundle(config, encoder, target_encoder, idm, fdm, latent_policy, action_head)


def parameter_counts(config: ModelConfig) -> dict[str, int]:
    counts = {}
    for name, dims in _net_dims(config).items():
        counts[name] = sum(i * o + o for i, o in zip(dims[:-1], dims[1:]))
    return counts


def _joint(a, b):
    """Concat two batch inputs, promoting ndarrays to constants if needed."""
    if isinstance(a, ad.Tensor) or isinstance(b, ad.Tensor):
        return ad.concat([ad.as_tensor(a), ad.as_tensor(b)], axis=1)
    return np.concatenate([a, b], axis=1)


def _run(net: Mlp, x):
    if isinstance(x, ad.Tensor):
        return net.apply(x)
    return net.forward_np(x)


def encode(bundle: ModelBundle, obs):
    """Online encoder: flattened image batch (B, obs_dim) -> features."""
    return _run(bundle.encoder, obs)


def encode_target(bundle: ModelBundle, obs: np.ndarray) -> np.ndarray:
    """Target encoder; plain ndarray in/out, so no gradient path exists."""
    return bundle.target_encoder.forward_np(np.asarray(obs))


def idm(bundle: ModelBundle, s_t, s_tk):
    """Latent action from the features of a transition's two endpoints."""
    return _run(bundle.idm, _joint(s_t, s_tk))


def fdm(bundle: ModelBundle, s_t, z):
    """Predicted future feature from current feature and latent action."""
    return _run(bundle.fdm, _joint(s_t, z))


def latent_policy(bundle: ModelBundle, s_t):
    """Predicted latent action from the current feature alone."""
    return _run(bundle.latent_policy, s_t)


def action_head(bundle: ModelBundle, s_t, z_hat):
    """Low-level action prediction, tanh-squashed into the action box."""
    out = _run(bundle.action_head, _joint(s_t, z_hat))
    if isinstance(out, ad.Tensor):
        return ad.scale(ad.tanh(out), bundle.config.a_max)
    return bundle.config.a_max * np.tanh(out)


def ema_update(bundle: ModelBundle, coef: float):
    """target <- (1 - coef) * target + coef * online, elementwise."""
    coef = float(coef)
    if not 0.0 <= coef <= 1.0:
        raise ValueError(f"ema coefficient must be in [0, 1], got {coef}")
    for tgt, online in zip(bundle.target_encoder.params, bundle.encoder.params):
        np.copyto(tgt.data, tgt.data * (1.0 - coef) + online.data * coef)


def param_hash(net: Mlp) -> str:
    h = hashlib.sha256()
    for p in net.params:
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def bundle_hashes(bundle: ModelBundle) -> dict[str, str]:
    return {name: param_hash(net) for name, net in bundle.nets().items()}


# ---------------------------------------------------------------------------
# checkpoint format: magic, u32 version, u32 json length, config json,
# then per-network float32 little-endian parameter blobs in NET_NAMES order.

def save_checkpoint(bundle: ModelBundle, path):
    cfg_bytes = json.dumps(dataclasses.asdict(bundle.config), sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(cfg_bytes)))
        f.write(cfg_bytes)
        for name in NET_NAMES:
            for p in getattr(bundle, name).params:
                f.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_checkpoint(path) -> ModelBundle:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"not a checkpoint file: bad magic {blob[:4]!r}")
    version, cfg_len = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    cfg = ModelConfig(**json.loads(blob[12:12 + cfg_len].decode("utf-8"))).validate()
    bundle = init_bundle(cfg, seed=0)
    offset = 12 + cfg_len
    for name in NET_NAMES:
        net = getattr(bundle, name)
        for p in net.params:
            n = p.data.size
            arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset)
            np.copyto(p.data, arr.reshape(p.data.shape))
            offset += 4 * n
    if offset != len(blob):
        raise ValueError(f"checkpoint has {len(blob) - offset} trailing bytes")
    return bundle
