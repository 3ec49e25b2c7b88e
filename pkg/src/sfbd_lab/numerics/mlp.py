"""Preconditioned MLP denoiser ``D(x, t)``.

The network output is wrapped as::

    D(x, t) = c_skip(t) * x + c_out(t) * net(c_in(t) * x, emb(t))

with ``c_skip = 1/(1+t)``, ``c_in = 1/sqrt(1+t)`` and
``c_out = sqrt(t)/sqrt(1+t)``. Under the variance-``t`` kernel this keeps the
network input and target at unit scale for unit-variance data, and at
``t = 0`` it collapses to the identity map for any parameter values.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ContractViolation, ConfigError
from . import autodiff as ad

T_MIN = 1e-4
CHECKPOINT_MAGIC = "SFBD-LAB-CHECKPOINT/1"

_ACTIVATIONS = {"smooth-relu": ad.softplus, "tanh": ad.tanh}


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_widths: tuple = (64, 64)
    activation: str = "smooth-relu"
    time_embedding_dim: int = 16

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.input_dim < 1:
            raise ConfigError("input_dim must be >= 1")
        if any(w < 1 for w in self.hidden_widths):
            raise ConfigError("hidden widths must be >= 1")
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.time_embedding_dim < 0 or self.time_embedding_dim % 2:
            raise ConfigError("time_embedding_dim must be a non-negative even integer")

    def layer_shapes(self):
        dims = [self.input_dim + self.time_embedding_dim, *self.hidden_widths, self.input_dim]
        return [(dims[i], dims[i + 1]) for i in range(len(dims) - 1)]

    @property
    def n_params(self):
        return sum(a * b + b for a, b in self.layer_shapes())


def init_params(spec: MlpSpec, rng: np.random.Generator, out_scale: float = 0.1) -> np.ndarray:
    """Glorot-normal weights and zero biases; the output layer is shrunk by ``out_scale``."""
    chunks = []
    shapes = spec.layer_shapes()
    for i, (fan_in, fan_out) in enumerate(shapes):
        w = rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=(fan_in, fan_out))
        if i == len(shapes) - 1:
            w *= out_scale
        chunks.extend([w.ravel(), np.zeros(fan_out)])
    return np.concatenate(chunks)


def unpack(params, spec: MlpSpec):
    """Split a flat parameter vector (array or Var) into ``[(W, b), ...]``."""
    n = len(params)
    if n != spec.n_params:
        raise ContractViolation(f"expected {spec.n_params} parameters, got {n}")
    layers = []
    offset = 0
    for fan_in, fan_out in spec.layer_shapes():
        w = params[offset : offset + fan_in * fan_out].reshape((fan_in, fan_out))
        offset += fan_in * fan_out
        b = params[offset : offset + fan_out]
        offset += fan_out
        layers.append((w, b))
    return layers


def precond(t):
    """``(c_skip, c_in, c_out)`` for times ``t`` (array)."""
    t = np.asarray(t, dtype=np.float64)
    c_skip = 1.0 / (1.0 + t)
    c_in = 1.0 / np.sqrt(1.0 + t)
    c_out = np.sqrt(t) / np.sqrt(1.0 + t)
    return c_skip, c_in, c_out


def time_embedding(t, dim: int):
    """Sinusoidal features of ``log max(t, T_MIN)``; shape ``(len(t), dim)``."""
    t = np.asarray(t, dtype=np.float64)
    if dim == 0:
        return np.zeros((t.size, 0))
    log_t = np.log(np.maximum(t, T_MIN))[:, None]
    freqs = np.geomspace(0.25, 4.0, dim // 2)[None, :]
    return np.concatenate([np.sin(freqs * log_t), np.cos(freqs * log_t)], axis=1)


def _as_batch(x, t, dim):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dim:
        raise ContractViolation(f"expected points of dimension {dim}, got shape {x.shape}")
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],)).copy()
    if np.any(t < 0):
        raise ContractViolation("denoiser time must be non-negative")
    return x, t, single


def mlp_forward(params, spec: MlpSpec, x, t):
    """Evaluate ``D(x, t)``.

    ``params`` may be a plain array (fast numpy path) or an autodiff ``Var``,
    in which case the result is a ``Var`` on the tape. ``x`` is a point or a
    batch ``(n, d)``; ``t`` a scalar or per-row array.
    """
    xb, tb, single = _as_batch(x, t, spec.input_dim)
    # times in (0, T_MIN) are lifted to T_MIN; t = 0 stays exact so D(., 0) = Id
    tb = np.where(tb > 0, np.maximum(tb, T_MIN), 0.0)
    c_skip, c_in, c_out = precond(tb)
    act = _ACTIVATIONS[spec.activation]
    layers = unpack(params, spec)

    emb = time_embedding(tb, spec.time_embedding_dim)
    h = np.concatenate([c_in[:, None] * xb, emb], axis=1)
    for w, b in layers[:-1]:
        h = act(ad.affine(h, w, b))
    w, b = layers[-1]
    out = ad.affine(h, w, b)
    d = c_skip[:, None] * xb + c_out[:, None] * out
    if single:
        d = d[0]
    return d


@dataclass
class DenoiserModel:
    """Network parameters together with their gradient buffer and EMA shadow."""

    spec: MlpSpec
    params: np.ndarray
    ema: np.ndarray = None
    grad: np.ndarray = None
    ema_decay: float = 0.999
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.ema is None:
            self.ema = self.params.copy()
        if self.grad is None:
            self.grad = np.zeros_like(self.params)

    @classmethod
    def create(cls, spec: MlpSpec, rng, ema_decay=0.999):
        return cls(spec, init_params(spec, rng), ema_decay=ema_decay)

    def __call__(self, x, t, use_ema=False):
        return mlp_forward(self.ema if use_ema else self.params, self.spec, x, t)

    def snapshot(self, use_ema=True):
        """Frozen copy usable as a plain ``D(x, t)`` callable."""
        return FrozenDenoiser(self.spec, (self.ema if use_ema else self.params).copy())

    def copy(self):
        return DenoiserModel(
            self.spec, self.params.copy(), self.ema.copy(), self.grad.copy(),
            self.ema_decay, dict(self.meta),
        )


@dataclass(frozen=True)
class FrozenDenoiser:
    spec: MlpSpec
    params: np.ndarray

    def __call__(self, x, t):
        return mlp_forward(self.params, self.spec, x, t)


def save_checkpoint(model: DenoiserModel, path):
    payload = {
        "magic": CHECKPOINT_MAGIC,
        "spec": asdict(model.spec),
        "ema_decay": model.ema_decay,
        "params": model.params.tolist(),
        "ema": model.ema.tolist(),
        "meta": model.meta,
    }
    Path(path).write_text(json.dumps(payload))


def load_checkpoint(path) -> DenoiserModel:
    payload = json.loads(Path(path).read_text())
    if payload.get("magic") != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path}: not a checkpoint (magic {payload.get('magic')!r})")
    spec = MlpSpec(**payload["spec"])
    model = DenoiserModel(
        spec,
        np.array(payload["params"]),
        np.array(payload["ema"]),
        ema_decay=payload["ema_decay"],
        meta=payload.get("meta", {}),
    )
    if model.params.size != spec.n_params:
        raise ConfigError(f"{path}: parameter count does not match header")
    return model
