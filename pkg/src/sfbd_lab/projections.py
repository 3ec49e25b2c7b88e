"""Sample pools, the model-fitting projection and the partial pool refresh."""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diffusion import DiffusionSchedule, SolverConfig, make_denoise_fn
from .errors import ConfigError, ContractViolation, DivergedTrajectoryError, NumericError
from .losses import Batch, denoising_loss
from .numerics import autodiff as ad
from .numerics.mlp import DenoiserModel
from .numerics.optim import OptimizerState, ema_update, optimizer_step

POOL_MAGIC = "SFBD-LAB-POOL/1"
SELECTIONS = ("uniform", "round-robin")


def _points(x, name):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ContractViolation(f"{name} must be a (n, d) array, got shape {x.shape}")
    return x


class SamplePool:
    """Clean points, noisy points and the denoised counterparts of the noisy ones.

    ``denoised[i]`` is always the latest denoising of ``noisy[i]``. Writers
    replace whole batches under a lock and never mutate an array a reader
    may hold: :meth:`snapshot` returns the current array, and every update
    installs a fresh copy.
    """

    def __init__(self, clean, noisy, tau, selection="uniform", denoised=None):
        self.clean = _points(clean, "clean") if clean is not None and len(clean) else None
        self.noisy = _points(noisy, "noisy")
        if self.noisy.shape[0] == 0:
            raise ContractViolation("the noisy set must be nonempty")
        if self.clean is not None and self.clean.shape[1] != self.noisy.shape[1]:
            raise ContractViolation("clean and noisy points differ in dimension")
        if not tau > 0:
            raise ContractViolation(f"tau must be positive, got {tau}")
        if selection not in SELECTIONS:
            raise ConfigError(f"unknown selection rule {selection!r}")
        self.noisy.flags.writeable = False
        self.tau = float(tau)
        self.selection = selection
        self.replaced_count = 0
        self.refresh_counts = np.zeros(self.n_noisy, dtype=np.int64)
        self.denoiser_tags = set()
        self._cursor = 0
        self._lock = threading.Lock()
        self._denoised = None
        if denoised is not None:
            denoised = _points(denoised, "denoised")
            if denoised.shape != self.noisy.shape:
                raise ContractViolation("denoised entries must pair 1:1 with noisy entries")
            self._install(denoised.copy())

    @property
    def dim(self):
        return self.noisy.shape[1]

    @property
    def n_noisy(self):
        return self.noisy.shape[0]

    @property
    def n_clean(self):
        return 0 if self.clean is None else self.clean.shape[0]

    @property
    def initialized(self):
        return self._denoised is not None

    @property
    def denoised(self):
        return self._denoised

    def _install(self, arr):
        arr.flags.writeable = False
        self._denoised = arr

    def snapshot(self):
        """The current denoised array (read-only; later updates do not touch it)."""
        with self._lock:
            return self._denoised

    def select(self, count, rng):
        """Indices to refresh: uniform without replacement, or the next block in order."""
        if self.selection == "uniform":
            return np.sort(rng.choice(self.n_noisy, size=count, replace=False))
        idx = (self._cursor + np.arange(count)) % self.n_noisy
        self._cursor = int((self._cursor + count) % self.n_noisy)
        return idx

    def replace(self, idx, values, tag=None):
        """Atomically install ``values`` as the denoised entries at ``idx``."""
        values = _points(values, "values")
        if values.shape != (len(idx), self.dim):
            raise ContractViolation(f"replacement has shape {values.shape}, expected {(len(idx), self.dim)}")
        with self._lock:
            base = self._denoised if self._denoised is not None else np.full(self.noisy.shape, np.nan)
            new = base.copy()
            new[idx] = values
            self._install(new)
            self.replaced_count += len(idx)
            np.add.at(self.refresh_counts, idx, 1)
            if tag is not None:
                self.denoiser_tags.add(tag)

    def initialize(self, denoise_fn, rng):
        """Denoise every noisy point once."""
        idx = np.arange(self.n_noisy)
        self.replace(idx, _denoise_indexed(denoise_fn, self.noisy, idx, rng), getattr(denoise_fn, "tag", None))
        return self


def _denoise_indexed(denoise_fn, noisy, idx, rng):
    try:
        out = denoise_fn(noisy[idx], rng)
    except DivergedTrajectoryError as err:
        pool_index = int(idx[err.index]) if err.index is not None else None
        raise DivergedTrajectoryError(
            f"denoising diverged for pool entry {pool_index} at solver step {err.step}",
            step=err.step,
            index=pool_index,
        ) from err
    return np.asarray(out, dtype=np.float64)


def replacement_count(gamma, n):
    """``ceil(gamma n)``, tolerant of rounding in ``gamma = count / n``."""
    return max(1, math.ceil(gamma * n - 1e-9))


def gamma_pool_update(pool: SamplePool, denoise_fn, gamma, rng):
    """Refresh a ``gamma`` fraction of the denoised entries from their noisy partners."""
    if not 0 < gamma <= 1:
        raise ContractViolation(f"gamma must lie in (0, 1], got {gamma}")
    if not pool.initialized:
        raise ContractViolation("pool must be initialized before a partial update")
    count = replacement_count(gamma, pool.n_noisy)
    idx = pool.select(count, rng)
    values = _denoise_indexed(denoise_fn, pool.noisy, idx, rng)
    pool.replace(idx, values, getattr(denoise_fn, "tag", None))
    return pool


def d_proj_full(pool: SamplePool, denoise_fn, rng):
    """Re-denoise every noisy point (``gamma = 1``)."""
    if not pool.initialized:
        return pool.initialize(denoise_fn, rng)
    return gamma_pool_update(pool, denoise_fn, 1.0, rng)


def ema_denoise_fn(model: DenoiserModel, tau, solver: SolverConfig):
    """Denoiser built from a copy of the model's EMA weights, tagged ``"ema"``."""
    fn = make_denoise_fn(model.snapshot(use_ema=True), tau, solver)
    fn.tag = "ema"
    return fn


@dataclass
class MixTarget:
    """Training target ``alpha * clean + (1 - alpha) * denoised``.

    ``alpha=None`` means the plain union of the two sets, i.e. each point
    (clean or denoised) is equally likely.
    """

    source: SamplePool
    alpha: float | None = None

    def __post_init__(self):
        if self.alpha is not None and not 0 <= self.alpha <= 1:
            raise ContractViolation(f"alpha must lie in [0, 1], got {self.alpha}")

    def clean_probability(self):
        if self.alpha is not None:
            return self.alpha
        n_den = self.source.n_noisy if self.source.initialized else 0
        total = self.source.n_clean + n_den
        return self.source.n_clean / total if total else 0.0

    def check(self):
        p_clean = self.clean_probability()
        if p_clean > 0 and self.source.n_clean == 0:
            raise ContractViolation("target puts weight on an empty clean set")
        if p_clean < 1 and not self.source.initialized:
            raise ContractViolation("target puts weight on an uninitialized denoised pool")


def sample_training_batch(mix: MixTarget, n, rng):
    """``n`` i.i.d. draws from the mixture target."""
    mix.check()
    p_clean = mix.clean_probability()
    denoised = mix.source.snapshot()
    from_clean = rng.random(n) < p_clean
    out = np.empty((n, mix.source.dim))
    k = int(from_clean.sum())
    if k:
        out[from_clean] = mix.source.clean[rng.integers(0, mix.source.n_clean, size=k)]
    if n - k:
        out[~from_clean] = denoised[rng.integers(0, denoised.shape[0], size=n - k)]
    return out


def sample_array_batch(points, n, rng):
    points = _points(points, "points")
    if points.shape[0] == 0:
        raise ContractViolation("cannot draw a batch from an empty set")
    return points[rng.integers(0, points.shape[0], size=n)]


def warmup_decay(decay, step_count):
    """EMA decay ramped as ``(1 + k) / (10 + k)`` so short runs are not dominated by the init."""
    return min(decay, (1.0 + step_count) / (10.0 + step_count))


def fit_steps(model: DenoiserModel, optimizer: OptimizerState, draw_batch, n_steps,
              schedule: DiffusionSchedule, rng, batch_size=256):
    """``n_steps`` optimizer steps on the denoising loss; returns the loss values.

    ``draw_batch(n, rng)`` supplies the clean targets. The EMA shadow is
    updated after every step with :func:`warmup_decay`.
    """
    losses = []
    for _ in range(n_steps):
        batch = Batch(draw_batch(batch_size, rng))
        value, grad = ad.value_and_grad(lambda p: denoising_loss(model.spec, p, batch, schedule, rng), model.params)
        if not math.isfinite(value):
            raise NumericError(f"non-finite denoising loss at optimizer step {optimizer.step_count}")
        model.grad = grad
        model.params = optimizer_step(optimizer, model.params, grad)
        model.ema = ema_update(model.ema, model.params, warmup_decay(model.ema_decay, optimizer.step_count))
        losses.append(value)
    return losses


def m_proj(pool: SamplePool, model: DenoiserModel, n_steps, mix: MixTarget, schedule: DiffusionSchedule,
           optimizer: OptimizerState, rng, batch_size=256):
    """Fit the denoiser to the mixture of the clean set and the denoised pool."""
    if n_steps == 0:
        return model
    mix.check()
    losses = fit_steps(model, optimizer, lambda n, r: sample_training_batch(mix, n, r), n_steps,
                       schedule, rng, batch_size)
    model.meta["last_losses"] = losses
    return model


def save_pool(pool: SamplePool, path):
    """Write the pool as ``.npz``: JSON header plus clean, noisy and denoised arrays."""
    header = {
        "magic": POOL_MAGIC,
        "dim": pool.dim,
        "n_clean": pool.n_clean,
        "n_noisy": pool.n_noisy,
        "replaced_count": pool.replaced_count,
        "tau": pool.tau,
        "selection": pool.selection,
        "cursor": pool._cursor,
    }
    denoised = pool.snapshot()
    with open(path, "wb") as fh:
        np.savez(
            fh,
            header=np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8),
            clean=pool.clean if pool.clean is not None else np.zeros((0, pool.dim)),
            noisy=pool.noisy,
            denoised=denoised if denoised is not None else np.zeros((0, pool.dim)),
            refresh_counts=pool.refresh_counts,
        )


def load_pool(path) -> SamplePool:
    with np.load(Path(path)) as data:
        header = json.loads(data["header"].tobytes().decode())
        if header.get("magic") != POOL_MAGIC:
            raise ConfigError(f"{path}: not a pool snapshot (magic {header.get('magic')!r})")
        denoised = data["denoised"]
        pool = SamplePool(
            data["clean"], data["noisy"], header["tau"], header["selection"],
            denoised=denoised if denoised.shape[0] else None,
        )
        pool.refresh_counts = data["refresh_counts"].copy()
    if pool.dim != header["dim"] or pool.n_noisy != header["n_noisy"] or pool.n_clean != header["n_clean"]:
        raise ConfigError(f"{path}: array shapes do not match the header")
    pool.replaced_count = header["replaced_count"]
    pool._cursor = header["cursor"]
    return pool
