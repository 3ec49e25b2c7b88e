"""Training drivers: clean pretraining, vanilla and online SFBD, the consistency baseline.

All drivers take the clean and noisy sets as arrays (or ``.npy`` paths) and
never see the clean originals of the noisy points. Evaluation against a
held-out truth sample is delegated to an :class:`Evaluator` built by the
caller.
"""

from __future__ import annotations

import csv
import math
import queue
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .diffusion import DiffusionSchedule, SolverConfig, forward_sample, generate
from .errors import ConfigError, ContractViolation, NumericError
from .losses import Batch, consistency_loss, denoising_loss
from .numerics import autodiff as ad
from .numerics.mlp import DenoiserModel, MlpSpec, save_checkpoint
from .numerics.optim import OptimizerState, ema_update, optimizer_step
from .oracles.grid import GridMeasure, histogram, mixture
from .oracles.metrics import char_fn, energy_distance, frechet_gaussian
from .projections import (
    MixTarget,
    SamplePool,
    d_proj_full,
    ema_denoise_fn,
    fit_steps,
    gamma_pool_update,
    m_proj,
    replacement_count,
    sample_array_batch,
    save_pool,
    warmup_decay,
)

METRIC_COLUMNS = ("step", "metric", "value")
DEFAULT_GAMMA = 0.01


@dataclass
class TrainConfig:
    """Hyperparameters shared by every driver.

    ``gamma`` and ``replace_batch`` describe the same thing; when both are
    given the replace batch wins and ``gamma`` is recomputed from it.
    """

    schedule: DiffusionSchedule
    gamma: float | None = None
    m: int = 20
    replace_batch: int | None = None
    ema_decay: float = 0.999
    total_updates: int = 200
    pretrain_steps: int = 2000
    batch_size: int = 256
    learning_rate: float = 1e-3
    hidden_widths: tuple = (128, 128, 128)
    activation: str = "smooth-relu"
    time_embedding_dim: int = 16
    # posterior sampling from tau needs the stochastic sampler; the PF map is deterministic
    solver: SolverConfig = field(default_factory=lambda: SolverConfig(n_steps=32, scheme="euler-maruyama-sde"))
    alpha: float | None = None
    selection: str = "uniform"
    seed: int = 0
    eval_every: int = 50
    finetune_steps: int = 1000
    plateau_window: int = 100
    plateau_tol: float = 1e-3
    watchdog_factor: float = 10.0
    watchdog_floor: float = 1e-3
    n_watch: int = 512
    checkpoint_every: int = 0
    out_dir: str | None = None

    def __post_init__(self):
        if self.gamma is not None and not 0 < self.gamma <= 1:
            raise ConfigError(f"gamma must lie in (0, 1], got {self.gamma}")
        for name in ("m", "batch_size", "eval_every", "plateau_window", "n_watch"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("total_updates", "pretrain_steps", "finetune_steps", "checkpoint_every"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0 <= self.ema_decay < 1:
            raise ConfigError("ema_decay must lie in [0, 1)")
        if self.alpha is not None and not 0 <= self.alpha <= 1:
            raise ConfigError("alpha must lie in [0, 1]")

    @property
    def tau(self):
        return self.schedule.tau

    def mlp_spec(self, dim):
        return MlpSpec(dim, tuple(self.hidden_widths), self.activation, self.time_embedding_dim)

    def resolve(self, n_noisy):
        """``(gamma, replace_batch)`` for a noisy set of size ``n_noisy``."""
        rb = self.replace_batch
        if rb is None:
            rb = replacement_count(self.gamma if self.gamma is not None else DEFAULT_GAMMA, n_noisy)
        if not 1 <= rb <= n_noisy:
            raise ConfigError(f"replace_batch={rb} is outside [1, {n_noisy}]")
        return rb / n_noisy, rb

    def streams(self):
        """Independent generators: init, train, denoise, watch."""
        return [np.random.default_rng(s) for s in np.random.SeedSequence(self.seed).spawn(4)]


def load_points(source, name="points"):
    """Array or ``.npy`` path; paths inside an ``eval`` directory are refused."""
    if isinstance(source, (str, Path)):
        path = Path(source)
        if "eval" in path.parts:
            raise ConfigError(f"{name}: trainers may not read held-out evaluation files ({path})")
        source = np.load(path)
    x = np.asarray(source, dtype=np.float64)
    return x[:, None] if x.ndim == 1 else x


class RunMetrics:
    """Checkpoint records in long ``step,metric,value`` form.

    Wall-clock time is kept apart from the metric values so that two
    identical runs produce byte-identical metric files.
    """

    def __init__(self):
        self.records = []
        self.wall = []
        self.best_params = None
        self.pool = None

    @property
    def steps(self):
        return [s for s, _ in self.wall]

    def log(self, step, values: dict, wall_seconds=0.0):
        if self.wall and step <= self.wall[-1][0]:
            raise ContractViolation(f"checkpoint steps must increase: {step} after {self.wall[-1][0]}")
        for name in sorted(values):
            self.records.append((int(step), name, float(values[name])))
        self.wall.append((int(step), float(wall_seconds)))

    def series(self, metric):
        return [(s, v) for s, n, v in self.records if n == metric]

    def best(self, metric):
        pts = self.series(metric)
        if not pts:
            raise KeyError(metric)
        return min(pts, key=lambda sv: sv[1])

    def final(self, metric):
        return self.series(metric)[-1]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(METRIC_COLUMNS)
            for step, name, value in self.records:
                writer.writerow([step, name, repr(value)])

    def timing_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(("step", "wall_seconds"))
            writer.writerows(self.wall)


class Evaluator:
    """Distances between the model/pool and a held-out truth sample.

    Every evaluation reuses one seed for generation, so checkpoints are
    compared on common random numbers.
    """

    def __init__(self, truth, n_samples=4096, solver=None, probes=(0.5, 1.0, 2.0), seed=0, T=80.0):
        truth = np.load(truth) if isinstance(truth, (str, Path)) else truth
        truth = np.asarray(truth, dtype=np.float64)
        self.truth = truth[:, None] if truth.ndim == 1 else truth
        self.n_samples = n_samples
        self.solver = solver or SolverConfig(n_steps=64)
        self.probes = probes
        self.seed = seed
        self.T = T

    def samples(self, model: DenoiserModel):
        rng = np.random.default_rng(self.seed)
        schedule = DiffusionSchedule(tau=min(1.0, self.T), T=self.T)
        return generate(model.snapshot(use_ema=True), self.n_samples, self.truth.shape[1], schedule, self.solver, rng)

    def cf_gap(self, samples):
        d = self.truth.shape[1]
        gaps = []
        for u in self.probes:
            direction = np.full(d, u / math.sqrt(d))
            gaps.append(abs(char_fn(samples, direction) - char_fn(self.truth, direction)))
        return max(gaps)

    def evaluate(self, model: DenoiserModel, pool: SamplePool | None = None):
        x = self.samples(model)
        out = {
            "sample_ed": energy_distance(x, self.truth),
            "sample_frechet": frechet_gaussian(x, self.truth),
            "sample_cf_gap": self.cf_gap(x),
        }
        if pool is not None and pool.initialized:
            out["pool_ed"] = energy_distance(pool.snapshot(), self.truth)
        return out


class _Checkpointer:
    """Collects metrics at checkpoints and runs the pool-distance watchdog.

    The watchdog statistic needs no truth: it is the energy distance between
    re-noised denoised entries and their noisy partners on a fixed subset
    with fixed noise.
    """

    def __init__(self, cfg: TrainConfig, evaluator, pool, watch_rng):
        self.cfg = cfg
        self.evaluator = evaluator
        self.pool = pool
        self.metrics = RunMetrics()
        self.start = time.perf_counter()
        self.best_value = math.inf
        self.watch_min = math.inf
        if pool is not None:
            k = min(cfg.n_watch, pool.n_noisy)
            self.watch_idx = np.sort(watch_rng.choice(pool.n_noisy, size=k, replace=False))
            self.watch_noise = watch_rng.standard_normal((k, pool.dim))

    def pool_fit(self):
        den = self.pool.snapshot()[self.watch_idx]
        renoised = forward_sample(den, self.pool.tau, None, noise=self.watch_noise)
        return energy_distance(renoised, self.pool.noisy[self.watch_idx])

    def record(self, step, model, losses):
        values = {}
        if losses:
            values["denoise_loss"] = float(np.mean(losses))
        if self.pool is not None and self.pool.initialized:
            fit = self.pool_fit()
            values["pool_fit"] = fit
            self.watch_min = min(self.watch_min, fit)
            limit = self.cfg.watchdog_factor * max(self.watch_min, self.cfg.watchdog_floor)
            if fit > limit:
                raise NumericError(f"pool distance {fit:.4g} exceeds {self.cfg.watchdog_factor:g}x its minimum at step {step}")
        if self.evaluator is not None:
            values.update(self.evaluator.evaluate(model, self.pool))
            if values["sample_ed"] < self.best_value:
                self.best_value = values["sample_ed"]
                self.metrics.best_params = model.ema.copy()
        self.metrics.log(step, values, time.perf_counter() - self.start)
        self._save(step, model)

    def _save(self, step, model):
        cfg = self.cfg
        if not (cfg.out_dir and cfg.checkpoint_every) or step % cfg.checkpoint_every:
            return
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, out / f"model_{step:06d}.json")
        if self.pool is not None and self.pool.initialized:
            save_pool(self.pool, out / f"pool_{step:06d}.npz")


def train_on_samples(points, cfg: TrainConfig, n_steps=None, rng_init=None, rng_train=None):
    """Fit a fresh denoiser to the empirical law of ``points`` over ``[t_min, T]``."""
    points = load_points(points)
    if points.shape[0] == 0:
        raise ContractViolation("cannot train on an empty set")
    init, train, _, _ = cfg.streams()
    rng_init = rng_init or init
    rng_train = rng_train or train
    model = DenoiserModel.create(cfg.mlp_spec(points.shape[1]), rng_init, cfg.ema_decay)
    opt = OptimizerState.zeros_like(model.params, learning_rate=cfg.learning_rate)
    steps = cfg.pretrain_steps if n_steps is None else n_steps
    losses = fit_steps(model, opt, lambda n, r: sample_array_batch(points, n, r), steps,
                       cfg.schedule.with_range(None), rng_train, cfg.batch_size)
    model.meta["pretrain_final_loss"] = float(np.mean(losses[-50:])) if losses else None
    return model


def pretrain_clean(clean, cfg: TrainConfig):
    """Denoiser trained on the clean set alone."""
    return train_on_samples(clean, cfg)


def _start(clean, noisy, cfg, model):
    clean = load_points(clean, "clean")
    noisy = load_points(noisy, "noisy")
    if model is None:
        model = pretrain_clean(clean, cfg)
    else:
        model = model.copy()
    return clean, noisy, model


class _AsyncRefresher:
    """Background pool refresh with at most one outstanding batch.

    The trainer hands over a denoiser built from an EMA copy; ``submit``
    first waits for the previous batch to land, so the pool is never more
    than one replace batch behind the trainer.
    """

    def __init__(self, pool, gamma, rng):
        self.pool, self.gamma, self.rng = pool, gamma, rng
        self.requests = queue.Queue(maxsize=1)
        self.idle = threading.Event()
        self.idle.set()
        self.error = None
        self.thread = threading.Thread(target=self._run, name="pool-refresh", daemon=True)
        self.thread.start()

    def _run(self):
        while True:
            fn = self.requests.get()
            if fn is None:
                return
            try:
                gamma_pool_update(self.pool, fn, self.gamma, self.rng)
            except BaseException as err:
                self.error = err
            finally:
                self.idle.set()

    def drain(self):
        self.idle.wait()
        if self.error is not None:
            raise self.error

    def submit(self, fn):
        self.drain()
        self.idle.clear()
        self.requests.put(fn)

    def close(self):
        try:
            self.drain()
        finally:
            self.requests.put(None)
            self.thread.join()


def online_sfbd(clean, noisy, cfg: TrainConfig, evaluator=None, model=None, sync=True):
    """Interleave ``m`` denoiser steps with refreshes of ``replace_batch`` pool entries.

    The pool starts from one full denoising pass with the pretrained model;
    all refreshes use the EMA weights. ``sync=False`` moves the refresh to a
    worker thread that overlaps with the next ``m`` steps.
    """
    clean, noisy, model = _start(clean, noisy, cfg, model)
    _, train_rng, denoise_rng, watch_rng = cfg.streams()
    gamma, _ = cfg.resolve(noisy.shape[0])
    pool = SamplePool(clean, noisy, cfg.tau, cfg.selection)
    pool.initialize(ema_denoise_fn(model, cfg.tau, cfg.solver), denoise_rng)
    opt = OptimizerState.zeros_like(model.params, learning_rate=cfg.learning_rate)
    mix = MixTarget(pool, cfg.alpha)
    ckpt = _Checkpointer(cfg, evaluator, pool, watch_rng)
    ckpt.record(0, model, [])

    refresher = None if sync else _AsyncRefresher(pool, gamma, denoise_rng)
    losses = []
    try:
        for update in range(1, cfg.total_updates + 1):
            m_proj(pool, model, cfg.m, mix, cfg.schedule, opt, train_rng, cfg.batch_size)
            losses.extend(model.meta.pop("last_losses"))
            fn = ema_denoise_fn(model, cfg.tau, cfg.solver)
            if refresher is None:
                gamma_pool_update(pool, fn, gamma, denoise_rng)
            else:
                refresher.submit(fn)
            if update % cfg.eval_every == 0 or update == cfg.total_updates:
                if refresher is not None:
                    refresher.drain()
                ckpt.record(update, model, losses)
                losses = []
    finally:
        if refresher is not None:
            refresher.close()
    ckpt.metrics.pool = pool
    return model, ckpt.metrics


def _fit_until_plateau(pool, model, mix, cfg, opt, rng):
    """Up to ``finetune_steps`` steps, stopping once a window's mean loss stops improving."""
    losses, previous = [], math.inf
    remaining = cfg.finetune_steps
    while remaining > 0:
        n = min(cfg.plateau_window, remaining)
        m_proj(pool, model, n, mix, cfg.schedule, opt, rng, cfg.batch_size)
        window = model.meta.pop("last_losses")
        losses.extend(window)
        remaining -= n
        current = float(np.mean(window))
        if previous - current < cfg.plateau_tol * abs(previous):
            break
        previous = current
    return losses


def sfbd(clean, noisy, K, cfg: TrainConfig, evaluator=None, model=None):
    """Vanilla SFBD: ``K`` rounds of full re-denoising followed by fine-tuning."""
    if K < 0:
        raise ContractViolation("K must be non-negative")
    clean, noisy, model = _start(clean, noisy, cfg, model)
    _, train_rng, denoise_rng, watch_rng = cfg.streams()
    pool = SamplePool(clean, noisy, cfg.tau, cfg.selection)
    opt = OptimizerState.zeros_like(model.params, learning_rate=cfg.learning_rate)
    mix = MixTarget(pool, cfg.alpha)
    ckpt = _Checkpointer(cfg, evaluator, pool, watch_rng)
    ckpt.record(0, model, [])
    for k in range(1, K + 1):
        d_proj_full(pool, ema_denoise_fn(model, cfg.tau, cfg.solver), denoise_rng)
        losses = _fit_until_plateau(pool, model, mix, cfg, opt, train_rng)
        ckpt.record(k, model, losses)
    ckpt.metrics.pool = pool
    return model, ckpt.metrics


def cc_baseline(clean, noisy, cfg: TrainConfig, evaluator=None, model=None):
    """Consistency-constraint baseline: one gradient step per freshly denoised batch.

    Each step draws ``batch_size`` noisy points, denoises them with the
    current (stop-gradient) model and combines the ``r = 0, s = tau``
    consistency loss, weighted by ``w(tau)``, with the denoising loss on a
    clean batch. ``total_updates * m`` steps are taken so the gradient
    budget matches :func:`online_sfbd`.
    """
    clean, noisy, model = _start(clean, noisy, cfg, model)
    _, train_rng, denoise_rng, _ = cfg.streams()
    opt = OptimizerState.zeros_like(model.params, learning_rate=cfg.learning_rate)
    tau = cfg.tau
    w_tau = float(cfg.schedule.weight(tau))
    ckpt = _Checkpointer(cfg, evaluator, None, None)
    ckpt.record(0, model, [])
    n_steps = cfg.total_updates * cfg.m
    checkpoint_every = cfg.eval_every * cfg.m
    losses = []
    for step in range(1, n_steps + 1):
        x_s = sample_array_batch(noisy, cfg.batch_size, train_rng)
        clean_batch = Batch(sample_array_batch(clean, cfg.batch_size, train_rng))

        def loss(p):
            con = consistency_loss(model.spec, p, 0.0, tau, x_s, cfg.solver, denoise_rng)
            return con * w_tau + denoising_loss(model.spec, p, clean_batch, cfg.schedule, train_rng)

        value, grad = ad.value_and_grad(loss, model.params)
        if not math.isfinite(value):
            raise NumericError(f"non-finite consistency loss at step {step}")
        model.grad = grad
        model.params = optimizer_step(opt, model.params, grad)
        model.ema = ema_update(model.ema, model.params, warmup_decay(model.ema_decay, opt.step_count))
        losses.append(value)
        if step % checkpoint_every == 0 or step == n_steps:
            ckpt.record(step // cfg.m, model, losses)
            losses = []
    return model, ckpt.metrics


@dataclass
class GridShadowLearner:
    """Exact stand-in for a denoiser trained to convergence (``m`` large) in 1-D.

    ``fit`` returns the nearest-node histogram of the training points, which
    is exactly the law a perfectly fitted denoiser encodes; ``denoiser``
    draws from the posterior of that law given a noisy point.
    """

    lo: float
    hi: float
    n: int
    tau: float

    def fit(self, points) -> GridMeasure:
        return histogram(np.asarray(points).ravel(), self.lo, self.hi, self.n)

    def denoiser(self, prior: GridMeasure):
        nodes = prior.nodes

        def denoise(x_tau, rng):
            x = np.asarray(x_tau, dtype=np.float64).reshape(-1)
            lw = prior.log_mass[None, :] - 0.5 * (x[:, None] - nodes[None, :]) ** 2 / self.tau
            w = np.exp(lw - lw.max(axis=1, keepdims=True))
            cdf = np.cumsum(w, axis=1)
            u = rng.random(x.size) * cdf[:, -1]
            idx = np.minimum((cdf < u[:, None]).sum(axis=1), nodes.size - 1)
            return nodes[idx][:, None]

        denoise.tag = "ema"
        return denoise


def grid_shadow_online(clean, noisy, learner: GridShadowLearner, total_updates, replace_batch=None,
                       alpha=0.0, seed=0, initial_prior=None):
    """Online SFBD on a 1-D pool with the exact grid learner in place of ``m`` gradient steps.

    Returns the denoised pool after initialization and after every update.
    """
    clean = load_points(clean, "clean")
    noisy = load_points(noisy, "noisy")
    rng = np.random.default_rng(seed)
    pool = SamplePool(clean, noisy, learner.tau)
    gamma = (replace_batch or noisy.shape[0]) / noisy.shape[0]
    prior = initial_prior if initial_prior is not None else learner.fit(clean)
    pool.initialize(learner.denoiser(prior), rng)
    history = [pool.snapshot()]
    mix = MixTarget(pool, alpha)
    for _ in range(total_updates):
        p_clean = mix.clean_probability()
        prior = learner.fit(pool.snapshot())
        if p_clean > 0:
            prior = mixture(prior, learner.fit(clean), p_clean)
        gamma_pool_update(pool, learner.denoiser(prior), gamma, rng)
        history.append(pool.snapshot())
    return history


def with_overrides(cfg: TrainConfig, **changes):
    return replace(cfg, **{k: v for k, v in changes.items() if v is not None})
