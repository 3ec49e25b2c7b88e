"""Forward corruption kernel, score extraction and reverse-time samplers.

The forward process is plain Brownian motion, ``x_t = x_0 + sqrt(t) z``, so
``t`` is the per-coordinate noise variance and a corruption with std ``sigma``
sits at ``tau = sigma**2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractViolation, DivergedTrajectoryError
from .numerics.mlp import T_MIN

TIME_LAWS = ("point", "uniform", "log-uniform")
SCHEMES = ("euler-maruyama-sde", "heun-2nd-order-pflow")
SPACINGS = ("uniform", "polynomial")


def precision_weight(t):
    """``w(t) = (1 + t) / t``."""
    t = np.asarray(t, dtype=np.float64)
    return (1.0 + t) / t


@dataclass(frozen=True)
class DiffusionSchedule:
    """Corruption level, horizon and the law used to draw training times.

    ``t_hi`` caps the training-time range; ``None`` means the horizon ``T``.
    """

    tau: float
    T: float = 80.0
    time_law: str = "log-uniform"
    t_min: float = T_MIN
    t_hi: float | None = None
    weighting: str = "precision"

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.T < self.tau:
            raise ConfigError(f"horizon T={self.T} is below tau={self.tau}")
        if self.time_law not in TIME_LAWS:
            raise ConfigError(f"unknown time law {self.time_law!r}")
        if self.weighting not in ("precision", "unit"):
            raise ConfigError(f"unknown weighting {self.weighting!r}")
        if not 0 < self.t_min < self.upper:
            raise ConfigError("need 0 < t_min < upper end of the training range")

    @property
    def upper(self):
        return self.T if self.t_hi is None else self.t_hi

    def weight(self, t):
        if self.weighting == "unit":
            return np.ones_like(np.asarray(t, dtype=np.float64))
        return precision_weight(t)

    def with_range(self, t_hi):
        return DiffusionSchedule(self.tau, self.T, self.time_law, self.t_min, t_hi, self.weighting)


@dataclass(frozen=True)
class SolverConfig:
    n_steps: int = 32
    scheme: str = "heun-2nd-order-pflow"
    step_spacing: str = "polynomial"
    rho: float = 7.0
    t_min: float = T_MIN

    def __post_init__(self):
        if self.n_steps < 1:
            raise ConfigError("n_steps must be >= 1")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown solver scheme {self.scheme!r}")
        if self.step_spacing not in SPACINGS:
            raise ConfigError(f"unknown step spacing {self.step_spacing!r}")


def forward_sample(x0, t, rng, noise=None):
    """Draw ``x_t ~ N(x0, t I)``; ``noise`` overrides the standard-normal draw."""
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0):
        raise ContractViolation(f"forward time must be non-negative, got {t}")
    x0 = np.asarray(x0, dtype=np.float64)
    if noise is None:
        noise = rng.standard_normal(x0.shape)
    if t_arr.ndim == 1 and x0.ndim == 2:
        t_arr = t_arr[:, None]
    return x0 + np.sqrt(t_arr) * noise


def score_from_denoiser(denoiser, x, t):
    """``(D(x, t) - x) / t``."""
    if not t > 0:
        raise ContractViolation(f"score needs t > 0, got {t}")
    x = np.asarray(x, dtype=np.float64)
    return (np.asarray(denoiser(x, t)) - x) / t


def score_fn_of(denoiser):
    return lambda x, t: score_from_denoiser(denoiser, x, t)


def sample_time(schedule: DiffusionSchedule, rng, size=None):
    """Training times drawn from ``schedule.time_law`` on ``[t_min, upper]``."""
    lo, hi = schedule.t_min, schedule.upper
    if schedule.time_law == "point":
        return np.full(size, schedule.tau) if size is not None else schedule.tau
    u = rng.random(size)
    if schedule.time_law == "uniform":
        return lo + (hi - lo) * u
    return np.exp(math.log(lo) + (math.log(hi) - math.log(lo)) * u)


def time_grid(t_start, t_end, cfg: SolverConfig):
    """Decreasing integration nodes from ``t_start`` to ``t_end``.

    When ``t_end == 0`` the spaced nodes stop at ``cfg.t_min`` and one final
    node at exactly 0 is appended, so the score is never queried at ``t = 0``.
    """
    n = cfg.n_steps
    if t_end > 0:
        lo, n_spaced, tail = t_end, n, []
    elif n == 1 or t_start <= cfg.t_min:
        return np.array([t_start, 0.0])
    else:
        lo, n_spaced, tail = cfg.t_min, n - 1, [0.0]
    frac = np.arange(n_spaced + 1) / n_spaced
    if cfg.step_spacing == "uniform":
        ts = t_start + frac * (lo - t_start)
    else:
        r = 1.0 / cfg.rho
        ts = (t_start**r + frac * (lo**r - t_start**r)) ** cfg.rho
    ts[0], ts[-1] = t_start, lo
    return np.concatenate([ts, tail])


def _check_finite(x, step):
    bad = ~np.all(np.isfinite(x.reshape(x.shape[0], -1) if x.ndim > 1 else x[:, None]), axis=1)
    if np.any(bad):
        idx = int(np.flatnonzero(bad)[0])
        raise DivergedTrajectoryError(
            f"trajectory {idx} became non-finite at step {step}", step=step, index=idx
        )


def backward_solve(score_fn, x_start, t_start, t_end, cfg: SolverConfig, rng=None):
    """Integrate the reverse-time dynamics from ``t_start`` down to ``t_end``.

    ``euler-maruyama-sde`` simulates ``dx = -s_t(x) dt + dw`` backward in time
    (the step landing on ``t = 0`` is noise-free); ``heun-2nd-order-pflow``
    integrates ``dx/dt = -s_t(x)/2`` with a Heun corrector on every step that
    does not land on ``t = 0``.
    """
    if not 0 <= t_end < t_start:
        raise ContractViolation(f"need 0 <= t_end < t_start, got {t_end}, {t_start}")
    x = np.array(x_start, dtype=np.float64, copy=True)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    sde = cfg.scheme == "euler-maruyama-sde"
    if sde and rng is None:
        raise ContractViolation("the SDE scheme needs an rng")
    ts = time_grid(t_start, t_end, cfg)
    for i in range(len(ts) - 1):
        t, t_next = ts[i], ts[i + 1]
        h = t - t_next
        s = score_fn(x, t)
        if sde:
            x = x + h * s
            if t_next > 0:
                x = x + math.sqrt(h) * rng.standard_normal(x.shape)
        else:
            x_euler = x + 0.5 * h * s
            if t_next > 0:
                s_next = score_fn(x_euler, t_next)
                x = x + 0.25 * h * (s + s_next)
            else:
                x = x_euler
        _check_finite(x, i)
    return x[0] if single else x


def make_denoise_fn(denoiser, tau, cfg: SolverConfig):
    """``fn(x_tau, rng) -> x_0`` solving from ``tau`` to 0 with the denoiser's score."""
    score = score_fn_of(denoiser)

    def denoise(x_tau, rng):
        return backward_solve(score, x_tau, tau, 0.0, cfg, rng)

    return denoise


def generate(denoiser, n, dim, schedule: DiffusionSchedule, cfg: SolverConfig, rng):
    """Unconditional samples: start from ``N(0, T I)`` and solve to ``t = 0``."""
    x_T = math.sqrt(schedule.T) * rng.standard_normal((n, dim))
    return backward_solve(score_fn_of(denoiser), x_T, schedule.T, 0.0, cfg, rng)
