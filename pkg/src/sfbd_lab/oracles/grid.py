"""Exact 1-D measures on a uniform grid.

Masses are stored as log-masses. Projections of a sharply mollified empirical
law produce masses far below the smallest positive double, and every KL or
Bayes reweighting downstream needs them to stay strictly positive.

The corruption kernel on the grid is the Gaussian ``N(0, t)`` sampled at the
nodes and renormalized per source node, i.e. a proper Markov kernel
``K_t(j | i)``. Every convolution and every posterior used in an iteration goes
through this same kernel, so the discrete chain satisfies the projection
identities exactly (up to rounding) rather than up to quadrature error.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.special import logsumexp

from ..errors import ContractViolation, SupportMismatchError


class GridWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class GridMeasure:
    """Normalized nonnegative masses on ``n`` equispaced nodes over ``[lo, hi]``."""

    lo: float
    hi: float
    log_mass: np.ndarray = field(repr=False)

    def __post_init__(self):
        lm = np.asarray(self.log_mass, dtype=np.float64)
        if lm.ndim != 1 or lm.size < 8:
            raise ContractViolation("a grid measure needs at least 8 nodes")
        if not self.hi > self.lo:
            raise ContractViolation("need hi > lo")
        if np.any(np.isnan(lm)) or np.any(lm == np.inf):
            raise ContractViolation("log-masses must be finite or -inf")
        z = logsumexp(lm)
        if not np.isfinite(z):
            raise ContractViolation("grid measure has no mass")
        lm = lm - z
        lm.flags.writeable = False
        object.__setattr__(self, "log_mass", lm)

    @classmethod
    def from_mass(cls, lo, hi, mass):
        mass = np.asarray(mass, dtype=np.float64)
        if np.any(mass < 0):
            raise ContractViolation("masses must be nonnegative")
        with np.errstate(divide="ignore"):
            return cls(lo, hi, np.log(mass))

    @classmethod
    def from_log_density(cls, lo, hi, n, log_pdf):
        nodes = np.linspace(lo, hi, n)
        return cls(lo, hi, np.asarray(log_pdf(nodes), dtype=np.float64))

    @property
    def n(self):
        return self.log_mass.size

    @property
    def nodes(self):
        return np.linspace(self.lo, self.hi, self.n)

    @property
    def dx(self):
        return (self.hi - self.lo) / (self.n - 1)

    @property
    def mass(self):
        return np.exp(self.log_mass)

    def mean(self):
        return float(np.dot(self.mass, self.nodes))

    def var(self):
        m = self.mass
        mu = np.dot(m, self.nodes)
        return float(np.dot(m, (self.nodes - mu) ** 2))

    def same_grid(self, other):
        return self.n == other.n and self.lo == other.lo and self.hi == other.hi

    def sample(self, size, rng):
        return rng.choice(self.nodes, size=size, p=self.mass / self.mass.sum())


def _require_same_grid(*measures):
    first = measures[0]
    for m in measures[1:]:
        if not first.same_grid(m):
            raise ContractViolation("measures live on different grids")


def mixture(p: GridMeasure, q: GridMeasure, weight: float) -> GridMeasure:
    """``(1 - weight) p + weight q``."""
    _require_same_grid(p, q)
    if not 0 <= weight <= 1:
        raise ContractViolation(f"mixture weight must lie in [0, 1], got {weight}")
    if weight == 0:
        return p
    if weight == 1:
        return q
    lm = np.logaddexp(math.log1p(-weight) + p.log_mass, math.log(weight) + q.log_mass)
    return GridMeasure(p.lo, p.hi, lm)


def gaussian_mixture_grid(lo, hi, n, weights, means, stds) -> GridMeasure:
    weights, means, stds = (np.asarray(a, dtype=np.float64) for a in (weights, means, stds))

    def log_pdf(x):
        comps = (
            np.log(weights)[:, None]
            - np.log(stds)[:, None]
            - 0.5 * ((x[None, :] - means[:, None]) / stds[:, None]) ** 2
        )
        return logsumexp(comps, axis=0)

    return GridMeasure.from_log_density(lo, hi, n, log_pdf)


def point_mass(lo, hi, n, at) -> GridMeasure:
    nodes = np.linspace(lo, hi, n)
    mass = np.zeros(n)
    mass[int(np.argmin(np.abs(nodes - at)))] = 1.0
    return GridMeasure.from_mass(lo, hi, mass)


def mollify(samples, lo, hi, n, bandwidth_cells=2.0) -> GridMeasure:
    """Empirical law of ``samples`` smoothed by a Gaussian of ``bandwidth_cells`` grid cells."""
    samples = np.asarray(samples, dtype=np.float64).ravel()
    nodes = np.linspace(lo, hi, n)
    h = bandwidth_cells * (hi - lo) / (n - 1)
    lm = logsumexp(-0.5 * ((nodes[:, None] - samples[None, :]) / h) ** 2, axis=1)
    return GridMeasure(lo, hi, lm)


def histogram(samples, lo, hi, n) -> GridMeasure:
    """Empirical law of ``samples`` with each point assigned to its nearest node."""
    samples = np.asarray(samples, dtype=np.float64).ravel()
    dx = (hi - lo) / (n - 1)
    idx = np.clip(np.rint((samples - lo) / dx).astype(int), 0, n - 1)
    return GridMeasure.from_mass(lo, hi, np.bincount(idx, minlength=n).astype(np.float64))


@lru_cache(maxsize=32)
def _log_kernel_cached(lo, hi, n, t):
    nodes = np.linspace(lo, hi, n)
    # rows: target node j, columns: source node i
    lk = -0.5 * (nodes[:, None] - nodes[None, :]) ** 2 / t
    lk = lk - logsumexp(lk, axis=0, keepdims=True)
    lk.flags.writeable = False
    return lk


def log_kernel(p: GridMeasure, t: float):
    """``log K_t(j | i)`` for the grid of ``p``; columns sum to one."""
    if not t > 0:
        raise ContractViolation(f"kernel time must be positive, got {t}")
    return _log_kernel_cached(float(p.lo), float(p.hi), int(p.n), float(t))


def grid_convolve(p: GridMeasure, t: float) -> GridMeasure:
    """Law of ``x0 + sqrt(t) z`` pushed through the grid kernel."""
    if math.sqrt(t) > (p.hi - p.lo) / 4:
        warnings.warn(
            f"kernel std {math.sqrt(t):.3g} is wide relative to the support [{p.lo}, {p.hi}]",
            GridWarning,
            stacklevel=2,
        )
    lk = log_kernel(p, t)
    return GridMeasure(p.lo, p.hi, logsumexp(lk + p.log_mass[None, :], axis=1))


def _posterior_log_weights(p0: GridMeasure, t, x):
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    return p0.log_mass[None, :] - 0.5 * (x[:, None] - p0.nodes[None, :]) ** 2 / t


def grid_posterior_mean(p0: GridMeasure, t, x):
    """``E[x0 | x_t = x]`` for ``x0 ~ p0`` and ``x_t = x0 + sqrt(t) z``.

    Evaluated in log space so the weights never underflow for finite ``x``.
    Non-finite ``x`` yields the nearest support edge with a warning.
    """
    if not t > 0:
        raise ContractViolation(f"posterior needs t > 0, got {t}")
    scalar = np.ndim(x) == 0
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    out = np.empty_like(x)
    finite = np.isfinite(x)
    if not np.all(finite):
        warnings.warn("posterior weights underflow; returning support edge", GridWarning, stacklevel=2)
        support = p0.nodes[np.isfinite(p0.log_mass)]
        out[~finite] = np.where(x[~finite] > 0, support.max(), support.min())
    if np.any(finite):
        lw = _posterior_log_weights(p0, t, x[finite])
        w = np.exp(lw - logsumexp(lw, axis=1, keepdims=True))
        out[finite] = w @ p0.nodes
    return float(out[0]) if scalar else out


def grid_posterior_drift(p0: GridMeasure, t, x):
    """``(E[x0 | x_t = x] - x) / t``: the exact backward drift of ``p0``."""
    return (grid_posterior_mean(p0, t, x) - np.asarray(x, dtype=np.float64)) / t


def grid_log_density(p0: GridMeasure, t, x):
    """Log density of ``p0 * N(0, t)`` at ``x`` (continuous Gaussian kernel)."""
    lw = _posterior_log_weights(p0, t, x)
    return logsumexp(lw, axis=1) - 0.5 * math.log(2 * math.pi * t)


def grid_m_step(p0k: GridMeasure, p_tau_star: GridMeasure, tau: float) -> GridMeasure:
    """Law of denoised samples: ``m0(i) = sum_j p0k(i | x_tau = j) p_tau_star(j)``.

    Exact Bayes reweighting under the grid kernel; no trajectory is simulated.
    """
    _require_same_grid(p0k, p_tau_star)
    lk = log_kernel(p0k, tau)
    log_ptau_k = logsumexp(lk + p0k.log_mass[None, :], axis=1)
    target = p_tau_star.log_mass
    has_mass = np.isfinite(target)
    if np.any(has_mass & ~np.isfinite(log_ptau_k)):
        raise SupportMismatchError("model marginal vanishes where the noisy law has mass")
    ratio = np.full_like(target, -np.inf)
    ratio[has_mass] = target[has_mass] - log_ptau_k[has_mass]
    lm = p0k.log_mass + logsumexp(lk + ratio[:, None], axis=0)
    return GridMeasure(p0k.lo, p0k.hi, lm)


def grid_gamma_sfbd(p_data, p_clean_emp, tau, gamma, K, alpha=0.0, p_tau_star=None):
    """Iterate ``p^{k+1} = (1 - gamma) p^k + gamma m0(p^k)`` for ``k < K``.

    Returns ``[p^0, ..., p^K]`` with ``p^0 = p_clean_emp``. With ``alpha > 0``
    the denoiser prior at step ``k`` is ``alpha p_clean + (1 - alpha) p^k``
    (clean samples mixed into the training target).
    """
    if not 0 < gamma <= 1:
        raise ContractViolation(f"gamma must lie in (0, 1], got {gamma}")
    if K < 1:
        raise ContractViolation("K must be >= 1")
    _require_same_grid(p_data, p_clean_emp)
    if p_tau_star is None:
        p_tau_star = grid_convolve(p_data, tau)
    traj = [p_clean_emp]
    p = p_clean_emp
    for _ in range(K):
        prior = mixture(p, p_clean_emp, alpha) if alpha > 0 else p
        p = mixture(p, grid_m_step(prior, p_tau_star, tau), gamma)
        traj.append(p)
    return traj


@dataclass
class FlowTrajectory:
    kappas: np.ndarray
    measures: list
    clamped: bool = False
    max_mass_drift: float = 0.0

    def at(self, kappa):
        i = int(np.argmin(np.abs(self.kappas - kappa)))
        if not math.isclose(self.kappas[i], kappa, rel_tol=0, abs_tol=1e-9):
            raise ContractViolation(f"kappa={kappa} is not a node of this trajectory")
        return self.measures[i]


def grid_flow_integrate(p_data, p_clean_emp, tau, d_kappa, K_max, p_tau_star=None) -> FlowTrajectory:
    """Explicit Euler on ``dp/dkappa = m0(p) - p`` starting from ``p_clean_emp``."""
    if not d_kappa > 0:
        raise ContractViolation("d_kappa must be positive")
    if p_tau_star is None:
        p_tau_star = grid_convolve(p_data, tau)
    n_steps = int(round(K_max / d_kappa))
    p = p_clean_emp
    measures, clamped, drift = [p], False, 0.0
    for _ in range(n_steps):
        m = grid_m_step(p, p_tau_star, tau)
        if d_kappa <= 1:
            new = np.logaddexp(math.log1p(-d_kappa) + p.log_mass, math.log(d_kappa) + m.log_mass) \
                if d_kappa < 1 else m.log_mass.copy()
            drift = max(drift, abs(math.expm1(logsumexp(new))))
        else:
            lin = p.mass + d_kappa * (m.mass - p.mass)
            drift = max(drift, abs(lin.sum() - 1.0))
            if np.any(lin < 0):
                clamped = True
                warnings.warn("negative mass clamped during flow step", GridWarning, stacklevel=2)
                lin = np.clip(lin, 0.0, None)
            with np.errstate(divide="ignore"):
                new = np.log(lin)
        p = GridMeasure(p.lo, p.hi, new)
        measures.append(p)
    kappas = d_kappa * np.arange(n_steps + 1)
    return FlowTrajectory(kappas, measures, clamped, drift)


def tv_distance(p: GridMeasure, q: GridMeasure) -> float:
    _require_same_grid(p, q)
    return 0.5 * float(np.abs(p.mass - q.mass).sum())


def coarsen(p: GridMeasure, factor: int) -> np.ndarray:
    """Masses summed over consecutive blocks of ``factor`` nodes."""
    m = p.mass
    n = (m.size // factor) * factor
    out = m[:n].reshape(-1, factor).sum(axis=1)
    out[-1] += m[n:].sum()
    return out
