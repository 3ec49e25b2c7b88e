"""Divergences, characteristic functions and two-sample distances."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.integrate import simpson
from scipy.linalg import sqrtm
from scipy.spatial.distance import cdist

from ..errors import ContractViolation
from .gaussian import GaussianMeasure, char_fn_gaussian, kl_gaussian
from .grid import GridMeasure, GridWarning, grid_convolve


def kl_divergence(p, q) -> float:
    """``KL(p || q)`` for two grid measures on one grid or two Gaussians.

    Grid measures use ``0 log 0 = 0``; mass of ``p`` where ``q`` vanishes
    gives ``inf`` with a warning.
    """
    if isinstance(p, GaussianMeasure) and isinstance(q, GaussianMeasure):
        return kl_gaussian(p, q)
    if isinstance(p, GridMeasure) and isinstance(q, GridMeasure):
        if not p.same_grid(q):
            raise ContractViolation("KL between measures on different grids")
        support = np.isfinite(p.log_mass)
        if np.any(~np.isfinite(q.log_mass[support])):
            warnings.warn("KL is infinite: q vanishes where p has mass", GridWarning, stacklevel=2)
            return math.inf
        lp = p.log_mass[support]
        return max(float(np.dot(np.exp(lp), lp - q.log_mass[support])), 0.0)
    raise ContractViolation(f"KL not defined between {type(p).__name__} and {type(q).__name__}")


def char_fn(measure_or_samples, u) -> complex:
    """``E[exp(i u^T x)]``: exact for grid/Gaussian measures, empirical for samples."""
    if isinstance(measure_or_samples, GaussianMeasure):
        return char_fn_gaussian(measure_or_samples, u)
    if isinstance(measure_or_samples, GridMeasure):
        p = measure_or_samples
        u = float(np.asarray(u).reshape(-1)[0])
        return complex(np.dot(p.mass, np.exp(1j * u * p.nodes)))
    x = np.asarray(measure_or_samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    return complex(np.mean(np.exp(1j * (x @ u))))


@dataclass
class CFBoundRow:
    u: float
    lhs: float
    rhs: float

    @property
    def margin(self):
        return self.rhs - self.lhs


def cf_bound_check(p, q, tau, probes) -> list[CFBoundRow]:
    """``|Phi_p(u) - Phi_q(u)|`` against ``exp(tau |u|^2 / 2) sqrt(2 KL(p*h || q*h))``."""
    if isinstance(p, GaussianMeasure):
        kl = kl_gaussian(p.convolve(tau), q.convolve(tau))
    else:
        kl = kl_divergence(grid_convolve(p, tau), grid_convolve(q, tau))
    rows = []
    for u in probes:
        u_arr = np.atleast_1d(np.asarray(u, dtype=np.float64))
        lhs = abs(char_fn(p, u_arr) - char_fn(q, u_arr))
        rhs = math.exp(0.5 * tau * float(u_arr @ u_arr)) * math.sqrt(2.0 * kl)
        rows.append(CFBoundRow(float(np.linalg.norm(u_arr)), lhs, rhs))
    return rows


def _mean_pairwise(a, b, chunk=2048):
    total = 0.0
    for i in range(0, a.shape[0], chunk):
        total += cdist(a[i : i + chunk], b).sum()
    return total / (a.shape[0] * b.shape[0])


def energy_distance(samples_a, samples_b) -> float:
    """V-statistic ``2 E|a - b| - E|a - a'| - E|b - b'|``, clipped at zero."""
    a = np.asarray(samples_a, dtype=np.float64)
    b = np.asarray(samples_b, dtype=np.float64)
    a = a[:, None] if a.ndim == 1 else a
    b = b[:, None] if b.ndim == 1 else b
    if a.shape[0] == 0 or b.shape[0] == 0 or a.shape[1] != b.shape[1]:
        raise ContractViolation("energy distance needs nonempty samples of equal dimension")
    ed = 2 * _mean_pairwise(a, b) - _mean_pairwise(a, a) - _mean_pairwise(b, b)
    return float(max(ed, 0.0))


def energy_distance_1d(samples_a, samples_b) -> float:
    """1-D energy distance as ``2 * integral (F_a - F_b)^2`` of the empirical CDFs."""
    a = np.sort(np.asarray(samples_a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(samples_b, dtype=np.float64).ravel())
    pts = np.concatenate([a, b])
    pts.sort(kind="mergesort")
    fa = np.searchsorted(a, pts[:-1], side="right") / a.size
    fb = np.searchsorted(b, pts[:-1], side="right") / b.size
    return 2.0 * float(np.sum((fa - fb) ** 2 * np.diff(pts)))


def frechet_gaussian(samples_a, samples_b) -> float:
    """Frechet distance between Gaussian fits of two sample sets."""
    a = np.atleast_2d(np.asarray(samples_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(samples_b, dtype=np.float64))
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    ca = np.atleast_2d(np.cov(a, rowvar=False))
    cb = np.atleast_2d(np.cov(b, rowvar=False))
    covmean = np.real(sqrtm(ca @ cb))
    return float(np.sum((mu_a - mu_b) ** 2) + np.trace(ca + cb - 2 * covmean))


@dataclass
class AffineDrift:
    """Drift ``f(x, t) = A(t) x + b(t)``; ``A`` and ``b`` are arrays or callables of ``t``."""

    A: np.ndarray | Callable
    b: np.ndarray | Callable

    def at(self, t, dim):
        A = self.A(t) if callable(self.A) else self.A
        b = self.b(t) if callable(self.b) else self.b
        A = np.broadcast_to(np.asarray(A, dtype=np.float64), (dim, dim)) if np.ndim(A) == 0 \
            else np.asarray(A, dtype=np.float64)
        b = np.broadcast_to(np.asarray(b, dtype=np.float64), (dim,))
        return A, b


def path_kl_gaussian(drift_a: AffineDrift, drift_b: AffineDrift, p_init_a: GaussianMeasure,
                     p_init_b: GaussianMeasure, tau, n_steps=1000) -> float:
    """KL between the path laws of ``dx = f_i dt + dw`` on ``[0, tau]``.

    Initial-law KL in closed form plus ``E int 1/2 |f_a - f_b|^2 dt`` under
    path law ``a``, whose Gaussian marginals are propagated by RK4 on the
    moment equations and integrated with Simpson's rule.
    """
    d = p_init_a.dim
    eye = np.eye(d)

    def rhs(t, m, c):
        A, b = drift_a.at(t, d)
        return A @ m + b, A @ c + c @ A.T + eye

    def integrand(t, m, c):
        Aa, ba = drift_a.at(t, d)
        Ab, bb = drift_b.at(t, d)
        dA, db = Aa - Ab, ba - bb
        mean_term = dA @ m + db
        return 0.5 * float(mean_term @ mean_term + np.trace(dA @ c @ dA.T))

    n_steps += n_steps % 2
    h = tau / n_steps
    m, c = p_init_a.mean.copy(), p_init_a.cov.copy()
    ts = np.linspace(0.0, tau, n_steps + 1)
    vals = [integrand(0.0, m, c)]
    for t in ts[:-1]:
        k1 = rhs(t, m, c)
        k2 = rhs(t + h / 2, m + h / 2 * k1[0], c + h / 2 * k1[1])
        k3 = rhs(t + h / 2, m + h / 2 * k2[0], c + h / 2 * k2[1])
        k4 = rhs(t + h, m + h * k3[0], c + h * k3[1])
        m = m + h / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        c = c + h / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        vals.append(integrand(t + h, m, c))
    return kl_gaussian(p_init_a, p_init_b) + float(simpson(vals, x=ts))
