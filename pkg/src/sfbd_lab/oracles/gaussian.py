"""Closed-form oracle for the all-Gaussian case."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from ..errors import ContractViolation


@dataclass(frozen=True, eq=False)
class GaussianMeasure:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if cov.shape != (mean.size, mean.size):
            raise ContractViolation(f"covariance shape {cov.shape} does not match mean {mean.shape}")
        if not np.allclose(cov, cov.T, rtol=1e-12, atol=1e-14):
            raise ContractViolation("covariance must be symmetric")
        if np.linalg.eigvalsh(cov).min() <= 0:
            raise ContractViolation("covariance must be positive definite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", 0.5 * (cov + cov.T))

    @property
    def dim(self):
        return self.mean.size

    def convolve(self, t):
        """Law of ``x + sqrt(t) z``."""
        return GaussianMeasure(self.mean, self.cov + t * np.eye(self.dim))

    def sample(self, n, rng):
        return rng.multivariate_normal(self.mean, self.cov, size=n)


def posterior_gain(prior: GaussianMeasure, t):
    """``Sigma (Sigma + t I)^{-1}``, the slope of ``E[x0 | x_t]``."""
    s = prior.cov
    return np.linalg.solve(s + t * np.eye(prior.dim), s).T


def gaussian_denoiser(prior: GaussianMeasure):
    """Exact ``D(x, t) = E[x0 | x_t = x]`` for ``x0 ~ prior``."""

    def denoise(x, t):
        x = np.asarray(x, dtype=np.float64)
        if t == 0:
            return x.copy()
        gain = posterior_gain(prior, t)
        return prior.mean + (x - prior.mean) @ gain.T

    return denoise


def gaussian_m_step(p0k: GaussianMeasure, p_star: GaussianMeasure, tau) -> GaussianMeasure:
    """Law of denoised samples when the model prior is ``p0k`` and the clean truth ``p_star``.

    Noisy points ``x_tau ~ p_star * N(0, tau I)`` are mapped through the
    posterior ``p0k(x0 | x_tau)``; the result is Gaussian with the affine
    push-forward of the noisy mean/covariance plus the posterior covariance.
    """
    if p0k.dim != p_star.dim:
        raise ContractViolation("dimension mismatch")
    gain = posterior_gain(p0k, tau)
    noisy = p_star.convolve(tau)
    mean = p0k.mean + gain @ (noisy.mean - p0k.mean)
    post_cov = p0k.cov - gain @ p0k.cov
    cov = gain @ noisy.cov @ gain.T + post_cov
    return GaussianMeasure(mean, 0.5 * (cov + cov.T))


def gaussian_sfbd(p_star: GaussianMeasure, p0: GaussianMeasure, tau, K):
    """``[p^0, ..., p^K]`` for vanilla SFBD (full replacement) on Gaussians."""
    traj = [p0]
    for _ in range(K):
        traj.append(gaussian_m_step(traj[-1], p_star, tau))
    return traj


def kl_gaussian(p: GaussianMeasure, q: GaussianMeasure) -> float:
    """Closed-form KL, evaluated in the whitened frame of ``q``.

    With ``lam`` the eigenvalues of ``L^-1 P L^-T`` (``Q = L L^T``) the
    covariance part is ``sum(lam - 1 - log lam)``, written through ``log1p``
    so nearly equal measures give a small nonnegative value instead of a
    cancellation residue.
    """
    if p.dim != q.dim:
        raise ContractViolation("dimension mismatch")
    chol = np.linalg.cholesky(q.cov)
    white = solve_triangular(chol, solve_triangular(chol, p.cov, lower=True).T, lower=True)
    lam_minus_one = np.linalg.eigvalsh(0.5 * (white + white.T)) - 1.0
    cov_part = float(np.sum(np.maximum(lam_minus_one - np.log1p(lam_minus_one), 0.0)))
    diff = solve_triangular(chol, q.mean - p.mean, lower=True)
    return 0.5 * (cov_part + float(diff @ diff))


def char_fn_gaussian(p: GaussianMeasure, u) -> complex:
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    return complex(np.exp(1j * (u @ p.mean) - 0.5 * (u @ p.cov @ u)))


def fit_gaussian(samples) -> GaussianMeasure:
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if samples.shape[0] == 1:
        samples = samples.T
    return GaussianMeasure(samples.mean(axis=0), np.atleast_2d(np.cov(samples, rowvar=False)))
