"""Inequality and identity checks run against the exact oracles.

Each check returns a :class:`CheckResult` whose ``rows`` hold per-step
margins (``rhs - lhs``; nonnegative means the inequality holds).
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .gaussian import GaussianMeasure, gaussian_m_step
from .grid import (
    GridMeasure,
    gaussian_mixture_grid,
    grid_convolve,
    grid_flow_integrate,
    grid_gamma_sfbd,
    grid_log_density,
    grid_m_step,
    grid_posterior_drift,
    mixture,
    mollify,
    tv_distance,
)
from .metrics import char_fn, kl_divergence

MARGIN_COLUMNS = ("check", "case", "step", "lhs", "rhs", "margin")


@dataclass
class CheckResult:
    name: str
    passed: bool
    summary: str
    rows: list = field(default_factory=list)
    seconds: float = 0.0


@dataclass(frozen=True)
class MixtureProblem:
    """1-D two-component data law on a grid plus a mollified small clean sample."""

    lo: float = -6.0
    hi: float = 6.0
    n: int = 1024
    weights: tuple = (0.4, 0.6)
    means: tuple = (-1.5, 1.0)
    stds: tuple = (0.4, 0.6)
    n_clean: int = 50
    seed: int = 0

    def data(self) -> GridMeasure:
        return gaussian_mixture_grid(self.lo, self.hi, self.n, self.weights, self.means, self.stds)

    def clean_samples(self):
        rng = np.random.default_rng(self.seed)
        comp = rng.choice(len(self.weights), size=self.n_clean, p=np.asarray(self.weights))
        return rng.normal(np.asarray(self.means)[comp], np.asarray(self.stds)[comp])

    def clean(self) -> GridMeasure:
        return mollify(self.clean_samples(), self.lo, self.hi, self.n)


def _timed(fn):
    def wrapper(*args, **kwargs):
        start = time.perf_counter()
        result = fn(*args, **kwargs)
        result.seconds = time.perf_counter() - start
        return result

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def gamma_trajectories(problem: MixtureProblem, taus, gammas, K):
    """``{(tau, gamma): (p_tau_star, [p^0..p^K])}`` for the exact gamma recursion."""
    p_data, p_clean = problem.data(), problem.clean()
    out = {}
    for tau in taus:
        p_tau_star = grid_convolve(p_data, tau)
        for gamma in gammas:
            out[(tau, gamma)] = (p_tau_star, grid_gamma_sfbd(p_data, p_clean, tau, gamma, K, p_tau_star=p_tau_star))
    return out


@_timed
def check_kl_descent(problem=MixtureProblem(), taus=(0.04, 0.25), gammas=(0.1, 0.5, 1.0), K=50,
                     tol=1e-9, trajectories=None):
    """Per-step ``KL(p_data||p^{k+1}) - KL(p_data||p^k) <= -gamma KL(p_tau*||p_tau^k)``."""
    p_data = problem.data()
    trajectories = trajectories or gamma_trajectories(problem, taus, gammas, K)
    rows, worst = [], math.inf
    for (tau, gamma), (p_tau_star, traj) in trajectories.items():
        kls = [kl_divergence(p_data, p) for p in traj]
        for k in range(len(traj) - 1):
            lhs = kls[k + 1] - kls[k]
            rhs = -gamma * kl_divergence(p_tau_star, grid_convolve(traj[k], tau))
            margin = rhs - lhs
            worst = min(worst, margin)
            rows.append(("kl_descent", f"tau={tau},gamma={gamma}", k, lhs, rhs, margin))
    return CheckResult("kl_descent", worst >= -tol, f"worst margin {worst:.3e} (tolerance {tol:g})", rows)


@_timed
def check_cf_bound(problem=MixtureProblem(), taus=(0.04, 0.25), gammas=(0.1, 0.5, 1.0),
                   Ks=(5, 10, 20, 50), probes=(0.5, 1.0, 2.0), trajectories=None):
    """``min_{1<=k<=K} |Phi_data(u) - Phi_{p^k}(u)| <= exp(tau u^2/2) sqrt(2 KL0 / (gamma K))``."""
    p_data, p_clean = problem.data(), problem.clean()
    kl0 = kl_divergence(p_data, p_clean)
    trajectories = trajectories or gamma_trajectories(problem, taus, gammas, max(Ks))
    rows, worst = [], math.inf
    for (tau, gamma), (_, traj) in trajectories.items():
        for u in probes:
            phi = char_fn(p_data, u)
            gaps = np.array([abs(phi - char_fn(p, u)) for p in traj])
            for K in Ks:
                lhs = float(gaps[1 : K + 1].min())
                rhs = math.exp(0.5 * tau * u * u) * math.sqrt(2 * kl0 / (gamma * K))
                worst = min(worst, rhs - lhs)
                rows.append(("cf_bound", f"tau={tau},gamma={gamma},u={u}", K, lhs, rhs, rhs - lhs))
    return CheckResult("cf_bound", worst >= 0, f"worst margin {worst:.3e}, KL0={kl0:.4f}", rows)


@_timed
def check_flow(problem=MixtureProblem(), tau=0.25, d_kappas=(0.05, 0.01), kappa=2.0,
               order_steps=(0.05, 0.025, 0.0125), tol=1e-9, ratio_band=(1.7, 2.3)):
    """KL decay along the flow plus the first-order convergence of explicit Euler.

    The order check compares successive halvings:
    ``TV(p_h, p_{h/2}) / TV(p_{h/2}, p_{h/4})`` should be close to 2.
    """
    p_data, p_clean = problem.data(), problem.clean()
    p_tau_star = grid_convolve(p_data, tau)
    rows, worst = [], math.inf
    cache = {}

    def run(h):
        if h not in cache:
            cache[h] = grid_flow_integrate(p_data, p_clean, tau, h, kappa, p_tau_star=p_tau_star)
        return cache[h]

    for h in d_kappas:
        traj = run(h)
        kls = [kl_divergence(p_data, p) for p in traj.measures]
        for k in range(len(kls) - 1):
            margin = -(kls[k + 1] - kls[k])
            worst = min(worst, margin)
            rows.append(("flow_kl", f"d_kappa={h}", k, kls[k + 1] - kls[k], 0.0, margin))
    monotone = worst >= -tol

    ends = [run(h).at(kappa) for h in order_steps]
    diffs = [tv_distance(ends[i], ends[i + 1]) for i in range(len(ends) - 1)]
    ratios = [diffs[i] / diffs[i + 1] for i in range(len(diffs) - 1)]
    for i, r in enumerate(ratios):
        rows.append(("flow_order", f"d_kappa={order_steps[i]}", i, r, 2.0, min(r - ratio_band[0], ratio_band[1] - r)))
    in_band = all(ratio_band[0] <= r <= ratio_band[1] for r in ratios)
    ratio_text = ", ".join(f"{r:.3f}" for r in ratios)
    return CheckResult(
        "flow",
        monotone and in_band,
        f"worst KL-step margin {worst:.3e}; halving TV ratios {ratio_text}",
        rows,
    )


def _log_density_drift(p: GridMeasure, t, x):
    return grid_log_density(p, t, x), grid_posterior_drift(p, t, x)


@_timed
def check_drift_identity(problem=MixtureProblem(), tau=0.25, gamma=0.3, t_fracs=(0.05, 0.1, 0.2), tol=1e-8):
    """One gamma-step moves the drift by ``-gamma (s^k - s_m0) dm0_t / dP^{k+1}_t``.

    The left side is that functional-gradient update; the right side is the
    posterior-mean drift of the mixture ``(1 - gamma) p^k + gamma m0``.
    """
    p_data, p_clean = problem.data(), problem.clean()
    p_tau_star = grid_convolve(p_data, tau)
    # a non-trivial starting point: one exact step away from the clean law
    pk = mixture(p_clean, grid_m_step(p_clean, p_tau_star, tau), 0.5)
    m0 = grid_m_step(pk, p_tau_star, tau)
    p_next = mixture(pk, m0, gamma)
    x = pk.nodes
    rows, worst = [], 0.0
    for frac in t_fracs:
        t = frac * tau
        log_pk, s_k = _log_density_drift(pk, t, x)
        log_m0, s_m0 = _log_density_drift(m0, t, x)
        log_mix = np.logaddexp(math.log1p(-gamma) + log_pk, math.log(gamma) + log_m0)
        ratio = np.exp(log_m0 - log_mix)
        updated = s_k - gamma * (s_k - s_m0) * ratio
        direct = grid_posterior_drift(p_next, t, x)
        err = float(np.max(np.abs(updated - direct)))
        worst = max(worst, err)
        rows.append(("drift_identity", f"t={t:g}", 0, err, tol, tol - err))
    return CheckResult("drift_identity", worst < tol, f"max node error {worst:.3e} (tolerance {tol:g})", rows)


@_timed
def check_oracle_agreement(lo=-12.0, hi=12.0, n=2048, tol_moment=1e-4, tol_fixed=1e-10):
    """Gaussian closed form vs grid Bayes reweighting, plus fixed points of both."""
    rows = []
    prior_g = GaussianMeasure([0.0], [[1.0]])
    truth_g = GaussianMeasure([0.0], [[2.0]])
    tau = 1.0
    m_g = gaussian_m_step(prior_g, truth_g, tau)

    prior = gaussian_mixture_grid(lo, hi, n, [1.0], [0.0], [1.0])
    truth = gaussian_mixture_grid(lo, hi, n, [1.0], [0.0], [math.sqrt(2.0)])
    m_grid = grid_m_step(prior, grid_convolve(truth, tau), tau)
    mean_err = abs(m_grid.mean() - float(m_g.mean[0]))
    var_err = abs(m_grid.var() - float(m_g.cov[0, 0]))
    rows.append(("oracle_agreement", "mean", 0, mean_err, tol_moment, tol_moment - mean_err))
    rows.append(("oracle_agreement", "variance", 0, var_err, tol_moment, tol_moment - var_err))

    fixed_grid = tv_distance(grid_m_step(truth, grid_convolve(truth, tau), tau), truth)
    fixed_g = gaussian_m_step(truth_g, truth_g, tau)
    fixed_gauss = float(max(np.abs(fixed_g.mean - truth_g.mean).max(), np.abs(fixed_g.cov - truth_g.cov).max()))
    rows.append(("oracle_agreement", "grid_fixed_point", 0, fixed_grid, tol_fixed, tol_fixed - fixed_grid))
    rows.append(("oracle_agreement", "gaussian_fixed_point", 0, fixed_gauss, tol_fixed, tol_fixed - fixed_gauss))
    passed = mean_err < tol_moment and var_err < tol_moment and fixed_grid < tol_fixed and fixed_gauss < tol_fixed
    summary = (
        f"m0 variance {float(m_g.cov[0, 0]):.6f} (grid {m_grid.var():.6f}); "
        f"fixed-point errors grid {fixed_grid:.1e}, gaussian {fixed_gauss:.1e}"
    )
    return CheckResult("oracle_agreement", passed, summary, rows)


def run_suite(problem=MixtureProblem(), K=50):
    """All oracle checks; the gamma trajectories are shared between the first two."""
    traj = gamma_trajectories(problem, (0.04, 0.25), (0.1, 0.5, 1.0), K)
    return [
        check_kl_descent(problem, trajectories=traj),
        check_cf_bound(problem, Ks=tuple(k for k in (5, 10, 20, 50) if k <= K), trajectories=traj),
        check_flow(problem),
        check_drift_identity(problem),
        check_oracle_agreement(),
    ]


def write_margins_csv(results, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MARGIN_COLUMNS)
        for res in results:
            for row in res.rows:
                writer.writerow([row[0], row[1], row[2], repr(float(row[3])), repr(float(row[4])), repr(float(row[5]))])


def format_table(results):
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  result  seconds  detail"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL':<6}  {r.seconds:7.2f}  {r.summary}")
    return "\n".join(lines)


__all__ = [
    "CheckResult",
    "MixtureProblem",
    "check_kl_descent",
    "check_cf_bound",
    "check_flow",
    "check_drift_identity",
    "check_oracle_agreement",
    "run_suite",
    "write_margins_csv",
    "format_table",
]
