"""Training objectives: denoising score matching, drift matching, consistency."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import (
    DiffusionSchedule,
    SolverConfig,
    backward_solve,
    forward_sample,
    sample_time,
    score_fn_of,
)
from .errors import ContractViolation
from .numerics import autodiff as ad
from .numerics.mlp import FrozenDenoiser, MlpSpec, mlp_forward


@dataclass
class Batch:
    """Targets ``x0`` with optional pre-drawn ``x_t``/``t`` and per-item weights.

    Weights, when given, replace the uniform ``1/n`` average (they are
    normalized to sum to one).
    """

    x0: np.ndarray
    x_t: np.ndarray | None = None
    t: np.ndarray | None = None
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.x0 = np.atleast_2d(np.asarray(self.x0, dtype=np.float64))
        if self.x0.shape[0] == 0:
            raise ContractViolation("batch must be nonempty")
        n = self.x0.shape[0]
        if self.x_t is not None:
            self.x_t = np.asarray(self.x_t, dtype=np.float64).reshape(self.x0.shape)
        if self.t is not None:
            self.t = np.broadcast_to(np.asarray(self.t, dtype=np.float64), (n,)).copy()
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64).reshape(n)
            self.weights = w / w.sum()

    def __len__(self):
        return self.x0.shape[0]


def _weighted_mean(per_item, weights):
    if weights is None:
        return ad.mean(per_item)
    return ad.total(per_item * weights)


def denoising_loss(spec: MlpSpec, params, batch: Batch, schedule: DiffusionSchedule, rng):
    """Mean of ``w(t) ||D(x_t, t) - x0||^2`` over the batch.

    Missing ``t`` are drawn from the schedule's time law and missing ``x_t``
    by the forward kernel. Differentiable in ``params`` when it is a ``Var``.
    """
    t = batch.t if batch.t is not None else sample_time(schedule, rng, len(batch))
    x_t = batch.x_t if batch.x_t is not None else forward_sample(batch.x0, t, rng)
    resid = mlp_forward(params, spec, x_t, t) - batch.x0
    per_item = ad.total(ad.square(resid), axis=1) * schedule.weight(t)
    return _weighted_mean(per_item, batch.weights)


def drift_matching_loss(score_fn, x0, t, rng, x_t=None):
    """Monte-Carlo estimate of ``E 1/2 ||(x0 - x_t)/t - s_t(x_t)||^2``.

    ``x0`` are draws from the source measure; ``x_t`` is drawn by the forward
    kernel unless given (paired sampling).
    """
    if not t > 0:
        raise ContractViolation(f"drift matching needs t > 0, got {t}")
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    if x_t is None:
        x_t = forward_sample(x0, t, rng)
    x_t = np.asarray(x_t, dtype=np.float64).reshape(x0.shape)
    resid = (x0 - x_t) / t - score_fn(x_t, t)
    return float(0.5 * np.mean(np.sum(resid * resid, axis=1)))


def consistency_loss(
    spec: MlpSpec,
    params,
    r,
    s,
    x_s,
    solver: SolverConfig,
    rng,
    stop_gradient_inner=True,
    n_inner=1,
    inner_sampler=None,
):
    """``mean ||D(x_s, s) - E[D(x_r, r) | x_s]||^2``.

    The inner expectation averages ``n_inner`` draws ``x_r`` obtained by
    solving backward from ``s`` to ``r`` with the network's own (detached)
    score. ``inner_sampler(x_s, s, r, rng) -> (x_r, weights)`` replaces that
    draw; ``x_r`` has shape ``(k, n, d)`` and ``weights`` shape ``(k, n)``
    with columns summing to one, which allows exact quadrature of the inner
    expectation when the conditional law is known.
    """
    if not 0 <= r < s:
        raise ContractViolation(f"need 0 <= r < s, got r={r}, s={s}")
    x_s = np.atleast_2d(np.asarray(x_s, dtype=np.float64))
    n, d = x_s.shape

    if inner_sampler is None:
        frozen = FrozenDenoiser(spec, ad.detach(params))
        score = score_fn_of(frozen)
        draws = [backward_solve(score, x_s, s, r, solver, rng) for _ in range(n_inner)]
        x_r = np.stack(draws)
        weights = np.full((n_inner, n), 1.0 / n_inner)
    else:
        x_r, weights = inner_sampler(x_s, s, r, rng)
        x_r = np.asarray(x_r, dtype=np.float64)
        weights = np.asarray(weights, dtype=np.float64)
    k = x_r.shape[0]

    inner_params = ad.detach(params) if stop_gradient_inner else params
    d_r = mlp_forward(inner_params, spec, x_r.reshape(k * n, d), r)
    # weighted sum over the k inner draws, as a (n*k)x(n) linear map so it stays on the tape
    if isinstance(d_r, ad.Var):
        pick = np.zeros((n, k * n))
        rows = np.tile(np.arange(n), k)
        pick[rows, np.arange(k * n)] = weights.reshape(k * n)
        target = pick @ d_r
    else:
        target = np.einsum("kn,knd->nd", weights, d_r.reshape(k, n, d))

    resid = mlp_forward(params, spec, x_s, s) - target
    return ad.mean(ad.total(ad.square(resid), axis=1))
