import math

import numpy as np
import pytest
from scipy.optimize import minimize

from sfbd_lab.diffusion import DiffusionSchedule, SolverConfig, backward_solve, score_fn_of
from sfbd_lab.errors import ContractViolation
from sfbd_lab.losses import Batch, consistency_loss, denoising_loss, drift_matching_loss
from sfbd_lab.numerics import autodiff as ad
from sfbd_lab.numerics.mlp import FrozenDenoiser, MlpSpec, init_params, mlp_forward
from sfbd_lab.numerics.optim import OptimizerState, optimizer_step
from sfbd_lab.oracles import GridMeasure, grid_posterior_mean

SPEC = MlpSpec(2, (8, 8), "smooth-relu", 4)
SPEC_1D = MlpSpec(1, (8, 8), "smooth-relu", 4)
SDE = SolverConfig(n_steps=16, scheme="euler-maruyama-sde")


def value(x):
    return float(ad.value_of(x))


def fd_check(loss, params, h=1e-5):
    g = ad.grad_params(loss, params)
    fd = np.empty_like(params)
    for i in range(params.size):
        e = np.zeros_like(params)
        e[i] = h
        fd[i] = (value(loss(params + e)) - value(loss(params - e))) / (2 * h)
    return np.linalg.norm(g - fd) / np.linalg.norm(fd)


def test_zero_residual_gives_zero_loss():
    schedule = DiffusionSchedule(tau=0.25)
    batch = Batch(np.zeros((3, 2)), x_t=np.zeros((3, 2)), t=schedule.t_min)
    assert value(denoising_loss(SPEC, np.zeros(SPEC.n_params), batch, schedule, None)) == 0.0


def test_denoising_loss_arithmetic(rng):
    schedule = DiffusionSchedule(tau=0.25)
    x0 = np.array([[1.0, -2.0]])
    x_t = np.array([[0.5, 0.5]])
    t = 0.7
    # zero parameters leave only the skip branch, D = x / (1 + t)
    expected = (1 + t) / t * np.sum((x_t / (1 + t) - x0) ** 2)
    got = value(denoising_loss(SPEC, np.zeros(SPEC.n_params), Batch(x0, x_t=x_t, t=t), schedule, None))
    assert got == pytest.approx(expected, rel=1e-14)


def test_denoising_loss_weights_replace_average():
    schedule = DiffusionSchedule(tau=0.25)
    x0 = np.array([[1.0, 0.0], [0.0, 0.0]])
    batch = Batch(x0, x_t=np.zeros((2, 2)), t=1.0, weights=[3.0, 1.0])
    assert value(denoising_loss(SPEC, np.zeros(SPEC.n_params), batch, schedule, None)) == pytest.approx(1.5)


@pytest.mark.parametrize("t", [0.1, 1.0, 5.0])
def test_exact_gaussian_denoiser_loss(t):
    # zero parameters give D = x / (1 + t), the exact posterior mean for N(0, I) data;
    # the expected weighted loss is w(t) * d * t / (1 + t) = d
    rng = np.random.default_rng(1)
    schedule = DiffusionSchedule(tau=0.25, time_law="point")
    n = 100_000
    x0 = rng.standard_normal((n, 2))
    x_t = x0 + math.sqrt(t) * rng.standard_normal(x0.shape)
    params = np.zeros(SPEC.n_params)
    per_item = (1 + t) / t * np.sum((x_t / (1 + t) - x0) ** 2, axis=1)
    loss = value(denoising_loss(SPEC, params, Batch(x0, x_t=x_t, t=t), schedule, None))
    assert loss == pytest.approx(per_item.mean(), rel=1e-12)
    assert abs(loss - 2.0) < 3 * per_item.std() / math.sqrt(n)


def test_denoising_gradient_matches_finite_differences(rng):
    schedule = DiffusionSchedule(tau=0.25)
    params = init_params(SPEC, rng, out_scale=1.0)
    x0 = rng.standard_normal((6, 2))
    t = np.exp(rng.uniform(-3, 1, 6))
    batch = Batch(x0, x_t=x0 + np.sqrt(t)[:, None] * rng.standard_normal((6, 2)), t=t)
    assert fd_check(lambda v: denoising_loss(SPEC, v, batch, schedule, None), params) < 1e-6


def test_batch_contract():
    with pytest.raises(ContractViolation):
        Batch(np.zeros((0, 2)))


def test_drift_matching_examples(rng):
    x0 = np.array([[1.0, 2.0]])
    x_t = np.array([[0.0, 0.5]])
    t = 1.0
    exact_pair = lambda x, tt: (x0 - x) / tt
    assert drift_matching_loss(exact_pair, x0, t, rng, x_t=x_t) == 0.0
    zero = lambda x, tt: np.zeros_like(x)
    assert drift_matching_loss(zero, x0, t, rng, x_t=x_t) == pytest.approx(0.5 * np.sum((x0 - x_t) ** 2))
    with pytest.raises(ContractViolation):
        drift_matching_loss(zero, x0, 0.0, rng)


@pytest.mark.parametrize("t", [0.05, 0.25])
def test_drift_matching_at_exact_gaussian_score(rng, t):
    n = 200_000
    x0 = rng.standard_normal((n, 2))
    x_t = x0 + math.sqrt(t) * rng.standard_normal(x0.shape)
    score = lambda x, tt: -x / (1 + tt)
    loss = drift_matching_loss(score, x0, t, rng, x_t=x_t)
    per_item = 0.5 * np.sum(((x0 - x_t) / t - score(x_t, t)) ** 2, axis=1)
    assert abs(loss - 2 / (2 * t * (1 + t))) < 3 * per_item.std() / math.sqrt(n)


def test_drift_matching_linear_family_minimizer(rng):
    t = 0.25
    n = 50_000
    x0 = rng.standard_normal((n, 1))
    x_t = x0 + math.sqrt(t) * rng.standard_normal(x0.shape)

    def objective(theta):
        a, b = theta
        return drift_matching_loss(lambda x, tt: a * x + b, x0, t, rng, x_t=x_t)

    res = minimize(objective, np.zeros(2), method="Nelder-Mead", options={"xatol": 1e-6, "fatol": 1e-10})
    assert abs(res.x[0] + 1 / (1 + t)) < 1e-2
    assert abs(res.x[1]) < 1e-2


def test_consistency_reduces_to_denoising_target_at_r0(rng):
    params = init_params(SPEC, rng, out_scale=1.0)
    x_s = rng.standard_normal((5, 2))
    s = 0.5
    loss = value(consistency_loss(SPEC, params, 0.0, s, x_s, SDE, np.random.default_rng(7)))
    score = score_fn_of(FrozenDenoiser(SPEC, params))
    x0 = backward_solve(score, x_s, s, 0.0, SDE, np.random.default_rng(7))
    manual = np.mean(np.sum((mlp_forward(params, SPEC, x_s, s) - x0) ** 2, axis=1))
    assert loss == pytest.approx(manual, rel=1e-12)


def test_consistency_zero_when_inner_matches(rng):
    params = init_params(SPEC, rng, out_scale=1.0)
    x_s = rng.standard_normal((4, 2))
    s = 0.5
    target = mlp_forward(params, SPEC, x_s, s)

    def sampler(x, ss, r, rng_):
        # at r = 0 the network is the identity, so the inner draws are the targets themselves
        return target[None], np.ones((1, x.shape[0]))

    assert value(consistency_loss(SPEC, params, 0.0, s, x_s, SDE, rng, inner_sampler=sampler)) == pytest.approx(0, abs=1e-28)


def test_consistency_contract(rng):
    with pytest.raises(ContractViolation):
        consistency_loss(SPEC, np.zeros(SPEC.n_params), 0.5, 0.5, np.zeros((1, 2)), SDE, rng)


def test_consistency_tower_property_for_exact_denoiser(rng):
    # zero parameters are the exact N(0, I) denoiser, so E[D(x_r, r) | x_s] = D(x_s, s)
    # and the estimate is the inner variance divided by the number of inner draws
    params = np.zeros(SPEC_1D.n_params)
    tau = 1.0
    x_s = math.sqrt(1 + tau) * rng.standard_normal((2000, 1))
    losses = [value(consistency_loss(SPEC_1D, params, tau / 2, tau, x_s, SDE, rng, n_inner=k)) for k in (1, 4, 16)]
    assert losses[0] > losses[1] > losses[2]
    # Var(D(x_r, r) | x_s) = Var(x_r | x_s) / (1 + r)^2 with Var(x_r | x_s) = r (s - r) / s * (1 + ...) bounded by r
    assert losses[2] < losses[0] / 8
    assert losses[0] < (tau / 2) / (1 + tau / 2) ** 2


@pytest.mark.parametrize("stop", [True, False])
def test_consistency_gradient_matches_finite_differences(rng, stop):
    params = init_params(SPEC, rng, out_scale=1.0)
    x_s = rng.standard_normal((4, 2))
    fixed = rng.standard_normal((3, 4, 2))
    weights = np.full((3, 4), 1 / 3)

    def sampler(x, s, r, rng_):
        return fixed, weights

    def loss(v):
        return consistency_loss(SPEC, v, 0.1, 0.6, x_s, SDE, rng, stop_gradient_inner=stop, inner_sampler=sampler)

    if stop:
        # finite differences see the inner term move too, so compare against the detached target
        target = np.einsum("kn,knd->nd", weights, mlp_forward(params, SPEC, fixed.reshape(12, 2), 0.1).reshape(3, 4, 2))

        def reference(v):
            resid = mlp_forward(v, SPEC, x_s, 0.6) - target
            return ad.mean(ad.total(ad.square(resid), axis=1))

        g = ad.grad_params(loss, params)
        np.testing.assert_allclose(g, ad.grad_params(reference, params), rtol=1e-10, atol=1e-14)
    else:
        assert fd_check(loss, params) < 1e-6


def test_training_approaches_posterior_mean():
    rng = np.random.default_rng(0)
    lo, hi, n = -4.0, 4.0, 81
    atoms = np.array([-2.0, -1.0, 0.0, 1.0, 2.0])
    mass = np.zeros(n)
    mass[np.rint((atoms - lo) / (hi - lo) * (n - 1)).astype(int)] = 1.0
    prior = GridMeasure.from_mass(lo, hi, mass)
    spec = MlpSpec(1, (32, 32), "smooth-relu", 8)
    schedule = DiffusionSchedule(tau=0.25, T=2.0, t_min=0.1, time_law="uniform")
    probes_t = (0.25, 0.5, 1.0)
    probes_x = np.linspace(-2.5, 2.5, 41)

    def sup_error(v):
        return max(
            np.max(np.abs(mlp_forward(v, spec, probes_x[:, None], t)[:, 0] - grid_posterior_mean(prior, t, probes_x)))
            for t in probes_t
        )

    params = init_params(spec, rng)
    state = OptimizerState.zeros_like(params)
    errors = [sup_error(params)]
    for checkpoint in range(8):
        state.learning_rate = 3e-3 * 0.6**checkpoint
        for _ in range(250):
            x0 = atoms[rng.integers(0, 5, 1024)][:, None]
            _, g = ad.value_and_grad(lambda v: denoising_loss(spec, v, Batch(x0), schedule, rng), params)
            params = optimizer_step(state, params, g)
        errors.append(sup_error(params))
    for before, after in zip(errors, errors[1:]):
        assert after <= 1.05 * before
    assert errors[-1] < 0.5 * errors[0]
