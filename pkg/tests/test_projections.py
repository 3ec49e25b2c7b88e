import itertools
import math
import threading

import numpy as np
import pytest

from sfbd_lab.diffusion import DiffusionSchedule, SolverConfig, make_denoise_fn
from sfbd_lab.errors import ConfigError, ContractViolation, DivergedTrajectoryError
from sfbd_lab.numerics.mlp import DenoiserModel, MlpSpec
from sfbd_lab.numerics.optim import OptimizerState
from sfbd_lab.oracles import GaussianMeasure, gaussian_denoiser, gaussian_m_step
from sfbd_lab.projections import (
    MixTarget,
    SamplePool,
    d_proj_full,
    ema_denoise_fn,
    gamma_pool_update,
    load_pool,
    m_proj,
    replacement_count,
    sample_training_batch,
    save_pool,
    warmup_decay,
)

SPEC = MlpSpec(2, (16, 16), "smooth-relu", 4)


def shift_denoiser(offset):
    """Deterministic stand-in denoiser that adds ``offset`` to every point."""

    def fn(x, rng):
        return x + offset

    fn.tag = f"shift{offset}"
    return fn


def make_pool(n_noisy=10, n_clean=3, dim=2, seed=0, **kw):
    r = np.random.default_rng(seed)
    return SamplePool(r.standard_normal((n_clean, dim)), r.standard_normal((n_noisy, dim)), 0.25, **kw)


def test_pool_contracts():
    with pytest.raises(ContractViolation):
        SamplePool(None, np.zeros((0, 2)), 0.25)
    with pytest.raises(ContractViolation):
        SamplePool(np.zeros((2, 3)), np.zeros((4, 2)), 0.25)
    with pytest.raises(ContractViolation):
        SamplePool(None, np.zeros((4, 2)), 0.25, denoised=np.zeros((3, 2)))
    with pytest.raises(ConfigError):
        SamplePool(None, np.zeros((4, 2)), 0.25, selection="random-walk")


def test_full_update_recomputes_every_entry(rng):
    pool = make_pool().initialize(shift_denoiser(1.0), rng)
    d_proj_full(pool, shift_denoiser(2.0), rng)
    np.testing.assert_array_equal(pool.snapshot(), pool.noisy + 2.0)
    assert pool.replaced_count == 20
    assert np.all(pool.refresh_counts == 2)
    assert pool.denoiser_tags == {"shift1.0", "shift2.0"}


def test_partial_update_counts(rng):
    pool = make_pool().initialize(shift_denoiser(0.0), rng)
    before = pool.snapshot()
    gamma_pool_update(pool, shift_denoiser(5.0), 0.1, rng)
    changed = np.flatnonzero(np.any(pool.snapshot() != before, axis=1))
    assert changed.size == 1
    assert pool.replaced_count == 11
    assert replacement_count(0.1, 10) == 1
    assert replacement_count(64 / 5000, 5000) == 64
    assert replacement_count(0.001, 10) == 1


def test_partial_update_contracts(rng):
    pool = make_pool()
    with pytest.raises(ContractViolation):
        gamma_pool_update(pool, shift_denoiser(0.0), 0.5, rng)
    pool.initialize(shift_denoiser(0.0), rng)
    for gamma in (0.0, 1.5, -0.1):
        with pytest.raises(ContractViolation):
            gamma_pool_update(pool, shift_denoiser(0.0), gamma, rng)


def test_round_robin_cycles_through_pool(rng):
    pool = make_pool(selection="round-robin").initialize(shift_denoiser(0.0), rng)
    for _ in range(5):
        gamma_pool_update(pool, shift_denoiser(1.0), 0.3, rng)
    # 5 refreshes of 3 entries cover the 10-entry pool once plus 5 more
    assert sorted(pool.refresh_counts) == [2] * 5 + [3] * 5


def test_uniform_selection_is_uniform(rng):
    pool = make_pool(n_noisy=20).initialize(shift_denoiser(0.0), rng)
    hits = np.zeros(20)
    trials = 4000
    for _ in range(trials):
        idx = pool.select(5, rng)
        assert len(set(idx)) == 5
        hits[idx] += 1
    p = 5 / 20
    assert np.all(np.abs(hits / trials - p) < 4 * math.sqrt(p * (1 - p) / trials))


def test_noisy_set_is_never_modified(rng):
    pool = make_pool().initialize(shift_denoiser(0.0), rng)
    noisy = pool.noisy.copy()
    for _ in range(5):
        gamma_pool_update(pool, shift_denoiser(3.0), 0.5, rng)
    assert np.array_equal(pool.noisy, noisy)
    with pytest.raises(ValueError):
        pool.noisy[0, 0] = 1.0


def test_snapshot_is_isolated_from_later_updates(rng):
    pool = make_pool().initialize(shift_denoiser(0.0), rng)
    snap = pool.snapshot()
    copy = snap.copy()
    gamma_pool_update(pool, shift_denoiser(9.0), 0.5, rng)
    assert np.array_equal(snap, copy)
    with pytest.raises(ValueError):
        snap[0, 0] = 0.0


def test_concurrent_readers_never_see_torn_batch():
    pool = SamplePool(None, np.zeros((500, 2)), 0.25, denoised=np.zeros((500, 2)))
    everything = np.arange(500)
    stop = threading.Event()
    torn = []

    def writer():
        for v in range(1, 400):
            pool.replace(everything, np.full((500, 2), float(v)))
        stop.set()

    def reader():
        while not stop.is_set():
            snap = pool.snapshot()
            if snap.min() != snap.max():
                torn.append(snap)

    threads = [threading.Thread(target=writer)] + [threading.Thread(target=reader) for _ in range(3)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    assert not torn
    assert pool.snapshot()[0, 0] == 399.0


def test_expected_pool_law_is_the_mixture():
    # average the empirical law of the pool over every equally likely index subset
    n, k = 6, 2
    gamma = k / n
    noisy = np.arange(n, dtype=np.float64)[:, None]
    old, new = noisy + 100.0, noisy + 200.0
    atoms = np.concatenate([old[:, 0], new[:, 0]])
    expected = np.r_[np.full(n, (1 - gamma) / n), np.full(n, gamma / n)]
    law = np.zeros(2 * n)
    subsets = list(itertools.combinations(range(n), k))
    for subset in subsets:
        pool = SamplePool(None, noisy, 0.25, denoised=old)
        idx = np.array(subset)
        pool.replace(idx, new[idx])
        law += (pool.snapshot()[:, 0][:, None] == atoms[None, :]).sum(axis=0) / n
    law /= len(subsets)
    assert np.max(np.abs(law - expected)) < 1e-12


def test_diverged_index_refers_to_pool_entry(rng):
    pool = make_pool(selection="round-robin").initialize(shift_denoiser(0.0), rng)
    pool._cursor = 4

    def failing(x, r):
        raise DivergedTrajectoryError("boom", step=7, index=1)

    with pytest.raises(DivergedTrajectoryError) as info:
        gamma_pool_update(pool, failing, 0.3, rng)
    assert info.value.index == 5 and info.value.step == 7
    assert pool.replaced_count == 10


def test_mix_target_alpha_one_draws_only_clean(rng):
    pool = make_pool().initialize(shift_denoiser(50.0), rng)
    batch = sample_training_batch(MixTarget(pool, 1.0), 500, rng)
    clean_rows = {tuple(r) for r in pool.clean}
    assert all(tuple(r) in clean_rows for r in batch)
    batch = sample_training_batch(MixTarget(pool, 0.0), 500, rng)
    assert np.all(batch > 40)


def test_mix_target_union_weights(rng):
    pool = make_pool(n_noisy=30, n_clean=10).initialize(shift_denoiser(50.0), rng)
    mix = MixTarget(pool)
    assert mix.clean_probability() == 0.25
    batch = sample_training_batch(mix, 20_000, rng)
    frac = np.mean(batch[:, 0] < 40)
    assert abs(frac - 0.25) < 4 * math.sqrt(0.25 * 0.75 / 20_000)


def test_mix_target_contracts(rng):
    with pytest.raises(ContractViolation):
        MixTarget(make_pool(), 1.5)
    empty_clean = SamplePool(None, np.zeros((4, 2)), 0.25)
    with pytest.raises(ContractViolation):
        sample_training_batch(MixTarget(empty_clean, 0.5), 4, rng)
    with pytest.raises(ContractViolation):
        sample_training_batch(MixTarget(make_pool(), 0.5), 4, rng)
    # clean-only target works before the pool is initialized
    assert sample_training_batch(MixTarget(make_pool(), 1.0), 4, rng).shape == (4, 2)


def test_m_proj_zero_steps_leaves_model(rng):
    pool = make_pool().initialize(shift_denoiser(0.0), rng)
    model = DenoiserModel.create(SPEC, rng)
    before = model.copy()
    opt = OptimizerState.zeros_like(model.params)
    m_proj(pool, model, 0, MixTarget(pool), DiffusionSchedule(0.25), opt, rng)
    assert np.array_equal(model.params, before.params) and np.array_equal(model.ema, before.ema)
    assert opt.step_count == 0


def test_m_proj_learns_point_mass():
    rng = np.random.default_rng(0)
    c = np.array([1.0, -0.5])
    pool = SamplePool(None, np.zeros((4, 2)), 0.25, denoised=np.tile(c, (4, 1)))
    model = DenoiserModel.create(MlpSpec(2, (32, 32), "smooth-relu", 8), rng, ema_decay=0.99)
    opt = OptimizerState.zeros_like(model.params, learning_rate=3e-3)
    m_proj(pool, model, 3000, MixTarget(pool, 0.0), DiffusionSchedule(0.25, T=1.0), opt, rng, batch_size=128)
    assert len(model.meta["last_losses"]) == 3000
    grid = np.stack(np.meshgrid(np.linspace(-2, 2, 9), np.linspace(-2, 2, 9)), -1).reshape(-1, 2)
    for t in (0.01, 0.05):
        out = model(c + math.sqrt(t) * grid, t, use_ema=True)
        assert np.max(np.linalg.norm(out - c, axis=1)) < 0.05 * np.linalg.norm(c)


def test_full_update_with_deterministic_solver_is_idempotent(rng):
    model = DenoiserModel.create(SPEC, rng)
    pool = make_pool(n_noisy=50)
    fn = ema_denoise_fn(model, pool.tau, SolverConfig(n_steps=16))
    d_proj_full(pool, fn, rng)
    first = pool.snapshot()
    d_proj_full(pool, fn, rng)
    assert np.array_equal(pool.snapshot(), first)
    assert pool.denoiser_tags == {"ema"}


def test_gaussian_full_update_matches_m_step(rng):
    n, tau = 50_000, 1.0
    prior = GaussianMeasure([0.0], [[1.0]])
    truth = GaussianMeasure([0.0], [[2.0]])
    noisy = math.sqrt(3.0) * rng.standard_normal((n, 1))
    pool = SamplePool(None, noisy, tau)
    fn = make_denoise_fn(gaussian_denoiser(prior), tau, SolverConfig(n_steps=256, scheme="euler-maruyama-sde"))
    d_proj_full(pool, fn, rng)
    target = gaussian_m_step(prior, truth, tau).cov[0, 0]
    assert target == pytest.approx(1.25)
    assert abs(pool.snapshot().var(ddof=1) - target) < 3 * target * math.sqrt(2 / (n - 1))


def test_pool_save_load_round_trip(tmp_path, rng):
    pool = make_pool(selection="round-robin").initialize(shift_denoiser(1.0), rng)
    gamma_pool_update(pool, shift_denoiser(2.0), 0.3, rng)
    save_pool(pool, tmp_path / "pool.npz")
    back = load_pool(tmp_path / "pool.npz")
    assert np.array_equal(back.snapshot(), pool.snapshot())
    assert np.array_equal(back.noisy, pool.noisy) and np.array_equal(back.clean, pool.clean)
    assert back.replaced_count == pool.replaced_count and back._cursor == pool._cursor
    assert np.array_equal(back.refresh_counts, pool.refresh_counts)
    assert back.tau == pool.tau and back.selection == "round-robin"


def test_load_pool_rejects_foreign_file(tmp_path):
    np.savez(tmp_path / "x.npz", header=np.frombuffer(b'{"magic": "nope"}', dtype=np.uint8))
    with pytest.raises(ConfigError):
        load_pool(tmp_path / "x.npz")


def test_warmup_decay():
    assert warmup_decay(0.999, 0) == pytest.approx(0.1)
    assert warmup_decay(0.999, 10**6) == 0.999
    assert all(warmup_decay(0.99, k) <= warmup_decay(0.99, k + 1) for k in range(100))
