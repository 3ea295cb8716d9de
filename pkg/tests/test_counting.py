import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from cohfilter import fockspace as fs
from cohfilter import _engine as eng
from cohfilter._engine import SamplingError, TimeGrid
from cohfilter.rng import StreamBank
from cohfilter.counting import (
    JumpRecord,
    apply_jump,
    jump_intensity,
    nonlinear_drift_step,
    replay_counting,
    simulate_counting,
    sme_counting_step,
)
from cohfilter.master import lindblad_rhs
from cohfilter.model import DriveField, SystemModel


def _random_pure(rng, dim, n_max=None):
    n_max = dim - 3 if n_max is None else n_max
    x = np.zeros(dim, complex)
    x[:n_max] = rng.normal(size=n_max) + 1j * rng.normal(size=n_max)
    return fs.PureState(x / np.linalg.norm(x))


def _random_density(rng, dim, rank=3):
    vs = [_random_pure(rng, dim).amplitudes for _ in range(rank)]
    w = rng.dirichlet(np.ones(rank))
    return fs.DensityMatrix(sum(wi * np.outer(v, v.conj()) for wi, v in zip(w, vs)))


# --- intensity and jumps ---------------------------------------------------


def test_intensity_mu_zero_is_lambda_squared():
    rng = np.random.default_rng(1)
    f = 0.7 * np.exp(0.3j)
    for _ in range(5):
        assert jump_intensity(_random_pure(rng, 8), f, mu=0.0) == pytest.approx(0.49, abs=1e-15)


def test_dark_detector():
    assert jump_intensity(fs.vacuum(6), 0.0) == 0.0


def test_intensity_coherent():
    beta, f, mu = 0.8 - 0.3j, 0.4 * np.exp(1.1j), 0.9
    rate = jump_intensity(fs.coherent_state(20, beta), f, mu)
    assert rate == pytest.approx(abs(math.sqrt(mu) * beta + f) ** 2, abs=1e-8)


def test_intensity_expanded_form():
    rng = np.random.default_rng(2)
    psi = _random_pure(rng, 10)
    f, mu = 0.3 - 0.5j, 1.7
    b = fs.annihilation(10)
    eb = fs.expectation(b, psi)
    n = fs.expectation(fs.number(10), psi).real
    expanded = mu * n + 2 * math.sqrt(mu) * (eb * np.conj(f)).real + abs(f) ** 2
    assert jump_intensity(psi, f, mu) == pytest.approx(expanded, rel=1e-12)
    assert jump_intensity(psi.projector(), f, mu) == pytest.approx(expanded, rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), re=st.floats(-3, 3), im=st.floats(-3, 3), mu=st.floats(0, 4))
def test_intensity_nonnegative(seed, re, im, mu):
    rng = np.random.default_rng(seed)
    psi = _random_pure(rng, 9, n_max=9)
    assert jump_intensity(psi, complex(re, im), mu) >= 0.0
    # the destructive-interference point b phi = -f phi on a coherent state
    beta = complex(re, im) / 4
    assert jump_intensity(fs.coherent_state(30, beta), -math.sqrt(mu) * beta, mu) >= 0.0


def test_jump_mu_zero_unchanged():
    rng = np.random.default_rng(3)
    psi = _random_pure(rng, 7)
    out = apply_jump(psi, 0.5j, mu=0.0)
    assert np.allclose(out.amplitudes, 1j * psi.amplitudes, atol=1e-15)


def test_jump_one_photon_to_vacuum():
    out = apply_jump(fs.basis_state(5, 1), 0.0)
    assert abs(abs(out.amplitudes[0]) - 1) < 1e-15


def test_jump_coherent_invariant():
    beta = 0.9 + 0.2j
    psi = fs.coherent_state(20, beta)
    out = apply_jump(psi, 0.0)
    assert abs(np.vdot(psi.amplitudes, out.amplitudes)) ** 2 >= 1 - 1e-8


def test_zero_probability_jump_is_an_error():
    with pytest.raises(SamplingError):
        apply_jump(fs.vacuum(4), 0.0)


# --- drift and SME steps ---------------------------------------------------


def test_drift_free_evolution():
    m = SystemModel(dim=6, omega=1.0, mu=0.0, drive=DriveField(0.0))
    dt = 1e-3
    out = nonlinear_drift_step(fs.vacuum(6), m, 0.0, dt)
    assert abs(abs(out.amplitudes[0]) - 1) < 1e-12
    rng = np.random.default_rng(4)
    psi = _random_pure(rng, 6)
    exact = np.exp(-1j * np.diag(m.H).real * dt) * psi.amplitudes
    assert np.linalg.norm(nonlinear_drift_step(psi, m, 0.0, dt).amplitudes - exact) < 5 * dt**2


def test_drift_defect_second_order():
    m = SystemModel(dim=12, mu=1.0, drive=DriveField(0.5, phi=0.2))
    psi = _random_pure(np.random.default_rng(5), 12)
    _, d1 = nonlinear_drift_step(psi, m, 0.3, 1e-2, return_defect=True)
    _, d2 = nonlinear_drift_step(psi, m, 0.3, 5e-3, return_defect=True)
    assert d1 / d2 == pytest.approx(4.0, rel=0.05)


def test_drift_vacuum_channel():
    m = SystemModel(dim=8, mu=1.3, drive=DriveField(0.0))
    psi = _random_pure(np.random.default_rng(6), 8)
    dt = 1e-3
    n = fs.expectation(m.n_op, psi).real
    x = psi.amplitudes
    ref = x - dt * (m.K @ x - 0.5 * m.mu * n * x)
    ref = ref / np.linalg.norm(ref)
    assert np.allclose(nonlinear_drift_step(psi, m, 0.0, dt).amplitudes, ref, atol=1e-14)


def test_sme_unitary_trace_exact():
    m = SystemModel(dim=6, mu=0.0, drive=DriveField(0.0))
    rho = _random_density(np.random.default_rng(7), 6)
    out = sme_counting_step(rho, m, 0.0, 1e-3, 0)
    assert np.trace(out.entries).real == pytest.approx(1.0, abs=1e-15)


def test_sme_rejects_bad_dN():
    m = SystemModel(dim=4)
    with pytest.raises(ValueError):
        sme_counting_step(fs.vacuum(4).projector(), m, 0.0, 1e-3, 2)


def test_sme_matches_pure_filter_on_projectors():
    m = SystemModel(dim=12, mu=1.0, drive=DriveField(0.5))
    psi = _random_pure(np.random.default_rng(8), 12)
    dt = 1e-3
    drift = nonlinear_drift_step(psi, m, 0.2, dt)
    assert np.allclose(sme_counting_step(psi.projector(), m, 0.2, dt, 0).entries, drift.projector().entries, atol=1e-9)
    jump = apply_jump(psi, m.f(0.2), m.mu)
    out = sme_counting_step(psi.projector(), m, 0.2, dt, 1).entries
    assert np.allclose(out, jump.projector().entries, atol=1e-12)


def test_one_step_mean_matches_master_euler():
    rng = np.random.default_rng(9)
    for _ in range(20):
        lam, mu, phi = rng.uniform(0, 1), rng.uniform(0.1, 2), rng.uniform(0, 2 * np.pi)
        m = SystemModel(dim=10, omega=rng.uniform(0.5, 1.5), mu=mu, drive=DriveField(lam, phi=phi))
        rho = _random_density(rng, 10)
        t = rng.uniform(0, 3)

        def err(dt):
            p = jump_intensity(rho, m.f(t), mu) * dt
            avg = (1 - p) * sme_counting_step(rho, m, t, dt, 0).entries + p * sme_counting_step(rho, m, t, dt, 1).entries
            euler = rho.entries + dt * lindblad_rhs(m, rho.entries, t)
            return np.abs(avg - euler).max()

        e1, e2 = err(1e-3), err(5e-4)
        assert e1 < 50 * 1e-6
        assert e1 / e2 > 3.0


# --- trajectories ----------------------------------------------------------


def test_record_validation():
    with pytest.raises(ValueError):
        JumpRecord((0.5, 0.2), 1.0)
    with pytest.raises(ValueError):
        JumpRecord((1.5,), 1.0)
    rec = JumpRecord((0.1, 0.4), 1.0)
    assert list(rec.count([0.0, 0.1, 0.3, 1.0])) == [0, 1, 1, 2]


def test_reproducible():
    m = SystemModel(dim=10, mu=1.0, drive=DriveField(0.8))
    a = simulate_counting(m, 2.0, 1e-3, seed=17)
    b = simulate_counting(m, 2.0, 1e-3, seed=17)
    assert np.array_equal(a.record.jump_times, b.record.jump_times)
    assert np.array_equal(a.states, b.states)
    c = simulate_counting(m, 2.0, 1e-3, seed=18)
    assert not np.array_equal(a.record.jump_times, c.record.jump_times)


def test_stored_states_normalized():
    m = SystemModel(dim=12, mu=1.0, drive=DriveField(0.7))
    for method in ("euler_bernoulli", "waiting_time"):
        tr = simulate_counting(m, 2.0, 1e-3, seed=3, method=method, stride=10)
        assert np.all(np.abs(np.sum(np.abs(tr.states) ** 2, axis=1) - 1) <= 1e-8)


def test_dark_unitary_no_jumps():
    m = SystemModel(dim=6, mu=0.0, drive=DriveField(0.0), initial=fs.basis_state(6, 2))
    tr = simulate_counting(m, 3.0, 1e-2, seed=1)
    assert len(tr.record) == 0
    assert np.allclose(np.abs(tr.states[:, 2]), 1.0)


def test_density_initial_state_uses_sme():
    m = SystemModel(dim=10, mu=1.0, drive=DriveField(0.5), initial=fs.vacuum(10).projector())
    tr = simulate_counting(m, 1.0, 1e-3, seed=5, stride=100)
    assert not tr.is_pure
    for s in tr.states:
        assert abs(np.trace(s).real - 1) <= 1e-8
    with pytest.raises(ValueError):
        simulate_counting(m, 1.0, 1e-3, method="waiting_time")


def _batch(model, t_final, dt, n, seed=0, method="euler_bernoulli"):
    grid = TimeGrid.from_dt(t_final, dt)
    run = eng.run_jump_pure if method == "euler_bernoulli" else eng.run_jump_linear
    res = run(model, grid, StreamBank(seed, range(n)), use_lo=False, hard_guard=False, strict=True)
    return grid, res.jumps


def test_batched_rows_match_single_trajectories():
    m = SystemModel(dim=10, mu=1.0, drive=DriveField(0.8))
    grid = TimeGrid.from_dt(2.0, 1e-3)
    for method in ("euler_bernoulli", "waiting_time"):
        _, jumps = _batch(m, 2.0, 1e-3, 6, seed=5, method=method)
        assert np.array_equal(jumps[0], simulate_counting(m, 2.0, 1e-3, seed=5, method=method).steps)
        run = eng.run_jump_pure if method == "euler_bernoulli" else eng.run_jump_linear
        alone = run(m, grid, StreamBank(5, [4]), use_lo=False, hard_guard=False, strict=True)
        assert np.array_equal(alone.jumps[0], jumps[4])
        assert jumps.sum() > 0


def test_poisson_regression_any_state():
    m = SystemModel(dim=8, mu=0.0, drive=DriveField(1.0), initial=fs.basis_state(8, 3))
    _, jumps = _batch(m, 20.0, 1e-2, 1000)
    counts = jumps.sum(axis=1)
    assert abs(counts.mean() - 20) <= 3 * math.sqrt(20 / 1000)
    assert 0.85 <= counts.var(ddof=1) / counts.mean() <= 1.15


def test_single_photon_waiting_time_law():
    m = SystemModel(dim=4, mu=1.0, drive=DriveField(0.0), initial=fs.basis_state(4, 1))
    for method in ("euler_bernoulli", "waiting_time"):
        grid, jumps = _batch(m, 10.0, 1e-3, 2000, seed=7, method=method)
        assert jumps.sum(axis=1).max() <= 1
        rows, steps = np.nonzero(jumps)
        times = (steps + 1) * grid.dt
        z = 1 - math.exp(-10.0)
        assert stats.kstest(times, lambda t: (1 - np.exp(-t)) / z).pvalue > 0.01


def test_linear_and_nonlinear_filters_agree_on_a_record():
    m = SystemModel(dim=20, mu=1.0, drive=DriveField(0.5))
    for dt in (1e-3, 5e-4):
        tr = simulate_counting(m, 1.0, dt, seed=11)
        grid = tr.grid
        lin = replay_counting(m, tr.steps, grid, "linear")
        non = replay_counting(m, tr.steps, grid, "nonlinear")
        assert np.array_equal(non, tr.states)
        fid = abs(np.vdot(lin[-1], non[-1])) ** 2
        assert fid >= 1 - 10 * dt


def test_replay_accepts_record():
    m = SystemModel(dim=10, mu=1.0, drive=DriveField(0.6))
    tr = simulate_counting(m, 1.0, 1e-3, seed=2)
    assert np.array_equal(replay_counting(m, tr.record, tr.grid), tr.states)


def test_pure_and_density_filters_agree():
    m = SystemModel(dim=14, mu=1.0, drive=DriveField(0.5), initial=fs.basis_state(14, 2))
    dt = 1e-3
    tr = simulate_counting(m, 1.0, dt, seed=4)
    rho = replay_counting(m, tr.steps, tr.grid, "density")
    assert fs.fidelity_pure(tr.states[-1], rho[-1]) >= 1 - 100 * dt


def test_replay_rejects_off_grid_record():
    grid = TimeGrid.from_dt(1.0, 1e-2)
    with pytest.raises(ValueError):
        replay_counting(SystemModel(dim=4), JumpRecord((0.0137,), 1.0), grid)
