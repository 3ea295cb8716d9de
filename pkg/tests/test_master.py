import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cohfilter import fockspace as fs
from cohfilter.master import coherent_amplitude, integrate_master, lindblad_rhs
from cohfilter.model import DriveField, SystemModel


def _random_hermitian(seed, dim):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    return a + a.conj().T


def test_rhs_vacuum_free_evolution():
    m = SystemModel(dim=6, mu=0.0, drive=DriveField(0.0))
    assert np.allclose(lindblad_rhs(m, fs.vacuum(6).projector(), 0.3), 0)


def test_rhs_initial_slope_of_b():
    m = SystemModel(dim=8, mu=0.7, drive=DriveField(0.4, phi=0.3))
    rhs = lindblad_rhs(m, fs.vacuum(8).projector(), 0.0)
    slope = np.trace(m.b @ rhs)
    assert abs(slope - (-math.sqrt(m.mu) * m.f(0.0))) < 1e-14
    assert abs(rhs[1, 0] - (-math.sqrt(m.mu) * m.f(0.0))) < 1e-14


def test_rhs_dimension_mismatch():
    with pytest.raises(ValueError):
        lindblad_rhs(SystemModel(dim=4), np.eye(5) / 5, 0.0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), lam=st.floats(0, 2), mu=st.floats(0, 3), t=st.floats(0, 10))
def test_generator_trace_free_and_hermitian(seed, lam, mu, t):
    m = SystemModel(dim=7, mu=mu, drive=DriveField(lam, omega=0.6, phi=0.2))
    s = _random_hermitian(seed, 7)
    rhs = lindblad_rhs(m, s, t)
    scale = max(1.0, np.abs(s).max())
    assert abs(np.trace(rhs)) <= 1e-12 * scale * 10
    assert np.max(np.abs(rhs - rhs.conj().T)) <= 1e-12 * scale * 10


def test_dark_state_stays_vacuum():
    m = SystemModel(dim=10, drive=DriveField(0.0))
    run = integrate_master(m, 2.0, 1e-2)
    assert np.allclose(run.states, fs.vacuum(10).projector().entries)


def test_single_photon_decay():
    m = SystemModel(dim=10, mu=1.0, drive=DriveField(0.0), initial=fs.basis_state(10, 1).projector())
    run = integrate_master(m, 3.0, 1e-3, stride=100)
    assert np.max(np.abs(run.expect(m.n_op).real - np.exp(-run.grid))) <= 1e-6


def test_coherent_closure():
    beta0 = 0.6 - 0.4j
    m = SystemModel(dim=20, mu=1.0, drive=DriveField(0.5, phi=0.4), initial=fs.coherent_state(20, beta0))
    run = integrate_master(m, 4.0, 1e-3, stride=50)
    obs = run.observables()
    assert obs["purity"].min() >= 1 - 1e-6
    beta = coherent_amplitude(m, beta0, run.grid)
    assert np.max(np.abs(obs["re_b"] + 1j * obs["im_b"] - beta)) <= 1e-6
    ref = fs.coherent_state(20, beta[-1]).projector().entries
    assert fs.trace_distance(run.states[-1], ref) <= 1e-6


def test_run_invariants():
    m = SystemModel(dim=12, mu=0.8, drive=DriveField(0.3), initial=fs.basis_state(12, 2))
    run = integrate_master(m, 2.0, 1e-3, stride=100)
    for s in run.states:
        assert abs(np.trace(s).real - 1) <= 1e-7
        assert np.max(np.abs(s - s.conj().T)) <= 1e-9


def test_rk4_fourth_order():
    beta0 = 0.5
    m = SystemModel(dim=20, mu=1.0, drive=DriveField(0.5), initial=fs.coherent_state(20, beta0))

    def err(dt):
        run = integrate_master(m, 1.0, dt)
        b = run.expect(m.b)[-1]
        return abs(b - coherent_amplitude(m, beta0, 1.0))

    ratio = err(0.0125) / err(0.00625)
    assert 12 <= ratio <= 20


def test_coherent_amplitude_free_decay():
    m = SystemModel(dim=4, omega=1.3, mu=0.6, drive=DriveField(0.0))
    t = np.linspace(0, 5, 11)
    expected = 0.8 * np.exp(-(1.3j + 0.3) * t)
    assert np.allclose(coherent_amplitude(m, 0.8, t), expected, rtol=1e-14, atol=0)


def test_coherent_amplitude_steady_state_and_flux():
    lam, mu, phi = 0.5, 1.0, 0.3
    m = SystemModel(dim=20, mu=mu, drive=DriveField(lam, phi=phi))
    t = 80.0
    beta = coherent_amplitude(m, 0.0, t)
    assert abs(abs(beta) ** 2 - 4 * lam**2 / mu) < 1e-12
    rotating = beta * np.exp(1j * m.omega * t)
    assert abs(rotating - (-2 * lam / math.sqrt(mu)) * np.exp(1j * phi)) < 1e-12
    flux = mu * abs(beta) ** 2 + 2 * math.sqrt(mu) * (beta * np.conj(m.f(t))).real + lam**2
    assert flux == pytest.approx(lam**2, abs=1e-12)


def test_coherent_amplitude_mu_zero():
    m = SystemModel(dim=4, omega=1.0, mu=0.0, drive=DriveField(1.0))
    assert coherent_amplitude(m, 0.3, 2.0) == pytest.approx(0.3 * np.exp(-2j))


def test_coherent_amplitude_detuned_matches_rk4():
    m = SystemModel(dim=20, omega=1.0, mu=1.0, drive=DriveField(0.4, omega=1.7, phi=0.1))
    run = integrate_master(m, 3.0, 1e-3, stride=100)
    beta = coherent_amplitude(m, 0.0, run.grid)
    assert np.max(np.abs(run.expect(m.b) - beta)) <= 1e-6


def test_step_size_warning():
    from cohfilter._engine import StepSizeWarning

    m = SystemModel(dim=4, omega=5.0, drive=DriveField(0.0))
    with pytest.warns(StepSizeWarning):
        integrate_master(m, 0.1, 0.05)


def test_leakage_abort():
    m = SystemModel(dim=8, mu=1.0, drive=DriveField(2.0))
    with pytest.warns(fs.TruncationWarning), pytest.raises(fs.TruncationError):
        integrate_master(m, 5.0, 1e-3, stride=100)
