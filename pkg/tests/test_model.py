import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cohfilter import fockspace as fs
from cohfilter.model import DISABLED_LO, DriveField, LocalOscillator, SystemModel, derived_K, derived_R, eval_f, eval_r


def test_eval_f_examples():
    m = SystemModel(dim=4, drive=DriveField(lam=0.0))
    assert m.f(1.7) == 0
    m = SystemModel(dim=4, drive=DriveField(lam=1.0, omega=0.0))
    assert m.f(3.0) == 1
    m = SystemModel(dim=4, drive=DriveField(lam=2.0, omega=1.0, phi=math.pi / 2))
    assert abs(m.f(math.pi) - (-2j)) < 1e-15


def test_drive_defaults_to_resonance():
    m = SystemModel(dim=4, omega=1.3, drive=DriveField(lam=1.0))
    assert m.drive.omega == 1.3


def test_negative_time_rejected():
    with pytest.raises(ValueError):
        eval_f(DriveField(1.0, 0.0), -1.0)


@settings(max_examples=50, deadline=None)
@given(lam=st.floats(0, 5), w=st.floats(-10, 10), phi=st.floats(-7, 7), t=st.floats(0, 100))
def test_drive_modulus(lam, w, phi, t):
    assert abs(abs(eval_f(DriveField(lam, w, phi), t)) - lam) <= 1e-12 * max(1.0, lam)


@settings(max_examples=50, deadline=None)
@given(w=st.floats(-10, 10), theta=st.floats(-7, 7), t=st.floats(0, 100))
def test_lo_modulus(w, theta, t):
    assert abs(abs(eval_r(LocalOscillator(0.5, theta, w), t)) - 1.0) <= 1e-15
    assert eval_r(LocalOscillator(0.5, theta, w, enabled=False), t) == 0


def test_lo_rejects_bad_epsilon():
    with pytest.raises(ValueError):
        LocalOscillator(epsilon=0.0)


def test_negative_mu_rejected():
    with pytest.raises(ValueError):
        SystemModel(dim=4, mu=-1.0)


def test_initial_dim_must_match():
    with pytest.raises(ValueError):
        SystemModel(dim=4, initial=fs.vacuum(5))


def test_K_examples():
    assert not SystemModel(dim=3, omega=0.0, mu=0.0).K.any()
    K = SystemModel(dim=2, omega=1.0, mu=2.0).K
    assert np.allclose(K, np.diag([0.5j, 1.5j + 1.0]))
    m = SystemModel(dim=6, omega=0.7, mu=1.3)
    assert np.allclose(m.K + m.K.conj().T, m.mu * m.n_op)
    assert np.array_equal(derived_K(m), m.K)


def test_R_lo_disabled_vacuum():
    m = SystemModel(dim=5, drive=DriveField(0.0))
    assert np.array_equal(derived_R(m, 0.4), m.K)


def test_R_lo_disabled_drive():
    m = SystemModel(dim=5, mu=0.8, drive=DriveField(0.6, phi=0.3))
    t = 1.1
    expected = m.K + math.sqrt(m.mu) * m.f(t) * m.b.T + 0.5 * abs(m.f(t)) ** 2 * np.eye(5)
    assert np.allclose(derived_R(m, t), expected, atol=0, rtol=0) or np.max(np.abs(derived_R(m, t) - expected)) < 1e-15


def test_R_mu_zero_lo():
    m = SystemModel(dim=5, mu=0.0, drive=DriveField(0.0), lo=LocalOscillator(epsilon=0.5))
    assert np.allclose(derived_R(m, 0.3), 1j * m.H + 0.5 / 0.25 * np.eye(5))


def test_jump_scalar_disabled_returns_f_exactly():
    m = SystemModel(dim=4, drive=DriveField(0.7, phi=0.2), lo=DISABLED_LO)
    assert m.jump_scalar(0.37) == m.f(0.37)


def test_stiffness():
    m = SystemModel(dim=4, omega=-3.0, mu=1.0, drive=DriveField(2.0))
    assert m.stiffness() == 4.0
