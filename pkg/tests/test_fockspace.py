import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cohfilter import fockspace as fs


def test_annihilation_dim2():
    assert np.array_equal(fs.annihilation(2), np.array([[0, 1], [0, 0]], dtype=complex))


def test_annihilation_dim3_entry():
    b = fs.annihilation(3)
    assert b[1, 2] == pytest.approx(math.sqrt(2), abs=1e-15)
    assert np.allclose(b @ fs.basis_state(3, 2).amplitudes, math.sqrt(2) * fs.basis_state(3, 1).amplitudes)


def test_commutator_exact_below_cutoff():
    b = fs.annihilation(16)
    comm = b @ b.T - b.T @ b
    # (sqrt n)^2 carries one rounding, so "exact" means to a few ulps
    assert np.max(np.abs(comm[:15, :15] - np.eye(15))) <= 1e-14
    assert comm[15, 15] == pytest.approx(-15, abs=1e-13)


def test_operators_read_only():
    b = fs.annihilation(4)
    with pytest.raises(ValueError):
        b[0, 1] = 2


@pytest.mark.parametrize("dim", [0, 1, -3])
def test_dim_too_small(dim):
    with pytest.raises(ValueError):
        fs.annihilation(dim)


def test_hamiltonian_examples():
    assert np.array_equal(np.diag(fs.hamiltonian(2, 1.0)), [0.5, 1.5])
    assert np.array_equal(np.diag(fs.hamiltonian(3, 2.0)), [1, 3, 5])
    assert not fs.hamiltonian(5, 0.0).any()


def test_number_diagonal():
    assert np.array_equal(np.diag(fs.number(6)).real, np.arange(6))


def test_coherent_zero_is_vacuum():
    assert np.array_equal(fs.coherent_state(10, 0).amplitudes, fs.vacuum(10).amplitudes)


def test_coherent_mean_number():
    psi = fs.coherent_state(20, 1.0)
    assert fs.expectation(fs.number(20), psi).real == pytest.approx(1.0, abs=1e-9)


def test_coherent_rejects_small_cutoff():
    # tail 1 - sum_{n<4} e^-4 4^n/n! is about 0.57
    with pytest.raises(ValueError):
        fs.coherent_state(4, 2.0)


def test_coherent_expectation_of_b():
    beta = 0.5 + 0.5j
    psi = fs.coherent_state(20, beta)
    assert abs(fs.expectation(fs.annihilation(20), psi) - beta) < 1e-9


def test_coherent_is_b_eigenstate():
    beta = 0.7 - 0.3j
    psi = fs.coherent_state(20, beta).amplitudes
    assert np.linalg.norm(fs.annihilation(20) @ psi - beta * psi) < 1e-8


def test_expectation_basics():
    assert fs.expectation(fs.annihilation(5), fs.vacuum(5)) == 0
    assert fs.expectation(fs.number(5), fs.basis_state(5, 1)) == pytest.approx(1.0)


def test_expectation_dim_mismatch():
    with pytest.raises(ValueError):
        fs.expectation(fs.number(4), fs.vacuum(5))


def test_pure_state_validation():
    with pytest.raises(ValueError):
        fs.PureState(np.array([1.0, 1.0]))
    psi = fs.PureState(np.array([3.0, 4.0]), normalized=False)
    assert psi.norm2 == pytest.approx(25.0)
    assert psi.normalize().norm2 == pytest.approx(1.0)
    with pytest.raises(ValueError):
        fs.PureState(np.zeros(3), normalized=False)


def test_density_matrix_validation():
    with pytest.raises(ValueError):
        fs.DensityMatrix(np.array([[0.5, 0.1], [0.0, 0.5]]))
    with pytest.raises(ValueError):
        fs.DensityMatrix(np.diag([0.6, 0.6]))
    with pytest.raises(ValueError, match="negative"):
        fs.DensityMatrix(np.diag([1.1, -0.1]))
    rho = fs.DensityMatrix(np.diag([0.25, 0.75]))
    assert rho.purity() == pytest.approx(0.625)


def test_leakage_monitor_warns_then_aborts():
    mon = fs.LeakageMonitor("test")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        mon.check(1e-7)
        mon.check(2e-7)
    assert sum(issubclass(w.category, fs.TruncationWarning) for w in caught) == 1
    with pytest.raises(fs.TruncationError):
        mon.check(2e-4)


def test_trace_distance_and_fidelity():
    a = fs.basis_state(3, 0).projector().entries
    b = fs.basis_state(3, 1).projector().entries
    assert fs.trace_distance(a, b) == pytest.approx(1.0)
    assert fs.trace_distance(a, a) == 0
    assert fs.fidelity_pure(fs.basis_state(3, 0).amplitudes, a) == pytest.approx(1.0)


def _random_state(seed, dim):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=dim) + 1j * rng.normal(size=dim)
    return fs.PureState(x / np.linalg.norm(x))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), dim=st.integers(2, 12))
def test_hermitian_expectations_are_real(seed, dim):
    psi = _random_state(seed, dim)
    b = fs.annihilation(dim)
    x = b + b.T
    assert abs(fs.expectation(x, psi).imag) <= 1e-12
    assert abs(fs.expectation(fs.number(dim), psi.projector()).imag) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(re=st.floats(-1.5, 1.5), im=st.floats(-1.5, 1.5))
def test_coherent_state_normalized(re, im):
    psi = fs.coherent_state(24, complex(re, im))
    assert abs(psi.norm2 - 1.0) <= 1e-12


def test_pure_functions_bit_identical():
    assert np.array_equal(fs.coherent_state(20, 0.3 + 0.2j).amplitudes, fs.coherent_state(20, 0.3 + 0.2j).amplitudes)
