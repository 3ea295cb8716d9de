"""Truncated Fock-space linear algebra for a single bosonic mode.

Operators are plain read-only ``complex128`` arrays of shape ``(dim, dim)``.
States are wrapped in small immutable containers that validate their
invariants on construction.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

#: population of the top two Fock levels above which a warning is issued
LEAKAGE_WARN = 1e-8
#: population of the top two Fock levels above which propagation aborts
LEAKAGE_ABORT = 1e-4
#: truncated weight above which :func:`coherent_state` refuses to build a state
COHERENT_TAIL_MAX = 1e-6


class TruncationError(RuntimeError):
    """Raised when probability weight reaches the top of the truncated space."""


class TruncationWarning(RuntimeWarning):
    """Emitted when top-level population exceeds the warning threshold."""


class PositivityError(RuntimeError):
    """Raised when a density matrix acquires a significantly negative eigenvalue."""


def check_dim(dim: int) -> int:
    if isinstance(dim, bool) or int(dim) != dim:
        raise TypeError(f"cutoff dimension must be an integer, got {dim!r}")
    dim = int(dim)
    if dim < 2:
        raise ValueError(f"cutoff dimension must be >= 2, got {dim}")
    return dim


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.complex128, copy=True)
    a.setflags(write=False)
    return a


def annihilation(dim: int) -> np.ndarray:
    """Annihilation operator ``b`` with ``<n-1|b|n> = sqrt(n)``."""
    dim = check_dim(dim)
    return _frozen(np.diag(np.sqrt(np.arange(1, dim, dtype=float)), k=1))


def creation(dim: int) -> np.ndarray:
    return _frozen(annihilation(dim).T)


def number(dim: int) -> np.ndarray:
    dim = check_dim(dim)
    return _frozen(np.diag(np.arange(dim, dtype=float)))


def identity(dim: int) -> np.ndarray:
    return _frozen(np.eye(check_dim(dim)))


def hamiltonian(dim: int, omega: float) -> np.ndarray:
    """Oscillator hamiltonian ``omega (b^dag b + 1/2)`` in units with hbar = 1.

    The zero-point shift only contributes a global phase to pure states and
    cancels in every commutator; it is kept so the matrix is the textbook one.
    """
    dim = check_dim(dim)
    if not math.isfinite(omega):
        raise ValueError("omega must be finite")
    return _frozen(np.diag(omega * (np.arange(dim, dtype=float) + 0.5)))


@dataclass(frozen=True, eq=False)
class PureState:
    """State vector on the truncated space.

    ``normalized=False`` marks the unnormalized vectors produced by the
    linear filter; their squared norm is the likelihood of the record so far.
    """

    amplitudes: np.ndarray
    normalized: bool = True

    def __post_init__(self):
        amp = _frozen(self.amplitudes)
        if amp.ndim != 1:
            raise ValueError("amplitudes must be a 1-d array")
        check_dim(amp.shape[0])
        if not np.all(np.isfinite(amp)):
            raise ValueError("amplitudes must be finite")
        norm2 = float(np.vdot(amp, amp).real)
        if self.normalized and abs(norm2 - 1.0) > 1e-10:
            raise ValueError(f"state flagged normalized has norm^2 = {norm2!r}")
        if not self.normalized and norm2 <= 0.0:
            raise ValueError("unnormalized state must have strictly positive norm")
        object.__setattr__(self, "amplitudes", amp)

    @property
    def dim(self) -> int:
        return self.amplitudes.shape[0]

    @property
    def norm2(self) -> float:
        return float(np.vdot(self.amplitudes, self.amplitudes).real)

    def normalize(self) -> "PureState":
        return PureState(self.amplitudes / math.sqrt(self.norm2))

    def projector(self) -> "DensityMatrix":
        psi = self.normalize().amplitudes if not self.normalized else self.amplitudes
        return DensityMatrix(np.outer(psi, psi.conj()))


@dataclass(frozen=True, eq=False)
class DensityMatrix:
    """Trace-one Hermitian positive matrix on the truncated space."""

    entries: np.ndarray

    def __post_init__(self):
        rho = _frozen(self.entries)
        if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
            raise ValueError("density matrix must be square")
        check_dim(rho.shape[0])
        if not np.all(np.isfinite(rho)):
            raise ValueError("density matrix must be finite")
        if np.max(np.abs(rho - rho.conj().T)) > 1e-10:
            raise ValueError("density matrix is not Hermitian")
        tr = np.trace(rho).real
        if abs(tr - 1.0) > 1e-8:
            raise ValueError(f"density matrix trace is {tr!r}, expected 1")
        if np.linalg.eigvalsh(rho).min() < -1e-8:
            raise ValueError("density matrix has negative eigenvalues")
        object.__setattr__(self, "entries", rho)

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    def purity(self) -> float:
        return purity(self.entries)


def basis_state(dim: int, n: int) -> PureState:
    dim = check_dim(dim)
    if not 0 <= n < dim:
        raise ValueError(f"Fock level {n} outside 0..{dim - 1}")
    v = np.zeros(dim, dtype=complex)
    v[n] = 1.0
    return PureState(v)


def vacuum(dim: int) -> PureState:
    return basis_state(dim, 0)


def coherent_tail(beta: complex, dim: int) -> float:
    """Poisson weight ``exp(-|beta|^2) sum_{n >= dim} |beta|^(2n)/n!`` lost to truncation."""
    from scipy.stats import poisson

    return float(poisson.sf(dim - 1, abs(beta) ** 2))


def coherent_state(dim: int, beta: complex) -> PureState:
    """Coherent state ``|beta>`` restricted to ``dim`` levels and renormalized.

    Raises
    ------
    ValueError
        If the weight beyond the cutoff exceeds ``COHERENT_TAIL_MAX``.
    """
    dim = check_dim(dim)
    beta = complex(beta)
    tail = coherent_tail(beta, dim)
    if tail > COHERENT_TAIL_MAX:
        raise ValueError(
            f"cutoff {dim} too small for coherent amplitude |beta|={abs(beta):.3g}: "
            f"truncated weight {tail:.3g} > {COHERENT_TAIL_MAX:g}"
        )
    if beta == 0:
        return vacuum(dim)
    n = np.arange(dim)
    # log-space keeps large-n terms finite
    logmag = n * math.log(abs(beta)) - 0.5 * gammaln(n + 1)
    c = np.exp(logmag - logmag.max()) * np.exp(1j * n * np.angle(beta))
    return PureState(c / np.linalg.norm(c))


def _as_array(state) -> np.ndarray:
    if isinstance(state, PureState):
        return state.amplitudes
    if isinstance(state, DensityMatrix):
        return state.entries
    return np.asarray(state)


def expectation(op: np.ndarray, state) -> complex:
    """``<phi|op|phi>`` for vectors or ``tr(op rho)`` for density matrices."""
    op = np.asarray(op)
    if isinstance(state, PureState) and not state.normalized:
        raise ValueError("expectation requires a normalized state")
    s = _as_array(state)
    if op.shape != (s.shape[0], s.shape[0]):
        raise ValueError(f"dimension mismatch: operator {op.shape} vs state {s.shape}")
    if s.ndim == 1:
        return complex(np.vdot(s, op @ s))
    return complex(np.trace(op @ s))


def purity(rho: np.ndarray) -> float:
    rho = np.asarray(rho)
    return float(np.sum(np.abs(rho) ** 2))


def top_population(state) -> float:
    """Population in the two highest retained Fock levels."""
    s = _as_array(state)
    if s.ndim == 1:
        return float(np.sum(np.abs(s[-2:]) ** 2) / np.vdot(s, s).real)
    return float(np.diagonal(s)[-2:].real.sum() / np.trace(s).real)


class LeakageMonitor:
    """Applies the truncation policy: warn once above LEAKAGE_WARN, raise above LEAKAGE_ABORT."""

    def __init__(self, where: str):
        self.where = where
        self.max_population = 0.0
        self._warned = False

    def check(self, population: float, t: float | None = None) -> None:
        if population > self.max_population:
            self.max_population = population
        if population > LEAKAGE_ABORT:
            at = "" if t is None else f" at t={t:.6g}"
            raise TruncationError(
                f"{self.where}: top-level population {population:.3g}{at} exceeds "
                f"{LEAKAGE_ABORT:g}; increase the cutoff"
            )
        if population > LEAKAGE_WARN and not self._warned:
            self._warned = True
            warnings.warn(
                f"{self.where}: top-level population {population:.3g} exceeds {LEAKAGE_WARN:g}",
                TruncationWarning,
                stacklevel=3,
            )


def trace_distance(rho1: np.ndarray, rho2: np.ndarray) -> float:
    """``0.5 * ||rho1 - rho2||_1`` for Hermitian arguments."""
    diff = np.asarray(rho1) - np.asarray(rho2)
    diff = 0.5 * (diff + diff.conj().T)
    return 0.5 * float(np.abs(np.linalg.eigvalsh(diff)).sum())


def fidelity_pure(psi: np.ndarray, rho: np.ndarray) -> float:
    """``<psi|rho|psi>``, the fidelity between a pure state and a density matrix."""
    psi = _as_array(psi)
    return float(np.vdot(psi, _as_array(rho) @ psi).real)
