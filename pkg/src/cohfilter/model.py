"""Physical scenario: cavity mode, coherent drive, local oscillator."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from . import fockspace as fs


@dataclass(frozen=True)
class DriveField:
    """Coherent input ``f(t) = lam * exp(-i omega t + i phi)``.

    ``omega=None`` means resonant with the cavity; :class:`SystemModel`
    resolves it on construction. ``lam=0`` is the vacuum channel.
    """

    lam: float = 0.0
    omega: float | None = None
    phi: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.lam) and self.lam >= 0):
            raise ValueError(f"drive amplitude must be finite and >= 0, got {self.lam!r}")

    def __call__(self, t):
        return eval_f(self, t)


@dataclass(frozen=True)
class LocalOscillator:
    """Local oscillator phase ``r(t) = exp(i (omega t + theta))`` and strength ``1/epsilon``.

    When ``enabled`` is false the channel reduces to direct photon counting
    and ``r(t)`` is identically zero. ``theta`` picks the quadrature seen in
    the diffusion limit: 0 for ``b + b^dag``, pi/2 for ``-i(b - b^dag)``.
    """

    epsilon: float = 1.0
    theta: float = 0.0
    omega: float = 0.0
    enabled: bool = True

    def __post_init__(self):
        if not (math.isfinite(self.epsilon) and self.epsilon > 0):
            raise ValueError(f"epsilon must be finite and > 0, got {self.epsilon!r}")

    def __call__(self, t):
        return eval_r(self, t)


def eval_f(drive: DriveField, t):
    if drive.omega is None:
        raise ValueError("drive frequency unresolved; construct it through SystemModel")
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("time must be >= 0")
    if drive.lam == 0:
        out = np.zeros_like(t, dtype=complex)
    else:
        out = drive.lam * np.exp(1j * (drive.phi - drive.omega * t))
    return complex(out) if out.ndim == 0 else out


def eval_r(lo: LocalOscillator, t):
    t = np.asarray(t, dtype=float)
    if lo.enabled:
        out = np.exp(1j * (lo.omega * t + lo.theta))
    else:
        out = np.zeros_like(t, dtype=complex)
    return complex(out) if out.ndim == 0 else out


DISABLED_LO = LocalOscillator(enabled=False)


@dataclass(frozen=True, eq=False)
class SystemModel:
    """Cavity of ``dim`` levels, frequency ``omega`` and coupling ``mu`` to the observed channel."""

    dim: int = 20
    omega: float = 1.0
    mu: float = 1.0
    drive: DriveField = field(default_factory=DriveField)
    lo: LocalOscillator = DISABLED_LO
    initial: fs.PureState | fs.DensityMatrix | None = None

    def __post_init__(self):
        object.__setattr__(self, "dim", fs.check_dim(self.dim))
        if not math.isfinite(self.omega):
            raise ValueError("omega must be finite")
        # sqrt(mu) and mu-damping appear everywhere; negative coupling is rejected
        if not (math.isfinite(self.mu) and self.mu >= 0):
            raise ValueError(f"mu must be finite and >= 0, got {self.mu!r}")
        if self.drive.omega is None:
            object.__setattr__(self, "drive", replace(self.drive, omega=self.omega))
        if self.initial is None:
            object.__setattr__(self, "initial", fs.vacuum(self.dim))
        if not isinstance(self.initial, (fs.PureState, fs.DensityMatrix)):
            raise TypeError("initial must be a PureState or DensityMatrix")
        if self.initial.dim != self.dim:
            raise ValueError(f"initial state has dim {self.initial.dim}, model has {self.dim}")
        if isinstance(self.initial, fs.PureState) and not self.initial.normalized:
            raise ValueError("initial state must be normalized")

    def with_(self, **changes) -> "SystemModel":
        return replace(self, **changes)

    @property
    def is_pure(self) -> bool:
        return isinstance(self.initial, fs.PureState)

    @cached_property
    def b(self) -> np.ndarray:
        return fs.annihilation(self.dim)

    @cached_property
    def n_op(self) -> np.ndarray:
        return fs.number(self.dim)

    @cached_property
    def H(self) -> np.ndarray:
        return fs.hamiltonian(self.dim, self.omega)

    @cached_property
    def K(self) -> np.ndarray:
        return derived_K(self)

    def f(self, t):
        return eval_f(self.drive, t)

    def r(self, t):
        return eval_r(self.lo, t)

    def jump_scalar(self, t) -> complex:
        """Scalar part ``f(t) + r(t)/epsilon`` of the jump operator ``sqrt(mu) b + f + r/epsilon``."""
        f = self.f(t)
        if not self.lo.enabled:
            return f
        return f + self.r(t) / self.lo.epsilon

    def stiffness(self) -> float:
        """``max(|omega|, mu, lam^2)``, the rate entering the step-size guards."""
        return max(abs(self.omega), self.mu, self.drive.lam**2)


def derived_K(model: SystemModel) -> np.ndarray:
    """``K = i H + (mu/2) b^dag b``."""
    K = 1j * model.H + 0.5 * model.mu * model.n_op
    K.setflags(write=False)
    return K


def derived_R(model: SystemModel, t: float) -> np.ndarray:
    """Instantaneous drift generator of the linear heterodyne filter.

    ``K + sqrt(mu) b^dag f + sqrt(mu) b conj(r)/eps + |f + r/eps|^2 / 2``.
    This is the time derivative of the integrated operator appearing in the
    filter's propagator; with the local oscillator disabled it is the drift
    of the linear direct-counting filter.
    """
    sm = math.sqrt(model.mu)
    f = model.f(t)
    c = model.jump_scalar(t)
    bdag = model.b.T
    R = model.K + sm * f * bdag + 0.5 * abs(c) ** 2 * np.eye(model.dim)
    if model.lo.enabled:
        R = R + sm * np.conj(model.r(t)) / model.lo.epsilon * model.b
    R.setflags(write=False)
    return R
