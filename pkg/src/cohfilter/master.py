"""Unconditional (prior) dynamics: master equation, RK4 integrator, analytic coherent solution.

The integrator works with dense matrices in the lab frame and shares no code
with the trajectory engines, so it can serve as their reference.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import fockspace as fs
from ._engine import StepSizeWarning
from .model import SystemModel

log = logging.getLogger(__name__)

TRACE_RENORM_TOL = 1e-9
POSITIVITY_TOL = -1e-8


def _generator(model: SystemModel, t: float) -> np.ndarray:
    """``G = iH + (mu/2) b^dag b + sqrt(mu) (f b^dag - conj(f) b)`` so that rhs = -G s - s G^dag + mu b s b^dag."""
    sf = math.sqrt(model.mu) * model.f(t)
    b = model.b
    return model.K + sf * b.T - np.conj(sf) * b


def lindblad_rhs(model: SystemModel, sigma, t: float) -> np.ndarray:
    """Right-hand side of the master equation at time ``t``.

    ``-i[H, s] - (mu/2){b^dag b, s} + mu b s b^dag + sqrt(mu)[b conj(f) - b^dag f, s]``
    """
    s = sigma.entries if isinstance(sigma, fs.DensityMatrix) else np.asarray(sigma)
    if s.shape != (model.dim, model.dim):
        raise ValueError(f"dimension mismatch: sigma {s.shape} vs model dim {model.dim}")
    G = _generator(model, t)
    b = model.b
    return -G @ s - s @ G.conj().T + model.mu * (b @ s @ b.T)


def _rk4_step(model: SystemModel, s: np.ndarray, t: float, h: float) -> np.ndarray:
    G1 = _generator(model, t)
    G2 = _generator(model, t + 0.5 * h)
    G3 = _generator(model, t + h)
    b, bT, mu = model.b, model.b.T, model.mu

    def rhs(G, x):
        return -G @ x - x @ G.conj().T + mu * (b @ x @ bT)

    k1 = rhs(G1, s)
    k2 = rhs(G2, s + 0.5 * h * k1)
    k3 = rhs(G2, s + 0.5 * h * k2)
    k4 = rhs(G3, s + h * k3)
    return s + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


@dataclass(frozen=True, eq=False)
class MasterRun:
    """Prior state ``sigma(t)`` sampled on ``grid``."""

    model: SystemModel
    t_final: float
    dt: float
    grid: np.ndarray
    states: np.ndarray
    trace_defect: np.ndarray
    renormalizations: int = 0

    def expect(self, op) -> np.ndarray:
        return np.einsum("ij,tji->t", np.asarray(op), self.states)

    def observables(self) -> dict[str, np.ndarray]:
        b = self.expect(self.model.b)
        return {
            "t": self.grid,
            "re_b": b.real,
            "im_b": b.imag,
            "n": self.expect(self.model.n_op).real,
            "purity": np.einsum("tij,tij->t", self.states, self.states.conj()).real,
            "defect": self.trace_defect,
        }


def integrate_master(
    model: SystemModel,
    t_final: float,
    dt: float,
    *,
    stride: int = 1,
    sample_times=None,
) -> MasterRun:
    """Integrate the master equation with classical RK4.

    With ``sample_times`` (increasing, starting at 0) the solution is
    reported exactly there, each interval split into ``ceil(interval/dt)``
    equal RK4 steps; otherwise every ``stride``-th step is reported.

    Raises
    ------
    TruncationError
        Top-level population above the abort threshold.
    PositivityError
        A sampled state with an eigenvalue below ``-1e-8``.
    """
    if not dt > 0:
        raise ValueError("dt must be > 0")
    if dt * model.stiffness() > 0.1:
        warnings.warn(
            f"master: dt*max(omega, mu, lam^2) = {dt * model.stiffness():.3g} > 0.1",
            StepSizeWarning,
            stacklevel=2,
        )
    if sample_times is None:
        n_steps = max(1, math.ceil(t_final / dt - 1e-9))
        n_steps = stride * math.ceil(n_steps / stride)
        h = t_final / n_steps
        sample_times = np.arange(0, n_steps + 1, stride) * h
    sample_times = np.asarray(sample_times, dtype=float)
    if sample_times[0] != 0 or np.any(np.diff(sample_times) <= 0):
        raise ValueError("sample_times must start at 0 and increase strictly")

    init = model.initial
    s = init.entries.copy() if isinstance(init, fs.DensityMatrix) else init.projector().entries.copy()
    states = np.empty((len(sample_times), model.dim, model.dim), dtype=complex)
    defects = np.zeros(len(sample_times))
    states[0] = s
    leak = fs.LeakageMonitor("master")
    renorms = 0
    for j in range(1, len(sample_times)):
        t0, t1 = sample_times[j - 1], sample_times[j]
        m = max(1, math.ceil((t1 - t0) / dt - 1e-9))
        h = (t1 - t0) / m
        for i in range(m):
            s = _rk4_step(model, s, t0 + i * h, h)
        tr = np.trace(s).real
        defects[j] = abs(tr - 1.0)
        if defects[j] > TRACE_RENORM_TOL:
            renorms += 1
            log.info("master: trace drift %.3g at t=%.6g, renormalized", tr - 1.0, t1)
            s = s / tr
        low = np.linalg.eigvalsh(0.5 * (s + s.conj().T)).min()
        if low < POSITIVITY_TOL:
            raise fs.PositivityError(f"master: eigenvalue {low:.3g} at t={t1:.6g}")
        leak.check(fs.top_population(s), t1)
        states[j] = s
    return MasterRun(model, float(sample_times[-1]), float(dt), sample_times, states, defects, renorms)


def coherent_amplitude(model: SystemModel, beta0: complex, t):
    """Amplitude ``beta(t)`` of the coherent state solving the master equation.

    Solves ``d beta/dt = -(i omega + mu/2) beta - sqrt(mu) f(t)`` in closed form
    by an integrating factor; valid for any drive detuning, including the
    undamped resonant case.
    """
    t = np.asarray(t, dtype=float)
    gamma = 1j * model.omega + 0.5 * model.mu
    drive = model.drive
    delta = gamma - 1j * drive.omega
    if delta == 0:
        span = t.astype(complex)
    else:
        span = -np.expm1(-delta * t) / delta
    forced = math.sqrt(model.mu) * drive.lam * np.exp(1j * (drive.phi - drive.omega * t)) * span
    out = np.exp(-gamma * t) * complex(beta0) - forced
    return complex(out) if out.ndim == 0 else out
