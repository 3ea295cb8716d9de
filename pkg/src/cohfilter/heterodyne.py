"""Heterodyne counting: photodetection after mixing with a local oscillator.

The detected channel carries the jump operator ``sqrt(mu) b + f + r/eps``.
Every operation here runs through the same code as :mod:`cohfilter.counting`
with the scalar ``f`` replaced by ``f + r/eps``; with ``r = 0`` (or the
oscillator disabled) the results are bit-identical to direct counting.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import counting as cnt
from . import fockspace as fs
from .model import LocalOscillator, SystemModel

#: default step is eps**2 / DT_DIVISOR, keeping the LO shot-noise jump probability near 0.05
DT_DIVISOR = 20.0


def _shift(f_t: complex, r_t: complex, eps: float) -> complex:
    if not eps > 0:
        raise ValueError("eps must be > 0")
    f_t, r_t = complex(f_t), complex(r_t)
    return f_t if r_t == 0 else f_t + r_t / eps


def het_intensity(state, f_t: complex, r_t: complex, eps: float, mu: float = 1.0) -> float:
    """Detection rate ``||(sqrt(mu) b + f + r/eps) phi||^2`` of the heterodyne channel.

    Parameters
    ----------
    state : PureState or DensityMatrix
    f_t, r_t : complex
        Drive and local-oscillator phase at the current time.
    eps : float
        Inverse oscillator strength.
    mu : float
        Coupling to the detected channel.
    """
    return cnt._channel_intensity(state, _shift(f_t, r_t, eps), mu)


def het_apply_jump(state, f_t: complex, r_t: complex, eps: float, mu: float = 1.0) -> fs.PureState:
    """Normalized post-detection state ``(sqrt(mu) b + f + r/eps) phi``."""
    return cnt._channel_jump(state, _shift(f_t, r_t, eps), mu)


def het_drift_step(state, model: SystemModel, t: float, dt: float, *, return_defect: bool = False):
    """No-count Euler step of the normalized heterodyne filter, renormalized."""
    return cnt._drift_step(state, model, t, dt, use_lo=True, return_defect=return_defect)


def het_sme_step(rho, model: SystemModel, t: float, dt: float, dN: int) -> fs.DensityMatrix:
    """One Euler step of the heterodyne density-matrix filter (hard step-size guard)."""
    return cnt._sme_step(rho, model, t, dt, dN, use_lo=True, hard_guard=True)


def default_dt(model: SystemModel) -> float:
    return model.lo.epsilon**2 / DT_DIVISOR


def transform_record(record: cnt.JumpRecord, eps: float, times) -> np.ndarray:
    """Rescaled, compensated count ``W(t) = eps Y(t) - t/eps`` at ``times``."""
    times = np.asarray(times, dtype=float)
    return eps * record.count(times) - times / eps


@dataclass(frozen=True, eq=False)
class HeterodyneTrajectory(cnt.CountingTrajectory):
    lo: LocalOscillator = None

    @property
    def eps(self) -> float:
        return self.lo.epsilon

    def transformed(self, times=None) -> np.ndarray:
        """``W(t)`` on ``times`` (the sample grid by default)."""
        return transform_record(self.record, self.eps, self.times if times is None else times)


def simulate_heterodyne(
    model: SystemModel,
    t_final: float,
    dt: float | None = None,
    seed: int = 0,
    method: str = "euler_bernoulli",
    stride: int = 1,
) -> HeterodyneTrajectory:
    """Sample one heterodyne-counting trajectory.

    ``dt`` defaults to ``eps**2 / 20``. The per-step jump probability guard
    is a hard error here: rates grow like ``eps**-2``.

    Raises
    ------
    StepSizeError
        ``dt * intensity`` reached 0.1 on some step.
    """
    if dt is None:
        if not model.lo.enabled:
            raise ValueError("dt is required when the local oscillator is disabled")
        dt = default_dt(model)
    return cnt._simulate(
        model, t_final, dt, seed, method, stride,
        use_lo=True, hard_guard=True, where="heterodyne", cls=HeterodyneTrajectory, lo=model.lo,
    )


def replay_heterodyne(model: SystemModel, steps, grid, kind: str = "nonlinear"):
    """As :func:`cohfilter.counting.replay_counting` for the heterodyne channel."""
    return cnt.replay_counting(model, steps, grid, kind, use_lo=True)
