"""Batched trajectory propagation.

All generators of this model are tridiagonal in the Fock basis (diagonal
``H`` and ``b^dag b``, off-diagonal ``b`` and ``b^dag``), so operators are
applied with shifted slices instead of matrix products. Every operation is
elementwise or a reduction along a single row, which makes each trajectory's
floating-point result independent of the batch it is computed in.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import fockspace as fs
from .model import SystemModel
from .rng import StreamBank

log = logging.getLogger(__name__)

#: per-step jump probability above which the step-size guard trips
JUMP_PROB_GUARD = 0.1
#: jump branch with an intensity below this is treated as unreachable
MIN_JUMP_INTENSITY = 1e-14
#: min eigenvalue below which diffusion density matrices abort
DIFFUSION_POSITIVITY = -1e-4


class StepSizeError(ValueError):
    """Raised when dt violates a hard step-size guard."""


class StepSizeWarning(RuntimeWarning):
    pass


class SamplingError(RuntimeError):
    """A jump was requested from a state on which it has zero probability."""


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid of ``n_steps`` steps on ``[0, t_final]``, sampled every ``stride`` steps."""

    t_final: float
    n_steps: int
    stride: int = 1

    def __post_init__(self):
        if not (self.t_final > 0 and math.isfinite(self.t_final)):
            raise ValueError("t_final must be positive and finite")
        if self.n_steps < 1 or self.stride < 1 or self.n_steps % self.stride:
            raise ValueError("n_steps must be a positive multiple of stride")

    @classmethod
    def from_dt(cls, t_final: float, dt: float, stride: int = 1) -> "TimeGrid":
        """Smallest grid with step <= dt whose step count is a multiple of ``stride``."""
        if not dt > 0:
            raise ValueError("dt must be > 0")
        blocks = max(1, math.ceil(t_final / (dt * stride) - 1e-9))
        return cls(float(t_final), blocks * stride, int(stride))

    @classmethod
    def from_interval(cls, t_final: float, dt: float, sample_interval: float) -> "TimeGrid":
        """Grid sampled every ``sample_interval`` (which must divide t_final) with step <= dt."""
        n_samples = round(t_final / sample_interval)
        if n_samples < 1 or abs(n_samples * sample_interval - t_final) > 1e-9 * t_final:
            raise ValueError("sample_interval must divide t_final")
        stride = max(1, math.ceil(sample_interval / dt - 1e-9))
        return cls(float(t_final), n_samples * stride, stride)

    @property
    def dt(self) -> float:
        return self.t_final / self.n_steps

    @property
    def n_samples(self) -> int:
        return self.n_steps // self.stride + 1

    def time(self, k):
        return np.asarray(k) * self.dt

    @property
    def times(self) -> np.ndarray:
        return self.time(np.arange(self.n_steps + 1))

    @property
    def sample_times(self) -> np.ndarray:
        return self.time(np.arange(0, self.n_steps + 1, self.stride))


class Ladder:
    """Ladder-operator action along one axis of a batch of vectors or matrices."""

    def __init__(self, dim: int):
        self.dim = dim
        self.s = np.sqrt(np.arange(1, dim, dtype=float))
        self.n = np.arange(dim, dtype=float)
        self.s_col = self.s[:, None]
        self.n_col = self.n[:, None]

    def b(self, x, axis=-1):
        out = np.zeros_like(x)
        if axis == -1:
            out[..., :-1] = self.s * x[..., 1:]
        else:
            out[..., :-1, :] = self.s_col * x[..., 1:, :]
        return out

    def bdag(self, x, axis=-1):
        out = np.zeros_like(x)
        if axis == -1:
            out[..., 1:] = self.s * x[..., :-1]
        else:
            out[..., 1:, :] = self.s_col * x[..., :-1, :]
        return out


def rownorm2(x: np.ndarray) -> np.ndarray:
    return (x.real**2 + x.imag**2).sum(axis=-1)


def rowtrace(rho: np.ndarray) -> np.ndarray:
    return np.diagonal(rho, axis1=-2, axis2=-1).sum(axis=-1)


def dagger(rho: np.ndarray) -> np.ndarray:
    return np.swapaxes(rho, -1, -2).conj()


class Generators:
    """Time-dependent coefficients of the model's generators, evaluated on demand.

    ``use_lo`` selects the heterodyne channel; with it off (or the oscillator
    disabled) every quantity is computed exactly as for direct counting.
    """

    def __init__(self, model: SystemModel, use_lo: bool):
        self.model = model
        self.lad = Ladder(model.dim)
        self.sm = math.sqrt(model.mu)
        self.mu = model.mu
        self.use_lo = bool(use_lo and model.lo.enabled)
        self.eps = model.lo.epsilon
        n = self.lad.n
        # diagonal of K = iH + (mu/2) n
        self.k_diag = 1j * model.omega * (n + 0.5) + 0.5 * model.mu * n

    def f(self, t):
        return self.model.f(t)

    def r(self, t):
        return self.model.r(t)

    def c(self, t):
        """Scalar part of the jump operator."""
        return self.model.jump_scalar(t) if self.use_lo else self.model.f(t)

    # -- pure states, shape (B, d) -------------------------------------

    def R_apply(self, x, t):
        """Linear-filter drift generator applied to ``x``."""
        f = self.f(t)
        c = self.c(t)
        out = (self.k_diag + 0.5 * abs(c) ** 2) * x
        out = out + (self.sm * f) * self.lad.bdag(x)
        if self.use_lo:
            out = out + (self.sm * np.conj(self.r(t)) / self.eps) * self.lad.b(x)
        return out

    def J_apply(self, x, t, bx=None):
        if bx is None:
            bx = self.lad.b(x)
        return self.sm * bx + self.c(t) * x

    def intensity(self, x, t):
        """Jump intensity ``||J x||^2`` for each normalized row."""
        return rownorm2(self.J_apply(x, t))

    def nonlinear_drift(self, x, t, dt, intensity):
        """Explicit Euler no-jump update of the normalized filter, before renormalization."""
        return x - dt * self.R_apply(x, t) + (0.5 * dt * intensity)[..., None] * x

    def linear_rk4(self, x, t, dt):
        """Classical RK4 step of the unnormalized no-jump equation ``dx/dt = -R(t) x``."""
        k1 = -self.R_apply(x, t)
        k2 = -self.R_apply(x + 0.5 * dt * k1, t + 0.5 * dt)
        k3 = -self.R_apply(x + 0.5 * dt * k2, t + 0.5 * dt)
        k4 = -self.R_apply(x + dt * k3, t + dt)
        return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    def diffusion_obs_drift(self, eb, t):
        """Compensator ``2 Re(sqrt(mu) <b> conj(r) + f conj(r))`` of the observed current."""
        rb = np.conj(self.r(t))
        return 2.0 * np.real(self.sm * eb * rb + self.f(t) * rb)

    def diffusion_left(self, x, t, dt, dB, eb, axis=-1):
        """``M x`` with ``M = 1 - D dt + C dB`` acting along ``axis`` (-1 vectors, -2 matrix rows).

        ``D = K + sqrt(mu)(f b^dag - conj(f) b) - mu conj(<b>) b + (mu/2)|<b>|^2`` is the
        drift generator of the diffusion filter and ``C = sqrt(mu) conj(r)(b - <b>)``
        its centered noise operator; ``eb`` holds ``<b>`` per row.
        """
        lad = self.lad
        f = self.f(t)
        shape = (-1,) + (1,) * (-axis)
        e = eb.reshape(shape)
        bx = lad.b(x, axis)
        diag = self.k_diag if axis == -1 else self.k_diag[:, None]
        drift = -diag * x - (self.sm * f) * lad.bdag(x, axis)
        drift = drift + (self.sm * np.conj(f) + self.mu * e.conj()) * bx
        drift = drift - (0.5 * self.mu * (e.real**2 + e.imag**2)) * x
        noise = (self.sm * np.conj(self.r(t))) * (bx - e * x)
        return x + dt * drift + dB.reshape(shape) * noise

    def diffusion_pure(self, x, t, dt, dB):
        """Euler-Maruyama step of the diffusion pure-state filter, before renormalization."""
        eb = (x.conj() * self.lad.b(x)).sum(axis=-1)
        return self.diffusion_left(x, t, dt, dB, eb)

    def diffusion_density(self, rho, t, dt, dB):
        """``M rho M^dag`` for the diffusion filter, before trace renormalization.

        To first order this is the Euler-Maruyama step
        ``rho + L(rho) dt + (C rho + rho C^dag) dB``; the remaining term
        ``C rho C^dag (dB^2 - dt)`` has zero mean and makes the update a
        congruence, so positivity is preserved exactly. On ``rho = |x><x|``
        it reproduces the pure-state step.
        """
        eb = rowtrace(self.lad.b(rho, -2))
        left = self.diffusion_left(rho, t, dt, dB, eb, axis=-2)
        return dagger(self.diffusion_left(dagger(left), t, dt, dB, eb, axis=-2)), eb

    # -- density matrices, shape (B, d, d) -----------------------------

    def lindblad(self, rho, t):
        """Master-equation generator, using G = iH + (mu/2) n + sqrt(mu)(f b^dag - conj(f) b)."""
        lad = self.lad
        f = self.f(t)
        sf = self.sm * f
        g_diag = self.k_diag[:, None]
        g_rho = g_diag * rho + sf * lad.bdag(rho, -2) - np.conj(sf) * lad.b(rho, -2)
        # rho G^dag acts along the last axis with the conjugated coefficients
        rho_g = self.k_diag.conj() * rho + np.conj(sf) * lad.bdag(rho, -1) - sf * lad.b(rho, -1)
        jump = lad.b(lad.b(rho, -2), -1)
        return -g_rho - rho_g + self.mu * jump

    def J_rho_Jdag(self, rho, t):
        c = self.c(t)
        left = self.sm * self.lad.b(rho, -2) + c * rho
        return self.sm * self.lad.b(left, -1) + np.conj(c) * left


@dataclass
class BatchResult:
    """Raw per-step records of a batch: jump indicators or observed current increments."""

    grid: TimeGrid
    jumps: np.ndarray | None = None
    dW: np.ndarray | None = None
    aborted: np.ndarray | None = None
    max_defect: np.ndarray | None = None
    final: np.ndarray | None = None


#: called as observe(sample_index, t, states, counts_or_wiener, aborted, step_defect)
Observer = Callable[[int, float, np.ndarray, np.ndarray, np.ndarray, np.ndarray], None]


class _Guard:
    def __init__(self, where: str, hard: bool):
        self.where = where
        self.hard = hard
        self.warned = False

    def check(self, prob: np.ndarray, t: float) -> None:
        worst = float(prob.max()) if prob.size else 0.0
        if worst < JUMP_PROB_GUARD:
            return
        msg = (
            f"{self.where}: per-step jump probability {worst:.3g} at t={t:.6g} "
            f">= {JUMP_PROB_GUARD}; reduce dt"
        )
        if self.hard:
            raise StepSizeError(msg)
        if not self.warned:
            self.warned = True
            warnings.warn(msg, StepSizeWarning, stacklevel=4)


class _Leakage:
    """Batch form of the truncation policy; ``strict`` raises instead of marking rows aborted."""

    def __init__(self, where: str, strict: bool):
        self.monitor = fs.LeakageMonitor(where)
        self.strict = strict

    def check(self, pop: np.ndarray, aborted: np.ndarray, t: float) -> np.ndarray:
        live = ~aborted
        bad = np.zeros_like(aborted)
        if not live.any():
            return bad
        if self.strict:
            self.monitor.check(float(pop[live].max()), t)
            return bad
        bad = (pop > fs.LEAKAGE_ABORT) & live
        kept = pop[live & ~bad]
        if kept.size:
            self.monitor.check(float(kept.max()), t)
        return bad


def _initial_pure(model: SystemModel, B: int) -> np.ndarray:
    return np.tile(model.initial.amplitudes, (B, 1))


def _initial_density(model: SystemModel, B: int) -> np.ndarray:
    init = model.initial
    rho = init.entries if isinstance(init, fs.DensityMatrix) else init.projector().entries
    return np.tile(rho, (B, 1, 1))


class _SampledJumps:
    def __init__(self, bank: StreamBank):
        self.bank = bank

    def decide(self, k, prob):
        return self.bank.uniform() < prob


class _ReplayedJumps:
    def __init__(self, record: np.ndarray):
        self.record = np.asarray(record, dtype=bool)

    def decide(self, k, prob):
        return self.record[:, k].copy()


def run_jump_pure(
    model: SystemModel,
    grid: TimeGrid,
    source,
    *,
    use_lo: bool,
    hard_guard: bool,
    strict: bool,
    observe: Observer | None = None,
    where: str = "counting",
) -> BatchResult:
    """Nonlinear pure-state counting filter with at most one Bernoulli jump per step.

    ``source`` is a :class:`StreamBank` (sampling) or a boolean record of
    shape ``(B, n_steps)`` (replaying a fixed jump record).
    """
    driver = _SampledJumps(source) if isinstance(source, StreamBank) else _ReplayedJumps(source)
    B = source.size if isinstance(source, StreamBank) else driver.record.shape[0]
    gen = Generators(model, use_lo)
    x = _initial_pure(model, B)
    dt = grid.dt
    jumps = np.zeros((B, grid.n_steps), dtype=bool)
    counts = np.zeros(B, dtype=np.int64)
    aborted = np.zeros(B, dtype=bool)
    max_defect = np.zeros(B)
    guard = _Guard(where, hard_guard)
    leak = _Leakage(where, strict)
    vac = fs.vacuum(model.dim).amplitudes
    if observe:
        observe(0, 0.0, x, counts, aborted, np.zeros(B))
    for k in range(grid.n_steps):
        t = k * dt
        bx = gen.lad.b(x)
        jx = gen.J_apply(x, t, bx)
        intensity = rownorm2(jx)
        prob = intensity * dt
        guard.check(prob[~aborted], t)
        jump = driver.decide(k, prob) & ~aborted
        if jump.any() and intensity[jump].min() <= MIN_JUMP_INTENSITY:
            raise SamplingError(f"{where}: jump sampled from a state with zero intensity at t={t:.6g}")
        new = gen.nonlinear_drift(x, t, dt, intensity)
        if jump.any():
            new[jump] = jx[jump]
        n2 = rownorm2(new)
        defect = np.where(jump, 0.0, np.abs(n2 - 1.0))
        np.maximum(max_defect, defect, out=max_defect)
        x = new / np.sqrt(n2)[:, None]
        jumps[:, k] = jump
        counts += jump
        pop = rownorm2(x[:, -2:])
        bad = leak.check(pop, aborted, t + dt)
        if bad.any():
            aborted |= bad
            x[bad] = vac
        if observe and (k + 1) % grid.stride == 0:
            observe((k + 1) // grid.stride, t + dt, x, counts, aborted, defect)
    return BatchResult(grid, jumps=jumps, aborted=aborted, max_defect=max_defect, final=x)


def run_jump_linear(
    model: SystemModel,
    grid: TimeGrid,
    source,
    *,
    use_lo: bool,
    hard_guard: bool,
    strict: bool,
    observe: Observer | None = None,
    where: str = "counting",
) -> BatchResult:
    """Waiting-time sampler built on the linear (unnormalized) filter.

    Between jumps the unnormalized state follows ``dx/dt = -R(t) x`` (RK4),
    whose squared norm is the no-jump probability since the last jump. With a
    :class:`StreamBank` the jump happens at the first grid point where the
    squared norm falls to a uniform threshold; with a boolean record the
    jumps are replayed at the recorded steps.
    """
    sampling = isinstance(source, StreamBank)
    B = source.size if sampling else np.asarray(source).shape[0]
    record = None if sampling else np.asarray(source, dtype=bool)
    gen = Generators(model, use_lo)
    x = _initial_pure(model, B)
    dt = grid.dt
    jumps = np.zeros((B, grid.n_steps), dtype=bool)
    counts = np.zeros(B, dtype=np.int64)
    aborted = np.zeros(B, dtype=bool)
    guard = _Guard(where, hard_guard)
    leak = _Leakage(where, strict)
    vac = fs.vacuum(model.dim).amplitudes
    u = source.uniform() if sampling else None
    n2 = np.ones(B)
    if observe:
        observe(0, 0.0, x, counts, aborted, np.zeros(B))
    for k in range(grid.n_steps):
        t = k * dt
        x = gen.linear_rk4(x, t, dt)
        n2_prev = n2
        n2 = rownorm2(x)
        # effective intensity over the step, from the norm decay
        guard.check((np.log(n2_prev) - np.log(n2))[~aborted], t)
        jump = (n2 <= u) if sampling else record[:, k].copy()
        jump &= ~aborted
        if jump.any():
            rows = np.flatnonzero(jump)
            xj = x[rows] / np.sqrt(n2[rows])[:, None]
            jx = gen.J_apply(xj, t + dt)
            ij = rownorm2(jx)
            if ij.min() <= MIN_JUMP_INTENSITY:
                raise SamplingError(f"{where}: jump with zero intensity at t={t + dt:.6g}")
            x[rows] = jx / np.sqrt(ij)[:, None]
            n2 = n2.copy()
            n2[rows] = 1.0
            if sampling:
                u[rows] = source.uniform(rows)
        jumps[:, k] = jump
        counts += jump
        pop = rownorm2(x[:, -2:]) / n2
        bad = leak.check(pop, aborted, t + dt)
        if bad.any():
            aborted |= bad
            x[bad] = vac
            n2 = n2.copy()
            n2[bad] = 1.0
        if observe and (k + 1) % grid.stride == 0:
            observe((k + 1) // grid.stride, t + dt, x / np.sqrt(n2)[:, None], counts, aborted, np.zeros(B))
    return BatchResult(grid, jumps=jumps, aborted=aborted, final=x / np.sqrt(n2)[:, None])


def run_jump_density(
    model: SystemModel,
    grid: TimeGrid,
    source,
    *,
    use_lo: bool,
    hard_guard: bool,
    strict: bool,
    observe: Observer | None = None,
    where: str = "counting SME",
) -> BatchResult:
    """Density-matrix counting filter: Lindblad drift plus the innovation ``dN - I dt`` term."""
    driver = _SampledJumps(source) if isinstance(source, StreamBank) else _ReplayedJumps(source)
    B = source.size if isinstance(source, StreamBank) else driver.record.shape[0]
    gen = Generators(model, use_lo)
    rho = _initial_density(model, B)
    dt = grid.dt
    jumps = np.zeros((B, grid.n_steps), dtype=bool)
    counts = np.zeros(B, dtype=np.int64)
    aborted = np.zeros(B, dtype=bool)
    max_defect = np.zeros(B)
    guard = _Guard(where, hard_guard)
    leak = _Leakage(where, strict)
    vac = fs.vacuum(model.dim).projector().entries
    if observe:
        observe(0, 0.0, rho, counts, aborted, np.zeros(B))
    for k in range(grid.n_steps):
        t = k * dt
        new, jump, defect = _sme_jump_update(gen, rho, t, dt, driver, k, guard, aborted, where)
        np.maximum(max_defect, defect, out=max_defect)
        rho = new
        jumps[:, k] = jump
        counts += jump
        pop = np.diagonal(rho, axis1=-2, axis2=-1)[:, -2:].real.sum(axis=-1)
        bad = leak.check(pop, aborted, t + dt)
        if bad.any():
            aborted |= bad
            rho[bad] = vac
        if observe and (k + 1) % grid.stride == 0:
            observe((k + 1) // grid.stride, t + dt, rho, counts, aborted, defect)
    return BatchResult(grid, jumps=jumps, aborted=aborted, max_defect=max_defect, final=rho)


def _sme_jump_update(gen, rho, t, dt, driver, k, guard, aborted, where):
    jrj = gen.J_rho_Jdag(rho, t)
    intensity = rowtrace(jrj).real
    prob = intensity * dt
    guard.check(prob[~aborted], t)
    jump = driver.decide(k, prob) & ~aborted
    if jump.any() and intensity[jump].min() <= MIN_JUMP_INTENSITY:
        raise SamplingError(f"{where}: jump sampled from a state with zero intensity at t={t:.6g}")
    safe = np.where(jump, intensity, 1.0)
    half = (0.5 * dt * intensity)[:, None, None]

    def left(a):
        # M a with M = 1 - R dt + (I/2) dt, the no-count map of the pure filter
        at = np.swapaxes(a, -1, -2)
        return np.swapaxes(at - dt * gen.R_apply(at, t) + half * at, -1, -2)

    # no count: M rho M^dag, which is rho + L(rho) dt - (J rho J^dag - I rho) dt
    # up to O(dt^2) and stays positive; a count gives J rho J^dag / I
    new = left(dagger(left(rho)))
    new = np.where(jump[:, None, None], jrj / safe[:, None, None], new)
    tr = rowtrace(new).real
    defect = np.abs(tr - 1.0)
    return new / tr[:, None, None], jump, defect


class _SampledNoise:
    def __init__(self, bank: StreamBank, dt: float):
        self.bank = bank
        self.sqdt = math.sqrt(dt)

    def increments(self, k, drift, dt):
        dB = self.sqdt * self.bank.normal()
        return drift * dt + dB, dB


class _ReplayedNoise:
    def __init__(self, record: np.ndarray):
        self.record = np.asarray(record, dtype=float)

    def increments(self, k, drift, dt):
        dW = self.record[:, k]
        return dW, dW - drift * dt


def _check_diffusion(model: SystemModel, dt: float, where: str) -> None:
    if not model.lo.enabled:
        raise ValueError(f"{where}: the diffusion unraveling needs an enabled local oscillator (|r| = 1)")
    if dt * model.stiffness() > 0.01:
        warnings.warn(
            f"{where}: dt*max(omega, mu, lam^2) = {dt * model.stiffness():.3g} > 0.01",
            StepSizeWarning,
            stacklevel=3,
        )


def run_diffusion_pure(
    model: SystemModel,
    grid: TimeGrid,
    source,
    *,
    strict: bool,
    observe: Observer | None = None,
    where: str = "diffusion",
) -> BatchResult:
    """Pure-state diffusion filter; records the observed increments ``dW = drift dt + dB``."""
    dt = grid.dt
    _check_diffusion(model, dt, where)
    sampling = isinstance(source, StreamBank)
    driver = _SampledNoise(source, dt) if sampling else _ReplayedNoise(source)
    B = source.size if sampling else driver.record.shape[0]
    gen = Generators(model, use_lo=True)
    x = _initial_pure(model, B)
    dW = np.zeros((B, grid.n_steps))
    wiener = np.zeros(B)
    aborted = np.zeros(B, dtype=bool)
    max_defect = np.zeros(B)
    leak = _Leakage(where, strict)
    vac = fs.vacuum(model.dim).amplitudes
    if observe:
        observe(0, 0.0, x, wiener, aborted, np.zeros(B))
    for k in range(grid.n_steps):
        t = k * dt
        eb = (x.conj() * gen.lad.b(x)).sum(axis=-1)
        dw, dB = driver.increments(k, gen.diffusion_obs_drift(eb, t), dt)
        new = gen.diffusion_pure(x, t, dt, dB)
        n2 = rownorm2(new)
        defect = np.abs(n2 - 1.0)
        np.maximum(max_defect, defect, out=max_defect)
        x = new / np.sqrt(n2)[:, None]
        dW[:, k] = dw
        wiener = wiener + dw
        bad = leak.check(rownorm2(x[:, -2:]), aborted, t + dt)
        if bad.any():
            aborted |= bad
            x[bad] = vac
        if observe and (k + 1) % grid.stride == 0:
            observe((k + 1) // grid.stride, t + dt, x, wiener, aborted, defect)
    return BatchResult(grid, dW=dW, aborted=aborted, max_defect=max_defect, final=x)


def run_diffusion_density(
    model: SystemModel,
    grid: TimeGrid,
    source,
    *,
    strict: bool,
    observe: Observer | None = None,
    where: str = "diffusion SME",
) -> BatchResult:
    """Density-matrix diffusion filter (Euler-Maruyama in congruence form, trace renormalized each step)."""
    dt = grid.dt
    _check_diffusion(model, dt, where)
    sampling = isinstance(source, StreamBank)
    driver = _SampledNoise(source, dt) if sampling else _ReplayedNoise(source)
    B = source.size if sampling else driver.record.shape[0]
    gen = Generators(model, use_lo=True)
    rho = _initial_density(model, B)
    dW = np.zeros((B, grid.n_steps))
    wiener = np.zeros(B)
    aborted = np.zeros(B, dtype=bool)
    max_defect = np.zeros(B)
    leak = _Leakage(where, strict)
    vac = fs.vacuum(model.dim).projector().entries
    if observe:
        observe(0, 0.0, rho, wiener, aborted, np.zeros(B))
    for k in range(grid.n_steps):
        t = k * dt
        eb = rowtrace(gen.lad.b(rho, -2))
        dw, dB = driver.increments(k, gen.diffusion_obs_drift(eb, t), dt)
        new, _ = gen.diffusion_density(rho, t, dt, dB)
        tr = rowtrace(new).real
        defect = np.abs(tr - 1.0)
        np.maximum(max_defect, defect, out=max_defect)
        rho = new / tr[:, None, None]
        dW[:, k] = dw
        wiener = wiener + dw
        pop = np.diagonal(rho, axis1=-2, axis2=-1)[:, -2:].real.sum(axis=-1)
        bad = leak.check(pop, aborted, t + dt)
        if (k + 1) % grid.stride == 0:
            bad |= _positivity(rho, aborted, strict, t + dt, where)
        if bad.any():
            aborted |= bad
            rho[bad] = vac
        if observe and (k + 1) % grid.stride == 0:
            observe((k + 1) // grid.stride, t + dt, rho, wiener, aborted, defect)
    return BatchResult(grid, dW=dW, aborted=aborted, max_defect=max_defect, final=rho)


def _positivity(rho, aborted, strict, t, where) -> np.ndarray:
    herm = 0.5 * (rho + dagger(rho))
    low = np.linalg.eigvalsh(herm)[:, 0]
    bad = (low < DIFFUSION_POSITIVITY) & ~aborted
    if strict and bad.any():
        raise fs.PositivityError(f"{where}: eigenvalue {low[bad].min():.3g} at t={t:.6g}")
    return bad
