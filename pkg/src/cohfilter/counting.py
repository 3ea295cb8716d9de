"""Direct photodetection of the output channel.

Two samplers of the same jump process are provided: ``euler_bernoulli``
propagates the normalized (nonlinear) filter and draws at most one count per
step with probability ``intensity * dt``; ``waiting_time`` propagates the
linear filter, whose squared norm is the no-count probability, and counts
when it falls below a uniform threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _engine as eng
from . import fockspace as fs
from .model import SystemModel
from .rng import StreamBank, check_seed

METHODS = ("euler_bernoulli", "waiting_time")


@dataclass(frozen=True, eq=False)
class JumpRecord:
    """Detection times ``t_1 < t_2 < ...`` observed on ``[0, t_final]``."""

    jump_times: np.ndarray
    t_final: float

    def __post_init__(self):
        times = np.array(self.jump_times, dtype=float).reshape(-1)
        if times.size and (times[0] < 0 or times[-1] > self.t_final * (1 + 1e-12)):
            raise ValueError("jump times must lie in [0, t_final]")
        if np.any(np.diff(times) <= 0):
            raise ValueError("jump times must be strictly increasing")
        times.setflags(write=False)
        object.__setattr__(self, "jump_times", times)

    def __len__(self) -> int:
        return self.jump_times.size

    def count(self, t) -> np.ndarray:
        """Number of detections up to and including time ``t``."""
        return np.searchsorted(self.jump_times, t, side="right")

    @classmethod
    def from_steps(cls, jumps: np.ndarray, grid: eng.TimeGrid) -> "JumpRecord":
        """A count registered during step ``k`` is stamped at the step's end, ``(k + 1) dt``."""
        steps = np.flatnonzero(np.asarray(jumps, dtype=bool))
        return cls(grid.time(steps + 1), grid.t_final)

    def to_steps(self, grid: eng.TimeGrid) -> np.ndarray:
        steps = np.rint(self.jump_times / grid.dt).astype(np.int64) - 1
        if np.any(np.abs(grid.time(steps + 1) - self.jump_times) > 1e-9 * max(1.0, grid.t_final)):
            raise ValueError("jump times are not on the grid")
        if np.any(steps < 0) or np.any(steps >= grid.n_steps):
            raise ValueError("jump times outside the grid")
        out = np.zeros(grid.n_steps, dtype=bool)
        out[steps] = True
        return out


@dataclass(frozen=True, eq=False)
class CountingTrajectory:
    """One conditioned trajectory, sampled every ``grid.stride`` steps."""

    model: SystemModel
    record: JumpRecord
    grid: eng.TimeGrid
    states: np.ndarray
    counts: np.ndarray
    defect: np.ndarray
    seed: int
    method: str
    steps: np.ndarray = field(repr=False)

    @property
    def times(self) -> np.ndarray:
        return self.grid.sample_times

    @property
    def is_pure(self) -> bool:
        return self.states.ndim == 2

    def density_matrices(self) -> np.ndarray:
        if self.is_pure:
            return self.states[:, :, None] * self.states[:, None, :].conj()
        return self.states

    def observables(self) -> dict[str, np.ndarray]:
        return trajectory_observables(self.model, self.grid.sample_times, self.states, self.defect)


def trajectory_observables(model, times, states, defect) -> dict[str, np.ndarray]:
    b = model.b
    if states.ndim == 2:
        eb = np.einsum("ti,ij,tj->t", states.conj(), b, states)
        n = eng.rownorm2(states * np.sqrt(np.arange(model.dim)))
        pur = np.ones(len(times))
    else:
        eb = np.einsum("ij,tji->t", b, states)
        n = np.einsum("i,tii->t", np.arange(model.dim), states).real
        pur = np.einsum("tij,tij->t", states, states.conj()).real
    return {"t": np.asarray(times), "re_b": eb.real, "im_b": eb.imag, "n": n, "purity": pur, "defect": np.asarray(defect)}


def _vec(state) -> np.ndarray:
    if isinstance(state, fs.PureState):
        if not state.normalized:
            raise ValueError("state must be normalized")
        return state.amplitudes
    return np.asarray(state)


def _channel_intensity(state, c: complex, mu: float) -> float:
    """``||(sqrt(mu) b + c) phi||^2`` or ``tr(J rho J^dag)``; clamps round-off below zero."""
    rho = state.entries if isinstance(state, fs.DensityMatrix) else _vec(state)
    if rho.ndim == 1:
        lad = eng.Ladder(rho.shape[0])
        jx = math.sqrt(mu) * lad.b(rho) + c * rho
        return max(0.0, float(eng.rownorm2(jx)))
    lad = eng.Ladder(rho.shape[0])
    left = math.sqrt(mu) * lad.b(rho, -2) + c * rho
    jrj = math.sqrt(mu) * lad.b(left, -1) + np.conj(c) * left
    return max(0.0, float(np.trace(jrj).real))


def _channel_jump(state, c: complex, mu: float) -> fs.PureState:
    s = _vec(state)
    lad = eng.Ladder(s.shape[0])
    jx = math.sqrt(mu) * lad.b(s) + c * s
    norm2 = float(eng.rownorm2(jx))
    if norm2 <= eng.MIN_JUMP_INTENSITY:
        raise eng.SamplingError(f"jump requested on a state with intensity {norm2:.3g}")
    return fs.PureState(jx / math.sqrt(norm2))


def jump_intensity(state, f_t: complex, mu: float = 1.0) -> float:
    """Detection rate ``mu<b^dag b> + 2 sqrt(mu) Re(<b> conj(f)) + |f|^2``.

    Computed as the squared norm ``||(sqrt(mu) b + f) phi||^2`` so it is
    non-negative by construction.
    """
    return _channel_intensity(state, complex(f_t), mu)


def apply_jump(state, f_t: complex, mu: float = 1.0) -> fs.PureState:
    """Post-detection state ``(sqrt(mu) b + f) phi``, normalized."""
    return _channel_jump(state, complex(f_t), mu)


def _one(model, use_lo):
    return eng.Generators(model, use_lo)


def nonlinear_drift_step(state, model: SystemModel, t: float, dt: float, *, return_defect: bool = False):
    """No-count Euler step of the normalized filter followed by renormalization.

    ``dphi = (-K - sqrt(mu) b^dag f + (mu/2)<b^dag b> + sqrt(mu) Re(<b> conj(f))) phi dt``.
    The squared-norm defect removed by renormalization is second order in dt.
    """
    return _drift_step(state, model, t, dt, use_lo=False, return_defect=return_defect)


def _drift_step(state, model, t, dt, *, use_lo, return_defect):
    gen = _one(model, use_lo)
    x = _vec(state)[None, :]
    intensity = eng.rownorm2(gen.J_apply(x, t))
    if intensity[0] * dt >= eng.JUMP_PROB_GUARD:
        raise eng.StepSizeError(f"dt*intensity = {intensity[0] * dt:.3g} >= {eng.JUMP_PROB_GUARD}")
    new = gen.nonlinear_drift(x, t, dt, intensity)[0]
    norm2 = float(eng.rownorm2(new))
    out = fs.PureState(new / math.sqrt(norm2))
    fs.LeakageMonitor("drift step").check(fs.top_population(out), t + dt)
    return (out, norm2 - 1.0) if return_defect else out


def sme_counting_step(rho, model: SystemModel, t: float, dt: float, dN: int) -> fs.DensityMatrix:
    """One Euler step of the counting filter for a density matrix.

    ``rho + L(rho) dt + (J rho J^dag / I - rho)(dN - I dt)`` with the trace
    renormalized afterwards.
    """
    return _sme_step(rho, model, t, dt, dN, use_lo=False, hard_guard=False)


def _sme_step(rho, model, t, dt, dN, *, use_lo, hard_guard):
    if dN not in (0, 1):
        raise ValueError("dN must be 0 or 1")
    r = rho.entries if isinstance(rho, fs.DensityMatrix) else np.asarray(rho)
    gen = _one(model, use_lo)
    driver = eng._ReplayedJumps(np.array([[bool(dN)]]))
    guard = eng._Guard("SME step", hard_guard)
    new, _, _ = eng._sme_jump_update(gen, r[None], t, dt, driver, 0, guard, np.zeros(1, bool), "SME step")
    new = new[0]
    return fs.DensityMatrix(0.5 * (new + new.conj().T))


def _check_method(model: SystemModel, method: str) -> None:
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}, got {method!r}")
    if method == "waiting_time" and not model.is_pure:
        raise ValueError("the waiting-time sampler needs a pure initial state")


def _simulate(model, t_final, dt, seed, method, stride, *, use_lo, hard_guard, where, cls, **extra):
    _check_method(model, method)
    seed = check_seed(seed)
    grid = eng.TimeGrid.from_dt(t_final, dt, stride)
    bank = StreamBank(seed, [0])
    store = _Store(grid, model)
    kw = dict(use_lo=use_lo, hard_guard=hard_guard, strict=True, observe=store, where=where)
    if not model.is_pure:
        res = eng.run_jump_density(model, grid, bank, **kw)
    elif method == "euler_bernoulli":
        res = eng.run_jump_pure(model, grid, bank, **kw)
    else:
        res = eng.run_jump_linear(model, grid, bank, **kw)
    steps = res.jumps[0]
    return cls(
        model=model,
        record=JumpRecord.from_steps(steps, grid),
        grid=grid,
        states=store.states,
        counts=store.counts,
        defect=store.defect,
        seed=seed,
        method=method,
        steps=steps,
        **extra,
    )


class _Store:
    """Observer keeping every sample of a single-trajectory run."""

    def __init__(self, grid: eng.TimeGrid, model: SystemModel):
        shape = (grid.n_samples, model.dim) if model.is_pure else (grid.n_samples, model.dim, model.dim)
        self.states = np.empty(shape, dtype=complex)
        self.counts = np.zeros(grid.n_samples)
        self.defect = np.zeros(grid.n_samples)

    def __call__(self, j, t, states, counts, aborted, defect):
        self.states[j] = states[0]
        self.counts[j] = counts[0]
        self.defect[j] = defect[0]


def simulate_counting(
    model: SystemModel,
    t_final: float,
    dt: float,
    seed: int = 0,
    method: str = "euler_bernoulli",
    stride: int = 1,
) -> CountingTrajectory:
    """Sample one direct-detection trajectory.

    Pure initial states use the selected sampler; a density-matrix initial
    state is propagated with the stochastic master equation (Bernoulli
    counts only). The local oscillator, if any, is ignored.
    """
    return _simulate(
        model, t_final, dt, seed, method, stride,
        use_lo=False, hard_guard=False, where="counting", cls=CountingTrajectory,
    )


def replay_counting(model: SystemModel, steps, grid: eng.TimeGrid, kind: str = "nonlinear", *, use_lo: bool = False):
    """Propagate a filter along a fixed jump record.

    ``steps`` is a boolean array (one entry per grid step) or a
    :class:`JumpRecord`. ``kind`` is ``"nonlinear"`` (normalized pure-state
    filter), ``"linear"`` (unnormalized filter, reported normalized) or
    ``"density"`` (stochastic master equation). Returns the sampled states.
    """
    if isinstance(steps, JumpRecord):
        steps = steps.to_steps(grid)
    steps = np.asarray(steps, dtype=bool)[None, :]
    store = _Store(grid, model if kind != "density" else model.with_(initial=_as_density(model)))
    kw = dict(use_lo=use_lo, hard_guard=False, strict=True, observe=store, where="replay")
    if kind == "nonlinear":
        eng.run_jump_pure(model, grid, steps, **kw)
    elif kind == "linear":
        eng.run_jump_linear(model, grid, steps, **kw)
    elif kind == "density":
        eng.run_jump_density(model, grid, steps, **kw)
    else:
        raise ValueError(f"unknown filter kind {kind!r}")
    return store.states


def _as_density(model: SystemModel) -> fs.DensityMatrix:
    init = model.initial
    return init if isinstance(init, fs.DensityMatrix) else init.projector()
