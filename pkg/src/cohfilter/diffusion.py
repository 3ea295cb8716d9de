"""Diffusion-limit observation: a Wiener-driven photocurrent.

The observed increment is ``dW = 2 Re(sqrt(mu) <b> conj(r) + f conj(r)) dt + dB``
with ``dB ~ Normal(0, dt)``. Records store ``dW``; the driving noise is
recovered as ``dB = dW - drift dt``. The local oscillator phase ``theta``
selects the measured quadrature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _engine as eng
from . import fockspace as fs
from .counting import _Store, _as_density, _vec, trajectory_observables
from .model import SystemModel
from .rng import StreamBank, check_seed


def innovation_drift(state, f_t: complex, r_t: complex, mu: float = 1.0) -> float:
    """Compensator ``2 Re(sqrt(mu) <b> conj(r) + f conj(r))`` of the observed current."""
    if abs(abs(complex(r_t)) - 1.0) > 1e-12:
        raise ValueError("the local oscillator phase must have unit modulus")
    if isinstance(state, fs.DensityMatrix):
        eb = fs.expectation(fs.annihilation(state.dim), state)
    else:
        x = _vec(state)
        eb = np.vdot(x, eng.Ladder(x.shape[0]).b(x))
    rb = np.conj(complex(r_t))
    return float(2.0 * np.real(math.sqrt(mu) * eb * rb + complex(f_t) * rb))


def diffusion_sme_step(rho, model: SystemModel, t: float, dt: float, dB: float, *, return_defect: bool = False):
    """Euler-Maruyama step of the diffusion density-matrix filter.

    The increment is ``L(rho) dt + (C rho + rho C^dag) dB`` with
    ``C = sqrt(mu) conj(r)(b - <b>)``, applied as the congruence
    ``M rho M^dag`` (``M = 1 - D dt + C dB``), which adds the zero-mean term
    ``C rho C^dag (dB^2 - dt)`` and keeps the state positive. The trace is
    then renormalized; the defect is O(dt).
    """
    eng._check_diffusion(model, dt, "diffusion SME step")
    r = rho.entries if isinstance(rho, fs.DensityMatrix) else np.asarray(rho)
    gen = eng.Generators(model, use_lo=True)
    r = r[None]
    new = gen.diffusion_density(r, t, dt, np.array([float(dB)]))[0][0]
    tr = float(np.trace(new).real)
    new = new / tr
    out = fs.DensityMatrix(0.5 * (new + new.conj().T))
    fs.LeakageMonitor("diffusion SME step").check(fs.top_population(out), t + dt)
    return (out, tr - 1.0) if return_defect else out


def diffusion_pure_step(phi, model: SystemModel, t: float, dt: float, dB: float, *, return_defect: bool = False):
    """Euler-Maruyama step of the diffusion pure-state filter, renormalized.

    ``dphi = (-K + sqrt(mu) conj(f) b - sqrt(mu) f b^dag + mu conj(<b>) b - (mu/2)|<b>|^2) phi dt
    + sqrt(mu) conj(r) (b - <b>) phi dB``.
    """
    eng._check_diffusion(model, dt, "diffusion step")
    gen = eng.Generators(model, use_lo=True)
    new = gen.diffusion_pure(_vec(phi)[None], t, dt, np.array([dB]))[0]
    n2 = float(eng.rownorm2(new))
    out = fs.PureState(new / math.sqrt(n2))
    fs.LeakageMonitor("diffusion step").check(fs.top_population(out), t + dt)
    return (out, n2 - 1.0) if return_defect else out


@dataclass(frozen=True, eq=False)
class DiffusionTrajectory:
    """One diffusion trajectory; ``wiener_increments[k]`` is the observed ``dW`` of step ``k``."""

    model: SystemModel
    grid: eng.TimeGrid
    wiener_increments: np.ndarray
    states: np.ndarray
    wiener: np.ndarray
    defect: np.ndarray
    seed: int

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
        return trajectory_observables(self.model, self.times, self.states, self.defect)


def simulate_diffusion(model: SystemModel, t_final: float, dt: float, seed: int = 0, stride: int = 1) -> DiffusionTrajectory:
    """Sample one trajectory of the diffusion filter.

    A pure initial state runs the pure-state filter, a density matrix the
    stochastic master equation. The oscillator must be enabled.
    """
    seed = check_seed(seed)
    grid = eng.TimeGrid.from_dt(t_final, dt, stride)
    bank = StreamBank(seed, [0])
    store = _Store(grid, model)
    run = eng.run_diffusion_pure if model.is_pure else eng.run_diffusion_density
    res = run(model, grid, bank, strict=True, observe=store, where="diffusion")
    return DiffusionTrajectory(model, grid, res.dW[0], store.states, store.counts, store.defect, seed)


def replay_diffusion(model: SystemModel, dW, grid: eng.TimeGrid, kind: str = "pure") -> np.ndarray:
    """Propagate the pure (``kind="pure"``) or density (``"density"``) filter along an observed record."""
    dW = np.asarray(dW, dtype=float)[None, :]
    if dW.shape[1] != grid.n_steps:
        raise ValueError("record length does not match the grid")
    if kind == "pure":
        store = _Store(grid, model)
        eng.run_diffusion_pure(model, grid, dW, strict=True, observe=store, where="replay")
    elif kind == "density":
        m = model.with_(initial=_as_density(model))
        store = _Store(grid, m)
        eng.run_diffusion_density(m, grid, dW, strict=True, observe=store, where="replay")
    else:
        raise ValueError(f"unknown filter kind {kind!r}")
    return store.states


@dataclass(frozen=True)
class EpsilonRow:
    """Comparison of one heterodyne ensemble with the diffusion reference."""

    eps: float
    dt: float
    dev_x: float
    dev_n: float
    se_x: float
    se_n: float
    increment_var_ratio: float

    @property
    def deviation(self) -> float:
        return max(self.dev_x, self.dev_n)

    @property
    def se(self) -> float:
        return max(self.se_x, self.se_n)


@dataclass(frozen=True)
class EpsilonReport:
    rows: tuple[EpsilonRow, ...]
    diffusion_dt: float
    n_traj: int

    @property
    def monotone(self) -> bool:
        """Deviation never grows by more than 2 combined standard errors as eps shrinks."""
        return all(b.deviation <= a.deviation + 2.0 * math.hypot(a.se, b.se) for a, b in zip(self.rows, self.rows[1:]))

    @property
    def resolvable(self) -> bool:
        """False when the statistical error swamps the gap between the largest and smallest eps."""
        if len(self.rows) < 2:
            return False
        first, last = self.rows[0], self.rows[-1]
        return first.deviation - last.deviation > 2.0 * math.hypot(first.se, last.se)

    def to_dict(self) -> dict:
        return {
            "n_traj": self.n_traj,
            "diffusion_dt": self.diffusion_dt,
            "monotone": self.monotone,
            "resolvable": self.resolvable,
            "rows": [
                {**row.__dict__, "deviation": row.deviation, "se": row.se} for row in self.rows
            ],
        }


def default_dt_rule(eps: float) -> float:
    return eps**2 / 20.0


def epsilon_convergence(
    model: SystemModel,
    eps_list,
    n_traj: int,
    t_final: float,
    dt_rule=default_dt_rule,
    *,
    diffusion_dt: float = 1e-3,
    sample_interval: float = 0.1,
    base_seed: int = 0,
    workers: int = 1,
) -> EpsilonReport:
    """Compare heterodyne ensembles at decreasing ``eps`` with the diffusion ensemble.

    For each ``eps`` the heterodyne ensemble (step ``dt_rule(eps)``) and the
    diffusion reference share the sampling grid. The deviation is the largest
    difference over the grid of the ensemble means of ``<b + b^dag>^2`` (the
    conditional quadrature spread, which depends on the unraveling) and
    ``<b^dag b>``. The transformed record ``W = eps Y - t/eps`` supplies the
    increment variance ratio ``Var(dW)/dt`` at the sampling interval.
    """
    from .ensemble import EnsembleSpec, run_ensemble

    eps_list = [float(e) for e in eps_list]
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError("eps_list must be strictly decreasing")
    if not model.lo.enabled:
        raise ValueError("epsilon_convergence needs an enabled local oscillator")
    ref_spec = EnsembleSpec(
        model=model, unraveling="diffusion", n_traj=n_traj, t_final=t_final, dt=diffusion_dt,
        base_seed=base_seed, sample_interval=sample_interval, workers=workers,
    )
    ref = run_ensemble(ref_spec)
    rows = []
    for i, eps in enumerate(eps_list):
        m = model.with_(lo=model.lo.__class__(**{**model.lo.__dict__, "epsilon": eps}))
        spec = EnsembleSpec(
            model=m, unraveling="heterodyne", n_traj=n_traj, t_final=t_final, dt=dt_rule(eps),
            base_seed=base_seed + i + 1, sample_interval=sample_interval, workers=workers,
        )
        het = run_ensemble(spec)
        dx = np.abs(het.mean_x_sq - ref.mean_x_sq)
        dn = np.abs(het.mean_n - ref.mean_n)
        jx, jn = int(np.argmax(dx)), int(np.argmax(dn))
        rows.append(
            EpsilonRow(
                eps=eps,
                dt=spec.grid.dt,
                dev_x=float(dx[jx]),
                dev_n=float(dn[jn]),
                se_x=float(math.hypot(het.se_x_sq[jx], ref.se_x_sq[jx])),
                se_n=float(math.hypot(het.se_n[jn], ref.se_n[jn])),
                increment_var_ratio=het.increment_var_ratio(eps),
            )
        )
    return EpsilonReport(tuple(rows), float(ref_spec.grid.dt), int(n_traj))
