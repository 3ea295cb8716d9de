"""Monte Carlo ensembles of conditioned trajectories and their comparison with the master equation.

Trajectories are cut into fixed blocks of consecutive indices. Every block
is simulated as one vectorized batch, and trajectory ``i`` always draws from
the stream keyed by ``(base_seed, i)``. Per-trajectory contributions are
rounded to a fixed-point grid and summed as 64-bit integers, so merging
blocks is exact and the statistics are bit-identical for any grouping of
blocks and any number of workers.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _engine as eng
from . import fockspace as fs
from .master import MasterRun
from .model import SystemModel
from .rng import StreamBank, check_seed

log = logging.getLogger(__name__)

UNRAVELINGS = ("counting", "heterodyne", "diffusion")
#: aborted fraction above which an ensemble run fails
ABORT_RATE_LIMIT = 1e-3
#: batch-means standard errors use this many batches
N_BATCHES = 20
#: fixed-point scale of real-valued contributions (resolution 2**-32)
SCALE = 2.0**32
#: validation constants ``C`` of the ``max(4/sqrt(n), C dt)`` threshold
VALIDATION_C = {"counting": 10.0, "heterodyne": 10.0, "diffusion": 20.0}
MIN_TRAJ_FOR_VERDICT = 20


class AbortRateError(RuntimeError):
    """More than 0.1% of the trajectories left the truncated space."""


@dataclass(frozen=True, eq=False)
class EnsembleSpec:
    """What to simulate.

    Samples are taken every ``sample_stride`` steps, or every
    ``sample_interval`` time units when that is given.
    """

    model: SystemModel
    unraveling: str
    n_traj: int
    t_final: float
    dt: float
    base_seed: int = 0
    sample_stride: int = 1
    sample_interval: float | None = None
    method: str = "euler_bernoulli"
    block_size: int = 256
    workers: int = 1

    def __post_init__(self):
        if self.unraveling not in UNRAVELINGS:
            raise ValueError(f"unraveling must be one of {UNRAVELINGS}")
        if int(self.n_traj) != self.n_traj or self.n_traj < 1:
            raise ValueError("n_traj must be a positive integer")
        if self.block_size < 1 or self.workers < 1:
            raise ValueError("block_size and workers must be >= 1")
        check_seed(self.base_seed)
        if self.method not in ("euler_bernoulli", "waiting_time"):
            raise ValueError("method must be euler_bernoulli or waiting_time")
        if self.unraveling != "counting" and not self.model.lo.enabled:
            raise ValueError(f"{self.unraveling} needs an enabled local oscillator")
        if self.method == "waiting_time" and not self.model.is_pure:
            raise ValueError("the waiting-time sampler needs a pure initial state")
        object.__setattr__(self, "n_traj", int(self.n_traj))

    @property
    def grid(self) -> eng.TimeGrid:
        if self.sample_interval is not None:
            return eng.TimeGrid.from_interval(self.t_final, self.dt, self.sample_interval)
        return eng.TimeGrid.from_dt(self.t_final, self.dt, self.sample_stride)

    def blocks(self) -> list[tuple[int, int]]:
        bs = self.block_size
        return [(i, min(i + bs, self.n_traj)) for i in range(0, self.n_traj, bs)]

    def batch_of(self, index: np.ndarray) -> np.ndarray:
        nb = min(N_BATCHES, self.n_traj)
        return np.asarray(index, dtype=np.int64) * nb // self.n_traj


def _q(values) -> np.ndarray:
    return np.rint(np.asarray(values) * SCALE).astype(np.int64)


@dataclass
class Sums:
    """Exact integer sums over a set of trajectories; adding two is associative and commutative."""

    rho_re: np.ndarray
    rho_im: np.ndarray
    b_re: np.ndarray
    b_im: np.ndarray
    n: np.ndarray
    x_sq: np.ndarray
    rec: np.ndarray
    batch_count: np.ndarray
    incr: np.ndarray
    incr_sq: np.ndarray
    final_counts: np.ndarray
    completed: int = 0
    aborted: int = 0

    @classmethod
    def zeros(cls, n_samples: int, dim: int) -> "Sums":
        z = lambda *shape: np.zeros(shape, dtype=np.int64)  # noqa: E731
        nb = N_BATCHES
        return cls(
            z(n_samples, dim, dim), z(n_samples, dim, dim),
            z(nb, n_samples), z(nb, n_samples), z(nb, n_samples), z(nb, n_samples), z(nb, n_samples),
            z(nb), z(n_samples - 1), z(n_samples - 1), z(0),
        )

    def __add__(self, other: "Sums") -> "Sums":
        size = max(self.final_counts.size, other.final_counts.size)
        hist = np.zeros(size, dtype=np.int64)
        hist[: self.final_counts.size] += self.final_counts
        hist[: other.final_counts.size] += other.final_counts
        out = {}
        for name in ("rho_re", "rho_im", "b_re", "b_im", "n", "x_sq", "rec", "batch_count", "incr", "incr_sq"):
            out[name] = getattr(self, name) + getattr(other, name)
        return Sums(**out, final_counts=hist, completed=self.completed + other.completed, aborted=self.aborted + other.aborted)


class _Accumulate:
    """Observer adding each sample of the live rows to a :class:`Sums`."""

    def __init__(self, sums: Sums, batches: np.ndarray, pure: bool, counting: bool, live: np.ndarray):
        self.s = sums
        self.batches = batches
        self.pure = pure
        self.counting = counting
        self.live = live
        self.prev = None

    def __call__(self, j, t, states, rec, aborted, defect):
        s, keep = self.s, self.live
        x = states[keep]
        bt = self.batches[keep]
        if self.pure:
            rho = x[:, :, None] * x[:, None, :].conj()
            eb = (x[:, :-1].conj() * np.sqrt(np.arange(1, x.shape[1])) * x[:, 1:]).sum(axis=-1)
            n = ((x.real**2 + x.imag**2) * np.arange(x.shape[1])).sum(axis=-1)
        else:
            rho = x
            eb = (np.sqrt(np.arange(1, x.shape[1])) * np.diagonal(x, offset=1, axis1=-2, axis2=-1)).sum(axis=-1)
            n = (np.diagonal(x, axis1=-2, axis2=-1).real * np.arange(x.shape[1])).sum(axis=-1)
        s.rho_re[j] += _q(rho.real).sum(axis=0)
        s.rho_im[j] += _q(rho.imag).sum(axis=0)
        np.add.at(s.b_re[:, j], bt, _q(eb.real))
        np.add.at(s.b_im[:, j], bt, _q(eb.imag))
        np.add.at(s.n[:, j], bt, _q(n))
        np.add.at(s.x_sq[:, j], bt, _q(4.0 * eb.real**2))
        r = rec[keep]
        rq = r.astype(np.int64) if self.counting else _q(r)
        np.add.at(s.rec[:, j], bt, rq)
        if j > 0:
            d = rq - self.prev
            s.incr[j - 1] += d.sum()
            if self.counting:
                s.incr_sq[j - 1] += (d * d).sum()
            else:
                s.incr_sq[j - 1] += _q((r - self.prev_raw) ** 2).sum()
        self.prev = rq
        self.prev_raw = r.copy()


def _run_rows(spec: EnsembleSpec, indices: np.ndarray, observe) -> eng.BatchResult:
    model, grid = spec.model, spec.grid
    bank = StreamBank(spec.base_seed, indices)
    kw = dict(strict=False, observe=observe, where=spec.unraveling)
    if spec.unraveling == "diffusion":
        run = eng.run_diffusion_pure if model.is_pure else eng.run_diffusion_density
        return run(model, grid, bank, **kw)
    het = spec.unraveling == "heterodyne"
    kw.update(use_lo=het, hard_guard=het)
    if not model.is_pure:
        return eng.run_jump_density(model, grid, bank, **kw)
    if spec.method == "waiting_time":
        return eng.run_jump_linear(model, grid, bank, **kw)
    return eng.run_jump_pure(model, grid, bank, **kw)


def run_block(spec: EnsembleSpec, start: int, stop: int) -> Sums:
    """Simulate trajectories ``start..stop-1`` and return their exact sums.

    Rows that abort are dropped and the block is recomputed without them;
    the per-row streams make the survivors' results unchanged.
    """
    grid = spec.grid
    indices = np.arange(start, stop, dtype=np.int64)
    counting = spec.unraveling != "diffusion"
    live = np.ones(indices.size, dtype=bool)
    while True:
        sums = Sums.zeros(grid.n_samples, spec.model.dim)
        acc = _Accumulate(sums, spec.batch_of(indices), spec.model.is_pure, counting, live)
        res = _run_rows(spec, indices, acc)
        if not (res.aborted & live).any():
            break
        live = live & ~res.aborted
        log.warning("ensemble: %d trajectories aborted in block %d..%d", int((~live).sum()), start, stop)
    sums.completed = int(live.sum())
    sums.aborted = int((~live).sum())
    np.add.at(sums.batch_count, spec.batch_of(indices[live]), 1)
    if counting:
        final = res.jumps[live].sum(axis=1)
        sums.final_counts = np.bincount(final).astype(np.int64)
    return sums


def _block_task(args):
    spec, start, stop = args
    return run_block(spec, start, stop)


def default_workers() -> int:
    env = os.environ.get("COHFILTER_WORKERS")
    if env:
        value = int(env)
        if value < 1:
            raise ValueError("COHFILTER_WORKERS must be >= 1")
        return value
    return 1


def run_ensemble(spec: EnsembleSpec) -> "EnsembleStats":
    """Run ``spec.n_traj`` trajectories on ``spec.workers`` processes and merge them.

    Raises
    ------
    AbortRateError
        More than 0.1% of trajectories aborted on truncation leakage.
    """
    tasks = [(spec, a, b) for a, b in spec.blocks()]
    if spec.workers == 1 or len(tasks) == 1:
        parts = [_block_task(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=min(spec.workers, len(tasks))) as pool:
            parts = list(pool.map(_block_task, tasks))
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    if total.aborted > ABORT_RATE_LIMIT * spec.n_traj:
        raise AbortRateError(f"{total.aborted} of {spec.n_traj} trajectories aborted (limit {ABORT_RATE_LIMIT:.1%})")
    if total.completed == 0:
        raise AbortRateError("no trajectory completed")
    return EnsembleStats.from_sums(spec, total)


def _batch_stats(sums: np.ndarray, counts: np.ndarray, scale: float):
    """Mean over all trajectories and batch-means standard error, per sample."""
    n = counts.sum()
    mean = sums.sum(axis=0) / scale / n
    used = counts > 0
    nb = int(used.sum())
    if nb < 2:
        return mean, np.full(mean.shape, np.nan)
    bm = sums[used] / scale / counts[used][:, None]
    se = bm.std(axis=0, ddof=1) / math.sqrt(nb)
    return mean, se


@dataclass(frozen=True, eq=False)
class EnsembleStats:
    """Merged statistics of an ensemble run.

    ``mean_record`` is the mean count (counting, heterodyne) or the mean
    integrated current (diffusion) at each sample. ``incr_mean``/``incr_var``
    are the across-trajectory mean and variance of the record increments
    between consecutive samples.
    """

    spec: EnsembleSpec
    times: np.ndarray
    completed: int
    aborted: int
    mean_rho: np.ndarray
    mean_b: np.ndarray
    se_b_re: np.ndarray
    se_b_im: np.ndarray
    mean_n: np.ndarray
    se_n: np.ndarray
    mean_x_sq: np.ndarray
    se_x_sq: np.ndarray
    mean_record: np.ndarray
    se_record: np.ndarray
    incr_mean: np.ndarray
    incr_var: np.ndarray
    count_histogram: np.ndarray | None = None
    sums: Sums | None = field(default=None, repr=False)

    @classmethod
    def from_sums(cls, spec: EnsembleSpec, s: Sums) -> "EnsembleStats":
        n = s.completed
        rho = (s.rho_re / SCALE + 1j * s.rho_im / SCALE) / n
        rho = 0.5 * (rho + np.swapaxes(rho, -1, -2).conj())
        counting = spec.unraveling != "diffusion"
        bre, se_re = _batch_stats(s.b_re, s.batch_count, SCALE)
        bim, se_im = _batch_stats(s.b_im, s.batch_count, SCALE)
        mn, se_n = _batch_stats(s.n, s.batch_count, SCALE)
        mx, se_x = _batch_stats(s.x_sq, s.batch_count, SCALE)
        rscale = 1.0 if counting else SCALE
        mr, se_r = _batch_stats(s.rec, s.batch_count, rscale)
        im = s.incr / rscale / n
        isq = s.incr_sq / (1.0 if counting else SCALE) / n
        ivar = (isq - im**2) * (n / (n - 1)) if n > 1 else np.full(im.shape, np.nan)
        return cls(
            spec=spec, times=spec.grid.sample_times, completed=n, aborted=s.aborted,
            mean_rho=rho, mean_b=bre + 1j * bim, se_b_re=se_re, se_b_im=se_im,
            mean_n=mn, se_n=se_n, mean_x_sq=mx, se_x_sq=se_x, mean_record=mr, se_record=se_r,
            incr_mean=im, incr_var=ivar,
            count_histogram=s.final_counts.copy() if counting else None, sums=s,
        )

    @property
    def sample_interval(self) -> float:
        return float(self.times[1] - self.times[0]) if self.times.size > 1 else float("nan")

    def increment_var_ratio(self, eps: float | None = None) -> float:
        """Average over samples of ``Var(dW)/interval``.

        For counting records ``eps`` converts counts to ``W = eps Y - t/eps``
        (the deterministic shift does not change the variance).
        """
        scale = 1.0 if eps is None else eps**2
        return float(np.mean(scale * self.incr_var / self.sample_interval))

    def observables(self) -> dict[str, np.ndarray]:
        """Ensemble-mean series with the CSV column layout."""
        d = self.mean_rho.shape[-1]
        return {
            "t": self.times,
            "re_b": self.mean_b.real,
            "im_b": self.mean_b.imag,
            "n": self.mean_n,
            "purity": np.einsum("tij,tij->t", self.mean_rho, self.mean_rho.conj()).real,
            "defect": np.abs(np.trace(self.mean_rho, axis1=1, axis2=2).real - 1.0) if d else None,
        }

    def to_records(self) -> list[dict]:
        """One JSON-ready object per sample, then a summary object."""
        out = []
        for j, t in enumerate(self.times):
            out.append({
                "t": float(t),
                "re_b": float(self.mean_b[j].real), "im_b": float(self.mean_b[j].imag),
                "se_re_b": float(self.se_b_re[j]), "se_im_b": float(self.se_b_im[j]),
                "n": float(self.mean_n[j]), "se_n": float(self.se_n[j]),
                "x_sq": float(self.mean_x_sq[j]), "se_x_sq": float(self.se_x_sq[j]),
                "record": float(self.mean_record[j]), "se_record": float(self.se_record[j]),
            })
        summary = {
            "summary": True,
            "unraveling": self.spec.unraveling,
            "n_traj": self.spec.n_traj,
            "completed": self.completed,
            "aborted": self.aborted,
            "dt": self.spec.grid.dt,
            "count_histogram": None if self.count_histogram is None else [int(c) for c in self.count_histogram],
            "increment_var_ratio": self.increment_var_ratio(
                self.spec.model.lo.epsilon if self.spec.unraveling == "heterodyne" else None
            ) if self.times.size > 1 and self.completed > 1 else None,
        }
        out.append(summary)
        return out


@dataclass(frozen=True)
class ValidationReport:
    """Outcome of comparing an ensemble mean with the master-equation solution."""

    status: str
    threshold: float
    max_trace_distance: float
    trace_distance: np.ndarray
    z_re_b: np.ndarray
    z_im_b: np.ndarray
    z_n: np.ndarray
    n_traj: int

    @property
    def passed(self) -> bool:
        return self.status == "PASS"

    def to_dict(self) -> dict:
        def worst(z):
            z = z[np.isfinite(z)]
            return float(np.abs(z).max()) if z.size else None

        return {
            "status": self.status,
            "threshold": self.threshold,
            "max_trace_distance": self.max_trace_distance,
            "n_traj": self.n_traj,
            "max_abs_z": {"re_b": worst(self.z_re_b), "im_b": worst(self.z_im_b), "n": worst(self.z_n)},
        }


def validation_threshold(unraveling: str, n_traj: int, dt: float) -> float:
    return max(4.0 / math.sqrt(n_traj), VALIDATION_C[unraveling] * dt)


def validate_against_master(stats: EnsembleStats, run: MasterRun) -> ValidationReport:
    """Trace distance and z-scores of the ensemble mean against ``run`` at every sample.

    The verdict is ``PASS`` iff the largest trace distance is within
    ``max(4/sqrt(n), C dt)``, ``FAIL`` otherwise, and ``INCONCLUSIVE`` for
    fewer than 20 completed trajectories.

    Raises
    ------
    ValueError
        The two grids or dimensions differ.
    """
    if run.grid.shape != stats.times.shape or np.any(np.abs(run.grid - stats.times) > 1e-9):
        raise ValueError("ensemble and master grids differ")
    if run.states.shape[-1] != stats.mean_rho.shape[-1]:
        raise ValueError("ensemble and master dimensions differ")
    td = np.array([fs.trace_distance(a, b) for a, b in zip(stats.mean_rho, run.states)])
    obs = run.observables()

    def z(mean, ref, se):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (mean - ref) / se

    n = stats.completed
    thr = validation_threshold(stats.spec.unraveling, n, stats.spec.grid.dt)
    worst = float(td.max())
    if n < MIN_TRAJ_FOR_VERDICT:
        status = "INCONCLUSIVE"
    else:
        status = "PASS" if worst <= thr else "FAIL"
    return ValidationReport(
        status=status, threshold=thr, max_trace_distance=worst, trace_distance=td,
        z_re_b=z(stats.mean_b.real, obs["re_b"], stats.se_b_re),
        z_im_b=z(stats.mean_b.imag, obs["im_b"], stats.se_b_im),
        z_n=z(stats.mean_n, obs["n"], stats.se_n),
        n_traj=n,
    )
