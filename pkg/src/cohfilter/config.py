"""Run configuration: schema validation, defaults, model construction, manifests."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import jsonschema

from . import fockspace as fs
from .model import DISABLED_LO, DriveField, LocalOscillator, SystemModel

CODE_VERSION = "0.1.0"


class ConfigError(ValueError):
    """The configuration is malformed; the message names the offending field."""


def schema() -> dict:
    return json.loads(resources.files(__package__).joinpath("config.schema.json").read_text())


@dataclass(frozen=True)
class InitialConfig:
    kind: str = "vacuum"
    n: int = 0
    beta: tuple[float, float] = (0.0, 0.0)
    mixed: bool = False


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 20
    omega: float = 1.0
    mu: float = 1.0
    initial: InitialConfig = field(default_factory=InitialConfig)


@dataclass(frozen=True)
class DriveConfig:
    lam: float = 0.5
    omega: float | None = None
    phi: float = 0.0


@dataclass(frozen=True)
class LOConfig:
    enabled: bool = False
    epsilon: float = 0.3
    theta: float = 0.0
    omega: float = 0.0


@dataclass(frozen=True)
class RunSection:
    unraveling: str = "counting"
    method: str = "euler_bernoulli"
    t_final: float = 5.0
    dt: float | None = None
    master_dt: float | None = None
    seed: int = 0
    n_traj: int = 4000
    sample_stride: int = 100
    sample_interval: float | None = None
    block_size: int = 256
    workers: int | None = None
    eps_list: tuple[float, ...] = (0.5, 0.25, 0.125)


@dataclass(frozen=True)
class OutputConfig:
    dir: str = "out"


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    drive: DriveConfig = field(default_factory=DriveConfig)
    lo: LOConfig = field(default_factory=LOConfig)
    run: RunSection = field(default_factory=RunSection)
    output: OutputConfig = field(default_factory=OutputConfig)

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))

    def replace(self, section: str, **changes) -> "RunConfig":
        current = getattr(self, section)
        return RunConfig(**{**{f.name: getattr(self, f.name) for f in fields(self)}, section: type(current)(**{**asdict(current), **changes})})

    def step(self) -> float:
        """Resolved trajectory step: explicit ``dt``, else ``eps**2/20`` for heterodyne, else 1e-3."""
        if self.run.dt is not None:
            return self.run.dt
        if self.run.unraveling == "heterodyne":
            return self.lo.epsilon**2 / 20.0
        return 1e-3

    def master_step(self) -> float:
        return self.run.master_dt if self.run.master_dt is not None else min(self.step(), 1e-3)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _path(err: jsonschema.ValidationError) -> str:
    return ".".join(str(p) for p in err.absolute_path) or "<root>"


def parse_config(data: dict) -> RunConfig:
    """Validate ``data`` against the schema and fill in defaults.

    Raises
    ------
    ConfigError
        Schema violation or inconsistent values; the message starts with the
        dotted path of the field.
    """
    if isinstance(data, dict) and "manifest" in data and "config" in data:
        data = data["config"]
    validator = jsonschema.Draft202012Validator(schema())
    errors = sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        raise ConfigError(f"{_path(e)}: {e.message}")
    m = dict(data.get("model", {}))
    init = InitialConfig(**{**m.pop("initial", {})})
    if "beta" in data.get("model", {}).get("initial", {}):
        init = InitialConfig(init.kind, init.n, tuple(float(b) for b in init.beta), init.mixed)
    run = dict(data.get("run", {}))
    if "eps_list" in run:
        run["eps_list"] = tuple(float(e) for e in run["eps_list"])
    cfg = RunConfig(
        model=ModelConfig(**m, initial=init),
        drive=DriveConfig(**data.get("drive", {})),
        lo=LOConfig(**data.get("lo", {})),
        run=RunSection(**run),
        output=OutputConfig(**data.get("output", {})),
    )
    _check(cfg)
    return cfg


def _check(cfg: RunConfig) -> None:
    if cfg.model.initial.kind == "fock" and cfg.model.initial.n >= cfg.model.dim:
        raise ConfigError("model.initial.n: Fock level must be below model.dim")
    if cfg.run.unraveling in ("heterodyne", "diffusion") and not cfg.lo.enabled:
        raise ConfigError(f"lo.enabled: the {cfg.run.unraveling} unraveling needs the local oscillator")
    if list(cfg.run.eps_list) != sorted(cfg.run.eps_list, reverse=True) or len(set(cfg.run.eps_list)) != len(cfg.run.eps_list):
        raise ConfigError("run.eps_list: must be strictly decreasing")
    if cfg.run.method == "waiting_time" and cfg.model.initial.mixed:
        raise ConfigError("run.method: the waiting-time sampler needs a pure initial state")
    try:
        build_model(cfg)
    except ValueError as exc:
        raise ConfigError(f"model.initial: {exc}") from exc


def load_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"<file>: cannot read {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"<file>: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    return parse_config(data)


def emit_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"


def initial_state(cfg: RunConfig):
    init, dim = cfg.model.initial, cfg.model.dim
    if init.kind == "vacuum":
        state = fs.vacuum(dim)
    elif init.kind == "fock":
        state = fs.basis_state(dim, init.n)
    else:
        state = fs.coherent_state(dim, complex(*init.beta))
    return state.projector() if init.mixed else state


def build_model(cfg: RunConfig) -> SystemModel:
    d, lo = cfg.drive, cfg.lo
    oscillator = LocalOscillator(lo.epsilon, lo.theta, lo.omega, True) if lo.enabled else DISABLED_LO
    return SystemModel(
        dim=cfg.model.dim,
        omega=cfg.model.omega,
        mu=cfg.model.mu,
        drive=DriveField(d.lam, d.omega, d.phi),
        lo=oscillator,
        initial=initial_state(cfg),
    )


def manifest(cfg: RunConfig, command: str, files: list[str], **extra) -> str:
    """Fully resolved configuration plus code version; deterministic text (no timestamps)."""
    body = {
        "manifest": True,
        "command": command,
        "code_version": CODE_VERSION,
        "config": cfg.to_dict(),
        "resolved": {"dt": cfg.step(), "master_dt": cfg.master_step(), **extra},
        "files": sorted(files),
    }
    return json.dumps(body, indent=2, sort_keys=True) + "\n"
