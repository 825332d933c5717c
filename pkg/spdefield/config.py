"""Campaign configuration: INI file, then SPDEFIELD_* environment, then CLI flags."""

import configparser
import dataclasses
import logging
import os
from dataclasses import dataclass, fields, replace
from pathlib import Path

from dotenv import load_dotenv

from spdefield.errors import ConfigError, InvalidArgumentError
from spdefield.services.linalg import SolverOptions
from spdefield.services.mesh import CartesianMesh, build_cartesian_mesh
from spdefield.services.mlmc import MlmcConfig
from spdefield.services.sampler import MaternParams, check_sampler_order

load_dotenv()

log = logging.getLogger(__name__)

ENV_PREFIX = "SPDEFIELD_"
COMMANDS = ("sample", "variance-map", "mlmc", "covariance-check", "darcy")


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(",", " ").split())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(",", " ").split())


def _bool(text: str) -> bool:
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional(convert):
    def parse(text: str):
        return None if text.strip().lower() in ("", "none", "auto") else convert(text)

    return parse


@dataclass
class MeshSpec:
    dim: int = 2
    origin: tuple[float, ...] = (0.0, 0.0)
    extents: tuple[float, ...] = (1.0, 1.0)
    cells: tuple[int, ...] = (8, 8)
    levels: int = 1

    def coarsest(self) -> CartesianMesh:
        return build_cartesian_mesh(self.dim, self.origin, self.extents, self.cells)


@dataclass
class FieldSpec:
    nu: float = 1.0
    kappa: float | None = None
    correlation_length: float | None = 0.1
    sigma2: float = 1.0
    model: str = "matern"
    smoother_depth: int = 0


@dataclass
class EmbeddingSpec:
    enabled: bool = True
    padding: float | None = None


@dataclass
class SolverSpec:
    rtol: float = 1e-6
    atol: float = 1e-12
    maxiter: int | None = None
    preconditioner: str = "jacobi"


@dataclass
class RunSpec:
    seed: int = 0
    threads: int = 1
    samples: int = 1
    level: int = 0
    pair: bool = False
    log_level: str = "INFO"


@dataclass
class MlmcSpec:
    target_mse: float = 1e-3
    split: float = 0.5
    pilot_samples: int = 20
    min_samples: int = 2
    max_samples_per_level: int = 1_000_000
    max_rounds: int = 20
    failure_budget: int = 0
    cost_model: str = "dofs"
    sweep: tuple[float, ...] = ()
    mc_samples: int = 0


@dataclass
class DarcySpec:
    flow_axis: int = -1
    p_in: float = 1.0
    p_out: float = 0.0
    spe10_path: str = ""
    spe10_layer: int = 0
    random_field: bool = True


@dataclass
class CovarianceSpec:
    samples: int = 5000
    truncation: int | None = None
    dense_limit: int = 10_000


@dataclass
class OutputSpec:
    out_dir: str = "out"
    format: str = "csv"
    database: str | None = None
    kl_export: bool = False

    @property
    def database_path(self) -> Path | None:
        if self.database is None:
            return Path(self.out_dir) / "campaigns.db"
        return Path(self.database) if self.database else None


@dataclass
class CampaignConfig:
    command: str = "sample"
    mesh: MeshSpec = dataclasses.field(default_factory=MeshSpec)
    field: FieldSpec = dataclasses.field(default_factory=FieldSpec)
    embedding: EmbeddingSpec = dataclasses.field(default_factory=EmbeddingSpec)
    solver: SolverSpec = dataclasses.field(default_factory=SolverSpec)
    run: RunSpec = dataclasses.field(default_factory=RunSpec)
    mlmc: MlmcSpec = dataclasses.field(default_factory=MlmcSpec)
    darcy: DarcySpec = dataclasses.field(default_factory=DarcySpec)
    covariance: CovarianceSpec = dataclasses.field(default_factory=CovarianceSpec)
    output: OutputSpec = dataclasses.field(default_factory=OutputSpec)
    source: str | None = None

    def matern_params(self) -> MaternParams:
        f = self.field
        if f.kappa is not None:
            return MaternParams(nu=f.nu, kappa=f.kappa, sigma2=f.sigma2, dim=self.mesh.dim)
        return MaternParams.from_correlation_length(f.nu, f.correlation_length, f.sigma2, self.mesh.dim)

    def padding(self) -> float:
        """Requested padding; one correlation length unless set."""
        if not self.embedding.enabled:
            return 0.0
        if self.embedding.padding is not None:
            return self.embedding.padding
        return self.matern_params().correlation_length

    def solver_options(self) -> SolverOptions:
        s = self.solver
        return SolverOptions(rtol=s.rtol, atol=s.atol, maxiter=s.maxiter, preconditioner=s.preconditioner)

    def mlmc_config(self) -> MlmcConfig:
        m = self.mlmc
        return MlmcConfig(
            target_mse=m.target_mse,
            split=m.split,
            pilot_samples=m.pilot_samples,
            min_samples=m.min_samples,
            max_samples_per_level=m.max_samples_per_level,
            max_rounds=m.max_rounds,
            failure_budget=m.failure_budget,
            cost_model=m.cost_model,
            seed=self.run.seed,
            threads=self.run.threads,
        )

    def to_lines(self) -> list[str]:
        """Resolved configuration as `section.key = value` lines."""
        lines = [f"command = {self.command}"]
        for section in _SECTIONS:
            spec = getattr(self, section)
            for f in fields(spec):
                lines.append(f"{section}.{f.name} = {_render(getattr(spec, f.name))}")
        return lines


def _render(value) -> str:
    if isinstance(value, tuple):
        return " ".join(str(v) for v in value)
    return "" if value is None else str(value)


_SECTIONS = ("mesh", "field", "embedding", "solver", "run", "mlmc", "darcy", "covariance", "output")

_PARSERS = {
    "mesh": {"dim": int, "origin": _floats, "extents": _floats, "cells": _ints, "levels": int},
    "field": {
        "nu": float, "kappa": _optional(float), "correlation_length": _optional(float),
        "sigma2": float, "model": str, "smoother_depth": int,
    },
    "embedding": {"enabled": _bool, "padding": _optional(float)},
    "solver": {"rtol": float, "atol": float, "maxiter": _optional(int), "preconditioner": str},
    "run": {"seed": int, "threads": int, "samples": int, "level": int, "pair": _bool, "log_level": str},
    "mlmc": {
        "target_mse": float, "split": float, "pilot_samples": int, "min_samples": int,
        "max_samples_per_level": int, "max_rounds": int, "failure_budget": int,
        "cost_model": str, "sweep": _floats, "mc_samples": int,
    },
    "darcy": {
        "flow_axis": int, "p_in": float, "p_out": float,
        "spe10_path": str, "spe10_layer": int, "random_field": _bool,
    },
    "covariance": {"samples": int, "truncation": _optional(int), "dense_limit": int},
    "output": {"out_dir": str, "format": str, "database": str, "kl_export": _bool},
}

_ENV = {
    "SEED": ("run", "seed"),
    "THREADS": ("run", "threads"),
    "OUT_DIR": ("output", "out_dir"),
    "SPE10_PATH": ("darcy", "spe10_path"),
    "DB_PATH": ("output", "database"),
    "LOG_LEVEL": ("run", "log_level"),
}


def _set(config: CampaignConfig, section: str, key: str, text: str) -> None:
    parsers = _PARSERS.get(section)
    if parsers is None:
        raise ConfigError(f"unknown section [{section}]")
    if key not in parsers:
        raise ConfigError(f"unknown key {key!r} in [{section}]")
    try:
        value = parsers[key](text)
    except ValueError as e:
        raise ConfigError(f"[{section}] {key} = {text!r}: {e}") from e
    setattr(getattr(config, section), key, value)


def parse_config(text: str, source: str | None = None) -> CampaignConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source or "<config>")
    except configparser.Error as e:
        raise ConfigError(f"cannot parse {source or 'config'}: {e}") from e

    config = CampaignConfig(source=source)
    for key in parser.defaults():
        raise ConfigError(f"key {key!r} outside any section")
    for section in parser.sections():
        for key, value in parser.items(section, raw=True):
            _set(config, section, key, value)
    return config


def load_config(path: str | Path | None = None) -> CampaignConfig:
    """Read a config file (defaults when None), then apply SPDEFIELD_* environment overrides."""
    if path is None:
        config = CampaignConfig()
    else:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        config = parse_config(text, source=str(path))
    apply_env(config, os.environ)
    return config


def apply_env(config: CampaignConfig, environ) -> CampaignConfig:
    for name, (section, key) in _ENV.items():
        value = environ.get(ENV_PREFIX + name)
        if value is not None:
            log.debug("override %s.%s from %s%s", section, key, ENV_PREFIX, name)
            _set(config, section, key, value)
    return config


def apply_overrides(config: CampaignConfig, **overrides) -> CampaignConfig:
    """CLI flags; None leaves the value alone."""
    targets = {
        "seed": "run", "threads": "run", "samples": "run", "pair": "run", "log_level": "run",
        "out_dir": "output", "format": "output",
    }
    for key, value in overrides.items():
        if value is None:
            continue
        if key == "command":
            config.command = value
        elif key == "no_embed":
            if value:
                config.embedding = replace(config.embedding, enabled=False)
        elif key in targets:
            setattr(getattr(config, targets[key]), key, value)
        else:
            raise ConfigError(f"unknown override {key!r}")
    return config


def validate(config: CampaignConfig) -> CampaignConfig:
    """Check ranges and cross-field consistency; raises ConfigError."""
    m = config.mesh
    problems = []
    if config.command not in COMMANDS:
        problems.append(f"unknown command {config.command!r}")
    if m.dim not in (2, 3):
        problems.append(f"mesh.dim must be 2 or 3, got {m.dim}")
    for name in ("origin", "extents", "cells"):
        if len(getattr(m, name)) != m.dim:
            problems.append(f"mesh.{name} needs {m.dim} entries")
    if any(e <= 0 for e in m.extents):
        problems.append("mesh.extents must be positive")
    if any(n < 1 for n in m.cells):
        problems.append("mesh.cells must be positive")
    if m.levels < 1:
        problems.append("mesh.levels must be >= 1")
    f = config.field
    if f.kappa is None and f.correlation_length is None:
        problems.append("field needs kappa or correlation_length")
    if f.model not in ("matern", "exponential"):
        problems.append(f"field.model must be matern or exponential, got {f.model!r}")
    if f.model == "exponential" and f.nu != 0.5:
        problems.append("the exponential model needs field.nu = 0.5")
    if f.smoother_depth < 0:
        problems.append("field.smoother_depth must be >= 0")
    if config.embedding.padding is not None and config.embedding.padding < 0:
        problems.append("embedding.padding must be non-negative")
    s = config.solver
    if not (s.rtol > 0 and s.atol > 0):
        problems.append("solver tolerances must be positive")
    if s.preconditioner not in ("jacobi", "sgs", "none"):
        problems.append(f"solver.preconditioner must be jacobi, sgs or none, got {s.preconditioner!r}")
    r = config.run
    if not 0 <= r.seed < 2**64:
        problems.append("run.seed must fit in 64 bits")
    if r.threads < 1:
        problems.append("run.threads must be >= 1")
    if r.samples < 0:
        problems.append("run.samples must be >= 0")
    if not 0 <= r.level < m.levels:
        problems.append(f"run.level must be in 0..{m.levels - 1}")
    if r.pair and r.level >= m.levels - 1:
        problems.append("run.pair needs a coarser level below run.level")
    if not 0 <= config.darcy.flow_axis + (m.dim if config.darcy.flow_axis < 0 else 0) < m.dim:
        problems.append(f"darcy.flow_axis out of range for {m.dim}D")
    if config.output.format not in ("csv", "binary"):
        problems.append(f"output.format must be csv or binary, got {config.output.format!r}")
    if config.covariance.samples < 0 or config.covariance.dense_limit < 1:
        problems.append("covariance.samples and dense_limit must be positive")
    if problems:
        raise ConfigError("; ".join(problems))

    try:
        check_sampler_order(config.matern_params(), config.field.smoother_depth)
        if config.command == "mlmc":
            config.mlmc_config()
            if m.levels < 2:
                raise ConfigError("mlmc needs mesh.levels >= 2")
    except InvalidArgumentError as e:
        raise ConfigError(str(e)) from e
    return config
