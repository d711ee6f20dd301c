"""Experiment configuration: YAML text validated against a strict schema.

Unknown keys are rejected, and validation errors name the dotted path of the
offending key.  ``build_*`` helpers turn a validated config into the model,
driver, terminal and settings objects used by the solvers.
"""

from __future__ import annotations

import copy
from pathlib import Path
from typing import List, Literal, Optional, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import expressions
from .bsde_solver import DriverSpec, PicardConfig, RegressionBasis, TerminalSpec
from .decoupled_mild import MonteCarloSettings, SpaceTimeGrid
from .errors import ConfigurationError
from .forward_models import DiffusionModel, DistributionalDriftModel, TimeGrid
from .pde_reference import FdConfig


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ModelSection(_Strict):
    kind: Literal["brownian", "diffusion", "distributional_drift"] = "brownian"
    dim: int = Field(1, ge=1)
    # brownian
    drift: float = 0.0
    variance: float = Field(1.0, ge=0.0)
    # diffusion: expressions in t, x1..xd
    mu: Optional[List[str]] = None
    alpha: Optional[List[List[str]]] = None
    mu_bound: float = float("inf")
    alpha_bound: float = float("inf")
    # distributional drift: expressions in x
    sigma: str = "1"
    Sigma: str = "0"
    domain: List[float] = Field(default_factory=lambda: [-12.0, 12.0], min_length=2, max_length=2)
    resolution: int = Field(4001, ge=11)

    @model_validator(mode="after")
    def _shapes(self):
        if self.kind == "diffusion":
            if self.mu is None or self.alpha is None:
                raise ValueError("a diffusion model needs both 'mu' and 'alpha'")
            if len(self.mu) != self.dim or len(self.alpha) != self.dim or any(
                    len(row) != self.dim for row in self.alpha):
                raise ValueError("'mu' must have dim entries and 'alpha' must be dim x dim")
        if self.kind == "distributional_drift" and self.dim != 1:
            raise ValueError("the distributional-drift model is one-dimensional")
        return self


class DriverSection(_Strict):
    expression: str = "0"
    K_Y: float = Field(0.0, ge=0.0)
    K_Z: float = Field(0.0, ge=0.0)


class PicardSection(_Strict):
    max_iter: int = Field(25, ge=1)
    tol: float = Field(1e-4, ge=0.0)
    tol_abs: float = Field(0.0, ge=0.0)
    lam: Optional[float] = None
    scheme: Literal["left", "trapezoid"] = "left"


class SolverSection(_Strict):
    n_paths: int = Field(100000, ge=2)
    n_steps: int = Field(50, ge=1)
    basis_degree: int = Field(4, ge=0)
    ridge: float = Field(1e-8, ge=0.0)
    picard: PicardSection = PicardSection()


class StartSection(_Strict):
    s: float = 0.0
    x: List[float] = Field(default_factory=lambda: [0.0])


class GridSection(_Strict):
    times: Union[int, List[float]] = 11
    space: Union[int, List[float]] = 41
    centre: float = 0.0
    width: float = Field(5.0, gt=0.0)


class MildSection(_Strict):
    max_sweeps: int = Field(50, ge=1)
    tol: float = Field(1e-6, ge=0.0)


class VerificationSection(_Strict):
    grid: GridSection = GridSection()
    test_points: List[List[float]] = Field(default_factory=lambda: [[0.0, 0.0]])
    n_paths: int = Field(20000, ge=2)
    dt: float = Field(0.02, gt=0.0)
    quadrature: Literal["left", "trapezoid"] = "left"
    interpolation: Literal["linear", "cubic"] = "cubic"
    max_outside_fraction: float = Field(1e-3, ge=0.0)
    threshold: float = Field(3.0, gt=0.0)
    pair_source: Literal["bsde", "fixed_point", "fd", "expression"] = "bsde"
    u: Optional[str] = None
    v: Optional[List[str]] = None
    perturb_u: float = 0.0
    mild: MildSection = MildSection()

    @model_validator(mode="after")
    def _expression_pair(self):
        if self.pair_source == "expression" and (self.u is None or self.v is None):
            raise ValueError("pair_source 'expression' needs 'u' and 'v'")
        return self


class FdSection(_Strict):
    interval: List[float] = Field(default_factory=lambda: [-8.0, 8.0], min_length=2, max_length=2)
    n_space: int = Field(801, ge=5)
    n_time: int = Field(400, ge=1)
    theta: float = Field(0.5, ge=0.0, le=1.0)
    boundary: Literal["dirichlet", "neumann"] = "dirichlet"


class OutputSection(_Strict):
    directory: str = "out"
    formats: List[Literal["csv", "json", "binary"]] = Field(
        default_factory=lambda: ["csv", "json"])


class ExperimentConfig(_Strict):
    seed: int = Field(0, ge=0, lt=2**64)
    horizon: float = Field(1.0, gt=0.0)
    model: ModelSection = ModelSection()
    terminal: str = "0"
    driver: DriverSection = DriverSection()
    solver: SolverSection = SolverSection()
    start: StartSection = StartSection()
    verification: VerificationSection = VerificationSection()
    fd: FdSection = FdSection()
    output: OutputSection = OutputSection()

    @field_validator("terminal")
    @classmethod
    def _terminal_parses(cls, value):
        expressions.parse(value, ("x",), dim=64)
        return value


def _format_error(exc):
    lines = []
    for err in exc.errors():
        where = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{where}: {err['msg']}")
    return "invalid configuration:\n  " + "\n  ".join(lines)


def _set_path(tree, dotted, value):
    keys = dotted.split(".")
    node = tree
    for key in keys[:-1]:
        child = node.get(key)
        if child is None:
            child = node[key] = {}
        if not isinstance(child, dict):
            raise ConfigurationError(f"override {dotted!r}: {key!r} is not a section")
        node = child
    node[keys[-1]] = value


def parse_override(text):
    """``"a.b=value"`` into ``("a.b", parsed value)``; the value is read as YAML."""
    if "=" not in text:
        raise ConfigurationError(f"override {text!r} must look like key=value")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def load_config(source=None, overrides=(), seed=None):
    """Read YAML from a path (or a mapping), apply ``key=value`` overrides and validate."""
    if source is None:
        tree = {}
    elif isinstance(source, dict):
        tree = copy.deepcopy(source)
    else:
        try:
            tree = yaml.safe_load(Path(source).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigurationError(f"cannot read {source}: {exc}") from None
    if not isinstance(tree, dict):
        raise ConfigurationError("the configuration must be a mapping")
    for item in overrides:
        key, value = parse_override(item) if isinstance(item, str) else item
        _set_path(tree, key, value)
    if seed is not None:
        tree["seed"] = int(seed)
    try:
        return ExperimentConfig.model_validate(tree)
    except ValidationError as exc:
        raise ConfigurationError(_format_error(exc)) from None
    except ConfigurationError as exc:
        raise ConfigurationError(f"invalid configuration: {exc}") from None


# ---------------------------------------------------------------------------
# builders


def _scalar_of_x(source):
    expr = expressions.parse(source, ("x",), 1)

    def fn(x):
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, 1)
        return np.broadcast_to(expr.evaluate(x=flat), (flat.shape[0],)).reshape(x.shape)

    return fn


def build_model(cfg):
    m = cfg.model
    if m.kind == "brownian":
        return DiffusionModel.brownian(m.dim, m.drift, m.variance)
    if m.kind == "diffusion":
        mus = [expressions.state_function(e, m.dim) for e in m.mu]
        alphas = [[expressions.state_function(e, m.dim) for e in row] for row in m.alpha]

        def mu(t, x):
            return np.stack([f(t, x) for f in mus], axis=1)

        def alpha(t, x):
            return np.stack([np.stack([f(t, x) for f in row], axis=1) for row in alphas], axis=1)

        return DiffusionModel(m.dim, mu, alpha, m.mu_bound, m.alpha_bound)
    return DistributionalDriftModel.from_sigma(_scalar_of_x(m.sigma), _scalar_of_x(m.Sigma),
                                               tuple(m.domain), m.resolution)


def build_driver(cfg):
    d = cfg.driver
    return DriverSpec(expressions.driver_function(d.expression, cfg.model.dim), d.K_Y, d.K_Z,
                      name=d.expression)


def build_terminal(cfg):
    return TerminalSpec(expressions.terminal_function(cfg.terminal, cfg.model.dim),
                        name=cfg.terminal)


def build_picard(cfg):
    s = cfg.solver
    p = s.picard
    return PicardConfig(max_iter=p.max_iter, tol=p.tol, tol_abs=p.tol_abs, lam=p.lam,
                        basis=RegressionBasis(s.basis_degree, s.ridge), scheme=p.scheme)


def build_time_grid(cfg):
    return TimeGrid.uniform(0.0, cfg.horizon, cfg.solver.n_steps)


def build_mc(cfg, workers=1):
    v = cfg.verification
    return MonteCarloSettings(n_paths=v.n_paths, dt=v.dt, seed=cfg.seed, picard=build_picard(cfg),
                              quadrature=v.quadrature, interpolation=v.interpolation,
                              max_outside_fraction=v.max_outside_fraction, workers=workers)


def build_space_time_grid(cfg):
    g = cfg.verification.grid
    T, d = cfg.horizon, cfg.model.dim
    times = np.linspace(0.0, T, g.times) if isinstance(g.times, int) else np.asarray(g.times)
    if isinstance(g.space, int):
        half = g.width * np.sqrt(T)
        axis = np.linspace(g.centre - half, g.centre + half, g.space)
    else:
        axis = np.asarray(g.space, dtype=float)
    if times[-1] != T:
        raise ConfigurationError("verification.grid.times must end at the horizon")
    return SpaceTimeGrid(times, (axis,) * d)


def build_fd(cfg):
    f = cfg.fd
    return FdConfig(interval=tuple(f.interval), n_space=f.n_space, n_time=f.n_time, T=cfg.horizon,
                    theta=f.theta, boundary=f.boundary,
                    interpolation=cfg.verification.interpolation)


def build_test_points(cfg):
    d = cfg.model.dim
    out = []
    for i, p in enumerate(cfg.verification.test_points):
        if len(p) != d + 1:
            raise ConfigurationError(f"verification.test_points.{i} needs s and {d} coordinate(s)")
        out.append((float(p[0]), np.asarray(p[1:], dtype=float)))
    return out

