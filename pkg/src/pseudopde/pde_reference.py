"""Deterministic reference solutions of the semilinear parabolic equation in one space dimension.

    d_t u + 1/2 alpha d_xx u + mu d_x u + f(t, x, u, alpha d_x u) = 0,   u(T, .) = g

Theta-scheme in time, central differences in space, and a frozen-coefficient
Newton iteration for the nonlinear term at every step.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np
from scipy.linalg import solve_banded
from scipy.stats import norm

from .errors import ConfigurationError, ConvergenceError, NonFiniteError
from .operators import GridFunction


class BoundaryTruncationWarning(UserWarning):
    """Paths from the region of interest reach the truncated boundary with noticeable probability."""


@dataclass(frozen=True)
class FdConfig:
    """Space interval, mesh and nonlinear-solve settings.

    ``n_space`` counts grid points including both ends; ``n_time`` counts
    steps.  ``boundary`` is ``"dirichlet"`` (values from ``boundary_values``,
    or from the terminal function when that is ``None``) or ``"neumann"``
    (zero slope).  ``interest`` is the sub-interval whose values matter; it
    drives the truncation warning and defaults to the middle half.
    """

    interval: Tuple[float, float] = (-8.0, 8.0)
    n_space: int = 801
    n_time: int = 400
    T: float = 1.0
    t0: float = 0.0
    theta: float = 0.5
    boundary: str = "dirichlet"
    boundary_values: Optional[Callable] = None
    inner_iterations: int = 5
    inner_tol: float = 1e-10
    interest: Optional[Tuple[float, float]] = None
    interpolation: str = "cubic"
    warn_mass: float = 1e-3

    def __post_init__(self):
        lo, hi = self.interval
        if not hi > lo:
            raise ConfigurationError("space interval must have positive length")
        if self.n_space < 5 or self.n_time < 1:
            raise ConfigurationError("need at least 5 space points and one time step")
        if self.n_time < self.n_space / 4:
            raise ConfigurationError(
                f"n_time={self.n_time} is below the quality floor n_space/4={self.n_space / 4:g}")
        if not self.T > self.t0:
            raise ConfigurationError("horizon must exceed the start time")
        if not 0.0 <= self.theta <= 1.0:
            raise ConfigurationError("theta must lie in [0, 1]")
        if self.boundary not in ("dirichlet", "neumann"):
            raise ConfigurationError(f"unknown boundary condition {self.boundary!r}")
        if self.inner_iterations < 1:
            raise ConfigurationError("need at least one inner iteration")

    @property
    def space(self):
        return np.linspace(self.interval[0], self.interval[1], self.n_space)

    @property
    def times(self):
        return np.linspace(self.t0, self.T, self.n_time + 1)


def _coefficients(model, t, x):
    states = x[:, None]
    return 0.5 * model.alpha_at(t, states)[:, 0, 0], model.drift_at(t, states)[:, 0]


def _apply_operator(A, B, u, dx, neumann):
    out = np.zeros_like(u)
    out[1:-1] = (A[1:-1] * (u[2:] - 2.0 * u[1:-1] + u[:-2]) / dx**2
                 + B[1:-1] * (u[2:] - u[:-2]) / (2.0 * dx))
    if neumann:
        out[0] = A[0] * 2.0 * (u[1] - u[0]) / dx**2
        out[-1] = A[-1] * 2.0 * (u[-2] - u[-1]) / dx**2
    return out


def _slope(u, dx, neumann):
    du = np.gradient(u, dx, edge_order=2)
    if neumann:
        du[0] = du[-1] = 0.0
    return du


def _partials(driver, t, states, y, z):
    """Finite-difference partials of the driver in ``y`` and ``z``."""
    ey = 1e-6 * (1.0 + np.abs(y))
    dfy = (driver(t, states, y + ey, z) - driver(t, states, y - ey, z)) / (2.0 * ey)
    ez = 1e-6 * (1.0 + np.abs(z[:, 0]))
    up, down = z.copy(), z.copy()
    up[:, 0] += ez
    down[:, 0] -= ez
    dfz = (driver(t, states, y, up) - driver(t, states, y, down)) / (2.0 * ez)
    return dfy, dfz


def _warn_if_truncated(model, cfg, x):
    lo, hi = cfg.interval
    a, b = cfg.interest if cfg.interest is not None else (lo + 0.25 * (hi - lo), hi - 0.25 * (hi - lo))
    horizon = cfg.T - cfg.t0
    alpha_sup, mu_sup = 0.0, 0.0
    for t in (cfg.t0, cfg.T):
        A, B = _coefficients(model, t, x)
        alpha_sup = max(alpha_sup, float(np.max(2.0 * A)))
        mu_sup = max(mu_sup, float(np.max(np.abs(B))))
    if alpha_sup == 0.0:
        return
    spread = math.sqrt(alpha_sup * horizon)
    mass = 0.0
    for gap in (a - lo, hi - b):
        mass += 2.0 * norm.sf((gap - mu_sup * horizon) / spread)
    if mass > cfg.warn_mass:
        warnings.warn(
            f"about {mass:.2e} of the path mass from [{a:g}, {b:g}] reaches the boundary "
            f"of [{lo:g}, {hi:g}] before the horizon", BoundaryTruncationWarning, stacklevel=3)


def solve_semilinear_fd(model, driver, terminal, cfg=FdConfig()):
    """Backward theta-scheme; returns ``(u, v)`` as grid functions with ``v = alpha d_x u``."""
    if model.dim != 1:
        raise ConfigurationError("the finite-difference reference is one-dimensional")
    x = cfg.space
    times = cfg.times
    dx = x[1] - x[0]
    n = x.size
    neumann = cfg.boundary == "neumann"
    states = x[:, None]
    _warn_if_truncated(model, cfg, x)
    boundary = cfg.boundary_values

    U = np.empty((times.size, n))
    U[-1] = terminal(states)

    def driver_terms(t, u):
        z = (2.0 * _coefficients(model, t, x)[0] * _slope(u, dx, neumann))[:, None]
        return driver(t, states, u, z), z

    A1, B1 = _coefficients(model, times[-1], x)
    for k in range(cfg.n_time - 1, -1, -1):
        t, dt = times[k], times[k + 1] - times[k]
        u_next = U[k + 1]
        f_next, _ = driver_terms(times[k + 1], u_next)
        explicit = u_next + (1.0 - cfg.theta) * dt * (
            _apply_operator(A1, B1, u_next, dx, neumann) + f_next)
        A0, B0 = _coefficients(model, t, x)
        alpha0 = 2.0 * A0
        if not neumann:
            edge = (terminal(states[[0, -1]]) if boundary is None
                    else np.asarray(boundary(t, states[[0, -1]]), dtype=float))

        u = u_next.copy()
        history = []
        for _ in range(cfg.inner_iterations):
            f_k, z_k = driver_terms(t, u)
            dfy, dfz = _partials(driver, t, states, u, z_k)
            # linearised operator: L + dfy + dfz * alpha * D
            diff = A0 / dx**2
            adv = (B0 + dfz * alpha0) / (2.0 * dx)
            lower = diff - adv      # coefficient of u_{i-1}
            upper = diff + adv      # coefficient of u_{i+1}
            centre = -2.0 * diff + dfy
            rhs = explicit + cfg.theta * dt * (f_k - dfy * u - dfz * z_k[:, 0])
            if neumann:
                # ghost node mirrors the neighbour; slope terms vanish at the ends
                upper[0] = 2.0 * diff[0]
                lower[-1] = 2.0 * diff[-1]
                centre[0] = -2.0 * diff[0] + dfy[0]
                centre[-1] = -2.0 * diff[-1] + dfy[-1]
            ab = np.zeros((3, n))
            ab[0, 1:] = -cfg.theta * dt * upper[:-1]
            ab[1] = 1.0 - cfg.theta * dt * centre
            ab[2, :-1] = -cfg.theta * dt * lower[1:]
            if not neumann:
                ab[1, [0, -1]] = 1.0
                ab[0, 1] = 0.0
                ab[2, -2] = 0.0
                rhs = rhs.copy()
                rhs[[0, -1]] = edge
            new = solve_banded((1, 1), ab, rhs)
            if not np.all(np.isfinite(new)):
                raise NonFiniteError(f"finite-difference step at t={t:g} produced non-finite values")
            change = float(np.max(np.abs(new - u)))
            history.append(change)
            u = new
            if change <= cfg.inner_tol:
                break
        else:
            raise ConvergenceError(f"nonlinear step at t={t:g} did not reach {cfg.inner_tol:g}",
                                   history)
        U[k] = u
        A1, B1 = A0, B0

    V = np.stack([2.0 * _coefficients(model, t, x)[0] * _slope(U[k], dx, neumann)
                  for k, t in enumerate(times)])
    return (GridFunction(times, (x,), U, cfg.interpolation),
            GridFunction(times, (x,), V, cfg.interpolation))


@dataclass(frozen=True)
class ClosedForm:
    """A closed-form solution ``u(s, x)`` together with ``v = alpha d_x u``."""

    u: Callable
    v: Callable
    kind: str

    def __call__(self, s, x):
        return self.u(s, x)


def _column(x):
    x = np.asarray(x, dtype=float)
    return x[:, 0] if x.ndim == 2 else x


def closed_form_gaussian(kind, T=1.0, variance=1.0, rate=0.0, base=None):
    """Closed-form solutions for a driftless Brownian model with ``alpha = variance``.

    ``moment2``: ``g = x^2``, ``u = x^2 + variance (T - s)``.
    ``eigen_sin``: ``g = sin``, ``u = exp(-variance (T - s) / 2) sin x``.
    ``discounted``: ``f = -rate y``; ``u = exp(-rate (T - s)) base(s, x)`` where
    ``base`` is another closed form (``moment2`` when omitted).
    """
    if kind == "moment2":
        def u(s, x):
            x = _column(x)
            return x**2 + variance * (T - s)

        def v(s, x):
            return 2.0 * variance * _column(x)
    elif kind == "eigen_sin":
        def u(s, x):
            return np.exp(-0.5 * variance * (T - s)) * np.sin(_column(x))

        def v(s, x):
            return variance * np.exp(-0.5 * variance * (T - s)) * np.cos(_column(x))
    elif kind == "discounted":
        inner = base if base is not None else closed_form_gaussian("moment2", T, variance)
        if rate == 0.0:
            return ClosedForm(inner.u, inner.v, "discounted")

        def u(s, x):
            return np.exp(-rate * (T - s)) * inner.u(s, x)

        def v(s, x):
            return np.exp(-rate * (T - s)) * inner.v(s, x)
    else:
        raise ConfigurationError(f"unknown closed form {kind!r}")
    return ClosedForm(u, v, kind)
