"""Picard iteration for Markovian BSDEs with regression conditional expectations.

For a forward ensemble ``X`` and martingale increments ``dM[psi]`` the
solver iterates, starting from ``(Y, M) = (0, 0)``::

    Y^k_t   = E[ g(X_T) + sum_{r >= t} f(r, X_r, Y^{k-1}_r, Z^{k-1}_r) dt | X_t ]
    dM^k_t  = Y^k_{t+dt} - Y^k_t + f(t, X_t, Y^{k-1}_t, Z^{k-1}_t) dt
    Z^k_t   = E[ dM^k_t dM[psi]_t | X_t ] / dt

Conditional expectations are ridge least-squares projections on
polynomial features standardised per time slice.  Successive iterates are
compared in the exponentially weighted norm
``E sum e^{lam t} (dY)^2 dt + E sum e^{lam t} (d dM)^2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from itertools import combinations_with_replacement
from typing import Callable, Optional

import numpy as np

from .errors import ConfigurationError, NonFiniteError, RankDeficientError
from .forward_models import DistributionalDriftModel, sample_mean, simulate
from .operators import PsiSystem

MAX_CONDITION = 1e12


@dataclass(frozen=True)
class DriverSpec:
    """Driver ``f(t, x, y, z)``, vectorised over paths, with Lipschitz constants."""

    f: Callable
    K_Y: float = 0.0
    K_Z: float = 0.0
    growth_constant: float = 0.0
    name: str = "f"

    def __call__(self, t, x, y, z):
        out = np.asarray(self.f(t, x, y, z), dtype=float)
        return np.broadcast_to(out, np.shape(y))

    def check_lipschitz(self, t, x, y1, y2, z1, z2):
        lhs = np.abs(self(t, x, y1, z1) - self(t, x, y2, z2))
        rhs = self.K_Y * np.abs(y1 - y2) + self.K_Z * np.linalg.norm(z1 - z2, axis=-1) + 1e-9
        return bool(np.all(lhs <= rhs))

    @classmethod
    def zero(cls):
        return cls(lambda t, x, y, z: np.zeros_like(y), name="0")


@dataclass(frozen=True)
class TerminalSpec:
    """Terminal condition ``g(x)`` for states of shape ``(n, d)``."""

    g: Callable
    growth_constant: float = 0.0
    name: str = "g"

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.asarray(self.g(x), dtype=float), (x.shape[0],))

    def check_growth(self, x, zeta):
        return bool(np.all(np.abs(self(x)) <= self.growth_constant * (1.0 + zeta(x))))


@dataclass(frozen=True)
class RegressionBasis:
    """Tensor polynomials of total degree ``degree`` in standardised features.

    ``ridge`` is relative: the penalty is ``ridge`` times the mean diagonal of
    the Gram matrix.
    """

    degree: int = 4
    ridge: float = 1e-8

    def __post_init__(self):
        if self.degree < 0 or self.ridge < 0:
            raise ConfigurationError("degree and ridge must be non-negative")

    def n_features(self, dim):
        m = 1
        for k in range(1, self.degree + 1):
            m = m * (dim + k) // k
        return m

    def design(self, states):
        """Feature matrix for one slice; constant columns are dropped."""
        states = np.asarray(states, dtype=float)
        if states.ndim == 1:
            states = states[:, None]
        mean = states.mean(axis=0)
        std = states.std(axis=0)
        keep = std > 1e-12 * (1.0 + np.abs(mean))
        z = (states[:, keep] - mean[keep]) / std[keep]
        cols = [np.ones(states.shape[0])]
        for k in range(1, self.degree + 1):
            for combo in combinations_with_replacement(range(z.shape[1]), k):
                cols.append(np.prod(z[:, combo], axis=1))
        A = np.stack(cols, axis=1)
        if not np.all(np.isfinite(A)):
            raise NonFiniteError("regression features contain non-finite entries")
        return A


class SliceProjector:
    """Ridge least-squares projection onto the features of one time slice."""

    def __init__(self, states, basis, t_index=None):
        A = basis.design(states)
        n, m = A.shape
        if m > max(1, n // 10):
            raise ConfigurationError(f"{m} features need at least {10 * m} paths, got {n}")
        gram = A.T @ A
        # ridge relative to the mean diagonal, so it is invariant to feature scale
        penalty = np.full(m, basis.ridge * np.trace(gram) / m)
        penalty[0] = 0.0  # the intercept is not shrunk
        gram[np.diag_indices(m)] += penalty
        eig = np.linalg.eigvalsh(gram)
        cond = np.inf if eig[0] <= 0 else eig[-1] / eig[0]
        if not cond < MAX_CONDITION:
            raise RankDeficientError(cond, t_index)
        self.A = A
        self.condition_number = float(cond)
        self._factor = np.linalg.cholesky(gram)

    def coefficients(self, payoff):
        rhs = self.A.T @ payoff
        tmp = np.linalg.solve(self._factor, rhs)
        return np.linalg.solve(self._factor.T, tmp)

    def __call__(self, payoff):
        payoff = np.asarray(payoff, dtype=float)
        if not np.all(np.isfinite(payoff)):
            raise NonFiniteError("regression payoff contains non-finite values")
        if payoff.min() == payoff.max():
            return np.full(payoff.shape, payoff[0])
        fitted = self.A @ self.coefficients(payoff)
        if not np.all(np.isfinite(fitted)):
            raise NonFiniteError("regression produced non-finite values")
        return fitted


def conditional_expectation(ensemble, payoff, t_index, basis=RegressionBasis(), states=None):
    """Least-squares estimate of ``E[payoff | X_t]`` at every path.

    ``states`` optionally replaces ``ensemble.paths`` as the regression
    variables (shape ``(n, N+1, k)``).
    """
    states = ensemble.paths if states is None else states
    return SliceProjector(states[:, t_index], basis, t_index)(payoff)


def estimate_Z(ensemble, M_increments, psi_increments, basis=RegressionBasis(), states=None,
               projectors=None):
    """Bracket density ``E[dM dM[psi_i] | X_t] / dt`` per slice, shape ``(n, N, d)``."""
    states = ensemble.paths if states is None else states
    grid = ensemble.grid
    n, N, d = psi_increments.shape
    Z = np.zeros((n, N, d))
    for k in range(ensemble.start_index, N):
        proj = projectors[k] if projectors is not None else SliceProjector(states[:, k], basis, k)
        for i in range(d):
            Z[:, k, i] = proj(M_increments[:, k] * psi_increments[:, k, i]) / grid.dt[k]
    return Z


def contraction_lambda(K_Y, K_Z, bracket_bound, dim):
    """Weight exponent making the Picard map a 1/2-contraction."""
    return 1.0 + 2.0 * (K_Y**2 + bracket_bound * (dim * K_Z) ** 2)


@dataclass(frozen=True)
class PicardConfig:
    """Stopping rule and regression settings for :func:`picard_solve`.

    The iteration stops once the weighted distance between successive
    iterates is at most ``tol`` times the first distance (plus ``tol_abs``).
    ``scheme`` is ``"left"`` (driver at the left end of each step) or
    ``"trapezoid"``.
    """

    max_iter: int = 25
    tol: float = 1e-4
    tol_abs: float = 0.0
    lam: Optional[float] = None
    basis: RegressionBasis = field(default_factory=RegressionBasis)
    scheme: str = "left"

    def __post_init__(self):
        if self.max_iter < 1:
            raise ConfigurationError("max_iter must be at least 1")
        if not (self.tol > 0 or self.tol_abs > 0) or self.tol < 0 or self.tol_abs < 0:
            raise ConfigurationError("tolerances must be non-negative, one of them positive")
        if self.scheme not in ("left", "trapezoid"):
            raise ConfigurationError(f"unknown scheme {self.scheme!r}")


@dataclass(frozen=True, eq=False)
class BsdeSolution:
    """Final Picard iterate and iteration history.

    ``sq_diff_Y[k, j]`` and ``sq_diff_M[k, j]`` are path means of the squared
    differences between iterates ``k+1`` and ``k`` (iterate 0 is zero) on
    slice ``j``; any exponential weight can be applied to them afterwards.
    """

    grid: object
    start_index: int
    Y: np.ndarray
    Z: np.ndarray
    M_increments: np.ndarray
    cumulative: np.ndarray
    distances: np.ndarray
    driver_norms: np.ndarray
    sq_diff_Y: np.ndarray
    sq_diff_M: np.ndarray
    lam: float
    bracket_bound: float
    dim: int
    converged: bool
    iterations: int

    @property
    def u(self):
        """Estimate of ``Y`` at the start slice (a constant under ``P^{s,x}``)."""
        return sample_mean(self.cumulative)[0]

    @property
    def u_se(self):
        return sample_mean(self.cumulative)[1]

    @property
    def v(self):
        """Bracket density at the start slice, shape ``(d,)``."""
        return self.Z[:, self.start_index].mean(axis=0)

    @property
    def v_se(self):
        return self._v_se

    @property
    def ratios(self):
        return _ratios(self.distances)

    def slice_summary(self):
        """Rows ``(t, mean Y, SE, mean |Z|)`` for every slice from the start on."""
        rows = []
        times = self.grid.times
        for j in range(self.start_index, self.grid.n_steps + 1):
            m, se = sample_mean(self.Y[:, j])
            zn = float(np.linalg.norm(self.Z[:, j], axis=1).mean()) if j < self.grid.n_steps else float("nan")
            rows.append((float(times[j]), m, se, zn))
        return rows

    def diagnostics(self):
        return {
            "iterations": int(self.iterations),
            "distances": [float(v) for v in self.distances],
            "ratios": [float(v) for v in self.ratios],
            "converged": bool(self.converged),
            "lambda": float(self.lam),
            "driver_norms": [float(v) for v in self.driver_norms],
        }


def _ratios(sq_distances):
    d = np.asarray(sq_distances, dtype=float)
    out = []
    for prev, cur in zip(d[:-1], d[1:]):
        out.append(0.0 if cur == 0.0 else (cur / prev if prev > 0 else np.inf))
    return np.array(out)


def _weighted_sq_norms(sq_Y, sq_M, times, dt, lam):
    weight = np.exp(lam * times[:-1])
    return sq_Y @ (weight * dt) + sq_M @ weight


def picard_solve(ensemble, psi_increments, driver, terminal, cfg=PicardConfig(),
                 states=None, bracket_bound=1.0):
    """Run Picard iterations on a fixed ensemble.

    Parameters
    ----------
    ensemble : PathEnsemble
    psi_increments : ndarray, shape (n_paths, n_steps, d)
        Martingale increments of ``M[psi]`` (zero before the start time).
    driver : DriverSpec
    terminal : TerminalSpec
    cfg : PicardConfig
    states : ndarray, optional
        Regression variables per slice, default the paths themselves.
    bracket_bound : float
        Bound on the bracket density of ``M[psi]``, used for the default
        weight exponent.

    Returns
    -------
    BsdeSolution
    """
    grid, X = ensemble.grid, ensemble.paths
    states = X if states is None else states
    n, N = ensemble.n_paths, grid.n_steps
    d = psi_increments.shape[2]
    if psi_increments.shape[:2] != (n, N):
        raise ConfigurationError("psi increments are not aligned with the ensemble grid")
    start = ensemble.start_index
    dt, times = grid.dt, grid.times
    lam = cfg.lam if cfg.lam is not None else contraction_lambda(driver.K_Y, driver.K_Z, bracket_bound, d)
    projectors = [SliceProjector(states[:, k], cfg.basis, k) for k in range(N)]

    terminal_values = np.array(terminal(X[:, N]), dtype=float)
    if not np.all(np.isfinite(terminal_values)):
        raise NonFiniteError("terminal condition is not finite on the ensemble")
    Y_prev = np.zeros((n, N + 1))
    Z_prev = np.zeros((n, N, d))
    dM_prev = np.zeros((n, N))
    distances, driver_norms, sq_Y_hist, sq_M_hist = [], [], [], []
    converged = False
    cumulative = terminal_values
    for it in range(1, cfg.max_iter + 1):
        F = np.empty((n, N))
        for k in range(N):
            F[:, k] = driver(float(times[k]), X[:, k], Y_prev[:, k], Z_prev[:, k])
        if not np.all(np.isfinite(F)):
            raise NonFiniteError(f"driver produced non-finite values at iteration {it}")
        if cfg.scheme == "trapezoid":
            F_T = driver(float(times[N]), X[:, N], terminal_values, Z_prev[:, N - 1])
            step_integral = 0.5 * (F + np.concatenate([F[:, 1:], F_T[:, None]], axis=1)) * dt
        else:
            step_integral = F * dt
        Y = np.empty((n, N + 1))
        Y[:, N] = terminal_values
        S = terminal_values.copy()
        for k in range(N - 1, -1, -1):
            S = S + step_integral[:, k]
            Y[:, k] = projectors[k](S)
            if k == start:
                cumulative = S.copy()
        dM = Y[:, 1:] - Y[:, :-1] + step_integral
        dM[:, :start] = 0.0
        Z = estimate_Z(ensemble, dM, psi_increments, cfg.basis, states, projectors)

        sq_Y = np.mean((Y[:, :-1] - Y_prev[:, :-1]) ** 2, axis=0)
        sq_M = np.mean((dM - dM_prev) ** 2, axis=0)
        sq_Y[:start] = 0.0
        sq_M[:start] = 0.0
        sq_Y_hist.append(sq_Y)
        sq_M_hist.append(sq_M)
        distances.append(float(_weighted_sq_norms(sq_Y, sq_M, times, dt, lam)))
        driver_norms.append(float(np.sqrt(np.mean(F[:, start:] ** 2))))
        Y_prev, Z_prev, dM_prev = Y, Z, dM
        if np.sqrt(distances[-1]) <= cfg.tol * np.sqrt(distances[0]) + cfg.tol_abs:
            converged = True
            break

    sol = BsdeSolution(
        grid=grid, start_index=start, Y=Y_prev, Z=Z_prev, M_increments=dM_prev,
        cumulative=cumulative, distances=np.array(distances),
        driver_norms=np.array(driver_norms), sq_diff_Y=np.array(sq_Y_hist),
        sq_diff_M=np.array(sq_M_hist), lam=float(lam), bracket_bound=float(bracket_bound),
        dim=d, converged=converged, iterations=len(distances),
    )
    # standard error of the start-slice bracket density
    if start < N:
        prod = dM_prev[:, start, None] * psi_increments[:, start, :] / dt[start]
        se = np.array([sample_mean(prod[:, i])[1] for i in range(d)])
    else:
        se = np.zeros(d)
    object.__setattr__(sol, "_v_se", se)
    return sol


def contraction_diagnostics(solution, K_Y, K_Z, dV_weights=None, bracket_bound=None, lam=None):
    """Successive ratios of squared weighted distances between Picard iterates.

    ``ratios[j]`` compares iterate pair ``j+2`` with pair ``j+1``, i.e. it is
    the contraction observed at iteration ``j + 2``.
    """
    if solution.iterations < 3:
        raise ConfigurationError("contraction diagnostics need at least three Picard iterates")
    bound = solution.bracket_bound if bracket_bound is None else bracket_bound
    lam = contraction_lambda(K_Y, K_Z, bound, solution.dim) if lam is None else lam
    dt = solution.grid.dt if dV_weights is None else np.asarray(dV_weights, dtype=float)
    d = _weighted_sq_norms(solution.sq_diff_Y, solution.sq_diff_M, solution.grid.times, dt, lam)
    return _ratios(d)


def solve_markovian(model, psi, driver, terminal, s, x, grid, n_paths, seed, cfg=PicardConfig()):
    """Simulate from ``(s, x)`` and solve the BSDE with ``g(X_T)`` and ``f(t, X_t, y, z)``.

    For the distributional-drift model the regression variable is ``h(X)``,
    in which the solution ``h``-martingales are polynomial.
    """
    psi = PsiSystem.default(model) if psi is None else psi
    ensemble = simulate(model, s, x, grid, n_paths, seed)
    increments = psi.increments(ensemble, model)
    states = None
    if isinstance(model, DistributionalDriftModel):
        states = ensemble.scale_paths[:, :, None]
    sol = picard_solve(ensemble, increments, driver, terminal, cfg, states=states,
                       bracket_bound=psi.bracket_bound)
    object.__setattr__(sol, "ensemble", ensemble)
    return sol
