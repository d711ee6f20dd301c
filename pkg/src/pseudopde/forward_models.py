"""Forward Markov processes and Monte-Carlo transition kernels.

Two model families are supported: diffusions with drift ``mu`` and
diffusion matrix ``alpha``, simulated by Euler-Maruyama, and
one-dimensional diffusions with a distributional drift, simulated through
their scale function ``h`` (``h(X)`` is driftless, so only its diffusion
coefficient is needed).

Callables follow a vectorised convention: states are arrays of shape
``(n, d)`` and ``t`` is a scalar.  ``mu(t, x)`` broadcasts to ``(n, d)``,
``alpha(t, x)`` to ``(n, d, d)``; one-dimensional coefficient functions of
the distributional model take and return flat arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.integrate import cumulative_simpson
from scipy.interpolate import PchipInterpolator

from . import rng
from .errors import ConfigurationError, DomainError, NonFiniteError, NonPsdDiffusionError

PSD_TOLERANCE = 1e-10
_CHUNK_PATHS = 1 << 15
_MAX_BRIDGE_LEVEL = 6


# ---------------------------------------------------------------------------
# time grid


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Strictly increasing time nodes ``t0 = times[0] < ... < times[-1] = T``."""

    times: np.ndarray

    def __post_init__(self):
        times = np.array(self.times, dtype=float).reshape(-1)
        if times.size < 2:
            raise ConfigurationError("a time grid needs at least two nodes")
        if not np.all(np.isfinite(times)):
            raise ConfigurationError("time grid contains non-finite entries")
        if np.any(np.diff(times) <= 0.0):
            raise ConfigurationError("time grid must be strictly increasing")
        if times[0] < 0.0:
            raise ConfigurationError("time grid must start at t0 >= 0")
        times.setflags(write=False)
        object.__setattr__(self, "times", times)

    @classmethod
    def uniform(cls, t0, T, n_steps):
        if int(n_steps) < 1:
            raise ConfigurationError(f"n_steps must be positive, got {n_steps}")
        if not T > t0:
            raise ConfigurationError(f"horizon T={T} must exceed t0={t0}")
        times = np.linspace(float(t0), float(T), int(n_steps) + 1)
        return cls(times)

    @property
    def t0(self):
        return float(self.times[0])

    @property
    def T(self):
        return float(self.times[-1])

    @property
    def n_steps(self):
        return self.times.size - 1

    @property
    def dt(self):
        return np.diff(self.times)

    @property
    def weights(self):
        """Clock increments dV on each step (the clock is V_t = t)."""
        return self.dt

    def index_of(self, t):
        """Index of grid time ``t``; raises if ``t`` is not a node."""
        tol = 1e-12 * max(1.0, abs(self.T))
        idx = int(np.searchsorted(self.times, t - tol))
        if idx < self.times.size and abs(self.times[idx] - t) <= tol:
            return idx
        raise ConfigurationError(f"t={t!r} is not a node of the time grid")

    def __eq__(self, other):
        return isinstance(other, TimeGrid) and np.array_equal(self.times, other.times)

    def __hash__(self):
        return hash(self.times.tobytes())


# ---------------------------------------------------------------------------
# models


@dataclass(frozen=True)
class DiffusionModel:
    """Diffusion with drift ``mu`` and diffusion matrix ``alpha = sigma sigma^T``.

    ``mu_bound`` and ``alpha_bound`` are the recorded sup-norm bounds; the
    latter bounds every entry of ``alpha`` and therefore the bracket density
    of the coordinate martingales.
    """

    dim: int
    mu: Callable
    alpha: Callable
    mu_bound: float = np.inf
    alpha_bound: float = np.inf
    constant: bool = False

    @classmethod
    def brownian(cls, dim=1, drift=0.0, variance=1.0):
        """Constant-coefficient model; ``variance`` may be a scalar or a matrix."""
        drift = np.broadcast_to(np.asarray(drift, dtype=float), (dim,)).copy()
        variance = np.asarray(variance, dtype=float)
        if variance.ndim == 0:
            variance = variance * np.eye(dim)
        if variance.shape != (dim, dim):
            raise ConfigurationError("variance must be a scalar or a dim x dim matrix")

        def mu(t, x):
            return drift

        def alpha(t, x):
            return variance

        return cls(
            dim=dim,
            mu=mu,
            alpha=alpha,
            mu_bound=float(np.max(np.abs(drift))) if dim else 0.0,
            alpha_bound=float(np.max(np.abs(variance))),
            constant=True,
        )

    def drift_at(self, t, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.asarray(self.mu(t, x), dtype=float), x.shape)

    def alpha_at(self, t, x):
        x = np.asarray(x, dtype=float)
        shape = (x.shape[0], self.dim, self.dim)
        return np.broadcast_to(np.asarray(self.alpha(t, x), dtype=float), shape)

    def check_bounds(self, t, x):
        """Assert the recorded bounds at sampled points ``(t, x)``."""
        mu = self.drift_at(t, x)
        alpha = self.alpha_at(t, x)
        if np.max(np.abs(mu)) > self.mu_bound * (1 + 1e-12):
            raise ConfigurationError("drift exceeds its recorded bound")
        if np.max(np.abs(alpha)) > self.alpha_bound * (1 + 1e-12):
            raise ConfigurationError("diffusion matrix exceeds its recorded bound")
        if not np.allclose(alpha, np.swapaxes(alpha, 1, 2)):
            raise ConfigurationError("diffusion matrix is not symmetric")
        sqrt_psd(alpha, t, x)


def sqrt_psd(alpha, t=None, x=None):
    """Symmetric square root of a stack of PSD matrices.

    Eigenvalues in ``[-1e-10, 0)`` are treated as rounding and clipped; more
    negative ones raise :class:`NonPsdDiffusionError` naming the point.
    """
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape[-1] == 1:
        values = alpha[..., 0, 0]
        bad = values < -PSD_TOLERANCE
        if np.any(bad):
            i = int(np.argmax(bad))
            raise NonPsdDiffusionError(t, _row(x, i), float(values.reshape(-1)[i]))
        return np.sqrt(np.maximum(values, 0.0))[..., None, None]
    eigval, eigvec = np.linalg.eigh(alpha)
    low = eigval.min(axis=-1)
    if np.any(low < -PSD_TOLERANCE):
        i = int(np.argmin(low))
        raise NonPsdDiffusionError(t, _row(x, i), float(low.reshape(-1)[i]))
    root = np.sqrt(np.maximum(eigval, 0.0))
    return np.einsum("...ij,...j,...kj->...ik", eigvec, root, eigvec)


def _row(x, i):
    if x is None:
        return []
    x = np.asarray(x, dtype=float)
    return x[i] if x.ndim > 1 else x.reshape(-1)


@dataclass(frozen=True, eq=False)
class MonotoneFunction:
    """Strictly increasing tabulated function with monotone cubic interpolation.

    Evaluation outside the tabulated interval raises :class:`DomainError`
    (both for the function and for its inverse).
    """

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if x.ndim != 1 or x.shape != y.shape or x.size < 2:
            raise ConfigurationError("need matching one-dimensional samples")
        if not (np.all(np.diff(x) > 0) and np.all(np.diff(y) > 0)):
            raise ConfigurationError("samples must be strictly increasing in x and h(x)")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "_forward", PchipInterpolator(x, y, extrapolate=False))
        object.__setattr__(self, "_inverse", PchipInterpolator(y, x, extrapolate=False))

    @property
    def domain(self):
        return float(self.x[0]), float(self.x[-1])

    @property
    def range(self):
        return float(self.y[0]), float(self.y[-1])

    def __call__(self, x):
        out = self._forward(np.asarray(x, dtype=float))
        if np.any(np.isnan(out)):
            raise DomainError(f"argument outside the tabulated interval {self.domain}")
        return out

    def derivative(self, x):
        out = self._forward.derivative()(np.asarray(x, dtype=float))
        if np.any(np.isnan(out)):
            raise DomainError(f"argument outside the tabulated interval {self.domain}")
        return out

    def inverse(self, y):
        out = self._inverse(np.asarray(y, dtype=float))
        if np.any(np.isnan(out)):
            raise DomainError(f"value outside the tabulated range {self.range}")
        return out


def solve_scale_function(Sigma, domain, resolution=4001):
    """Tabulate ``h(x) = int_0^x exp(-(Sigma(y) - Sigma(0))) dy``.

    Returns
    -------
    h : MonotoneFunction
    shift : float
        ``Sigma(0)``, subtracted so that ``h'(0) = 1``.
    """
    lo, hi = float(domain[0]), float(domain[1])
    if not lo < 0.0 < hi:
        raise ConfigurationError(f"domain {domain} must contain 0 in its interior")
    if resolution < 5:
        raise ConfigurationError("resolution must be at least 5")
    n_left = max(2, int(round((resolution - 1) * (-lo) / (hi - lo))))
    n_right = max(2, resolution - 1 - n_left)
    n_left += n_left % 2  # even interval counts suit Simpson's rule
    n_right += n_right % 2
    left = np.linspace(0.0, lo, n_left + 1)
    right = np.linspace(0.0, hi, n_right + 1)

    shift = float(np.asarray(Sigma(np.array([0.0])), dtype=float).reshape(-1)[0])
    parts = []
    for nodes, sign in ((left, -1.0), (right, 1.0)):
        values = np.asarray(Sigma(nodes), dtype=float)
        if not np.all(np.isfinite(values)):
            raise NonFiniteError("Sigma returned non-finite values on the domain")
        integrand = np.exp(-(values - shift))
        parts.append(sign * cumulative_simpson(integrand, x=sign * nodes, initial=0.0))
    x = np.concatenate([left[:0:-1], right])
    h = np.concatenate([parts[0][:0:-1], parts[1]])
    # where h saturates in double precision the table stops being invertible;
    # keep the strictly increasing window around 0
    zero = n_left
    flat = np.flatnonzero(np.diff(h) <= 0.0)
    first = int(flat[flat < zero].max()) + 1 if np.any(flat < zero) else 0
    last = int(flat[flat >= zero].min()) if np.any(flat >= zero) else h.size - 1
    return MonotoneFunction(x[first : last + 1], h[first : last + 1]), shift


@dataclass(frozen=True)
class DistributionalDriftModel:
    """One-dimensional diffusion ``dX = b'(X)dt + sigma(X)dW`` with ``b'`` a distribution.

    The drift enters only through ``Sigma`` (the limit of ``2 int b'/sigma^2``)
    and the scale function ``h`` with ``h' = exp(-Sigma)``.
    """

    sigma: Callable
    Sigma: Callable
    h: MonotoneFunction
    sigma_shift: float
    c1: float
    C1: float
    resolution: int = 4001
    dim: int = 1

    @classmethod
    def from_sigma(cls, sigma, Sigma, domain, resolution=4001):
        h, shift = solve_scale_function(Sigma, domain, resolution)
        model = cls(sigma=sigma, Sigma=Sigma, h=h, sigma_shift=shift, c1=0.0, C1=0.0,
                    resolution=resolution)
        product = model.sigma_h_prime(h.x)
        if np.any(product <= 0.0) or not np.all(np.isfinite(product)):
            raise ConfigurationError("sigma * h' must be positive and finite on the domain")
        return cls(sigma=sigma, Sigma=Sigma, h=h, sigma_shift=shift,
                   c1=float(product.min()), C1=float(product.max()), resolution=resolution)

    @property
    def domain(self):
        return self.h.domain

    def h_prime(self, x):
        x = np.asarray(x, dtype=float)
        return np.exp(-(np.asarray(self.Sigma(x), dtype=float) - self.sigma_shift))

    def sigma_h_prime(self, x):
        x = np.asarray(x, dtype=float)
        return np.asarray(self.sigma(x), dtype=float) * self.h_prime(x)

    def sigma_tilde(self, y):
        """Diffusion coefficient of ``h(X)`` as a function of ``y = h(x)``."""
        return self.sigma_h_prime(self.h.inverse(y))

    def extended(self, factor=2.0):
        """Same model tabulated on a domain ``factor`` times wider about its centre."""
        lo, hi = self.domain
        centre, half = 0.5 * (lo + hi), 0.5 * (hi - lo) * factor
        lo, hi = min(centre - half, -1e-3), max(centre + half, 1e-3)
        resolution = int(self.resolution * factor) | 1
        return DistributionalDriftModel.from_sigma(self.sigma, self.Sigma, (lo, hi), resolution)


# ---------------------------------------------------------------------------
# ensembles


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """Simulated trajectories on a shared grid, started at ``x`` at time ``s``.

    ``paths`` has shape ``(n_paths, n_steps + 1, d)`` and is constant equal to
    ``x`` on every grid time up to ``s``.  ``brownian_increments`` holds the
    driving increments (zero before ``s``); ``scale_paths`` holds ``h(X)`` for
    distributional-drift ensembles.
    """

    grid: TimeGrid
    s: float
    x: np.ndarray
    paths: np.ndarray
    brownian_increments: np.ndarray
    seed: int
    scale_paths: Optional[np.ndarray] = None
    model: object = field(default=None, repr=False)

    def __post_init__(self):
        for name in ("paths", "brownian_increments", "scale_paths"):
            arr = getattr(self, name)
            if arr is not None:
                if not np.all(np.isfinite(arr)):
                    raise NonFiniteError(f"{name} contains non-finite entries")
                arr.setflags(write=False)

    @property
    def n_paths(self):
        return self.paths.shape[0]

    @property
    def dim(self):
        return self.paths.shape[2]

    @property
    def start_index(self):
        return self.grid.index_of(self.s)


def _check_start(grid, s, x, n_paths, dim):
    if int(n_paths) < 1:
        raise ConfigurationError("n_paths must be at least 1")
    start = grid.index_of(s)
    if start == grid.n_steps:
        raise ConfigurationError("start time s must precede the horizon")
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size != dim:
        raise ConfigurationError(f"start state has dimension {x.size}, model has {dim}")
    return start, x


def _increments(seed, paths_idx, grid, start, dim):
    """Brownian increments for the given global path indices (zero before start)."""
    z = rng.standard_normals(seed, paths_idx, grid.n_steps * dim)
    z = z.reshape(len(paths_idx), grid.n_steps, dim)
    dw = z * np.sqrt(grid.dt)[None, :, None]
    dw[:, :start, :] = 0.0
    return dw


def simulate_diffusion(model, s, x, grid, n_paths, seed):
    """Euler-Maruyama paths of a :class:`DiffusionModel` started at ``(s, x)``."""
    start, x = _check_start(grid, s, x, n_paths, model.dim)
    n, d, N = int(n_paths), model.dim, grid.n_steps
    paths = np.empty((n, N + 1, d))
    dws = np.empty((n, N, d))
    dt = grid.dt
    for lo in range(0, n, _CHUNK_PATHS):
        idx = np.arange(lo, min(n, lo + _CHUNK_PATHS))
        dw = _increments(seed, idx, grid, start, d)
        X = np.broadcast_to(x, (idx.size, d)).copy()
        paths[idx, : start + 1] = x
        for k in range(start, N):
            t = float(grid.times[k])
            sig = sqrt_psd(model.alpha_at(t, X), t, X)
            drift = model.drift_at(t, X)
            if d == 1:
                X = X + drift * dt[k] + sig[:, 0, :] * dw[:, k, :]
            else:
                X = X + drift * dt[k] + np.einsum("nij,nj->ni", sig, dw[:, k, :])
            paths[idx, k + 1] = X
        dws[idx] = dw
    return PathEnsemble(grid=grid, s=float(grid.times[start]), x=x, paths=paths,
                        brownian_increments=dws, seed=int(seed), model=model)


def _bridge_step(model, y, dw, dt, seed, path, step, lo, hi):
    """Re-run one step of the scale-space scheme on finer sub-steps.

    The sub-increments are a Brownian bridge pinned to the original increment,
    so the refined path shares the coarse Brownian path.  Returns ``None`` if
    even the finest level leaves ``(lo, hi)``.
    """
    for level in range(1, _MAX_BRIDGE_LEVEL + 1):
        m = 2**level
        z = rng.standard_normals(seed, [path], m, stream=rng.BRIDGE_STREAM + level,
                                 offset=2 * 64 * step)[0]
        walk = np.cumsum(z) * np.sqrt(dt / m)
        walk -= np.arange(1, m + 1) / m * (walk[-1] - dw)
        sub = np.diff(np.concatenate([[0.0], walk]))
        value = y
        for inc in sub:
            value = value + float(model.sigma_tilde(np.array([value]))[0]) * inc
            if not lo < value < hi:
                break
        else:
            return value
    return None


def _simulate_scale_space(model, start, y0, grid, n, seed):
    lo, hi = model.h.range
    N = grid.n_steps
    ys = np.empty((n, N + 1))
    dws = np.empty((n, N, 1))
    for c0 in range(0, n, _CHUNK_PATHS):
        idx = np.arange(c0, min(n, c0 + _CHUNK_PATHS))
        dw = _increments(seed, idx, grid, start, 1)
        Y = np.full(idx.size, y0)
        ys[idx, : start + 1] = y0
        for k in range(start, N):
            Y_new = Y + model.sigma_tilde(Y) * dw[:, k, 0]
            bad = np.flatnonzero(~((Y_new > lo) & (Y_new < hi)))
            for j in bad:
                value = _bridge_step(model, Y[j], dw[j, k, 0], grid.dt[k], seed,
                                     int(idx[j]), k, lo, hi)
                if value is None:
                    return None
                Y_new[j] = value
            Y = Y_new
            ys[idx, k + 1] = Y
        dws[idx] = dw
    return ys, dws


def simulate_distributional_drift(model, s, x, grid, n_paths, seed):
    """Simulate ``Y = h(X)`` by Euler-Maruyama and map back through ``h^{-1}``.

    A step that would leave the tabulated range of ``h`` is first re-run on a
    Brownian bridge with up to 64 sub-steps.  If that still fails, the model is
    re-tabulated on a domain twice as wide and the whole ensemble is simulated
    again with the same seed; a second failure raises :class:`DomainError`.
    """
    start, x = _check_start(grid, s, x, n_paths, 1)
    n = int(n_paths)
    for attempt in range(2):
        y0 = float(model.h(x)[0])
        result = _simulate_scale_space(model, start, y0, grid, n, seed)
        if result is not None:
            ys, dws = result
            paths = model.h.inverse(ys)[:, :, None]
            paths[:, : start + 1, 0] = x[0]
            return PathEnsemble(grid=grid, s=float(grid.times[start]), x=x, paths=paths,
                                brownian_increments=dws, seed=int(seed), scale_paths=ys,
                                model=model)
        if attempt == 0:
            model = model.extended(2.0)
    raise DomainError("paths left the tabulated scale-function range after extending the domain")


def simulate(model, s, x, grid, n_paths, seed):
    """Dispatch on the model family."""
    if isinstance(model, DistributionalDriftModel):
        return simulate_distributional_drift(model, s, x, grid, n_paths, seed)
    return simulate_diffusion(model, s, x, grid, n_paths, seed)


def estimate_kernel(ensemble, phi, t):
    """Monte-Carlo estimate of ``E[phi(X_t)]`` and its standard error.

    ``t`` must be a grid time of the ensemble.  ``phi`` receives states of
    shape ``(n_paths, d)``.
    """
    k = ensemble.grid.index_of(t)
    values = np.asarray(phi(ensemble.paths[:, k, :]), dtype=float).reshape(-1)
    values = np.broadcast_to(values, (ensemble.n_paths,))
    return sample_mean(values)


def sample_mean(values):
    """Mean and standard error; a constant sample returns its value exactly."""
    values = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(values)):
        raise NonFiniteError("non-finite sample values")
    if values.size and values.min() == values.max():
        return float(values[0]), 0.0
    n = values.size
    se = float(values.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return float(values.mean()), se
