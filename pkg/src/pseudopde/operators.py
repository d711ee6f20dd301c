"""Generator, carré du champ and ψ-gradient of diffusion models.

Test functions are vectorised: ``phi(t, x)`` takes a scalar (or per-point)
time and states of shape ``(n, d)`` and returns shape ``(n,)``.  Missing
derivatives fall back to central finite differences.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from itertools import product
from typing import Callable, List, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, ExtrapolationError, NonFiniteError
from .forward_models import DiffusionModel, DistributionalDriftModel, sample_mean

FD_STEP = 1e-5
FD_STEP_SECOND = 1e-4


def _as_states(x):
    x = np.asarray(x, dtype=float)
    return x[:, None] if x.ndim == 1 else x


def _finite(values, what):
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"non-finite values of {what} in finite-difference stencil")
    return values


@dataclass(frozen=True)
class TestFunction:
    """A function ``phi(t, x)`` with optional analytic derivatives.

    ``dt`` returns shape ``(n,)``, ``grad`` ``(n, d)`` and ``hess`` ``(n, d, d)``.
    ``growth`` is either ``"bounded"`` or ``("polynomial", p)``.
    """

    __test__ = False  # not a pytest class

    fn: Callable
    dt: Optional[Callable] = None
    grad: Optional[Callable] = None
    hess: Optional[Callable] = None
    growth: object = ("polynomial", 2)
    name: str = "phi"

    def __call__(self, t, x):
        x = _as_states(x)
        return np.broadcast_to(np.asarray(self.fn(t, x), dtype=float), (x.shape[0],))

    # -- derivatives -------------------------------------------------------

    def time_derivative(self, t, x):
        x = _as_states(x)
        if self.dt is not None:
            return np.broadcast_to(np.asarray(self.dt(t, x), dtype=float), (x.shape[0],))
        t = np.asarray(t, dtype=float)
        h = FD_STEP * (1.0 + np.abs(t))
        up = _finite(self(t + h, x), self.name)
        down = _finite(self(t - h, x), self.name)
        return (up - down) / (2.0 * h)

    def gradient(self, t, x):
        x = _as_states(x)
        if self.grad is not None:
            return np.broadcast_to(np.asarray(self.grad(t, x), dtype=float), x.shape)
        return self._fd_gradient(self, t, x, FD_STEP)

    def hessian(self, t, x):
        x = _as_states(x)
        n, d = x.shape
        if self.hess is not None:
            return np.broadcast_to(np.asarray(self.hess(t, x), dtype=float), (n, d, d))
        if self.grad is not None:
            # differentiate the analytic gradient once
            out = np.empty((n, d, d))
            for j in range(d):
                h = FD_STEP * (1.0 + np.abs(x[:, j]))
                xp, xm = x.copy(), x.copy()
                xp[:, j] += h
                xm[:, j] -= h
                out[:, :, j] = (_finite(self.gradient(t, xp), self.name)
                                - _finite(self.gradient(t, xm), self.name)) / (2.0 * h)[:, None]
            return 0.5 * (out + np.swapaxes(out, 1, 2))
        out = np.empty((n, d, d))
        centre = _finite(self(t, x), self.name)
        steps = FD_STEP_SECOND * (1.0 + np.abs(x))
        for i in range(d):
            xp, xm = x.copy(), x.copy()
            xp[:, i] += steps[:, i]
            xm[:, i] -= steps[:, i]
            out[:, i, i] = (_finite(self(t, xp), self.name) - 2.0 * centre
                            + _finite(self(t, xm), self.name)) / steps[:, i] ** 2
            for j in range(i + 1, d):
                vals = []
                for si, sj in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                    xx = x.copy()
                    xx[:, i] += si * steps[:, i]
                    xx[:, j] += sj * steps[:, j]
                    vals.append(_finite(self(t, xx), self.name))
                mixed = (vals[0] - vals[1] - vals[2] + vals[3]) / (4.0 * steps[:, i] * steps[:, j])
                out[:, i, j] = out[:, j, i] = mixed
        return out

    @staticmethod
    def _fd_gradient(fun, t, x, step):
        n, d = x.shape
        out = np.empty((n, d))
        for i in range(d):
            h = step * (1.0 + np.abs(x[:, i]))
            xp, xm = x.copy(), x.copy()
            xp[:, i] += h
            xm[:, i] -= h
            out[:, i] = (_finite(fun(t, xp), fun.name) - _finite(fun(t, xm), fun.name)) / (2.0 * h)
        return out

    def without_derivatives(self):
        """Same values, derivatives forced through finite differences."""
        return TestFunction(self.fn, growth=self.growth, name=self.name)

    # -- algebra -----------------------------------------------------------

    def __mul__(self, other):
        if not isinstance(other, TestFunction):
            other = constant(other)
        a, b = self, other
        analytic = all(f.dt is not None and f.grad is not None and f.hess is not None for f in (a, b))

        def fn(t, x):
            return a(t, x) * b(t, x)

        if not analytic:
            return TestFunction(fn, growth=_growth_product(a.growth, b.growth),
                                name=f"({a.name})*({b.name})")

        def dt(t, x):
            return a.time_derivative(t, x) * b(t, x) + a(t, x) * b.time_derivative(t, x)

        def grad(t, x):
            return a.gradient(t, x) * b(t, x)[:, None] + a(t, x)[:, None] * b.gradient(t, x)

        def hess(t, x):
            ga, gb = a.gradient(t, x), b.gradient(t, x)
            cross = ga[:, :, None] * gb[:, None, :]
            return (a.hessian(t, x) * b(t, x)[:, None, None] + a(t, x)[:, None, None] * b.hessian(t, x)
                    + cross + np.swapaxes(cross, 1, 2))

        return TestFunction(fn, dt, grad, hess, _growth_product(a.growth, b.growth),
                            f"({a.name})*({b.name})")

    __rmul__ = __mul__

    def __add__(self, other):
        if not isinstance(other, TestFunction):
            other = constant(other)
        return linear_combination([(1.0, self), (1.0, other)])

    __radd__ = __add__


def _growth_product(g1, g2):
    p1 = 0 if g1 == "bounded" else g1[1]
    p2 = 0 if g2 == "bounded" else g2[1]
    return "bounded" if p1 + p2 == 0 else ("polynomial", p1 + p2)


def linear_combination(terms):
    """``sum c_k phi_k`` with analytic derivatives whenever every term has them."""
    terms = [(float(c), f) for c, f in terms]
    fns = [f for _, f in terms]

    def fn(t, x):
        return sum(c * f(t, x) for c, f in terms)

    def lift(method):
        return lambda t, x: sum(c * getattr(f, method)(t, x) for c, f in terms)

    have = {k: all(getattr(f, k) is not None for f in fns) for k in ("dt", "grad", "hess")}
    degrees = [0 if f.growth == "bounded" else f.growth[1] for f in fns]
    growth = "bounded" if max(degrees) == 0 else ("polynomial", max(degrees))
    return TestFunction(
        fn,
        lift("time_derivative") if have["dt"] else None,
        lift("gradient") if have["grad"] else None,
        lift("hessian") if have["hess"] else None,
        growth,
        " + ".join(f"{c:g}*{f.name}" for c, f in terms),
    )


def constant(c):
    c = float(c)
    return TestFunction(
        lambda t, x: np.full(_as_states(x).shape[0], c),
        lambda t, x: np.zeros(_as_states(x).shape[0]),
        lambda t, x: np.zeros(_as_states(x).shape),
        lambda t, x: np.zeros(_as_states(x).shape + (_as_states(x).shape[1],)),
        "bounded",
        f"{c:g}",
    )


def coordinate(i, dim):
    """The coordinate function ``x -> x_i``."""
    e = np.zeros(dim)
    e[i] = 1.0
    return TestFunction(
        lambda t, x: _as_states(x)[:, i].copy(),
        lambda t, x: np.zeros(_as_states(x).shape[0]),
        lambda t, x: np.broadcast_to(e, _as_states(x).shape),
        lambda t, x: np.zeros((_as_states(x).shape[0], dim, dim)),
        ("polynomial", 1),
        f"x{i + 1}",
    )


def time_function():
    """The function ``(t, x) -> t``."""
    return TestFunction(
        lambda t, x: np.broadcast_to(np.asarray(t, dtype=float), (_as_states(x).shape[0],)).copy(),
        lambda t, x: np.ones(_as_states(x).shape[0]),
        lambda t, x: np.zeros(_as_states(x).shape),
        lambda t, x: np.zeros(_as_states(x).shape + (_as_states(x).shape[1],)),
        ("polynomial", 0),
        "t",
    )


# ---------------------------------------------------------------------------
# operators


def apply_a(model, phi):
    """Generator ``a(phi) = d_t phi + 1/2 sum alpha_ij d_ij phi + sum mu_i d_i phi``."""

    def a_phi(t, x):
        x = _as_states(x)
        alpha = model.alpha_at(t, x)
        mu = model.drift_at(t, x)
        out = (phi.time_derivative(t, x)
               + 0.5 * np.einsum("nij,nij->n", alpha, phi.hessian(t, x))
               + np.einsum("ni,ni->n", mu, phi.gradient(t, x)))
        return _finite(out, f"a({phi.name})")

    return a_phi


def carre_du_champ(model, phi1, phi2):
    """``Gamma(phi1, phi2) = a(phi1 phi2) - phi1 a(phi2) - phi2 a(phi1)``."""
    a_prod = apply_a(model, phi1 * phi2)
    a1 = apply_a(model, phi1)
    a2 = apply_a(model, phi2)

    def gamma(t, x):
        return a_prod(t, x) - phi1(t, x) * a2(t, x) - phi2(t, x) * a1(t, x)

    return gamma


def gradient_form(model, phi1, phi2):
    """``sum alpha_ij d_i phi1 d_j phi2``, the diffusion closed form of the carré du champ."""

    def gamma(t, x):
        x = _as_states(x)
        return np.einsum("ni,nij,nj->n", phi1.gradient(t, x), model.alpha_at(t, x),
                         phi2.gradient(t, x))

    return gamma


@dataclass(frozen=True)
class PsiSystem:
    """The fixed functions ``psi_1..psi_d`` with ``a(psi_i)`` and ``Gamma(psi_i, psi_i)``.

    ``kind`` is ``"identity"``, ``"scale"`` (psi = h for distributional
    drift) or ``"general"``; it selects how martingale increments of
    ``psi(X)`` are formed along simulated paths.
    """

    psi: List[TestFunction]
    a_psi: List[Callable]
    gamma_psi_psi: List[Callable]
    bracket_bounds: List[float]
    kind: str = "general"

    @property
    def dim(self):
        return len(self.psi)

    @property
    def bracket_bound(self):
        return float(max(self.bracket_bounds))

    @classmethod
    def identity(cls, model):
        d = model.dim
        psi = [coordinate(i, d) for i in range(d)]
        a_psi = [(lambda i: lambda t, x: model.drift_at(t, _as_states(x))[:, i])(i) for i in range(d)]
        gam = [(lambda i: lambda t, x: model.alpha_at(t, _as_states(x))[:, i, i])(i) for i in range(d)]
        return cls(psi, a_psi, gam, [float(model.alpha_bound)] * d, "identity")

    @classmethod
    def scale(cls, model):
        h = model.h

        psi = TestFunction(
            lambda t, x: h(_as_states(x)[:, 0]),
            lambda t, x: np.zeros(_as_states(x).shape[0]),
            lambda t, x: model.h_prime(_as_states(x)[:, 0])[:, None],
            None,
            "bounded" if np.isfinite(h.range).all() else ("polynomial", 1),
            "h",
        )
        return cls(
            [psi],
            [lambda t, x: np.zeros(_as_states(x).shape[0])],
            [lambda t, x: model.sigma_h_prime(_as_states(x)[:, 0]) ** 2],
            [float(model.C1) ** 2],
            "scale",
        )

    @classmethod
    def default(cls, model):
        if isinstance(model, DistributionalDriftModel):
            return cls.scale(model)
        return cls.identity(model)

    def values(self, t, x, scale_values=None):
        """``psi_i(t, x)`` stacked to shape ``(n, d)``."""
        if self.kind == "scale" and scale_values is not None:
            return np.asarray(scale_values, dtype=float)[:, None]
        return np.stack([p(t, x) for p in self.psi], axis=1)

    def a_values(self, t, x):
        return np.stack([np.broadcast_to(a(t, x), (_as_states(x).shape[0],)) for a in self.a_psi],
                        axis=1)

    def increments(self, ensemble, model=None):
        """Martingale increments of ``M[psi_i]`` along the paths, shape ``(n, N, d)``.

        Zero on steps before the start time.
        """
        grid, X = ensemble.grid, ensemble.paths
        n, N = ensemble.n_paths, grid.n_steps
        start = ensemble.start_index
        out = np.zeros((n, N, self.dim))
        if self.kind == "identity":
            model = model if model is not None else ensemble.model
            for k in range(start, N):
                t = float(grid.times[k])
                out[:, k] = X[:, k + 1] - X[:, k] - model.drift_at(t, X[:, k]) * grid.dt[k]
        elif self.kind == "scale":
            out[:, start:, 0] = np.diff(ensemble.scale_paths[:, start:], axis=1)
        else:
            for k in range(start, N):
                t0, t1 = float(grid.times[k]), float(grid.times[k + 1])
                out[:, k] = (self.values(t1, X[:, k + 1]) - self.values(t0, X[:, k])
                             - self.a_values(t0, X[:, k]) * grid.dt[k])
        return out


def gamma_psi(model, psi, phi):
    """ψ-gradient ``(a(phi psi_i) - phi a(psi_i) - psi_i a(phi))_i`` of shape ``(n, d)``."""
    a_phi = apply_a(model, phi)
    parts = [(apply_a(model, phi * p), p, a_p) for p, a_p in zip(psi.psi, psi.a_psi)]

    def gamma(t, x):
        x = _as_states(x)
        base, phi_x = a_phi(t, x), phi(t, x)
        cols = [a_prod(t, x) - phi_x * a_p(t, x) - p(t, x) * base for a_prod, p, a_p in parts]
        return np.stack(cols, axis=1)

    return gamma


@dataclass(frozen=True)
class MartingaleReport:
    """Per-slice statistics of the increments of ``M[phi]``."""

    times: np.ndarray
    means: np.ndarray
    standard_errors: np.ndarray
    max_ratio: float

    @property
    def passed(self):
        return self.max_ratio <= 3.0


def _ratio(mean, se):
    if se > 0.0:
        return abs(mean) / se
    return 0.0 if mean == 0.0 else np.inf


def martingale_residual_check(ensemble, model, phi):
    """Slice statistics of ``phi(t_{k+1}, X_{k+1}) - phi(t_k, X_k) - a(phi)(t_k, X_k) dt``."""
    a_phi = apply_a(model, phi)
    grid, X = ensemble.grid, ensemble.paths
    means, ses = [], []
    for k in range(ensemble.start_index, grid.n_steps):
        t0, t1 = float(grid.times[k]), float(grid.times[k + 1])
        inc = phi(t1, X[:, k + 1]) - phi(t0, X[:, k]) - a_phi(t0, X[:, k]) * grid.dt[k]
        m, se = sample_mean(inc)
        means.append(m)
        ses.append(se)
    ratios = [_ratio(m, s) for m, s in zip(means, ses)]
    return MartingaleReport(grid.times[ensemble.start_index: -1].copy(), np.array(means),
                            np.array(ses), float(max(ratios)))


def bracket_check(ensemble, model, psi, phi):
    """Realised covariation of ``M[phi]`` and ``M[psi_i]`` against ``int Gamma^psi(phi) dr``.

    Returns per-component pathwise-mean differences and their standard errors.
    """
    a_phi = apply_a(model, phi)
    gam = gamma_psi(model, psi, phi)
    grid, X = ensemble.grid, ensemble.paths
    dpsi = psi.increments(ensemble, model)
    n, d = ensemble.n_paths, psi.dim
    realised = np.zeros((n, d))
    integral = np.zeros((n, d))
    for k in range(ensemble.start_index, grid.n_steps):
        t0, t1 = float(grid.times[k]), float(grid.times[k + 1])
        dm = phi(t1, X[:, k + 1]) - phi(t0, X[:, k]) - a_phi(t0, X[:, k]) * grid.dt[k]
        realised += dm[:, None] * dpsi[:, k]
        integral += gam(t0, X[:, k]) * grid.dt[k]
    stats = [sample_mean(realised[:, i] - integral[:, i]) for i in range(d)]
    return np.array([m for m, _ in stats]), np.array([s for _, s in stats])


# ---------------------------------------------------------------------------
# grid functions


def _lagrange_weights(nodes, x):
    """Four-point Lagrange weights; ``nodes`` has shape (n, 4)."""
    w = np.ones_like(nodes)
    for j in range(4):
        for m in range(4):
            if m != j:
                w[:, j] *= (x - nodes[:, m]) / (nodes[:, j] - nodes[:, m])
    return w


def _uniform_lagrange_weights(u):
    """Four-point Lagrange weights on equispaced nodes 0, 1, 2, 3 at offsets ``u``."""
    u1, u2, u3 = u - 1.0, u - 2.0, u - 3.0
    return np.stack([-u1 * u2 * u3 / 6.0, u * u2 * u3 / 2.0, -u * u1 * u3 / 2.0, u * u1 * u2 / 6.0],
                    axis=1)


def _is_uniform(nodes):
    if nodes.size < 3:
        return True
    gaps = np.diff(nodes)
    return bool(np.all(np.abs(gaps - gaps[0]) <= 1e-12 * max(1.0, abs(gaps[0]))))


def _axis_stencil(nodes, x, cubic, outside):
    """Indices and weights along one axis, plus a mask of clamped points."""
    lo, hi = nodes[0], nodes[-1]
    clamped = (x < lo) | (x > hi)
    if np.any(clamped):
        if outside == "error":
            raise ExtrapolationError(
                f"{int(clamped.sum())} point(s) outside the grid hull [{lo}, {hi}]")
        x = np.clip(x, lo, hi)
    m = nodes.size
    if m == 1:
        return np.zeros((x.size, 1), dtype=np.int64), np.ones((x.size, 1)), clamped
    uniform = _is_uniform(nodes)
    if uniform:
        step = (hi - lo) / (m - 1)
        i = np.clip(np.floor((x - lo) / step).astype(np.int64), 0, m - 2)
        # repair rounding so that nodes[i] <= x < nodes[i + 1] holds exactly
        i += (nodes[np.minimum(i + 1, m - 1)] <= x) & (i < m - 2)
        i -= (nodes[i] > x) & (i > 0)
    else:
        i = np.clip(np.searchsorted(nodes, x, side="right") - 1, 0, m - 2)
    if cubic and m >= 4:
        base = np.clip(i - 1, 0, m - 4)
        idx = base[:, None] + np.arange(4)[None, :]
        if uniform:
            w = _uniform_lagrange_weights((x - nodes[base]) / step)
        else:
            w = _lagrange_weights(nodes[idx], x)
        # exact at nodes: Lagrange weights give (0, 1, 0, 0) up to rounding
        hit = np.where(nodes[i + 1] == x, i + 1, np.where(nodes[i] == x, i, -1))
        at_node = hit >= 0
        if np.any(at_node):
            w[at_node] = (idx[at_node] == hit[at_node, None]).astype(float)
        return idx, w, clamped
    tau = (x - nodes[i]) / (nodes[i + 1] - nodes[i])
    idx = np.stack([i, i + 1], axis=1)
    w = np.stack([1.0 - tau, tau], axis=1)
    return idx, w, clamped


@dataclass(frozen=True, eq=False)
class GridFunction:
    """Values on a tensor grid ``times x axes[0] x ... x axes[d-1]``.

    Interpolation is linear in time and, per ``method``, linear
    (multilinear overall) or four-point cubic Lagrange in each space axis.
    Evaluation at a node returns the stored value exactly.
    """

    times: np.ndarray
    axes: Sequence[np.ndarray]
    values: np.ndarray
    method: str = "linear"

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        axes = tuple(np.asarray(a, dtype=float) for a in self.axes)
        values = np.asarray(self.values, dtype=float)
        shape = (times.size,) + tuple(a.size for a in axes)
        if values.shape != shape:
            raise ConfigurationError(f"values have shape {values.shape}, grid needs {shape}")
        for a in (times,) + axes:
            if a.size > 1 and np.any(np.diff(a) <= 0):
                raise ConfigurationError("grid nodes must be strictly increasing")
        if not np.all(np.isfinite(values)):
            raise NonFiniteError("grid function values must be finite")
        if self.method not in ("linear", "cubic"):
            raise ConfigurationError(f"unknown interpolation method {self.method!r}")
        for name, arr in (("times", times), ("values", values)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        for a in axes:
            a.setflags(write=False)
        object.__setattr__(self, "axes", axes)

    @classmethod
    def tabulate(cls, fn, times, axes, method="linear"):
        """Fill a grid from ``fn(t, x)`` evaluated at each time slice."""
        times = np.asarray(times, dtype=float)
        axes = [np.asarray(a, dtype=float) for a in axes]
        nodes = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(axes))
        values = np.stack([np.broadcast_to(fn(float(t), nodes), (nodes.shape[0],)) for t in times])
        return cls(times, axes, values.reshape((times.size,) + tuple(a.size for a in axes)), method)

    @property
    def dim(self):
        return len(self.axes)

    @property
    def shape(self):
        return self.values.shape

    def nodes(self):
        """All space nodes as an array of shape ``(n_space, d)``."""
        return np.stack(np.meshgrid(*self.axes, indexing="ij"), axis=-1).reshape(-1, self.dim)

    def space_stencil(self, x, outside="error"):
        """Indices into the flattened space nodes and weights of the spatial interpolant."""
        x = _as_states(x)
        n = x.shape[0]
        cubic = self.method == "cubic"
        flat_idx = np.zeros((n, 1), dtype=np.int64)
        weights = np.ones((n, 1))
        clamped = np.zeros(n, dtype=bool)
        sizes = [a.size for a in self.axes]
        for j, nodes in enumerate(self.axes):
            idx, w, out = _axis_stencil(nodes, x[:, j], cubic, outside)
            stride = int(np.prod(sizes[j + 1:], dtype=np.int64))
            flat_idx = (flat_idx[:, :, None] + idx[:, None, :] * stride).reshape(n, -1)
            weights = (weights[:, :, None] * w[:, None, :]).reshape(n, -1)
            clamped |= out
        return flat_idx, weights, clamped

    def time_stencil(self, t, outside="error"):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return _axis_stencil(self.times, t, False, outside)

    def stencil(self, t, x, outside="error"):
        """Flat value indices and weights reproducing the interpolant at ``(t, x)``.

        Returns ``(indices, weights, clamped)`` with ``indices`` and ``weights``
        of shape ``(n, S)`` and ``clamped`` a boolean mask of points moved onto
        the hull.
        """
        x = _as_states(x)
        n = x.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=float), (n,))
        t_idx, t_w, t_out = _axis_stencil(self.times, t, False, outside)
        s_idx, s_w, s_out = self.space_stencil(x, outside)
        n_space = int(np.prod(self.shape[1:], dtype=np.int64))
        flat_idx = (t_idx[:, :, None] * n_space + s_idx[:, None, :]).reshape(n, -1)
        weights = (t_w[:, :, None] * s_w[:, None, :]).reshape(n, -1)
        return flat_idx, weights, t_out | s_out

    def __call__(self, t, x, outside="error"):
        idx, w, _ = self.stencil(t, x, outside)
        return np.einsum("ns,ns->n", self.values.reshape(-1)[idx], w)

    def with_values(self, values):
        return GridFunction(self.times, self.axes, values, self.method)

    def shifted(self, eps):
        return self.with_values(self.values + eps)

    def to_csv(self):
        """CSV text with columns ``t, x_1..x_d, value``."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\r\n")
        writer.writerow(["t"] + [f"x_{i + 1}" for i in range(self.dim)] + ["value"])
        for ti, t in enumerate(self.times):
            for pos in product(*(range(a.size) for a in self.axes)):
                coords = [repr(float(a[p])) for a, p in zip(self.axes, pos)]
                writer.writerow([repr(float(t))] + coords + [repr(float(self.values[(ti,) + pos]))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text, method="linear"):
        rows = list(csv.reader(io.StringIO(text)))
        header, body = rows[0], np.array([[float(v) for v in r] for r in rows[1:] if r])
        d = len(header) - 2
        times = np.unique(body[:, 0])
        axes = [np.unique(body[:, 1 + j]) for j in range(d)]
        values = np.full((times.size,) + tuple(a.size for a in axes), np.nan)
        index = [np.searchsorted(times, body[:, 0])] + [
            np.searchsorted(a, body[:, 1 + j]) for j, a in enumerate(axes)]
        values[tuple(index)] = body[:, -1]
        return cls(times, axes, values, method)
