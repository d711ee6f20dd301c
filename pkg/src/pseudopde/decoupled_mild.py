"""The pair (u, v) on a space-time grid and the kernel identities it satisfies.

For every node ``(s, x)`` the pair must satisfy, with ``P`` the transition
kernel of the forward process,

    u(s,x)      = P_{s,T}[g](x) + int_s^T P_{s,r}[f(.,.,u,v)](x) dr
    u psi_i(s,x) = P_{s,T}[g psi_i](x)
                  - int_s^T P_{s,r}[v_i + u a(psi_i) - psi_i f(.,.,u,v)](x) dr

Two constructions are offered: one BSDE solve per node
(:func:`build_u_from_bsde`) and Picard sweeps of the identities themselves
on Monte-Carlo kernels (:func:`solve_mild_fixed_point`).
:func:`evaluate_mild_residuals` checks any pair against the identities on a
fresh ensemble.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import rng
from ._parallel import parallel_map
from .bsde_solver import PicardConfig, solve_markovian
from .errors import ConfigurationError, ExtrapolationError, NodeFailureError
from .forward_models import TimeGrid, sample_mean, simulate
from .operators import GridFunction, MartingaleReport, PsiSystem, _ratio


@dataclass(frozen=True)
class SpaceTimeGrid:
    """Tensor node set ``times x axes[0] x ... x axes[d-1]``."""

    times: np.ndarray
    axes: tuple

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        axes = tuple(np.asarray(a, dtype=float) for a in self.axes)
        if times.ndim != 1 or times.size < 1 or np.any(np.diff(times) <= 0):
            raise ConfigurationError("node times must be strictly increasing")
        for a in axes:
            if a.ndim != 1 or a.size < 1 or np.any(np.diff(a) <= 0):
                raise ConfigurationError("space nodes must be strictly increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "axes", axes)

    @classmethod
    def default(cls, T, centre=0.0, dim=1, t0=0.0, n_times=11, n_space=41, width=5.0):
        """``n_times`` times on ``[t0, T]`` and ``n_space`` nodes on ``centre +- width sqrt(T)``."""
        centre = np.broadcast_to(np.asarray(centre, dtype=float), (dim,))
        half = width * np.sqrt(T)
        axes = tuple(np.linspace(c - half, c + half, n_space) for c in centre)
        return cls(np.linspace(t0, T, n_times), axes)

    @property
    def dim(self):
        return len(self.axes)

    @property
    def T(self):
        return float(self.times[-1])

    @property
    def shape(self):
        return (self.times.size,) + tuple(a.size for a in self.axes)

    def space_nodes(self):
        return np.stack(np.meshgrid(*self.axes, indexing="ij"), axis=-1).reshape(-1, self.dim)

    def grid_function(self, values, method="linear"):
        return GridFunction(self.times, self.axes, np.asarray(values).reshape(self.shape), method)


@dataclass(frozen=True)
class MonteCarloSettings:
    """Simulation settings shared by the constructions and the residual checks.

    ``dt`` is the largest simulation step; a node at time ``s`` uses
    ``round((T - s) / dt)`` steps.  ``quadrature`` selects the rule for time
    integrals along paths: ``"left"`` matches the Euler scheme (its discrete
    martingale identities hold exactly), ``"trapezoid"`` is second order for
    smooth integrands.
    """

    n_paths: int = 20000
    dt: float = 0.02
    seed: int = 0
    picard: PicardConfig = field(default_factory=PicardConfig)
    quadrature: str = "left"
    interpolation: str = "cubic"
    max_outside_fraction: float = 1e-3
    workers: int = 1

    def __post_init__(self):
        if self.n_paths < 2 or not self.dt > 0:
            raise ConfigurationError("need n_paths >= 2 and dt > 0")
        if self.quadrature not in ("left", "trapezoid"):
            raise ConfigurationError(f"unknown quadrature {self.quadrature!r}")

    def time_grid(self, s, T):
        return TimeGrid.uniform(s, T, max(1, int(round((T - s) / self.dt))))

    def quadrature_weights(self, grid):
        dt = grid.dt
        w = np.zeros(grid.n_steps + 1)
        if self.quadrature == "left":
            w[:-1] = dt
        else:
            w[:-1] += 0.5 * dt
            w[1:] += 0.5 * dt
        return w


@dataclass(frozen=True, eq=False)
class MildSolutionPair:
    """Grid functions ``u`` and ``v = (v_1..v_d)`` with their node standard errors."""

    u: GridFunction
    v: List[GridFunction]
    provenance: str
    u_se: Optional[np.ndarray] = None
    v_se: Optional[List[np.ndarray]] = None
    flagged: Optional[np.ndarray] = None
    converged: bool = True
    sweeps: int = 0

    @property
    def dim(self):
        return len(self.v)

    def terminal_matches(self, terminal):
        """``u(T, .) == g`` exactly on the space nodes."""
        return bool(np.array_equal(self.u.values[-1].reshape(-1), terminal(self.u.nodes())))

    def shifted(self, eps):
        """The same pair with ``u`` moved by ``eps`` (used to exercise the residual check)."""
        return MildSolutionPair(self.u.shifted(eps), self.v, self.provenance + "+shift",
                                self.u_se, self.v_se, self.flagged, self.converged, self.sweeps)

    def se_at(self, s, x):
        if self.u_se is None:
            return 0.0
        se = GridFunction(self.u.times, self.u.axes, self.u_se, "linear")
        return float(se(s, np.asarray(x, dtype=float)[None, :], outside="clamp")[0])

    @classmethod
    def from_functions(cls, u, v, st_grid, provenance="closed_form", method="cubic"):
        """Tabulate callables ``u(t, x)`` and ``v(t, x) -> (n, d)`` on ``st_grid``."""
        ugrid = GridFunction.tabulate(u, st_grid.times, st_grid.axes, method)
        vgrids = [GridFunction.tabulate(lambda t, x, i=i: np.asarray(v(t, x))[:, i],
                                        st_grid.times, st_grid.axes, method)
                  for i in range(st_grid.dim)]
        return cls(ugrid, vgrids, provenance)

    @classmethod
    def from_fd(cls, fd_solution, provenance="from_fd", method="cubic"):
        u, v = fd_solution
        return cls(GridFunction(u.times, u.axes, u.values, method),
                   [GridFunction(v.times, v.axes, v.values, method)], provenance)


# ---------------------------------------------------------------------------
# helpers


def _node_seed(seed, *path):
    return rng.derive_seed(seed, *path)


def _terminal_bracket(model, psi, terminal, x, T, mc, seed):
    """Bracket density of ``g(X_T)`` with ``M[psi]`` over one step ending at ``T``."""
    grid = TimeGrid(np.array([T - mc.dt, T]))
    ens = simulate(model, grid.t0, x, grid, mc.n_paths, seed)
    dpsi = psi.increments(ens, model)[:, 0, :]
    g = terminal(ens.paths[:, -1])
    centred = g - g.mean()
    stats = [sample_mean(centred * dpsi[:, i] / mc.dt) for i in range(psi.dim)]
    return np.array([m for m, _ in stats]), np.array([se for _, se in stats])


# ---------------------------------------------------------------------------
# construction from BSDE solves


def build_u_from_bsde(model, psi, driver, terminal, st_grid, mc=MonteCarloSettings()):
    """Solve the Markovian BSDE at every node and store ``u = Y_s`` and ``v = Z_s``.

    Nodes at the horizon take ``u = g`` and a one-step bracket estimate for
    ``v``.  If some nodes fail, :class:`NodeFailureError` carries the list
    and the partial arrays (NaN at failed nodes).
    """
    psi = PsiSystem.default(model) if psi is None else psi
    nodes = st_grid.space_nodes()
    T = st_grid.T
    jobs = [(a, b) for a in range(st_grid.times.size) for b in range(nodes.shape[0])]

    def solve_node(job):
        a, b = job
        s, x = float(st_grid.times[a]), nodes[b]
        seed = _node_seed(mc.seed, 0, a, b)
        try:
            if a == st_grid.times.size - 1:
                v, v_se = _terminal_bracket(model, psi, terminal, x, T, mc, seed)
                return float(terminal(x[None, :])[0]), 0.0, v, v_se, None
            sol = solve_markovian(model, psi, driver, terminal, s, x, mc.time_grid(s, T),
                                  mc.n_paths, seed, mc.picard)
            return sol.u, sol.u_se, sol.v, sol.v_se, None
        except Exception as exc:  # reported per node, see NodeFailureError
            nan = np.full(psi.dim, np.nan)
            return np.nan, np.nan, nan, nan, f"{type(exc).__name__}: {exc}"

    results = parallel_map(solve_node, jobs, mc.workers)
    u = np.array([r[0] for r in results])
    u_se = np.array([r[1] for r in results])
    v = np.array([r[2] for r in results])
    v_se = np.array([r[3] for r in results])
    failures = [(float(st_grid.times[a]), nodes[b], r[4])
                for (a, b), r in zip(jobs, results) if r[4] is not None]
    if failures:
        raise NodeFailureError(failures, {"u": u.reshape(st_grid.shape), "v": v, "u_se": u_se})
    method = mc.interpolation
    return MildSolutionPair(
        u=st_grid.grid_function(u, method),
        v=[st_grid.grid_function(v[:, i], method) for i in range(psi.dim)],
        provenance="from_bsde",
        u_se=u_se.reshape(st_grid.shape),
        v_se=[v_se[:, i].reshape(st_grid.shape) for i in range(psi.dim)],
        flagged=np.zeros(st_grid.shape, dtype=bool),
    )


# ---------------------------------------------------------------------------
# fixed point of the kernel identities


def _stack_slices(grid, X, ks):
    """Times and states of slices ``ks`` stacked slice-major for one stencil call."""
    n = X.shape[0]
    return np.repeat(grid.times[ks], n), X[:, ks].transpose(1, 0, 2).reshape(-1, X.shape[2])


def _path_values(model, psi, ens):
    """psi values along the paths, shape (n, N+1, d)."""
    grid, X = ens.grid, ens.paths
    if psi.kind == "scale":
        return ens.scale_paths[:, :, None]
    return np.stack([psi.values(float(t), X[:, k]) for k, t in enumerate(grid.times)], axis=1)


def solve_mild_fixed_point(model, psi, driver, terminal, st_grid, mc=MonteCarloSettings(),
                           max_sweeps=50, tol=1e-6):
    """Picard sweeps of the kernel identities on the node grid.

    Each non-terminal node owns one ensemble, condensed into linear maps from
    grid values to

    * ``E[int_s^T phi(r, X_r) dr]`` (the time-integrated kernel of line 1), and
    * ``E[(u(s+dt, X_{s+dt}) - u(s, x)) dM[psi_i]] / dt``, which is what line
      ``i+1`` leaves of ``v_i`` after differencing it at ``(s, x)`` against the
      same line transported from ``s + dt`` and removing the line-1 and
      ``M[psi]`` terms whose expectations vanish.

    A sweep sets ``u <- P[g] + K f(u, v)`` and then ``v <- D u``; iteration
    stops when the largest node change of ``u`` and ``v`` is at most ``tol``.
    Nodes whose paths leave the grid hull are clamped and flagged.
    """
    psi = PsiSystem.default(model) if psi is None else psi
    d = psi.dim
    nodes = st_grid.space_nodes()
    n_t, n_x = st_grid.times.size, nodes.shape[0]
    n_grid = n_t * n_x
    T = st_grid.T
    template = st_grid.grid_function(np.zeros(n_grid), mc.interpolation)
    jobs = [(a, b) for a in range(n_t - 1) for b in range(n_x)]

    def kernel_rows(job):
        a, b = job
        s, x = float(st_grid.times[a]), nodes[b]
        ens = simulate(model, s, x, mc.time_grid(s, T), mc.n_paths, _node_seed(mc.seed, 0, a, b))
        grid, X, n = ens.grid, ens.paths, ens.n_paths
        w = mc.quadrature_weights(grid)
        ks = np.flatnonzero(w)
        # occupation histogram of every slice over the space nodes, then spread in time
        _, x_all = _stack_slices(grid, X, ks)
        idx, wt, out = template.space_stencil(x_all, outside="clamp")
        slot = idx + (np.arange(ks.size) * n_x).repeat(n)[:, None]
        hist = np.bincount(slot.ravel(), wt.ravel(), minlength=ks.size * n_x).reshape(ks.size, n_x)
        t_idx, t_w, t_out = template.time_stencil(grid.times[ks], outside="clamp")
        coef = t_w * (w[ks] / n)[:, None]
        row = np.zeros((n_t, n_x))
        for c in range(t_idx.shape[1]):
            np.add.at(row, t_idx[:, c], coef[:, c, None] * hist)
        row = row.reshape(-1)
        clamped = bool(out.any() or t_out.any())
        dpsi = psi.increments(ens, model)[:, 0, :]
        idx, wt, out = template.stencil(float(grid.times[1]), X[:, 1], outside="clamp")
        clamped |= bool(out.any())
        own = a * n_x + b
        drow = np.zeros((d, n_grid))
        for i in range(d):
            drow[i] = np.bincount(idx.ravel(), (wt * dpsi[:, i, None]).ravel(), minlength=n_grid)
            drow[i, own] -= dpsi[:, i].sum()
        drow /= n * grid.dt[0]
        return terminal(X[:, -1]).mean(), row, drow, clamped

    def terminal_job(b):
        return _terminal_bracket(model, psi, terminal, nodes[b], T, mc,
                                 _node_seed(mc.seed, 0, n_t - 1, b))

    rows = parallel_map(kernel_rows, jobs, mc.workers)
    term = parallel_map(terminal_job, range(n_x), mc.workers)
    live = np.arange((n_t - 1) * n_x)
    G = np.array([r[0] for r in rows])
    K = np.stack([r[1] for r in rows])
    D = np.stack([r[2] for r in rows], axis=1)  # (d, n_live, n_grid)
    flagged = np.zeros(n_grid, dtype=bool)
    flagged[live] = [r[3] for r in rows]

    U = np.zeros(n_grid)
    U[(n_t - 1) * n_x:] = terminal(nodes)
    V = np.zeros((d, n_grid))
    V[:, (n_t - 1) * n_x:] = np.array([t[0] for t in term]).T
    U[live] = G
    V[:, live] = D @ U

    node_t = np.repeat(st_grid.times, n_x)
    node_x = np.tile(nodes, (n_t, 1))

    def driver_on_grid(U, V):
        F = np.empty(n_grid)
        for a in range(n_t):
            sl = slice(a * n_x, (a + 1) * n_x)
            F[sl] = driver(float(st_grid.times[a]), node_x[sl], U[sl], V[:, sl].T)
        return F

    converged, sweeps = False, 0
    for sweeps in range(1, max_sweeps + 1):
        U_new = U.copy()
        U_new[live] = G + K @ driver_on_grid(U, V)
        V_new = V.copy()
        V_new[:, live] = D @ U_new
        change = max(np.max(np.abs(U_new - U)), np.max(np.abs(V_new - V)))
        U, V = U_new, V_new
        if change <= tol:
            converged = True
            break

    # standard errors from a second pass over the same ensembles
    F_grid = template.with_values(driver_on_grid(U, V).reshape(st_grid.shape))
    u_grid = template.with_values(U.reshape(st_grid.shape))

    def node_errors(job):
        a, b = job
        s, x = float(st_grid.times[a]), nodes[b]
        ens = simulate(model, s, x, mc.time_grid(s, T), mc.n_paths, _node_seed(mc.seed, 0, a, b))
        grid, X = ens.grid, ens.paths
        w = mc.quadrature_weights(grid)
        ks = np.flatnonzero(w)
        t_all, x_all = _stack_slices(grid, X, ks)
        along = F_grid(t_all, x_all, outside="clamp").reshape(ks.size, -1)
        line = terminal(X[:, -1]) + w[ks] @ along
        dpsi = psi.increments(ens, model)[:, 0, :]
        du = u_grid(float(grid.times[1]), X[:, 1], outside="clamp") - U[a * n_x + b]
        v_se = [sample_mean(du * dpsi[:, i] / grid.dt[0])[1] for i in range(d)]
        return sample_mean(line)[1], v_se

    errs = parallel_map(node_errors, jobs, mc.workers)
    u_se = np.zeros(n_grid)
    u_se[live] = [e[0] for e in errs]
    v_se = np.zeros((d, n_grid))
    v_se[:, live] = np.array([e[1] for e in errs]).T
    v_se[:, (n_t - 1) * n_x:] = np.array([t[1] for t in term]).T
    method = mc.interpolation
    return MildSolutionPair(
        u=st_grid.grid_function(U, method),
        v=[st_grid.grid_function(V[i], method) for i in range(d)],
        provenance="from_fixed_point",
        u_se=u_se.reshape(st_grid.shape),
        v_se=[v_se[i].reshape(st_grid.shape) for i in range(d)],
        flagged=flagged.reshape(st_grid.shape),
        converged=converged,
        sweeps=sweeps,
    )


# ---------------------------------------------------------------------------
# residuals


@dataclass(frozen=True)
class ResidualRecord:
    s: float
    x: tuple
    residuals: tuple
    standard_errors: tuple
    passed: tuple
    n_clamped: int

    def as_dict(self):
        return {
            "s": self.s,
            "x": list(self.x),
            "residuals": list(self.residuals),
            "standard_errors": list(self.standard_errors),
            "passed": list(self.passed),
            "n_clamped": self.n_clamped,
        }


@dataclass(frozen=True)
class ResidualReport:
    """Residuals of the ``d + 1`` kernel identities at each test point."""

    records: List[ResidualRecord]
    provenance: str = ""
    threshold: float = 3.0

    @property
    def passed(self):
        return all(all(r.passed) for r in self.records)

    def line_passed(self, line):
        return [r.passed[line] for r in self.records]

    def as_dict(self):
        return {
            "provenance": self.provenance,
            "threshold_se": self.threshold,
            "passed": self.passed,
            "points": [r.as_dict() for r in self.records],
        }


def _pair_along_paths(pair, ens, outside):
    grid, X = ens.grid, ens.paths
    n, N1 = X.shape[0], grid.n_steps + 1
    U = np.empty((n, N1))
    V = np.empty((n, N1, pair.dim))
    clamped = 0
    for k in range(N1):
        t = float(grid.times[k])
        idx, w, out = pair.u.stencil(t, X[:, k], outside=outside)
        clamped += int(out.sum())
        U[:, k] = np.einsum("ns,ns->n", pair.u.values.reshape(-1)[idx], w)
        for i, vi in enumerate(pair.v):
            V[:, k, i] = np.einsum("ns,ns->n", vi.values.reshape(-1)[idx], w)
    return U, V, clamped


def evaluate_mild_residuals(pair, model, psi, driver, terminal, test_points,
                            mc=MonteCarloSettings(), threshold=3.0):
    """Monte-Carlo residuals of every kernel identity at each test point.

    Each identity is one expectation of a time-integrated functional along
    fresh paths from ``(s, x)``.  The standard error combines the path
    sampling error with the node error recorded for ``u(s, x)``.  Paths that
    leave the grid hull are clamped onto it; if more than
    ``mc.max_outside_fraction`` of the path points need clamping (or a test
    point itself lies outside), :class:`ExtrapolationError` is raised.
    """
    psi = PsiSystem.default(model) if psi is None else psi
    T = pair.u.times[-1]
    records = []
    for p, (s, x) in enumerate(test_points):
        s = float(s)
        x = np.atleast_1d(np.asarray(x, dtype=float))
        u0 = float(pair.u(s, x[None, :], outside="error")[0])
        if s >= T:
            raise ConfigurationError("test points must precede the horizon")
        ens = simulate(model, s, x, mc.time_grid(s, T), mc.n_paths, _node_seed(mc.seed, 1, p))
        grid, X = ens.grid, ens.paths
        U, V, clamped = _pair_along_paths(pair, ens, "clamp")
        if clamped > mc.max_outside_fraction * U.size:
            raise ExtrapolationError(
                f"{clamped} of {U.size} path points left the grid hull from (s={s}, x={list(x)})")
        w = mc.quadrature_weights(grid)
        N1 = grid.n_steps + 1
        F = np.stack([driver(float(grid.times[k]), X[:, k], U[:, k], V[:, k]) for k in range(N1)],
                     axis=1)
        psi_path = _path_values(model, psi, ens)
        a_psi = np.stack([psi.a_values(float(grid.times[k]), X[:, k]) for k in range(N1)], axis=1)
        gT = terminal(X[:, -1])
        node_se = pair.se_at(s, x)

        lines = [gT + F @ w - u0]
        scales = [1.0]
        psi0 = psi_path[0, 0]
        for i in range(psi.dim):
            integrand = V[:, :, i] + U * a_psi[:, :, i] - psi_path[:, :, i] * F
            lines.append(gT * psi_path[:, -1, i] - integrand @ w - u0 * psi0[i])
            scales.append(abs(psi0[i]))
        residuals, ses, passed = [], [], []
        for values, scale in zip(lines, scales):
            m, se = sample_mean(values)
            se = float(np.hypot(se, scale * node_se))
            residuals.append(m)
            ses.append(se)
            passed.append(bool(abs(m) <= threshold * se))
        records.append(ResidualRecord(s, tuple(float(v) for v in x), tuple(residuals),
                                      tuple(ses), tuple(passed), clamped))
    return ResidualReport(records, pair.provenance, threshold)


def martingale_roundtrip(pair, model, driver, s, x, mc=MonteCarloSettings()):
    """Slice statistics of the increments of ``u(t, X_t) - u(s, x) + int f(u, v) dr``.

    The standard error of each slice mean adds, in quadrature, the part
    propagated from the node errors of ``u`` (treated as independent), so a
    noisy but unbiased pair is not mistaken for a biased one.
    """
    T = pair.u.times[-1]
    x = np.atleast_1d(np.asarray(x, dtype=float))
    ens = simulate(model, s, x, mc.time_grid(s, T), mc.n_paths, _node_seed(mc.seed, 2, 0))
    grid, X = ens.grid, ens.paths
    n = ens.n_paths
    U, V, _ = _pair_along_paths(pair, ens, "clamp")
    node_var = None if pair.u_se is None else pair.u_se.reshape(-1) ** 2
    size = pair.u.values.size

    def node_weights(k):
        idx, w, _ = pair.u.stencil(float(grid.times[k]), X[:, k], outside="clamp")
        return np.bincount(idx.ravel(), w.ravel(), minlength=size) / n

    means, ses = [], []
    prev = node_weights(0) if node_var is not None else None
    for k in range(grid.n_steps):
        F = driver(float(grid.times[k]), X[:, k], U[:, k], V[:, k])
        m, se = sample_mean(U[:, k + 1] - U[:, k] + F * grid.dt[k])
        if node_var is not None:
            cur = node_weights(k + 1)
            se = float(np.hypot(se, np.sqrt(np.sum((cur - prev) ** 2 * node_var))))
            prev = cur
        means.append(m)
        ses.append(se)
    ratios = [_ratio(m, se) for m, se in zip(means, ses)]
    return MartingaleReport(grid.times[:-1].copy(), np.array(means), np.array(ses),
                            float(max(ratios)))
