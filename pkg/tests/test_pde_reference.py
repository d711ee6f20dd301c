import warnings

import numpy as np
import pytest

from pseudopde.bsde_solver import DriverSpec, TerminalSpec
from pseudopde.decoupled_mild import MildSolutionPair, MonteCarloSettings, evaluate_mild_residuals
from pseudopde.errors import ConfigurationError, ConvergenceError
from pseudopde.forward_models import DiffusionModel
from pseudopde.pde_reference import (BoundaryTruncationWarning, FdConfig, closed_form_gaussian,
                                     solve_semilinear_fd)

BROWNIAN = DiffusionModel.brownian(1)
SINE = TerminalSpec(lambda x: np.sin(x[:, 0]))
SQUARE = TerminalSpec(lambda x: x[:, 0] ** 2)


def interior_error(u, exact, cfg, n_times=11):
    lo, hi = cfg.interval
    x = np.linspace(lo + 0.25 * (hi - lo), hi - 0.25 * (hi - lo), 161)[:, None]
    return max(np.max(np.abs(u(float(s), x) - exact(float(s), x)))
               for s in np.linspace(cfg.t0, cfg.T, n_times))


def exact_edges(form):
    return lambda t, x: form.u(t, x)


# --- closed forms ---------------------------------------------------------

def test_closed_form_values():
    assert closed_form_gaussian("moment2")(0.0, np.array([[0.0]]))[0] == 1.0
    x = np.linspace(-3, 3, 13)[:, None]
    assert np.array_equal(closed_form_gaussian("eigen_sin")(1.0, x), np.sin(x[:, 0]))
    base = closed_form_gaussian("eigen_sin")
    same = closed_form_gaussian("discounted", rate=0.0, base=base)
    assert np.array_equal(same(0.3, x), base(0.3, x))
    assert np.array_equal(same.v(0.3, x), base.v(0.3, x))
    with pytest.raises(ConfigurationError):
        closed_form_gaussian("cosh")


def test_closed_form_gradients():
    x = np.linspace(-2, 2, 9)[:, None]
    h = 1e-6
    for form in (closed_form_gaussian("moment2"), closed_form_gaussian("eigen_sin"),
                 closed_form_gaussian("discounted", rate=0.4)):
        fd = (form.u(0.2, x + h) - form.u(0.2, x - h)) / (2 * h)
        assert np.allclose(form.v(0.2, x), fd, atol=1e-6)


# --- finite differences ---------------------------------------------------

def test_quadratic_terminal():
    form = closed_form_gaussian("moment2")
    cfg = FdConfig(boundary_values=exact_edges(form))
    u, v = solve_semilinear_fd(BROWNIAN, DriverSpec.zero(), SQUARE, cfg)
    assert interior_error(u, form, cfg) <= 1e-4
    assert interior_error(v, closed_form_gaussian("moment2").v, cfg) <= 1e-4


def test_sine_terminal():
    form = closed_form_gaussian("eigen_sin")
    cfg = FdConfig(boundary_values=exact_edges(form))
    u, _ = solve_semilinear_fd(BROWNIAN, DriverSpec.zero(), SINE, cfg)
    assert interior_error(u, form, cfg) <= 1e-4


def test_discounting_identity():
    rate = 0.7
    form = closed_form_gaussian("discounted", rate=rate, base=closed_form_gaussian("eigen_sin"))
    cfg = FdConfig(boundary_values=exact_edges(form))
    u, _ = solve_semilinear_fd(BROWNIAN, DriverSpec(lambda t, x, y, z: -rate * y, K_Y=rate), SINE,
                               cfg)
    assert interior_error(u, form, cfg) <= 1e-4


def test_terminal_row_is_exact():
    u, _ = solve_semilinear_fd(BROWNIAN, DriverSpec.zero(), SINE, FdConfig(n_space=201, n_time=60))
    assert np.array_equal(u.values[-1], np.sin(u.axes[0]))


@pytest.mark.parametrize("kind,terminal", [("eigen_sin", SINE), ("moment2", SQUARE)])
def test_refinement_is_second_order(kind, terminal):
    form = closed_form_gaussian(kind)
    errors = []
    for n_space, n_time in ((101, 26), (201, 52), (401, 104)):
        cfg = FdConfig(n_space=n_space, n_time=n_time, boundary_values=exact_edges(form))
        u, _ = solve_semilinear_fd(BROWNIAN, DriverSpec.zero(), terminal, cfg)
        errors.append(interior_error(u, form, cfg))
    if kind == "moment2":
        # the scheme is exact on quadratics up to round-off
        assert max(errors) <= 1e-9
        return
    for coarse, fine in zip(errors, errors[1:]):
        assert 3.2 <= coarse / fine <= 4.8


def test_quality_floor():
    with pytest.raises(ConfigurationError):
        FdConfig(n_space=801, n_time=100)
    FdConfig(n_space=801, n_time=201)


def test_boundary_warning_for_narrow_interval():
    with pytest.warns(BoundaryTruncationWarning):
        solve_semilinear_fd(BROWNIAN, DriverSpec.zero(), SINE,
                            FdConfig(interval=(-2.0, 2.0), n_space=81, n_time=40))
    with warnings.catch_warnings():
        warnings.simplefilter("error", BoundaryTruncationWarning)
        solve_semilinear_fd(BROWNIAN, DriverSpec.zero(), SINE, FdConfig(n_space=201, n_time=60))


def test_neumann_boundary_runs():
    drv = DriverSpec(lambda t, x, y, z: -y - z[:, 0], K_Y=1.0, K_Z=1.0)
    u, v = solve_semilinear_fd(BROWNIAN, drv, TerminalSpec(lambda x: np.cos(x[:, 0])),
                               FdConfig(n_space=201, n_time=60, boundary="neumann"))
    assert np.all(np.isfinite(u.values)) and np.all(np.isfinite(v.values))
    assert np.allclose(v.values[:, [0, -1]], 0.0, atol=1e-12)


def test_inner_iteration_failure_reports_history():
    drv = DriverSpec(lambda t, x, y, z: np.cos(y), K_Y=1.0)
    cfg = FdConfig(n_space=101, n_time=30, inner_iterations=1, inner_tol=1e-14)
    with pytest.raises(ConvergenceError) as info:
        solve_semilinear_fd(BROWNIAN, drv, SINE, cfg)
    assert len(info.value.history) == 1


def test_rejects_multidimensional_models():
    with pytest.raises(ConfigurationError):
        solve_semilinear_fd(DiffusionModel.brownian(2), DriverSpec.zero(), SINE, FdConfig())


def test_fd_pair_passes_kernel_identities():
    drv = DriverSpec(lambda t, x, y, z: np.cos(y), K_Y=1.0)
    pair = MildSolutionPair.from_fd(solve_semilinear_fd(BROWNIAN, drv, SINE, FdConfig()))
    points = [(0.0, [0.0]), (0.4, [1.0]), (0.8, [-2.0])]
    report = evaluate_mild_residuals(pair, BROWNIAN, None, drv, SINE, points,
                                     MonteCarloSettings(n_paths=20_000, seed=31))
    assert report.passed
