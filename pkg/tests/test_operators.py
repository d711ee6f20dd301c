import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pseudopde.errors import ExtrapolationError, NonFiniteError
from pseudopde.forward_models import DiffusionModel, DistributionalDriftModel, TimeGrid, simulate
from pseudopde.operators import (GridFunction, PsiSystem, TestFunction, apply_a, bracket_check,
                                 carre_du_champ, constant, coordinate, gamma_psi, gradient_form,
                                 linear_combination, martingale_residual_check, time_function)

rng = np.random.default_rng(20240601)


def poly(c0, lin, quad, ct, dim):
    """phi = c0 + lin.x + x'Qx + ct t x1, with analytic derivatives."""
    lin = np.asarray(lin, dtype=float)
    Q = np.asarray(quad, dtype=float)
    Q = 0.5 * (Q + Q.T)
    e1 = np.zeros(dim)
    e1[0] = 1.0

    def fn(t, x):
        return c0 + x @ lin + np.einsum("ni,ij,nj->n", x, Q, x) + ct * t * x[:, 0]

    return TestFunction(
        fn,
        lambda t, x: ct * x[:, 0],
        lambda t, x: lin + 2 * x @ Q + ct * t * e1,
        lambda t, x: np.broadcast_to(2 * Q, (x.shape[0], dim, dim)),
        ("polynomial", 2),
    )


def smooth_model(dim, m_scale, a_scale, seed):
    r = np.random.default_rng(seed)
    M = r.normal(size=(dim, dim))
    L = r.normal(size=(dim, dim))

    def mu(t, x):
        return m_scale * np.tanh(x @ M.T + t)

    def alpha(t, x):
        S = L[None] * (1.0 + 0.5 * np.sin(x[:, :1, None] + t))
        return a_scale * (S @ np.swapaxes(S, 1, 2)) + 0.1 * np.eye(dim)

    return DiffusionModel(dim, mu, alpha, m_scale, a_scale * 4 * np.abs(L).sum() ** 2 + 0.1)


def brownian(dim=1, variance=1.0, drift=0.0):
    return DiffusionModel.brownian(dim, drift, variance)


def states(n=50, dim=1, seed=0):
    return np.random.default_rng(seed).uniform(-2, 2, size=(n, dim))


# --- generator ------------------------------------------------------------

def test_generator_of_identity_vanishes():
    x = states()
    assert np.array_equal(apply_a(brownian(), coordinate(0, 1))(0.3, x), np.zeros(len(x)))


def test_generator_of_square_is_one():
    sq = coordinate(0, 1) * coordinate(0, 1)
    assert np.array_equal(apply_a(brownian(), sq)(0.3, states()), np.ones(50))


def test_generator_of_time_times_x():
    mu0 = 0.7
    phi = time_function() * coordinate(0, 1)
    x = states()
    out = apply_a(brownian(drift=mu0), phi)(0.4, x)
    assert np.allclose(out, x[:, 0] + mu0 * 0.4, rtol=1e-12, atol=1e-12)
    fd = apply_a(brownian(drift=mu0), phi.without_derivatives())(0.4, x)
    assert np.allclose(fd, x[:, 0] + mu0 * 0.4, rtol=1e-6, atol=1e-6)


def test_generator_rejects_non_finite_values():
    bad = TestFunction(lambda t, x: np.where(x[:, 0] > 0, np.inf, 0.0))
    with pytest.raises(NonFiniteError):
        apply_a(brownian(), bad)(0.0, np.array([[1.0]]))


# --- carré du champ -------------------------------------------------------

def test_gamma_of_identity_is_alpha():
    ident = coordinate(0, 1)
    assert np.array_equal(carre_du_champ(brownian(), ident, ident)(0.0, states()), np.ones(50))


def test_gamma_with_constant_vanishes():
    out = carre_du_champ(brownian(), coordinate(0, 1) * coordinate(0, 1), constant(3.0))(0.0, states())
    assert np.array_equal(out, np.zeros(50))


def test_gamma_of_x_and_square():
    x = states()
    ident = coordinate(0, 1)
    sq = ident * ident
    by_definition = carre_du_champ(brownian(), ident.without_derivatives(), sq.without_derivatives())
    by_gradients = gradient_form(brownian(), ident, sq)
    assert np.allclose(by_definition(0.0, x), 2 * x[:, 0], rtol=1e-6, atol=1e-6)
    assert np.allclose(by_gradients(0.0, x), 2 * x[:, 0], rtol=1e-12)


coef = st.floats(-2.0, 2.0, allow_nan=False, allow_infinity=False)


@settings(max_examples=20, deadline=None, derandomize=True)
@given(st.lists(coef, min_size=16, max_size=16), st.integers(0, 10_000))
def test_gamma_matches_gradient_form(c, seed):
    dim = 2
    p1 = poly(c[0], c[1:3], np.reshape(c[3:7], (2, 2)), c[7], dim)
    p2 = poly(c[8], c[9:11], np.reshape(c[11:15], (2, 2)), c[15], dim)
    model = smooth_model(dim, 1.0, 0.5, seed)
    r = np.random.default_rng(seed)
    x = r.uniform(-2, 2, size=(100, dim))
    t = float(r.uniform(0, 1))
    lhs = carre_du_champ(model, p1, p2)(t, x)
    rhs = gradient_form(model, p1, p2)(t, x)
    assert np.all(np.abs(lhs - rhs) <= 1e-6 * np.maximum(1.0, np.abs(rhs)))


@settings(max_examples=10, deadline=None, derandomize=True)
@given(st.lists(coef, min_size=16, max_size=16))
def test_gamma_by_finite_differences(c):
    # second differences of products lose about five digits to rounding
    p1 = poly(c[0], c[1:3], np.reshape(c[3:7], (2, 2)), c[7], 2)
    p2 = poly(c[8], c[9:11], np.reshape(c[11:15], (2, 2)), c[15], 2)
    model = smooth_model(2, 1.0, 0.5, 5)
    x = states(100, 2, 5)
    lhs = carre_du_champ(model, p1.without_derivatives(), p2.without_derivatives())(0.5, x)
    rhs = gradient_form(model, p1, p2)(0.5, x)
    assert np.all(np.abs(lhs - rhs) <= 1e-4 * np.maximum(1.0, np.abs(rhs)))


@settings(max_examples=20, deadline=None, derandomize=True)
@given(coef, coef, st.lists(coef, min_size=24, max_size=24))
def test_gamma_is_bilinear(a, b, c):
    dim = 2
    p1 = poly(c[0], c[1:3], np.reshape(c[3:7], (2, 2)), c[7], dim)
    p2 = poly(c[8], c[9:11], np.reshape(c[11:15], (2, 2)), c[15], dim)
    p3 = poly(c[16], c[17:19], np.reshape(c[19:23], (2, 2)), c[23], dim)
    model = smooth_model(dim, 0.5, 0.5, 3)
    x = states(100, dim, 7)
    combo = linear_combination([(a, p1), (b, p2)])
    lhs = carre_du_champ(model, combo, p3)(0.2, x)
    rhs = a * carre_du_champ(model, p1, p3)(0.2, x) + b * carre_du_champ(model, p2, p3)(0.2, x)
    assert np.allclose(lhs, rhs, rtol=1e-10, atol=1e-10)


@settings(max_examples=20, deadline=None, derandomize=True)
@given(st.lists(coef, min_size=8, max_size=8))
def test_finite_differences_match_analytic_derivatives(c):
    dim = 2
    p = poly(c[0], c[1:3], np.reshape(c[3:7], (2, 2)), c[7], dim)
    q = p.without_derivatives()
    x = states(100, dim, 11)
    for exact, approx in ((p.time_derivative, q.time_derivative), (p.gradient, q.gradient),
                          (p.hessian, q.hessian)):
        e, f = exact(0.6, x), approx(0.6, x)
        assert np.all(np.abs(e - f) <= 1e-6 * np.maximum(1.0, np.abs(e)))


# --- psi-gradient ---------------------------------------------------------

def test_gamma_psi_of_constant_is_zero():
    psi = PsiSystem.identity(brownian(2))
    assert np.array_equal(gamma_psi(brownian(2), psi, constant(1.5))(0.0, states(dim=2)),
                          np.zeros((50, 2)))


def test_gamma_psi_of_identity_with_variance_two():
    model = brownian(variance=2.0)
    out = gamma_psi(model, PsiSystem.identity(model), coordinate(0, 1).without_derivatives())
    assert np.allclose(out(0.0, states()), 2.0, rtol=1e-6)


def test_gamma_psi_of_square():
    x = states()
    sq = (coordinate(0, 1) * coordinate(0, 1)).without_derivatives()
    out = gamma_psi(brownian(), PsiSystem.identity(brownian()), sq)(0.0, x)
    assert np.allclose(out[:, 0], 2 * x[:, 0], rtol=1e-6, atol=1e-6)


@settings(max_examples=20, deadline=None, derandomize=True)
@given(st.lists(coef, min_size=8, max_size=8), st.integers(0, 1000))
def test_gamma_psi_is_alpha_gradient(c, seed):
    dim = 2
    p = poly(c[0], c[1:3], np.reshape(c[3:7], (2, 2)), c[7], dim)
    model = smooth_model(dim, 1.0, 0.3, seed)
    x = states(100, dim, seed)
    lhs = gamma_psi(model, PsiSystem.identity(model), p)(0.1, x)
    rhs = np.einsum("nij,nj->ni", model.alpha_at(0.1, x), p.gradient(0.1, x))
    assert np.all(np.abs(lhs - rhs) <= 1e-6 * np.maximum(1.0, np.abs(rhs)))


def test_identity_psi_system_invariants():
    model = smooth_model(2, 1.0, 0.5, 4)
    psi = PsiSystem.identity(model)
    x = states(40, 2, 1)
    for i in range(2):
        assert np.array_equal(psi.a_values(0.3, x)[:, i], model.drift_at(0.3, x)[:, i])
        for j in range(2):
            g = carre_du_champ(model, psi.psi[i], psi.psi[j])(0.3, x)
            assert np.allclose(g, model.alpha_at(0.3, x)[:, i, j], rtol=1e-10, atol=1e-12)
    assert np.all(psi.gamma_psi_psi[0](0.3, x) <= psi.bracket_bound)


def test_scale_psi_system_is_bounded():
    model = DistributionalDriftModel.from_sigma(np.ones_like, lambda x: 2 * np.abs(x), (-12, 12))
    psi = PsiSystem.scale(model)
    x = np.linspace(-5, 5, 21)[:, None]
    assert np.all(psi.gamma_psi_psi[0](0.0, x) <= psi.bracket_bound)
    assert psi.psi[0].growth == "bounded"


# --- martingale problem ---------------------------------------------------

def paths(n=100_000, seed=3, model=None):
    return simulate(model or brownian(), 0.0, [0.0], TimeGrid.uniform(0, 1, 50), n, seed)


def test_identity_is_a_martingale():
    assert martingale_residual_check(paths(), brownian(), coordinate(0, 1)).max_ratio <= 3.0


def test_compensated_square_is_a_martingale():
    sq = coordinate(0, 1) * coordinate(0, 1)
    assert martingale_residual_check(paths(), brownian(), sq).max_ratio <= 3.0


def test_time_is_exactly_compensated():
    report = martingale_residual_check(paths(1000), brownian(), time_function())
    assert np.all(report.means == 0.0) and np.all(report.standard_errors == 0.0)


def test_bracket_identity_along_paths():
    ens = paths(50_000, 8)
    sq = coordinate(0, 1) * coordinate(0, 1)
    means, ses = bracket_check(ens, brownian(), PsiSystem.identity(brownian()), sq)
    assert np.all(np.abs(means) <= 3 * ses)


# --- grid functions -------------------------------------------------------

def grid_fn(method="linear"):
    times = np.linspace(0, 1, 6)
    axes = (np.linspace(-3, 3, 25),)
    return GridFunction.tabulate(lambda t, x: np.exp(-t) * np.sin(x[:, 0]), times, axes, method)


@pytest.mark.parametrize("method", ["linear", "cubic"])
def test_grid_function_exact_at_nodes(method):
    gf = grid_fn(method)
    nodes = gf.nodes()
    for k, t in enumerate(gf.times):
        assert np.array_equal(gf(t, nodes), gf.values[k])


@settings(max_examples=30, deadline=None, derandomize=True)
@given(st.floats(0, 1), st.floats(-3, 3))
def test_cubic_interpolation_error(t, x):
    gf = grid_fn("cubic")
    exact = np.exp(-t) * np.sin(x)
    # linear in time on 0.2 spacing dominates: |f_tt| h^2 / 8
    assert abs(gf(t, np.array([[x]]))[0] - exact) <= 0.2**2 / 8 + 2e-3


def test_grid_function_stencil_is_the_interpolant():
    gf = grid_fn("cubic")
    pts = np.random.default_rng(1).uniform(-3, 3, size=(40, 1))
    idx, w, _ = gf.stencil(0.37, pts)
    assert np.allclose(np.einsum("ns,ns->n", gf.values.reshape(-1)[idx], w), gf(0.37, pts))
    assert np.allclose(w.sum(axis=1), 1.0)


def test_grid_function_hull():
    gf = grid_fn()
    with pytest.raises(ExtrapolationError):
        gf(0.5, np.array([[3.5]]))
    idx, w, out = gf.stencil(0.5, np.array([[3.5], [0.0]]), outside="clamp")
    assert out.tolist() == [True, False]
    assert gf(0.5, np.array([[3.5]]), outside="clamp")[0] == gf(0.5, np.array([[3.0]]))[0]


def test_grid_function_csv_round_trip():
    gf = grid_fn("cubic")
    text = gf.to_csv()
    assert text.splitlines()[0] == "t,x_1,value" and "\r\n" in text
    back = GridFunction.from_csv(text, "cubic")
    assert np.array_equal(back.values, gf.values)
    assert np.array_equal(back.axes[0], gf.axes[0])


def test_grid_function_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        GridFunction(np.array([0.0, 1.0]), (np.array([0.0, 1.0]),), np.array([[0, 1], [np.nan, 0]]))


def test_two_dimensional_bilinear_is_exact_for_bilinear_functions():
    times = np.array([0.0, 1.0])
    axes = (np.linspace(-1, 1, 5), np.linspace(0, 2, 4))
    gf = GridFunction.tabulate(lambda t, x: 1 + t + x[:, 0] * x[:, 1], times, axes)
    pts = np.random.default_rng(2).uniform([-1, 0], [1, 2], size=(30, 2))
    assert np.allclose(gf(0.3, pts), 1.3 + pts[:, 0] * pts[:, 1], atol=1e-12)
