import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pseudopde import rng
from pseudopde.errors import (ConfigurationError, DomainError, NonFiniteError,
                              NonPsdDiffusionError)
from pseudopde.forward_models import (DiffusionModel, DistributionalDriftModel, MonotoneFunction,
                                      TimeGrid, estimate_kernel, sample_mean, simulate,
                                      simulate_diffusion, solve_scale_function, sqrt_psd)


def brownian_paths(n=100_000, seed=1, steps=50):
    return simulate(DiffusionModel.brownian(1), 0.0, [0.0], TimeGrid.uniform(0, 1, steps), n, seed)


# --- random numbers -------------------------------------------------------

def test_philox_known_answers():
    zero = np.zeros((1, 4), dtype=np.uint32)
    out = rng.philox4x32(zero, (0, 0))
    assert out[0].tolist() == [0x6627E8D5, 0xE169C58D, 0xBC57AC4C, 0x9B00DBD8]
    ones = np.full((1, 4), 0xFFFFFFFF, dtype=np.uint32)
    out = rng.philox4x32(ones, (0xFFFFFFFF, 0xFFFFFFFF))
    assert out[0].tolist() == [0x408F276D, 0x41C83B0E, 0xA20BC7C6, 0x6D5451FD]
    ctr = np.array([[0x243F6A88, 0x85A308D3, 0x13198A2E, 0x03707344]], dtype=np.uint32)
    key = (0xA4093822, 0x299F31D0)
    assert rng.philox4x32(ctr, key)[0].tolist() == [0xD16CFE09, 0x94FDCCEB, 0x5001E420, 0x24126EA1]


def test_normals_depend_only_on_path_index():
    whole = rng.standard_normals(7, np.arange(10), 6)
    part = rng.standard_normals(7, np.array([3, 8]), 6)
    assert np.array_equal(whole[[3, 8]], part)
    assert not np.array_equal(whole, rng.standard_normals(8, np.arange(10), 6))


def test_normals_moments():
    z = rng.standard_normals(3, np.arange(200_000), 1).ravel()
    assert abs(z.mean()) < 3 / np.sqrt(z.size)
    assert abs(z.var() - 1.0) < 0.01


# --- time grid ------------------------------------------------------------

def test_time_grid_validation():
    with pytest.raises(ConfigurationError):
        TimeGrid(np.array([0.0, 0.5, 0.5, 1.0]))
    with pytest.raises(ConfigurationError):
        TimeGrid.uniform(0.0, 1.0, 0)
    grid = TimeGrid.uniform(0.0, 1.0, 4)
    assert grid.index_of(0.5) == 2
    with pytest.raises(ConfigurationError):
        grid.index_of(0.3)


# --- diffusion simulation -------------------------------------------------

def test_deterministic_ode_limit():
    model = DiffusionModel.brownian(1, drift=1.0, variance=0.0)
    grid = TimeGrid.uniform(0.0, 1.0, 10)
    ens = simulate_diffusion(model, 0.0, [0.0], grid, 17, seed=5)
    assert np.array_equal(ens.paths[:, :, 0], np.broadcast_to(np.cumsum(np.r_[0, grid.dt]), (17, 11)))


def test_brownian_terminal_moments():
    ens = brownian_paths()
    xt = ens.paths[:, -1, 0]
    assert abs(xt.mean()) <= 3 / np.sqrt(xt.size)
    assert abs(xt.var(ddof=1) - 1.0) <= 0.02


def test_paths_frozen_before_start():
    grid = TimeGrid.uniform(0.0, 1.0, 20)
    ens = simulate(DiffusionModel.brownian(2), 0.4, [0.3, -1.0], grid, 500, 9)
    k = grid.index_of(0.4)
    assert np.all(ens.paths[:, : k + 1] == np.array([0.3, -1.0]))
    assert np.all(ens.brownian_increments[:, :k] == 0.0)


def test_simulation_is_reproducible_and_read_only():
    a, b = brownian_paths(2000, 4), brownian_paths(2000, 4)
    assert np.array_equal(a.paths, b.paths)
    with pytest.raises(ValueError):
        a.paths[0, 0, 0] = 1.0


def test_non_psd_diffusion_is_reported():
    model = DiffusionModel(1, lambda t, x: np.zeros_like(x),
                           lambda t, x: -np.ones((x.shape[0], 1, 1)))
    with pytest.raises(NonPsdDiffusionError) as info:
        simulate(model, 0.0, [0.5], TimeGrid.uniform(0, 1, 4), 10, 0)
    assert info.value.min_eigenvalue < 0


def test_sqrt_psd_tolerates_round_off_only():
    alpha = np.array([[[1.0, 1.0], [1.0, 1.0 - 1e-12]]])
    root = sqrt_psd(alpha)
    assert np.allclose(root @ root, alpha, atol=1e-6)
    with pytest.raises(NonPsdDiffusionError):
        sqrt_psd(np.array([[[1.0, 0.0], [0.0, -1e-6]]]))


@settings(max_examples=25, deadline=None)
@given(st.floats(0.1, 3.0), st.floats(-0.9, 0.9))
def test_sqrt_psd_reproduces_matrix(scale, corr):
    alpha = scale * np.array([[[1.0, corr], [corr, 1.0]]])
    root = sqrt_psd(alpha)
    assert np.allclose(root @ root, alpha, atol=1e-12)
    assert np.allclose(root, np.swapaxes(root, 1, 2))


# --- kernel estimates -----------------------------------------------------

def test_kernel_of_constant_is_exact():
    ens = brownian_paths(1000)
    assert estimate_kernel(ens, lambda x: np.ones(x.shape[0]), 1.0) == (1.0, 0.0)


def test_kernel_at_start_time_is_exact():
    grid = TimeGrid.uniform(0.0, 1.0, 10)
    ens = simulate(DiffusionModel.brownian(1), 0.3, [0.7], grid, 1000, 2)
    mean, se = estimate_kernel(ens, lambda x: np.sin(x[:, 0]), 0.3)
    assert mean == np.sin(0.7) and se == 0.0


def test_kernel_second_moment():
    mean, se = estimate_kernel(brownian_paths(), lambda x: x[:, 0] ** 2, 1.0)
    assert abs(mean - 1.0) <= 3 * se


def test_kernel_rejects_off_grid_time():
    with pytest.raises(ConfigurationError):
        estimate_kernel(brownian_paths(100), lambda x: x[:, 0], 0.333)


def test_kernel_standard_error_scaling():
    _, se1 = estimate_kernel(brownian_paths(20_000, 3), lambda x: x[:, 0], 1.0)
    _, se2 = estimate_kernel(brownian_paths(40_000, 3), lambda x: x[:, 0], 1.0)
    assert 0.6 <= se2 / se1 <= 0.85


def test_sample_mean_constant():
    assert sample_mean(np.full(10, 0.1)) == (0.1, 0.0)


# --- scale function -------------------------------------------------------

def test_scale_function_identity():
    h, shift = solve_scale_function(lambda x: np.zeros_like(x), (-4.0, 4.0), 801)
    x = np.linspace(-3.9, 3.9, 17)
    assert shift == 0.0
    assert np.allclose(h(x), x, atol=1e-12)


def test_scale_function_absolute_value():
    h, _ = solve_scale_function(lambda x: 2.0 * np.abs(x), (-8.0, 8.0), 4001)
    x = np.array([-1.0, 0.5, 2.0])
    exact = np.sign(x) * (1.0 - np.exp(-2.0 * np.abs(x))) / 2.0
    assert np.allclose(h(x), exact, atol=1e-8)
    assert h(np.array([0.0]))[0] == 0.0


def test_scale_function_linear_sigma():
    h, _ = solve_scale_function(lambda x: x, (-3.0, 3.0), 2001)
    assert abs(h(np.array([1.0]))[0] - (1.0 - np.exp(-1.0))) < 1e-8


def test_scale_function_shift_is_reported():
    h, shift = solve_scale_function(lambda x: x + 0.5, (-3.0, 3.0), 2001)
    assert shift == 0.5
    assert abs(h.derivative(np.array([0.0]))[0] - 1.0) < 1e-6


def test_scale_function_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        solve_scale_function(lambda x: np.where(x > 1, np.nan, 0.0), (-2.0, 2.0), 101)


def test_monotone_function_inverse_and_domain():
    x = np.linspace(-2, 2, 201)
    f = MonotoneFunction(x, np.tanh(x))
    pts = np.linspace(-1.9, 1.9, 13)
    assert np.allclose(f.inverse(f(pts)), pts, atol=1e-6)
    with pytest.raises(DomainError):
        f(np.array([2.5]))
    with pytest.raises(ConfigurationError):
        MonotoneFunction(x, np.cos(x))


# --- distributional drift -------------------------------------------------

def abs_model():
    return DistributionalDriftModel.from_sigma(lambda x: np.ones_like(x),
                                               lambda x: 2.0 * np.abs(x), (-12.0, 12.0))


def test_model_invariants():
    model = abs_model()
    x = np.linspace(-5, 5, 41)
    assert model.h(np.array([0.0]))[0] == 0.0
    assert np.array_equal(model.h_prime(x), np.exp(-2 * np.abs(x)))
    smooth = x[x != 0.0]  # PCHIP slopes are only accurate away from the kink of Sigma
    assert np.allclose(model.h.derivative(smooth), model.h_prime(smooth), rtol=1e-4)
    assert np.all(model.sigma_h_prime(x) >= model.c1)
    assert np.all(model.sigma_h_prime(x) <= model.C1)


def test_zero_sigma_matches_brownian():
    model = DistributionalDriftModel.from_sigma(lambda x: np.ones_like(x),
                                                lambda x: np.zeros_like(x), (-12.0, 12.0))
    grid = TimeGrid.uniform(0, 1, 20)
    a = simulate(model, 0.0, [0.2], grid, 2000, 8)
    b = simulate(DiffusionModel.brownian(1), 0.0, [0.2], grid, 2000, 8)
    assert np.allclose(a.paths, b.paths, rtol=0, atol=1e-12)


def test_scale_process_is_a_martingale():
    ens = simulate(abs_model(), 0.0, [0.0], TimeGrid.uniform(0, 1, 50), 100_000, 1)
    inc = np.diff(ens.scale_paths, axis=1)
    ratios = [abs(m) / se for m, se in map(sample_mean, inc.T)]
    assert max(ratios) <= 3.0


def test_scale_process_isometry():
    model = abs_model()
    grid = TimeGrid.uniform(0, 1, 50)
    ens = simulate(model, 0.0, [0.0], grid, 100_000, 2)
    y = ens.scale_paths
    lhs = y[:, -1].var(ddof=1)
    integral = (model.sigma_tilde(y[:, :-1]) ** 2 * grid.dt).sum(axis=1)
    mean, se = sample_mean(integral)
    # the variance estimator has its own sampling error
    se_var = np.sqrt(np.var((y[:, -1] - y[:, -1].mean()) ** 2, ddof=1) / y.shape[0])
    assert abs(lhs - mean) <= 3 * np.hypot(se, se_var)
