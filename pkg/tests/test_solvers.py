import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deop import autodiff as ad
from deop.solvers import (SolverError, StateTrajectory, TimeGrid, VectorField, euler_maruyama,
                          hermite_matrix, read_trajectory_csv, rk4_integrate, rk45_integrate,
                          write_trajectory_csv)
from deop.tasks.power import PowerTask, default_network


def linear(a, dim=1):
    return VectorField(dim, lambda t, y, c: ad.mul(a, y))


def gbm(mu, sigma, dim=1):
    return VectorField(dim, lambda t, y, c: ad.mul(mu, y), lambda t, y, c: ad.mul(sigma, y))


def test_grid_validation():
    with pytest.raises(SolverError):
        TimeGrid(0.0, 0.0, 10)
    with pytest.raises(SolverError):
        TimeGrid(0.0, 0.1, 1)
    g = TimeGrid(1.0, 0.5, 5)
    np.testing.assert_allclose(g.times, [1.0, 1.5, 2.0, 2.5, 3.0])
    assert g.t1 == 3.0 and TimeGrid.span(0, 1, 11).dt == pytest.approx(0.1)


def test_trajectory_rows_must_match_grid():
    with pytest.raises(SolverError):
        StateTrajectory(TimeGrid(0, 1, 3), np.zeros((4, 1)))


def test_y0_dimension_checked():
    with pytest.raises(SolverError):
        rk4_integrate(linear(1.0, 2), np.ones(3), TimeGrid(0, 0.1, 3))


# -- rk4 ---------------------------------------------------------------------

def test_rk4_zero_field_constant():
    tr = rk4_integrate(linear(0.0), np.array([5.0]), TimeGrid(0, 0.37, 13))
    assert np.all(tr.values == 5.0) and not tr.diverged


def test_rk4_exponential_growth():
    tr = rk4_integrate(linear(1.0), np.array([1.0]), TimeGrid.span(0, 1, 101))
    assert abs(tr.values[-1, 0] - np.e) < 1e-8


def rk4_error(n_steps):
    tr = rk4_integrate(linear(-1.0), np.array([1.0]), TimeGrid.span(0, 1, n_steps + 1))
    return abs(tr.values[-1, 0] - np.exp(-1.0))


@pytest.mark.parametrize("n", [10, 20, 40])
def test_rk4_fourth_order_convergence(n):
    assert 12 <= rk4_error(n) / rk4_error(2 * n) <= 20


def test_rk4_batch_matches_single():
    y0 = np.array([[1.0, 2.0], [-0.5, 0.3]])
    fld = VectorField(2, lambda t, y, c: ad.stack([y[..., 1], ad.neg(ad.sin(y[..., 0]))], axis=-1))
    g = TimeGrid(0, 0.05, 30)
    batch = rk4_integrate(fld, y0, g).values
    for i in range(2):
        np.testing.assert_array_equal(batch[:, i], rk4_integrate(fld, y0[i], g).values)


def test_rk4_gradient_to_initial_state():
    # y(T) = y0 e^{aT} up to the RK4 amplification factor, so dy(T)/dy0 is that factor
    g = TimeGrid(0, 0.1, 11)
    tape = ad.Tape()
    y0 = tape.param(np.array([2.0]))
    tr = rk4_integrate(linear(-0.7), y0, g, tape=tape)
    grad = tape.backward(ad.sum(tr.final))[y0]
    amp = rk4_integrate(linear(-0.7), np.array([1.0]), g).values[-1]
    np.testing.assert_allclose(grad, amp, rtol=1e-13)


def test_rk4_gradient_to_field_parameter():
    g = TimeGrid(0, 0.1, 8)

    def f(a):
        fld = VectorField(1, lambda t, y, c: ad.mul(c, y), context=a)
        return ad.sum(rk4_integrate(fld, np.array([1.5]), g).final)

    assert ad.finite_diff_check(f, np.array([0.4])) < 1e-8


def test_rk4_taped_matches_untaped():
    fld = linear(np.array([0.3, -1.1]), 2)
    g = TimeGrid(0, 0.05, 20)
    y0 = np.array([1.0, 2.0])
    tape = ad.Tape()
    assert np.array_equal(rk4_integrate(fld, y0, g, tape=tape).values,
                          rk4_integrate(fld, y0, g).values)


def test_rk4_divergence_is_flagged_and_finite():
    blow = VectorField(1, lambda t, y, c: ad.square(y))
    tr = rk4_integrate(blow, np.array([1.0]), TimeGrid(0, 0.1, 30))
    assert tr.diverged and tr.diverged_at < 30
    assert np.all(np.isfinite(tr.values))


# -- rk45 --------------------------------------------------------------------

def test_rk45_exponential_growth():
    tr = rk45_integrate(linear(1.0), np.array([1.0]), (0, 1), rtol=1e-8, atol=1e-8)
    assert abs(tr.values[-1, 0] - np.e) < 1e-6


def test_rk45_zero_field_exact():
    stats = {}
    tr = rk45_integrate(linear(0.0), np.array([3.0]), (0, 2), n_points=7, stats=stats)
    assert np.all(tr.values == 3.0)


def test_rk45_dense_output_on_grid():
    g = TimeGrid.span(0, 2, 41)
    tr = rk45_integrate(linear(-1.0), np.array([1.0]), (0, 2), rtol=1e-10, atol=1e-12, grid=g)
    np.testing.assert_allclose(tr.values[:, 0], np.exp(-g.times), atol=1e-8)


def test_rk45_rejects_bad_span_and_tolerances():
    with pytest.raises(SolverError):
        rk45_integrate(linear(1.0), np.array([1.0]), (1, 0))
    with pytest.raises(SolverError):
        rk45_integrate(linear(1.0), np.array([1.0]), (0, 1), rtol=0.0)


def test_rk45_swing_agrees_with_fine_rk4():
    from deop.opf import solve_acopf
    task = PowerTask(default_network())
    u = solve_acopf(task.net)[0][None]
    y0, E = task.initial_state(u)
    # kick the rotor so the trajectory is not a fixed point
    y0 = y0.copy()
    y0[..., 1] += 2e-3
    fld = task.reference_field(u, E=E)
    grid = TimeGrid.span(0, 0.5, 51)
    fine = rk4_integrate(fld, y0, TimeGrid.span(0, 0.5, 5001)).values[::100]
    adaptive = rk45_integrate(fld, y0, (0, 0.5), rtol=1e-9, atol=1e-11, grid=grid).values
    assert np.max(np.abs(fine - adaptive)) < 1e-4


# -- euler-maruyama ----------------------------------------------------------

def test_em_zero_diffusion_is_explicit_euler():
    g = TimeGrid(0, 0.1, 11)
    tr = euler_maruyama(gbm(0.5, 0.0), np.array([2.0]), g, rng=0)
    np.testing.assert_allclose(tr.values[:, 0], 2.0 * 1.05 ** np.arange(11), rtol=1e-14)


def test_em_gbm_mean_within_three_standard_errors():
    # 1000 steps keep the discretization bias (about 0.2 SE) well inside the band
    g = TimeGrid.span(0, 1, 1001)
    tr = euler_maruyama(gbm(0.75, 0.075), np.full((10_000, 1), 100.0), g, rng=123)
    yT = tr.values[-1, :, 0]
    se = yT.std(ddof=1) / np.sqrt(len(yT))
    assert abs(yT.mean() - 100 * np.exp(0.75)) < 3 * se


def test_em_same_seed_same_path():
    g = TimeGrid(0, 0.01, 50)
    a = euler_maruyama(gbm(0.2, 0.3), np.array([1.0]), g, rng=7).values
    b = euler_maruyama(gbm(0.2, 0.3), np.array([1.0]), g, rng=7).values
    assert np.array_equal(a, b)


def test_em_requires_diffusion():
    with pytest.raises(SolverError):
        euler_maruyama(linear(1.0), np.array([1.0]), TimeGrid(0, 0.1, 3), rng=0)


# -- dense output, CSV -------------------------------------------------------

@settings(max_examples=20, deadline=None)
@given(st.integers(1, 6), st.integers(2, 6))
def test_hermite_reproduces_cubics(stride, n_coarse):
    c = np.array([0.3, -1.0, 0.5, 0.2])
    p = lambda t: c[0] + c[1] * t + c[2] * t ** 2 + c[3] * t ** 3  # noqa: E731
    dp = lambda t: c[1] + 2 * c[2] * t + 3 * c[3] * t ** 2  # noqa: E731
    dt_c = 0.7
    tc = dt_c * np.arange(n_coarse)
    Hy, Hf = hermite_matrix(stride, n_coarse)
    tf = dt_c / stride * np.arange(Hy.shape[0])
    np.testing.assert_allclose(Hy @ p(tc) + dt_c * Hf @ dp(tc), p(tf), atol=1e-12)


def test_trajectory_csv_roundtrip(tmp_path):
    tr = rk4_integrate(linear(np.array([0.1, -0.2]), 2), np.array([1.0, 1.0]), TimeGrid(0, 0.1, 6))
    write_trajectory_csv(tr, tmp_path / "t.csv")
    back = read_trajectory_csv(tmp_path / "t.csv")
    assert np.array_equal(back.values, tr.values) and back.grid.n_points == 6
    assert not back.diverged
