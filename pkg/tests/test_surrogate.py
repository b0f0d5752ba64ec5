import numpy as np
import pytest

from deop import autodiff as ad
from deop.nn import mlp_init, mlp_init_stack
from deop.solvers import TimeGrid, VectorField
from deop.surrogate import (SurrogateConfig, SurrogateModel, build_surrogate_dataset,
                            common_noise, load_surrogate, predict_trajectory, relative_l2_error,
                            sample_near_optimal_inputs, save_surrogate, stack_samples,
                            train_surrogate, unroll)
from deop.tasks.power import PowerTask, default_network


class LinearTask:
    """Scalar ``dy/dt = a y`` family indexed by the initial state."""

    grid = TimeGrid(0.0, 0.02, 101)

    def __init__(self, a=-1.0):
        self.a = a

    def surrogate_problem(self, x):
        x = np.atleast_2d(x)
        if np.any(x < 0):
            raise ValueError("negative start")
        return x, np.zeros((len(x), 0)), VectorField(1, lambda t, y, c: ad.mul(self.a, y))

    def surrogate_unstable(self, tr):
        return np.zeros(np.shape(tr.values)[1], dtype=bool)


def linear_data(a, n, seed=0):
    task = LinearTask(a)
    X = sample_near_optimal_inputs([(0.5, 2.0)], n, seed)
    return task, stack_samples(build_surrogate_dataset(task, X), 1)


# -- sampling and reference data ---------------------------------------------

def test_samples_within_bounds():
    X = sample_near_optimal_inputs([(0.9, 1.1), (-1, 1)], 10_000, 1)
    assert X.shape == (10_000, 2)
    assert X[:, 0].min() >= 0.9 and X[:, 0].max() <= 1.1 and X[:, 1].min() >= -1


def test_sample_voltage_bounds_example():
    X = sample_near_optimal_inputs([(0.9, 1.1)], 3, 1)
    assert X.shape == (3, 1) and np.all((X >= 0.9) & (X <= 1.1))


def test_degenerate_bounds_collapse_to_low():
    X = sample_near_optimal_inputs([(1.0 - 1e-12, 1.0)], 50, 0)
    np.testing.assert_allclose(X, 1.0, atol=1e-11)


def test_inverted_bounds_rejected():
    with pytest.raises(ValueError):
        sample_near_optimal_inputs([(1.0, 0.5)], 3, 0)


def test_reference_dataset_follows_closed_form():
    task, data = linear_data(-1.0, 5)
    t = task.grid.times
    np.testing.assert_allclose(data.Y[:, :, 0], np.exp(-t)[:, None] * data.y0[:, 0], rtol=1e-6)


def test_bad_inputs_are_skipped():
    samples = build_surrogate_dataset(LinearTask(), np.array([[1.0], [-1.0], [2.0]]))
    assert len(samples) == 2


def test_power_inputs_produce_stable_reference():
    from deop.opf import solve_acopf
    task_power = PowerTask(default_network())
    u = solve_acopf(task_power.net, 1.1 * (task_power.net.pd + 1j * task_power.net.qd))[0]
    s = build_surrogate_dataset(task_power, u[None], grid=TimeGrid(0, 1e-3, 200))
    assert not np.any(s[0].unstable)
    assert np.all(s[0].trajectory.values[..., 0] < task_power.gens.delta_max)


# -- training ----------------------------------------------------------------

def test_learns_linear_decay():
    _, data = linear_data(-1.0, 110)
    train, val = data.subset(np.arange(100)), data.subset(np.arange(100, 110))
    model = SurrogateModel(mlp_init([1, 32, 32, 1], 0), 1, LinearTask.grid)
    cfg = SurrogateConfig(lr=1e-2, epochs=25, batch_size=20, n_start=20, lr_decay=0.97)
    model, hist = train_surrogate(model, train, cfg, validation=val)
    Y, _ = unroll(model, val.y0)
    assert relative_l2_error(Y, val.Y).max() < 0.02
    assert hist[-1]["val_loss"] < hist[0]["val_loss"]


def test_curriculum_starts_at_n_start():
    task = LinearTask()
    task.grid = TimeGrid(0.0, 0.01, 400)
    X = sample_near_optimal_inputs([(0.5, 2.0)], 8, 0)
    data = stack_samples(build_surrogate_dataset(task, X), 1)
    model = SurrogateModel(mlp_init([1, 8, 1], 0), 1, task.grid)
    _, hist = train_surrogate(model, data, SurrogateConfig(epochs=4, n_start=200,
                                                           curriculum_fraction=0.5))
    assert [h["n_points"] for h in hist] == [200, 300, 400, 400]


def test_zero_epochs_returns_model_unchanged():
    _, data = linear_data(-1.0, 5)
    model = SurrogateModel(mlp_init([1, 8, 1], 0), 1, LinearTask.grid)
    out, hist = train_surrogate(model, data, SurrogateConfig(epochs=0))
    assert out is model and hist == []


def test_constant_family_gives_constant_trajectories():
    _, data = linear_data(0.0, 20)
    model = SurrogateModel(mlp_init([1, 8, 1], 0), 1, LinearTask.grid)
    model, _ = train_surrogate(model, data, SurrogateConfig(epochs=5, lr=1e-2, val_fraction=0))
    Y, _ = unroll(model, data.y0)
    # zero reference derivative makes the learned rate vanish
    assert np.max(np.abs(Y - data.y0[None])) < 1e-9


# -- unroll ------------------------------------------------------------------

def small_power_surrogate(stride=1, n_points=30):
    task = PowerTask(default_network())
    grid = TimeGrid(0.0, task.grid.dt, n_points)
    net = mlp_init_stack([5, 16, 16, 2], [1, 2, 3])
    return task, SurrogateModel(net, 2, grid, 3, solver_stride=stride,
                                rate=np.full((3, 2), 0.5), state_scale=np.full((3, 2), 0.2))


@pytest.mark.parametrize("stride", [1, 4])
def test_taped_and_numpy_unroll_agree(stride):
    task, model = small_power_surrogate(stride)
    lb, ub = task.net.u_bounds()
    u = np.random.default_rng(0).uniform(0.3, 0.7, (2, task.n_u)) * (ub - lb) + lb
    u[:, task.net.slices["va"]] = 0.05
    y0, aug, _ = task.surrogate_inputs(u)
    a, _ = unroll(model, y0, aug)
    b, _ = unroll(model, y0, aug, tape=ad.Tape())
    assert a.shape == (30, 2, 3, 2)
    np.testing.assert_allclose(b.value, a, rtol=1e-12, atol=1e-14)


def test_final_state_gradient_matches_finite_differences():
    task, model = small_power_surrogate(stride=4)
    lb, ub = task.net.u_bounds()
    u0 = (0.5 * (lb + ub))[None]
    u0[0, task.net.slices["va"]] = 0.02

    def f(u):
        tape = u.tape if isinstance(u, ad.Var) else None
        y0, aug, _ = task.surrogate_inputs(u)
        Y, _ = unroll(model, y0, aug, tape=tape)
        return ad.sum(ad.getitem(Y, -1))

    err, crossed = ad.gradient_check(f, u0)
    assert not crossed and err < 1e-3


def test_sde_unroll_requires_noise():
    model = SurrogateModel(mlp_init([2, 2], 0), 2, TimeGrid(0, 0.1, 5), 0, mlp_init([2, 4, 2], 1))
    with pytest.raises(ValueError):
        unroll(model, np.ones((1, 2)))


def test_sde_expectation_over_antithetic_paths():
    model = SurrogateModel(mlp_init([2, 2], 0), 2, TimeGrid(0, 0.1, 5), 0, mlp_init([2, 4, 2], 1))
    noise = common_noise(model, 4, seed=3, batch_shape=(1,))
    np.testing.assert_array_equal(noise[:, :2], -noise[:, 2:])
    tr = predict_trajectory(model, None, np.ones((1, 2)), noise=noise, expectation=False)
    mean = predict_trajectory(model, None, np.ones((1, 2)), noise=noise)
    np.testing.assert_allclose(mean.values, tr.values.mean(axis=1), rtol=1e-14)


def test_model_validation():
    with pytest.raises(ValueError):
        SurrogateModel(mlp_init([3, 2], 0), 2, TimeGrid(0, 0.1, 5), 0)
    with pytest.raises(ValueError):
        SurrogateModel(mlp_init([2, 2], 0), 2, TimeGrid(0, 0.1, 5), solver_stride=0)


def test_relative_l2_error_definition():
    ref = np.ones((4, 2, 1))
    pred = ref.copy()
    pred[:, 1] *= 1.1
    np.testing.assert_allclose(relative_l2_error(pred, ref), [0.0, 0.1])


def test_checkpoint_roundtrip(tmp_path):
    _, model = small_power_surrogate(stride=4)
    save_surrogate(model, tmp_path / "s.json")
    back = load_surrogate(tmp_path / "s.json")
    y0 = np.tile([[0.2, 1.0]], (1, 3, 1))
    aug = np.tile([[1.0, 0.0, 1.1]], (1, 3, 1))
    assert np.array_equal(unroll(model, y0, aug)[0], unroll(back, y0, aug)[0])
    (tmp_path / "bad.json").write_text("{}")
    with pytest.raises(ValueError):
        load_surrogate(tmp_path / "bad.json")


def test_power_sample_stability_mix_near_even():
    from deop.config import load_config
    from deop.data import generate_dataset, make_task
    from deop.pipeline import surrogate_bounds
    cfg = load_config(task="power")
    ds = generate_dataset("power", 60, 0, cfg)
    task = make_task(ds.config)
    X = sample_near_optimal_inputs(surrogate_bounds(task, ds.u_star, cfg["box_margin"]), 400, 0)
    samples = build_surrogate_dataset(task, X, solver="rk45", rtol=1e-6)
    frac = np.mean([np.any(s.unstable) for s in samples])
    assert 0.35 <= frac <= 0.65
