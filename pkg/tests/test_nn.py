import json

import numpy as np
import pytest

from deop import autodiff as ad
from deop.nn import (MlpParams, OptimizerState, TrainingAborted, adam, load_checkpoint,
                     mlp_forward, mlp_init, mlp_init_stack, optimizer_step, save_checkpoint, sgd)


def test_init_generator_surrogate_architecture():
    p = mlp_init([4, 200, 200, 2], 1)
    assert p.sizes == [4, 200, 200, 2]
    assert [W.shape for W in p.weights] == [(200, 4), (200, 200), (2, 200)]


def test_init_proxy_architecture():
    p = mlp_init([6] + [200] * 5 + [24], 7)
    assert len(p.weights) == 6 and p.out_dim == 24


def test_init_bounds_and_zero_bias():
    p = mlp_init([9, 30, 3], 0)
    for W, b in p.layers():
        assert np.abs(W).max() <= 1 / np.sqrt(W.shape[1])
        assert not b.any()


def test_init_deterministic():
    a, b = mlp_init([3, 8, 2], 5), mlp_init([3, 8, 2], 5)
    assert all(np.array_equal(x, y) for x, y in zip(a.arrays(), b.arrays()))
    c = mlp_init([3, 8, 2], 6)
    assert not np.array_equal(a.weights[0], c.weights[0])


@pytest.mark.parametrize("sizes", [[], [3], [3, 0, 2], [-1, 2]])
def test_init_rejects_bad_sizes(sizes):
    with pytest.raises(ValueError):
        mlp_init(sizes, 0)


def test_params_must_chain_and_be_finite():
    with pytest.raises(ValueError, match="chain"):
        MlpParams([np.ones((4, 3)), np.ones((2, 5))], [np.zeros(4), np.zeros(2)])
    with pytest.raises(ValueError, match="non-finite"):
        MlpParams([np.full((2, 2), np.nan)], [np.zeros(2)])


def test_forward_zero_params_gives_zero():
    p = mlp_init([3, 5, 2], 0).with_arrays([np.zeros((5, 3)), np.zeros(5),
                                            np.zeros((2, 5)), np.zeros(2)])
    assert not mlp_forward(p, np.array([1.0, -2.0, 3.0])).any()


def test_forward_identity_layer():
    p = MlpParams([np.eye(3)], [np.zeros(3)])
    x = np.array([0.5, -1.5, 2.0])
    np.testing.assert_array_equal(mlp_forward(p, x), x)


def test_forward_with_and_without_tape_bitwise():
    p = mlp_init([4, 16, 16, 3], 2)
    x = np.random.default_rng(0).standard_normal((7, 4))
    tape = ad.Tape()
    assert np.array_equal(mlp_forward(p, x), mlp_forward(p, x, tape).value)


def test_forward_matches_manual_relu_network():
    p = mlp_init([2, 4, 1], 3)
    x = np.array([[0.3, -0.8]])
    h = np.maximum(x @ p.weights[0].T + p.biases[0], 0)
    np.testing.assert_allclose(mlp_forward(p, x), h @ p.weights[1].T + p.biases[1], rtol=1e-15)


def test_forward_dimension_mismatch():
    with pytest.raises(ad.ShapeError):
        mlp_forward(mlp_init([3, 2], 0), np.ones(4))


def test_stacked_forward_equals_individual_networks():
    stack = mlp_init_stack([3, 8, 2], [1, 2])
    x = np.random.default_rng(1).standard_normal((2, 5, 3))
    out = mlp_forward(stack, x)
    for g, net in enumerate(stack.unstack()):
        np.testing.assert_allclose(out[g], mlp_forward(net, x[g]), rtol=1e-14)


def test_sgd_step():
    out = optimizer_step([np.array(0.0)], [np.array(1.0)], sgd(0.1))
    assert out[0] == pytest.approx(-0.1)


def test_adam_first_step_moves_by_lr():
    rng = np.random.default_rng(0)
    g = rng.standard_normal(20) * 10 ** rng.uniform(-3, 3, 20)
    p0 = np.zeros(20)
    p1 = optimizer_step([p0], [g], adam(1e-3))[0]
    np.testing.assert_allclose(np.abs(p1 - p0), 1e-3, rtol=1e-2)
    assert np.all(np.sign(p1) == -np.sign(g))


def test_zero_gradient_leaves_params():
    p = mlp_init([3, 4, 2], 0)
    for state in (sgd(0.1), adam(0.1)):
        q = optimizer_step(p, [np.zeros_like(a) for a in p.arrays()], state)
        assert all(np.array_equal(a, b) for a, b in zip(p.arrays(), q.arrays()))


def test_nonfinite_gradient_aborts():
    with pytest.raises(TrainingAborted):
        optimizer_step([np.zeros(2)], [np.array([1.0, np.inf])], adam())


def test_gradient_shape_mismatch():
    with pytest.raises(ValueError):
        optimizer_step([np.zeros(2)], [np.zeros(3)], adam())


def test_optimizer_state_validation():
    with pytest.raises(ValueError):
        OptimizerState("rmsprop")
    with pytest.raises(ValueError):
        sgd(0.0)


def test_optimizer_step_deterministic():
    p = mlp_init([3, 4, 2], 0)
    g = [np.full_like(a, 0.3) for a in p.arrays()]
    s1, s2 = adam(), adam()
    a = optimizer_step(optimizer_step(p, g, s1), g, s1)
    b = optimizer_step(optimizer_step(p, g, s2), g, s2)
    assert all(np.array_equal(x, y) for x, y in zip(a.arrays(), b.arrays()))
    assert s1.step == 2


def test_adam_fits_a_line():
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, (50, 1))
    y = 2 * x + 1
    p = mlp_init([1, 16, 1], 0)
    state = adam(1e-3)
    for _ in range(2000):
        tape = ad.Tape()
        err = ad.sub(mlp_forward(p, x, tape), y)
        loss = ad.mean(ad.square(err))
        p = optimizer_step(p, p.grads(tape.backward(loss), tape), state)
    assert np.mean((mlp_forward(p, x) - y) ** 2) < 1e-3


def test_checkpoint_roundtrip_bitwise(tmp_path):
    p = mlp_init([3, 7, 2], 11)
    p.metadata["note"] = "proxy"
    save_checkpoint(p, tmp_path / "m.json")
    q = load_checkpoint(tmp_path / "m.json")
    assert q.seed == 11 and q.metadata == {"note": "proxy"}
    assert all(np.array_equal(a, b) for a, b in zip(p.arrays(), q.arrays()))
    stack = mlp_init_stack([3, 4, 1], [1, 2])
    save_checkpoint(stack, tmp_path / "s.json")
    assert load_checkpoint(tmp_path / "s.json").stacked


def test_checkpoint_rejects_foreign_file(tmp_path):
    (tmp_path / "x.json").write_text(json.dumps({"format": "other"}))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x.json")
