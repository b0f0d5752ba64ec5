import json

import numpy as np
import pytest

from deop.config import load_config
from deop.data import (DatasetError, generate_dataset, generate_instances, make_task,
                       portfolio_paths, read_dataset, split, split_indices, write_dataset)


@pytest.fixture(scope="module")
def portfolio_ds():
    return generate_dataset("portfolio", 100, 3, {"n_assets": 4})


def test_power_instances_within_load_band():
    inst = generate_instances("power", 3, 5)
    net = inst["task"].net
    S0 = net.pd + 1j * net.qd
    idx = net.load_buses
    ratio = inst["loads"][:, idx].real / S0[idx].real
    assert inst["loads"].shape == (3, 9)
    assert np.all((ratio >= 0.8) & (ratio <= 1.2))


def test_portfolio_drifts_in_range():
    task = make_task(load_config(task="portfolio"))
    mu_T = task.params.mu * task.params.T
    assert np.all((mu_T >= 0.5) & (mu_T <= 1.0))


@pytest.mark.parametrize("task", ["power", "portfolio"])
def test_instances_deterministic(task):
    a, b = generate_instances(task, 4, 11), generate_instances(task, 4, 11)
    assert np.array_equal(a["zeta"], b["zeta"])
    assert not np.array_equal(a["zeta"], generate_instances(task, 4, 12)["zeta"])


def test_instance_count_validated():
    with pytest.raises(DatasetError):
        generate_instances("power", 0, 0)


def test_power_dataset_solutions_converged():
    ds = generate_dataset("power", 4, 0)
    task = make_task(ds.config)
    h, _ = task.static_residuals(ds.u_star, ds.zeta)
    assert len(ds) == 4 and ds.converged.all()
    assert max(np.abs(v).max() for v in h.values()) < 1e-5


def test_portfolio_dataset_targets(portfolio_ds):
    ds = portfolio_ds
    np.testing.assert_allclose(ds.u_star.sum(axis=1), 1.0, atol=1e-12)
    paths = portfolio_paths(make_task(ds.config), ds.zeta, ds.config["seed"])
    assert np.array_equal(paths.final, ds.extras["y_T"])
    np.testing.assert_array_equal(paths.values[0], ds.zeta)


def test_split_sizes():
    tr, va, te = split_indices(10, (0.8, 0.1, 0.1), 0)
    assert (len(tr), len(va), len(te)) == (8, 1, 1)


def test_split_is_a_partition():
    parts = split_indices(137, (0.7, 0.2, 0.1), 4)
    joined = np.concatenate(parts)
    assert np.array_equal(np.sort(joined), np.arange(137))


def test_split_deterministic(portfolio_ds):
    a, b = split(portfolio_ds, seed=9), split(portfolio_ds, seed=9)
    assert all(np.array_equal(x.ids, y.ids) for x, y in zip(a, b))


def test_split_fractions_validated():
    with pytest.raises(DatasetError):
        split_indices(10, (0.5, 0.5, 0.5))


def test_roundtrip_bitwise(tmp_path, portfolio_ds):
    write_dataset(portfolio_ds, tmp_path / "d")
    back, man = read_dataset(tmp_path / "d")
    assert man.n_instances == 100 and man.task == "portfolio"
    for k in ("ids", "zeta", "u_star", "objective", "converged"):
        assert np.array_equal(getattr(back, k), getattr(portfolio_ds, k))
    for k, v in portfolio_ds.extras.items():
        assert np.array_equal(back.extras[k], v)
    assert back.config == portfolio_ds.config


def test_power_roundtrip(tmp_path):
    ds = generate_dataset("power", 3, 1)
    write_dataset(ds, tmp_path / "p")
    back, _ = read_dataset(tmp_path / "p" / "manifest.json")
    assert np.array_equal(back.u_star, ds.u_star) and back.converged.all()


def test_empty_dataset_roundtrip(tmp_path, portfolio_ds):
    empty = portfolio_ds.subset([])
    write_dataset(empty, tmp_path / "e")
    back, man = read_dataset(tmp_path / "e")
    assert len(back) == 0 and man.n_instances == 0


def test_corrupted_row_count_rejected(tmp_path, portfolio_ds):
    write_dataset(portfolio_ds, tmp_path / "d")
    mpath = tmp_path / "d" / "manifest.json"
    man = json.loads(mpath.read_text())
    man["n_instances"] = 99
    mpath.write_text(json.dumps(man))
    with pytest.raises(DatasetError, match="rows"):
        read_dataset(tmp_path / "d")


def test_tampered_file_rejected(tmp_path, portfolio_ds):
    write_dataset(portfolio_ds, tmp_path / "d")
    with open(tmp_path / "d" / "solutions.csv", "a") as fh:
        fh.write("999,0,0,0,0,0\n")
    with pytest.raises(DatasetError, match="hash"):
        read_dataset(tmp_path / "d")


def test_missing_manifest(tmp_path):
    with pytest.raises(DatasetError):
        read_dataset(tmp_path)
