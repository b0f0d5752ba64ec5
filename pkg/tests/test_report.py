import numpy as np
import pytest

from deop.data import generate_dataset, make_task
from deop.report import EvalReport, MethodMetrics, compute_metrics, render, time_inference
from deop.tasks.portfolio import optimality_gap


@pytest.fixture(scope="module")
def portfolio():
    ds = generate_dataset("portfolio", 6, 0, {"n_assets": 3})
    return ds, make_task(ds.config)


@pytest.fixture(scope="module")
def power():
    ds = generate_dataset("power", 3, 0)
    return ds, make_task(ds.config)


def test_perfect_portfolio_predictions(portfolio):
    ds, task = portfolio
    m = compute_metrics((ds.ids, ds.u_star), ds, task, "ref").methods["ref"]
    assert m.gap_mean == 0.0 and m.mse == {"u": 0.0}
    assert m.boundary_violation == 0.0 and m.flow_violation < 1e-12


def test_perfect_power_predictions(power):
    ds, task = power
    m = compute_metrics((ds.ids, ds.u_star), ds, task, "ref").methods["ref"]
    assert m.gap_mean == 0.0 and all(v == 0.0 for v in m.mse.values())
    assert m.flow_violation < 1e-6 and m.boundary_violation < 1e-6


def test_hand_built_violations(portfolio):
    ds, task = portfolio
    one = ds.subset([0])
    u = np.array([[0.7, 0.6, -0.3]])
    m = compute_metrics((one.ids, u), one, task, "x").methods["x"]
    # budget residual 0 and one negative entry of 0.3 over 3 inequality entries
    assert m.flow_violation == pytest.approx(0.0, abs=1e-15)
    assert m.boundary_violation == pytest.approx(0.1)
    assert m.mse["u"] == pytest.approx(np.mean((u - one.u_star) ** 2))


def test_aggregation_is_mean_of_instances(portfolio):
    ds, task = portfolio
    sub = ds.subset([0, 1, 2])
    u = np.random.default_rng(0).dirichlet(np.ones(3), 3)
    total = compute_metrics((sub.ids, u), sub, task, "x").methods["x"]
    singles = [compute_metrics((sub.ids[i:i + 1], u[i:i + 1]), sub.subset([i]), task, "x")
               .methods["x"] for i in range(3)]
    assert total.gap_mean == pytest.approx(np.mean([s.gap_mean for s in singles]))
    assert total.mse["u"] == pytest.approx(np.mean([s.mse["u"] for s in singles]))
    gaps = optimality_gap(u, sub.u_star, sub.extras["y_T"], task.params.Sigma)
    assert total.gap_std == pytest.approx(np.std(gaps))


def test_ids_must_match(portfolio):
    ds, task = portfolio
    with pytest.raises(ValueError):
        compute_metrics((ds.ids[::-1], ds.u_star), ds, task)


def test_metrics_validation():
    with pytest.raises(ValueError):
        MethodMetrics("x", 1, stability_fraction=1.5)
    with pytest.raises(ValueError):
        MethodMetrics("x", 1, inference_time=-1.0)


def test_report_json_roundtrip_and_merge(tmp_path, portfolio):
    ds, task = portfolio
    rep = compute_metrics((ds.ids, ds.u_star), ds, task, "a")
    rep.merge(compute_metrics((ds.ids, ds.extras["u_static"]), ds, task, "b"))
    rep.save(tmp_path / "r.json")
    back = EvalReport.load(tmp_path / "r.json")
    assert back.methods == rep.methods and back.task == "portfolio"
    with pytest.raises(ValueError):
        rep.merge(EvalReport("power"))


def test_render_formats(portfolio):
    ds, task = portfolio
    rep = compute_metrics((ds.ids, ds.u_star), ds, task, "ref")
    table = render(rep, "table")
    assert table.startswith("task: portfolio") and "ref" in table
    csv_text = render(rep, "csv").splitlines()
    assert csv_text[0].startswith("method,stability_fraction") and len(csv_text) == 2
    with pytest.raises(ValueError):
        render(rep, "xml")


def test_time_inference_counts_calls():
    calls = []
    t = time_inference(lambda x: calls.append(x), 0, repeats=5, warmup=2)
    assert len(calls) == 7 and t >= 0
