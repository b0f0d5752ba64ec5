"""Acceptance suite: each criterion prints one ``PASS``/``FAIL`` line.

Criteria 5 to 9 share two full-scale pipeline runs (one per task) built once
per session; expect the whole module to take the better part of an hour on
one core.  Run it alone with ``pytest tests/test_acceptance.py -v``.
"""
import json
import time
from pathlib import Path

import numpy as np
import pytest

from deop import autodiff as ad
from deop.cli import main as cli_main
from deop.config import load_config
from deop.data import generate_dataset, make_task, split_indices, write_dataset
from deop.pipeline import build_surrogate, evaluate, train_model
from deop.solvers import TimeGrid, VectorField, euler_maruyama, rk4_integrate, rk45_integrate
from deop.surrogate import relative_l2_error, unroll
from deop.tasks.portfolio import make_params, portfolio_objective, project_simplex, solve_markowitz
from deop.tasks.power import GeneratorParams, init_conditions, init_residuals, swing_field

from _gradcheck import PRIMITIVES, check_points, composite_losses
from _oracles import grid_markowitz, grid_projection, simplex_grid

N_FD_POINTS = 100
COMPOSITE_GRID = 12


@pytest.fixture
def announce(capsys):
    """Print one verdict line past pytest's output capture."""
    def _announce(k: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\nCRITERION {k}: {'PASS' if ok else 'FAIL'}  {detail}")
    return _announce


# ---------------------------------------------------------------------------
# 1. autodiff against central differences

def test_criterion_1_autodiff_matches_finite_differences(announce):
    t0 = time.perf_counter()
    worst = {}
    for name, (f, sampler) in PRIMITIVES.items():
        worst[name] = check_points(f, sampler, N_FD_POINTS, seed=11)[0]
    for name, (f, sampler) in composite_losses(COMPOSITE_GRID).items():
        worst[name] = check_points(f, sampler, N_FD_POINTS, seed=12)[0]
    elapsed = time.perf_counter() - t0
    name = max(worst, key=worst.get)
    ok = worst[name] < 1e-5 and elapsed < 30.0
    announce(1, ok, f"max rel err {worst[name]:.2e} ({name}) over {len(worst)} functions, "
                    f"{elapsed:.1f} s")
    assert worst[name] < 1e-5, worst
    assert elapsed < 30.0


# ---------------------------------------------------------------------------
# 2. solver orders

def _decay():
    return VectorField(1, lambda t, y, c: ad.neg(y))


def test_criterion_2_solver_orders(announce):
    ns = np.array([10, 20, 40, 80])
    errs = np.array([abs(rk4_integrate(_decay(), np.array([1.0]), TimeGrid.span(0, 1, n + 1))
                         .values[-1, 0] - np.exp(-1.0)) for n in ns])
    slope = np.polyfit(np.log(1.0 / ns), np.log(errs), 1)[0]
    tr = rk45_integrate(_decay(), np.array([1.0]), (0.0, 1.0), rtol=1e-8, atol=1e-12)
    rk45_err = abs(tr.values[-1, 0] - np.exp(-1.0))

    p = make_params(10, 0)
    field = VectorField(p.n, lambda t, y, c: ad.mul(p.mu, y), lambda t, y, c: ad.mul(p.sigma, y))
    zeta = np.full(p.n, 100.0)
    paths = euler_maruyama(field, np.tile(zeta, (10_000, 1)), TimeGrid.span(0, p.T, 1001),
                           np.random.default_rng(123))
    yT = paths.values[-1]
    se = yT.std(axis=0, ddof=1) / np.sqrt(len(yT))
    z = np.abs(yT.mean(axis=0) - zeta * np.exp(p.mu * p.T)) / se

    ok = 3.8 <= slope <= 4.2 and rk45_err < 1e-6 and np.all(z < 3)
    announce(2, ok, f"rk4 slope {slope:.3f}, rk45 err {rk45_err:.1e}, "
                    f"EM worst |mean - exact| {z.max():.2f} SE over {p.n} assets")
    assert 3.8 <= slope <= 4.2
    assert rk45_err < 1e-6
    assert np.all(z < 3)


# ---------------------------------------------------------------------------
# 3. steady-state initial conditions

def test_criterion_3_initial_conditions_are_equilibria(announce):
    rng = np.random.default_rng(3)
    n = 1000
    p, q = rng.uniform(0.0, 3.0, n), rng.uniform(-1.0, 1.0, n)
    v, th = rng.uniform(0.9, 1.1, n), rng.uniform(-np.pi / 4, np.pi / 4, n)
    xd = rng.uniform(0.05, 0.5, n)
    d, E, w = init_conditions(p, q, v, th, xd)
    r1, r2 = init_residuals(p, q, v, th, xd, d, E)
    res = max(np.abs(r1).max(), np.abs(r2).max())
    gen = GeneratorParams(M=rng.uniform(0.02, 0.2, n), D=rng.uniform(0.0, 0.1, n), P_m=p, X_d=xd)
    F = swing_field(gen, E, v, th)(0.0, np.stack([d, w], axis=-1))
    fnorm = np.linalg.norm(np.asarray(F), axis=-1).max()
    ok = res < 1e-12 and fnorm < 1e-10
    announce(3, ok, f"max residual {res:.1e}, max field norm {fnorm:.1e} over {n} points")
    assert res < 1e-12
    assert fnorm < 1e-10


# ---------------------------------------------------------------------------
# 4. Markowitz solver and simplex projection against brute force

def _segment_grid(step=1e-3):
    a = np.linspace(0.0, 1.0, int(round(1 / step)) + 1)
    return np.stack([a, 1.0 - a], axis=1)


def test_criterion_4_markowitz_against_grid_search(announce):
    rng = np.random.default_rng(4)
    grids = {2: _segment_grid(), 3: simplex_grid()}
    worst_obj, worst_proj = -np.inf, 0.0
    for k in range(100):
        n = 2 + k % 2
        A = rng.standard_normal((n, n))
        Sigma = rng.uniform(0.2, 2.0) * (A @ A.T / n + 0.1 * np.eye(n))
        y = rng.uniform(0.0, 1.5, n)
        u, _ = solve_markowitz(y, Sigma)
        ref = grid_markowitz(y, Sigma, grids[n])
        excess = float(portfolio_objective(u, y, Sigma) - portfolio_objective(ref, y, Sigma))
        worst_obj = max(worst_obj, excess)
        v = rng.normal(0.3, 1.0, n)
        worst_proj = max(worst_proj, np.abs(project_simplex(v) - grid_projection(v, grids[n])).max())
    ok = worst_obj <= 2e-3 and worst_proj <= 2e-3
    announce(4, ok, f"worst objective excess over grid {worst_obj:.1e}, "
                    f"worst projection deviation {worst_proj:.1e}")
    assert worst_obj <= 2e-3
    assert worst_proj <= 2e-3


# ---------------------------------------------------------------------------
# full-scale runs shared by criteria 5 to 9

def _full_run(name, out_dir: Path):
    t0 = time.perf_counter()
    cfg = load_config(None, task=name)
    ds = generate_dataset(name, cfg["n_instances"], cfg["seed"], cfg)
    write_dataset(ds, out_dir / "data")
    task = make_task(ds.config)
    idx = split_indices(len(ds), cfg["split"], cfg["split_seed"])
    surrogate, _, held = build_surrogate(task, ds, idx[0], cfg)
    train, test = ds.subset(idx[0]), ds.subset(idx[2])
    models = {m: train_model(m, task, train, cfg, surrogate) for m in ("ld", "deop")}
    report = evaluate(list(models.values()), task, test, repeats=10, warmup=2)
    return {"cfg": cfg, "task": task, "dataset": ds, "test": test, "surrogate": surrogate,
            "held": held, "models": models, "report": report,
            "elapsed": time.perf_counter() - t0, "dir": out_dir}


@pytest.fixture(scope="module")
def portfolio_run(tmp_path_factory):
    return _full_run("portfolio", tmp_path_factory.mktemp("portfolio"))


@pytest.fixture(scope="module")
def power_run(tmp_path_factory):
    return _full_run("power", tmp_path_factory.mktemp("power"))


def test_criterion_5_portfolio_gap(announce, portfolio_run):
    m = portfolio_run["report"].methods
    deop, ld = m["deop"].gap_mean, m["ld"].gap_mean
    t = portfolio_run["elapsed"]
    ok = deop <= 0.5 * ld and t < 15 * 60
    announce(5, ok, f"gap DE-OP {deop:.3f}% vs LD {ld:.3f}% (ratio {deop / ld:.2f}), "
                    f"{len(portfolio_run['dataset'])} instances in {t / 60:.1f} min")
    assert deop <= 0.5 * ld
    assert t < 15 * 60


def test_criterion_6_power_stability(announce, power_run):
    m = power_run["report"].methods
    deop, ld = m["deop"].stability_fraction, m["ld"].stability_fraction
    t = power_run["elapsed"]
    ok = deop < 0.02 and deop < 0.25 * ld and t < 30 * 60
    announce(6, ok, f"unstable fraction DE-OP {deop:.3f} vs LD {ld:.3f}, "
                    f"{len(power_run['dataset'])} instances in {t / 60:.1f} min")
    assert deop < 0.02
    assert deop < 0.25 * ld
    assert t < 30 * 60


def _median_time(fn, repeats=20):
    fn()
    ts = []
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t)
    return float(np.median(ts))


def test_criterion_7_surrogate_accuracy_and_speed(announce, power_run):
    model, held, task = power_run["surrogate"], power_run["held"], power_run["task"]
    # a case is stable when no machine crosses its limit
    flags = held.unstable.reshape(len(held), -1).any(axis=1)
    stable = held.subset(np.flatnonzero(~flags))
    Y, _ = unroll(model, stable.y0, stable.aug)
    Y = np.asarray(Y)
    T, N = stable.Y.shape[:2]
    err = relative_l2_error(Y.reshape(T, N, -1), stable.Y.reshape(T, N, -1))
    # per-unit speed stays near 1 and dominates the full-state norm, so the
    # rotor angle is also held to the same bound on its own
    err_delta = relative_l2_error(Y[..., :1].reshape(T, N, -1),
                                  stable.Y[..., :1].reshape(T, N, -1))

    u = power_run["test"].u_star[:1]
    y0, aug, E = task.surrogate_inputs(u)
    field = task.reference_field(u, E=E)
    g = task.grid
    rtol = power_run["cfg"]["rk45_rtol"]
    t_ref = _median_time(lambda: rk45_integrate(field, y0, (g.t0, g.t1), rtol=rtol, grid=g))
    t_sur = _median_time(lambda: unroll(model, y0, aug))
    speedup = t_ref / t_sur
    ok = err.mean() < 0.06 and err_delta.mean() < 0.06 and speedup >= 5
    announce(7, ok, f"mean relative l2 {100 * err.mean():.2f}% (rotor angle alone "
                    f"{100 * err_delta.mean():.2f}%) on {N} held-out stable cases, "
                    f"speedup {speedup:.1f}x over rk45")
    assert err.mean() < 0.06
    assert err_delta.mean() < 0.06
    assert speedup >= 5


def test_criterion_8_multipliers_monotone_and_loss_decomposes(announce, power_run,
                                                              portfolio_run):
    worst_drop, worst_gap, n_rows = 0.0, 0.0, 0
    for run in (power_run, portfolio_run):
        for model in run["models"].values():
            prev = None
            for row in model.history:
                lam = np.array(list(row["lambda_h"].values()) + list(row["lambda_g"].values()))
                if prev is not None:
                    worst_drop = max(worst_drop, float(np.max(prev - lam, initial=0.0)))
                prev = lam
                parts = row["decision_mse"] + row["penalty_h"] + row["penalty_g"]
                worst_gap = max(worst_gap, abs(row["loss"] - parts))
                n_rows += 1
    ok = worst_drop <= 0.0 and worst_gap <= 1e-12
    announce(8, ok, f"largest multiplier decrease {worst_drop:.1e}, "
                    f"largest |loss - components| {worst_gap:.1e} over {n_rows} epochs")
    assert worst_drop <= 0.0
    assert worst_gap <= 1e-12


def _files(d: Path) -> dict:
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def _short_training(workdir: Path, data: Path, name: str, config: Path) -> dict:
    workdir.mkdir()
    assert cli_main(["train-surrogate", "--task", name, "--data", str(data), "--config",
                     str(config), "--out", str(workdir / "surrogate.json")]) == 0
    for method in ("deop", "ld", "mse"):
        argv = ["train", "--method", method, "--task", name, "--data", str(data),
                "--config", str(config), "--out", str(workdir / f"{method}.json")]
        if method == "deop":
            argv += ["--surrogate", str(workdir / "surrogate.json")]
        assert cli_main(argv) == 0
    return _files(workdir)


def test_criterion_9_byte_identical_reruns(announce, power_run, portfolio_run, tmp_path):
    same_data = True
    for run in (power_run, portfolio_run):
        cfg = run["cfg"]
        again = generate_dataset(cfg["task"], cfg["n_instances"], cfg["seed"], cfg)
        write_dataset(again, tmp_path / f"{cfg['task']}-data")
        same_data &= _files(run["dir"] / "data") == _files(tmp_path / f"{cfg['task']}-data")

    # retraining at full scale would double the budget of criteria 5 and 6; a short
    # schedule exercises the same code paths (surrogate, joint and baseline training)
    short = {"surrogate_samples": 100, "surrogate_epochs": 2, "epochs": 2, "n_start": 50}
    same_train = True
    for run in (power_run, portfolio_run):
        name = run["cfg"]["task"]
        conf = tmp_path / f"{name}-short.json"
        conf.write_text(json.dumps(short))
        data = run["dir"] / "data"
        a = _short_training(tmp_path / f"{name}-a", data, name, conf)
        b = _short_training(tmp_path / f"{name}-b", data, name, conf)
        same_train &= len(a) >= 7 and a == b
    ok = bool(same_data and same_train)
    announce(9, ok, f"datasets identical: {same_data}, training artifacts identical: {same_train}")
    assert same_data
    assert same_train
