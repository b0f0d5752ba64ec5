"""End-to-end orchestration shared by the CLI and the acceptance suite."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, make_task, portfolio_paths, split_indices
from .nn import mlp_init, mlp_init_stack, params_from_dict, params_to_dict
from .report import EvalReport, compute_metrics, time_inference
from .surrogate import (SurrogateConfig, SurrogateData, SurrogateModel, build_surrogate_dataset,
                        load_surrogate, sample_near_optimal_inputs, save_surrogate, stack_samples,
                        train_surrogate)
from .trainer import (Multipliers, PortfolioPipeline, PowerPipeline, ProxyModel, TrainConfig,
                      train_baseline, train_deop)

__all__ = [
    "surrogate_bounds", "build_surrogate", "make_proxy", "TrainedModel", "train_model",
    "predict", "evaluate", "save_model", "load_model", "split_dataset", "METHODS",
]

log = logging.getLogger(__name__)

METHODS = ("deop", "ld", "mse")
MODEL_FORMAT = "deop-model"


def split_dataset(ds: Dataset, cfg: dict):
    return tuple(ds.subset(i) for i in split_indices(len(ds), cfg["split"], cfg["split_seed"]))


# ---------------------------------------------------------------------------
# surrogates

def surrogate_bounds(task, u_star: np.ndarray, margin: float = 0.5) -> np.ndarray:
    """Sampling box around the optimal decisions: their envelope widened by
    ``margin`` times its width (plus 0.01) on each side, clipped to the bounds."""
    lo, hi = u_star.min(axis=0), u_star.max(axis=0)
    w = hi - lo
    lb, ub = task.net.u_bounds()
    return np.c_[np.maximum(lo - margin * w - 0.01, lb), np.minimum(hi + margin * w + 0.01, ub)]


def build_surrogate(task, full: Dataset, train_idx, cfg: dict):
    """Hot-start surrogate trained on reference trajectories.

    Returns ``(model, history, heldout)`` where ``heldout`` is a
    :class:`SurrogateData` not used for training.
    """
    width, depth = cfg["surrogate_width"], cfg["surrogate_depth"]
    scfg = SurrogateConfig(lr=cfg["surrogate_lr"], epochs=cfg["surrogate_epochs"],
                           batch_size=cfg["surrogate_batch"], n_start=cfg["n_start"],
                           curriculum_fraction=cfg["curriculum_fraction"],
                           seed=cfg["surrogate_seed"], lr_decay=cfg["surrogate_lr_decay"])
    seed = cfg["surrogate_seed"]
    if task.name == "power":
        box = surrogate_bounds(task, full.u_star[train_idx], cfg["box_margin"])
        n = cfg["surrogate_samples"]
        n_hold = max(10, n // 10)
        X = sample_near_optimal_inputs(box, n + n_hold, np.random.default_rng([seed, 7]))
        data = stack_samples(build_surrogate_dataset(task, X, "rk45", rtol=cfg["rk45_rtol"]), 2)
        train, held = data.subset(np.arange(n)), data.subset(np.arange(n, n + n_hold))
        G = task.net.n_gen
        net = mlp_init_stack([5] + [width] * depth + [2], [seed * 100 + g for g in range(G)])
        model = SurrogateModel(net, 2, task.grid, 3, solver_stride=cfg["solver_stride"],
                               metadata={"task": "power", "box": box.tolist()})
    else:
        paths = portfolio_paths(task, full.zeta, cfg["seed"])
        R = np.asarray(paths.values) / full.zeta
        n_a = task.n_u
        idx = np.asarray(train_idx)
        n_hold = max(1, len(idx) // 10)
        data = SurrogateData(np.ones((len(idx), n_a)), np.zeros((len(idx), 0)), R[:, idx],
                             task.grid, np.zeros(len(idx), dtype=bool))
        train, held = data.subset(np.arange(n_hold, len(idx))), data.subset(np.arange(n_hold))
        drift = mlp_init([n_a, n_a], seed * 100)
        diff = mlp_init([n_a] + [cfg["diffusion_width"]] * 2 + [n_a], seed * 100 + 1)
        model = SurrogateModel(drift, n_a, task.grid, 0, diff, metadata={"task": "portfolio"})
    model, hist = train_surrogate(model, train, scfg, validation=held)
    return model, hist, held


# ---------------------------------------------------------------------------
# proxies

def make_proxy(task, method: str, train: Dataset, cfg: dict, features: np.ndarray | None = None,
               seed: int | None = None) -> ProxyModel:
    """Proxy network with input normalization from ``features`` (default ``zeta``)."""
    x = train.zeta if features is None else features
    seed = cfg["train_seed"] if seed is None else seed
    sizes = [x.shape[1]] + [cfg["proxy_width"]] * cfg["proxy_depth"] + [task.n_u]
    net = mlp_init(sizes, seed)
    targets = train.u_star if (task.name == "power" or method == "deop") \
        else train.extras["u_static"]
    shift, scale = targets.mean(axis=0), targets.std(axis=0) + 1e-3
    in_scale = np.maximum(x.std(axis=0), 1e-8)
    if task.name == "power":
        lb, ub = task.net.u_bounds()
        low, high = lb.copy(), ub.copy()
        va = task.net.slices["va"]
        low[va] = np.nan
        high[va] = np.nan
        return ProxyModel(net, x.mean(axis=0), in_scale, low, high, shift, scale)
    return ProxyModel(net, x.mean(axis=0), in_scale, None, None, shift, scale)


def _proxy_to_dict(p: ProxyModel) -> dict:
    return {"net": params_to_dict(p.net), "in_shift": p.in_shift.tolist(),
            "in_scale": p.in_scale.tolist(),
            "low": [None if not np.isfinite(v) else float(v) for v in p.low],
            "high": [None if not np.isfinite(v) else float(v) for v in p.high],
            "out_shift": p.out_shift.tolist(), "out_scale": p.out_scale.tolist()}


def _proxy_from_dict(d: dict) -> ProxyModel:
    f = lambda a: np.array([np.nan if v is None else v for v in a], dtype=np.float64)  # noqa: E731
    return ProxyModel(params_from_dict(d["net"]), np.array(d["in_shift"]), np.array(d["in_scale"]),
                      f(d["low"]), f(d["high"]), np.array(d["out_shift"]), np.array(d["out_scale"]))


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainedModel:
    task: str
    method: str
    proxy: ProxyModel
    surrogate: SurrogateModel | None = None
    multipliers: Multipliers | None = None
    history: list = field(default_factory=list)
    settings: dict = field(default_factory=dict)


def _train_config(cfg: dict, method: str) -> TrainConfig:
    rho_groups, lam0 = {}, {}
    if method == "deop":
        rho_groups["dynamics"] = cfg["rho_dynamics"]
        lam0["dynamics"] = cfg["lambda_dynamics"]
    return TrainConfig(lr=cfg["lr"], rho=cfg["rho"], epochs=cfg["epochs"],
                       batch_size=cfg["batch_size"], period=cfg["period"], seed=cfg["train_seed"],
                       aggregation=cfg["aggregation"], lr_surrogate=cfg["lr_surrogate"],
                       train_surrogate=cfg["train_surrogate"], rho_groups=rho_groups,
                       lambda_init=lam0, lr_decay=cfg["lr_decay"])


def _pipeline(task, proxy, surrogate, settings):
    if task.name == "power":
        return PowerPipeline(task, proxy, surrogate)
    return PortfolioPipeline(task, proxy, surrogate, settings.get("n_paths", 16),
                             settings.get("noise_seed", 0))


def train_model(method: str, task, train: Dataset, cfg: dict,
                surrogate: SurrogateModel | None = None, callback=None) -> TrainedModel:
    """Train ``deop`` (needs a surrogate), ``ld`` (static dual ascent) or ``mse``."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    tcfg = _train_config(cfg, method)
    if method == "deop":
        if surrogate is None:
            raise ValueError("DE-OP training needs a pre-trained surrogate")
        settings = {"n_paths": cfg.get("n_paths", 16), "noise_seed": cfg.get("noise_seed", 0)}
        pipe = _pipeline(task, None, surrogate, settings)
        features = pipe.features(train.zeta)
        pipe.proxy = make_proxy(task, method, train, cfg, features)
        pipe, mult, hist = train_deop((train.zeta, train.u_star), pipe, tcfg, callback=callback)
        return TrainedModel(task.name, method, pipe.proxy, pipe.surrogate, mult, hist, settings)
    targets = train.u_star if task.name == "power" else train.extras["u_static"]
    proxy = make_proxy(task, method, train, cfg)
    kind = "ld_static" if method == "ld" else "mse"
    proxy, mult, hist = train_baseline((train.zeta, targets), proxy, task, tcfg, kind)
    return TrainedModel(task.name, method, proxy, None, mult, hist, {})


def predict(model: TrainedModel, task, zeta: np.ndarray) -> np.ndarray:
    """Decisions for ``zeta``; portfolio outputs are projected onto the simplex."""
    zeta = np.atleast_2d(zeta)
    if model.method == "deop":
        return _pipeline(task, model.proxy, model.surrogate, model.settings).predict(zeta)
    u = np.asarray(model.proxy(zeta))
    if task.name == "portfolio":
        from .tasks.portfolio import project_simplex
        return project_simplex(u)
    return u


def evaluate(models, task, test: Dataset, repeats: int = 100, warmup: int = 10) -> EvalReport:
    rep = EvalReport(task.name, meta={"n_test": len(test)})
    for m in models:
        u = predict(m, task, test.zeta)
        t = time_inference(lambda z: predict(m, task, z), test.zeta[:1], repeats, warmup) \
            if repeats else 0.0
        rep.merge(compute_metrics((test.ids, u), test, task, m.method, t))
    return rep


# ---------------------------------------------------------------------------
# persistence

def save_model(model: TrainedModel, path) -> None:
    d = {"format": MODEL_FORMAT, "version": 1, "task": model.task, "method": model.method,
         "proxy": _proxy_to_dict(model.proxy), "settings": model.settings,
         "surrogate": None, "multipliers": None}
    if model.surrogate is not None:
        tmp = Path(str(path) + ".surrogate.tmp")
        save_surrogate(model.surrogate, tmp)
        d["surrogate"] = json.loads(tmp.read_text())
        tmp.unlink()
    if model.multipliers is not None:
        m = model.multipliers
        d["multipliers"] = {"h_names": m.h_names, "g_names": m.g_names,
                            "lam_h": m.lam_h.tolist(), "lam_g": m.lam_g.tolist(), "rho": m.rho,
                            "rho_groups": m.rho_groups}
    Path(path).write_text(json.dumps(d, sort_keys=True))


def load_model(path) -> TrainedModel:
    d = json.loads(Path(path).read_text())
    if d.get("format") != MODEL_FORMAT:
        raise ValueError(f"{path} is not a trained model file")
    surrogate = None
    if d["surrogate"] is not None:
        tmp = Path(str(path) + ".surrogate.tmp")
        tmp.write_text(json.dumps(d["surrogate"]))
        try:
            surrogate = load_surrogate(tmp)
        finally:
            tmp.unlink()
    mult = None
    if d["multipliers"] is not None:
        mult = Multipliers(**d["multipliers"])
    return TrainedModel(d["task"], d["method"], _proxy_from_dict(d["proxy"]), surrogate, mult,
                        [], d.get("settings", {}))


def timed(fn, *args, **kwargs):
    t = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t
