"""Instance generation, deterministic splits and CSV/JSON persistence.

A dataset directory holds ``manifest.json`` plus CSV files whose SHA-256 hashes
and row counts the manifest records.  Floats are written with ``repr`` which
round-trips IEEE doubles exactly.  Long trajectories are not stored: portfolio
price paths are regenerated from the recorded seed, power surrogate samples
from the surrogate configuration.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import config_hash, load_config
from .solvers import StateTrajectory, euler_maruyama

__all__ = [
    "Dataset", "DatasetManifest", "DatasetError", "generate_instances", "generate_dataset",
    "split", "split_indices", "write_dataset", "read_dataset", "portfolio_paths",
    "make_task", "MANIFEST_VERSION",
]

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    """Instances ``(zeta, u*)`` with solver metadata.

    ``extras`` holds task-specific arrays aligned with the instances: for the
    portfolio task the realized terminal prices ``y_T`` and the static targets
    ``u_static`` (optimum at the initial prices) with ``objective_static``.
    """

    task: str
    ids: np.ndarray
    zeta: np.ndarray
    u_star: np.ndarray
    objective: np.ndarray
    converged: np.ndarray
    extras: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.ids)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.task, self.ids[idx], self.zeta[idx], self.u_star[idx],
                       self.objective[idx], self.converged[idx],
                       {k: v[idx] for k, v in self.extras.items()}, dict(self.config))


@dataclass
class DatasetManifest:
    task: str
    n_instances: int
    seed: int
    split: list
    split_seed: int
    files: dict
    config_hash: str
    config: dict
    version: int = MANIFEST_VERSION

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        d = json.loads(text)
        if d.get("version") != MANIFEST_VERSION:
            raise DatasetError(f"unsupported manifest version {d.get('version')}")
        return cls(**d)


# ---------------------------------------------------------------------------
# generation

def make_task(cfg: dict):
    """Task object described by a configuration."""
    if cfg["task"] == "power":
        from .tasks.power import PowerTask, default_network
        if cfg.get("case", "case9") != "case9":
            raise DatasetError("only the bundled case9 network is available by name")
        return PowerTask(default_network(), stability_margin=cfg["stability_margin"])
    from .tasks.portfolio import PortfolioTask, make_params
    params = make_params(cfg["n_assets"], cfg["seed"], cfg["horizon"], cfg["dt"], cfg["risk_scale"])
    return PortfolioTask(params)


def generate_instances(task: str, n: int, seed: int, config: dict | None = None) -> dict:
    """Problem parameters for ``n`` instances (deterministic in ``seed``).

    Power: complex loads, each load scaled by ``U(load_low, load_high)``.
    Portfolio: log-normal initial prices (market parameters come from ``seed``).
    """
    if n < 1:
        raise DatasetError("need at least one instance")
    cfg = load_config(config or {}, task=task, seed=seed)
    rng = np.random.default_rng([seed, 1])
    if task == "power":
        from .tasks.power import perturb_loads
        tk = make_task(cfg)
        S = perturb_loads(tk.net, n, rng, cfg["load_low"], cfg["load_high"])
        return {"task": tk, "loads": S, "zeta": tk.zeta_from_loads(S), "config": cfg}
    from .tasks.portfolio import sample_initial_prices
    tk = make_task(cfg)
    zeta = sample_initial_prices(n, cfg["n_assets"], rng, cfg["price_median"], cfg["price_log_sd"])
    return {"task": tk, "zeta": zeta, "config": cfg}


def portfolio_paths(task, zeta: np.ndarray, seed: int) -> StateTrajectory:
    """Realized GBM price paths of every instance (regenerable from ``seed``)."""
    from .tasks.portfolio import gbm_field
    return euler_maruyama(gbm_field(task.params), zeta, task.grid, np.random.default_rng([seed, 2]))


def generate_dataset(task: str, n: int, seed: int, config: dict | None = None) -> Dataset:
    """Instances plus reference solutions; non-converged solves are dropped and logged."""
    inst = generate_instances(task, n, seed, config)
    cfg, tk, zeta = inst["config"], inst["task"], inst["zeta"]
    ids = np.arange(n)
    if task == "power":
        from .opf import solve_acopf
        net = tk.net
        _, _, warm = solve_acopf(net)
        us, objs, conv = [], [], []
        for i, S in enumerate(inst["loads"]):
            u, rep, _ = solve_acopf(net, S, warm=warm, raise_on_failure=False)
            if not rep.converged:
                log.warning("instance %d dropped: %s", i, rep.message)
            us.append(u)
            objs.append(rep.objective)
            conv.append(rep.converged)
        conv = np.array(conv, dtype=bool)
        ds = Dataset(task, ids, zeta, np.array(us), np.array(objs), conv, {}, cfg)
        return ds.subset(np.flatnonzero(conv))
    from .tasks.portfolio import solve_markowitz
    paths = portfolio_paths(tk, zeta, seed)
    yT = paths.final
    u, rep = solve_markowitz(yT, tk.params.Sigma)
    u0, rep0 = solve_markowitz(zeta, tk.params.Sigma)
    ones = np.ones(n, dtype=bool)
    return Dataset(task, ids, zeta, u, np.asarray(rep.objective), ones,
                   {"y_T": yT, "u_static": u0, "objective_static": np.asarray(rep0.objective)}, cfg)


# ---------------------------------------------------------------------------
# splits

def split_indices(n: int, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    f = np.asarray(fractions, dtype=np.float64)
    if f.shape != (3,) or np.any(f < 0) or abs(f.sum() - 1.0) > 1e-9:
        raise DatasetError("split fractions must be three nonnegative numbers summing to 1")
    perm = np.random.default_rng(seed).permutation(n)
    n_tr = int(round(f[0] * n))
    n_va = min(int(round(f[1] * n)), n - n_tr)
    return np.sort(perm[:n_tr]), np.sort(perm[n_tr:n_tr + n_va]), np.sort(perm[n_tr + n_va:])


def split(dataset: Dataset, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Disjoint, exhaustive, seed-deterministic (train, val, test) subsets."""
    return tuple(dataset.subset(i) for i in split_indices(len(dataset), fractions, seed))


# ---------------------------------------------------------------------------
# persistence

def _fmt(v) -> str:
    return repr(float(v))


def _write_csv(path: Path, header, rows) -> int:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        n = 0
        for r in rows:
            w.writerow(r)
            n += 1
    return n


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _array_rows(ids, arrays):
    for i in range(len(ids)):
        row = [str(int(ids[i]))]
        for a in arrays:
            a_i = a[i]
            if np.ndim(a_i) == 0:
                row.append(str(int(a_i)) if a.dtype == bool else _fmt(a_i))
            else:
                row.extend(_fmt(v) for v in a_i)
        yield row


def _solution_header(ds: Dataset, n_u: int):
    if ds.task == "power":
        from .tasks.power import default_network
        net = default_network()
        ng, nb = net.n_gen, net.n_bus
        return ([f"p_r_{i}" for i in range(ng)] + [f"q_r_{i}" for i in range(ng)]
                + [f"vm_{i}" for i in range(nb)] + [f"va_{i}" for i in range(nb)])
    return [f"u_{i}" for i in range(n_u)]


def write_dataset(ds: Dataset, out_dir, fractions=None, split_seed: int | None = None) -> DatasetManifest:
    """Write CSVs and a manifest; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = dict(ds.config)
    fractions = list(fractions if fractions is not None else cfg.get("split", [0.8, 0.1, 0.1]))
    split_seed = cfg.get("split_seed", 0) if split_seed is None else split_seed
    nz = ds.zeta.shape[1] if ds.zeta.ndim == 2 else 0
    nu = ds.u_star.shape[1] if ds.u_star.ndim == 2 else 0
    files = {}

    def put(name, header, arrays):
        p = out / f"{name}.csv"
        rows = _write_csv(p, ["id"] + header, _array_rows(ds.ids, arrays))
        files[name] = {"path": p.name, "rows": rows, "sha256": _sha256(p)}

    put("instances", [f"zeta_{i}" for i in range(nz)], [ds.zeta.reshape(len(ds), nz)])
    sol_cols = _solution_header(ds, nu) + ["objective"]
    arrays = [ds.u_star.reshape(len(ds), nu), ds.objective]
    if ds.task == "power":
        sol_cols.append("converged")
        arrays.append(ds.converged)
    put("solutions", sol_cols, arrays)
    if ds.task == "portfolio":
        n = nz
        put("terminal_prices", [f"y_T_{i}" for i in range(n)], [ds.extras["y_T"].reshape(len(ds), n)])
        put("static_solutions", [f"u_{i}" for i in range(n)] + ["objective"],
            [ds.extras["u_static"].reshape(len(ds), n), ds.extras["objective_static"]])
        if len(ds):
            tk = make_task(cfg)
            p = out / "params.json"
            p.write_text(tk.params.to_json())
            files["params"] = {"path": p.name, "rows": 1, "sha256": _sha256(p)}
        files["paths"] = {"regenerate": "euler_maruyama", "seed": int(cfg.get("seed", 0))}
    man = DatasetManifest(ds.task, len(ds), int(cfg.get("seed", 0)), fractions, int(split_seed),
                          files, config_hash(cfg), cfg)
    (out / "manifest.json").write_text(man.to_json())
    return man


def _read_csv(path: Path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetError(f"{path} is empty")
    return rows[0], rows[1:]


def read_dataset(path) -> tuple[Dataset, DatasetManifest]:
    """Load a dataset directory (or its manifest path), verifying hashes and row counts."""
    p = Path(path)
    mdir = p.parent if p.is_file() else p
    mpath = p if p.is_file() else p / "manifest.json"
    if not mpath.exists():
        raise DatasetError(f"no manifest at {mpath}")
    man = DatasetManifest.from_json(mpath.read_text())
    tables = {}
    for name, info in man.files.items():
        if "path" not in info:
            continue
        fp = mdir / info["path"]
        if not fp.exists():
            raise DatasetError(f"missing data file {fp}")
        if _sha256(fp) != info["sha256"]:
            raise DatasetError(f"hash mismatch for {fp}")
        if name == "params":
            continue
        header, rows = _read_csv(fp)
        if len(rows) != info["rows"] or len(rows) != man.n_instances:
            raise DatasetError(f"{fp} has {len(rows)} rows, manifest says {man.n_instances}")
        tables[name] = (header, rows)

    def block(name, n_cols=None, drop_last=0):
        header, rows = tables[name]
        ids = np.array([int(r[0]) for r in rows], dtype=np.int64)
        width = len(header) - 1 - drop_last if n_cols is None else n_cols
        vals = np.array([[float(v) for v in r[1:1 + width]] for r in rows],
                        dtype=np.float64).reshape(len(rows), width)
        return ids, vals, rows

    ids, zeta, _ = block("instances")
    sh = tables["solutions"][0]
    tail = 2 if man.task == "power" else 1
    ids2, u, rows = block("solutions", drop_last=tail)
    if not np.array_equal(ids, ids2):
        raise DatasetError("instance and solution ids do not match")
    obj = np.array([float(r[len(sh) - tail]) for r in rows], dtype=np.float64)
    conv = (np.array([r[-1] == "1" for r in rows], dtype=bool) if man.task == "power"
            else np.ones(len(rows), dtype=bool))
    extras = {}
    if man.task == "portfolio":
        _, extras["y_T"], _ = block("terminal_prices")
        _, extras["u_static"], srows = block("static_solutions", drop_last=1)
        extras["objective_static"] = np.array([float(r[-1]) for r in srows], dtype=np.float64)
    ds = Dataset(man.task, ids, zeta, u, obj, conv, extras, dict(man.config))
    return ds, man
