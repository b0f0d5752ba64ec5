"""Evaluation metrics and their JSON/table/CSV rendering."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

__all__ = ["MethodMetrics", "EvalReport", "compute_metrics", "time_inference", "render",
           "REPORT_VERSION"]

REPORT_VERSION = 1


@dataclass
class MethodMetrics:
    """Test-set metrics of one method.

    ``flow_violation`` is the mean absolute static equality residual,
    ``boundary_violation`` the mean positive part of the static inequalities.
    The optimality gap is in percent.  ``inference_time`` is seconds per instance.
    """

    method: str
    n_test: int
    stability_fraction: float = 0.0
    stability_mean: float = 0.0
    flow_violation: float = 0.0
    boundary_violation: float = 0.0
    gap_mean: float = 0.0
    gap_std: float = 0.0
    mse: dict = field(default_factory=dict)
    inference_time: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.stability_fraction <= 1.0:
            raise ValueError("stability fraction must lie in [0, 1]")
        if self.inference_time < 0:
            raise ValueError("inference time must be nonnegative")


@dataclass
class EvalReport:
    task: str
    methods: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    version: int = REPORT_VERSION

    def add(self, m: MethodMetrics) -> "EvalReport":
        self.methods[m.method] = m
        return self

    def merge(self, other: "EvalReport") -> "EvalReport":
        if other.task != self.task:
            raise ValueError("cannot merge reports of different tasks")
        for m in other.methods.values():
            self.add(m)
        return self

    def to_json(self) -> str:
        d = {"version": self.version, "task": self.task, "meta": self.meta,
             "methods": {k: asdict(v) for k, v in self.methods.items()}}
        return json.dumps(d, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        if d.get("version") != REPORT_VERSION:
            raise ValueError(f"unsupported report version {d.get('version')}")
        methods = {k: MethodMetrics(**v) for k, v in d["methods"].items()}
        return cls(d["task"], methods, d.get("meta", {}))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.from_json(Path(path).read_text())


def _groups(task) -> dict:
    if task.name == "power":
        return {k: v for k, v in task.net.slices.items()}
    return {"u": slice(0, task.n_u)}


def compute_metrics(predictions, references, task, method: str = "model",
                    inference_time: float = 0.0) -> EvalReport:
    """Metrics of predicted decisions against a reference :class:`~deop.data.Dataset`.

    ``predictions`` is ``(ids, u_hat)``; ids must match the references one to one.
    Power: stability from reference swing simulations of ``u_hat`` and the
    steady-state cost gap.  Portfolio: gap at the realized terminal prices.
    """
    ids, u_hat = predictions
    ids = np.asarray(ids)
    u_hat = np.atleast_2d(np.asarray(u_hat, dtype=np.float64))
    if ids.shape != references.ids.shape or not np.array_equal(ids, references.ids):
        raise ValueError("prediction ids do not match the reference instances")
    zeta, u_star = references.zeta, references.u_star
    h, g = task.static_residuals(u_hat, zeta)
    flow = float(np.mean(np.concatenate([np.abs(np.asarray(b)).reshape(len(ids), -1)
                                         for b in h.values()], axis=1))) if h else 0.0
    bound = float(np.mean(np.concatenate([np.maximum(np.asarray(b), 0.0).reshape(len(ids), -1)
                                          for b in g.values()], axis=1))) if g else 0.0
    mse = {k: float(np.mean((u_hat[:, s] - u_star[:, s]) ** 2)) for k, s in _groups(task).items()}
    stab_frac = stab_mean = 0.0
    if task.name == "power":
        viol = task.stability(u_hat).max(axis=1)
        stab_frac = float(np.mean(viol > 0))
        stab_mean = float(np.mean(viol))
        ref = np.asarray(task.objective(u_star))
        gap = np.abs(ref - np.asarray(task.objective(u_hat))) / np.abs(ref) * 100.0
    else:
        from .tasks.portfolio import optimality_gap
        gap = optimality_gap(u_hat, u_star, references.extras["y_T"], task.params.Sigma)
    m = MethodMetrics(method, len(ids), stab_frac, stab_mean, flow, bound,
                      float(np.mean(gap)), float(np.std(gap)), mse, float(inference_time))
    return EvalReport(task.name).add(m)


def time_inference(fn, x, repeats: int = 100, warmup: int = 10) -> float:
    """Median wall time of ``fn(x)`` over ``repeats`` calls after ``warmup`` calls."""
    for _ in range(warmup):
        fn(x)
    ts = []
    for _ in range(repeats):
        t = time.perf_counter()
        fn(x)
        ts.append(time.perf_counter() - t)
    return float(np.median(ts))


_COLUMNS = [("stability_fraction", "stab frac"), ("stability_mean", "stab vio"),
            ("flow_violation", "flow vio"), ("boundary_violation", "bound vio"),
            ("gap_mean", "gap %"), ("gap_std", "gap sd"), ("inference_time", "time s")]


def render(report: EvalReport, fmt: str = "table") -> str:
    """Plain-text table or CSV with one row per method."""
    groups = sorted({k for m in report.methods.values() for k in m.mse})
    header = ["method"] + [c for _, c in _COLUMNS] + [f"mse {g}" for g in groups]
    rows = []
    for m in report.methods.values():
        rows.append([m.method] + [getattr(m, k) for k, _ in _COLUMNS]
                    + [m.mse.get(g, float("nan")) for g in groups])
    if fmt == "csv":
        keys = ["method"] + [k for k, _ in _COLUMNS] + [f"mse_{g}" for g in groups]
        lines = [",".join(keys)]
        lines += [",".join([r[0]] + [repr(float(v)) for v in r[1:]]) for r in rows]
        return "\n".join(lines) + "\n"
    if fmt != "table":
        raise ValueError(f"unknown format {fmt!r}")
    cells = [header] + [[r[0]] + [f"{v:.4g}" for v in r[1:]] for r in rows]
    widths = [max(len(c[i]) for c in cells) for i in range(len(header))]
    out = [f"task: {report.task}"]
    for k, c in enumerate(cells):
        out.append("  ".join(s.ljust(w) for s, w in zip(c, widths)))
        if k == 0:
            out.append("  ".join("-" * w for w in widths))
    return "\n".join(out) + "\n"
