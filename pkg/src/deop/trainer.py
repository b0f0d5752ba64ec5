"""Primal-dual training of proxy optimizers against DE-constrained problems.

The DE-OP loss is the decision error plus multiplier-weighted violations of
the stacked equality residual ``h'`` (dynamics, initial condition, static
equalities) and of the inequalities (static and time-indexed).  Multipliers
take dual-ascent steps every ``period`` epochs.  Static baselines drop the
dynamic pieces.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .nn import MlpParams, OptimizerState, TrainingAborted, mlp_forward, optimizer_step
from .solvers import StateTrajectory, VectorField, rk4_step
from .surrogate import SurrogateModel, common_noise, predict_trajectory, unroll

__all__ = [
    "ProxyModel", "Multipliers", "TrainConfig", "LossParts", "stack_equality_residuals",
    "flatten_residuals", "deop_loss", "update_multipliers", "train_deop", "train_baseline",
    "write_history_csv", "PowerPipeline", "PortfolioPipeline", "HISTORY_COLUMNS",
    "aggregate",
]

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ["epoch", "loss", "decision_mse", "mean_h_violation", "mean_g_violation",
                   "stability_violation_fraction", "lambda_norm"]


# ---------------------------------------------------------------------------
# models and configuration

@dataclass
class ProxyModel:
    """``u = T(F(normalize(x)))`` with a per-component output transform.

    Components with finite ``low``/``high`` go through ``low + (high - low) *
    sigmoid``; the others are ``out_shift + out_scale * raw``.
    """

    net: MlpParams
    in_shift: np.ndarray
    in_scale: np.ndarray
    low: np.ndarray | None = None
    high: np.ndarray | None = None
    out_shift: np.ndarray | None = None
    out_scale: np.ndarray | None = None

    def __post_init__(self):
        n = self.net.out_dim
        self.in_shift = np.asarray(self.in_shift, dtype=np.float64)
        self.in_scale = np.asarray(self.in_scale, dtype=np.float64)
        nan = np.full(n, np.nan)
        self.low = nan.copy() if self.low is None else np.asarray(self.low, dtype=np.float64)
        self.high = nan.copy() if self.high is None else np.asarray(self.high, dtype=np.float64)
        self.out_shift = np.zeros(n) if self.out_shift is None else np.asarray(self.out_shift, float)
        self.out_scale = np.ones(n) if self.out_scale is None else np.asarray(self.out_scale, float)
        for a in (self.low, self.high, self.out_shift, self.out_scale):
            if a.shape != (n,):
                raise ValueError(f"output transform arrays must have {n} entries")
        if self.in_shift.shape[-1] != self.net.in_dim:
            raise ValueError("input normalization does not match the network input")

    @property
    def n_out(self) -> int:
        return self.net.out_dim

    @property
    def bounded(self) -> np.ndarray:
        return np.isfinite(self.low) & np.isfinite(self.high)

    def __call__(self, x, tape: ad.Tape | None = None):
        xn = ad.div(ad.sub(x, self.in_shift), self.in_scale)
        if tape is not None and not isinstance(xn, ad.Var):
            xn = tape.const(xn)
        raw = mlp_forward(self.net, xn, tape)
        b = self.bounded
        if not b.any():
            return ad.add(ad.mul(raw, self.out_scale), self.out_shift)
        lo = np.where(b, self.low, 0.0)
        width = np.where(b, self.high - self.low, 0.0)
        sig = ad.add(ad.mul(ad.sigmoid(raw), width), lo)
        lin = ad.add(ad.mul(raw, np.where(b, 0.0, self.out_scale)), np.where(b, 0.0, self.out_shift))
        return ad.where(np.broadcast_to(b, np.shape(ad.value_of(raw))), sig, lin)

    def with_net(self, net: MlpParams) -> "ProxyModel":
        return replace(self, net=net)


@dataclass
class Multipliers:
    """Nonnegative multipliers per named residual group, with dual step ``rho``.

    ``rho_groups`` overrides the step for individual groups.
    """

    h_names: list[str]
    g_names: list[str]
    lam_h: np.ndarray | None = None
    lam_g: np.ndarray | None = None
    rho: float = 0.1
    rho_groups: dict = field(default_factory=dict)

    def __post_init__(self):
        self.lam_h = np.zeros(len(self.h_names)) if self.lam_h is None \
            else np.asarray(self.lam_h, dtype=np.float64).copy()
        self.lam_g = np.zeros(len(self.g_names)) if self.lam_g is None \
            else np.asarray(self.lam_g, dtype=np.float64).copy()
        if self.lam_h.shape != (len(self.h_names),) or self.lam_g.shape != (len(self.g_names),):
            raise ValueError("one multiplier per group")
        if np.any(self.lam_h < 0) or np.any(self.lam_g < 0):
            raise ValueError("multipliers must be nonnegative")
        if self.rho <= 0:
            raise ValueError("dual step must be positive")

    def h(self, name: str) -> float:
        return float(self.lam_h[self.h_names.index(name)])

    def g(self, name: str) -> float:
        return float(self.lam_g[self.g_names.index(name)])

    def step(self, name: str) -> float:
        return float(self.rho_groups.get(name, self.rho))

    @property
    def norm(self) -> float:
        return float(np.sqrt(np.sum(self.lam_h ** 2) + np.sum(self.lam_g ** 2)))

    def copy(self) -> "Multipliers":
        return Multipliers(list(self.h_names), list(self.g_names), self.lam_h.copy(),
                           self.lam_g.copy(), self.rho, dict(self.rho_groups))


@dataclass
class TrainConfig:
    lr: float = 1e-3
    rho: float = 0.1
    epochs: int = 50
    batch_size: int = 64
    period: int = 1
    seed: int = 0
    aggregation: str = "mean"
    lr_surrogate: float | None = None
    train_surrogate: bool = True
    rho_groups: dict = field(default_factory=dict)
    lambda_init: dict = field(default_factory=dict)
    lr_decay: float = 1.0

    def __post_init__(self):
        if self.lr <= 0 or self.rho <= 0:
            raise ValueError("learning rate and dual step must be positive")
        if self.period < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("period and batch size must be >= 1, epochs >= 0")
        if self.aggregation not in ("mean", "time_sum"):
            raise ValueError(f"unknown aggregation {self.aggregation!r}")


# ---------------------------------------------------------------------------
# residuals and loss

TIME_INDEXED = "time_indexed"


def _values(y):
    return y.values if isinstance(y, StateTrajectory) else y


def stack_equality_residuals(u, y, task, zeta=None, field: VectorField | None = None,
                             init=None, dt: float | None = None,
                             static: dict | None = None) -> dict:
    """Named blocks of ``h'``: ``dynamics`` (time-indexed), ``init`` and the task equalities.

    ``dynamics`` holds ``y_{k+1} - y_k - RK4(F, y_k)`` per grid interval,
    ``init`` holds ``y_0 - I(u)``.  ``field`` and ``init`` default to the task's
    reference field and initial-condition map.  ``static`` reuses already
    computed task equality blocks.
    """
    Y = _values(y)
    grid_dt = dt if dt is not None else (y.grid.dt if isinstance(y, StateTrajectory) else task.grid.dt)
    n_pts = np.shape(ad.value_of(Y))[0]
    if isinstance(y, StateTrajectory) and dt is None and y.grid.dt != task.grid.dt:
        raise ValueError("trajectory grid does not match the task grid")
    if n_pts < 2:
        raise ValueError("trajectory needs at least two grid points")
    if field is None:
        field = task.reference_field(u, zeta)
    if init is None:
        init = task.initial_state(u, zeta)
        if isinstance(init, tuple):
            init = init[0]
    y_prev = ad.getitem(Y, slice(0, n_pts - 1)) if isinstance(Y, ad.Var) else Y[:-1]
    y_next = ad.getitem(Y, slice(1, n_pts)) if isinstance(Y, ad.Var) else Y[1:]
    y0 = ad.getitem(Y, 0) if isinstance(Y, ad.Var) else Y[0]
    step = rk4_step(field, 0.0, y_prev, grid_dt)
    blocks = {"dynamics": ad.sub(y_next, step), "init": ad.sub(y0, init)}
    if static is None:
        static, _ = task.static_residuals(u, zeta)
    blocks.update(static)
    return blocks


def flatten_residuals(blocks: dict) -> np.ndarray:
    """Concatenate residual blocks into one vector (values only)."""
    return np.concatenate([np.ravel(ad.value_of(b)) for b in blocks.values()])


def aggregate(block, time_indexed: bool, mode: str = "mean"):
    """Scalar summary of a nonnegative violation block.

    ``mean`` averages every entry; ``time_sum`` sums over the leading time axis of
    time-indexed blocks before averaging the rest.
    """
    if mode == "time_sum" and time_indexed:
        return ad.mean(ad.sum(block, axis=0))
    return ad.mean(block)


@dataclass
class LossParts:
    """Loss components; ``total == decision + penalty_h + penalty_g``."""

    total: object
    decision: float
    penalty_h: float
    penalty_g: float
    h_violation: dict
    g_violation: dict
    stability_fraction: float = 0.0


def _inequalities(task, u, y, g_static: dict, include_dynamic: bool):
    g = dict(g_static)
    dyn = {}
    if include_dynamic and y is not None:
        dyn = task.dynamic_inequalities(u, _values(y))
        g.update(dyn)
    return g, set(dyn)


def deop_loss(u_hat, u_star, y_hat, task, multipliers: Multipliers, tape: ad.Tape | None = None,
              zeta=None, field: VectorField | None = None, init=None,
              aggregation: str = "mean", h_blocks: dict | None = None,
              include_dynamic: bool = True, return_parts: bool = False):
    """``mean ||u_hat - u*||^2 + lam_h . agg|h'| + lam_g . agg max(0, g)``.

    Groups missing from ``multipliers`` are rejected.  With ``return_parts`` a
    :class:`LossParts` is returned whose ``total`` is the (taped) loss.
    """
    u_star = np.asarray(u_star, dtype=np.float64)
    if np.shape(ad.value_of(u_hat)) != u_star.shape:
        raise ad.ShapeError("deop_loss", np.shape(ad.value_of(u_hat)), u_star.shape)
    diff = ad.sub(u_hat, u_star)
    decision = ad.mean(ad.sum(ad.square(diff), axis=-1))
    h_static, g_static = task.static_residuals(u_hat, zeta)
    if h_blocks is None:
        if y_hat is not None and include_dynamic:
            h_blocks = stack_equality_residuals(u_hat, y_hat, task, zeta, field, init,
                                                static=h_static)
        else:
            h_blocks = h_static
    g_blocks, dyn_names = _inequalities(task, u_hat, y_hat, g_static, include_dynamic)
    terms = [decision]
    h_viol, g_viol = {}, {}
    pen_h = pen_g = 0.0
    for name, block in h_blocks.items():
        v = aggregate(ad.abs(block), name == "dynamics", aggregation)
        h_viol[name] = float(ad.value_of(v))
        lam = multipliers.h(name)
        pen_h += lam * h_viol[name]
        terms.append(ad.mul(v, lam))
    for name, block in g_blocks.items():
        v = aggregate(ad.max_zero(block), name in dyn_names, aggregation)
        g_viol[name] = float(ad.value_of(v))
        lam = multipliers.g(name)
        pen_g += lam * g_viol[name]
        terms.append(ad.mul(v, lam))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    if not return_parts:
        return total
    stab = 0.0
    if dyn_names:
        viol = np.zeros(np.shape(ad.value_of(u_hat))[0], dtype=bool)
        for name in dyn_names:
            b = np.asarray(ad.value_of(g_blocks[name]))
            viol |= (b > 0).reshape(b.shape[0], b.shape[1], -1).any(axis=(0, 2))
        stab = float(viol.mean())
    return LossParts(total, float(ad.value_of(decision)), pen_h, pen_g, h_viol, g_viol, stab)


def update_multipliers(multipliers: Multipliers, mean_violations) -> Multipliers:
    """Dual ascent ``lam <- lam + rho * violation``; violations are magnitudes.

    ``mean_violations`` is ``(h_dict, g_dict)`` keyed by group name, or a pair of
    arrays aligned with the group lists.
    """
    vh, vg = mean_violations
    if isinstance(vh, dict):
        vh = np.array([vh.get(n, 0.0) for n in multipliers.h_names], dtype=np.float64)
    if isinstance(vg, dict):
        vg = np.array([vg.get(n, 0.0) for n in multipliers.g_names], dtype=np.float64)
    vh, vg = np.asarray(vh, dtype=np.float64), np.asarray(vg, dtype=np.float64)
    if np.any(vh < 0) or np.any(vg < 0):
        raise ValueError("violations must be nonnegative magnitudes")
    if not (np.all(np.isfinite(vh)) and np.all(np.isfinite(vg))):
        raise ValueError("violations must be finite")
    out = multipliers.copy()
    out.lam_h = out.lam_h + np.array([out.step(n) for n in out.h_names]) * vh
    out.lam_g = out.lam_g + np.array([out.step(n) for n in out.g_names]) * vg
    return out


# ---------------------------------------------------------------------------
# task pipelines

@dataclass
class Forward:
    u: object
    y: object
    field: VectorField | None
    init: object
    zeta: np.ndarray


class PowerPipeline:
    """``u = F(zeta)`` then per-machine surrogate rollouts from ``I(u)``."""

    h_names = ["dynamics", "init", "flow_p", "flow_q", "ref_angle"]
    g_names = ["voltage", "gen", "angle_diff", "line_flow", "stability"]

    def __init__(self, task, proxy: ProxyModel, surrogate: SurrogateModel | None = None):
        self.task = task
        self.proxy = proxy
        self.surrogate = surrogate

    def features(self, zeta):
        return zeta

    def forward(self, zeta, tape: ad.Tape | None = None, dynamic: bool = True) -> Forward:
        u = self.proxy(zeta, tape)
        if not dynamic:
            return Forward(u, None, None, None, zeta)
        y0, aug, E = self.task.surrogate_inputs(u)
        Y, _ = unroll(self.surrogate, y0, aug, tape=tape)
        v, th = self.task.net.generator_voltage(u)
        from .tasks.power import swing_field
        fld = swing_field(self.task.gens, E, v, th)
        return Forward(u, Y, fld, y0, zeta)

    def predict(self, zeta) -> np.ndarray:
        return np.asarray(self.proxy(zeta))


class PortfolioPipeline:
    """Surrogate expected relative prices at T feed the proxy: ``u = F(zeta * r(T))``.

    The residual blocks act on the relative-price path (mean of the SDE paths),
    whose initial condition is one.
    """

    h_names = ["dynamics", "init", "budget"]
    g_names = ["nonneg"]

    def __init__(self, task, proxy: ProxyModel, surrogate: SurrogateModel | None = None,
                 n_paths: int = 16, noise_seed: int = 0):
        self.task = task
        self.proxy = proxy
        self.surrogate = surrogate
        self.n_paths = n_paths
        self.noise_seed = noise_seed
        self._noise = None

    def noise(self):
        if self._noise is None or self._noise.shape[0] != self.surrogate.grid.n_points - 1:
            self._noise = common_noise(self.surrogate, self.n_paths, self.noise_seed, (1,))
        return self._noise

    def relative_path(self, tape=None):
        ones = np.ones((1, self.task.n_u))
        if self.surrogate.is_sde:
            tr = predict_trajectory(self.surrogate, None, ones, tape=tape, noise=self.noise())
            return tr.values
        Y, _ = unroll(self.surrogate, ones, tape=tape)
        return Y

    def expected_prices(self, zeta, tape=None):
        R = self.relative_path(tape)
        rT = ad.getitem(R, -1) if isinstance(R, ad.Var) else R[-1]
        return ad.mul(rT, zeta), R

    def features(self, zeta):
        return np.asarray(self.expected_prices(zeta)[0])

    def forward(self, zeta, tape: ad.Tape | None = None, dynamic: bool = True) -> Forward:
        if not dynamic:
            return Forward(self.proxy(zeta, tape), None, None, None, zeta)
        yT, R = self.expected_prices(zeta, tape)
        u = self.proxy(yT, tape)
        return Forward(u, R, self.task.reference_field(), np.ones((1, self.task.n_u)), zeta)

    def predict(self, zeta) -> np.ndarray:
        from .tasks.portfolio import project_simplex
        return project_simplex(np.asarray(self.proxy(self.features(zeta))))


# ---------------------------------------------------------------------------
# training loops

def _batches(n: int, bs: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    return [perm[i:i + bs] for i in range(0, n, bs)]


def _check_dataset(zeta, u_star):
    zeta = np.asarray(zeta, dtype=np.float64)
    u_star = np.asarray(u_star, dtype=np.float64)
    if len(zeta) == 0:
        raise ValueError("empty training dataset")
    if len(zeta) != len(u_star):
        raise ValueError("zeta and u* must have the same number of instances")
    return zeta, u_star


def _init_multipliers(names_h, names_g, cfg: TrainConfig) -> Multipliers:
    lam_h = np.array([cfg.lambda_init.get(n, 0.0) for n in names_h], dtype=np.float64)
    lam_g = np.array([cfg.lambda_init.get(n, 0.0) for n in names_g], dtype=np.float64)
    return Multipliers(list(names_h), list(names_g), lam_h, lam_g, cfg.rho, dict(cfg.rho_groups))


def _history_row(epoch, sums, n, mult):
    h = {k: v / n for k, v in sums["h"].items()}
    g = {k: v / n for k, v in sums["g"].items()}
    return {
        "epoch": epoch,
        "loss": sums["loss"] / n,
        "decision_mse": sums["decision"] / n,
        "mean_h_violation": float(np.mean(list(h.values()))) if h else 0.0,
        "mean_g_violation": float(np.mean(list(g.values()))) if g else 0.0,
        "stability_violation_fraction": sums["stab"] / n,
        "lambda_norm": mult.norm,
        "penalty_h": sums["pen_h"] / n,
        "penalty_g": sums["pen_g"] / n,
        "h": h,
        "g": g,
        "lambda_h": dict(zip(mult.h_names, mult.lam_h.tolist())),
        "lambda_g": dict(zip(mult.g_names, mult.lam_g.tolist())),
    }


def _accumulate(sums, parts: LossParts, k: int, lv: float):
    sums["loss"] += lv * k
    sums["decision"] += parts.decision * k
    sums["pen_h"] += parts.penalty_h * k
    sums["pen_g"] += parts.penalty_g * k
    sums["stab"] += parts.stability_fraction * k
    for name, v in parts.h_violation.items():
        sums["h"][name] = sums["h"].get(name, 0.0) + v * k
    for name, v in parts.g_violation.items():
        sums["g"][name] = sums["g"].get(name, 0.0) + v * k


class _Aborted(TrainingAborted):
    def __init__(self, msg, checkpoint):
        super().__init__(msg)
        self.checkpoint = checkpoint


def train_deop(dataset, pipeline, config: TrainConfig | None = None,
               multipliers: Multipliers | None = None, callback=None):
    """Joint primal-dual training of the proxy and the surrogate.

    ``dataset`` is ``(zeta, u_star)``.  Returns ``(pipeline, multipliers, history)``;
    the pipeline carries the updated proxy and surrogate.  Each history row also
    holds per-group mean violations under ``h`` and ``g``, the weighted penalty
    sums ``penalty_h`` and ``penalty_g``, and the multipliers after the epoch
    under ``lambda_h`` and ``lambda_g``.
    """
    cfg = config or TrainConfig()
    zeta, u_star = _check_dataset(*dataset)
    mult = multipliers or _init_multipliers(pipeline.h_names, pipeline.g_names, cfg)
    history = []
    if cfg.epochs == 0:
        return pipeline, mult, history
    rng = np.random.default_rng(cfg.seed)
    p_state = OptimizerState("adam", cfg.lr)
    update_s = cfg.train_surrogate and pipeline.surrogate is not None
    s_states = [OptimizerState("adam", cfg.lr_surrogate or cfg.lr)
                for _ in pipeline.surrogate.nets()] if update_s else []
    for epoch in range(cfg.epochs):
        sums = {"loss": 0.0, "decision": 0.0, "pen_h": 0.0, "pen_g": 0.0, "stab": 0.0,
                "h": {}, "g": {}}
        for idx in _batches(len(zeta), cfg.batch_size, rng):
            tape = ad.Tape()
            fw = pipeline.forward(zeta[idx], tape)
            parts = deop_loss(fw.u, u_star[idx], fw.y, pipeline.task, mult, tape, zeta[idx],
                              fw.field, fw.init, cfg.aggregation, return_parts=True)
            lv = float(ad.value_of(parts.total))
            if not np.isfinite(lv):
                raise _Aborted(f"non-finite loss at epoch {epoch}", (pipeline, mult))
            grads = tape.backward(parts.total)
            new_proxy = pipeline.proxy.with_net(
                optimizer_step(pipeline.proxy.net, pipeline.proxy.net.grads(grads, tape), p_state))
            if update_s:
                nets = []
                for net, st in zip(pipeline.surrogate.nets(), s_states):
                    gr = net.grads(grads, tape)
                    nets.append(optimizer_step(net, gr, st))
                pipeline.surrogate = pipeline.surrogate.with_nets(nets)
            pipeline.proxy = new_proxy
            _accumulate(sums, parts, len(idx), lv)
        if (epoch + 1) % cfg.period == 0:
            mult = update_multipliers(mult, ({k: v / len(zeta) for k, v in sums["h"].items()},
                                             {k: v / len(zeta) for k, v in sums["g"].items()}))
        row = _history_row(epoch, sums, len(zeta), mult)
        history.append(row)
        p_state.lr *= cfg.lr_decay
        for st in s_states:
            st.lr *= cfg.lr_decay
        log.info("deop epoch %d loss %.4e mse %.3e stab %.3f |lam| %.3e", epoch, row["loss"],
                 row["decision_mse"], row["stability_violation_fraction"], row["lambda_norm"])
        if callback is not None:
            callback(row, pipeline, mult)
    return pipeline, mult, history


def train_baseline(dataset, proxy: ProxyModel, task, config: TrainConfig | None = None,
                   method: str = "mse", multipliers: Multipliers | None = None):
    """Static proxy training: ``mse`` (decision error only) or ``ld_static``.

    ``ld_static`` adds multiplier-weighted static ``h`` and ``g`` violations and
    takes dual steps every ``period`` epochs.  Returns ``(proxy, multipliers, history)``.
    """
    if method not in ("mse", "ld_static"):
        raise ValueError(f"unknown baseline {method!r}")
    cfg = config or TrainConfig()
    zeta, u_star = _check_dataset(*dataset)
    h0, g0 = task.static_residuals(np.asarray(proxy(zeta[:1])), zeta[:1])
    mult = multipliers or _init_multipliers(list(h0), list(g0), cfg)
    history = []
    if cfg.epochs == 0:
        return proxy, mult, history
    rng = np.random.default_rng(cfg.seed)
    state = OptimizerState("adam", cfg.lr)
    for epoch in range(cfg.epochs):
        sums = {"loss": 0.0, "decision": 0.0, "pen_h": 0.0, "pen_g": 0.0, "stab": 0.0,
                "h": {}, "g": {}}
        for idx in _batches(len(zeta), cfg.batch_size, rng):
            tape = ad.Tape()
            u = proxy(zeta[idx], tape)
            if method == "mse":
                m0 = Multipliers(mult.h_names, mult.g_names, rho=mult.rho)
                parts = deop_loss(u, u_star[idx], None, task, m0, tape, zeta[idx],
                                  include_dynamic=False, return_parts=True)
            else:
                parts = deop_loss(u, u_star[idx], None, task, mult, tape, zeta[idx],
                                  aggregation=cfg.aggregation, include_dynamic=False,
                                  return_parts=True)
            lv = float(ad.value_of(parts.total))
            if not np.isfinite(lv):
                raise _Aborted(f"non-finite loss at epoch {epoch}", (proxy, mult))
            grads = tape.backward(parts.total)
            proxy = proxy.with_net(optimizer_step(proxy.net, proxy.net.grads(grads, tape), state))
            _accumulate(sums, parts, len(idx), lv)
        if method == "ld_static" and (epoch + 1) % cfg.period == 0:
            mult = update_multipliers(mult, ({k: v / len(zeta) for k, v in sums["h"].items()},
                                             {k: v / len(zeta) for k, v in sums["g"].items()}))
        history.append(_history_row(epoch, sums, len(zeta), mult))
        state.lr *= cfg.lr_decay
    return proxy, mult, history


def write_history_csv(history: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow([row["epoch"]] + [repr(float(row[c])) for c in HISTORY_COLUMNS[1:]])
