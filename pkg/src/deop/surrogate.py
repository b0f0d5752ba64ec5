"""Neural ODE/SDE surrogates of task dynamics.

A surrogate advances a normalized state ``z = (y - shift) / scale`` with
``dz/dt = rate * N(z, a)`` where ``a`` holds augmented inputs that have no
dynamics of their own (they are concatenated to the network input but never
integrated).  Integration is classical RK4 on a coarse step of ``solver_stride``
grid intervals; fine grid values come from cubic Hermite interpolation using the
drift at the coarse nodes.

Power-style surrogates hold one network per machine, stacked along a leading
axis; their states are laid out (batch, G, d) at the API and (G, batch, d)
inside the unroll.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .nn import MlpParams, OptimizerState, TrainingAborted, optimizer_step, \
    params_from_dict, params_to_dict
from .solvers import DEFAULT_CAP, StateTrajectory, TimeGrid, _guard, euler_maruyama, \
    hermite_matrix, rk45_integrate

__all__ = [
    "SurrogateModel", "SurrogateSample", "SurrogateData", "SurrogateConfig",
    "sample_near_optimal_inputs", "build_surrogate_dataset", "stack_samples",
    "fit_normalization", "train_surrogate", "predict_trajectory", "unroll",
    "save_surrogate", "load_surrogate", "relative_l2_error",
]

log = logging.getLogger(__name__)


@dataclass
class SurrogateModel:
    """Learned drift (and optional diffusion) with its normalization constants.

    ``state_shift``/``state_scale`` have shape (d,) or, stacked, (G, d); the
    augmentation constants likewise with ``augmentation_dim`` columns.
    ``rate`` converts network output to ``dy/dt`` in physical units and
    ``noise`` does the same for the diffusion output.
    """

    drift_net: MlpParams
    state_dim: int
    grid: TimeGrid
    augmentation_dim: int = 0
    diffusion_net: MlpParams | None = None
    state_shift: np.ndarray | None = None
    state_scale: np.ndarray | None = None
    aug_shift: np.ndarray | None = None
    aug_scale: np.ndarray | None = None
    rate: np.ndarray | None = None
    noise: np.ndarray | None = None
    solver_stride: int = 1
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        d, m = self.state_dim, self.augmentation_dim
        if self.drift_net.in_dim != d + m:
            raise ValueError(f"drift net input dim {self.drift_net.in_dim} != state "
                             f"{d} + augmentation {m}")
        if self.drift_net.out_dim != d:
            raise ValueError("drift net must output one derivative per state component")
        if self.diffusion_net is not None and (self.diffusion_net.in_dim != d
                                               or self.diffusion_net.out_dim != d):
            raise ValueError("diffusion net must map the state to per-dimension diffusion")
        lead = (self.n_groups,) if self.stacked else ()
        ones = np.ones(lead + (d,))
        self.state_shift = np.zeros(lead + (d,)) if self.state_shift is None \
            else np.asarray(self.state_shift, dtype=np.float64)
        self.state_scale = ones if self.state_scale is None \
            else np.asarray(self.state_scale, dtype=np.float64)
        self.aug_shift = np.zeros(lead + (m,)) if self.aug_shift is None \
            else np.asarray(self.aug_shift, dtype=np.float64)
        self.aug_scale = np.ones(lead + (m,)) if self.aug_scale is None \
            else np.asarray(self.aug_scale, dtype=np.float64)
        self.rate = ones.copy() if self.rate is None else np.asarray(self.rate, dtype=np.float64)
        self.noise = ones.copy() if self.noise is None else np.asarray(self.noise, dtype=np.float64)
        if self.solver_stride < 1:
            raise ValueError("solver_stride must be >= 1")

    @property
    def stacked(self) -> bool:
        return self.drift_net.stacked

    @property
    def n_groups(self) -> int | None:
        return self.drift_net.weights[0].shape[0] if self.stacked else None

    @property
    def is_sde(self) -> bool:
        return self.diffusion_net is not None

    def nets(self) -> list[MlpParams]:
        return [self.drift_net] + ([self.diffusion_net] if self.is_sde else [])

    def with_nets(self, nets: Sequence[MlpParams]) -> "SurrogateModel":
        return replace(self, drift_net=nets[0],
                       diffusion_net=nets[1] if self.is_sde else None)


@dataclass
class SurrogateSample:
    """One training input ``x = [y0, a]`` with its reference trajectory."""

    x: np.ndarray
    trajectory: StateTrajectory
    unstable: bool | np.ndarray = False


@dataclass
class SurrogateData:
    """Samples stacked into arrays: ``y0`` (N, [G,] d), ``aug`` (N, [G,] m), ``Y`` (T, N, [G,] d)."""

    y0: np.ndarray
    aug: np.ndarray
    Y: np.ndarray
    grid: TimeGrid
    unstable: np.ndarray

    def __len__(self):
        return len(self.y0)

    def subset(self, idx) -> "SurrogateData":
        return SurrogateData(self.y0[idx], self.aug[idx], self.Y[:, idx], self.grid,
                             self.unstable[idx])


@dataclass
class SurrogateConfig:
    lr: float = 1e-3
    epochs: int = 60
    batch_size: int = 64
    n_start: int = 200
    n_full: int | None = None
    curriculum_fraction: float = 0.5
    val_fraction: float = 0.1
    seed: int = 0
    lr_decay: float = 1.0
    abort_on_nonfinite: bool = True

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("invalid surrogate training configuration")


# ---------------------------------------------------------------------------
# datasets

def sample_near_optimal_inputs(bounds, n: int, rng) -> np.ndarray:
    """``n`` vectors with component ``i`` drawn from ``U(low_i, high_i)``."""
    b = np.asarray(bounds, dtype=np.float64).reshape(-1, 2)
    if np.any(b[:, 0] >= b[:, 1]):
        raise ValueError("each bound needs low < high")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    return rng.uniform(b[:, 0], b[:, 1], size=(int(n), len(b)))


def build_surrogate_dataset(task, inputs, solver: str = "rk45", grid: TimeGrid | None = None,
                            rtol: float = 1e-7, atol: float = 1e-9, seed: int = 0,
                            batch: int = 256) -> list[SurrogateSample]:
    """Reference trajectories for each input via ``task.surrogate_problem``.

    ``solver`` is ``"rk45"`` for ODE tasks and ``"euler_maruyama"`` for SDE tasks.
    Inputs whose initial-condition map fails are skipped and logged.
    """
    grid = grid or task.grid
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    out = []
    rng = np.random.default_rng(seed)
    for start in range(0, len(inputs), batch):
        chunk = inputs[start:start + batch]
        ok = np.ones(len(chunk), dtype=bool)
        for i, x in enumerate(chunk):
            try:
                task.surrogate_problem(x[None])
            except ValueError as exc:
                log.warning("surrogate input %d skipped: %s", start + i, exc)
                ok[i] = False
        chunk = chunk[ok]
        if not len(chunk):
            continue
        y0, aug, fld = task.surrogate_problem(chunk)
        if solver == "rk45":
            tr = rk45_integrate(fld, y0, (grid.t0, grid.t1), rtol=rtol, atol=atol, grid=grid)
        elif solver == "euler_maruyama":
            tr = euler_maruyama(fld, y0, grid, rng)
        else:
            raise ValueError(f"unknown reference solver {solver!r}")
        unstable = task.surrogate_unstable(tr)
        for i in range(len(chunk)):
            x = np.concatenate([y0[i], aug[i]], axis=-1)
            row = StateTrajectory(grid, tr.values[:, i], bool(np.any(tr.diverged[i])),
                                  int(np.min(tr.diverged_at[i])))
            out.append(SurrogateSample(x, row, unstable[i]))
    return out


def stack_samples(samples: Sequence[SurrogateSample], state_dim: int) -> SurrogateData:
    if not samples:
        raise ValueError("empty surrogate dataset")
    X = np.stack([s.x for s in samples])
    Y = np.stack([np.asarray(s.trajectory.values) for s in samples], axis=1)
    uns = np.stack([np.asarray(s.unstable) for s in samples])
    return SurrogateData(X[..., :state_dim], X[..., state_dim:], Y, samples[0].trajectory.grid, uns)


def fit_normalization(model: SurrogateModel, data: SurrogateData) -> SurrogateModel:
    """Set shift/scale from dataset moments and rates from finite-difference derivatives."""
    Y = data.Y
    axes = (0, 1)
    shift = Y.mean(axis=axes)
    scale = np.maximum(Y.std(axis=axes), 1e-8)
    dY = np.diff(Y, axis=0) / data.grid.dt
    rate = np.maximum(np.sqrt(np.mean(dY ** 2, axis=axes)), 1e-12)
    if data.aug.shape[-1]:
        a_shift = data.aug.mean(axis=0)
        a_scale = np.maximum(data.aug.std(axis=0), 1e-8)
    else:
        a_shift, a_scale = model.aug_shift, model.aug_scale
    noise = model.noise
    if model.is_sde:
        # quadratic variation per unit time
        inc = np.diff(Y, axis=0)
        noise = np.maximum(np.sqrt(np.mean(inc ** 2, axis=axes) / data.grid.dt), 1e-12)
    return replace(model, state_shift=shift, state_scale=scale, aug_shift=a_shift,
                   aug_scale=a_scale, rate=rate, noise=noise)


# ---------------------------------------------------------------------------
# unroll

def _to_internal(x, stacked: bool):
    if not stacked:
        return x
    return ad.transpose(x, (1, 0, 2)) if isinstance(x, ad.Var) else np.swapaxes(x, 0, 1)


def _bc(arr, stacked: bool):
    """Broadcast per-component constants over the batch axis."""
    return arr[:, None, :] if stacked else arr


def unroll(model: SurrogateModel, y0, aug=None, n_points: int | None = None,
           tape: ad.Tape | None = None, noise: np.ndarray | None = None,
           drift_only: bool = False, coarse: bool = False):
    """Integrate the surrogate; returns ``(values, diverged)`` in API layout.

    ``values`` is (n_points, batch, [G,] d) in physical units (a :class:`Var` when
    taped).  ``noise`` supplies Wiener increments ``dW`` shaped
    (n_steps, batch, [G,] d) for SDE models; ``drift_only`` ignores the diffusion.
    With ``coarse`` the coarse RK4 nodes are returned instead of the fine grid.
    """
    st = model.stacked
    grid = model.grid
    n_points = grid.n_points if n_points is None else int(n_points)
    if tape is None and not isinstance(y0, ad.Var) and not isinstance(aug, ad.Var):
        return _unroll_numpy(model, np.asarray(y0, dtype=np.float64), aug, n_points, noise,
                             drift_only, coarse)
    s = model.solver_stride
    n_coarse = math.ceil((n_points - 1) / s) + 1
    dt = grid.dt * s
    if tape is not None and not isinstance(y0, ad.Var):
        y0 = tape.const(y0)
    z = ad.div(ad.sub(_to_internal(y0, st), _bc(model.state_shift, st)), _bc(model.state_scale, st))
    m = model.augmentation_dim
    a_n = None
    if m:
        if aug is None:
            raise ValueError("this surrogate needs augmentation inputs")
        a_n = ad.div(ad.sub(_to_internal(aug, st), _bc(model.aug_shift, st)),
                     _bc(model.aug_scale, st))
    layers = model.drift_net.bind(tape) if tape is not None else model.drift_net.layers()
    coef = _bc(model.rate / model.state_scale, st)
    sde = model.is_sde and not drift_only
    if sde:
        if noise is None:
            raise ValueError("SDE unroll needs Wiener increments")
        if s != 1:
            raise ValueError("SDE surrogates integrate on the grid itself (solver_stride 1)")
        glayers = model.diffusion_net.bind(tape) if tape is not None else model.diffusion_net.layers()
        gcoef = _bc(model.noise / model.state_scale, st)

    def f(zz):
        inp = ad.concat([zz, a_n], axis=-1) if m else zz
        return ad.mul(ad.mlp(inp, layers), coef)

    zs, fs = [z], []
    batch_shape = np.shape(ad.value_of(z))[:-1]
    diverged = np.zeros(batch_shape, dtype=bool)
    for k in range(n_coarse - 1):
        k1 = f(z)
        fs.append(k1)
        k2 = f(ad.lincomb([1.0, 0.5 * dt], [z, k1]))
        k3 = f(ad.lincomb([1.0, 0.5 * dt], [z, k2]))
        k4 = f(ad.lincomb([1.0, dt], [z, k3]))
        z_new = ad.lincomb([1.0, dt / 6.0, dt / 3.0, dt / 3.0, dt / 6.0], [z, k1, k2, k3, k4])
        if sde:
            dW = _to_internal(noise[k], st)
            z_new = ad.add(z_new, ad.mul(ad.mul(ad.mlp(z, glayers), gcoef), dW))
        z_new, hit = _guard(z_new, z, DEFAULT_CAP)
        diverged |= hit
        z = z_new
        zs.append(z)
    Z = ad.stack(zs)
    if s > 1 and not coarse:
        fs.append(f(z))
        F = ad.stack(fs)
        shape = np.shape(ad.value_of(Z))
        Hy, Hf = hermite_matrix(s, n_coarse)
        Hy, Hf = Hy[:n_points], Hf[:n_points]
        flat = (n_coarse, int(np.prod(shape[1:])))
        Zf = ad.add(ad.matmul(Hy, ad.reshape(Z, flat)), ad.matmul(dt * Hf, ad.reshape(F, flat)))
        Z = ad.reshape(Zf, (n_points,) + shape[1:])
    Y = ad.add(ad.mul(Z, _bc(model.state_scale, st)), _bc(model.state_shift, st))
    if st:
        Y = ad.transpose(Y, (0, 2, 1, 3)) if isinstance(Y, ad.Var) else np.swapaxes(Y, 1, 2)
        diverged = diverged.T
    return Y, diverged


def _unroll_numpy(model, y0, aug, n_points, noise, drift_only, coarse):
    """Untaped :func:`unroll` with the augmentation folded into the first-layer bias."""
    st = model.stacked
    s = model.solver_stride
    n_coarse = math.ceil((n_points - 1) / s) + 1
    dt = model.grid.dt * s
    d, m = model.state_dim, model.augmentation_dim
    z = (_to_internal(y0, st) - _bc(model.state_shift, st)) / _bc(model.state_scale, st)
    layers = model.drift_net.layers()
    W0, b0 = layers[0]
    Wz = W0[..., :d]
    c0 = b0[:, None, :] if st else b0
    if m:
        a_n = (_to_internal(np.asarray(aug, dtype=np.float64), st) - _bc(model.aug_shift, st)) \
            / _bc(model.aug_scale, st)
        c0 = c0 + np.matmul(a_n, np.swapaxes(W0[..., d:], -1, -2))
    WzT = np.swapaxes(Wz, -1, -2)
    rest = [(np.swapaxes(W, -1, -2), b[:, None, :] if st else b) for W, b in layers[1:]]
    coef = _bc(model.rate / model.state_scale, st)

    def f(zz):
        h = np.matmul(zz, WzT) + c0
        for WT, b in rest:
            ad.note_kinks(h)
            h = np.matmul(np.maximum(h, 0.0), WT) + b
        return h * coef

    sde = model.is_sde and not drift_only
    if sde:
        if noise is None:
            raise ValueError("SDE unroll needs Wiener increments")
        gcoef = _bc(model.noise / model.state_scale, st)
        glayers = model.diffusion_net.layers()
    zs, fs = [z], []
    diverged = np.zeros(z.shape[:-1], dtype=bool)
    for k in range(n_coarse - 1):
        k1 = f(z)
        fs.append(k1)
        k2 = f(z + 0.5 * dt * k1)
        k3 = f(z + 0.5 * dt * k2)
        k4 = f(z + dt * k3)
        z_new = z + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if sde:
            z_new = z_new + ad.mlp(z, glayers) * gcoef * _to_internal(noise[k], st)
        if not (np.isfinite(z_new).all() and np.abs(z_new).max() <= DEFAULT_CAP):
            z_new, hit = _guard(z_new, z, DEFAULT_CAP)
            diverged |= hit
        z = z_new
        zs.append(z)
    Z = np.stack(zs)
    if s > 1 and not coarse:
        fs.append(f(z))
        Hy, Hf = hermite_matrix(s, n_coarse)
        F = np.stack(fs)
        Z = np.tensordot(Hy[:n_points], Z, axes=1) + dt * np.tensordot(Hf[:n_points], F, axes=1)
    Y = Z * _bc(model.state_scale, st) + _bc(model.state_shift, st)
    if st:
        return np.swapaxes(Y, 1, 2), diverged.T
    return Y, diverged


def common_noise(model: SurrogateModel, n_paths: int, seed: int, batch_shape=(),
                 antithetic: bool = True) -> np.ndarray:
    """Wiener increments (n_steps, n_paths, *batch_shape, d); antithetic pairs when requested."""
    rng = np.random.default_rng(seed)
    n_steps = model.grid.n_points - 1
    shape = (n_steps, n_paths) + tuple(batch_shape) + (model.state_dim,)
    if antithetic:
        if n_paths % 2:
            raise ValueError("antithetic sampling needs an even path count")
        half = rng.standard_normal((n_steps, n_paths // 2) + shape[2:])
        z = np.concatenate([half, -half], axis=1)
    else:
        z = rng.standard_normal(shape)
    return z * np.sqrt(model.grid.dt)


def predict_trajectory(model: SurrogateModel, aug, init, grid: TimeGrid | None = None,
                       tape: ad.Tape | None = None, seed: int | None = None,
                       n_paths: int = 16, expectation: bool = True,
                       noise: np.ndarray | None = None) -> StateTrajectory:
    """Surrogate trajectory from ``init`` (batch, [G,] d) with augmented inputs ``aug``.

    For SDE surrogates ``n_paths`` Euler-Maruyama paths (common random numbers
    from ``seed`` unless ``noise`` is given) are simulated; with ``expectation``
    their mean is returned, otherwise all paths stacked on a path axis after time.
    """
    if grid is not None and (grid.dt != model.grid.dt or grid.n_points > model.grid.n_points):
        model = replace(model, grid=grid)
    n_points = (grid or model.grid).n_points
    if not model.is_sde:
        Y, div = unroll(model, init, aug, n_points, tape)
        return StateTrajectory(grid or model.grid, Y, div, np.where(div, 0, n_points))
    init_v = ad.value_of(init)
    bshape = np.shape(init_v)[:-1]
    if noise is None:
        noise = common_noise(model, n_paths, 0 if seed is None else seed, bshape)
    n_paths = noise.shape[1]
    if model.stacked:
        raise ValueError("stacked SDE surrogates are not supported")
    # broadcast the batch over paths: (paths * batch, ..., d)
    if isinstance(init, ad.Var):
        y0 = ad.concat([init] * n_paths, axis=0)
    else:
        y0 = np.tile(init_v, (n_paths,) + (1,) * (np.ndim(init_v) - 1))
    a = None
    if aug is not None and model.augmentation_dim:
        a = ad.concat([aug] * n_paths, axis=0) if isinstance(aug, ad.Var) \
            else np.tile(aug, (n_paths,) + (1,) * (np.ndim(aug) - 1))
    nz = noise.reshape((noise.shape[0], -1) + noise.shape[3:]) if noise.ndim > 3 else noise
    Y, div = unroll(model, y0, a, n_points, tape, nz)
    T = n_points
    full = ad.reshape(Y, (T, n_paths) + bshape + (model.state_dim,))
    div = np.asarray(div).reshape((n_paths,) + bshape).any(axis=0)
    if expectation:
        return StateTrajectory(grid or model.grid, ad.mean(full, axis=1), div,
                               np.where(div, 0, n_points))
    return StateTrajectory(grid or model.grid, full, div, np.where(div, 0, n_points))


# ---------------------------------------------------------------------------
# training

def _curriculum(cfg: SurrogateConfig, epoch: int, n_full: int) -> int:
    start = min(cfg.n_start, n_full)
    ramp = max(1, int(round(cfg.curriculum_fraction * cfg.epochs)))
    frac = min(1.0, epoch / ramp)
    return int(round(start + (n_full - start) * frac))


def trajectory_loss(model: SurrogateModel, data: SurrogateData, n_points: int,
                    tape: ad.Tape | None = None):
    """Mean squared error of the drift unroll in normalized coordinates."""
    Yhat, _ = unroll(model, data.y0, data.aug, n_points, tape, drift_only=True)
    err = ad.div(ad.sub(Yhat, data.Y[:n_points]), model.state_scale)
    return ad.mean(ad.square(err))


def diffusion_loss(model: SurrogateModel, data: SurrogateData, tape: ad.Tape | None = None):
    """Quadratic-variation matching ``g(y_k)^2 dt ~ (y_{k+1} - y_k - f dt)^2`` (normalized)."""
    Y = data.Y
    dt = data.grid.dt
    Z = (Y - model.state_shift) / model.state_scale
    A = None
    if model.augmentation_dim:
        A = np.broadcast_to((data.aug - model.aug_shift) / model.aug_scale,
                            Z.shape[:-1] + (model.augmentation_dim,))
    zin = Z[:-1] if A is None else np.concatenate([Z[:-1], A[:-1]], axis=-1)
    fz = ad.mlp(zin, model.drift_net.layers()) * (model.rate / model.state_scale)
    inc = Z[1:] - Z[:-1] - fz * dt
    target = inc ** 2 / dt / (model.noise / model.state_scale) ** 2
    layers = model.diffusion_net.bind(tape) if tape is not None else model.diffusion_net.layers()
    g = ad.mlp(Z[:-1].reshape(-1, model.state_dim), layers)
    return ad.mean(ad.square(ad.sub(ad.square(g), target.reshape(-1, model.state_dim))))


def _epoch_batches(n: int, bs: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    return [perm[i:i + bs] for i in range(0, n, bs)]


def train_surrogate(model: SurrogateModel, dataset, config: SurrogateConfig | None = None,
                    validation=None, normalize: bool = True):
    """Fit the surrogate to reference trajectories.

    Returns ``(model, history)``; history rows hold ``epoch``, ``n_points``,
    ``train_loss`` and ``val_loss``.  The supervised horizon grows linearly from
    ``n_start`` points to the full grid over ``curriculum_fraction`` of the epochs.
    """
    cfg = config or SurrogateConfig()
    data = dataset if isinstance(dataset, SurrogateData) else stack_samples(dataset, model.state_dim)
    if len(data) == 0:
        raise ValueError("empty surrogate dataset")
    rng = np.random.default_rng(cfg.seed)
    if validation is None and cfg.val_fraction > 0 and len(data) >= 10:
        perm = rng.permutation(len(data))
        n_val = max(1, int(round(cfg.val_fraction * len(data))))
        validation, data = data.subset(np.sort(perm[:n_val])), data.subset(np.sort(perm[n_val:]))
    elif validation is not None and not isinstance(validation, SurrogateData):
        validation = stack_samples(validation, model.state_dim)
    if cfg.epochs == 0:
        return model, []
    if normalize:
        model = fit_normalization(model, data)
    n_full = min(cfg.n_full or data.grid.n_points, data.grid.n_points, model.grid.n_points)
    states = [OptimizerState("adam", cfg.lr) for _ in model.nets()]
    history = []
    for epoch in range(cfg.epochs):
        n_pts = _curriculum(cfg, epoch, n_full)
        losses = []
        for idx in _epoch_batches(len(data), cfg.batch_size, rng):
            batch = data.subset(idx)
            tape = ad.Tape()
            loss = trajectory_loss(model, batch, n_pts, tape)
            if model.is_sde:
                loss = ad.add(loss, diffusion_loss(model, batch, tape))
            lv = float(ad.value_of(loss))
            if not np.isfinite(lv):
                raise TrainingAborted(f"non-finite surrogate loss at epoch {epoch}")
            grads = tape.backward(loss)
            nets = [optimizer_step(net, net.grads(grads, tape), st)
                    for net, st in zip(model.nets(), states)]
            model = model.with_nets(nets)
            losses.append(lv * len(idx))
        row = {"epoch": epoch, "n_points": n_pts, "train_loss": float(np.sum(losses) / len(data))}
        if validation is not None and len(validation):
            row["val_loss"] = float(trajectory_loss(model, validation, n_pts))
        history.append(row)
        for st in states:
            st.lr *= cfg.lr_decay
        log.info("surrogate epoch %d n=%d train %.3e val %.3e", epoch, n_pts,
                 row["train_loss"], row.get("val_loss", float("nan")))
    return model, history


def relative_l2_error(pred, ref, axis=0, weights=None) -> np.ndarray:
    """``||pred - ref|| / ||ref||`` reduced over time (``axis``) and the state axis."""
    pred, ref = np.asarray(pred), np.asarray(ref)
    if weights is not None:
        pred, ref = pred * weights, ref * weights
    num = np.sqrt(np.sum((pred - ref) ** 2, axis=(axis, -1)))
    den = np.sqrt(np.sum(ref ** 2, axis=(axis, -1)))
    return num / np.maximum(den, 1e-300)


# ---------------------------------------------------------------------------
# checkpoints

SURROGATE_FORMAT = "deop-surrogate"


def save_surrogate(model: SurrogateModel, path) -> None:
    d = {
        "format": SURROGATE_FORMAT,
        "version": 1,
        "drift_net": params_to_dict(model.drift_net),
        "diffusion_net": None if model.diffusion_net is None else params_to_dict(model.diffusion_net),
        "state_dim": model.state_dim,
        "augmentation_dim": model.augmentation_dim,
        "grid": [model.grid.t0, model.grid.dt, model.grid.n_points],
        "solver_stride": model.solver_stride,
        "metadata": model.metadata,
    }
    for k in ("state_shift", "state_scale", "aug_shift", "aug_scale", "rate", "noise"):
        d[k] = getattr(model, k).tolist()
    Path(path).write_text(json.dumps(d, sort_keys=True))


def load_surrogate(path) -> SurrogateModel:
    d = json.loads(Path(path).read_text())
    if d.get("format") != SURROGATE_FORMAT:
        raise ValueError("not a surrogate checkpoint")
    t0, dt, n = d["grid"]
    arrays = {k: np.array(d[k], dtype=np.float64)
              for k in ("state_shift", "state_scale", "aug_shift", "aug_scale", "rate", "noise")}
    return SurrogateModel(params_from_dict(d["drift_net"]), int(d["state_dim"]),
                          TimeGrid(float(t0), float(dt), int(n)), int(d["augmentation_dim"]),
                          None if d["diffusion_net"] is None else params_from_dict(d["diffusion_net"]),
                          solver_stride=int(d["solver_stride"]), metadata=d.get("metadata", {}),
                          **arrays)
