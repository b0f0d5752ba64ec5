"""Fixed-step RK4 (tape-aware), adaptive Dormand-Prince 5(4) and Euler-Maruyama.

State arrays put the state dimension last, so every integrator also accepts a
batch of initial states shaped (batch, dim) and advances them together.
"""
from __future__ import annotations

import csv
import functools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import autodiff as ad

__all__ = [
    "TimeGrid", "StateTrajectory", "VectorField", "rk4_step", "rk4_integrate",
    "rk45_integrate", "euler_maruyama", "hermite_matrix", "write_trajectory_csv",
    "read_trajectory_csv", "SolverError", "DEFAULT_CAP",
]

DEFAULT_CAP = 1e6


class SolverError(ValueError):
    pass


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_k = t0 + k * dt`` for ``k = 0 .. n_points - 1``."""

    t0: float
    dt: float
    n_points: int

    def __post_init__(self):
        if not self.dt > 0:
            raise SolverError(f"grid step must be positive, got {self.dt}")
        if self.n_points < 2:
            raise SolverError(f"grid needs at least 2 points, got {self.n_points}")

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_points)

    @property
    def t1(self) -> float:
        return self.t0 + self.dt * (self.n_points - 1)

    @classmethod
    def span(cls, t0: float, t1: float, n_points: int) -> "TimeGrid":
        return cls(float(t0), (float(t1) - float(t0)) / (n_points - 1), int(n_points))

    def truncated(self, n_points: int) -> "TimeGrid":
        return TimeGrid(self.t0, self.dt, n_points)


@dataclass
class StateTrajectory:
    """States on a grid: ``states[k]`` is the state at ``grid.times[k]``.

    ``states`` is (n_points, dim) or, for a batch, (n_points, batch, dim);
    ``diverged`` is a bool or a (batch,) bool array.  ``diverged_at`` gives the
    first clamped/truncated row (``n_points`` when the trajectory is regular).
    """

    grid: TimeGrid
    states: Any
    diverged: Any = False
    diverged_at: Any = None

    def __post_init__(self):
        n = np.shape(ad.value_of(self.states))[0]
        if n != self.grid.n_points:
            raise SolverError(f"trajectory has {n} rows, grid has {self.grid.n_points}")
        if self.diverged_at is None:
            self.diverged_at = np.where(np.asarray(self.diverged), 0, n) \
                if np.ndim(self.diverged) else (0 if self.diverged else n)

    @property
    def values(self) -> np.ndarray:
        return ad.value_of(self.states)

    @property
    def final(self):
        return self.states[-1]


@dataclass
class VectorField:
    """``dy/dt = drift(t, y, context)``, optionally with diffusion ``G(t, y, context)``.

    Rules act on the last axis of ``y`` and must be written with the polymorphic
    :mod:`deop.autodiff` functions when the field is to be integrated on a tape.
    """

    dim: int
    drift: Callable
    diffusion: Callable | None = None
    context: Any = None
    meta: dict = field(default_factory=dict)

    def __call__(self, t, y):
        return self.drift(t, y, self.context)

    def sigma(self, t, y):
        if self.diffusion is None:
            raise SolverError("vector field has no diffusion rule")
        return self.diffusion(t, y, self.context)


def _check_y0(field: VectorField, y0):
    shape = np.shape(ad.value_of(y0))
    if len(shape) == 0 or shape[-1] != field.dim:
        raise SolverError(f"initial state shape {shape} does not match field dim {field.dim}")


def rk4_step(f: Callable, t: float, y, dt: float):
    """One classical RK4 step of ``dy/dt = f(t, y)`` (tape-aware)."""
    k1 = f(t, y)
    k2 = f(t + 0.5 * dt, ad.lincomb([1.0, 0.5 * dt], [y, k1]))
    k3 = f(t + 0.5 * dt, ad.lincomb([1.0, 0.5 * dt], [y, k2]))
    k4 = f(t + dt, ad.lincomb([1.0, dt], [y, k3]))
    return ad.lincomb([1.0, dt / 6.0, dt / 3.0, dt / 3.0, dt / 6.0], [y, k1, k2, k3, k4])


def _guard(y_new, y_prev, cap: float):
    """Clamp to ``[-cap, cap]`` and hold the last finite state for non-finite rows.

    Returns the guarded state and a boolean mask (per batch row) of rows that
    were clamped or truncated in this step.
    """
    v = ad.value_of(y_new)
    finite = np.isfinite(v)
    over = np.abs(np.where(finite, v, 0.0)) > cap
    bad_row = (~finite).any(axis=-1)
    hit_row = bad_row | over.any(axis=-1)
    if not hit_row.any():
        return y_new, hit_row
    if bad_row.any():
        # hold the previous state on rows that left the finite range
        y_new = ad.where(bad_row[..., None], y_prev, y_new)
    if over.any():
        y_new = ad.clip(y_new, -cap, cap)
    return y_new, hit_row


def rk4_integrate(field: VectorField, y0, grid: TimeGrid, tape: ad.Tape | None = None,
                  cap: float = DEFAULT_CAP) -> StateTrajectory:
    """Classical RK4 on ``grid``.

    With ``tape`` (or a taped ``y0``) every stage is recorded and the returned
    ``states`` is a :class:`~deop.autodiff.Var`, so gradients reach ``y0`` and any
    taped parameters the drift closes over.
    """
    _check_y0(field, y0)
    if tape is not None and not isinstance(y0, ad.Var):
        y0 = tape.const(y0)
    taped = isinstance(y0, ad.Var)
    y = y0 if taped else np.array(y0, dtype=np.float64)
    batch_shape = np.shape(ad.value_of(y))[:-1]
    diverged = np.zeros(batch_shape, dtype=bool)
    first = np.full(batch_shape, grid.n_points, dtype=np.int64)
    ys = [y]
    t = grid.t0
    for k in range(1, grid.n_points):
        y_new = rk4_step(field, t, y, grid.dt)
        y_new, hit = _guard(y_new, y, cap)
        newly = hit & ~diverged
        first = np.where(newly, k, first)
        diverged |= hit
        y = y_new
        ys.append(y)
        t = grid.t0 + k * grid.dt
    states = ad.stack(ys) if taped else np.stack(ys)
    flag = diverged if batch_shape else bool(diverged)
    at = first if batch_shape else int(first)
    return StateTrajectory(grid, states, flag, at)


# ---------------------------------------------------------------------------
# Dormand-Prince 5(4)

_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4


def _hermite(t, ta, tb, ya, yb, fa, fb):
    h = tb - ta
    s = (t - ta) / h
    s2, s3 = s * s, s * s * s
    h10 = s3 - 2 * s2 + s
    h01 = -2 * s3 + 3 * s2
    h11 = s3 - s2
    # increment form keeps constant solutions exact
    return ya + h01 * (yb - ya) + h * (h10 * fa + h11 * fb)


def rk45_integrate(field: VectorField, y0, t_span: tuple[float, float], rtol: float = 1e-6,
                   atol: float = 1e-8, grid: TimeGrid | None = None, n_points: int = 1001,
                   cap: float = DEFAULT_CAP, first_step: float | None = None,
                   max_steps: int = 1_000_000, stats: dict | None = None) -> StateTrajectory:
    """Adaptive Dormand-Prince 5(4) with PI step control and Hermite dense output.

    A batch of initial states shares one step sequence, with the error norm
    taken as the worst row.  Output is resampled onto ``grid`` (by default a
    uniform grid of ``n_points`` over ``t_span``) by cubic Hermite interpolation
    between accepted steps, which is fourth-order accurate.
    """
    t0, t1 = float(t_span[0]), float(t_span[1])
    if not t1 > t0:
        raise SolverError(f"t_span must be increasing, got {t_span}")
    if not (rtol > 0 and atol > 0):
        raise SolverError("rtol and atol must be positive")
    _check_y0(field, y0)
    if grid is None:
        grid = TimeGrid.span(t0, t1, n_points)
    out_t = grid.times
    y = np.array(y0, dtype=np.float64)
    batch_shape = y.shape[:-1]
    out = np.empty((grid.n_points,) + y.shape)
    diverged = False
    first_bad = grid.n_points
    safety, fac_min, fac_max = 0.9, 0.2, 10.0
    alpha, beta = 0.7 / 5.0, 0.4 / 5.0
    err_prev = 1.0

    f = field(t0, y)
    if first_step is None:
        sc = atol + rtol * np.abs(y)
        d0 = np.sqrt(np.mean((y / sc) ** 2))
        d1 = np.sqrt(np.mean((f / sc) ** 2))
        h = 1e-6 if (d0 < 1e-5 or d1 < 1e-5) else 0.01 * d0 / d1
        h = min(h, t1 - t0)
    else:
        h = float(first_step)

    t = t0
    j = 0
    while j < grid.n_points and out_t[j] <= t0 + 1e-15 * max(1.0, abs(t0)):
        out[j] = y
        j += 1
    n_acc = n_rej = 0
    steps = 0
    while t < t1 and j < grid.n_points:
        steps += 1
        if steps > max_steps:
            diverged = True
            break
        if h < 1e-12:
            diverged = True
            break
        h = min(h, t1 - t)
        ks = [f]
        for s in range(1, 7):
            ys = y + h * sum(a * ks[i] for i, a in enumerate(_A[s]) if a != 0.0)
            ks.append(field(t + _C[s] * h, ys))
        y5 = y + h * sum(b * k for b, k in zip(_B5, ks) if b != 0.0)
        err_vec = h * sum(e * k for e, k in zip(_E, ks) if e != 0.0)
        sc = atol + rtol * np.maximum(np.abs(y), np.abs(y5))
        if not np.all(np.isfinite(y5)):
            err = np.inf
        else:
            err = float(np.max(np.sqrt(np.mean((err_vec / sc) ** 2, axis=-1))))
        if err <= 1.0:
            t_new = t + h
            f_new = ks[6]
            while j < grid.n_points and out_t[j] <= t_new + 1e-12 * max(1.0, abs(t_new)):
                out[j] = _hermite(min(out_t[j], t_new), t, t_new, y, y5, f, f_new)
                j += 1
            if np.any(np.abs(y5) > cap):
                diverged = True
                first_bad = j
                y5 = np.clip(y5, -cap, cap)
                out[j:] = y5
                j = grid.n_points
                break
            t, y, f = t_new, y5, f_new
            n_acc += 1
            fac = safety * err ** -alpha * err_prev ** beta if err > 0 else fac_max
            h *= min(fac_max, max(fac_min, fac))
            err_prev = max(err, 1e-4)
        else:
            n_rej += 1
            if np.isfinite(err):
                h *= max(fac_min, safety * err ** -alpha)
            else:
                h *= fac_min
    if j < grid.n_points:
        diverged = True
        first_bad = min(first_bad, j)
        out[j:] = np.clip(y, -cap, cap)
    if stats is not None:
        stats.update(accepted=n_acc, rejected=n_rej)
    if batch_shape:
        flag = np.full(batch_shape, diverged)
        at = np.full(batch_shape, first_bad)
    else:
        flag, at = diverged, first_bad
    return StateTrajectory(grid, out, flag, at)


# ---------------------------------------------------------------------------
# SDE

def euler_maruyama(field: VectorField, y0, grid: TimeGrid, rng: np.random.Generator | int,
                   cap: float = DEFAULT_CAP) -> StateTrajectory:
    """Ito Euler-Maruyama: ``y_{k+1} = y_k + F dt + G sqrt(dt) z_k`` with diagonal G."""
    if field.diffusion is None:
        raise SolverError("euler_maruyama needs a field with a diffusion rule")
    _check_y0(field, y0)
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    y = np.array(y0, dtype=np.float64)
    batch_shape = y.shape[:-1]
    out = np.empty((grid.n_points,) + y.shape)
    out[0] = y
    diverged = np.zeros(batch_shape, dtype=bool)
    first = np.full(batch_shape, grid.n_points, dtype=np.int64)
    sq = np.sqrt(grid.dt)
    for k in range(1, grid.n_points):
        t = grid.t0 + (k - 1) * grid.dt
        z = rng.standard_normal(y.shape)
        y_new = y + field(t, y) * grid.dt + field.sigma(t, y) * sq * z
        y_new, hit = _guard(y_new, y, cap)
        first = np.where(hit & ~diverged, k, first)
        diverged |= hit
        y = y_new
        out[k] = y
    flag = diverged if batch_shape else bool(diverged)
    at = first if batch_shape else int(first)
    return StateTrajectory(grid, out, flag, at)


# ---------------------------------------------------------------------------
# dense-output helper for coarse unrolls

@functools.lru_cache(maxsize=32)
def hermite_matrix(stride: int, n_coarse: int) -> tuple[np.ndarray, np.ndarray]:
    """Matrices (Hy, Hf) so that ``Hy @ Y + dt_c * Hf @ F`` fills a fine grid.

    ``Y`` and ``F`` hold states and derivatives at ``n_coarse`` coarse nodes
    spaced ``stride`` fine steps apart; the result has ``(n_coarse - 1) * stride + 1``
    rows, cubic-Hermite interpolated on each coarse interval.  Results are
    cached and read-only.
    """
    n_fine = (n_coarse - 1) * stride + 1
    Hy = np.zeros((n_fine, n_coarse))
    Hf = np.zeros((n_fine, n_coarse))
    c, r = np.divmod(np.arange(n_fine), stride)
    inner = c < n_coarse - 1
    i, c = np.flatnonzero(inner), c[inner]
    s = r[inner] / stride
    s2, s3 = s * s, s * s * s
    Hy[i, c] = 2 * s3 - 3 * s2 + 1
    Hf[i, c] = s3 - 2 * s2 + s
    Hy[i, c + 1] = -2 * s3 + 3 * s2
    Hf[i, c + 1] = s3 - s2
    Hy[~inner, n_coarse - 1] = 1.0
    Hy.flags.writeable = False
    Hf.flags.writeable = False
    return Hy, Hf


# ---------------------------------------------------------------------------
# CSV

def write_trajectory_csv(traj: StateTrajectory, path) -> None:
    """Write ``t,y_0..y_{d-1},diverged``; ``diverged`` is 1 from the first clamped row on."""
    states = np.asarray(traj.values)
    if states.ndim != 2:
        raise SolverError("CSV dump supports a single (unbatched) trajectory")
    d = states.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + [f"y_{i}" for i in range(d)] + ["diverged"])
        for k, (t, row) in enumerate(zip(traj.grid.times, states)):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in row]
                       + [int(k >= int(traj.diverged_at))])


def read_trajectory_csv(path) -> StateTrajectory:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header[0] != "t" or header[-1] != "diverged":
        raise SolverError(f"{path}: unexpected trajectory header {header}")
    data = np.array([[float(x) for x in r] for r in body])
    t = data[:, 0]
    grid = TimeGrid(float(t[0]), float(t[1] - t[0]), len(t))
    flags = data[:, -1] > 0
    at = int(np.argmax(flags)) if flags.any() else len(t)
    return StateTrajectory(grid, data[:, 1:-1], bool(flags.any()), at)
