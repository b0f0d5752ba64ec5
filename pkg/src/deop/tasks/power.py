"""Stability-constrained generator dispatch on a per-unit AC network.

Generator dynamics use the classical machine model with rotor speed in per
unit of synchronous speed: ``omega = 1`` is synchronous, and ``omega_s`` (rad/s)
converts the per-unit slip to an angle rate.  Decisions are laid out as
``u = [p_g (n_gen), q_g (n_gen), |V| (n_bus), theta (n_bus)]``.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import autodiff as ad
from ..solvers import StateTrajectory, TimeGrid, VectorField
from .base import TaskSpec

__all__ = [
    "OMEGA_S", "GeneratorParams", "PowerNetwork", "parse_matpower", "load_network",
    "default_network", "swing_field", "init_conditions", "init_residuals",
    "acopf_residuals", "acopf_residual_groups", "acopf_objective", "stability_violation",
    "perturb_loads", "PowerTask",
]

OMEGA_S = 2.0 * np.pi * 60.0


@dataclass(frozen=True)
class GeneratorParams:
    """Classical machine constants (per unit on the system base).

    Fields may also be arrays of equal length describing several machines,
    which then broadcast against batched states shaped (..., n_gen, 2).
    """

    M: float
    D: float
    P_m: float
    X_d: float
    omega_s: float = OMEGA_S
    delta_max: float = np.pi / 2

    def __post_init__(self):
        for name in ("M", "X_d", "omega_s", "delta_max"):
            if not np.all(np.asarray(getattr(self, name)) > 0):
                raise ValueError(f"generator parameter {name} must be positive")

    @staticmethod
    def stack(gens: Sequence["GeneratorParams"]) -> "GeneratorParams":
        return GeneratorParams(*(np.array([getattr(g, f) for g in gens], dtype=np.float64)
                                 for f in ("M", "D", "P_m", "X_d", "omega_s", "delta_max")))


# ---------------------------------------------------------------------------
# network data

@dataclass
class PowerNetwork:
    """Per-unit network tables plus machine data."""

    base_mva: float
    bus_ids: np.ndarray
    bus_type: np.ndarray
    pd: np.ndarray
    qd: np.ndarray
    gs: np.ndarray
    bs: np.ndarray
    vmin: np.ndarray
    vmax: np.ndarray
    gen_bus: np.ndarray          # bus index (0-based) per generator
    pmin: np.ndarray
    pmax: np.ndarray
    qmin: np.ndarray
    qmax: np.ndarray
    cost: np.ndarray             # (n_gen, 3): c2, c1, c0 for p in per unit
    f_bus: np.ndarray
    t_bus: np.ndarray
    r: np.ndarray
    x: np.ndarray
    b: np.ndarray
    rate: np.ndarray             # per unit; 0 means unlimited
    tap: np.ndarray
    shift: np.ndarray            # radians
    angmin: np.ndarray           # radians
    angmax: np.ndarray
    generators: list[GeneratorParams] = field(default_factory=list)
    name: str = "case"

    def __post_init__(self):
        refs = np.flatnonzero(self.bus_type == 3)
        if len(refs) != 1:
            raise ValueError(f"network needs exactly one reference bus, found {len(refs)}")
        self.ref = int(refs[0])
        for lo, hi, what in ((self.vmin, self.vmax, "voltage"), (self.pmin, self.pmax, "p"),
                             (self.qmin, self.qmax, "q"), (self.angmin, self.angmax, "angle")):
            if np.any(lo > hi):
                raise ValueError(f"{what} bounds are inverted")
        self._build_admittance()
        if not self._connected():
            raise ValueError("network graph is not connected")

    # sizes and layout
    @property
    def n_bus(self) -> int:
        return len(self.bus_ids)

    @property
    def n_gen(self) -> int:
        return len(self.gen_bus)

    @property
    def n_branch(self) -> int:
        return len(self.f_bus)

    @property
    def n_u(self) -> int:
        return 2 * self.n_gen + 2 * self.n_bus

    @property
    def slices(self) -> dict[str, slice]:
        g, n = self.n_gen, self.n_bus
        return {"p": slice(0, g), "q": slice(g, 2 * g), "vm": slice(2 * g, 2 * g + n),
                "va": slice(2 * g + n, 2 * g + 2 * n)}

    @property
    def load_buses(self) -> np.ndarray:
        return np.flatnonzero((self.pd != 0) | (self.qd != 0))

    def u_bounds(self, angle_bound: float = np.pi) -> tuple[np.ndarray, np.ndarray]:
        lo = np.concatenate([self.pmin, self.qmin, self.vmin, np.full(self.n_bus, -angle_bound)])
        hi = np.concatenate([self.pmax, self.qmax, self.vmax, np.full(self.n_bus, angle_bound)])
        return lo, hi

    def split(self, u):
        s = self.slices
        return u[..., s["p"]], u[..., s["q"]], u[..., s["vm"]], u[..., s["va"]]

    def generator_voltage(self, u):
        """(|V_g|, theta_g) at each generator's bus."""
        _, _, vm, va = self.split(u)
        return vm[..., self.gen_bus], va[..., self.gen_bus]

    def _build_admittance(self):
        nb, nl = self.n_bus, self.n_branch
        ys = 1.0 / (self.r + 1j * self.x)
        tap = np.where(self.tap == 0, 1.0, self.tap) * np.exp(1j * self.shift)
        ytt = ys + 1j * self.b / 2
        yff = ytt / (tap * np.conj(tap))
        yft = -ys / np.conj(tap)
        ytf = -ys / tap
        Cf = np.zeros((nl, nb))
        Ct = np.zeros((nl, nb))
        Cf[np.arange(nl), self.f_bus] = 1.0
        Ct[np.arange(nl), self.t_bus] = 1.0
        Yf = yff[:, None] * Cf + yft[:, None] * Ct
        Yt = ytf[:, None] * Cf + ytt[:, None] * Ct
        Ysh = self.gs + 1j * self.bs
        self.Ybus = Cf.T @ Yf + Ct.T @ Yt + np.diag(Ysh)
        self.Yf, self.Yt, self.Cf, self.Ct = Yf, Yt, Cf, Ct
        Cg = np.zeros((nb, self.n_gen))
        Cg[self.gen_bus, np.arange(self.n_gen)] = 1.0
        self.Cg = Cg

    def _connected(self) -> bool:
        seen = {0}
        frontier = [0]
        adj = {i: set() for i in range(self.n_bus)}
        for f, t in zip(self.f_bus, self.t_bus):
            adj[int(f)].add(int(t))
            adj[int(t)].add(int(f))
        while frontier:
            i = frontier.pop()
            for j in adj[i] - seen:
                seen.add(j)
                frontier.append(j)
        return len(seen) == self.n_bus

    def with_generators(self, gens: Sequence[GeneratorParams]) -> "PowerNetwork":
        if len(gens) != self.n_gen:
            raise ValueError(f"expected {self.n_gen} generator records, got {len(gens)}")
        return replace(self, generators=list(gens))

    @property
    def gen_stack(self) -> GeneratorParams:
        return GeneratorParams.stack(self.generators)


_BLOCK = re.compile(r"mpc\.(\w+)\s*=\s*\[(.*?)\]\s*;", re.S)
_SCALAR = re.compile(r"mpc\.(\w+)\s*=\s*([-+0-9.eE]+)\s*;")


def parse_matpower(text: str) -> dict[str, np.ndarray | float]:
    """Numeric tables and scalars of a MATPOWER-style case file."""
    clean = "\n".join(line.split("%", 1)[0] for line in text.splitlines())
    out: dict = {}
    for name, value in _SCALAR.findall(clean):
        out[name] = float(value)
    for name, body in _BLOCK.findall(clean):
        rows = [r.split() for r in re.split(r"[;\n]", body) if r.strip()]
        width = max(len(r) for r in rows)
        if any(len(r) != width for r in rows):
            raise ValueError(f"ragged rows in mpc.{name}")
        out[name] = np.array([[float(v) for v in r] for r in rows])
    for key in ("baseMVA", "bus", "gen", "branch"):
        if key not in out:
            raise ValueError(f"case file lacks mpc.{key}")
    return out


def _cost_per_unit(gencost: np.ndarray, base: float) -> np.ndarray:
    cost = np.zeros((len(gencost), 3))
    for k, row in enumerate(gencost):
        if int(row[0]) != 2:
            raise ValueError("only polynomial generator costs are supported")
        n = int(row[3])
        coeffs = list(row[4:4 + n])[::-1]          # c0, c1, c2 ...
        coeffs += [0.0] * (3 - len(coeffs))
        if len(coeffs) > 3 and any(coeffs[3:]):
            raise ValueError("cost polynomials above degree 2 are not supported")
        c0, c1, c2 = coeffs[:3]
        cost[k] = (c2 * base ** 2, c1 * base, c0)
    return cost


def load_network(case_path, dynamics_path=None) -> PowerNetwork:
    """Read a MATPOWER-style case (and optional generator-dynamics sidecar JSON)."""
    text = Path(case_path).read_text()
    mpc = parse_matpower(text)
    base = float(mpc["baseMVA"])
    bus, gen, br = mpc["bus"], mpc["gen"], mpc["branch"]
    gen = gen[gen[:, 7] > 0]
    br = br[br[:, 10] > 0]
    ids = bus[:, 0].astype(int)
    index = {b: k for k, b in enumerate(ids)}
    rate = br[:, 5] / base
    angmin = np.deg2rad(br[:, 11]) if br.shape[1] > 12 else np.full(len(br), -2 * np.pi)
    angmax = np.deg2rad(br[:, 12]) if br.shape[1] > 12 else np.full(len(br), 2 * np.pi)
    gencost = mpc.get("gencost")
    cost = _cost_per_unit(gencost, base) if gencost is not None else np.zeros((len(gen), 3))
    net = PowerNetwork(
        base_mva=base, bus_ids=ids, bus_type=bus[:, 1].astype(int),
        pd=bus[:, 2] / base, qd=bus[:, 3] / base, gs=bus[:, 4] / base, bs=bus[:, 5] / base,
        vmin=bus[:, 12].copy(), vmax=bus[:, 11].copy(),
        gen_bus=np.array([index[int(b)] for b in gen[:, 0]]),
        pmin=gen[:, 9] / base, pmax=gen[:, 8] / base, qmin=gen[:, 4] / base, qmax=gen[:, 3] / base,
        cost=cost,
        f_bus=np.array([index[int(b)] for b in br[:, 0]]),
        t_bus=np.array([index[int(b)] for b in br[:, 1]]),
        r=br[:, 2].copy(), x=br[:, 3].copy(), b=br[:, 4].copy(), rate=rate,
        tap=br[:, 8].copy(), shift=np.deg2rad(br[:, 9]), angmin=angmin, angmax=angmax,
        name=Path(case_path).stem,
    )
    if dynamics_path is not None:
        net = net.with_generators(load_dynamics(dynamics_path, net))
    return net


def load_dynamics(path, net: PowerNetwork) -> list[GeneratorParams]:
    """Sidecar JSON ``{"omega_s": .., "generators": {"<bus id>": {M, D, P_m, X_d, delta_max}}}``."""
    data = json.loads(Path(path).read_text())
    omega_s = float(data.get("omega_s", OMEGA_S))
    default_dmax = float(data.get("delta_max", np.pi / 2))
    recs = data["generators"]
    gens = []
    for k, b in enumerate(net.gen_bus):
        key = str(int(net.bus_ids[b]))
        if key not in recs:
            raise ValueError(f"dynamics sidecar has no record for generator at bus {key}")
        r = recs[key]
        gens.append(GeneratorParams(M=float(r["M"]), D=float(r["D"]), P_m=float(r["P_m"]),
                                    X_d=float(r["X_d"]), omega_s=omega_s,
                                    delta_max=float(r.get("delta_max", default_dmax))))
    return gens


def default_network() -> PowerNetwork:
    """Bundled WSCC 9-bus case with its machine data."""
    root = resources.files("deop") / "data"
    return load_network(root / "case9.m", root / "case9_dynamics.json")


# ---------------------------------------------------------------------------
# machine model

def _swing_drift(t, y, ctx):
    gen, E, v, th = ctx
    delta = y[..., 0]
    slip = y[..., 1] - 1.0
    ddelta = gen.omega_s * slip
    pe = ad.mul(ad.mul(E, v) * (1.0 / gen.X_d), ad.sin(ad.sub(delta, th)))
    domega = ad.mul(ad.sub(ad.sub(gen.P_m, gen.D * slip), pe), 1.0 / gen.M)
    return ad.stack([ddelta, domega], axis=-1)


def swing_field(gen: GeneratorParams, E_q0, v_g, theta_g) -> VectorField:
    """Classical machine ``(delta, omega)`` field with omega in per unit.

    ``d delta/dt = omega_s (omega - 1)``,
    ``d omega/dt = (P_m - D (omega - 1) - E v / X_d sin(delta - theta)) / M``.
    Arguments may be arrays (or taped values) broadcasting over the batch axes.
    """
    return VectorField(2, _swing_drift, context=(gen, E_q0, v_g, theta_g))


def init_conditions(p_r, q_r, v_g, theta_g, X_d, omega_s=OMEGA_S):
    """Steady-state ``(delta0, E_q0, omega0)``; ``omega0`` is 1 per unit (= ``omega_s`` rad/s)."""
    if np.any(ad.value_of(v_g) <= 0):
        raise ValueError("generator voltage magnitude must be positive")
    a = ad.mul(p_r, X_d)
    c = ad.add(ad.mul(q_r, X_d), ad.square(v_g))
    delta0 = ad.add(theta_g, ad.atan2(a, c))
    E = ad.div(ad.sqrt(ad.add(ad.square(a), ad.square(c))), v_g)
    omega0 = np.ones(np.shape(ad.value_of(delta0)))
    return delta0, E, omega0


def init_residuals(p_r, q_r, v_g, theta_g, X_d, delta0, E):
    """Residuals of the two steady-state power equations at ``(delta0, E)``."""
    r1 = E * v_g * np.sin(delta0 - theta_g) / X_d - p_r
    r2 = (E * v_g * np.cos(delta0 - theta_g) - v_g ** 2) / X_d - q_r
    return r1, r2


def stability_violation(traj: StateTrajectory | np.ndarray, delta_max) -> np.ndarray:
    """``max_t max(0, delta(t) - delta_max)``; reduces the time axis only."""
    y = traj.values if isinstance(traj, StateTrajectory) else np.asarray(traj)
    return np.maximum(y[..., 0] - delta_max, 0.0).max(axis=0)


# ---------------------------------------------------------------------------
# steady-state network equations (batched and tape-aware)

def _injections(vm, va, net: PowerNetwork):
    e = ad.mul(vm, ad.cos(va))
    f = ad.mul(vm, ad.sin(va))
    G, B = net.Ybus.real.T, net.Ybus.imag.T
    ir = ad.sub(ad.matmul(e, G), ad.matmul(f, B))
    ii = ad.add(ad.matmul(f, G), ad.matmul(e, B))
    P = ad.add(ad.mul(e, ir), ad.mul(f, ii))
    Q = ad.sub(ad.mul(f, ir), ad.mul(e, ii))
    return e, f, P, Q


def _branch_flow(e, f, Y, C):
    G, B = Y.real.T, Y.imag.T
    ir = ad.sub(ad.matmul(e, G), ad.matmul(f, B))
    ii = ad.add(ad.matmul(f, G), ad.matmul(e, B))
    ec, fc = ad.matmul(e, C.T), ad.matmul(f, C.T)
    P = ad.add(ad.mul(ec, ir), ad.mul(fc, ii))
    Q = ad.sub(ad.mul(fc, ir), ad.mul(ec, ii))
    return P, Q


def _loads(loads, net):
    if loads is None:
        return net.pd, net.qd
    loads = np.asarray(loads)
    if np.iscomplexobj(loads):
        return loads.real, loads.imag
    return loads[..., 0, :], loads[..., 1, :]


def acopf_residual_groups(u, net: PowerNetwork, loads=None) -> tuple[dict, dict]:
    """Named equality and inequality blocks; inequality entries > 0 are violations.

    ``loads`` is complex per bus (optionally batched); ``None`` uses the nominal loads.
    """
    pd, qd = _loads(loads, net)
    pg, qg, vm, va = net.split(u)
    e, f, P, Q = _injections(vm, va, net)
    Cg = net.Cg.T
    hp = ad.sub(ad.sub(ad.matmul(pg, Cg), pd), P)
    hq = ad.sub(ad.sub(ad.matmul(qg, Cg), qd), Q)
    h = {"flow_p": hp, "flow_q": hq, "ref_angle": va[..., net.ref:net.ref + 1]}

    g = {}
    g["voltage"] = ad.concat([ad.sub(vm, net.vmax), ad.sub(net.vmin, vm)], axis=-1)
    g["gen"] = ad.concat([ad.sub(pg, net.pmax), ad.sub(net.pmin, pg),
                          ad.sub(qg, net.qmax), ad.sub(net.qmin, qg)], axis=-1)
    dth = ad.sub(ad.matmul(va, net.Cf.T), ad.matmul(va, net.Ct.T))
    g["angle_diff"] = ad.concat([ad.sub(dth, net.angmax), ad.sub(net.angmin, dth)], axis=-1)
    limited = net.rate > 0
    if limited.any():
        Pf, Qf = _branch_flow(e, f, net.Yf, net.Cf)
        Pt, Qt = _branch_flow(e, f, net.Yt, net.Ct)
        sf = ad.sqrt(ad.add(ad.add(ad.square(Pf), ad.square(Qf)), 1e-12))
        st = ad.sqrt(ad.add(ad.add(ad.square(Pt), ad.square(Qt)), 1e-12))
        idx = np.flatnonzero(limited)
        rate = net.rate[idx]
        g["line_flow"] = ad.concat([ad.sub(sf[..., idx], rate), ad.sub(st[..., idx], rate)],
                                   axis=-1)
    return h, g


def acopf_residuals(u, net: PowerNetwork, loads=None):
    """Stacked ``(h, g)``: power balance (real, imaginary) and reference angle; bound slacks."""
    h, g = acopf_residual_groups(u, net, loads)
    return ad.concat(list(h.values()), axis=-1), ad.concat(list(g.values()), axis=-1)


def acopf_objective(u, net: PowerNetwork):
    """Sum of per-generator quadratic costs in per-unit active power."""
    pg = u[..., net.slices["p"]]
    c2, c1, c0 = net.cost[:, 0], net.cost[:, 1], net.cost[:, 2]
    per_gen = ad.add(ad.add(ad.mul(c2, ad.square(pg)), ad.mul(c1, pg)), c0)
    return ad.sum(per_gen, axis=-1)


def perturb_loads(net: PowerNetwork, n: int, rng, low: float = 0.8, high: float = 1.2):
    """``n`` complex load vectors, each nominal load scaled by its own ``U(low, high)`` factor."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    S0 = net.pd + 1j * net.qd
    idx = net.load_buses
    scale = rng.uniform(low, high, size=(n, len(idx)))
    S = np.tile(S0, (n, 1))
    S[:, idx] = S0[idx] * scale
    return S


# ---------------------------------------------------------------------------
# task

class PowerTask(TaskSpec):
    """Dispatch with per-generator swing dynamics and a rotor-angle limit.

    ``zeta`` holds the active then reactive demand of the load buses.  State
    trajectories are shaped (n_points, batch, n_gen, 2).
    """

    name = "power"

    def __init__(self, net: PowerNetwork | None = None, grid: TimeGrid | None = None,
                 stability_margin: float = 0.0):
        self.net = net if net is not None else default_network()
        if not self.net.generators:
            raise ValueError("power task needs generator dynamics")
        self.grid = grid if grid is not None else TimeGrid(0.0, 1e-3, 1000)
        self.gens = self.net.gen_stack
        self.stability_margin = float(stability_margin)
        self.n_u = self.net.n_u
        self.load_idx = self.net.load_buses
        self.n_zeta = 2 * len(self.load_idx)

    # parameters
    def zeta_from_loads(self, S: np.ndarray) -> np.ndarray:
        S = np.atleast_2d(S)
        return np.concatenate([S[:, self.load_idx].real, S[:, self.load_idx].imag], axis=1)

    def loads_from_zeta(self, zeta: np.ndarray) -> np.ndarray:
        zeta = np.atleast_2d(zeta)
        m = len(self.load_idx)
        S = np.zeros((len(zeta), self.net.n_bus), dtype=complex)
        S[:, self.load_idx] = zeta[:, :m] + 1j * zeta[:, m:]
        return S

    # problem pieces
    def objective(self, u, zeta=None, y_T=None):
        return acopf_objective(u, self.net)

    def static_residuals(self, u, zeta):
        return acopf_residual_groups(u, self.net, self.loads_from_zeta(ad.value_of(zeta)))

    def machine_inputs(self, u):
        """Per-generator ``(p, q, |V|, theta)`` each shaped (batch, n_gen)."""
        s = self.net.slices
        v, th = self.net.generator_voltage(u)
        return u[..., s["p"]], u[..., s["q"]], v, th

    def initial_state(self, u, zeta=None):
        """``(y0, E)`` with y0 shaped (batch, n_gen, 2)."""
        p, q, v, th = self.machine_inputs(u)
        delta0, E, omega0 = init_conditions(p, q, v, th, self.gens.X_d, self.gens.omega_s)
        y0 = ad.stack([delta0, ad.add(ad.mul(delta0, 0.0), 1.0)], axis=-1) \
            if isinstance(delta0, ad.Var) else np.stack([delta0, omega0], axis=-1)
        return y0, E

    def reference_field(self, u, zeta=None, E=None) -> VectorField:
        p, q, v, th = self.machine_inputs(u)
        if E is None:
            _, E = self.initial_state(u)
        return swing_field(self.gens, E, v, th)

    def delta_limit(self) -> np.ndarray:
        return self.gens.delta_max - self.stability_margin

    def dynamic_inequalities(self, u, y):
        """Rotor-angle excess ``delta(t) - delta_max`` on every grid point."""
        return {"stability": ad.sub(y[..., 0], self.delta_limit())}

    def simulate(self, u, grid: TimeGrid | None = None, substeps: int = 1):
        """Reference trajectories of ``u`` (batch, n_u) by batched RK4.

        ``substeps`` refines the integration step inside each grid interval.
        """
        from ..solvers import rk4_integrate
        grid = grid or self.grid
        u = np.atleast_2d(u)
        y0, E = self.initial_state(u)
        fld = self.reference_field(u, E=E)
        if substeps == 1:
            return rk4_integrate(fld, y0, grid)
        fine = TimeGrid(grid.t0, grid.dt / substeps, (grid.n_points - 1) * substeps + 1)
        tr = rk4_integrate(fld, y0, fine)
        return StateTrajectory(grid, tr.values[::substeps], tr.diverged,
                               np.minimum(tr.diverged_at // substeps, grid.n_points))

    def stability(self, u, grid: TimeGrid | None = None, margin: float = 0.0):
        """Reference violation magnitude per (instance, generator) against the true limit."""
        tr = self.simulate(u, grid)
        return stability_violation(tr, self.gens.delta_max - margin)

    def surrogate_inputs(self, u):
        """Per-machine surrogate start ``(delta0, 1)`` and augmentation ``(|V|, theta, E)``.

        Shapes (batch, n_gen, 2) and (batch, n_gen, 3); tape-aware in ``u``.
        """
        p, q, v, th = self.machine_inputs(u)
        delta0, E, _ = init_conditions(p, q, v, th, self.gens.X_d, self.gens.omega_s)
        if isinstance(delta0, ad.Var):
            y0 = ad.stack([delta0, ad.add(ad.mul(delta0, 0.0), 1.0)], axis=-1)
            aug = ad.stack([v, th, E], axis=-1)
        else:
            y0 = np.stack([delta0, np.ones_like(delta0)], axis=-1)
            aug = np.stack([v, th, E], axis=-1)
        return y0, aug, E

    def surrogate_problem(self, u):
        u = np.atleast_2d(u)
        y0, aug, E = self.surrogate_inputs(u)
        return y0, aug, swing_field(self.gens, E, aug[..., 0], aug[..., 1])

    def surrogate_unstable(self, traj) -> np.ndarray:
        """(batch, n_gen) flags: rotor angle above its limit or a clamped trajectory."""
        peak = np.asarray(traj.values)[..., 0].max(axis=0)
        return (peak > self.gens.delta_max) | np.asarray(traj.diverged)
