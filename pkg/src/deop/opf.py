"""Steady-state reference solvers: Newton-Raphson power flow and AC-OPF.

The AC-OPF solver is an augmented-Lagrangian method.  The outer loop updates
equality multipliers (power balance) and inequality multipliers (angle
differences, line flows); each inner problem keeps generator outputs, voltage
magnitudes and angles inside their boxes and is minimized by L-BFGS-B with
analytic gradients.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .tasks.power import PowerNetwork, acopf_objective, acopf_residuals

__all__ = ["SolveReport", "NonConvergence", "newton_power_flow", "solve_acopf", "AcopfConfig",
           "AcopfWarmStart"]


@dataclass
class SolveReport:
    converged: bool
    iterations: int
    eq_residual: float
    ineq_violation: float
    objective: float
    message: str = ""


class NonConvergence(RuntimeError):
    def __init__(self, message: str, best, report: SolveReport):
        super().__init__(message)
        self.best = best
        self.report = report


# ---------------------------------------------------------------------------
# power flow

def _dsbus_dv(Ybus, V):
    Ibus = Ybus @ V
    Vnorm = V / np.abs(V)
    dS_dVm = np.diag(V) @ np.conj(Ybus @ np.diag(Vnorm)) + np.diag(np.conj(Ibus) * Vnorm)
    dS_dVa = 1j * np.diag(V) @ np.conj(np.diag(Ibus) - Ybus @ np.diag(V))
    return dS_dVm, dS_dVa


def newton_power_flow(net: PowerNetwork, p_inj: np.ndarray, q_inj: np.ndarray,
                      v_set: np.ndarray | None = None, slack: int | None = None,
                      pv: np.ndarray | None = None, V0: np.ndarray | None = None,
                      tol: float = 1e-8, max_iter: int = 50):
    """Polar Newton-Raphson on the bus power mismatch.

    ``p_inj``/``q_inj`` are net injections (generation minus load) per bus; only
    the entries of PV buses (P) and PQ buses (P, Q) are used.  ``v_set`` fixes
    the magnitudes of the slack and PV buses.  Starts flat unless ``V0`` is given.
    """
    nb = net.n_bus
    slack = net.ref if slack is None else slack
    if pv is None:
        pv = np.array(sorted(set(net.gen_bus.tolist()) - {slack}), dtype=int)
    pq = np.array([i for i in range(nb) if i != slack and i not in set(pv.tolist())], dtype=int)
    vm = np.ones(nb) if v_set is None else np.where(np.isnan(v_set), 1.0, v_set)
    if V0 is not None:
        vm = np.abs(V0).copy()
        if v_set is not None:
            fixed = ~np.isnan(v_set)
            vm[fixed] = v_set[fixed]
    va = np.zeros(nb) if V0 is None else np.angle(V0)
    V = vm * np.exp(1j * va)
    Sspec = p_inj + 1j * q_inj
    pvpq = np.concatenate([pv, pq])
    it = 0
    mis = None
    for it in range(max_iter + 1):
        S = V * np.conj(net.Ybus @ V)
        dS = S - Sspec
        mis = np.concatenate([dS.real[pvpq], dS.imag[pq]])
        err = float(np.max(np.abs(mis))) if mis.size else 0.0
        if err < tol:
            return V, SolveReport(True, it, err, 0.0, float("nan"))
        if it == max_iter:
            break
        dVm, dVa = _dsbus_dv(net.Ybus, V)
        J = np.block([[dVa.real[np.ix_(pvpq, pvpq)], dVm.real[np.ix_(pvpq, pq)]],
                      [dVa.imag[np.ix_(pq, pvpq)], dVm.imag[np.ix_(pq, pq)]]])
        try:
            dx = np.linalg.solve(J, -mis)
        except np.linalg.LinAlgError:
            return V, SolveReport(False, it, err, 0.0, float("nan"), "singular Jacobian")
        va = np.angle(V)
        vm = np.abs(V)
        va[pvpq] += dx[:len(pvpq)]
        vm[pq] += dx[len(pvpq):]
        if not np.all(np.isfinite(vm)):
            break
        V = vm * np.exp(1j * va)
    err = float(np.max(np.abs(mis))) if mis is not None and mis.size else float("inf")
    return V, SolveReport(False, it, err, 0.0, float("nan"), "iteration limit")


# ---------------------------------------------------------------------------
# AC-OPF

@dataclass
class AcopfConfig:
    tol: float = 1e-5
    max_outer: int = 200
    rho0: float = 100.0
    rho_max: float = 1e8
    inner_maxiter: int = 500
    cost_scale: float | None = None


@dataclass
class AcopfWarmStart:
    x: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    rho: float


class _Model:
    """Numeric AC-OPF pieces over ``x = [p, q, vm, va without the reference bus]``."""

    def __init__(self, net: PowerNetwork, loads: np.ndarray, cost_scale: float):
        self.net = net
        self.S_d = loads
        nb, ng = net.n_bus, net.n_gen
        self.nb, self.ng = nb, ng
        self.va_idx = np.array([i for i in range(nb) if i != net.ref])
        self.cost = net.cost / cost_scale
        self.lim = np.flatnonzero(net.rate > 0)
        self.rate2 = net.rate[self.lim] ** 2
        n_ang = net.n_branch
        self.n_h = 2 * nb
        self.n_g = 2 * n_ang + 2 * len(self.lim)
        lo = np.concatenate([net.pmin, net.qmin, net.vmin, np.full(nb - 1, -np.pi)])
        hi = np.concatenate([net.pmax, net.qmax, net.vmax, np.full(nb - 1, np.pi)])
        self.bounds = list(zip(lo, hi))
        self.lo, self.hi = lo, hi
        # angle-difference rows as a linear map on va
        A = net.Cf - net.Ct
        self.A = A[:, self.va_idx]

    def unpack(self, x):
        ng, nb = self.ng, self.nb
        p, q, vm = x[:ng], x[ng:2 * ng], x[2 * ng:2 * ng + nb]
        va = np.zeros(nb)
        va[self.va_idx] = x[2 * ng + nb:]
        return p, q, vm, va

    def to_u(self, x):
        p, q, vm, va = self.unpack(x)
        return np.concatenate([p, q, vm, va])

    def from_u(self, u):
        net = self.net
        s = net.slices
        return np.concatenate([u[s["p"]], u[s["q"]], u[s["vm"]], u[s["va"]][self.va_idx]])

    def evaluate(self, x, need_jac=True):
        net = self.net
        p, q, vm, va = self.unpack(x)
        V = vm * np.exp(1j * va)
        Sbus = V * np.conj(net.Ybus @ V)
        mis = net.Cg @ (p + 1j * q) - self.S_d - Sbus
        h = np.concatenate([mis.real, mis.imag])
        dth = net.Cf @ va - net.Ct @ va
        g_ang = np.concatenate([dth - net.angmax, net.angmin - dth])
        f_obj = float(np.sum(self.cost[:, 0] * p ** 2 + self.cost[:, 1] * p + self.cost[:, 2]))
        df = np.zeros_like(x)
        df[:self.ng] = 2 * self.cost[:, 0] * p + self.cost[:, 1]
        out = {"h": h, "f": f_obj, "df": df}
        lim = self.lim
        if len(lim):
            Yf, Yt = net.Yf[lim], net.Yt[lim]
            Cf, Ct = net.Cf[lim], net.Ct[lim]
            If, It = Yf @ V, Yt @ V
            Sf = (Cf @ V) * np.conj(If)
            St = (Ct @ V) * np.conj(It)
            g_fl = np.concatenate([(np.abs(Sf) ** 2 - self.rate2) / net.rate[lim],
                                   (np.abs(St) ** 2 - self.rate2) / net.rate[lim]])
        else:
            g_fl = np.zeros(0)
        out["g"] = np.concatenate([g_ang, g_fl])
        if not need_jac:
            return out
        ng, nb = self.ng, self.nb
        dVm, dVa = _dsbus_dv(net.Ybus, V)
        dVa = dVa[:, self.va_idx]
        # d mis / d x, mis complex (nb)
        Jh = np.zeros((2 * nb, x.size))
        Jh[:nb, :ng] = net.Cg
        Jh[nb:, ng:2 * ng] = net.Cg
        Jh[:nb, 2 * ng:2 * ng + nb] = -dVm.real
        Jh[nb:, 2 * ng:2 * ng + nb] = -dVm.imag
        Jh[:nb, 2 * ng + nb:] = -dVa.real
        Jh[nb:, 2 * ng + nb:] = -dVa.imag
        Jg = np.zeros((self.n_g, x.size))
        nl = net.n_branch
        Jg[:nl, 2 * ng + nb:] = self.A
        Jg[nl:2 * nl, 2 * ng + nb:] = -self.A
        if len(lim):
            Vnorm = V / np.abs(V)
            rows = 2 * nl
            for S, I, Y, C in ((Sf, If, Yf, Cf), (St, It, Yt, Ct)):
                CV = C @ V
                dS_dVa = 1j * (np.conj(I)[:, None] * (C * V[None, :])
                               - CV[:, None] * np.conj(Y * V[None, :]))
                dS_dVm = CV[:, None] * np.conj(Y * Vnorm[None, :]) \
                    + np.conj(I)[:, None] * (C * Vnorm[None, :])
                dA_dVm = 2 * (S.real[:, None] * dS_dVm.real + S.imag[:, None] * dS_dVm.imag)
                dA_dVa = 2 * (S.real[:, None] * dS_dVa.real + S.imag[:, None] * dS_dVa.imag)
                k = len(lim)
                Jg[rows:rows + k, 2 * ng:2 * ng + nb] = dA_dVm / net.rate[lim][:, None]
                Jg[rows:rows + k, 2 * ng + nb:] = dA_dVa[:, self.va_idx] / net.rate[lim][:, None]
                rows += k
        out["Jh"] = Jh
        out["Jg"] = Jg
        return out


def _al_value(x, model, lam, mu, rho):
    ev = model.evaluate(x)
    h, g = ev["h"], ev["g"]
    shifted = np.maximum(0.0, mu + rho * g)
    val = ev["f"] + lam @ h + 0.5 * rho * h @ h + (shifted @ shifted - mu @ mu) / (2 * rho)
    grad = ev["df"] + ev["Jh"].T @ (lam + rho * h) + ev["Jg"].T @ shifted
    return val, grad


def _lagrangian_grad(model, x, lam, mu):
    ev = model.evaluate(x)
    return ev["df"] + ev["Jh"].T @ lam + ev["Jg"].T @ mu, ev


def _projected_grad(model, x, grad):
    step = np.clip(x - grad, model.lo, model.hi) - x
    return float(np.max(np.abs(step)))


def _fd_hessian(model, x, lam, mu, fi, step):
    n = x.size
    H = np.empty((fi.size, fi.size))
    for c, i in enumerate(fi):
        e = np.zeros(n)
        e[i] = step
        gp, _ = _lagrangian_grad(model, x + e, lam, mu)
        gm, _ = _lagrangian_grad(model, x - e, lam, mu)
        H[:, c] = (gp[fi] - gm[fi]) / (2 * step)
    return 0.5 * (H + H.T)


def _newton_kkt(model, x, lam, mu, fi, ai, max_iter=20, fd_step=1e-7):
    """Chord-Newton iterations on the KKT equations for a fixed active set.

    ``fi`` indexes free variables, ``ai`` active inequalities.  The Lagrangian
    Hessian is formed once by central differences of the analytic gradient;
    constraint Jacobians are refreshed every iteration.
    """
    x = x.copy()
    H = _fd_hessian(model, x, lam, mu, fi, fd_step)
    for _ in range(max_iter):
        _, ev = _lagrangian_grad(model, x, lam, mu)
        J = np.vstack([ev["Jh"][:, fi], ev["Jg"][ai][:, fi]])
        m = J.shape[0]
        K = np.block([[H, J.T], [J, np.zeros((m, m))]])
        # objective gradient on the right, so the solve returns the new multipliers
        rhs = -np.concatenate([ev["df"][fi], ev["h"], ev["g"][ai]])
        try:
            sol = np.linalg.solve(K, rhs)
        except np.linalg.LinAlgError:
            sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
        dx = sol[:fi.size]
        x[fi] += dx
        lam = sol[fi.size:fi.size + ev["h"].size]
        mu = np.zeros_like(mu)
        mu[ai] = sol[fi.size + ev["h"].size:]
        if not np.all(np.isfinite(x)) or np.max(np.abs(dx)) > 1.0:
            return None
        if np.max(np.abs(dx)) < 1e-13:
            break
    return x, lam, mu


def _kkt_polish(model, x, lam, mu, tol, max_changes=10):
    """Primal-dual active-set Newton refinement to a verified KKT point.

    Returns ``(x, lam, mu)`` when the point is feasible, has multipliers of the
    right sign and a projected Lagrangian gradient below ``tol``; else ``None``.
    """
    grad, _ = _lagrangian_grad(model, x, lam, mu)
    fixed_lo = (x <= model.lo + 1e-9) & (grad > 0)
    fixed_hi = (x >= model.hi - 1e-9) & (grad < 0)
    act = mu > 0
    for _ in range(max_changes):
        x_fix = x.copy()
        x_fix[fixed_lo] = model.lo[fixed_lo]
        x_fix[fixed_hi] = model.hi[fixed_hi]
        fi = np.flatnonzero(~(fixed_lo | fixed_hi))
        ai = np.flatnonzero(act)
        out = _newton_kkt(model, x_fix, lam, mu, fi, ai)
        if out is None:
            return None
        xn, lamn, mun = out
        grad, ev = _lagrangian_grad(model, xn, lamn, mun)
        changed = False
        below = xn < model.lo - 1e-12
        above = xn > model.hi + 1e-12
        if below.any() or above.any():
            fixed_lo |= below
            fixed_hi |= above
            changed = True
        wrong_lo = fixed_lo & (grad < -1e-12)
        wrong_hi = fixed_hi & (grad > 1e-12)
        if wrong_lo.any() or wrong_hi.any():
            fixed_lo &= ~wrong_lo
            fixed_hi &= ~wrong_hi
            changed = True
        neg = act & (mun < 0)
        viol = ~act & (ev["g"] > 0)
        if neg.any() or viol.any():
            act = (act & ~neg) | viol
            changed = True
        if not changed:
            x, lam, mu = np.clip(xn, model.lo, model.hi), lamn, mun
            break
        x = np.clip(xn, model.lo, model.hi)
        lam = lamn
        mu = np.maximum(mun, 0.0)
    else:
        return None
    grad, ev = _lagrangian_grad(model, x, lam, mu)
    if np.max(np.abs(ev["h"])) >= tol or (ev["g"].size and np.max(ev["g"]) >= tol):
        return None
    if _projected_grad(model, x, grad) >= tol:
        return None
    return x, lam, mu


def solve_acopf(net: PowerNetwork, loads: np.ndarray | None = None,
                config: AcopfConfig | None = None, warm: AcopfWarmStart | None = None,
                raise_on_failure: bool = True):
    """Local AC-OPF optimum ``u*`` (layout of :class:`PowerNetwork`) with a :class:`SolveReport`.

    Returns ``(u, report, warm_state)``; the warm state can seed a nearby instance.
    """
    config = config or AcopfConfig()
    if loads is None:
        loads = net.pd + 1j * net.qd
    scale = config.cost_scale
    if scale is None:
        scale = max(1.0, float(np.sum(np.abs(net.cost[:, 0]) + np.abs(net.cost[:, 1]))))
    model = _Model(net, np.asarray(loads, dtype=complex), scale)
    if warm is None:
        x = np.concatenate([(net.pmin + net.pmax) / 2, (net.qmin + net.qmax) / 2 * 0,
                            np.clip(np.ones(net.n_bus), net.vmin, net.vmax),
                            np.zeros(net.n_bus - 1)])
        lam = np.zeros(model.n_h)
        mu = np.zeros(model.n_g)
        rho = config.rho0
    else:
        x, lam, mu, rho = warm.x.copy(), warm.lam.copy(), warm.mu.copy(), warm.rho
    x = np.clip(x, model.lo, model.hi)
    if warm is not None:
        # nearby instances usually share the active set: try Newton on the KKT system first
        polished = _kkt_polish(model, x, lam, mu, config.tol)
        if polished is not None:
            x, lam, mu = polished
            u = model.to_u(x)
            hh, gg = acopf_residuals(u, net, loads)
            rep = SolveReport(True, 0, float(np.max(np.abs(hh))), float(max(0.0, np.max(gg))),
                              float(acopf_objective(u, net)))
            return u, rep, AcopfWarmStart(x, lam, mu, rho)
    best = None
    h_prev = np.inf
    for outer in range(1, config.max_outer + 1):
        res = minimize(_al_value, x, args=(model, lam, mu, rho), jac=True, method="L-BFGS-B",
                       bounds=model.bounds,
                       options={"maxiter": config.inner_maxiter, "ftol": 1e-15, "gtol": 1e-10,
                                "maxcor": 30})
        x = res.x
        ev = model.evaluate(x)
        h, g = ev["h"], ev["g"]
        h_err = float(np.max(np.abs(h)))
        g_err = float(max(0.0, np.max(g))) if g.size else 0.0
        lam = lam + rho * h
        mu = np.maximum(0.0, mu + rho * g)
        viol = max(h_err, g_err)
        if best is None or viol < best[1]:
            best = (x.copy(), viol)
        if viol < 1e-3:
            polished = _kkt_polish(model, x, lam, mu, config.tol)
            if polished is not None:
                x, lam, mu = polished
                u = model.to_u(x)
                hh, gg = acopf_residuals(u, net, loads)
                rep = SolveReport(True, outer, float(np.max(np.abs(hh))),
                                  float(max(0.0, np.max(gg))), float(acopf_objective(u, net)))
                return u, rep, AcopfWarmStart(x, lam, mu, rho)
        if viol > config.tol and viol > 0.25 * h_prev:
            rho = min(rho * 10.0, config.rho_max)
        h_prev = viol
    u = model.to_u(best[0])
    obj = float(acopf_objective(u, net))
    hh, gg = acopf_residuals(u, net, loads)
    rep = SolveReport(False, config.max_outer, float(np.max(np.abs(hh))),
                      float(max(0.0, np.max(gg))), obj, "outer iteration limit")
    if raise_on_failure:
        raise NonConvergence("AC-OPF did not converge", u, rep)
    return u, rep, None
