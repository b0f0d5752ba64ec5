"""Dynamic Markowitz allocation under geometric Brownian motion prices.

Prices follow ``dy_i = mu_i y_i dt + sigma_i y_i dW_i`` with time in seconds.
:func:`make_params` draws drift and volatility per horizon (``mu T`` in
``[0.5, 1]``) so that ``E[y(T)] = zeta * exp(mu T)`` stays of order one.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import autodiff as ad
from ..solvers import TimeGrid, VectorField
from .base import TaskSpec

__all__ = [
    "PortfolioParams", "make_params", "gbm_field", "portfolio_objective", "project_simplex",
    "solve_markowitz", "MarkowitzReport", "MarkowitzError", "optimality_gap",
    "sample_initial_prices", "PortfolioTask", "GapUndefined",
]


@dataclass
class PortfolioParams:
    """Market description shared by all instances of a dataset."""

    n: int
    mu: np.ndarray
    sigma: np.ndarray
    Sigma: np.ndarray
    T: float = 28_800.0
    dt: float = 100.0
    seed: int | None = None

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        self.Sigma = np.asarray(self.Sigma, dtype=np.float64)
        if self.mu.shape != (self.n,) or self.sigma.shape != (self.n,):
            raise ValueError("mu and sigma must have one entry per asset")
        if self.Sigma.shape != (self.n, self.n) or not np.allclose(self.Sigma, self.Sigma.T):
            raise ValueError("Sigma must be a symmetric n x n matrix")
        if np.min(np.linalg.eigvalsh(self.Sigma)) < -1e-10:
            raise ValueError("Sigma must be positive semidefinite")
        if np.any(self.sigma < 0) or self.T <= 0:
            raise ValueError("volatilities must be >= 0 and the horizon positive")

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(0.0, self.dt, int(round(self.T / self.dt)) + 1)

    def to_json(self) -> str:
        return json.dumps({"n": self.n, "mu": self.mu.tolist(), "sigma": self.sigma.tolist(),
                           "Sigma": self.Sigma.tolist(), "T": self.T, "dt": self.dt,
                           "seed": self.seed}, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "PortfolioParams":
        d = json.loads(text)
        return cls(int(d["n"]), np.array(d["mu"]), np.array(d["sigma"]), np.array(d["Sigma"]),
                   float(d["T"]), float(d["dt"]), d.get("seed"))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "PortfolioParams":
        return cls.from_json(Path(path).read_text())


def make_params(n: int = 10, seed: int = 0, T: float = 28_800.0, dt: float = 100.0,
                risk_scale: float = 200.0, ridge: float = 0.1) -> PortfolioParams:
    """Random market with ``Sigma = c (A A^T / n + ridge I)``.

    Per-horizon drift ``mu T ~ U(0.5, 1)`` and volatility ``sigma sqrt(T) ~ U(0.05, 0.1)``.
    """
    rng = np.random.default_rng(seed)
    mu = rng.uniform(0.5, 1.0, n) / T
    sigma = rng.uniform(0.05, 0.1, n) / np.sqrt(T)
    A = rng.standard_normal((n, n))
    Sigma = risk_scale * (A @ A.T / n + ridge * np.eye(n))
    return PortfolioParams(n, mu, sigma, 0.5 * (Sigma + Sigma.T), T, dt, seed)


def sample_initial_prices(n_instances: int, n: int, rng, median: float = 100.0,
                          log_sd: float = 0.25) -> np.ndarray:
    """Synthetic log-normal initial prices, one row per instance."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    return median * np.exp(log_sd * rng.standard_normal((n_instances, n)))


def gbm_field(params: PortfolioParams) -> VectorField:
    """GBM drift ``mu_i y_i`` and diffusion ``sigma_i y_i``."""
    a, b = params.mu, params.sigma
    return VectorField(params.n, lambda t, y, c: ad.mul(a, y), lambda t, y, c: ad.mul(b, y))


def portfolio_objective(u, y_T, Sigma):
    """``-y_T . u + u^T Sigma u`` (batched over leading axes)."""
    ret = ad.sum(ad.mul(y_T, u), axis=-1)
    risk = ad.sum(ad.mul(ad.matmul(u, np.asarray(Sigma).T), u), axis=-1)
    return ad.sub(risk, ret)


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of each row onto ``{u >= 0, sum u = 1}`` (sorted thresholds)."""
    v = np.asarray(v, dtype=np.float64)
    squeeze = v.ndim == 1
    V = np.atleast_2d(v)
    n = V.shape[1]
    s = -np.sort(-V, axis=1)
    css = np.cumsum(s, axis=1) - 1.0
    k = np.arange(1, n + 1)
    cond = s - css / k > 0
    rho = n - 1 - np.argmax(cond[:, ::-1], axis=1)
    tau = css[np.arange(len(V)), rho] / (rho + 1)
    U = np.maximum(V - tau[:, None], 0.0)
    # exact normalization for the positive part
    U /= U.sum(axis=1, keepdims=True)
    return U[0] if squeeze else U


@dataclass
class MarkowitzReport:
    converged: bool
    iterations: int
    pg_norm: float
    objective: np.ndarray


class MarkowitzError(RuntimeError):
    def __init__(self, message, best, report):
        super().__init__(message)
        self.best = best
        self.report = report


class GapUndefined(ValueError):
    pass


def solve_markowitz(y_T, Sigma, tol: float = 1e-8, max_iter: int = 50_000,
                    raise_on_failure: bool = True):
    """Minimize ``-y.u + u' Sigma u`` over the simplex by accelerated projected gradient.

    Rows of ``y_T`` are independent instances.  Stops when the gradient-mapping
    norm ``L ||u - P(u - grad / L)||`` falls below ``tol`` for every row.
    Returns ``(u, report)``.
    """
    Y = np.atleast_2d(np.asarray(y_T, dtype=np.float64))
    S = np.asarray(Sigma, dtype=np.float64)
    n = Y.shape[1]
    L = 2.0 * max(float(np.max(np.linalg.eigvalsh(S))), 1e-12)
    u = np.full_like(Y, 1.0 / n)
    z = u.copy()
    t = np.ones(len(Y))
    active = np.ones(len(Y), dtype=bool)
    pg = np.full(len(Y), np.inf)
    it = 0
    for it in range(1, max_iter + 1):
        idx = np.flatnonzero(active)
        zi = z[idx]
        grad = 2.0 * zi @ S - Y[idx]
        u_new = project_simplex(zi - grad / L)
        # adaptive restart when the momentum direction stops decreasing the objective
        restart = np.sum((zi - u_new) * (u_new - u[idx]), axis=1) > 0
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t[idx] ** 2))
        beta = np.where(restart, 0.0, (t[idx] - 1.0) / t_new)
        z[idx] = u_new + beta[:, None] * (u_new - u[idx])
        t[idx] = np.where(restart, 1.0, t_new)
        u[idx] = u_new
        g_u = 2.0 * u_new @ S - Y[idx]
        pg[idx] = L * np.linalg.norm(u_new - project_simplex(u_new - g_u / L), axis=1)
        done = pg[idx] < tol
        active[idx[done]] = False
        if not active.any():
            break
    obj = portfolio_objective(u, Y, S)
    rep = MarkowitzReport(bool(not active.any()), it, float(np.max(pg)), obj)
    if np.ndim(y_T) == 1:
        u = u[0]
    if active.any() and raise_on_failure:
        raise MarkowitzError("projected gradient did not converge", u, rep)
    return u, rep


def optimality_gap(u_hat, u_star, y_T, Sigma) -> np.ndarray:
    """``|L(u*) - L(u_hat)| / |L(u*)| * 100`` evaluated at the realized prices ``y_T``."""
    Ls = np.asarray(portfolio_objective(np.asarray(u_star), np.asarray(y_T), Sigma))
    Lh = np.asarray(portfolio_objective(np.asarray(u_hat), np.asarray(y_T), Sigma))
    if np.any(np.abs(Ls) < 1e-12):
        raise GapUndefined("optimal objective is zero; the gap is undefined")
    return np.abs(Ls - Lh) / np.abs(Ls) * 100.0


class PortfolioTask(TaskSpec):
    """Allocation with GBM prices; ``zeta`` is the initial price vector."""

    name = "portfolio"

    def __init__(self, params: PortfolioParams):
        self.params = params
        self.n_u = params.n
        self.n_zeta = params.n
        self.grid = params.grid

    def objective(self, u, zeta=None, y_T=None):
        return portfolio_objective(u, y_T, self.params.Sigma)

    def static_residuals(self, u, zeta=None):
        h = {"budget": ad.sub(ad.sum(u, axis=-1, keepdims=True), 1.0)}
        g = {"nonneg": ad.neg(u)}
        return h, g

    def reference_field(self, u=None, zeta=None) -> VectorField:
        return gbm_field(self.params)

    def initial_state(self, u=None, zeta=None):
        return zeta

    def surrogate_problem(self, zeta):
        """Relative prices ``y / zeta`` start at one and follow the same GBM."""
        zeta = np.atleast_2d(zeta)
        if np.any(zeta <= 0):
            raise ValueError("initial prices must be positive")
        return np.ones_like(zeta), np.zeros((len(zeta), 0)), gbm_field(self.params)
