"""Common surface of a DE-constrained problem instance family."""
from __future__ import annotations

from abc import ABC, abstractmethod

import numpy as np

from ..solvers import TimeGrid, VectorField


class TaskSpec(ABC):
    """A family of problems ``min J(u, y)`` s.t. static ``g, h`` and ``dy = F(u, y) dt``.

    Subclasses expose the pieces the trainer needs.  All methods act on batches:
    ``zeta`` is (batch, n_zeta) and ``u`` is (batch, n_u), possibly taped.
    """

    name: str
    n_u: int
    n_zeta: int
    grid: TimeGrid

    @abstractmethod
    def objective(self, u, zeta, y_T=None):
        """Per-instance objective value."""

    @abstractmethod
    def static_residuals(self, u, zeta) -> tuple[dict, dict]:
        """``(h_groups, g_groups)``: named blocks, each (batch, m); g > 0 is a violation."""

    @abstractmethod
    def reference_field(self, u, zeta) -> VectorField:
        """Known physics F (and G) under decision ``u``."""

    @abstractmethod
    def initial_state(self, u, zeta):
        """Initial-condition map I."""

    def dynamic_inequalities(self, u, y) -> dict:
        """Time-indexed inequality blocks on a trajectory (none by default)."""
        return {}

    def surrogate_problem(self, inputs):
        """``(y0, aug, field)`` in surrogate coordinates for a batch of surrogate inputs."""
        raise NotImplementedError(f"{self.name} has no surrogate view")

    def surrogate_unstable(self, traj) -> np.ndarray:
        """Per-sample instability label of reference trajectories."""
        return np.asarray(traj.diverged)
