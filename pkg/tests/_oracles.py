"""Brute-force oracles shared by unit and acceptance tests."""
import numpy as np


def simplex_grid(step=1e-3):
    """All points of the 3-simplex lattice with spacing ``step``."""
    m = int(round(1 / step))
    i, j = np.meshgrid(np.arange(m + 1), np.arange(m + 1), indexing="ij")
    keep = i + j <= m
    a, b = i[keep] / m, j[keep] / m
    return np.stack([a, b, 1.0 - a - b], axis=1)


def grid_projection(v, grid):
    return grid[np.argmin(np.sum((grid - v) ** 2, axis=1))]


def grid_markowitz(y, Sigma, grid):
    obj = np.einsum("ki,ij,kj->k", grid, Sigma, grid) - grid @ y
    return grid[np.argmin(obj)]
