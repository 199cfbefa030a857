"""Shared construction helpers for the test suite."""

import numpy as np

from pnpns.grid import CellField, EdgeFieldX, EdgeFieldY, GridSpec, MacVelocity, discrete_curl


def random_cell(grid: GridSpec, rng) -> CellField:
    return CellField(grid, rng.standard_normal((grid.n, grid.n)))


def random_edge_x(grid: GridSpec, rng) -> EdgeFieldX:
    return EdgeFieldX(grid, rng.standard_normal((grid.n, grid.n)))


def random_edge_y(grid: GridSpec, rng) -> EdgeFieldY:
    return EdgeFieldY(grid, rng.standard_normal((grid.n, grid.n)))


def random_mac(grid: GridSpec, rng) -> MacVelocity:
    return MacVelocity(random_edge_x(grid, rng), random_edge_y(grid, rng))


def random_solenoidal(grid: GridSpec, rng) -> MacVelocity:
    """A discretely divergence-free velocity (curl of a random stream field)."""
    return discrete_curl(random_cell(grid, rng))


def random_positive_cell(grid: GridSpec, rng, low=0.2, high=1.5) -> CellField:
    return CellField(grid, rng.uniform(low, high, (grid.n, grid.n)))


def cosine_benchmark_functions():
    """The smooth benchmark initial data used throughout the experiments."""
    return {
        "p": lambda x, y: 0.6 + 0.2 * np.cos(np.pi * x) * np.cos(0.5 * np.pi * y),
        "n": lambda x, y: 0.6 + 0.2 * np.cos(0.5 * np.pi * x) * np.cos(np.pi * y),
        "u": lambda x, y: -0.25 * np.sin(np.pi * x) ** 2 * np.sin(2 * np.pi * y),
        "v": lambda x, y: 0.25 * np.sin(2 * np.pi * x) * np.sin(np.pi * y) ** 2,
        "psi": lambda x, y: np.cos(0.5 * np.pi * x) * np.cos(0.5 * np.pi * y),
    }
