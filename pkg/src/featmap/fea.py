"""Fixed-grid plane-stress elasticity on square bilinear elements.

Element stiffnesses are the fully-solid matrix scaled per element by the
physical density, K_e = mu_e * K_e0. Supports are imposed by eliminating
the fixed rows and columns, so the reduced matrix stays symmetric
positive definite and one factorization serves both the solve and later
adjoint right-hand sides.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

__all__ = [
    "AnalysisError",
    "FeaProblem",
    "Solution",
    "element_stiffness",
    "element_dof_matrix",
    "assemble_and_solve",
    "compliance_and_volume",
    "node_id",
    "nodes_where",
]

# 2x2 Gauss abscissa on [-1, 1]
_G = 1.0 / np.sqrt(3.0)


class AnalysisError(RuntimeError):
    """The linear system could not be solved reliably."""


def node_id(grid, ix, iy):
    """Node index for grid coordinates; dofs are (2n, 2n+1) = (ux, uy)."""
    return iy * (grid.nx + 1) + ix


def nodes_where(grid, predicate):
    """Node ids whose coordinates satisfy predicate(x, y) (vectorized)."""
    xy = grid.node_coords()
    return np.flatnonzero(predicate(xy[:, 0], xy[:, 1]))


def element_dof_matrix(grid):
    """(nel, 8) dof indices per element, nodes counterclockwise from bottom-left."""
    nx = grid.nx
    ex, ey = grid.element_xy(np.arange(grid.n_elements))
    n1 = ey * (nx + 1) + ex
    nodes = np.stack([n1, n1 + 1, n1 + nx + 2, n1 + nx + 1], axis=1)
    return (2 * nodes[:, :, None] + np.arange(2)).reshape(-1, 8)


def element_stiffness(material):
    """Fully-solid 8x8 stiffness of a square bilinear element, 2x2 Gauss.

    For a square plane-stress element the edge length cancels, so the
    matrix depends only on E, nu and thickness.
    """
    E, nu, t = material.E0, material.nu, material.thickness
    D = E / (1.0 - nu * nu) * np.array([[1.0, nu, 0.0], [nu, 1.0, 0.0], [0.0, 0.0, (1.0 - nu) / 2.0]])
    K = np.zeros((8, 8))
    for xi in (-_G, _G):
        for eta in (-_G, _G):
            # dN/dxi, dN/deta for nodes BL, BR, TR, TL on [-1, 1]^2
            dndxi = 0.25 * np.array([-(1 - eta), (1 - eta), (1 + eta), -(1 + eta)])
            dndeta = 0.25 * np.array([-(1 - xi), -(1 + xi), (1 + xi), (1 - xi)])
            # unit-square geometry: x = (xi + 1) l/2, so dN/dx = (2/l) dN/dxi
            # with det J = (l/2)^2; the l's cancel in B^T D B detJ for 2D
            B = np.zeros((3, 8))
            B[0, 0::2] = 2.0 * dndxi
            B[1, 1::2] = 2.0 * dndeta
            B[2, 0::2] = 2.0 * dndeta
            B[2, 1::2] = 2.0 * dndxi
            K += t * 0.25 * B.T @ D @ B
    return 0.5 * (K + K.T)


@dataclass
class FeaProblem:
    """Grid, supports, loads and material for one analysis."""

    grid: object
    fixed_dofs: np.ndarray
    load: np.ndarray
    material: object

    def __post_init__(self):
        ndof = 2 * self.grid.n_nodes
        self.fixed_dofs = np.unique(np.asarray(self.fixed_dofs, dtype=int))
        self.load = np.asarray(self.load, dtype=float)
        if self.load.shape != (ndof,):
            raise ValueError(f"load vector must have {ndof} entries, got {self.load.shape}")
        if not np.isfinite(self.load).all():
            raise ValueError("loads must be finite")
        if len(self.fixed_dofs) < 3:
            raise ValueError("need at least 3 fixed dofs to remove rigid-body modes")
        if self.fixed_dofs.min() < 0 or self.fixed_dofs.max() >= ndof:
            raise ValueError("fixed dof index out of range")

    @property
    def ndof(self):
        return 2 * self.grid.n_nodes

    @property
    def free_dofs(self):
        return np.setdiff1d(np.arange(self.ndof), self.fixed_dofs)


@dataclass
class Solution:
    """Displacements plus everything an adjoint solve needs again."""

    problem: FeaProblem
    u: np.ndarray
    J: float
    V: float
    mu: np.ndarray
    rho: np.ndarray
    factor: object = field(repr=False)
    free: np.ndarray = field(repr=False)

    def solve_adjoint(self, rhs):
        """Solve K lam = rhs with the existing factorization."""
        lam = np.zeros(self.problem.ndof)
        lam[self.free] = self.factor.solve(np.asarray(rhs, dtype=float)[self.free])
        return lam


def assemble_and_solve(problem, mu, rho=None):
    """Assemble K(mu), solve K u = f and evaluate compliance and volume.

    mu are the physical densities scaling the solid element matrix; rho
    (default mu) are the unpenalized densities used for the volume.
    """
    grid = problem.grid
    mu = np.asarray(mu, dtype=float)
    if mu.shape != (grid.n_elements,):
        raise ValueError(f"need one physical density per element, got {mu.shape}")
    if (mu <= 0.0).any():
        raise AnalysisError("nonpositive physical density; use rho_min > 0")
    rho = mu if rho is None else np.asarray(rho, dtype=float)

    ke = element_stiffness(problem.material)
    edof = element_dof_matrix(grid)
    rows = np.repeat(edof, 8, axis=1).ravel()
    cols = np.tile(edof, (1, 8)).ravel()
    data = (mu[:, None] * ke.ravel()[None, :]).ravel()
    K = sp.coo_matrix((data, (rows, cols)), shape=(problem.ndof, problem.ndof)).tocsc()

    free = problem.free_dofs
    kff = K[free][:, free]
    f_free = problem.load[free]
    try:
        factor = splu(kff)
        u_free = factor.solve(f_free)
    except RuntimeError as err:
        raise AnalysisError(f"stiffness factorization failed: {err}") from err
    if not np.isfinite(u_free).all():
        raise AnalysisError("non-finite displacements; the system is singular or ill conditioned")

    f_norm = np.linalg.norm(f_free)
    if f_norm > 0.0:
        residual = np.linalg.norm(kff @ u_free - f_free) / f_norm
        if residual > 1.0e-10:
            raise AnalysisError(f"solver residual {residual:.3e} exceeds 1e-10; system likely ill conditioned")

    u = np.zeros(problem.ndof)
    u[free] = u_free
    J = float(problem.load @ u)
    V = float(rho.sum() * grid.l_el**2 * problem.material.thickness)
    return Solution(problem, u, J, V, mu, rho, factor, free)


def compliance_and_volume(solution, densities=None):
    """(J, V); volume recomputed from the given unpenalized densities."""
    if densities is None:
        return solution.J, solution.V
    grid = solution.problem.grid
    V = float(np.asarray(densities, dtype=float).sum() * grid.l_el**2 * solution.problem.material.thickness)
    return solution.J, V
