"""Adjoint and chain-rule sensitivities with a finite-difference harness.

Density sensitivities live on elements; chaining them through the mapped
density jacobian turns them into feature-parameter gradients. Compliance
is self-adjoint, so it never pays an extra solve; other responses reuse
the stiffness factorization for one back-substitution.
"""

from __future__ import annotations

from collections import namedtuple
from dataclasses import dataclass, field

import numpy as np

from .fea import element_dof_matrix, element_stiffness
from .material import interpolate

__all__ = [
    "GradientReport",
    "density_sensitivity",
    "adjoint_density_sensitivity",
    "shape_sensitivity",
    "fd_verify",
]


def _element_energies(solution):
    ke = element_stiffness(solution.problem.material)
    edof = element_dof_matrix(solution.problem.grid)
    ue = solution.u[edof]
    return np.einsum("ei,ij,ej->e", ue, ke, ue)


def density_sensitivity(solution, response="compliance"):
    """d(response)/d(rho_e) at the solved state.

    compliance uses lambda = -u, giving -(dmu/drho) u_e^T K_e0 u_e per
    element; volume is the constant element volume since it integrates
    the unpenalized density.
    """
    prob = solution.problem
    if response == "compliance":
        _, dmu = interpolate(prob.material, solution.rho)
        return -dmu * _element_energies(solution)
    if response == "volume":
        return np.full(prob.grid.n_elements, prob.grid.l_el**2 * prob.material.thickness)
    raise ValueError(f"unknown response '{response}', expected compliance or volume")


def adjoint_density_sensitivity(solution, dR_du, dR_drho=None):
    """Density gradient of a general response R(u(rho), rho).

    dR_du is the displacement partial, dR_drho the explicit density
    partial (defaults to zero). One adjoint back-substitution on the
    existing factorization.
    """
    lam = solution.solve_adjoint(dR_du)
    ke = element_stiffness(solution.problem.material)
    edof = element_dof_matrix(solution.problem.grid)
    _, dmu = interpolate(solution.problem.material, solution.rho)
    implicit = -dmu * np.einsum("ei,ij,ej->e", lam[edof], ke, solution.u[edof])
    if dR_drho is None:
        return implicit
    return implicit + np.asarray(dR_drho, dtype=float)


def shape_sensitivity(density_grad, density_jacobian):
    """Chain element-density gradients to feature parameters."""
    if density_jacobian is None:
        raise ValueError("density jacobian missing; map the field with want_jacobian=True")
    return np.asarray(density_jacobian.T @ np.asarray(density_grad, dtype=float)).ravel()


@dataclass
class GradientReport:
    """Analytic gradient next to its finite-difference check."""

    params: list
    analytic: np.ndarray
    fd: np.ndarray | None = None
    rel_err: np.ndarray | None = None
    flags: list = field(default_factory=list)
    tol: float = 1.0e-4

    @property
    def ok(self):
        if self.rel_err is None or not np.isfinite(self.analytic).all():
            return False
        return all(f == "" for f in self.flags)

    @property
    def max_rel_err(self):
        if self.rel_err is None or len(self.rel_err) == 0:
            return np.nan
        return float(np.nanmax(self.rel_err))

    @property
    def rows(self):
        n = len(self.params)
        fd = np.full(n, np.nan) if self.fd is None else self.fd
        rel = np.full(n, np.nan) if self.rel_err is None else self.rel_err
        return [
            _ReportRow(p, float(a), float(f), float(r))
            for p, a, f, r in zip(self.params, self.analytic, fd, rel)
        ]


_ReportRow = namedtuple("_ReportRow", "param analytic fd rel_err")


def fd_verify(evaluator, values, analytic=None, names=None, steps=None, lower=None, upper=None, tol=1.0e-4):
    """Central-difference check of a scalar objective's gradient.

    steps defaults to 1e-4 per parameter (callers scale it by the
    parameter's natural unit). A perturbation that would leave the bounds
    falls back to a one-sided difference and is flagged; missing analytic
    values flag the parameter as not differentiable here.
    """
    values = np.asarray(values, dtype=float)
    n = values.size
    steps = np.broadcast_to(np.asarray(1.0e-4 if steps is None else steps, dtype=float), (n,))
    lower = None if lower is None else np.asarray(lower, dtype=float)
    upper = None if upper is None else np.asarray(upper, dtype=float)

    fd = np.full(n, np.nan)
    flags = [""] * n
    for j in range(n):
        h = steps[j]
        can_up = upper is None or values[j] + h <= upper[j] + 1e-15
        can_dn = lower is None or values[j] - h >= lower[j] - 1e-15
        vp, vm = values.copy(), values.copy()
        if can_up and can_dn:
            vp[j] += h
            vm[j] -= h
            fd[j] = (evaluator(vp) - evaluator(vm)) / (2.0 * h)
        elif can_up:
            vp[j] += h
            fd[j] = (evaluator(vp) - evaluator(values)) / h
            flags[j] = "one_sided"
        elif can_dn:
            vm[j] -= h
            fd[j] = (evaluator(values) - evaluator(vm)) / h
            flags[j] = "one_sided"
        else:
            flags[j] = "step_exceeds_bounds"

    if names is None:
        names = [f"s_{j + 1}" for j in range(n)]
    if analytic is None:
        flags = [f + (";" if f else "") + "analytic_unavailable" for f in flags]
        return GradientReport(list(names), np.full(n, np.nan), fd, None, flags, tol)

    analytic = np.asarray(analytic, dtype=float)
    floor = 1.0e-9 * (1.0 + np.abs(analytic).max(initial=0.0))
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), floor)
    rel = np.abs(analytic - fd) / denom
    for j in range(n):
        if not np.isfinite(rel[j]) or rel[j] > tol:
            flags[j] += (";" if flags[j] else "") + "exceeds_tol"
    return GradientReport(list(names), analytic, fd, rel, flags, tol)
