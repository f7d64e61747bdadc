"""Pseudo-density to physical stiffness interpolation laws."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["MaterialModel", "interpolate"]

MATERIAL_KINDS = ("linear", "power", "ramp", "hs_bound")


@dataclass(frozen=True)
class MaterialModel:
    """Stiffness interpolation mu(rho) plus the elastic constants.

    The element stiffness used in assembly is mu(rho_e) * E0 applied as a
    scalar on the fully solid element matrix; rho_min already floors rho_e,
    so no separate stiffness floor exists here.
    """

    kind: str = "power"
    E0: float = 1.0
    nu: float = 0.3
    thickness: float = 1.0
    p: float = 3.0
    q: float = 1.0

    def __post_init__(self):
        if self.kind not in MATERIAL_KINDS:
            raise ValueError(f"unknown material kind '{self.kind}', expected one of {MATERIAL_KINDS}")
        if self.E0 <= 0.0:
            raise ValueError(f"E0 must be positive, got {self.E0}")
        if not 0.0 < self.nu < 0.5:
            raise ValueError(f"Poisson ratio must lie in (0, 0.5), got {self.nu}")
        if self.thickness <= 0.0:
            raise ValueError(f"thickness must be positive, got {self.thickness}")
        if self.p < 1.0:
            raise ValueError(f"power exponent p must be >= 1, got {self.p}")
        if self.q < 0.0:
            raise ValueError(f"ramp parameter q must be >= 0, got {self.q}")
        if self.kind == "hs_bound" and self.nu != 0.3:
            # the bound's closed form rho/(3-2*rho) holds only at nu = 0.3
            raise ValueError(f"hs_bound is only valid with nu = 0.3, got nu = {self.nu}")


def interpolate(model, rho):
    """Return (mu, dmu/drho) for pseudo-densities rho in [0, 1]."""
    rho = np.asarray(rho, dtype=float)
    if np.any(rho < -1e-12) or np.any(rho > 1.0 + 1e-12):
        raise ValueError("pseudo-densities must lie in [0, 1]")
    if model.kind == "linear":
        return rho.copy(), np.ones_like(rho)
    if model.kind == "power":
        return rho**model.p, model.p * rho ** (model.p - 1.0)
    if model.kind == "ramp":
        denom = 1.0 + model.q * (1.0 - rho)
        return rho / denom, (1.0 + model.q) / denom**2
    # Hashin-Shtrikman upper bound at nu = 0.3
    denom = 3.0 - 2.0 * rho
    return rho / denom, 3.0 / denom**2
