"""Projection of implicit feature fields onto element pseudo-densities.

A "field" is any object with:
    value(points) -> (n,) array
    jacobian(points) -> ((n, nparams) array, (n,) regular mask)
    nparams -> int
    arg_kind -> "distance" | "implicit" | "density"
FeatureField adapts a geometry primitive; the combine module provides
combined fields with the same surface. Density-like fields (arg_kind ==
"density", e.g. a product of per-feature Heavisides) are integrated
directly instead of being passed through the boundary model again.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .geometry import approx_signed_distance, shape_param_jacobian

__all__ = [
    "Grid",
    "BoundaryModel",
    "Quadrature",
    "DensityField",
    "FeatureField",
    "heaviside_eval",
    "element_density",
    "element_density_jacobian",
    "map_field",
    "grayness",
]

BOUNDARY_KINDS = ("exact", "linear", "poly3", "cosine", "tanh", "circ_sample")


@dataclass(frozen=True)
class Grid:
    """Fixed structured mesh of square elements."""

    nx: int
    ny: int
    l_el: float = 1.0
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ValueError(f"grid needs at least one element per direction, got {self.nx}x{self.ny}")
        if self.l_el <= 0.0:
            raise ValueError(f"element edge length must be positive, got {self.l_el}")

    @property
    def n_elements(self):
        return self.nx * self.ny

    @property
    def n_nodes(self):
        return (self.nx + 1) * (self.ny + 1)

    def element_index(self, ex, ey):
        return ey * self.nx + ex

    def element_xy(self, e):
        e = np.asarray(e)
        return e % self.nx, e // self.nx

    def element_centroids(self):
        ex, ey = self.element_xy(np.arange(self.n_elements))
        x = self.origin[0] + (ex + 0.5) * self.l_el
        y = self.origin[1] + (ey + 0.5) * self.l_el
        return np.stack([x, y], axis=1)

    def sample_points(self, unit_points):
        """All elements' images of unit-square sample points, (nel*nip, 2)."""
        unit_points = np.asarray(unit_points, dtype=float)
        ex, ey = self.element_xy(np.arange(self.n_elements))
        base = np.stack([ex, ey], axis=1) * self.l_el + np.asarray(self.origin)
        pts = base[:, None, :] + unit_points[None, :, :] * self.l_el
        return pts.reshape(-1, 2)

    def node_coords(self):
        ix, iy = np.meshgrid(np.arange(self.nx + 1), np.arange(self.ny + 1), indexing="xy")
        x = self.origin[0] + ix.ravel() * self.l_el
        y = self.origin[1] + iy.ravel() * self.l_el
        return np.stack([x, y], axis=1)


@dataclass(frozen=True)
class BoundaryModel:
    """Smoothed Heaviside mapping implicit value / distance to [rho_min, 1].

    h is the transition half width (the zone spans [-h, h]); beta is the
    tanh steepness (that kind has no finite zone); rho_min floors the void
    density so the analysis stays well posed.
    """

    kind: str = "poly3"
    h: float = 1.0
    beta: float = 6.5
    rho_min: float = 1.0e-6

    def __post_init__(self):
        if self.kind not in BOUNDARY_KINDS:
            raise ValueError(f"unknown boundary kind '{self.kind}', expected one of {BOUNDARY_KINDS}")
        if self.h <= 0.0:
            raise ValueError(f"transition half-width h must be positive, got {self.h}")
        if self.beta <= 0.0:
            raise ValueError(f"tanh steepness beta must be positive, got {self.beta}")
        if not 0.0 < self.rho_min < 1.0:
            raise ValueError(f"rho_min must lie in (0, 1), got {self.rho_min}")

    @property
    def differentiable(self):
        return self.kind != "exact"


def heaviside_eval(model, arg):
    """Evaluate the smoothed Heaviside and its derivative at arg.

    arg is an implicit value or signed distance depending on how the caller
    built the field; circ_sample is only meaningful for distances.
    Returns (value, dvalue) arrays with value in [rho_min, 1].
    """
    x = np.asarray(arg, dtype=float)
    rmin = model.rho_min
    h = model.h
    val = np.empty_like(x)
    der = np.zeros_like(x)

    if model.kind == "exact":
        val = np.where(x >= 0.0, 1.0, rmin)
        return val, der

    if model.kind == "tanh":
        # C-infinity, no finite transition zone
        ex = np.exp(np.clip(model.beta * x, -700.0, 700.0))
        val = (1.0 - rmin) * (1.0 - 1.0 / (ex + 1.0)) + rmin
        der = (1.0 - rmin) * model.beta * ex / (ex + 1.0) ** 2
        return val, der

    below = x < -h
    above = x > h
    band = ~(below | above)
    val[below] = rmin
    val[above] = 1.0
    xb = x[band]

    if model.kind == "linear":
        val[band] = (1.0 - rmin) * xb / (2.0 * h) + (1.0 + rmin) / 2.0
        der[band] = (1.0 - rmin) / (2.0 * h)
    elif model.kind == "poly3":
        val[band] = 0.75 * (1.0 - rmin) * (xb / h - xb**3 / (3.0 * h**3)) + (1.0 + rmin) / 2.0
        der[band] = 0.75 * (1.0 - rmin) * (1.0 / h - xb**2 / h**3)
    elif model.kind == "cosine":
        val[band] = 0.5 * (1.0 - rmin) * np.cos((xb / (2.0 * h) - 0.5) * np.pi) + (1.0 + rmin) / 2.0
        der[band] = -0.5 * (1.0 - rmin) * np.sin((xb / (2.0 * h) - 0.5) * np.pi) * np.pi / (2.0 * h)
    elif model.kind == "circ_sample":
        # area fraction of a disc of radius h cut by a linearized boundary
        t = xb / h
        root = np.sqrt(np.maximum(1.0 - t * t, 0.0))
        unit = (np.arccos(-np.clip(t, -1.0, 1.0)) + t * root) / np.pi
        val[band] = rmin + (1.0 - rmin) * unit
        der[band] = (1.0 - rmin) * 2.0 * root / (np.pi * h)
    return val, der


@dataclass(frozen=True)
class Quadrature:
    """Element integration rule on the unit square."""

    kind: str = "newton_cotes"
    degree: int = 2

    # closed Newton-Cotes abscissae/weights on [0, 1]; degree 0 is the
    # midpoint rule, degree 1 the trapezoidal rule
    _NC = {
        0: ([0.5], [1.0]),
        1: ([0.0, 1.0], [0.5, 0.5]),
        2: ([0.0, 0.5, 1.0], [1.0 / 6.0, 4.0 / 6.0, 1.0 / 6.0]),
        3: ([0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0], [1.0 / 8.0, 3.0 / 8.0, 3.0 / 8.0, 1.0 / 8.0]),
    }
    GAUSS_POINTS_1D = 32

    def __post_init__(self):
        if self.kind not in ("newton_cotes", "quasi_analytic"):
            raise ValueError(f"unknown quadrature kind '{self.kind}'")
        if self.kind == "newton_cotes" and self.degree not in self._NC:
            raise ValueError(f"Newton-Cotes degree must be in 0..3, got {self.degree}")

    def points_1d(self):
        if self.kind == "newton_cotes":
            x, w = self._NC[self.degree]
            return np.asarray(x, dtype=float), np.asarray(w, dtype=float)
        x, w = np.polynomial.legendre.leggauss(self.GAUSS_POINTS_1D)
        return 0.5 * (x + 1.0), 0.5 * w

    def points(self):
        """Tensor-product sample points and weights on the unit square."""
        x, w = self.points_1d()
        px, py = np.meshgrid(x, x, indexing="xy")
        pts = np.stack([px.ravel(), py.ravel()], axis=1)
        wts = np.outer(w, w).ravel()
        return pts, wts


class FeatureField:
    """Adapter exposing one feature's implicit value or signed distance."""

    def __init__(self, feature, use_distance=True, interior_sentinel=1.0e6):
        self.feature = feature
        self.use_distance = use_distance
        self.interior_sentinel = interior_sentinel

    @property
    def arg_kind(self):
        return "distance" if self.use_distance else "implicit"

    @property
    def nparams(self):
        return len(self.feature.PARAMS)

    @property
    def param_names(self):
        return list(self.feature.PARAMS)

    def value(self, points):
        if self.use_distance:
            f = self.feature
            if hasattr(f, "m"):  # smooth implicit, first-order distance
                return approx_signed_distance(f, points, self.interior_sentinel)
            return f.signed_distance(points)
        return self.feature.implicit(points)

    def jacobian(self, points):
        if self.use_distance:
            return shape_param_jacobian(self.feature, points)
        return self.feature.implicit_param_jacobian(points)


@dataclass
class DensityField:
    """Element pseudo-densities with an optional sparse parameter Jacobian."""

    grid: Grid
    rho: np.ndarray
    jac: sp.csr_matrix | None = None
    param_names: list[str] = field(default_factory=list)
    clamped_overshoot: int = 0

    def __post_init__(self):
        self.rho = np.asarray(self.rho, dtype=float)
        if self.rho.shape != (self.grid.n_elements,):
            raise ValueError(f"rho must be flat over {self.grid.n_elements} elements, got {self.rho.shape}")

    def as_image(self):
        """(ny, nx) array with row 0 at the bottom of the domain."""
        return self.rho.reshape(self.grid.ny, self.grid.nx)


def _check_model_field(model, fld):
    if model.kind == "circ_sample" and fld.arg_kind != "distance":
        raise ValueError("circ_sample requires a signed-distance field; this field provides " + fld.arg_kind)


def map_field(fld, grid, model, quadrature, want_jacobian=False):
    """Project a scalar field to a DensityField on the grid.

    circ_sample ignores the quadrature rule and evaluates the sampling
    window formula at element centroids. Density-like fields (arg_kind ==
    "density") are integrated directly without another Heaviside pass.
    """
    _check_model_field(model, fld)
    density_like = fld.arg_kind == "density"
    if model.kind == "circ_sample":
        pts = grid.element_centroids()
        wts = np.array([1.0])
        nip = 1
    else:
        unit, wts = quadrature.points()
        pts = grid.sample_points(unit)
        nip = len(wts)

    raw = fld.value(pts)
    if density_like:
        vals, ders = np.clip(raw, 0.0, 1.0), np.ones_like(raw)
    else:
        vals, ders = heaviside_eval(model, raw)
    by_el = vals.reshape(grid.n_elements, nip)
    rho = (by_el * wts).sum(axis=1)
    # constant-sample elements (fully solid / fully void) integrate exactly;
    # don't let weight round-off leave them at 1 +- ulp
    vmin, vmax = by_el.min(axis=1), by_el.max(axis=1)
    const = vmin == vmax
    rho[const] = vmin[const]
    # clipping only ever binds for density-like fields (smoothed Heaviside
    # values already live in [rho_min, 1]); bound elements get zero gradient
    clipped = (rho < model.rho_min) | (rho > 1.0)
    overshoot = int((rho > 1.0).sum())
    rho = np.clip(rho, model.rho_min, 1.0)

    jac = None
    names = []
    if want_jacobian:
        if not model.differentiable and not density_like:
            raise ValueError("density jacobian needs a smooth boundary model, not 'exact'")
        inband = (np.abs(ders) > 0.0) & ~clipped[np.arange(len(pts)) // nip]
        jac = sp.csr_matrix((grid.n_elements, fld.nparams))
        if inband.any():
            idx = np.flatnonzero(inband)
            pj, regular = fld.jacobian(pts[idx])
            if not regular.all():
                bad = pts[idx][~regular]
                raise ValueError(
                    "non-differentiable sample inside the transition band at "
                    f"{bad[0]}; perturb the design or the sample offsets"
                )
            contrib = (ders[idx] * wts[idx % nip])[:, None] * pj
            rows = np.repeat(idx // nip, fld.nparams)
            cols = np.tile(np.arange(fld.nparams), len(idx))
            jac = sp.coo_matrix(
                (contrib.ravel(), (rows, cols)), shape=(grid.n_elements, fld.nparams)
            ).tocsr()
            jac.eliminate_zeros()
        names = list(getattr(fld, "param_names", [])) or [f"p{j}" for j in range(fld.nparams)]
    return DensityField(grid, rho, jac, names, clamped_overshoot=overshoot)


def element_density(fld, grid, element, model, quadrature):
    """Density of a single element (ex, ey); see map_field for the rules."""
    _check_model_field(model, fld)
    ex, ey = element
    if not (0 <= ex < grid.nx and 0 <= ey < grid.ny):
        raise ValueError(f"element {element} outside {grid.nx}x{grid.ny} grid")
    base = np.asarray(grid.origin) + np.array([ex, ey]) * grid.l_el
    if model.kind == "circ_sample":
        pts = base[None, :] + 0.5 * grid.l_el
        wts = np.array([1.0])
    else:
        unit, wts = quadrature.points()
        pts = base[None, :] + unit * grid.l_el
    raw = fld.value(pts)
    if fld.arg_kind == "density":
        vals = np.clip(raw, 0.0, 1.0)
    else:
        vals, _ = heaviside_eval(model, raw)
    if vals.min() == vals.max():
        return float(np.clip(vals[0], model.rho_min, 1.0))
    return float(np.clip(np.dot(vals, wts), model.rho_min, 1.0))


def element_density_jacobian(fld, grid, element, model, quadrature):
    """Partials of one element's density wrt the field's parameters."""
    if not model.differentiable:
        raise ValueError("density jacobian needs a smooth boundary model, not 'exact'")
    _check_model_field(model, fld)
    ex, ey = element
    base = np.asarray(grid.origin) + np.array([ex, ey]) * grid.l_el
    if model.kind == "circ_sample":
        pts = base[None, :] + 0.5 * grid.l_el
        wts = np.array([1.0])
    else:
        unit, wts = quadrature.points()
        pts = base[None, :] + unit * grid.l_el
    raw = fld.value(pts)
    _, ders = heaviside_eval(model, raw)
    out = np.zeros(fld.nparams)
    inband = np.abs(ders) > 0.0
    if inband.any():
        pj, regular = fld.jacobian(pts[inband])
        if not regular.all():
            raise ValueError("non-differentiable sample inside the transition band")
        out = (ders[inband] * wts[inband]) @ pj
    return out


def grayness(mu):
    """Intermediate-density measure 4*mu*(1-mu), peaking at 1 for mu = 0.5."""
    mu = np.asarray(mu, dtype=float)
    return 4.0 * mu * (1.0 - mu)
