"""Combining multiple features into one structure.

Two families of strategies: fold the per-feature implicit fields into one
scalar field and map it once (combine_then_map), or map every feature to
the grid separately and combine the mapped results, either per element
(map_then_combine_density) or per integration point before the quadrature
weighting (map_then_combine_heaviside).

Size variables alpha scale the density-level strategies as
alpha**p_alpha; the implicit-level strategy has no density to scale, so
its alpha gradient columns are identically zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.special import logsumexp, softmax

from .mapping import DensityField, FeatureField, heaviside_eval, map_field

__all__ = [
    "CombineSpec",
    "ParamLayout",
    "CombinedImplicitField",
    "ProductIndicatorField",
    "smooth_extremum",
    "r_boolean",
    "build_combined_field",
    "combine_implicits",
    "effective_density",
    "combine_densities",
    "map_and_combine",
]

STRATEGIES = ("combine_then_map", "map_then_combine_density", "map_then_combine_heaviside")
EXTREMA = ("true_max", "ks", "pnorm", "r_union", "product_indicator")

# weights below this are dropped together with their features' regularity
# flags; a branch that cannot move the result by more than round-off does
# not get to veto differentiability
_DEAD_BRANCH = 1.0e-14


@dataclass(frozen=True)
class CombineSpec:
    """How to fold several features into one pseudo-density field."""

    strategy: str = "map_then_combine_density"
    extremum: str = "ks"
    p: float = 40.0
    p_alpha: float = 3.0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy '{self.strategy}', expected one of {STRATEGIES}")
        if self.extremum not in EXTREMA:
            raise ValueError(f"unknown extremum '{self.extremum}', expected one of {EXTREMA}")
        if self.p <= 0.0:
            raise ValueError(f"aggregation parameter p must be positive, got {self.p}")
        if self.p_alpha < 1.0:
            raise ValueError(f"size penalty exponent must be >= 1, got {self.p_alpha}")
        if self.extremum == "pnorm" and self.strategy == "combine_then_map":
            raise ValueError("pnorm needs nonnegative inputs; combine mapped densities instead of implicit values")
        if self.extremum in ("r_union", "product_indicator") and self.strategy != "combine_then_map":
            raise ValueError(f"{self.extremum} combines implicit fields; use strategy combine_then_map")


class ParamLayout:
    """Flat column layout over a feature list.

    Each feature contributes its shape parameters followed by its size
    variable, so column names line up with design-vector names f<i>.<p>.
    """

    def __init__(self, features):
        self.features = list(features)
        if not self.features:
            raise ValueError("need at least one feature")
        self._offsets = []
        off = 0
        for f in self.features:
            self._offsets.append(off)
            off += len(f.PARAMS) + 1
        self.nparams = off

    def shape_slice(self, i):
        off = self._offsets[i]
        return slice(off, off + len(self.features[i].PARAMS))

    def block(self, i):
        """Full column block of feature i, shape parameters plus alpha."""
        off = self._offsets[i]
        return slice(off, off + len(self.features[i].PARAMS) + 1)

    def alpha_col(self, i):
        return self._offsets[i] + len(self.features[i].PARAMS)

    def col(self, i, name):
        if name == "alpha":
            return self.alpha_col(i)
        return self._offsets[i] + self.features[i].PARAMS.index(name)

    def names(self):
        out = []
        for i, f in enumerate(self.features):
            out.extend(f"f{i}.{p}" for p in f.PARAMS)
            out.append(f"f{i}.alpha")
        return out


def smooth_extremum(kind, values, p=40.0):
    """Exact or smooth maximum of a value vector.

    true_max is the plain maximum; ks and pnorm approximate it from above
    (pnorm only for nonnegative inputs).
    """
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise ValueError("smooth_extremum needs at least one value")
    val, _, _ = _extremum_and_weights(kind, v[:, None], p)
    return float(val[0])


def _extremum_and_weights(kind, V, p):
    """Aggregate rows of V (nfeat, n) and give d(result)/dV weights.

    Returns (value (n,), weights (nfeat, n), regular (n,)); regular is
    False where the aggregate is not differentiable (true_max ties,
    r_union at the double zero).
    """
    nfeat, n = V.shape
    regular = np.ones(n, dtype=bool)
    if kind == "true_max":
        val = V.max(axis=0)
        W = np.zeros_like(V)
        W[np.argmax(V, axis=0), np.arange(n)] = 1.0
        if nfeat > 1:
            regular = (V == val).sum(axis=0) == 1
        return val, W, regular
    if kind == "ks":
        val = logsumexp(p * V, axis=0) / p
        return val, softmax(p * V, axis=0), regular
    if kind == "pnorm":
        if (V < 0.0).any():
            raise ValueError("pnorm requires nonnegative values")
        vmax = V.max(axis=0)
        safe = np.where(vmax > 0.0, vmax, 1.0)
        val = safe * ((V / safe) ** p).sum(axis=0) ** (1.0 / p)
        val = np.where(vmax > 0.0, val, 0.0)
        W = np.where(vmax > 0.0, (V / np.where(val > 0.0, val, 1.0)) ** (p - 1.0), 0.0)
        return val, W, regular
    if kind == "r_union":
        acc = V[0].copy()
        W = np.zeros_like(V)
        W[0] = 1.0
        for k in range(1, nfeat):
            r = np.hypot(acc, V[k])
            regular &= r > 0.0
            safe = np.where(r > 0.0, r, 1.0)
            W[:k] *= (1.0 + acc / safe)[None, :]
            W[k] = 1.0 + V[k] / safe
            acc = acc + V[k] + r
        return acc, W, regular
    raise ValueError(f"unknown extremum kind '{kind}'")


def r_boolean(op, f1, f2):
    """R-function union or intersection of two implicit values.

    union > 0 iff either argument is > 0; intersection > 0 iff both are.
    Not differentiable at f1 = f2 = 0; the result is not a distance even
    when the inputs are.
    """
    a = np.asarray(f1, dtype=float)
    b = np.asarray(f2, dtype=float)
    r = np.hypot(a, b)
    if op == "union":
        out = a + b + r
    elif op == "intersection":
        out = a + b - r
    else:
        raise ValueError(f"unknown boolean op '{op}', expected union or intersection")
    return float(out) if np.isscalar(f1) and np.isscalar(f2) else out


class CombinedImplicitField:
    """Several features folded into one implicit or distance field.

    Exposes the same surface as FeatureField so it can be mapped as one
    field. r_union always works on raw implicit values since its result
    is not a distance; the other kinds default to first-order distances.
    """

    def __init__(self, features, spec, use_distance=True):
        if spec.strategy != "combine_then_map":
            raise ValueError("CombinedImplicitField is the combine_then_map strategy")
        if spec.extremum == "product_indicator":
            raise ValueError("product_indicator builds a ProductIndicatorField")
        self.spec = spec
        self.layout = ParamLayout(features)
        self.features = self.layout.features
        self.use_distance = bool(use_distance) and spec.extremum != "r_union"
        self._fields = [FeatureField(f, use_distance=self.use_distance) for f in self.features]

    @property
    def arg_kind(self):
        return "distance" if self.use_distance else "implicit"

    @property
    def nparams(self):
        return self.layout.nparams

    @property
    def param_names(self):
        return self.layout.names()

    def _stack(self, points):
        return np.stack([fld.value(points) for fld in self._fields], axis=0)

    def value(self, points):
        val, _, _ = _extremum_and_weights(self.spec.extremum, self._stack(points), self.spec.p)
        return val

    def jacobian(self, points):
        points = np.asarray(points, dtype=float)
        V = self._stack(points)
        _, W, regular = _extremum_and_weights(self.spec.extremum, V, self.spec.p)
        jac = np.zeros((len(points), self.layout.nparams))
        for i, fld in enumerate(self._fields):
            live = np.abs(W[i]) > _DEAD_BRANCH
            if not live.any():
                continue
            pj, reg_i = fld.jacobian(points[live])
            jac[live, self.layout.shape_slice(i)] = W[i][live, None] * pj
            regular[live] &= reg_i
        return jac, regular


class ProductIndicatorField:
    """Product of per-feature smoothed indicators, a density-like field.

    Multiplying indicators realizes the intersection of the feature
    supports; orienting features as solids or voids (by negating their
    implicit function) is left to the caller. Mapped by direct
    integration, not through the boundary model again.
    """

    arg_kind = "density"

    def __init__(self, features, spec, model, use_distance=True):
        if spec.extremum != "product_indicator":
            raise ValueError("ProductIndicatorField is the product_indicator extremum")
        if model is None:
            raise ValueError("product_indicator needs the boundary model for its per-feature indicators")
        self.spec = spec
        self.model = model
        self.layout = ParamLayout(features)
        self.features = self.layout.features
        self._fields = [FeatureField(f, use_distance=use_distance) for f in self.features]

    @property
    def nparams(self):
        return self.layout.nparams

    @property
    def param_names(self):
        return self.layout.names()

    def _indicators(self, points):
        vals, ders = [], []
        for fld in self._fields:
            v, d = heaviside_eval(self.model, fld.value(points))
            vals.append(v)
            ders.append(d)
        return np.stack(vals, axis=0), np.stack(ders, axis=0)

    def value(self, points):
        vals, _ = self._indicators(points)
        return vals.prod(axis=0)

    def jacobian(self, points):
        points = np.asarray(points, dtype=float)
        vals, ders = self._indicators(points)
        total = vals.prod(axis=0)
        jac = np.zeros((len(points), self.layout.nparams))
        regular = np.ones(len(points), dtype=bool)
        for i, fld in enumerate(self._fields):
            # vals[i] >= rho_min > 0, so the co-factor product divides out
            weight = ders[i] * total / vals[i]
            live = np.abs(weight) > _DEAD_BRANCH
            if not live.any():
                continue
            pj, reg_i = fld.jacobian(points[live])
            jac[live, self.layout.shape_slice(i)] = weight[live, None] * pj
            regular[live] &= reg_i
        return jac, regular


def build_combined_field(features, spec, model=None, use_distance=True):
    """Field object for the combine_then_map strategy."""
    if spec.extremum == "product_indicator":
        return ProductIndicatorField(features, spec, model, use_distance=use_distance)
    return CombinedImplicitField(features, spec, use_distance=use_distance)


def combine_implicits(features, spec, points, model=None, want_partials=False):
    """Combined implicit value at the given points.

    Works on raw implicit values (the combined phi); product_indicator
    additionally applies the boundary model per feature before
    multiplying. With want_partials, also returns the jacobian over the
    stacked feature parameters and the regularity mask.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    fld = build_combined_field(features, spec, model=model, use_distance=False)
    val = fld.value(pts)
    scalar = np.asarray(points).ndim == 1
    if not want_partials:
        return float(val[0]) if scalar else val
    jac, regular = fld.jacobian(pts)
    if scalar:
        return float(val[0]), jac[0], bool(regular[0])
    return val, jac, regular


def effective_density(rho, alpha, p_alpha=3.0):
    """Density scaled by the penalized size variable, alpha**p_alpha * rho."""
    alpha = np.asarray(alpha, dtype=float)
    if ((alpha < 0.0) | (alpha > 1.0)).any():
        raise ValueError("size variable alpha must lie in [0, 1]")
    rho = np.asarray(rho, dtype=float)
    scale = alpha**p_alpha
    if scale.ndim == 1 and rho.ndim == 2:
        scale = scale[:, None]
    return scale * rho


def combine_densities(density_fields, features, spec, rho_min, want_jacobian=False):
    """Fold per-feature mapped densities into one composite DensityField.

    Inputs are the map_field results of each feature (with jacobians when
    want_jacobian). The composite is clamped to [rho_min, 1]; elements
    clamped from above are counted in clamped_overshoot and clamped
    elements contribute zero gradient.
    """
    if spec.strategy != "map_then_combine_density":
        raise ValueError(f"combine_densities implements map_then_combine_density, not {spec.strategy}")
    layout = ParamLayout(features)
    if len(density_fields) != len(layout.features):
        raise ValueError("one mapped density field per feature required")
    grid = density_fields[0].grid
    for df in density_fields[1:]:
        if df.grid != grid:
            raise ValueError("all feature densities must live on the same grid")

    alphas = np.array([f.alpha for f in layout.features])
    R = np.stack([df.rho for df in density_fields], axis=0)
    rhat = effective_density(R, alphas, spec.p_alpha)
    val, W, _ = _extremum_and_weights(spec.extremum, rhat, spec.p)
    overshoot = int((val > 1.0).sum())
    clamped = (val > 1.0) | (val < rho_min)
    rho = np.clip(val, rho_min, 1.0)

    jac = None
    if want_jacobian:
        keep = np.where(clamped, 0.0, 1.0)
        blocks = []
        for i, df in enumerate(density_fields):
            if df.jac is None:
                raise ValueError("want_jacobian needs per-feature jacobians from map_field")
            w_shape = keep * W[i] * alphas[i] ** spec.p_alpha
            blocks.append(sp.diags(w_shape) @ df.jac)
            dalpha = keep * W[i] * spec.p_alpha * alphas[i] ** (spec.p_alpha - 1.0) * R[i]
            blocks.append(sp.csr_matrix(dalpha[:, None]))
        jac = sp.hstack(blocks).tocsr()
        jac.eliminate_zeros()
    return DensityField(grid, rho, jac, layout.names(), clamped_overshoot=overshoot)


def _combine_heaviside_level(features, grid, model, quadrature, spec, want_jacobian):
    """Aggregate the scaled Heaviside values at the integration points.

    With the midpoint rule this reproduces map_then_combine_density
    exactly (one sample per element makes the two orderings identical).
    """
    layout = ParamLayout(features)
    alphas = np.array([f.alpha for f in layout.features])
    fields = [FeatureField(f) for f in layout.features]
    if model.kind == "circ_sample":
        pts = grid.element_centroids()
        wts = np.array([1.0])
    else:
        unit, wts = quadrature.points()
        pts = grid.sample_points(unit)
    nip = len(wts)

    vals, ders = [], []
    for fld in fields:
        v, d = heaviside_eval(model, fld.value(pts))
        vals.append(v)
        ders.append(d)
    V = np.stack(vals, axis=0)
    vhat = effective_density(V, alphas, spec.p_alpha)
    comb, W, _ = _extremum_and_weights(spec.extremum, vhat, spec.p)

    by_el = comb.reshape(grid.n_elements, nip)
    rho = (by_el * wts).sum(axis=1)
    vmin, vmax = by_el.min(axis=1), by_el.max(axis=1)
    const = vmin == vmax
    rho[const] = vmin[const]
    overshoot = int((rho > 1.0).sum())
    clamped = (rho > 1.0) | (rho < model.rho_min)
    rho = np.clip(rho, model.rho_min, 1.0)

    jac = None
    if want_jacobian:
        if not model.differentiable:
            raise ValueError("density jacobian needs a smooth boundary model, not 'exact'")
        keep = np.where(clamped, 0.0, 1.0)
        point_w = np.tile(wts, grid.n_elements)
        rows_of_pt = np.arange(len(pts)) // nip
        jac = sp.csr_matrix((grid.n_elements, layout.nparams))
        pieces = []
        for i, fld in enumerate(fields):
            weight = W[i] * alphas[i] ** spec.p_alpha * ders[i]
            live = np.flatnonzero(np.abs(weight) > _DEAD_BRANCH)
            if live.size:
                pj, regular = fld.jacobian(pts[live])
                if not regular.all():
                    bad = pts[live][~regular]
                    raise ValueError(
                        "non-differentiable sample inside the transition band at "
                        f"{bad[0]}; perturb the design or the sample offsets"
                    )
                contrib = (weight[live] * point_w[live])[:, None] * pj
                rows = np.repeat(rows_of_pt[live], pj.shape[1])
                cols = np.tile(np.arange(layout.shape_slice(i).start, layout.shape_slice(i).stop), live.size)
                pieces.append((contrib.ravel(), rows, cols))
            dalpha_pt = W[i] * spec.p_alpha * alphas[i] ** (spec.p_alpha - 1.0) * V[i] * point_w
            dalpha = dalpha_pt.reshape(grid.n_elements, nip).sum(axis=1)
            live_el = np.flatnonzero(dalpha != 0.0)
            if live_el.size:
                pieces.append(
                    (dalpha[live_el], live_el, np.full(live_el.size, layout.alpha_col(i)))
                )
        if pieces:
            data = np.concatenate([p[0] for p in pieces])
            rows = np.concatenate([p[1] for p in pieces])
            cols = np.concatenate([p[2] for p in pieces])
            jac = sp.coo_matrix((data, (rows, cols)), shape=(grid.n_elements, layout.nparams)).tocsr()
            jac = (sp.diags(keep) @ jac).tocsr()
            jac.eliminate_zeros()
    return DensityField(grid, rho, jac, layout.names(), clamped_overshoot=overshoot)


def map_and_combine(features, grid, model, quadrature, spec, want_jacobian=False):
    """Map a feature list to one composite DensityField per the spec."""
    if spec.strategy == "combine_then_map":
        fld = build_combined_field(features, spec, model=model)
        return map_field(fld, grid, model, quadrature, want_jacobian=want_jacobian)
    if spec.strategy == "map_then_combine_heaviside":
        return _combine_heaviside_level(features, grid, model, quadrature, spec, want_jacobian)
    per_feature = [
        map_field(FeatureField(f), grid, model, quadrature, want_jacobian=want_jacobian) for f in features
    ]
    return combine_densities(per_feature, features, spec, model.rho_min, want_jacobian=want_jacobian)
