"""Geometric and resource constraints with values and gradients.

Every constraint reports values under the convention value <= 0 means
satisfied. Gradients are laid out over the flat per-feature parameter
columns of ParamLayout (shape parameters then the size variable alpha),
so they chain directly onto design vectors. Kinds that cannot supply a
derivative (exact boundary model, coincident surrogate centers) say so
through the regular mask instead of returning a wrong number silently.

Four separation mechanisms are provided: pairwise circle surrogates
(fcm_separation), the volume-integral comparison (overlap_integral),
the summed auxiliary density field (overlap_auxiliary_density), and
ghost-point containment for keeping features inside an arbitrary,
possibly non-convex domain polygon (ghost_containment).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp, softmax

from .combine import CombineSpec, ParamLayout, map_and_combine
from .geometry import Bar, Circle, Hyperellipse, RectangleAA
from .mapping import FeatureField, heaviside_eval, map_field

__all__ = [
    "ConstraintResult",
    "Constraint",
    "ConstraintSet",
    "SurrogateCircle",
    "aggregate",
    "surrogate_circles",
    "fcm_separation",
    "feature_area_gradient",
    "overlap_integral",
    "dilate_feature",
    "overlap_auxiliary_density",
    "domain_polygon",
    "offset_polygon",
    "ghost_points",
    "ghost_containment",
    "volume_fraction",
]

CONSTRAINT_KINDS = ("volume", "fcm", "overlap_integral", "overlap_aux", "ghost")

# chain weights below this cannot move the aggregate by more than
# round-off, so such samples do not get to veto differentiability
_DEAD_WEIGHT = 1.0e-14


@dataclass
class ConstraintResult:
    """Stacked constraint rows over one feature layout.

    jacobian is dense (m, layout.nparams) or None when gradients were not
    requested; regular marks rows whose gradient is trustworthy.
    """

    values: np.ndarray
    jacobian: np.ndarray | None
    names: list[str]
    regular: np.ndarray
    layout: ParamLayout | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.atleast_1d(np.asarray(self.values, dtype=float))
        self.regular = np.atleast_1d(np.asarray(self.regular, dtype=bool))

    @property
    def max_value(self):
        # a set with no rows (single feature, no pairs) is trivially satisfied
        return float(self.values.max()) if self.values.size else -np.inf

    @property
    def satisfied(self):
        return bool((self.values <= 0.0).all())


def _stack_results(parts):
    values = np.concatenate([p.values for p in parts])
    names = [n for p in parts for n in p.names]
    regular = np.concatenate([p.regular for p in parts])
    jacobian = None
    if all(p.jacobian is not None for p in parts):
        jacobian = np.vstack([p.jacobian for p in parts])
    layout = parts[0].layout
    meta = {}
    for p in parts:
        meta.update(p.meta)
    return ConstraintResult(values, jacobian, names, regular, layout, meta)


def aggregate(values, p=40.0):
    """Kreisselmeier-Steinhauser upper bound of the maximum.

    Satisfies max(v) <= aggregate(v, p) <= max(v) + ln(N)/p, so holding
    the aggregate at zero holds every entry at or below zero.
    """
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise ValueError("aggregate needs at least one value")
    if p <= 0.0:
        raise ValueError(f"aggregation parameter p must be positive, got {p}")
    return float(logsumexp(p * v) / p)


def _ks_weights(values, p):
    """Partials of aggregate(values, p) wrt each entry (they sum to one)."""
    return softmax(p * np.asarray(values, dtype=float).ravel())


# ---------------------------------------------------------------------------
# finite circle surrogates


@dataclass(frozen=True)
class SurrogateCircle:
    """One covering circle with partials of (cx, cy, r) wrt its feature.

    jac has shape (3, nshape + 1); the trailing size-variable column is
    always zero because alpha does not move geometry.
    """

    feature_index: int
    cx: float
    cy: float
    r: float
    jac: np.ndarray

    @property
    def center(self):
        return np.array([self.cx, self.cy])


def _bar_circles(f, index):
    a = np.array([f.ax, f.ay])
    b = np.array([f.bx, f.by])
    length = float(np.linalg.norm(b - a))
    if length == 0.0:
        jac = np.zeros((3, 6))
        jac[0, 0] = jac[0, 2] = 0.5
        jac[1, 1] = jac[1, 3] = 0.5
        jac[2, 4] = 1.0
        return [SurrogateCircle(index, f.ax, f.ay, f.r, jac)]
    n_interior = max(math.ceil(length / (2.0 * f.r)) - 1, 0)
    spacing = length / (n_interior + 1)
    # the smallest uniform radius whose circles, placed at this spacing,
    # cover the whole capsule: the worst point sits midway between two
    # centers at perpendicular offset r
    radius = math.hypot(f.r, 0.5 * spacing)
    dr_dr = f.r / radius
    # radius also follows the spacing, hence the endpoints, via ds/dL
    dr_dlen = 0.25 * spacing / (radius * (n_interior + 1))
    u = (b - a) / length
    out = []
    for t in np.linspace(0.0, 1.0, n_interior + 2):
        c = (1.0 - t) * a + t * b
        jac = np.zeros((3, 6))
        jac[0, 0] = 1.0 - t  # dcx/dax
        jac[0, 2] = t  # dcx/dbx
        jac[1, 1] = 1.0 - t
        jac[1, 3] = t
        jac[2, :4] = dr_dlen * np.array([-u[0], -u[1], u[0], u[1]])
        jac[2, 4] = dr_dr
        out.append(SurrogateCircle(index, float(c[0]), float(c[1]), radius, jac))
    return out


def _hyperellipse_circumradius(a, b, m):
    """Radius of the smallest origin-centered circle covering the shape.

    Maximizing u^2 + v^2 on (u/a)^m + (v/b)^m = 1 via w = (u/a)^m gives a
    concave profile for m > 2 with an interior maximizer; m = 2 reduces to
    max(a, b). Returns (radius, dr/da, dr/db) with the envelope partials.
    """
    if m == 2:
        return (a, 1.0, 0.0) if a >= b else (b, 0.0, 1.0)
    k = (b / a) ** (2.0 * m / (2.0 - m))
    w = k / (1.0 + k)
    ua = w ** (1.0 / m)
    vb = (1.0 - w) ** (1.0 / m)
    r = math.hypot(a * ua, b * vb)
    return r, a * ua * ua / r, b * vb * vb / r


def surrogate_circles(feature, index=0):
    """Covering circles for FCM separation, with center/radius partials.

    Bars get their end caps plus ceil(L / 2r) - 1 evenly spaced interior
    circles of the bar radius; a circle is its own surrogate; the other
    primitives get a single circumscribed circle. The circle count jumps
    as a bar's length-to-radius ratio crosses an integer, so gradients
    hold only between such transitions.
    """
    ncols = len(feature.PARAMS) + 1
    if isinstance(feature, Bar):
        return _bar_circles(feature, index)
    if isinstance(feature, Circle):
        jac = np.zeros((3, ncols))
        jac[0, 0] = jac[1, 1] = jac[2, 2] = 1.0
        return [SurrogateCircle(index, feature.cx, feature.cy, feature.r, jac)]
    if isinstance(feature, Hyperellipse):
        r, dr_da, dr_db = _hyperellipse_circumradius(feature.a, feature.b, feature.m)
        jac = np.zeros((3, ncols))
        jac[0, 0] = jac[1, 1] = 1.0
        jac[2, 2] = dr_da
        jac[2, 3] = dr_db
        return [SurrogateCircle(index, feature.cx, feature.cy, r, jac)]
    if isinstance(feature, RectangleAA):
        w = feature.x1 - feature.x0
        h = feature.y1 - feature.y0
        diag = math.hypot(w, h)
        jac = np.zeros((3, ncols))
        jac[0, 0] = jac[0, 2] = 0.5
        jac[1, 1] = jac[1, 3] = 0.5
        if diag > 0.0:
            jac[2, :4] = [-0.5 * w / diag, -0.5 * h / diag, 0.5 * w / diag, 0.5 * h / diag]
        return [
            SurrogateCircle(
                index, 0.5 * (feature.x0 + feature.x1), 0.5 * (feature.y0 + feature.y1), 0.5 * diag, jac
            )
        ]
    raise TypeError(f"no surrogate circle rule for {type(feature).__name__}")


def fcm_separation(features, min_gap=0.0, circles=None, want_gradient=True):
    """Minimum-distance constraints between surrogate circles.

    One row per circle pair drawn from distinct features:
    value = (r_i + r_j + gap) - |c_i - c_j|. Coincident centers leave the
    distance direction undefined; such rows keep only the radius terms and
    are flagged non-regular.
    """
    if min_gap < 0.0:
        raise ValueError(f"minimum gap must be nonnegative, got {min_gap}")
    layout = ParamLayout(features)
    if circles is None:
        circles = [surrogate_circles(f, i) for i, f in enumerate(features)]
    if len(circles) != len(layout.features):
        raise ValueError("need one surrogate circle list per feature")

    values, names, regular, rows = [], [], [], []
    scale = max(max((c.r for cs in circles for c in cs), default=1.0), 1e-12)
    for i in range(len(circles)):
        for j in range(i + 1, len(circles)):
            for a, ci in enumerate(circles[i]):
                for b, cj in enumerate(circles[j]):
                    diff = ci.center - cj.center
                    dist = float(np.linalg.norm(diff))
                    values.append(ci.r + cj.r + min_gap - dist)
                    names.append(f"fcm f{i}.c{a}|f{j}.c{b}")
                    ok = dist > 1e-12 * scale
                    regular.append(ok)
                    if not want_gradient:
                        continue
                    u = diff / dist if ok else np.zeros(2)
                    row = np.zeros(layout.nparams)
                    row[layout.block(i)] += np.array([-u[0], -u[1], 1.0]) @ ci.jac
                    row[layout.block(j)] += np.array([u[0], u[1], 1.0]) @ cj.jac
                    rows.append(row)
    jac = np.array(rows) if want_gradient else None
    if want_gradient and not rows:
        jac = np.zeros((0, layout.nparams))
    return ConstraintResult(np.array(values), jac, names, np.array(regular, dtype=bool), layout)


# ---------------------------------------------------------------------------
# volume-integral overlap


def feature_area_gradient(feature):
    """Closed-form area and its partials over (PARAMS..., alpha).

    The alpha column is zero: size variables scale mapped densities, not
    geometry. A zero-length bar keeps its cap area but has no defined
    axis direction, so its endpoint partials are zeroed.
    """
    g = np.zeros(len(feature.PARAMS) + 1)
    if isinstance(feature, Bar):
        dx = feature.bx - feature.ax
        dy = feature.by - feature.ay
        length = math.hypot(dx, dy)
        if length > 0.0:
            g[:4] = 2.0 * feature.r * np.array([-dx, -dy, dx, dy]) / length
        g[4] = 2.0 * length + 2.0 * math.pi * feature.r
    elif isinstance(feature, Circle):
        g[2] = 2.0 * math.pi * feature.r
    elif isinstance(feature, Hyperellipse):
        area = feature.area()
        g[2] = area / feature.a
        g[3] = area / feature.b
    elif isinstance(feature, RectangleAA):
        w = feature.x1 - feature.x0
        h = feature.y1 - feature.y0
        g[:4] = [-h, -w, h, w]
    else:
        raise TypeError(f"no area rule for {type(feature).__name__}")
    return float(feature.area()), g


def overlap_integral(features, grid, model, quadrature, spec=None, want_gradient=False):
    """Known feature volume minus the integrated combined volume.

    value = sum_i V_i - V_combined, nonnegative up to quadrature error and
    zero only when nothing overlaps and nothing leaves the grid. The
    combined volume integrates the mapped density rescaled from
    [rho_min, 1] back to an indicator, so the void floor does not bias the
    comparison. Size variables are ignored: the comparison is geometric,
    which is also why the default combination works at the implicit level.
    """
    spec = spec or CombineSpec(strategy="combine_then_map", extremum="ks")
    layout = ParamLayout(features)
    areas = [feature_area_gradient(f) for f in features]
    v_known = sum(a for a, _ in areas)
    mapped = map_and_combine(features, grid, model, quadrature, spec, want_jacobian=want_gradient)
    cell = grid.l_el**2 / (1.0 - model.rho_min)
    v_comb = cell * float((mapped.rho - model.rho_min).sum())
    value = v_known - v_comb
    if not want_gradient:
        return value
    grad = np.zeros(layout.nparams)
    for i, (_, g) in enumerate(areas):
        grad[layout.block(i)] = g
    grad -= cell * np.asarray(mapped.jac.sum(axis=0)).ravel()
    return value, grad, model.differentiable


# ---------------------------------------------------------------------------
# auxiliary density overlap


def dilate_feature(feature, delta):
    """Grow a feature's boundary outward by delta.

    Exact for bars and circles (radius offset). The hyperellipse semi-axis
    shift and the rectangle corner push-out are approximate dilations: the
    rectangle over-covers at its corners (the true offset rounds them), so
    the result errs toward reporting contact early.
    """
    if delta == 0.0:
        return feature
    if delta < 0.0:
        raise ValueError(f"dilation must be nonnegative, got {delta}")
    if isinstance(feature, (Bar, Circle)):
        return replace(feature, r=feature.r + delta)
    if isinstance(feature, Hyperellipse):
        return replace(feature, a=feature.a + delta, b=feature.b + delta)
    if isinstance(feature, RectangleAA):
        return replace(
            feature,
            x0=feature.x0 - delta,
            y0=feature.y0 - delta,
            x1=feature.x1 + delta,
            y1=feature.y1 + delta,
        )
    raise TypeError(f"no dilation rule for {type(feature).__name__}")


def overlap_auxiliary_density(features, grid, model, quadrature, min_gap=0.0, p=40.0, want_gradient=False):
    """Aggregated excess of the summed per-feature density fields.

    Each feature is mapped separately (dilated by half the gap first) and
    the fields are summed; anywhere two features hold material the sum
    exceeds one. The lower-bound aggregate aggregate(...) - ln(N)/p - 1 is
    used: the plain upper bound can never reach zero once any element is
    fully solid, which would leave nothing for an optimizer to satisfy.
    The value is therefore within ln(N)/p of max(sum_field) - 1, negative
    for separated layouts and near +1 for coincident ones. Size variables
    do not scale the sum: the question is where geometry sits, not how
    stiff it is.
    """
    if min_gap < 0.0:
        raise ValueError(f"minimum gap must be nonnegative, got {min_gap}")
    layout = ParamLayout(features)
    dilated = [dilate_feature(f, 0.5 * min_gap) for f in features]
    fields = [
        map_field(FeatureField(f), grid, model, quadrature, want_jacobian=want_gradient) for f in dilated
    ]
    aux = np.sum([df.rho for df in fields], axis=0)
    value = aggregate(aux, p) - math.log(aux.size) / p - 1.0
    if not want_gradient:
        return value
    w = _ks_weights(aux, p)
    grad = np.zeros(layout.nparams)
    for i, df in enumerate(fields):
        grad[layout.shape_slice(i)] = df.jac.T.dot(w)
    return value, grad, model.differentiable


# ---------------------------------------------------------------------------
# ghost-point containment


def domain_polygon(grid):
    """Rectangle outline of the grid, counterclockwise."""
    x0, y0 = grid.origin
    x1 = x0 + grid.nx * grid.l_el
    y1 = y0 + grid.ny * grid.l_el
    return np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]])


def _ccw(vertices):
    v = np.asarray(vertices, dtype=float)
    if v.ndim != 2 or v.shape[0] < 3 or v.shape[1] != 2:
        raise ValueError("polygon needs at least three 2d vertices")
    area2 = float(np.sum(v[:, 0] * np.roll(v[:, 1], -1) - np.roll(v[:, 0], -1) * v[:, 1]))
    if area2 == 0.0:
        raise ValueError("degenerate polygon")
    return v if area2 > 0.0 else v[::-1]


def offset_polygon(vertices, offset):
    """Polygon shifted outward by offset, corners extended by miter joins.

    Handles reflex corners of non-convex outlines; the join construction
    assumes the offset stays small against the adjacent edge lengths.
    """
    v = _ccw(vertices)
    edges = np.roll(v, -1, axis=0) - v
    lens = np.linalg.norm(edges, axis=1)
    if (lens < 1e-12).any():
        raise ValueError("polygon has a zero-length edge")
    t = edges / lens[:, None]
    # for a counterclockwise loop the outward normal is the right-hand one
    nrm = np.stack([t[:, 1], -t[:, 0]], axis=1)
    out = np.empty_like(v)
    n = len(v)
    for k in range(n):
        p_prev = v[k - 1] + offset * nrm[k - 1]
        d_prev = t[k - 1]
        p_next = v[k] + offset * nrm[k]
        cross = d_prev[0] * t[k][1] - d_prev[1] * t[k][0]
        if abs(cross) < 1e-12:
            out[k] = p_next
        else:
            s = ((p_next[0] - p_prev[0]) * t[k][1] - (p_next[1] - p_prev[1]) * t[k][0]) / cross
            out[k] = p_prev + s * d_prev
    return out


def ghost_points(polygon, offset, spacing):
    """Sample points on the offset outline, at most spacing apart."""
    if offset <= 0.0 or spacing <= 0.0:
        raise ValueError("offset and spacing must be positive")
    ring = offset_polygon(polygon, offset)
    pts = []
    n = len(ring)
    for k in range(n):
        a, b = ring[k], ring[(k + 1) % n]
        nseg = max(1, math.ceil(np.linalg.norm(b - a) / spacing))
        ts = np.arange(nseg) / nseg
        pts.append(a + ts[:, None] * (b - a))
    return np.vstack(pts)


def ghost_containment(
    features,
    model,
    grid=None,
    polygon=None,
    offset=None,
    spacing=None,
    p=40.0,
    threshold=None,
    want_gradient=False,
):
    """Keep feature material off a ring of points outside the domain.

    Every (feature, ghost point) density is aggregated with the
    lower-bound variant aggregate(...) - ln(N)/p, which never exceeds the
    true maximum: an all-interior layout evaluates strictly negative
    against the 2 * rho_min threshold instead of drowning in aggregation
    slack. Material actually crossing the outline drives some density
    toward one, far above the slack, so crossings still flag reliably.
    """
    if polygon is None:
        if grid is None:
            raise ValueError("need a grid or an explicit domain polygon")
        polygon = domain_polygon(grid)
    if offset is None:
        if grid is None:
            raise ValueError("need a grid to default the ghost offset")
        offset = 0.5 * grid.l_el
    if spacing is None:
        if grid is None:
            raise ValueError("need a grid to default the ghost spacing")
        spacing = grid.l_el
    if threshold is None:
        threshold = 2.0 * model.rho_min

    layout = ParamLayout(features)
    pts = ghost_points(polygon, offset, spacing)
    dens = []
    ders = []
    for f in features:
        d = FeatureField(f).value(pts)
        rho, drho = heaviside_eval(model, d)
        dens.append(rho)
        ders.append(drho)
    dens = np.stack(dens)  # (nfeat, npts)
    n_total = dens.size
    value = aggregate(dens.ravel(), p) - math.log(n_total) / p - threshold
    if not want_gradient:
        return value
    w = _ks_weights(dens.ravel(), p).reshape(dens.shape)
    grad = np.zeros(layout.nparams)
    regular = model.differentiable
    for i, f in enumerate(features):
        chain = w[i] * ders[i]
        live = np.abs(chain) > _DEAD_WEIGHT
        if not live.any():
            continue
        pj, reg = FeatureField(f).jacobian(pts[live])
        regular = regular and bool(reg.all())
        grad[layout.shape_slice(i)] = chain[live] @ pj
    return value, grad, regular


# ---------------------------------------------------------------------------
# volume resource


def volume_fraction(density, limit):
    """Material volume fraction against its limit, normalized to <= 0.

    value = mean(rho) / limit - 1 over the analysis density field; the
    gradient chains through the field's parameter Jacobian when present.
    """
    if not 0.0 < limit <= 1.0:
        raise ValueError(f"volume fraction limit must lie in (0, 1], got {limit}")
    rho = density.rho
    value = float(rho.mean()) / limit - 1.0
    if density.jac is None:
        return value, None
    grad = np.asarray(density.jac.sum(axis=0)).ravel() / (rho.size * limit)
    return value, grad


# ---------------------------------------------------------------------------
# configured constraint sets


@dataclass(frozen=True)
class Constraint:
    """One configured constraint; fields beyond kind apply selectively.

    volume: limit. fcm: gap. overlap_integral: budget (absolute area
    slack, defaults to 1e-3 of the summed feature areas; the row is
    normalized by that sum). overlap_aux: gap, p. ghost: offset, spacing,
    p (grid defaults fill in at evaluation time).
    """

    kind: str
    limit: float = 0.5
    gap: float = 0.0
    p: float = 40.0
    budget: float | None = None
    offset: float | None = None
    spacing: float | None = None

    def __post_init__(self):
        if self.kind not in CONSTRAINT_KINDS:
            raise ValueError(f"unknown constraint kind '{self.kind}', expected one of {CONSTRAINT_KINDS}")
        if self.kind == "volume" and not 0.0 < self.limit <= 1.0:
            raise ValueError(f"volume fraction limit must lie in (0, 1], got {self.limit}")
        if self.gap < 0.0:
            raise ValueError(f"minimum gap must be nonnegative, got {self.gap}")
        if self.p <= 0.0:
            raise ValueError(f"aggregation parameter p must be positive, got {self.p}")


class ConstraintSet:
    """Evaluates a list of configured constraints against one layout.

    Evaluations are independent and pure; results stack in declaration
    order into a single ConstraintResult.
    """

    def __init__(self, constraints):
        self.constraints = list(constraints)
        if not self.constraints:
            raise ValueError("constraint set needs at least one constraint")

    def evaluate(self, features, grid, model, quadrature, spec=None, density=None, want_gradient=True):
        layout = ParamLayout(features)
        parts = []
        for c in self.constraints:
            if c.kind == "volume":
                if density is None:
                    density = map_and_combine(
                        features, grid, model, quadrature, spec or CombineSpec(), want_jacobian=want_gradient
                    )
                if want_gradient and density.jac is None:
                    raise ValueError("volume gradient needs a density field mapped with its Jacobian")
                value, grad = volume_fraction(density, c.limit)
                jac = grad[None, :] if want_gradient else None
                parts.append(ConstraintResult([value], jac, ["volume"], [True], layout))
            elif c.kind == "fcm":
                parts.append(fcm_separation(features, c.gap, want_gradient=want_gradient))
            elif c.kind == "overlap_integral":
                total = sum(f.area() for f in features)
                budget = c.budget if c.budget is not None else 1e-3 * total
                out = overlap_integral(features, grid, model, quadrature, spec=None, want_gradient=want_gradient)
                if want_gradient:
                    raw, grad, regular = out
                    jac = grad[None, :] / total
                else:
                    raw, jac, regular = out, None, True
                parts.append(
                    ConstraintResult([(raw - budget) / total], jac, ["overlap"], [regular], layout)
                )
            elif c.kind == "overlap_aux":
                out = overlap_auxiliary_density(
                    features, grid, model, quadrature, min_gap=c.gap, p=c.p, want_gradient=want_gradient
                )
                if want_gradient:
                    value, grad, regular = out
                    jac = grad[None, :]
                else:
                    value, jac, regular = out, None, True
                parts.append(ConstraintResult([value], jac, ["aux_overlap"], [regular], layout))
            else:
                out = ghost_containment(
                    features,
                    model,
                    grid=grid,
                    offset=c.offset,
                    spacing=c.spacing,
                    p=c.p,
                    want_gradient=want_gradient,
                )
                if want_gradient:
                    value, grad, regular = out
                    jac = grad[None, :]
                else:
                    value, jac, regular = out, None, True
                parts.append(ConstraintResult([value], jac, ["ghost"], [regular], layout))
        return _stack_results(parts)
