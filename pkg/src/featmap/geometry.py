"""Geometric feature primitives and their implicit descriptions.

Every feature exposes an implicit value phi (positive inside, zero on the
boundary, negative outside), a signed distance d with the same sign
convention, the spatial gradient of phi, and analytic partial derivatives
of d with respect to the feature's own parameters. All point-wise routines
are vectorized over an (..., 2) array of coordinates.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Bar",
    "Circle",
    "Hyperellipse",
    "RectangleAA",
    "DesignVector",
    "ParamSpec",
    "implicit_value",
    "signed_distance",
    "implicit_gradient",
    "approx_signed_distance",
    "shape_param_jacobian",
]

# Gradient-norm underflow guard for the first-order distance approximation.
EPS_GRAD = 1.0e-12
# Fallback distance reported deep inside a feature when the gradient of the
# implicit vanishes (scaled by element size at the call site).
INTERIOR_SENTINEL = 1.0e6

_MEDIAL_TOL = 1.0e-9


def _as_points(points):
    pts = np.asarray(points, dtype=float)
    if pts.shape[-1] != 2:
        raise ValueError(f"points must have trailing dimension 2, got shape {pts.shape}")
    return pts.reshape(-1, 2), pts.shape[:-1]


def _validate_alpha(alpha):
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"size variable alpha must lie in [0, 1], got {alpha}")


@dataclass(frozen=True)
class Bar:
    """Offset-surface bar (capsule): all points within radius r of segment AB."""

    ax: float
    ay: float
    bx: float
    by: float
    r: float
    alpha: float = 1.0

    PARAMS = ("ax", "ay", "bx", "by", "r")

    def __post_init__(self):
        if self.r <= 0.0:
            raise ValueError(f"bar radius must be positive, got {self.r}")
        if self.ax == self.bx and self.ay == self.by:
            raise ValueError("bar endpoints coincide; use Circle for a point feature")
        _validate_alpha(self.alpha)

    def _segment_frame(self, pts):
        a = np.array([self.ax, self.ay])
        e = np.array([self.bx - self.ax, self.by - self.ay])
        ll = float(e @ e)
        w = pts - a
        t = (w @ e) / ll
        return a, e, ll, w, t

    def implicit(self, points):
        # The offset surface makes the implicit an exact signed distance.
        return self.signed_distance(points)

    def signed_distance(self, points):
        pts, shape = _as_points(points)
        a, e, ll, w, t = self._segment_frame(pts)
        tc = np.clip(t, 0.0, 1.0)
        # work in the segment frame so integer translations of feature and
        # query round identically (exact density permutation on the grid)
        diff = w - tc[:, None] * e
        rho = np.linalg.norm(diff, axis=1)
        return (self.r - rho).reshape(shape)

    def implicit_gradient(self, points):
        pts, shape = _as_points(points)
        a, e, ll, w, t = self._segment_frame(pts)
        tc = np.clip(t, 0.0, 1.0)
        diff = w - tc[:, None] * e
        rho = np.linalg.norm(diff, axis=1)
        safe = np.maximum(rho, _MEDIAL_TOL)
        # d = r - |x - closest|; gradient points toward the axis.
        return (-diff / safe[:, None]).reshape(shape + (2,))

    def implicit_param_jacobian(self, points):
        return self.distance_jacobian(points)

    def distance_jacobian(self, points):
        """Partials of signed distance wrt (ax, ay, bx, by, r).

        Returns (jac, regular) where jac has shape (..., 5) and regular marks
        samples off the medial set (on it the distance is not differentiable
        and an arbitrary subgradient branch is reported).
        """
        pts, shape = _as_points(points)
        a, e, ll, w, t = self._segment_frame(pts)
        n = pts.shape[0]
        jac = np.zeros((n, 5))
        regular = np.ones(n, dtype=bool)
        scale = max(np.sqrt(ll), self.r)

        cap_a = t <= 0.0
        cap_b = t >= 1.0
        flank = ~(cap_a | cap_b)

        # End caps: rho = |x - endpoint|, d = r - rho.
        for mask, (px, py), cols in ((cap_a, (self.ax, self.ay), (0, 1)), (cap_b, (self.bx, self.by), (2, 3))):
            if not mask.any():
                continue
            diff = pts[mask] - np.array([px, py])
            rho = np.linalg.norm(diff, axis=1)
            bad = rho < _MEDIAL_TOL * scale
            regular[np.flatnonzero(mask)[bad]] = False
            safe = np.maximum(rho, _MEDIAL_TOL * scale)
            # d(d)/d(endpoint) = (x - endpoint)/rho
            jac[mask, cols[0]] = diff[:, 0] / safe
            jac[mask, cols[1]] = diff[:, 1] / safe

        if flank.any():
            wf = w[flank]
            cross = e[0] * wf[:, 1] - e[1] * wf[:, 0]
            ln = np.sqrt(ll)
            sgn = np.where(cross >= 0.0, 1.0, -1.0)
            bad = np.abs(cross) < _MEDIAL_TOL * scale * ln
            regular[np.flatnonzero(flank)[bad]] = False
            # rho = sgn*cross/L; d = r - rho, differentiate the branch.
            dc_ax = e[1] - wf[:, 1]
            dc_ay = wf[:, 0] - e[0]
            dc_bx = wf[:, 1]
            dc_by = -wf[:, 0]
            dl_ax, dl_ay = -e[0] / ln, -e[1] / ln
            dl_bx, dl_by = e[0] / ln, e[1] / ln
            for col, dc, dl in ((0, dc_ax, dl_ax), (1, dc_ay, dl_ay), (2, dc_bx, dl_bx), (3, dc_by, dl_by)):
                jac[flank, col] = -sgn * (dc * ln - cross * dl) / ll

        jac[:, 4] = 1.0
        return jac.reshape(shape + (5,)), regular.reshape(shape)

    def area(self):
        length = float(np.hypot(self.bx - self.ax, self.by - self.ay))
        return 2.0 * self.r * length + np.pi * self.r**2


@dataclass(frozen=True)
class Circle:
    cx: float
    cy: float
    r: float
    alpha: float = 1.0

    PARAMS = ("cx", "cy", "r")

    def __post_init__(self):
        if self.r <= 0.0:
            raise ValueError(f"circle radius must be positive, got {self.r}")
        _validate_alpha(self.alpha)

    def implicit(self, points):
        return self.signed_distance(points)

    def signed_distance(self, points):
        pts, shape = _as_points(points)
        rho = np.linalg.norm(pts - [self.cx, self.cy], axis=1)
        return (self.r - rho).reshape(shape)

    def implicit_gradient(self, points):
        pts, shape = _as_points(points)
        diff = pts - [self.cx, self.cy]
        rho = np.linalg.norm(diff, axis=1)
        safe = np.maximum(rho, _MEDIAL_TOL)
        return (-diff / safe[:, None]).reshape(shape + (2,))

    def implicit_param_jacobian(self, points):
        return self.distance_jacobian(points)

    def distance_jacobian(self, points):
        pts, shape = _as_points(points)
        diff = pts - [self.cx, self.cy]
        rho = np.linalg.norm(diff, axis=1)
        regular = rho >= _MEDIAL_TOL * self.r
        safe = np.maximum(rho, _MEDIAL_TOL * self.r)
        jac = np.empty((pts.shape[0], 3))
        jac[:, 0] = diff[:, 0] / safe
        jac[:, 1] = diff[:, 1] / safe
        jac[:, 2] = 1.0
        return jac.reshape(shape + (3,)), regular.reshape(shape)

    def area(self):
        return np.pi * self.r**2


@dataclass(frozen=True)
class Hyperellipse:
    """Rotated hyperellipse, phi = 1 - ((u/a)^m + (v/b)^m) in local coordinates.

    m must be an even integer >= 2; it is part of the feature definition, not
    a design parameter. The signed distance is the first-order approximation
    phi/|grad phi| and is therefore approximate away from the boundary.
    """

    cx: float
    cy: float
    a: float
    b: float
    theta: float
    m: int = 2
    alpha: float = 1.0

    PARAMS = ("cx", "cy", "a", "b", "theta")

    def __post_init__(self):
        if self.a <= 0.0 or self.b <= 0.0:
            raise ValueError(f"semi-axes must be positive, got a={self.a}, b={self.b}")
        if self.m < 2 or self.m % 2 != 0:
            raise ValueError(f"exponent m must be an even integer >= 2, got {self.m}")
        _validate_alpha(self.alpha)

    def _local(self, pts):
        c, s = np.cos(self.theta), np.sin(self.theta)
        dx = pts[:, 0] - self.cx
        dy = pts[:, 1] - self.cy
        u = c * dx + s * dy
        v = -s * dx + c * dy
        return u, v, c, s

    def implicit(self, points):
        pts, shape = _as_points(points)
        u, v, _, _ = self._local(pts)
        return (1.0 - (u / self.a) ** self.m - (v / self.b) ** self.m).reshape(shape)

    def _pq(self, u, v):
        m = self.m
        p = -m * u ** (m - 1) / self.a**m
        q = -m * v ** (m - 1) / self.b**m
        return p, q

    def implicit_gradient(self, points):
        pts, shape = _as_points(points)
        u, v, c, s = self._local(pts)
        p, q = self._pq(u, v)
        gx = p * c - q * s
        gy = p * s + q * c
        return np.stack([gx, gy], axis=-1).reshape(shape + (2,))

    def signed_distance(self, points, interior_sentinel=INTERIOR_SENTINEL):
        return approx_signed_distance(self, points, interior_sentinel)

    def implicit_param_jacobian(self, points):
        """Partials of phi itself wrt (cx, cy, a, b, theta)."""
        pts, shape = _as_points(points)
        u, v, c, s = self._local(pts)
        m = self.m
        p, q = self._pq(u, v)
        jac = np.empty((pts.shape[0], 5))
        jac[:, 0] = -(p * c - q * s)  # translation: -dphi/dx
        jac[:, 1] = -(p * s + q * c)
        jac[:, 2] = m * u**m / self.a ** (m + 1)
        jac[:, 3] = m * v**m / self.b ** (m + 1)
        jac[:, 4] = p * v - q * u
        regular = np.ones(pts.shape[0], dtype=bool)
        return jac.reshape(shape + (5,)), regular.reshape(shape)

    def distance_jacobian(self, points):
        """Partials of the first-order distance wrt (cx, cy, a, b, theta)."""
        pts, shape = _as_points(points)
        u, v, c, s = self._local(pts)
        m = self.m
        p, q = self._pq(u, v)
        gn2 = p * p + q * q  # rotation drops out of |grad phi|
        gn = np.sqrt(gn2)
        regular = gn >= EPS_GRAD
        gn_safe = np.maximum(gn, EPS_GRAD)
        phi = 1.0 - (u / self.a) ** m - (v / self.b) ** m

        pu = -m * (m - 1) * u ** (m - 2) / self.a**m
        qv = -m * (m - 1) * v ** (m - 2) / self.b**m

        # per parameter: (dphi, dp, dq) with du, dv the local-frame shifts
        du = {"cx": -c, "cy": -s, "a": 0.0, "b": 0.0, "theta": v}
        dv = {"cx": s, "cy": -c, "a": 0.0, "b": 0.0, "theta": -u}
        jac = np.empty((pts.shape[0], 5))
        for col, name in enumerate(self.PARAMS):
            dphi = p * du[name] + q * dv[name]
            dp = pu * du[name]
            dq = qv * dv[name]
            if name == "a":
                dphi = m * u**m / self.a ** (m + 1)
                dp = dp - p * m / self.a
            elif name == "b":
                dphi = m * v**m / self.b ** (m + 1)
                dq = dq - q * m / self.b
            dgn = (p * dp + q * dq) / gn_safe
            jac[:, col] = dphi / gn_safe - phi * dgn / gn2.clip(EPS_GRAD**2)
        jac[~regular] = 0.0
        return jac.reshape(shape + (5,)), regular.reshape(shape)

    def area(self):
        # exact for the implicit's interior via the gamma function
        from scipy.special import gamma

        m = self.m
        return 4.0 * self.a * self.b * gamma(1.0 + 1.0 / m) ** 2 / gamma(1.0 + 2.0 / m)


@dataclass(frozen=True)
class RectangleAA:
    """Axis-aligned rectangle given by its min/max corners."""

    x0: float
    y0: float
    x1: float
    y1: float
    alpha: float = 1.0

    PARAMS = ("x0", "y0", "x1", "y1")

    def __post_init__(self):
        if self.x1 <= self.x0 or self.y1 <= self.y0:
            raise ValueError("rectangle corners must satisfy x0 < x1 and y0 < y1")
        _validate_alpha(self.alpha)

    def _q(self, pts):
        cx = 0.5 * (self.x0 + self.x1)
        cy = 0.5 * (self.y0 + self.y1)
        hx = 0.5 * (self.x1 - self.x0)
        hy = 0.5 * (self.y1 - self.y0)
        rx = pts[:, 0] - cx
        ry = pts[:, 1] - cy
        qx = np.abs(rx) - hx
        qy = np.abs(ry) - hy
        return qx, qy, rx, ry

    def implicit(self, points):
        return self.signed_distance(points)

    def signed_distance(self, points):
        pts, shape = _as_points(points)
        qx, qy, _, _ = self._q(pts)
        outside = np.hypot(np.maximum(qx, 0.0), np.maximum(qy, 0.0))
        inside = np.minimum(np.maximum(qx, qy), 0.0)
        return (-(outside + inside)).reshape(shape)

    def implicit_gradient(self, points):
        pts, shape = _as_points(points)
        qx, qy, rx, ry = self._q(pts)
        sx = np.where(rx >= 0.0, 1.0, -1.0)
        sy = np.where(ry >= 0.0, 1.0, -1.0)
        gx = np.zeros(pts.shape[0])
        gy = np.zeros(pts.shape[0])
        out = (qx > 0.0) | (qy > 0.0)
        px = np.maximum(qx, 0.0)
        py = np.maximum(qy, 0.0)
        rr = np.maximum(np.hypot(px, py), _MEDIAL_TOL)
        gx[out] = -(px * sx / rr)[out]
        gy[out] = -(py * sy / rr)[out]
        ins = ~out
        xdom = qx >= qy
        gx[ins & xdom] = -sx[ins & xdom]
        gy[ins & ~xdom] = -sy[ins & ~xdom]
        return np.stack([gx, gy], axis=-1).reshape(shape + (2,))

    def implicit_param_jacobian(self, points):
        return self.distance_jacobian(points)

    def distance_jacobian(self, points):
        pts, shape = _as_points(points)
        qx, qy, rx, ry = self._q(pts)
        sx = np.where(rx >= 0.0, 1.0, -1.0)
        sy = np.where(ry >= 0.0, 1.0, -1.0)
        scale = max(self.x1 - self.x0, self.y1 - self.y0)

        # dq/dparam for (x0, y0, x1, y1); q depends on its own axis only
        dqx = np.stack([(1.0 - sx) / 2.0, np.zeros_like(sx), -(1.0 + sx) / 2.0, np.zeros_like(sx)], axis=1)
        dqy = np.stack([np.zeros_like(sy), (1.0 - sy) / 2.0, np.zeros_like(sy), -(1.0 + sy) / 2.0], axis=1)

        n = pts.shape[0]
        jac = np.zeros((n, 4))
        regular = np.ones(n, dtype=bool)

        out = (qx > 0.0) | (qy > 0.0)
        px = np.maximum(qx, 0.0)
        py = np.maximum(qy, 0.0)
        rr = np.maximum(np.hypot(px, py), _MEDIAL_TOL * scale)
        wx = np.where(qx > 0.0, px / rr, 0.0)
        wy = np.where(qy > 0.0, py / rr, 0.0)
        jac[out] = -(wx[out, None] * dqx[out] + wy[out, None] * dqy[out])

        ins = ~out
        xdom = qx >= qy
        mx = ins & xdom
        my = ins & ~xdom
        jac[mx] = -dqx[mx]
        jac[my] = -dqy[my]

        # medial set: interior tie between the faces, or an axis-midline
        # sample whose own face branch is active
        tie = ins & (np.abs(qx - qy) < _MEDIAL_TOL * scale)
        xmid = (np.abs(rx) < _MEDIAL_TOL * scale) & (out & (qx > 0.0) | mx)
        ymid = (np.abs(ry) < _MEDIAL_TOL * scale) & (out & (qy > 0.0) | my)
        regular[tie | xmid | ymid] = False
        return jac.reshape(shape + (4,)), regular.reshape(shape)

    def area(self):
        return (self.x1 - self.x0) * (self.y1 - self.y0)


Feature = Bar | Circle | Hyperellipse | RectangleAA


def implicit_value(feature, points):
    """Implicit value of a feature, positive inside and zero on the boundary."""
    return feature.implicit(points)


def signed_distance(feature, points):
    """Signed distance (exact for Bar/Circle/RectangleAA, first order else)."""
    return feature.signed_distance(points)


def implicit_gradient(feature, points):
    return feature.implicit_gradient(points)


def approx_signed_distance(feature, points, interior_sentinel=INTERIOR_SENTINEL):
    """First-order signed distance phi/|grad phi|.

    Where the gradient norm underflows (deep interior of smooth implicits)
    the sentinel distance is reported with the sign of phi, so downstream
    Heavisides saturate instead of dividing by zero.
    """
    pts, shape = _as_points(points)
    phi = np.asarray(feature.implicit(pts)).reshape(-1)
    grad = np.asarray(feature.implicit_gradient(pts)).reshape(-1, 2)
    gn = np.linalg.norm(grad, axis=1)
    small = gn < EPS_GRAD
    d = np.empty_like(phi)
    d[~small] = phi[~small] / gn[~small]
    d[small] = np.sign(phi[small]) * interior_sentinel
    d[small & (phi == 0.0)] = 0.0
    return d.reshape(shape)


def shape_param_jacobian(feature, points):
    """Analytic partials of signed_distance wrt the feature's parameters.

    Returns (jac, regular); jac rows for non-regular samples hold an
    arbitrary subgradient branch (Bar/RectangleAA medial sets) or zeros
    (vanishing-gradient interior), so callers must consult the mask before
    trusting a sample inside the transition band.
    """
    return feature.distance_jacobian(points)


@dataclass(frozen=True)
class ParamSpec:
    """One active design parameter: a named scalar on one feature, boxed."""

    feature: int
    name: str
    lower: float
    upper: float

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ValueError(f"empty bound interval for {self.name}: [{self.lower}, {self.upper}]")


class DesignVector:
    """Ordered map between a flat value vector and feature parameters."""

    def __init__(self, specs):
        self.specs = list(specs)
        seen = set()
        for sp in self.specs:
            key = (sp.feature, sp.name)
            if key in seen:
                raise ValueError(f"duplicate design parameter {key}")
            seen.add(key)

    def __len__(self):
        return len(self.specs)

    @property
    def lower(self):
        return np.array([sp.lower for sp in self.specs])

    @property
    def upper(self):
        return np.array([sp.upper for sp in self.specs])

    def names(self, features=None):
        return [f"f{sp.feature}.{sp.name}" for sp in self.specs]

    def validate(self, features, values):
        values = np.asarray(values, dtype=float)
        if values.shape != (len(self.specs),):
            raise ValueError(f"expected {len(self.specs)} design values, got shape {values.shape}")
        for sp, v in zip(self.specs, values):
            if sp.feature < 0 or sp.feature >= len(features):
                raise ValueError(f"design parameter references feature {sp.feature} of {len(features)}")
            feat = features[sp.feature]
            if sp.name != "alpha" and sp.name not in feat.PARAMS:
                raise ValueError(f"feature {sp.feature} ({type(feat).__name__}) has no parameter '{sp.name}'")
            if not (sp.lower - 1e-12 <= v <= sp.upper + 1e-12):
                raise ValueError(f"value {v} for f{sp.feature}.{sp.name} outside [{sp.lower}, {sp.upper}]")
        return values

    def apply(self, features, values):
        """Return a new feature list with the design values substituted."""
        values = self.validate(features, values)
        updates = {}
        for sp, v in zip(self.specs, values):
            updates.setdefault(sp.feature, {})[sp.name] = float(v)
        out = list(features)
        for idx, kv in updates.items():
            out[idx] = dataclasses.replace(out[idx], **kv)
        return out

    def extract(self, features):
        return np.array([getattr(features[sp.feature], sp.name) for sp in self.specs])
