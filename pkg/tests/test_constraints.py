import dataclasses
import math

import numpy as np
import pytest

from featmap.combine import CombineSpec, ParamLayout, map_and_combine
from featmap.constraints import (
    Constraint,
    ConstraintSet,
    aggregate,
    dilate_feature,
    fcm_separation,
    feature_area_gradient,
    ghost_containment,
    ghost_points,
    offset_polygon,
    overlap_auxiliary_density,
    overlap_integral,
    surrogate_circles,
    volume_fraction,
)
from featmap.geometry import Bar, Circle, Hyperellipse, RectangleAA
from featmap.mapping import BoundaryModel, Grid, Quadrature

DEG2 = Quadrature("newton_cotes", 2)
GAUSS = Quadrature("quasi_analytic")

L_SHAPE = np.array([[0.0, 0.0], [10.0, 0.0], [10.0, 5.0], [5.0, 5.0], [5.0, 10.0], [0.0, 10.0]])


def flat_of(features):
    vals = []
    for f in features:
        vals.extend(getattr(f, n) for n in f.PARAMS)
        vals.append(f.alpha)
    return np.array(vals, dtype=float)


def apply_flat(features, x):
    out = []
    off = 0
    for f in features:
        kw = {n: float(x[off + k]) for k, n in enumerate(f.PARAMS)}
        kw["alpha"] = float(x[off + len(f.PARAMS)])
        off += len(f.PARAMS) + 1
        out.append(dataclasses.replace(f, **kw))
    return out


def fd_gradient(fn, x, step=1e-6):
    # central differences, falling back to second-order one-sided stencils
    # when a perturbation violates a parameter bound (alpha at 1)
    def at(k, delta):
        xk = x.copy()
        xk[k] += delta
        return fn(xk)

    g = np.zeros_like(x)
    for k in range(len(x)):
        try:
            g[k] = (at(k, step) - at(k, -step)) / (2.0 * step)
            continue
        except ValueError:
            pass
        try:
            g[k] = (3.0 * fn(x) - 4.0 * at(k, -step) + at(k, -2.0 * step)) / (2.0 * step)
        except ValueError:
            g[k] = (-3.0 * fn(x) + 4.0 * at(k, step) - at(k, 2.0 * step)) / (2.0 * step)
    return g


def assert_close_gradient(analytic, fd, rel_tol=1e-5, scale_floor=1e-3):
    floor = scale_floor * max(np.abs(analytic).max(), np.abs(fd).max(), 1e-12)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), floor)
    rel = np.abs(analytic - fd) / denom
    assert rel.max() < rel_tol, f"max rel err {rel.max():.3e} at column {rel.argmax()}"


def pixel_points(lo, hi, n):
    xs = lo[0] + (np.arange(n) + 0.5) * (hi[0] - lo[0]) / n
    ys = lo[1] + (np.arange(n) + 0.5) * (hi[1] - lo[1]) / n
    X, Y = np.meshgrid(xs, ys)
    return np.stack([X.ravel(), Y.ravel()], axis=1)


# ---------------------------------------------------------------------------
# aggregation


def test_aggregate_single_value_is_exact():
    assert aggregate([0.37], p=40.0) == pytest.approx(0.37, abs=1e-15)
    assert aggregate([-2.5], p=7.0) == pytest.approx(-2.5, abs=1e-15)


def test_aggregate_pair_of_zeros():
    assert aggregate([0.0, 0.0], p=10.0) == pytest.approx(math.log(2.0) / 10.0, rel=1e-14)


def test_aggregate_sandwich_property():
    rng = np.random.default_rng(31)
    for _ in range(300):
        n = int(rng.integers(1, 12))
        v = rng.normal(scale=4.0, size=n)
        p = float(rng.uniform(2.0, 80.0))
        ks = aggregate(v, p)
        assert v.max() - 1e-12 <= ks <= v.max() + math.log(n) / p + 1e-12


def test_aggregate_rejects_empty_and_bad_p():
    with pytest.raises(ValueError):
        aggregate([], p=10.0)
    with pytest.raises(ValueError):
        aggregate([1.0], p=0.0)


# ---------------------------------------------------------------------------
# surrogate circles


def test_bar_surrogates_cover_with_minimal_uniform_radius():
    cs = surrogate_circles(Bar(0.0, 0.0, 10.0, 0.0, 1.0))
    assert len(cs) == 6  # caps + ceil(10/2) - 1 interior
    assert [c.cx for c in cs] == pytest.approx([0.0, 2.0, 4.0, 6.0, 8.0, 10.0])
    # spacing 2 with bar radius 1: covering radius sqrt(1 + 1)
    assert all(c.r == pytest.approx(math.sqrt(2.0), rel=1e-14) for c in cs)


def test_bar_surrogate_coverage_random():
    # every interior point of random bars lies inside some surrogate circle
    rng = np.random.default_rng(7)
    for _ in range(60):
        bar = Bar(*rng.uniform(0.0, 10.0, size=4), float(rng.uniform(0.3, 2.0)))
        circles = surrogate_circles(bar)
        pad = bar.r + 0.1
        lo = np.minimum([bar.ax, bar.ay], [bar.bx, bar.by]) - pad
        hi = np.maximum([bar.ax, bar.ay], [bar.bx, bar.by]) + pad
        pts = rng.uniform(lo, hi, size=(2000, 2))
        pts = pts[bar.implicit(pts) > 0.0]
        if not len(pts):
            continue
        covered = np.zeros(len(pts), dtype=bool)
        for c in circles:
            covered |= np.linalg.norm(pts - c.center, axis=1) <= c.r + 1e-12
        assert covered.all()


def test_circle_surrogate_is_itself():
    (c,) = surrogate_circles(Circle(2.0, 3.0, 0.8), index=4)
    assert (c.cx, c.cy, c.r) == (2.0, 3.0, 0.8)
    assert c.feature_index == 4
    expect = np.zeros((3, 4))
    expect[0, 0] = expect[1, 1] = expect[2, 2] = 1.0
    assert np.array_equal(c.jac, expect)


def test_rectangle_surrogate_circumscribes():
    (c,) = surrogate_circles(RectangleAA(1.0, 2.0, 5.0, 5.0))
    assert (c.cx, c.cy) == (3.0, 3.5)
    assert c.r == pytest.approx(2.5)  # half diagonal of a 4x3 box
    corners = np.array([[1.0, 2.0], [5.0, 2.0], [5.0, 5.0], [1.0, 5.0]])
    assert np.linalg.norm(corners - [c.cx, c.cy], axis=1) == pytest.approx(c.r)


@pytest.mark.parametrize("m", [2, 4, 6])
def test_hyperellipse_surrogate_circumscribes(m):
    f = Hyperellipse(0.0, 0.0, 3.0, 1.5, 0.0, m=m)
    (c,) = surrogate_circles(f)
    # parameterize the first-quadrant boundary and compare radii
    w = np.linspace(0.0, 1.0, 2001)
    u = f.a * w ** (1.0 / m)
    v = f.b * (1.0 - w) ** (1.0 / m)
    boundary_r = np.hypot(u, v)
    assert boundary_r.max() <= c.r + 1e-9
    assert boundary_r.max() == pytest.approx(c.r, rel=1e-6)


def test_hyperellipse_surrogate_radius_gradient_fd():
    step = 1e-6
    for a, b, m in [(3.0, 1.5, 4), (1.2, 2.7, 6), (2.0, 1.0, 2)]:
        (c,) = surrogate_circles(Hyperellipse(0.0, 0.0, a, b, 0.3, m=m))
        fd_a = (
            surrogate_circles(Hyperellipse(0, 0, a + step, b, 0.3, m=m))[0].r
            - surrogate_circles(Hyperellipse(0, 0, a - step, b, 0.3, m=m))[0].r
        ) / (2 * step)
        fd_b = (
            surrogate_circles(Hyperellipse(0, 0, a, b + step, 0.3, m=m))[0].r
            - surrogate_circles(Hyperellipse(0, 0, a, b - step, 0.3, m=m))[0].r
        ) / (2 * step)
        assert c.jac[2, 2] == pytest.approx(fd_a, rel=1e-6, abs=1e-9)
        assert c.jac[2, 3] == pytest.approx(fd_b, rel=1e-6, abs=1e-9)


# ---------------------------------------------------------------------------
# finite circle separation


def test_fcm_reference_values():
    res = fcm_separation([Circle(0.0, 0.0, 1.0), Circle(3.0, 0.0, 1.0)], min_gap=0.5)
    assert res.values == pytest.approx([-0.5])
    assert res.satisfied
    res = fcm_separation([Circle(0.0, 0.0, 1.0), Circle(1.5, 0.0, 1.0)], min_gap=0.5)
    assert res.values == pytest.approx([1.0])
    assert not res.satisfied


def test_fcm_pair_count_single_circle_features():
    feats = [Circle(3.0 * i, 0.0, 0.4) for i in range(4)]
    res = fcm_separation(feats)
    assert len(res.values) == 6  # N(N-1)/2 for N = 4
    assert res.jacobian.shape == (6, ParamLayout(feats).nparams)


def test_fcm_rejects_negative_gap():
    with pytest.raises(ValueError):
        fcm_separation([Circle(0, 0, 1), Circle(3, 0, 1)], min_gap=-0.1)


def test_fcm_coincident_centers_flagged():
    res = fcm_separation([Circle(1.0, 1.0, 0.5), Circle(1.0, 1.0, 0.7)])
    assert not res.regular[0]
    assert res.values[0] == pytest.approx(1.2)
    # direction terms substituted by zero, radius terms kept
    layout = res.layout
    assert res.jacobian[0, layout.col(0, "cx")] == 0.0
    assert res.jacobian[0, layout.col(0, "r")] == 1.0
    assert res.jacobian[0, layout.col(1, "r")] == 1.0


def test_fcm_gradient_fd():
    # bar lengths away from circle-count transitions so the layout is smooth
    feats = [
        Bar(1.23, 1.07, 6.81, 2.93, 1.0),
        Bar(2.13, 6.91, 7.18, 5.68, 0.8),
        Circle(8.3, 2.2, 0.9),
    ]
    res = fcm_separation(feats, min_gap=0.3)
    assert res.regular.all()
    x0 = flat_of(feats)
    p = 9.0

    def ks_of_values(x):
        vals = fcm_separation(apply_flat(feats, x), min_gap=0.3, want_gradient=False).values
        return aggregate(vals, p)

    w = np.exp(p * (res.values - res.values.max()))
    w /= w.sum()
    analytic = w @ res.jacobian
    assert_close_gradient(analytic, fd_gradient(ks_of_values, x0), rel_tol=2e-5)
    # and one raw row checked directly
    k = int(np.argmax(res.values))
    fd_row = fd_gradient(lambda x: fcm_separation(apply_flat(feats, x), 0.3, want_gradient=False).values[k], x0)
    assert_close_gradient(res.jacobian[k], fd_row, rel_tol=2e-5)


def test_fcm_soundness_and_conservatism_random_bars():
    # satisfied separation must imply a pixel-level non-overlap; the
    # converse may fail because the circles over-cover
    rng = np.random.default_rng(20240817)
    pts = pixel_points((0.0, 0.0), (10.0, 10.0), 80)
    overlapping_accepted = 0
    conservative = 0
    for _ in range(200):
        bars = [Bar(*rng.uniform(1.0, 9.0, size=4), float(rng.uniform(0.4, 1.2))) for _ in range(2)]
        ok = fcm_separation(bars, want_gradient=False).max_value <= 0.0
        inside = [b.implicit(pts) > 0.0 for b in bars]
        pix = bool((inside[0] & inside[1]).any())
        if ok and pix:
            overlapping_accepted += 1
        if not ok and not pix:
            conservative += 1
    assert overlapping_accepted == 0
    assert conservative > 0


# ---------------------------------------------------------------------------
# volume-integral overlap


def test_feature_area_gradients_fd():
    feats = [
        Bar(1.2, 0.7, 5.3, 3.1, 0.8),
        Circle(2.0, 2.0, 1.3),
        Hyperellipse(1.0, 4.0, 2.2, 1.1, 0.4, m=6),
        RectangleAA(0.5, 0.5, 3.5, 2.0),
    ]
    for f in feats:
        area, grad = feature_area_gradient(f)
        assert area == pytest.approx(f.area(), rel=1e-14)
        x0 = flat_of([f])
        fd = fd_gradient(lambda x: apply_flat([f], x)[0].area(), x0)
        assert_close_gradient(grad, fd, rel_tol=1e-5)


def test_overlap_integral_disjoint_interior_circles_near_zero():
    grid = Grid(80, 80, 0.125)
    feats = [Circle(3.0137, 4.9871, 1.0), Circle(7.0423, 5.0191, 1.0)]
    value = overlap_integral(feats, grid, BoundaryModel("exact"), GAUSS, CombineSpec("combine_then_map", "true_max"))
    v_total = sum(f.area() for f in feats)
    assert abs(value) < 1e-3 * v_total


def test_overlap_integral_coincident_circles_give_one_area():
    grid = Grid(80, 80, 0.125)
    feats = [Circle(5.0137, 4.9871, 1.0), Circle(5.0137, 4.9871, 1.0)]
    value = overlap_integral(feats, grid, BoundaryModel("exact"), GAUSS, CombineSpec("combine_then_map", "true_max"))
    assert value == pytest.approx(math.pi, abs=5e-3)


def test_overlap_integral_half_outside_domain():
    grid = Grid(80, 80, 0.125)
    feats = [Circle(0.0, 5.0137, 1.0)]
    model = BoundaryModel("exact")
    value = overlap_integral(feats, grid, model, GAUSS, CombineSpec("combine_then_map", "true_max"))
    assert value == pytest.approx(math.pi / 2.0, abs=5e-3)
    # cross-check against a high-resolution pixel count of circle & domain
    pts = pixel_points((-1.5, 3.5), (1.5, 6.5), 600)
    in_dom = (pts[:, 0] >= 0.0) & (pts[:, 0] <= 10.0) & (pts[:, 1] >= 0.0) & (pts[:, 1] <= 10.0)
    inside = feats[0].implicit(pts) > 0.0
    v_in = (inside & in_dom).mean() * 9.0
    assert value == pytest.approx(math.pi - v_in, abs=2e-2)


def test_overlap_integral_gradient_fd():
    grid = Grid(24, 24, 0.5)
    model = BoundaryModel("poly3", h=0.75)
    feats = [Circle(4.13, 5.91, 1.7), Circle(6.87, 6.22, 1.9)]  # slightly overlapping
    spec = CombineSpec("combine_then_map", "ks", p=12.0)
    value, grad, regular = overlap_integral(feats, grid, model, DEG2, spec, want_gradient=True)
    assert regular
    assert value > 0.0
    x0 = flat_of(feats)
    fd = fd_gradient(lambda x: overlap_integral(apply_flat(feats, x), grid, model, DEG2, spec), x0, step=1e-5)
    assert_close_gradient(grad, fd, rel_tol=2e-5)


def test_overlap_integral_detects_domain_exit():
    grid = Grid(40, 40, 0.25)
    model = BoundaryModel("exact")
    spec = CombineSpec("combine_then_map", "true_max")
    inside = overlap_integral([Circle(5.0, 5.0, 1.0)], grid, model, GAUSS, spec)
    exiting = overlap_integral([Circle(0.4, 5.0, 1.0)], grid, model, GAUSS, spec)
    assert abs(inside) < 1e-2
    assert exiting > 0.3  # roughly the escaped circular segment area


# ---------------------------------------------------------------------------
# auxiliary-density overlap


def test_dilate_feature_rules():
    assert dilate_feature(Bar(0, 0, 4, 0, 1.0), 0.5).r == 1.5
    assert dilate_feature(Circle(1, 1, 1.0), 0.25).r == 1.25
    h = dilate_feature(Hyperellipse(0, 0, 2.0, 1.0, 0.0, m=4), 0.5)
    assert (h.a, h.b) == (2.5, 1.5)
    r = dilate_feature(RectangleAA(1, 1, 3, 2), 0.5)
    assert (r.x0, r.y0, r.x1, r.y1) == (0.5, 0.5, 3.5, 2.5)
    assert dilate_feature(Bar(0, 0, 4, 0, 1.0), 0.0) == Bar(0, 0, 4, 0, 1.0)
    with pytest.raises(ValueError):
        dilate_feature(Circle(0, 0, 1.0), -0.1)


def test_aux_overlap_single_feature_within_aggregation_slack():
    # the max summed density is one, so the lower-bound aggregate sits
    # within the ln(N)/p slack below zero
    grid = Grid(24, 24, 0.5)
    model = BoundaryModel("linear", h=0.6)
    p = 40.0
    value = overlap_auxiliary_density([Bar(2.1, 6.1, 9.9, 6.3, 2.0)], grid, model, DEG2, p=p)
    assert -math.log(grid.n_elements) / p - 1e-9 <= value <= 1e-9


def test_aux_overlap_two_coincident_bars():
    grid = Grid(24, 24, 0.5)
    model = BoundaryModel("linear", h=0.6)
    bar = Bar(2.1, 6.1, 9.9, 6.3, 2.0)
    value = overlap_auxiliary_density([bar, bar], grid, model, DEG2, p=40.0)
    assert value == pytest.approx(1.0, abs=math.log(2 * grid.n_elements) / 40.0 + 1e-9)


def test_aux_overlap_gap_crossing_within_transition_zone():
    # two parallel bars swept apart: the dilated fields stop summing above
    # one within a transition-zone width of the exact gap threshold
    grid = Grid(24, 24, 0.5)
    h = 0.6
    model = BoundaryModel("linear", h=h)
    gap = 1.0

    def value_at(delta):
        feats = [
            Bar(3.0, 1.7, 3.0, 10.3, 1.5),
            Bar(6.0 + delta, 1.7, 6.0 + delta, 10.3, 1.5),
        ]  # boundary-to-boundary distance is delta
        return overlap_auxiliary_density(feats, grid, model, DEG2, min_gap=gap, p=60.0)

    deltas = np.linspace(0.2, 3.0, 57)
    values = np.array([value_at(d) for d in deltas])
    assert values[0] > 0.0 and values[-1] < 0.0
    sign_flips = np.flatnonzero(np.diff(np.sign(values)))
    assert len(sign_flips) == 1
    crossing = deltas[sign_flips[0]]
    assert abs(crossing - gap) <= 2.0 * h + (deltas[1] - deltas[0])


def test_aux_overlap_gradient_fd():
    grid = Grid(20, 20, 0.5)
    model = BoundaryModel("poly3", h=0.6)
    feats = [Bar(2.13, 3.07, 7.81, 3.93, 1.1), Bar(4.2, 6.91, 8.18, 6.33, 0.9)]
    value, grad, regular = overlap_auxiliary_density(feats, grid, model, DEG2, min_gap=0.8, p=30.0, want_gradient=True)
    assert regular
    x0 = flat_of(feats)
    fd = fd_gradient(
        lambda x: overlap_auxiliary_density(apply_flat(feats, x), grid, model, DEG2, min_gap=0.8, p=30.0), x0, step=1e-5
    )
    assert_close_gradient(grad, fd, rel_tol=2e-5)
    # alpha does not move geometry
    layout = ParamLayout(feats)
    assert grad[layout.alpha_col(0)] == 0.0


# ---------------------------------------------------------------------------
# ghost containment


def test_offset_polygon_rectangle():
    square = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    out = offset_polygon(square, 0.5)
    assert out == pytest.approx(np.array([[-0.5, -0.5], [1.5, -0.5], [1.5, 1.5], [-0.5, 1.5]]))
    # input orientation must not matter
    out_cw = offset_polygon(square[::-1], 0.5)
    assert sorted(map(tuple, out_cw)) == pytest.approx(sorted(map(tuple, out)))


def test_offset_polygon_lshape_edges_shift_outward():
    out = offset_polygon(L_SHAPE, 0.25)
    assert len(out) == len(L_SHAPE)
    # every offset edge stays parallel to its source edge at distance offset
    for k in range(len(L_SHAPE)):
        a, b = L_SHAPE[k], L_SHAPE[(k + 1) % len(L_SHAPE)]
        t = (b - a) / np.linalg.norm(b - a)
        n = np.array([t[1], -t[0]])
        for p in (out[k], out[(k + 1) % len(out)]):
            assert float(n @ (p - a)) == pytest.approx(0.25, abs=1e-12)


def test_ghost_points_spacing_and_standoff():
    pts = ghost_points(L_SHAPE, offset=0.25, spacing=0.5)
    gaps = np.linalg.norm(np.diff(np.vstack([pts, pts[:1]]), axis=0), axis=1)
    assert gaps.max() <= 0.5 + 1e-12
    # no ghost point may fall inside the domain; use the reflex corner too
    inside_lower = (pts[:, 0] > 0) & (pts[:, 0] < 10) & (pts[:, 1] > 0) & (pts[:, 1] < 5)
    inside_upper = (pts[:, 0] > 0) & (pts[:, 0] < 5) & (pts[:, 1] > 0) & (pts[:, 1] < 10)
    assert not (inside_lower | inside_upper).any()
    with pytest.raises(ValueError):
        ghost_points(L_SHAPE, offset=0.0, spacing=0.5)


def test_ghost_interior_features_strictly_negative():
    grid = Grid(20, 20, 0.5)
    model = BoundaryModel("poly3", h=0.5)
    feats = [Bar(3.0, 3.0, 7.0, 7.0, 1.0), Circle(8.0, 2.5, 1.2)]
    value = ghost_containment(feats, model, grid=grid)
    assert value == pytest.approx(-model.rho_min)


def test_ghost_bar_crossing_edge_positive():
    grid = Grid(20, 20, 0.5)
    model = BoundaryModel("poly3", h=0.5)
    feats = [Bar(5.0, 5.0, 5.0, -1.5, 0.8)]  # pokes through the bottom edge
    value = ghost_containment(feats, model, grid=grid)
    assert value > 0.5


def test_ghost_lshape_notch_flagged_where_bbox_passes():
    model = BoundaryModel("poly3", h=0.5)
    bar = Bar(3.5, 7.0, 6.5, 7.0, 0.6)  # pokes through the notch wall at x = 5
    value = ghost_containment([bar], model, polygon=L_SHAPE, offset=0.25, spacing=0.5)
    assert value > 0.5
    # the rectangle hull misses the escape entirely
    bbox = np.array([[0.0, 0.0], [10.0, 0.0], [10.0, 10.0], [0.0, 10.0]])
    hull_value = ghost_containment([bar], model, polygon=bbox, offset=0.25, spacing=0.5)
    assert hull_value < 0.0


def test_ghost_flags_match_point_membership_oracle():
    # decisive configurations (band nowhere near the ghost ring) must agree
    # with brute-force membership of the ghost points
    model = BoundaryModel("poly3", h=0.5)
    configs = [
        [Bar(2.0, 2.0, 3.5, 3.5, 0.6)],  # deep interior
        [Bar(3.5, 7.0, 6.5, 7.0, 0.6)],  # through the notch wall
        [Bar(7.5, 7.5, 8.5, 8.5, 0.5)],  # floating in the notch, off the ring
        [Bar(2.0, 2.0, 2.0, -2.0, 0.6)],  # crossing the bottom
        [Circle(2.5, 7.5, 1.0), Bar(8.0, 2.5, 12.0, 2.5, 0.7)],  # one of two escapes
    ]
    pts = ghost_points(L_SHAPE, offset=0.25, spacing=0.5)
    for feats in configs:
        value = ghost_containment(feats, model, polygon=L_SHAPE, offset=0.25, spacing=0.5)
        oracle = any((f.implicit(pts) > 0.0).any() for f in feats)
        assert (value > 0.0) == oracle


def test_ghost_gradient_fd():
    grid = Grid(20, 20, 0.5)
    model = BoundaryModel("tanh", beta=2.0)
    feats = [Bar(1.21, 2.07, 3.53, 8.91, 0.9), Circle(8.8, 8.6, 1.1)]
    value, grad, regular = ghost_containment(feats, model, grid=grid, p=30.0, want_gradient=True)
    assert regular
    x0 = flat_of(feats)
    fd = fd_gradient(
        lambda x: ghost_containment(apply_flat(feats, x), model, grid=grid, p=30.0), x0, step=1e-5
    )
    assert_close_gradient(grad, fd, rel_tol=2e-5)


def test_ghost_exact_model_declares_nondifferentiable():
    grid = Grid(10, 10, 1.0)
    value, grad, regular = ghost_containment(
        [Circle(5.0, 5.0, 1.0)], BoundaryModel("exact"), grid=grid, want_gradient=True
    )
    assert not regular


# ---------------------------------------------------------------------------
# volume and constraint sets


def test_volume_fraction_value_and_gradient_fd():
    grid = Grid(20, 20, 0.5)
    model = BoundaryModel("poly3", h=0.6)
    spec = CombineSpec("map_then_combine_density", "ks", p=40.0)
    # alphas below one keep the aggregate under the clamp, where the
    # composite is smooth; at the clamp the gradient branches by design
    feats = [
        Bar(1.13, 2.07, 8.81, 2.93, 1.0, alpha=0.9),
        Bar(3.2, 1.1, 3.4, 8.9, 0.8, alpha=0.85),
    ]
    density = map_and_combine(feats, grid, model, DEG2, spec, want_jacobian=True)
    value, grad = volume_fraction(density, limit=0.4)
    assert value == pytest.approx(density.rho.mean() / 0.4 - 1.0, rel=1e-14)
    x0 = flat_of(feats)

    def vf(x):
        d = map_and_combine(apply_flat(feats, x), grid, model, DEG2, spec)
        return volume_fraction(d, limit=0.4)[0]

    assert_close_gradient(grad, fd_gradient(vf, x0, step=1e-5), rel_tol=2e-5)
    with pytest.raises(ValueError):
        volume_fraction(density, limit=0.0)


def test_constraint_set_stacks_rows_in_order():
    grid = Grid(20, 20, 0.5)
    model = BoundaryModel("poly3", h=0.6)
    feats = [Bar(2.0, 3.0, 8.0, 3.0, 1.0), Circle(5.0, 7.0, 1.5)]
    cs = ConstraintSet(
        [
            Constraint("volume", limit=0.5),
            Constraint("fcm", gap=0.2),
            Constraint("ghost"),
            Constraint("overlap_aux", gap=0.2, p=40.0),
        ]
    )
    res = cs.evaluate(feats, grid, model, DEG2, spec=CombineSpec("map_then_combine_density", "ks"))
    n_pairs = len(surrogate_circles(feats[0])) * len(surrogate_circles(feats[1]))
    assert len(res.values) == 1 + n_pairs + 1 + 1
    assert res.names[0] == "volume"
    assert res.names[-2] == "ghost"
    assert res.names[-1] == "aux_overlap"
    assert res.jacobian.shape == (len(res.values), ParamLayout(feats).nparams)
    assert res.regular.all()


def test_constraint_set_overlap_budget_row():
    grid = Grid(40, 40, 0.25)
    model = BoundaryModel("poly3", h=0.4)
    apart = [Circle(3.0, 5.0, 1.2), Circle(7.0, 5.0, 1.2)]
    joined = [Circle(4.6, 5.0, 1.2), Circle(5.4, 5.0, 1.2)]
    cs = ConstraintSet([Constraint("overlap_integral", budget=0.05)])
    res_ok = cs.evaluate(apart, grid, model, DEG2, want_gradient=False)
    res_bad = cs.evaluate(joined, grid, model, DEG2, want_gradient=False)
    assert res_ok.satisfied
    assert not res_bad.satisfied


def test_constraint_validation():
    with pytest.raises(ValueError):
        Constraint("nope")
    with pytest.raises(ValueError):
        Constraint("volume", limit=1.4)
    with pytest.raises(ValueError):
        Constraint("fcm", gap=-0.5)
    with pytest.raises(ValueError):
        Constraint("ghost", p=-3.0)
    with pytest.raises(ValueError):
        ConstraintSet([])
