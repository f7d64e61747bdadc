"""Benchmark studies and the scenario runner.

Three fixed studies exercise the moving-boundary behaviour end to end:
the H-shape sweep (a vertical bar slides across a fixed flange pair),
the three-bar composition demo (field exports for every combination
strategy), and the four-bar landscape whose compliance curve has two
distinct local minima.  `run_scenario` dispatches a parsed scenario
file to its study and writes every artifact plus a run manifest.
"""

from __future__ import annotations

import dataclasses
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io, plots
from .combine import CombineSpec, build_combined_field, map_and_combine
from .fea import (
    AnalysisError,
    FeaProblem,
    assemble_and_solve,
    element_dof_matrix,
    node_id,
    nodes_where,
)
from .geometry import Bar, Hyperellipse, RectangleAA
from .mapping import (
    BoundaryModel,
    FeatureField,
    Grid,
    Quadrature,
    grayness,
    heaviside_eval,
)
from .material import MaterialModel, interpolate
from .optimizer import optimize
from .scenario import EvaluationProblem, ScenarioError, parse_scenario
from .sensitivity import fd_verify

__all__ = [
    "HshapeSample",
    "LocalMinResult",
    "RunReport",
    "detect_local_minima",
    "hshape_conforming_reference",
    "hshape_density",
    "hshape_features",
    "hshape_grid",
    "hshape_problem",
    "localmin_density",
    "localmin_features",
    "localmin_grid",
    "localmin_problem",
    "run_hshape_sweep",
    "run_localmin_sweep",
    "run_scenario",
    "run_threebar_demo",
    "threebar_bars",
    "threebar_grid",
    "threebar_hyperellipses",
]

MIDPOINT = Quadrature("newton_cotes", 0)
DEG2 = Quadrature("newton_cotes", 2)

# ---------------------------------------------------------------------------
# H-shape: two full-width flanges joined by a vertical bar at position s.

HSHAPE_BAR_WIDTH = 4.0
HSHAPE_S_MAX = 36.0


def hshape_grid():
    return Grid(40, 40, 1.0)


def hshape_features(s):
    """Bottom flange, top flange and the vertical bar with left edge at s."""
    s = float(s)
    if not 0.0 <= s <= HSHAPE_S_MAX:
        raise ValueError(f"bar position s must lie in [0, {HSHAPE_S_MAX}], got {s}")
    return [
        RectangleAA(0.0, 0.0, 40.0, 4.0),
        RectangleAA(0.0, 36.0, 40.0, 40.0),
        RectangleAA(s, 4.0, s + HSHAPE_BAR_WIDTH, 36.0),
    ]


def hshape_problem(material):
    """Bottom edge clamped, force (1, -1) at the top-left corner node."""
    grid = hshape_grid()
    bottom = nodes_where(grid, lambda x, y: y == 0.0)
    fixed = np.concatenate([2 * bottom, 2 * bottom + 1])
    load = np.zeros(2 * grid.n_nodes)
    corner = node_id(grid, 0, 40)
    load[2 * corner] = 1.0
    load[2 * corner + 1] = -1.0
    return FeaProblem(grid, fixed, load, material)


def hshape_density(s, model, quadrature, grid=None):
    spec = CombineSpec("map_then_combine_density", "true_max")
    return map_and_combine(hshape_features(s), grid or hshape_grid(), model, quadrature, spec)


def _edge_grayness(grid, rho, s):
    """Grayness sums in bands tracking the bar's left and right edges.

    Restricted to rows clear of the flange transition zones so the sums
    isolate the two vertical edges.  The half-open windows reach five
    elements outward from each edge and split at the bar midline, so the
    cell count stays constant as s slides and even the slow tails of a
    smooth profile are captured rather than cut.
    """
    centroids = grid.element_centroids()
    g = grayness(rho)
    rows = (centroids[:, 1] > 6.0) & (centroids[:, 1] < 34.0)
    cx = centroids[:, 0]
    mid = s + HSHAPE_BAR_WIDTH / 2.0
    left = float(g[rows & (cx >= s - 5.0) & (cx < mid)].sum())
    right = float(g[rows & (cx >= mid) & (cx < s + HSHAPE_BAR_WIDTH + 5.0)].sum())
    return left, right


@dataclass(frozen=True)
class HshapeSample:
    s: float
    objective: float
    gray_left: float
    gray_right: float
    volume: float


def hshape_sample(s, model, material, quadrature, problem=None):
    problem = problem or hshape_problem(material)
    density = hshape_density(s, model, quadrature, grid=problem.grid)
    mu, _ = interpolate(material, density.rho)
    solution = assemble_and_solve(problem, mu, rho=density.rho)
    left, right = _edge_grayness(problem.grid, density.rho, s)
    return HshapeSample(float(s), solution.J, left, right, solution.V)


def run_hshape_sweep(s_values, model, material, quadrature, threads=1):
    """One HshapeSample per bar position; samples are independent."""
    problem = hshape_problem(material)
    s_values = [float(s) for s in s_values]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda s: hshape_sample(s, model, material, quadrature, problem), s_values))
    return [hshape_sample(s, model, material, quadrature, problem) for s in s_values]


def hshape_conforming_reference(s, rho_min=1.0e-6):
    """(body-fitted J, fixed-grid J) for an element-aligned bar position.

    With s on an element boundary the footprint is a union of whole
    elements, so a body-fitted model is the same mesh with the void
    elements removed: their stiffness is zeroed and every node not
    touching a solid element is pinned.  The fixed-grid pipeline with
    the exact boundary model should reproduce that compliance up to the
    ersatz stiffness rho_min leaves in the void.
    """
    if not float(s).is_integer():
        raise ValueError(f"conforming comparison needs an element-aligned s, got {s}")
    material = MaterialModel("linear")
    problem = hshape_problem(material)
    grid = problem.grid

    density = hshape_density(s, BoundaryModel("exact", rho_min=rho_min), MIDPOINT, grid=grid)
    solid = density.rho > 0.5

    # Pin all dofs of nodes that no solid element touches.
    edof = element_dof_matrix(grid)
    solid_nodes = np.unique(edof[solid][:, 0::2] // 2)
    pinned_nodes = np.setdiff1d(np.arange(grid.n_nodes), solid_nodes)
    fixed = np.union1d(problem.fixed_dofs, np.concatenate([2 * pinned_nodes, 2 * pinned_nodes + 1]))
    reduced = FeaProblem(grid, fixed, problem.load, material)
    mu_fit = np.where(solid, 1.0, 1.0e-30)
    fitted = assemble_and_solve(reduced, mu_fit, rho=np.where(solid, 1.0, 0.0))

    mu, _ = interpolate(material, density.rho)
    mapped = assemble_and_solve(problem, mu, rho=density.rho)
    return fitted.J, mapped.J


# ---------------------------------------------------------------------------
# Three-bar composition demo on a 48 x 48 grid.


def threebar_grid():
    return Grid(48, 48, 1.0)


def threebar_bars(alpha_diag=1.0):
    """Two axis-aligned bars and one diagonal, as offset-surface capsules."""
    return [
        Bar(8.0, 14.0, 40.0, 14.0, 3.0),
        Bar(14.0, 8.0, 14.0, 40.0, 3.0),
        Bar(10.0, 10.0, 38.0, 38.0, 3.0, alpha=alpha_diag),
    ]


def threebar_hyperellipses(alpha_diag=1.0, m=6):
    """The same three-bar layout as rounded hyperellipse plates."""
    diag_half = 0.5 * np.hypot(28.0, 28.0)
    return [
        Hyperellipse(24.0, 14.0, 16.0, 3.0, 0.0, m=m),
        Hyperellipse(14.0, 24.0, 16.0, 3.0, np.pi / 2.0, m=m),
        Hyperellipse(24.0, 24.0, diag_half, 3.0, np.pi / 4.0, m=m, alpha=alpha_diag),
    ]


def _field_image(grid, values):
    return np.asarray(values, dtype=float).reshape(grid.ny, grid.nx)


def _export_field(out_dir, name, grid, values, lo=None, hi=None, title=""):
    """CSV + PGM + PNG for one element field; returns the paths."""
    out_dir = Path(out_dir)
    ex, ey = grid.element_xy(np.arange(grid.n_elements))
    csv = io.write_csv(out_dir / f"{name}.csv", ["ex", "ey", "value"], zip(ex, ey, values))
    img = _field_image(grid, values)
    pgm = io.write_pgm(out_dir / f"{name}.pgm", img, lo=lo, hi=hi)
    png = plots.save_field_png(out_dir / f"{name}.png", img, lo=lo, hi=hi, title=title or name)
    return [csv, pgm, png]


_ALPHA_SWEEP = (1.0, 0.8, 0.6, 0.1, 0.0)


def run_threebar_demo(out_dir, model=None):
    """Write every composition panel; returns the artifact paths."""
    out_dir = Path(out_dir)
    model = model or BoundaryModel("poly3", h=1.5, rho_min=1.0e-3)
    grid = threebar_grid()
    pts = grid.element_centroids()
    artifacts = []

    families = (("bar", threebar_bars()), ("hyper", threebar_hyperellipses()))
    feature_tags = ("horizontal", "vertical", "diagonal")
    for family, feats in families:
        for tag, feat in zip(feature_tags, feats):
            phi = FeatureField(feat, use_distance=False).value(pts)
            artifacts += _export_field(out_dir, f"{family}_{tag}_phi", grid, phi)
            if family == "bar":
                dist = FeatureField(feat, use_distance=True).value(pts)
                rho, _ = heaviside_eval(model, dist)
                artifacts += _export_field(
                    out_dir, f"{family}_{tag}_dist", grid, np.clip(dist, -10.0, 10.0)
                )
                artifacts += _export_field(out_dir, f"{family}_{tag}_rho", grid, rho, lo=0.0, hi=1.0)

        extrema = ("true_max", "ks", "r_union") if family == "bar" else ("true_max",)
        for extremum in extrema:
            spec = CombineSpec("combine_then_map", extremum)
            fld = build_combined_field(feats, spec, model=model)
            combined = fld.value(pts)
            artifacts += _export_field(
                out_dir, f"{family}_combined_{extremum}", grid, np.clip(combined, -10.0, 10.0)
            )
            if extremum == "true_max":
                smooth, _ = heaviside_eval(model, combined)
                artifacts += _export_field(
                    out_dir, f"{family}_combined_heaviside", grid, smooth, lo=0.0, hi=1.0
                )

        density = map_and_combine(
            feats, grid, model, DEG2, CombineSpec("map_then_combine_density", "ks")
        )
        artifacts += _export_field(out_dir, f"{family}_density", grid, density.rho, lo=0.0, hi=1.0)

    for alpha in _ALPHA_SWEEP:
        feats = threebar_bars(alpha_diag=alpha)
        density = map_and_combine(
            feats, grid, model, DEG2, CombineSpec("map_then_combine_density", "ks")
        )
        tag = f"alpha_{round(alpha * 100):03d}"
        artifacts += _export_field(out_dir, tag, grid, density.rho, lo=0.0, hi=1.0)
    return artifacts


# ---------------------------------------------------------------------------
# Four-bar landscape: a moving vertical bar against three fixed bars.

LOCALMIN_SIZE = 80.0
LOCALMIN_WIDTH = 2.5
LOCALMIN_BEAM = 1.5

# Minima whose basin climbs less than this fraction of the sweep range on
# either side are staircase wiggles of the binary density, not basins.
LOCALMIN_PROMINENCE = 0.02

# The grid is shifted half an element so centroids sit on integer
# coordinates: no sweep station then places a feature boundary exactly on
# a centroid, which would make membership depend on float rounding.
_LM_SHIFT = -0.5


def localmin_grid():
    return Grid(80, 80, 1.0, origin=(_LM_SHIFT, _LM_SHIFT))


def localmin_features(h, width=LOCALMIN_WIDTH):
    """Three fixed vertical bars, a top bar, and the moving bar at x = h.

    The fixed members use a high exponent so their centroid coverage is a
    pixel rectangle (no corner rounding), and the moving bar is a capsule
    whose caps lie outside the domain: its sides are exactly vertical, so
    every row flips membership at the same h and the sweep is a clean
    staircase.
    """
    L = LOCALMIN_SIZE
    half = float(width)
    cy = L / 2.0 + _LM_SHIFT
    column = lambda cx: Hyperellipse(cx, cy, half, L / 2.0, 0.0, m=20)
    top = Hyperellipse(cy, L + _LM_SHIFT - LOCALMIN_BEAM, L / 2.0, LOCALMIN_BEAM, 0.0, m=20)
    mover = Bar(float(h), -L / 8.0, float(h), L + L / 8.0, half)
    return [column(0.0), column(L / 2.0), column(L), top, mover]


def localmin_problem():
    """Bottom edge clamped; unit downward load on the top edge at 0.7 L."""
    grid = localmin_grid()
    feet = nodes_where(grid, lambda x, y: y == _LM_SHIFT)
    fixed = np.concatenate([2 * feet, 2 * feet + 1])
    load = np.zeros(2 * grid.n_nodes)
    at = node_id(grid, int(0.7 * LOCALMIN_SIZE), 80)
    load[2 * at + 1] = -1.0
    return FeaProblem(grid, fixed, load, MaterialModel("linear"))


def localmin_density(h, width=LOCALMIN_WIDTH, rho_min=1.0e-3, grid=None):
    """Binary pseudo-density by element-centroid membership of the union."""
    model = BoundaryModel("exact", rho_min=rho_min)
    spec = CombineSpec("map_then_combine_density", "true_max")
    return map_and_combine(localmin_features(h, width), grid or localmin_grid(), model, MIDPOINT, spec)


def detect_local_minima(values, min_prominence=0.0):
    """Indices of interior local minima, plateau-aware.

    A minimum is a maximal run of equal values strictly below the
    neighbouring values on both sides; runs touching either end of the
    sweep do not count.  With ``min_prominence`` set, a minimum is kept
    only if the values climb at least that far above it on both sides
    before any lower sample is reached.  Returns the centre index of
    each run.
    """
    v = np.asarray(values, dtype=float)
    minima = []
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and v[j + 1] == v[i]:
            j += 1
        if i > 0 and j < v.size - 1 and v[i - 1] > v[i] and v[j + 1] > v[j]:
            minima.append((i + j) // 2)
        i = j + 1
    if min_prominence > 0.0:
        minima = [c for c in minima if _prominence(v, c) >= min_prominence]
    return minima


def _prominence(v, c):
    """Smaller of the climbs from v[c] to the highest barrier reached
    before a strictly lower sample (or the sweep end) on each side."""
    sides = []
    for step in (-1, 1):
        barrier = v[c]
        i = c + step
        while 0 <= i < v.size and v[i] >= v[c]:
            barrier = max(barrier, v[i])
            i += step
        sides.append(barrier - v[c])
    return min(sides)


@dataclass(frozen=True)
class LocalMinResult:
    ratios: np.ndarray
    objectives: np.ndarray
    minima: list

    @property
    def minima_ratios(self):
        return [float(self.ratios[i]) for i in self.minima]

    @property
    def worst_minimum(self):
        """Index (into minima) of the minimum with the higher objective."""
        if not self.minima:
            raise ValueError("no interior local minima detected")
        values = [self.objectives[i] for i in self.minima]
        return int(np.argmax(values))


def run_localmin_sweep(samples=201, width=LOCALMIN_WIDTH, threads=1):
    problem = localmin_problem()
    hs = np.linspace(0.0, LOCALMIN_SIZE, samples)

    # The densities are binary and piecewise constant in h, so many
    # stations share a pattern bitwise; solve each pattern once.
    rhos = [localmin_density(h, width, grid=problem.grid).rho for h in hs]
    keys = [r.tobytes() for r in rhos]
    unique = {}
    for key, rho in zip(keys, rhos):
        unique.setdefault(key, rho)

    def solve(item):
        key, rho = item
        mu, _ = interpolate(problem.material, rho)
        return key, assemble_and_solve(problem, mu, rho=rho).J

    items = list(unique.items())
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            solved = dict(pool.map(solve, items))
    else:
        solved = dict(map(solve, items))
    objectives = np.array([solved[key] for key in keys])
    floor = LOCALMIN_PROMINENCE * (objectives.max() - objectives.min())
    minima = detect_local_minima(objectives, min_prominence=floor)
    return LocalMinResult(hs / LOCALMIN_SIZE, objectives, minima)


# ---------------------------------------------------------------------------
# Scenario runner.


@dataclass
class RunReport:
    code: int
    out_dir: Path
    artifacts: list
    error: str = ""


def _sweep_values(study):
    return np.linspace(study.start, study.stop, study.samples)


def _run_map_only(scenario, out):
    density = scenario.density()
    return [
        io.write_density_csv(out / "density.csv", density),
        io.write_density_pgm(out / "density.pgm", density),
        plots.save_field_png(out / "density.png", density.as_image(), lo=0.0, hi=1.0, title="density"),
    ]


def _run_sweep(scenario, out, threads):
    index, pname = scenario.study.parameter.split(".")
    findex = int(index[1:])
    problem = scenario.fea_problem()
    values = _sweep_values(scenario.study)
    with_constraints = scenario.constraints is not None

    def one(value):
        # Each sample evaluates an independent copy of the base design.
        feats = list(scenario.features)
        feats[findex] = dataclasses.replace(feats[findex], **{pname: float(value)})
        density = scenario.density(feats)
        mu, _ = interpolate(scenario.material, density.rho)
        solution = assemble_and_solve(problem, mu, rho=density.rho)
        row = [float(value), solution.J, solution.V]
        if with_constraints:
            res = scenario.constraints.evaluate(
                feats, scenario.grid, scenario.boundary, scenario.quadrature,
                spec=scenario.combine, density=density, want_gradient=False,
            )
            row.append(res.max_value)
        return row

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(one, values))
    else:
        rows = [one(v) for v in values]

    header = ["value", "objective", "volume"] + (["max_constraint"] if with_constraints else [])
    objectives = [r[1] for r in rows]
    return [
        io.write_csv(out / "sweep.csv", header, rows),
        plots.save_curve_png(
            out / "sweep.png", values, {"objective": objectives},
            xlabel=scenario.study.parameter, ylabel="objective",
        ),
    ]


def _run_optimize(scenario, out):
    problem = EvaluationProblem(scenario)
    design, history = optimize(problem, scenario.optimizer)
    artifacts = [
        io.write_history_csv(out / "history.csv", history),
        plots.save_history_png(out / "history.png", history),
    ]
    rows = zip(problem.names, design, problem.lower, problem.upper)
    artifacts.append(io.write_csv(out / "final_design.csv", ["param", "value", "lower", "upper"], rows))
    if history.termination == "analysis_failure":
        return 3, artifacts, f"analysis failed mid-run: {history.final.note}"
    density = scenario.density(problem.features_at(design))
    artifacts += [
        io.write_density_csv(out / "density.csv", density),
        io.write_density_pgm(out / "density.pgm", density),
        plots.save_field_png(out / "density.png", density.as_image(), lo=0.0, hi=1.0, title="final density"),
    ]
    return 0, artifacts, ""


def _run_verify(scenario, out):
    problem = EvaluationProblem(scenario)
    ev = problem.evaluate(problem.initial, want_gradients=True)
    steps = np.maximum(1.0e-5 * (problem.upper - problem.lower), 1.0e-8)
    report = fd_verify(
        problem.objective, problem.initial,
        analytic=ev.gradient, names=problem.names, steps=steps,
        lower=problem.lower, upper=problem.upper, tol=scenario.study.tol,
    )
    artifacts = [io.write_gradient_csv(out / "gradient_check.csv", report)]
    if not report.ok:
        worst = report.max_rel_err
        return 4, artifacts, f"gradient verification failed: max rel err {worst:.3e}"
    return 0, artifacts, ""


def run_scenario(source, out_dir=None, overrides=(), threads=1):
    """Parse, dispatch and write artifacts plus a manifest.

    Exit codes: 0 success, 2 parse/validation error, 3 analysis failure,
    4 gradient verification failure.
    """
    start = time.perf_counter()
    out = Path(out_dir) if out_dir is not None else Path("featmap-out")
    try:
        scenario = parse_scenario(source, overrides=overrides)
    except (ScenarioError, OSError) as err:
        return RunReport(2, out, [], str(err))

    kind = scenario.study.kind
    code, artifacts, error = 0, [], ""
    try:
        if kind == "map_only":
            artifacts = _run_map_only(scenario, out)
        elif kind == "sweep":
            artifacts = _run_sweep(scenario, out, threads)
        elif kind == "optimize":
            code, artifacts, error = _run_optimize(scenario, out)
        else:
            code, artifacts, error = _run_verify(scenario, out)
    except ScenarioError as err:
        return RunReport(2, out, artifacts, str(err))
    except (AnalysisError, ValueError) as err:
        # geometry refusals from the mapper (feature spine inside the
        # transition band, degenerate shapes) end a run the same way a
        # failed solve does
        return RunReport(3, out, artifacts, f"analysis failed: {err}")

    manifest = io.write_manifest(
        out / "manifest.json",
        command=f"run:{kind}",
        inputs={
            "scenario": str(source) if "\n" not in str(source) else "<inline>",
            "overrides": list(overrides),
            "threads": threads,
            "title": scenario.title,
        },
        outputs=[str(p) for p in artifacts],
        wall_time_s=time.perf_counter() - start,
        extra={"study": kind, "exit_code": code},
    )
    artifacts.append(manifest)
    return RunReport(code, out, artifacts, error)
