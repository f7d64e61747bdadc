"""Plain-text scenario files: parsing, validation and evaluation glue.

A scenario is an INI-like document with named sections; the schema is
documented in docs/scenario-format.md.  Parse and validation errors
carry the offending line number and key so a bad file points at itself.

Sections:
  [grid] [material] [boundary] [quadrature] [combine]   model setup
  [feature <name>]                                      one per feature
  [supports] [loads]                                    boundary conditions
  [constraints] [study] [optimizer]                     what to run

`build_problem` turns a parsed scenario into the evaluation object the
optimizer consumes (compliance objective, configured constraint rows,
flat design vector from the features' `vary` declarations).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .combine import CombineSpec, ParamLayout, map_and_combine
from .constraints import Constraint, ConstraintSet
from .fea import FeaProblem, assemble_and_solve, node_id, nodes_where
from .geometry import Bar, Circle, DesignVector, Hyperellipse, ParamSpec, RectangleAA
from .mapping import BoundaryModel, Grid, Quadrature
from .material import MaterialModel, interpolate
from .optimizer import Evaluation, OptimizerOptions
from .sensitivity import density_sensitivity, shape_sensitivity

__all__ = [
    "EvaluationProblem",
    "Scenario",
    "ScenarioError",
    "Study",
    "build_problem",
    "parse_scenario",
]

FEATURE_TYPES = {
    "bar": Bar,
    "circle": Circle,
    "hyperellipse": Hyperellipse,
    "rectangle": RectangleAA,
}
STUDY_KINDS = ("map_only", "sweep", "optimize", "verify")
_EDGES = ("left", "right", "bottom", "top")
_DOF_SETS = {"x": (0,), "y": (1,), "both": (0, 1)}
_HEADER = re.compile(r"^\[([^\[\]]+)\]$")
_REQUIRED = object()


class ScenarioError(ValueError):
    """Parse or validation failure, anchored to a line when known."""

    def __init__(self, message, line=None):
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)
        self.line = line


@dataclass
class _Entry:
    key: str
    value: str
    line: int


@dataclass
class _Section:
    name: str
    line: int
    entries: list


def _parse_lines(text):
    """Split the document into sections; no semantics yet."""
    sections = []
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _HEADER.match(line)
        if m:
            current = _Section(m.group(1).strip(), lineno, [])
            sections.append(current)
            continue
        if "=" not in line:
            raise ScenarioError(f"expected 'key = value' or '[section]', got '{line}'", lineno)
        if current is None:
            raise ScenarioError(f"entry '{line}' appears before any section header", lineno)
        key, _, value = line.partition("=")
        current.entries.append(_Entry(key.strip(), value.strip(), lineno))
    return sections


class _View:
    """Typed access to one section's entries with unknown-key detection."""

    def __init__(self, section, repeatable=()):
        self.section = section
        self.repeatable = set(repeatable)
        self._entries = {}
        for e in section.entries:
            if e.key in self.repeatable:
                self._entries.setdefault(e.key, []).append(e)
            elif e.key in self._entries:
                first = self._entries[e.key].line
                raise ScenarioError(
                    f"[{section.name}] repeats key '{e.key}' (first set on line {first})", e.line
                )
            else:
                self._entries[e.key] = e
        self._used = set()

    def has(self, key):
        return key in self._entries

    def get(self, key, conv, default=_REQUIRED, choices=None):
        self._used.add(key)
        if key not in self._entries:
            if default is _REQUIRED:
                raise ScenarioError(
                    f"[{self.section.name}] is missing required key '{key}'", self.section.line
                )
            return default
        entry = self._entries[key]
        try:
            value = conv(entry.value)
        except (ValueError, TypeError) as err:
            raise ScenarioError(f"[{self.section.name}] {key}: {err}", entry.line) from None
        if choices is not None and value not in choices:
            raise ScenarioError(
                f"[{self.section.name}] {key}: '{value}' is not one of {sorted(choices)}",
                entry.line,
            )
        return value

    def all(self, key):
        self._used.add(key)
        return self._entries.get(key, [])

    def line_of(self, key):
        e = self._entries.get(key)
        if isinstance(e, list):
            return e[0].line
        return e.line if e is not None else self.section.line

    def finish(self):
        for key, entry in self._entries.items():
            if key not in self._used:
                e = entry[0] if isinstance(entry, list) else entry
                raise ScenarioError(f"[{self.section.name}] has unknown key '{key}'", e.line)


def _as_float(s):
    try:
        return float(s)
    except ValueError:
        raise ValueError(f"expected a number, got '{s}'") from None


def _as_int(s):
    f = float(s)
    if f != int(f):
        raise ValueError(f"expected an integer, got '{s}'")
    return int(f)


def _as_str(s):
    if not s:
        raise ValueError("expected a value")
    return s


def _as_floats(s):
    return tuple(float(t) for t in s.split())


@dataclass
class Study:
    """What to run: one of map_only, sweep, optimize, verify."""

    kind: str
    parameter: str | None = None
    start: float | None = None
    stop: float | None = None
    samples: int | None = None
    tol: float = 1.0e-4


@dataclass
class Scenario:
    """A fully validated scenario, ready to evaluate."""

    grid: Grid
    material: MaterialModel
    boundary: BoundaryModel
    quadrature: Quadrature
    combine: CombineSpec
    features: list
    feature_names: list
    design: DesignVector | None
    supports: list
    loads: list
    constraints: ConstraintSet | None
    study: Study
    optimizer: OptimizerOptions
    title: str = ""

    def feature_index(self, token):
        """Resolve 'f2' or a feature section name to an index."""
        if token in self.feature_names:
            return self.feature_names.index(token)
        m = re.fullmatch(r"f(\d+)", token)
        if m and int(m.group(1)) < len(self.features):
            return int(m.group(1))
        raise ScenarioError(f"unknown feature '{token}' (have {self.feature_names})")

    def fixed_dofs(self):
        if not self.supports:
            raise ScenarioError("this study needs a [supports] section")
        grid = self.grid
        x0, y0 = grid.origin
        x1 = x0 + grid.nx * grid.l_el
        y1 = y0 + grid.ny * grid.l_el
        preds = {
            "left": lambda x, y: x == x0,
            "right": lambda x, y: x == x1,
            "bottom": lambda x, y: y == y0,
            "top": lambda x, y: y == y1,
        }
        dofs = []
        for where, node, components in self.supports:
            if where == "node":
                nodes = np.array([node])
            else:
                nodes = nodes_where(grid, preds[where])
            for c in components:
                dofs.append(2 * nodes + c)
        return np.unique(np.concatenate(dofs))

    def load_vector(self):
        if not self.loads:
            raise ScenarioError("this study needs a [loads] section")
        f = np.zeros(2 * self.grid.n_nodes)
        for node, fx, fy in self.loads:
            f[2 * node] += fx
            f[2 * node + 1] += fy
        return f

    def fea_problem(self):
        return FeaProblem(self.grid, self.fixed_dofs(), self.load_vector(), self.material)

    def density(self, features=None, want_jacobian=False):
        feats = self.features if features is None else features
        return map_and_combine(
            feats, self.grid, self.boundary, self.quadrature, self.combine,
            want_jacobian=want_jacobian,
        )


def _build_feature(section):
    view = _View(section)
    name = section.name[len("feature"):].strip()
    if not name:
        raise ScenarioError("feature section needs a name: [feature <name>]", section.line)
    ftype = view.get("type", _as_str, choices=set(FEATURE_TYPES))
    cls = FEATURE_TYPES[ftype]
    kwargs = {}
    for pname in cls.PARAMS:
        kwargs[pname] = view.get(pname, _as_float)
    kwargs["alpha"] = view.get("alpha", _as_float, default=1.0)
    if ftype == "hyperellipse":
        kwargs["m"] = view.get("m", _as_int, default=2)
    try:
        feature = cls(**kwargs)
    except ScenarioError:
        raise
    except ValueError as err:
        raise ScenarioError(f"[{section.name}]: {err}", section.line) from None

    vary = view.get("vary", lambda s: tuple(s.split()), default=())
    specs = []
    valid = set(cls.PARAMS) | {"alpha"}
    for pname in vary:
        if pname not in valid:
            raise ScenarioError(
                f"[{section.name}] vary: '{pname}' is not a parameter of type {ftype}",
                view.line_of("vary"),
            )
        lo, hi = view.get(
            f"{pname}_range",
            lambda s: _two_floats(s),
            default=(None, None),
        )
        if lo is None:
            raise ScenarioError(
                f"[{section.name}] varies '{pname}' but has no '{pname}_range = lo hi'",
                view.line_of("vary"),
            )
        specs.append((pname, lo, hi))
    view.finish()
    return name, feature, specs


def _two_floats(s):
    parts = _as_floats(s)
    if len(parts) != 2:
        raise ValueError(f"expected 'lo hi', got '{s}'")
    return parts


def _node_from_tokens(grid, tokens, what, line):
    if len(tokens) != 2:
        raise ScenarioError(f"{what}: expected node indices 'ix iy', got {tokens}", line)
    try:
        ix, iy = int(tokens[0]), int(tokens[1])
    except ValueError:
        raise ScenarioError(f"{what}: node indices must be integers, got {tokens}", line) from None
    if not (0 <= ix <= grid.nx and 0 <= iy <= grid.ny):
        raise ScenarioError(
            f"{what}: node ({ix}, {iy}) outside the grid's 0..{grid.nx} x 0..{grid.ny} nodes", line
        )
    return node_id(grid, ix, iy)


def _build_supports(section, grid):
    view = _View(section, repeatable=("fix",))
    out = []
    for entry in view.all("fix"):
        tokens = entry.value.split()
        if not tokens:
            raise ScenarioError("[supports] fix: empty specification", entry.line)
        if tokens[0] in _EDGES:
            if len(tokens) != 2 or tokens[1] not in _DOF_SETS:
                raise ScenarioError(
                    f"[supports] fix: expected '<edge> x|y|both', got '{entry.value}'", entry.line
                )
            out.append((tokens[0], None, _DOF_SETS[tokens[1]]))
        elif tokens[0] == "node":
            if len(tokens) != 4 or tokens[3] not in _DOF_SETS:
                raise ScenarioError(
                    f"[supports] fix: expected 'node ix iy x|y|both', got '{entry.value}'",
                    entry.line,
                )
            node = _node_from_tokens(grid, tokens[1:3], "[supports] fix", entry.line)
            out.append(("node", node, _DOF_SETS[tokens[3]]))
        else:
            raise ScenarioError(
                f"[supports] fix: unknown location '{tokens[0]}', expected one of "
                f"{_EDGES + ('node',)}",
                entry.line,
            )
    if not out:
        raise ScenarioError("[supports] declares no 'fix' lines", section.line)
    view.finish()
    return out


def _build_loads(section, grid):
    view = _View(section, repeatable=("force",))
    out = []
    for entry in view.all("force"):
        tokens = entry.value.split()
        if len(tokens) != 5 or tokens[0] != "node":
            raise ScenarioError(
                f"[loads] force: expected 'node ix iy fx fy', got '{entry.value}'", entry.line
            )
        node = _node_from_tokens(grid, tokens[1:3], "[loads] force", entry.line)
        try:
            fx, fy = float(tokens[3]), float(tokens[4])
        except ValueError:
            raise ScenarioError(
                f"[loads] force: magnitudes must be numbers, got '{entry.value}'", entry.line
            ) from None
        out.append((node, fx, fy))
    if not out:
        raise ScenarioError("[loads] declares no 'force' lines", section.line)
    view.finish()
    return out


_CONSTRAINT_FIELDS = {
    "volume": {"limit"},
    "fcm": {"gap", "p"},
    "overlap_integral": {"budget"},
    "overlap_aux": {"gap", "p"},
    "ghost": {"offset", "spacing", "p"},
}


def _build_constraints(section):
    view = _View(section, repeatable=tuple(_CONSTRAINT_FIELDS))
    constraints = []
    for kind, allowed in _CONSTRAINT_FIELDS.items():
        for entry in view.all(kind):
            kwargs = {}
            for token in entry.value.split():
                key, eq, value = token.partition("=")
                if not eq or key not in allowed:
                    raise ScenarioError(
                        f"[constraints] {kind}: expected 'key=value' with keys from "
                        f"{sorted(allowed)}, got '{token}'",
                        entry.line,
                    )
                try:
                    kwargs[key] = float(value)
                except ValueError:
                    raise ScenarioError(
                        f"[constraints] {kind}: '{value}' is not a number", entry.line
                    ) from None
            try:
                constraints.append(Constraint(kind, **kwargs))
            except ScenarioError:
                raise
            except ValueError as err:
                raise ScenarioError(f"[constraints] {kind}: {err}", entry.line) from None
    view.finish()
    if not constraints:
        raise ScenarioError("[constraints] declares no constraints", section.line)
    return ConstraintSet(constraints)


def _build_study(section):
    view = _View(section)
    kind = view.get("kind", _as_str, choices=set(STUDY_KINDS))
    study = Study(kind=kind)
    if kind == "sweep":
        study.parameter = view.get("parameter", _as_str)
        study.start = view.get("start", _as_float)
        study.stop = view.get("stop", _as_float)
        study.samples = view.get("samples", _as_int)
        if study.samples < 2:
            raise ScenarioError(
                f"[study] samples: need at least 2, got {study.samples}", view.line_of("samples")
            )
    if kind == "verify":
        study.tol = view.get("tol", _as_float, default=1.0e-4)
        if study.tol <= 0.0:
            raise ScenarioError("[study] tol must be positive", view.line_of("tol"))
    view.finish()
    return study


_OPTIMIZER_KEYS = {
    "max_iterations": _as_int,
    "move_limit": _as_float,
    "move_shrink": _as_float,
    "move_grow": _as_float,
    "penalty": _as_float,
    "penalty_growth": _as_float,
    "design_tol": _as_float,
    "kkt_tol": _as_float,
    "feasibility_tol": _as_float,
    "max_retries": _as_int,
}


def _build_optimizer(section):
    if section is None:
        return OptimizerOptions()
    view = _View(section)
    kwargs = {}
    for key, conv in _OPTIMIZER_KEYS.items():
        if view.has(key):
            kwargs[key] = view.get(key, conv)
    view.finish()
    try:
        return OptimizerOptions(**kwargs)
    except ScenarioError:
        raise
    except ValueError as err:
        raise ScenarioError(f"[optimizer]: {err}", section.line) from None


def apply_overrides(sections, overrides):
    """Apply 'section.key=value' command-line overrides in place.

    The section part is a plain section name or a feature's short name.
    Existing entries are replaced; new keys are appended to the section.
    """
    by_name = {}
    for sec in sections:
        by_name[sec.name] = sec
        if sec.name.startswith("feature "):
            by_name[sec.name[len("feature "):].strip()] = sec
    for text in overrides:
        target, eq, value = text.partition("=")
        if not eq or "." not in target:
            raise ScenarioError(f"override '{text}' is not of the form section.key=value")
        sec_name, _, key = target.partition(".")
        sec = by_name.get(sec_name.strip())
        if sec is None:
            raise ScenarioError(f"override '{text}' names unknown section '{sec_name}'")
        key = key.strip()
        for entry in sec.entries:
            if entry.key == key:
                entry.value = value.strip()
                break
        else:
            sec.entries.append(_Entry(key, value.strip(), sec.line))
    return sections


def parse_scenario(source, overrides=()):
    """Parse and validate a scenario from a path or literal text."""
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source):
        text = Path(source).read_text()
    else:
        text = source
    sections = _parse_lines(text)
    if overrides:
        apply_overrides(sections, overrides)

    singles = {}
    features_raw = []
    for sec in sections:
        if sec.name.startswith("feature"):
            features_raw.append(sec)
        elif sec.name in singles:
            raise ScenarioError(
                f"duplicate section [{sec.name}] (first on line {singles[sec.name].line})",
                sec.line,
            )
        else:
            singles[sec.name] = sec
    known = {
        "grid", "material", "boundary", "quadrature", "combine",
        "supports", "loads", "constraints", "study", "optimizer", "meta",
    }
    for name, sec in singles.items():
        if name not in known:
            raise ScenarioError(f"unknown section [{name}]", sec.line)

    def need(name):
        if name not in singles:
            raise ScenarioError(f"scenario is missing the [{name}] section")
        return singles[name]

    view = _View(need("grid"))
    nx = view.get("nx", _as_int)
    ny = view.get("ny", _as_int)
    l_el = view.get("l_el", _as_float, default=1.0)
    origin = view.get("origin", _two_floats, default=(0.0, 0.0))
    view.finish()
    try:
        grid = Grid(nx, ny, l_el, origin=tuple(origin))
    except ScenarioError:
        raise
    except ValueError as err:
        raise ScenarioError(f"[grid]: {err}", singles["grid"].line) from None

    view = _View(need("material"))
    try:
        material = MaterialModel(
            kind=view.get("interpolation", _as_str),
            E0=view.get("E", _as_float, default=1.0),
            nu=view.get("nu", _as_float, default=0.3),
            thickness=view.get("thickness", _as_float, default=1.0),
            p=view.get("p", _as_float, default=3.0),
            q=view.get("q", _as_float, default=1.0),
        )
    except ScenarioError:
        raise
    except ValueError as err:
        raise ScenarioError(f"[material]: {err}", singles["material"].line) from None
    view.finish()

    view = _View(need("boundary"))
    try:
        boundary = BoundaryModel(
            kind=view.get("model", _as_str),
            h=view.get("h", _as_float, default=1.0),
            beta=view.get("beta", _as_float, default=6.5),
            rho_min=view.get("rho_min", _as_float, default=1.0e-6),
        )
    except ScenarioError:
        raise
    except ValueError as err:
        raise ScenarioError(f"[boundary] model: {err}", view.line_of("model")) from None
    view.finish()

    if "quadrature" in singles:
        view = _View(singles["quadrature"])
        try:
            quadrature = Quadrature(
                kind=view.get("rule", _as_str, default="newton_cotes"),
                degree=view.get("degree", _as_int, default=2),
            )
        except ScenarioError:
            raise
        except ValueError as err:
            raise ScenarioError(f"[quadrature]: {err}", singles["quadrature"].line) from None
        view.finish()
    else:
        quadrature = Quadrature("newton_cotes", 2)

    if "combine" in singles:
        view = _View(singles["combine"])
        try:
            combine = CombineSpec(
                strategy=view.get("strategy", _as_str, default="map_then_combine_density"),
                extremum=view.get("extremum", _as_str, default="ks"),
                p=view.get("p", _as_float, default=40.0),
                p_alpha=view.get("p_alpha", _as_float, default=3.0),
            )
        except ScenarioError:
            raise
        except ValueError as err:
            raise ScenarioError(f"[combine]: {err}", singles["combine"].line) from None
        view.finish()
    else:
        combine = CombineSpec()

    if not features_raw:
        raise ScenarioError("scenario defines no [feature <name>] sections")
    names, features, design_specs = [], [], []
    for sec in features_raw:
        name, feature, specs = _build_feature(sec)
        if name in names:
            raise ScenarioError(f"duplicate feature name '{name}'", sec.line)
        index = len(features)
        names.append(name)
        features.append(feature)
        for pname, lo, hi in specs:
            try:
                design_specs.append(ParamSpec(index, pname, lo, hi))
            except ScenarioError:
                raise
            except ValueError as err:
                raise ScenarioError(f"[{sec.name}] {pname}_range: {err}", sec.line) from None
    design = DesignVector(design_specs) if design_specs else None
    if design is not None:
        design.validate(features, design.extract(features))

    supports = _build_supports(singles["supports"], grid) if "supports" in singles else []
    loads = _build_loads(singles["loads"], grid) if "loads" in singles else []
    constraints = _build_constraints(singles["constraints"]) if "constraints" in singles else None
    study = _build_study(need("study"))
    optimizer = _build_optimizer(singles.get("optimizer"))
    title = ""
    if "meta" in singles:
        view = _View(singles["meta"])
        title = view.get("title", _as_str, default="")
        view.finish()

    scenario = Scenario(
        grid=grid,
        material=material,
        boundary=boundary,
        quadrature=quadrature,
        combine=combine,
        features=features,
        feature_names=names,
        design=design,
        supports=supports,
        loads=loads,
        constraints=constraints,
        study=study,
        optimizer=optimizer,
        title=title,
    )
    _check_study_requirements(scenario)
    return scenario


def _check_study_requirements(scenario):
    kind = scenario.study.kind
    if kind in ("sweep", "optimize", "verify"):
        if not scenario.supports:
            raise ScenarioError(f"study '{kind}' needs a [supports] section")
        if not scenario.loads:
            raise ScenarioError(f"study '{kind}' needs a [loads] section")
    if kind in ("optimize", "verify") and scenario.design is None:
        raise ScenarioError(
            f"study '{kind}' needs at least one varied parameter (vary = ... on a feature)"
        )
    if kind in ("optimize", "verify") and not scenario.boundary.differentiable:
        raise ScenarioError(
            f"study '{kind}' needs a differentiable boundary model; "
            f"kind '{scenario.boundary.kind}' has no shape derivatives"
        )
    if kind == "sweep":
        token = scenario.study.parameter
        if "." not in token:
            raise ScenarioError(f"[study] parameter: expected '<feature>.<param>', got '{token}'")
        fname, _, pname = token.partition(".")
        index = scenario.feature_index(fname)
        feature = scenario.features[index]
        if pname != "alpha" and pname not in feature.PARAMS:
            raise ScenarioError(
                f"[study] parameter: {type(feature).__name__} has no parameter '{pname}'"
            )
        scenario.study.parameter = f"f{index}.{pname}"


class EvaluationProblem:
    """Compliance objective plus constraint rows over the design vector.

    Adapts a scenario to the optimizer's problem protocol: `lower`,
    `upper`, `initial` and `evaluate(values, want_gradients)`.
    """

    def __init__(self, scenario):
        if scenario.design is None:
            raise ScenarioError("no design parameters: add 'vary = ...' to a feature")
        self.scenario = scenario
        self.fea = scenario.fea_problem()
        layout = ParamLayout(scenario.features)
        self.cols = np.array(
            [layout.col(sp.feature, sp.name) for sp in scenario.design.specs], dtype=int
        )
        self.lower = scenario.design.lower
        self.upper = scenario.design.upper
        self.initial = scenario.design.extract(scenario.features)
        self.names = scenario.design.names()

    def features_at(self, values):
        return self.scenario.design.apply(self.scenario.features, values)

    def evaluate(self, values, want_gradients=True):
        sc = self.scenario
        feats = self.features_at(values)
        density = sc.density(feats, want_jacobian=want_gradients)
        mu, _ = interpolate(sc.material, density.rho)
        solution = assemble_and_solve(self.fea, mu, rho=density.rho)

        cons_values = np.zeros(0)
        cons_jac = None
        if sc.constraints is not None:
            res = sc.constraints.evaluate(
                feats, sc.grid, sc.boundary, sc.quadrature,
                spec=sc.combine, density=density, want_gradient=want_gradients,
            )
            cons_values = res.values
            if want_gradients:
                cons_jac = res.jacobian[:, self.cols]

        gradient = None
        if want_gradients:
            gradient = shape_sensitivity(density_sensitivity(solution), density.jac)[self.cols]
        ev = Evaluation(solution.J, gradient=gradient, constraints=cons_values, jacobian=cons_jac)
        ev.volume = solution.V
        return ev

    def objective(self, values):
        """Objective-only evaluation, the shape finite differences expect."""
        return self.evaluate(values, want_gradients=False).objective


def build_problem(scenario):
    return EvaluationProblem(scenario)
