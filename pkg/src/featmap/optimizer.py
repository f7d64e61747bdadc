"""Sequential linear programming on a flat, box-bounded design vector.

Each iteration linearizes the objective and the constraints at the
current point and solves a small LP restricted to per-parameter move
limits (a box trust region).  Constraint rows enter the LP with elastic
slack variables so the subproblem is always feasible; the slack weight
acts as an l1 penalty whose growth schedule drives the iterates back
to the feasible set.  A candidate is accepted only if an l1 merit
function does not increase; rejections shrink the move limits and the
LP is solved again from the same linearization.

The driver is agnostic about where objective and constraint values come
from: it talks to any problem object exposing `lower`, `upper`,
`initial` and `evaluate(values, want_gradients=True) -> Evaluation`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .fea import AnalysisError

__all__ = [
    "Evaluation",
    "History",
    "HistoryRecord",
    "OptimizationError",
    "OptimizerOptions",
    "optimize",
    "step",
]

_MERIT_SLACK = 1.0e-12


class OptimizationError(RuntimeError):
    """The trust-region subproblem could not be solved."""


@dataclass
class Evaluation:
    """Objective and constraint data at one design point.

    `constraints` holds signed violation values (satisfied <= 0), one
    row per scalar constraint; `jacobian` is the matching (m, n) array.
    Gradient entries may be None when the caller asked for values only.
    """

    objective: float
    gradient: np.ndarray | None = None
    constraints: np.ndarray = field(default_factory=lambda: np.zeros(0))
    jacobian: np.ndarray | None = None

    def __post_init__(self):
        self.objective = float(self.objective)
        self.constraints = np.atleast_1d(np.asarray(self.constraints, dtype=float))
        if self.gradient is not None:
            self.gradient = np.asarray(self.gradient, dtype=float).ravel()
        if self.jacobian is not None:
            self.jacobian = np.atleast_2d(np.asarray(self.jacobian, dtype=float))
            if self.jacobian.shape[0] != self.constraints.size:
                raise ValueError(
                    f"constraint jacobian has {self.jacobian.shape[0]} rows "
                    f"for {self.constraints.size} constraint values"
                )

    @property
    def max_constraint(self):
        return float(self.constraints.max()) if self.constraints.size else float("-inf")


@dataclass(frozen=True)
class OptimizerOptions:
    """Knobs for the SLP driver.

    move_limit is the trust-region half-width as a fraction of each
    parameter's bound range (unbounded parameters fall back to a unit
    scale around the start point).  The penalty weight multiplies the
    constraint slack in both the LP and the merit function and grows by
    penalty_growth whenever an accepted step fails to reduce a
    violation.
    """

    max_iterations: int = 300
    move_limit: float = 0.02
    move_shrink: float = 0.7
    move_grow: float = 1.3
    move_floor: float = 1.0e-8
    penalty: float = 1.0e3
    penalty_growth: float = 2.0
    penalty_cap: float = 1.0e9
    design_tol: float = 1.0e-3
    kkt_tol: float = 1.0e-6
    feasibility_tol: float = 1.0e-5
    max_retries: int = 10

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError(f"max_iterations must be at least 1, got {self.max_iterations}")
        if not 0.0 < self.move_limit <= 0.5:
            raise ValueError(f"move_limit must lie in (0, 0.5], got {self.move_limit}")
        if not 0.0 < self.move_shrink < 1.0:
            raise ValueError(f"move_shrink must lie in (0, 1), got {self.move_shrink}")
        if self.move_grow < 1.0:
            raise ValueError(f"move_grow must be at least 1, got {self.move_grow}")
        if not 0.0 < self.move_floor < 1.0:
            raise ValueError(f"move_floor must lie in (0, 1), got {self.move_floor}")
        for name in ("penalty", "design_tol", "kkt_tol", "feasibility_tol"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.penalty_growth < 1.0:
            raise ValueError(f"penalty_growth must be at least 1, got {self.penalty_growth}")
        if self.max_retries < 1:
            raise ValueError(f"max_retries must be at least 1, got {self.max_retries}")


@dataclass(frozen=True)
class HistoryRecord:
    iteration: int
    objective: float
    max_constraint: float
    grad_norm: float
    design: np.ndarray
    note: str = ""


class History:
    """Append-only record of accepted iterates.

    Record 0 is the start point; record k the design after k accepted
    steps.  `termination` is set once by the driver and explains why
    the run ended.
    """

    def __init__(self):
        self.records = []
        self.termination = ""

    def __len__(self):
        return len(self.records)

    def append(self, record):
        if record.iteration != len(self.records):
            raise ValueError(
                f"history records must be appended in order, got iteration "
                f"{record.iteration} at position {len(self.records)}"
            )
        self.records.append(record)

    @property
    def initial(self):
        return self.records[0]

    @property
    def final(self):
        return self.records[-1]


def _record(history, ev, design, note=""):
    gnorm = float(np.linalg.norm(ev.gradient)) if ev.gradient is not None else float("nan")
    history.append(
        HistoryRecord(
            iteration=len(history),
            objective=ev.objective,
            max_constraint=ev.max_constraint,
            grad_norm=gnorm,
            design=np.array(design, dtype=float),
            note=note,
        )
    )


def _base_move_limits(lower, upper, start, fraction):
    """Absolute per-parameter trust-region half-widths."""
    span = upper - lower
    fallback = np.maximum(1.0, np.abs(start))
    span = np.where(np.isfinite(span), span, fallback)
    return fraction * span


def _unit_gradient(gradient):
    scale = float(np.abs(gradient).max())
    return (gradient / scale, scale) if scale > 0.0 else (gradient, 1.0)


def _solve_trust_lp(design, gradient, constraints, move, lower, upper, penalty):
    """Move-limited LP around `design`; returns (delta, multipliers).

    Variables are the design move and one slack per constraint row.
    Returns None when the LP solver reports failure.
    """
    n = design.size
    step_lo = np.maximum(lower - design, -move)
    step_hi = np.minimum(upper - design, move)
    step_lo = np.minimum(step_lo, 0.0)
    step_hi = np.maximum(step_hi, 0.0)

    gn, _ = _unit_gradient(gradient)
    if constraints is None:
        values = np.zeros(0)
        jac = np.zeros((0, n))
    else:
        values, jac = constraints
        values = np.atleast_1d(np.asarray(values, dtype=float))
        jac = np.atleast_2d(np.asarray(jac, dtype=float))
    m = values.size

    cost = np.concatenate([gn, np.full(m, penalty)])
    bounds = [(float(lo), float(hi)) for lo, hi in zip(step_lo, step_hi)]
    bounds += [(0.0, None)] * m
    if m:
        a_ub = np.hstack([jac, -np.eye(m)])
        res = linprog(cost, A_ub=a_ub, b_ub=-values, bounds=bounds, method="highs")
    else:
        res = linprog(cost, bounds=bounds, method="highs")
    if not res.success:
        return None
    delta = np.clip(res.x[:n], step_lo, step_hi)
    lam = -np.asarray(res.ineqlin.marginals, dtype=float) if m else np.zeros(0)
    return delta, lam


def _projected_residual(design, residual, lower, upper, tol=1.0e-12):
    """Zero the residual components that push against an active bound."""
    proj = np.array(residual, dtype=float)
    at_lower = design <= lower + tol
    at_upper = design >= upper - tol
    proj[at_lower & (proj > 0.0)] = 0.0
    proj[at_upper & (proj < 0.0)] = 0.0
    return proj


def step(design, gradient, constraints, options, lower, upper, move=None):
    """One SLP move from the given linearization.

    `constraints` is None or a (values, jacobian) pair with satisfied
    rows <= 0.  A zero gradient with no violated constraint returns the
    design unchanged.  LP solver failures shrink the move limits and
    retry up to options.max_retries times before raising.
    """
    design = np.asarray(design, dtype=float)
    gradient = np.asarray(gradient, dtype=float).ravel()
    lower = np.broadcast_to(np.asarray(lower, dtype=float), design.shape)
    upper = np.broadcast_to(np.asarray(upper, dtype=float), design.shape)
    if gradient.shape != design.shape:
        raise ValueError(f"gradient shape {gradient.shape} does not match design {design.shape}")
    if np.any(design < lower - 1.0e-12) or np.any(design > upper + 1.0e-12):
        raise ValueError("design violates its box bounds")

    violated = constraints is not None and np.any(np.atleast_1d(constraints[0]) > 0.0)
    if not violated and not np.any(gradient):
        return design.copy()

    if move is None:
        move = _base_move_limits(lower, upper, design, options.move_limit)
    move = np.broadcast_to(np.asarray(move, dtype=float), design.shape).copy()
    for _ in range(options.max_retries):
        result = _solve_trust_lp(design, gradient, constraints, move, lower, upper, options.penalty)
        if result is not None:
            delta, _ = result
            return np.clip(design + delta, lower, upper)
        move = move * options.move_shrink
    raise OptimizationError("trust-region LP failed repeatedly; linearization may be degenerate")


def _merit(ev, j_ref, penalty):
    violation = float(np.maximum(ev.constraints, 0.0).sum()) if ev.constraints.size else 0.0
    return ev.objective / j_ref + penalty * violation


def _linearization(ev):
    if ev.constraints.size == 0:
        return None
    if ev.jacobian is None:
        raise ValueError("constrained problem returned no constraint jacobian")
    return ev.constraints, ev.jacobian


def optimize(problem, options=None):
    """Run SLP from problem.initial; returns (final design, History).

    Terminates when an accepted step is smaller than design_tol with
    all constraints within feasibility_tol, when the projected KKT
    residual falls below kkt_tol, or at the iteration cap.  A failed
    analysis mid-run truncates the history with a failure record and
    returns the last good design.
    """
    opts = options if options is not None else OptimizerOptions()
    lower = np.asarray(problem.lower, dtype=float)
    upper = np.asarray(problem.upper, dtype=float)
    if lower.shape != upper.shape:
        raise ValueError(f"bound shapes differ: {lower.shape} vs {upper.shape}")
    if np.any(lower > upper):
        raise ValueError("lower bound exceeds upper bound")

    x = np.clip(np.asarray(problem.initial, dtype=float), lower, upper)
    history = History()
    try:
        ev = problem.evaluate(x, want_gradients=True)
    except AnalysisError as exc:
        failed = Evaluation(float("nan"), gradient=None)
        _record(history, failed, x, note=f"analysis failure: {exc}")
        history.termination = "analysis_failure"
        return x, history
    if ev.gradient is None:
        raise ValueError("problem.evaluate returned no objective gradient")
    _record(history, ev, x)

    j_ref = max(abs(ev.objective), 1.0e-12)
    penalty = opts.penalty
    base_move = _base_move_limits(lower, upper, x, opts.move_limit)
    move = base_move.copy()
    lp_failures = 0

    while len(history) < opts.max_iterations:
        feasible = ev.max_constraint <= opts.feasibility_tol
        if feasible and ev.constraints.size == 0 and not np.any(ev.gradient):
            history.termination = "kkt"
            break

        result = _solve_trust_lp(x, ev.gradient, _linearization(ev), move, lower, upper, penalty)
        if result is None:
            lp_failures += 1
            if lp_failures > opts.max_retries:
                history.termination = "lp_failure"
                break
            move = move * opts.move_shrink
            continue
        delta, lam = result

        if float(np.abs(delta).max()) <= 1.0e-15:
            if not feasible and penalty < opts.penalty_cap:
                # Violated rows but no move: the slack is underpriced.
                penalty = min(penalty * opts.penalty_growth, opts.penalty_cap)
                continue
            # The linearized problem keeps the current point: check
            # first-order stationarity of the true problem.
            gn, _ = _unit_gradient(ev.gradient)
            residual = gn if lam.size == 0 else gn + ev.jacobian.T @ lam
            proj = _projected_residual(x, residual, lower, upper)
            if feasible and float(np.abs(proj).max()) <= opts.kkt_tol:
                history.termination = "kkt"
                break
            move = move * opts.move_shrink
            if float((move / base_move).max()) < opts.move_floor:
                history.termination = "stalled"
                break
            continue

        candidate = np.clip(x + delta, lower, upper)
        try:
            cand_ev = problem.evaluate(candidate, want_gradients=True)
        except AnalysisError as exc:
            failed = Evaluation(float("nan"), gradient=None)
            _record(history, failed, candidate, note=f"analysis failure: {exc}")
            history.termination = "analysis_failure"
            return x, history

        cur_merit = _merit(ev, j_ref, penalty)
        new_merit = _merit(cand_ev, j_ref, penalty)
        if new_merit <= cur_merit + _MERIT_SLACK * (1.0 + abs(cur_merit)):
            step_size = float(np.abs(candidate - x).max())
            if (
                cand_ev.max_constraint > opts.feasibility_tol
                and cand_ev.max_constraint >= ev.max_constraint
            ):
                penalty = min(penalty * opts.penalty_growth, opts.penalty_cap)
            x, ev = candidate, cand_ev
            _record(history, ev, x)
            move = np.minimum(move * opts.move_grow, base_move)
            if step_size < opts.design_tol and ev.max_constraint <= opts.feasibility_tol:
                history.termination = "design_change"
                break
        else:
            move = move * opts.move_shrink
            if float((move / base_move).max()) < opts.move_floor:
                history.termination = "stalled"
                break

    if not history.termination:
        history.termination = "max_iterations"
    return x, history
