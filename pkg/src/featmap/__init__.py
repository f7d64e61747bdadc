"""featmap: fixed-grid feature-mapping structural optimization toolkit."""

__version__ = "0.1.0"

from .geometry import (
    Bar,
    Circle,
    DesignVector,
    Hyperellipse,
    ParamSpec,
    RectangleAA,
    approx_signed_distance,
    implicit_value,
    shape_param_jacobian,
    signed_distance,
)
from .mapping import (
    BoundaryModel,
    DensityField,
    FeatureField,
    Grid,
    Quadrature,
    element_density,
    element_density_jacobian,
    grayness,
    heaviside_eval,
    map_field,
)
from .combine import (
    CombineSpec,
    build_combined_field,
    combine_densities,
    combine_implicits,
    effective_density,
    map_and_combine,
    r_boolean,
    smooth_extremum,
)
from .material import MaterialModel, interpolate
from .fea import (
    AnalysisError,
    FeaProblem,
    Solution,
    assemble_and_solve,
    compliance_and_volume,
    element_stiffness,
    node_id,
    nodes_where,
)
from .sensitivity import (
    GradientReport,
    adjoint_density_sensitivity,
    density_sensitivity,
    fd_verify,
    shape_sensitivity,
)
from .constraints import (
    Constraint,
    ConstraintResult,
    ConstraintSet,
    aggregate,
    fcm_separation,
    ghost_containment,
    overlap_auxiliary_density,
    overlap_integral,
    surrogate_circles,
    volume_fraction,
)
from .optimizer import (
    Evaluation,
    History,
    HistoryRecord,
    OptimizationError,
    OptimizerOptions,
    optimize,
    step,
)
from .scenario import (
    EvaluationProblem,
    Scenario,
    ScenarioError,
    build_problem,
    parse_scenario,
)
from .bench import (
    detect_local_minima,
    run_hshape_sweep,
    run_localmin_sweep,
    run_scenario,
    run_threebar_demo,
)

__all__ = [
    "Bar",
    "Circle",
    "Hyperellipse",
    "RectangleAA",
    "DesignVector",
    "ParamSpec",
    "implicit_value",
    "signed_distance",
    "approx_signed_distance",
    "shape_param_jacobian",
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
    "MaterialModel",
    "interpolate",
    "CombineSpec",
    "smooth_extremum",
    "r_boolean",
    "build_combined_field",
    "combine_implicits",
    "effective_density",
    "combine_densities",
    "map_and_combine",
    "AnalysisError",
    "FeaProblem",
    "Solution",
    "element_stiffness",
    "assemble_and_solve",
    "compliance_and_volume",
    "node_id",
    "nodes_where",
    "GradientReport",
    "density_sensitivity",
    "adjoint_density_sensitivity",
    "shape_sensitivity",
    "fd_verify",
    "Constraint",
    "ConstraintResult",
    "ConstraintSet",
    "aggregate",
    "surrogate_circles",
    "fcm_separation",
    "overlap_integral",
    "overlap_auxiliary_density",
    "ghost_containment",
    "volume_fraction",
    "Evaluation",
    "History",
    "HistoryRecord",
    "OptimizationError",
    "OptimizerOptions",
    "optimize",
    "step",
    "EvaluationProblem",
    "Scenario",
    "ScenarioError",
    "build_problem",
    "parse_scenario",
    "detect_local_minima",
    "run_hshape_sweep",
    "run_localmin_sweep",
    "run_scenario",
    "run_threebar_demo",
]
