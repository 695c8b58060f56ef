"""Model merging as convex quadratic programming over residual weight updates.

Fine-tuned variants of one base network differ by per-task weight updates.
Choosing how much of each update to keep, per coordinate or per direction,
is a convex least-squares problem in the networks' output space; this
package builds those programs from calibration data, solves them, relates
them to output-space projections, and compares the result against standard
merging baselines on small synthetic models.
"""

from .networks import (
    IDENTITY,
    RELU,
    DownstreamMap,
    LinearNetwork,
    ResidualUpdate,
    apply_merged_residual,
    factorize,
    forward,
    hidden_residual,
    layer_input,
    linearize_downstream,
)
from .qp import (
    CalibrationSet,
    MergeCoefficients,
    MergeGeometry,
    NumericalError,
    QuadraticObjective,
    base_residuals,
    build_diagonal_qp,
    build_general_basis_qp,
    calibration_mse,
    linearized_delta_objective,
    merge_geometry,
    merged_delta_from_coefficients,
    objective_gradient,
    objective_value,
    solve_1d,
    solve_box_constrained,
    solve_unconstrained,
)
from .subspaces import (
    OrthonormalBasis,
    ResidualEnergyMatrix,
    SubspaceDiagnostics,
    captured_energy_pointwise,
    coordinate_energy_order,
    diagnostics,
    energy_matrix,
    optimal_basis,
    output_projector,
    pullback_basis,
    random_basis,
    standard_basis,
    svd_basis,
    svd_closed_form_weights,
)
from .baselines import (
    baseline_delta,
    combine_row_coefficients,
    dare_coefficients,
    dare_row_uniform,
    fisher_delta,
    fisher_merge,
    soup,
    soup_coefficients,
    ta_coefficients,
    task_arithmetic,
    ties_coefficients,
    ties_rowwise,
)
from .multilayer import (
    LayerMergeRecord,
    MergePlan,
    MergeReport,
    basis_fraction,
    hybrid_refine,
    interaction_error,
    layer_basis,
    sequential_merge,
)
from .bundles import (
    BundleFormatError,
    ModelBundle,
    gen_linear_tasks,
    gen_relu_tasks,
    gen_shared_direction_instance,
    load_bundle,
    load_network,
    save_bundle,
    save_network,
    validate_shared_direction_bundle,
)

__version__ = "0.1.0"
