"""Merging several layers: greedy sequential solves and hybrid refinement.

Layers are merged one at a time, bottom-up by default, re-deriving hidden
inputs, downstream maps and residuals from the current partially-merged
model before each layer's QP.  Hybrid refinement instead applies a cheap
baseline everywhere first and re-solves the QP only at chosen layers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .baselines import baseline_delta
from .networks import LinearNetwork, apply_merged_residual, forward
from .qp import (
    CalibrationSet,
    NumericalError,
    build_diagonal_qp,
    build_general_basis_qp,
    calibration_mse,
    linearized_delta_objective,
    merge_geometry,
    merged_delta_from_coefficients,
    objective_value,
    solve_box_constrained,
    solve_unconstrained,
)
from .subspaces import (
    captured_energy_pointwise,
    coordinate_energy_order,
    energy_matrix,
    optimal_basis,
    output_projector,
    pullback_basis,
    random_basis,
    standard_basis,
    svd_basis,
)


@dataclass
class LayerMergeRecord:
    """One layer's QP solve inside a multi-layer merge."""

    layer_index: int
    basis_id: str
    objective_before: float
    objective_after: float
    coefficients: np.ndarray
    captured_fraction: float | None = None


@dataclass
class MergeReport:
    """Per-layer objectives and final calibration error of a merge run."""

    method: str
    steps: list
    final_mse: float
    task_mse: dict
    baseline_mse: float | None = None


@dataclass
class MergePlan:
    """Ordered (layer_index, method, params) steps, bottom-up."""

    steps: list

    def __post_init__(self):
        indices = [s[0] for s in self.steps]
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise ValueError("plan layer indices must be strictly increasing")


def _solve(qp, solver, lo, hi, steps, step_size):
    if solver == "exact":
        return solve_unconstrained(qp)
    if solver == "box":
        return solve_box_constrained(qp, lo=lo, hi=hi, steps=steps, step_size=step_size)
    raise ValueError(f"unknown solver {solver!r}")


def layer_basis(kind, p, seed, deltas, geometry):
    """Construct the requested direction set from the current layer state."""
    r = deltas[0].delta.shape[0]
    if kind == "svd":
        return svd_basis(deltas, p)
    if kind == "random":
        return random_basis(r, min(p, r), seed)
    S = energy_matrix(geometry.residuals)
    mats = [d.matrix for d in geometry.downstream]
    Lbar = mats[0] if geometry.fixed_downstream else np.mean(mats, axis=0)
    if kind == "standard":
        order = coordinate_energy_order(S, Lbar)
        return standard_basis(r, min(p, r), order)
    if kind == "eigen":
        c = S.S.shape[0]
        W = optimal_basis(S, min(p, c))
        return pullback_basis(Lbar, W, origin="eigen_S")
    raise ValueError(f"unknown basis kind {kind!r}")


def basis_fraction(basis, geometry):
    """Fraction of residual energy the basis's output image captures."""
    S = energy_matrix(geometry.residuals)
    if S.total_energy == 0.0:
        return 1.0
    if geometry.fixed_downstream:
        P = output_projector(geometry.downstream[0].matrix, basis)
        captured = float(np.einsum("ij,ji->", S.S, P))
    else:
        projectors = [output_projector(d.matrix, basis) for d in geometry.downstream]
        captured = captured_energy_pointwise(geometry.residuals, projectors)
    return captured / S.total_energy


def _merge_one_layer(
    current, layer, deltas, calib, solver, lo, hi, steps, step_size,
    basis_kind, basis_p, basis_seed,
):
    geometry = merge_geometry(current, layer, calib)
    if basis_kind is None:
        qp = build_diagonal_qp(current, deltas, calib, geometry=geometry)
        basis = None
        fraction = None
    else:
        r = deltas[0].delta.shape[0]
        c = current.output_dim
        p = basis_p if basis_p is not None else min(r, c)
        basis = layer_basis(basis_kind, p, basis_seed, deltas, geometry)
        qp = build_general_basis_qp(current, deltas, calib, basis, geometry=geometry)
        fraction = basis_fraction(basis, geometry)
    coeffs = _solve(qp, solver, lo, hi, steps, step_size)
    merged = merged_delta_from_coefficients(deltas, coeffs, basis=basis)
    if not np.all(np.isfinite(merged)):
        raise NumericalError(f"layer {layer} merge produced non-finite weights")
    record = LayerMergeRecord(
        layer_index=layer,
        basis_id=qp.basis_id,
        objective_before=qp.constant,
        objective_after=objective_value(qp, coeffs),
        coefficients=coeffs.values.copy(),
        captured_fraction=fraction,
    )
    return apply_merged_residual(current, layer, merged), record, merged


def sequential_merge(
    net: LinearNetwork,
    deltas_by_layer: dict,
    calib: CalibrationSet,
    solver: str = "exact",
    lo: float = 0.0,
    hi: float = 1.0,
    steps: int = 500,
    step_size: float = 1e-2,
    basis_kind: str | None = None,
    basis_p: int | None = None,
    basis_seed: int = 0,
    order: str = "bottom_up",
    method_name: str | None = None,
):
    """Merge each listed layer in turn, re-solving the QP at the current model.

    Each layer's objective is rebuilt from the partially merged network, so
    earlier merges feed into later hidden inputs and downstream maps.
    basis_kind selects the general-basis QP ("eigen", "standard", "svd",
    "random") instead of the diagonal mask; basis_p defaults to
    min(layer output dim, model output dim).  Returns (merged_network,
    MergeReport).
    """
    if not deltas_by_layer:
        raise ValueError("no layers to merge")
    if order not in ("bottom_up", "top_down"):
        raise ValueError(f"unknown order {order!r}")
    layers = sorted(deltas_by_layer)
    if order == "top_down":
        layers = layers[::-1]
    current = net
    records = []
    for layer in layers:
        current, record, _ = _merge_one_layer(
            current, layer, list(deltas_by_layer[layer]), calib,
            solver, lo, hi, steps, step_size, basis_kind, basis_p, basis_seed,
        )
        records.append(record)
    pooled, per_task = calibration_mse(current, calib)
    name = method_name or ("qp-diag" if basis_kind is None else f"qp-basis({basis_kind})")
    return current, MergeReport(name, records, pooled, per_task)


def hybrid_refine(
    net: LinearNetwork,
    deltas_by_layer: dict,
    calib: CalibrationSet,
    init_method: str = "soup",
    refine_layers=None,
    init_params: dict | None = None,
    solver: str = "exact",
    lo: float = 0.0,
    hi: float = 1.0,
    steps: int = 500,
    step_size: float = 1e-2,
):
    """Apply a baseline everywhere, then re-solve the QP at selected layers.

    The baseline rule (soup, ta, dare, ties, fisher) fixes an initial merged
    update at every layer.  At each refine layer, that layer's initial update
    is removed from the current model and the diagonal QP over the original
    task updates is solved in its place, keeping the other layers' baseline
    merges.  DARE draws get per-layer seeds of seed + layer_index.  Returns
    (merged_network, MergeReport) with baseline_mse recording the loss before
    refinement.
    """
    if not deltas_by_layer:
        raise ValueError("no layers to merge")
    all_layers = sorted(deltas_by_layer)
    refine_layers = all_layers if refine_layers is None else sorted(set(refine_layers))
    missing = [l for l in refine_layers if l not in deltas_by_layer]
    if missing:
        raise ValueError(f"refine layers {missing} have no residual updates")
    init_params = dict(init_params or {})

    current = net
    applied = {}
    for layer in all_layers:
        params = dict(init_params)
        if init_method == "dare":
            params["seed"] = int(params.get("seed", 0)) + layer
        if init_method == "fisher" and isinstance(params.get("fishers"), dict):
            params["fishers"] = params["fishers"][layer]
        delta0 = baseline_delta(init_method, list(deltas_by_layer[layer]), params)
        current = apply_merged_residual(current, layer, delta0)
        applied[layer] = delta0
    baseline_pooled, _ = calibration_mse(current, calib)

    records = []
    for layer in refine_layers:
        stripped = apply_merged_residual(current, layer, -applied[layer])
        deltas = list(deltas_by_layer[layer])
        geometry = merge_geometry(stripped, layer, calib)
        qp = build_diagonal_qp(stripped, deltas, calib, geometry=geometry)
        coeffs = _solve(qp, solver, lo, hi, steps, step_size)
        merged = merged_delta_from_coefficients(deltas, coeffs)
        if not np.all(np.isfinite(merged)):
            raise NumericalError(f"layer {layer} refinement produced non-finite weights")
        records.append(
            LayerMergeRecord(
                layer_index=layer,
                basis_id=qp.basis_id,
                objective_before=linearized_delta_objective(
                    stripped, layer, applied[layer], calib, geometry=geometry
                ),
                objective_after=objective_value(qp, coeffs),
                coefficients=coeffs.values.copy(),
            )
        )
        current = apply_merged_residual(stripped, layer, merged)
        applied[layer] = merged
    pooled, per_task = calibration_mse(current, calib)
    report = MergeReport(
        f"hybrid({init_method})", records, pooled, per_task, baseline_mse=baseline_pooled
    )
    return current, report


def interaction_error(
    net: LinearNetwork,
    delta_a,
    delta_b,
    calib: CalibrationSet,
    scale: float = 1.0,
) -> float:
    """Mean norm of the cross-layer coupling two scaled updates create.

    Applies scale * delta_a and scale * delta_b at their (distinct) layers
    separately and together, and averages || h_both - h_a - h_b + h_base ||
    over the calibration inputs.  On all-identity networks this equals
    scale^2 times a fixed bilinear term, so the ratio to scale^2 is constant.
    """
    if delta_a.layer_index == delta_b.layer_index:
        raise ValueError("interaction error needs updates at two distinct layers")
    net_a = apply_merged_residual(net, delta_a.layer_index, scale * delta_a.delta)
    net_b = apply_merged_residual(net, delta_b.layer_index, scale * delta_b.delta)
    net_ab = apply_merged_residual(net_a, delta_b.layer_index, scale * delta_b.delta)
    total = 0.0
    n = len(calib)
    for j in range(n):
        x = calib.inputs[j]
        h00 = forward(net, x)
        h10 = forward(net_a, x)
        h01 = forward(net_b, x)
        h11 = forward(net_ab, x)
        total += float(np.linalg.norm(h11 - h10 - h01 + h00))
    return total / n
