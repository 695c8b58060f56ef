"""Merging as a convex quadratic program over per-task residual coefficients.

Given a base network, K task residual updates at one layer, and calibration
pairs (x_j, y_j), the merged update is parameterised by coefficients d and
the calibration loss of the linearised merged model is

    J(d) = sum_j || A_j d + b_j ||^2  =  1/2 d^T H d + g^T d + const

with H = 2 sum_j A_j^T A_j (positive semidefinite) and g = 2 sum_j A_j^T b_j.
Two parameterisations are built here: a per-coordinate diagonal mask per task
(P = layer output dim, A_j blocks L_j diag(r_kj)), and a restriction of each
task's update to a shared orthonormal set of directions q_1..q_P.

Coefficients are flattened task-major: flat index of (task k, direction p)
is k * P + p.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .networks import (
    IDENTITY,
    LinearNetwork,
    ResidualUpdate,
    forward,
    layer_input,
    linearize_downstream,
)


class NumericalError(ArithmeticError):
    """Raised when non-finite values appear in an objective or a solve."""


@dataclass
class CalibrationSet:
    """Input/target pairs the merge objective is summed over.

    inputs is (n, d) with one sample per row, targets is (n, c).  task_ids
    optionally labels each sample with the task it came from, which is only
    used for per-task reporting, never by the objective itself.
    """

    inputs: np.ndarray
    targets: np.ndarray
    task_ids: list | None = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=float)
        self.targets = np.asarray(self.targets, dtype=float)
        if self.inputs.ndim != 2 or self.targets.ndim != 2:
            raise ValueError("inputs and targets must be 2-D (one row per sample)")
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ValueError(
                f"{self.inputs.shape[0]} inputs but {self.targets.shape[0]} targets"
            )
        if self.inputs.shape[0] == 0:
            raise ValueError("calibration set is empty")
        if not np.all(np.isfinite(self.inputs)) or not np.all(
            np.isfinite(self.targets)
        ):
            raise ValueError("calibration data contains non-finite entries")
        if self.task_ids is not None:
            self.task_ids = list(self.task_ids)
            if len(self.task_ids) != self.inputs.shape[0]:
                raise ValueError("task_ids length does not match sample count")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @classmethod
    def for_task(cls, task_id, inputs, targets) -> "CalibrationSet":
        """Calibration set where every sample belongs to one task."""
        inputs = np.asarray(inputs, dtype=float)
        return cls(inputs, targets, [task_id] * inputs.shape[0])

    @classmethod
    def concat(cls, sets) -> "CalibrationSet":
        """Pool several calibration sets, keeping per-sample task labels."""
        sets = list(sets)
        if not sets:
            raise ValueError("nothing to concatenate")
        inputs = np.vstack([s.inputs for s in sets])
        targets = np.vstack([s.targets for s in sets])
        ids = []
        for s in sets:
            ids.extend(s.task_ids if s.task_ids is not None else [None] * len(s))
        return cls(inputs, targets, ids)


@dataclass
class QuadraticObjective:
    """J(d) = 1/2 d^T H d + g^T d + constant over flattened coefficients."""

    H: np.ndarray
    g: np.ndarray
    constant: float
    n_tasks: int
    n_directions: int
    basis_id: str = "standard"
    layer_index: int | None = None

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=float)
        self.g = np.asarray(self.g, dtype=float)
        self.constant = float(self.constant)
        dim = self.n_tasks * self.n_directions
        if self.H.shape != (dim, dim):
            raise ValueError(f"H must be {dim}x{dim}, got {self.H.shape}")
        if self.g.shape != (dim,):
            raise ValueError(f"g must have length {dim}, got {self.g.shape}")
        if not (
            np.all(np.isfinite(self.H))
            and np.all(np.isfinite(self.g))
            and np.isfinite(self.constant)
        ):
            raise NumericalError("objective contains non-finite values")
        scale = np.abs(self.H).max() if self.H.size else 0.0
        if scale > 0 and np.abs(self.H - self.H.T).max() > 1e-10 * scale:
            raise ValueError("H is not symmetric")

    @property
    def dim(self) -> int:
        return self.n_tasks * self.n_directions

    def flat_index(self, task: int, direction: int) -> int:
        if not (0 <= task < self.n_tasks and 0 <= direction < self.n_directions):
            raise ValueError("index out of range")
        return task * self.n_directions + direction


@dataclass
class MergeCoefficients:
    """Solved coefficients, one row per task, one column per direction."""

    values: np.ndarray
    basis_id: str
    g_range_defect: float = 0.0
    g_outside_range: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise ValueError("coefficient values must be 2-D (tasks x directions)")
        if not np.all(np.isfinite(self.values)):
            raise NumericalError("coefficients contain non-finite values")

    @property
    def flat(self) -> np.ndarray:
        return self.values.ravel()


@dataclass
class MergeGeometry:
    """Per-sample ingredients of the layer-N merge objective.

    hidden_inputs[j] is the vector entering layer N on sample j, downstream[j]
    the map from layer N's output to the model output (shared "exact" matrix
    when no ReLU sits above N), residuals[j] the base model's output error.
    """

    layer_index: int
    hidden_inputs: list
    downstream: list
    residuals: np.ndarray
    fixed_downstream: bool


def base_residuals(net: LinearNetwork, calib: CalibrationSet) -> np.ndarray:
    """b_j = h(x_j) - y_j for the unmerged base model, stacked as rows."""
    out = np.empty((len(calib), net.output_dim))
    for j in range(len(calib)):
        out[j] = forward(net, calib.inputs[j]) - calib.targets[j]
    return out


def merge_geometry(
    net: LinearNetwork, layer_index: int, calib: CalibrationSet
) -> MergeGeometry:
    """Precompute hidden inputs, downstream maps and residuals per sample."""
    net._check_layer_index(layer_index)
    fixed = all(a == IDENTITY for a in net.activations[layer_index - 1 :])
    hidden, down = [], []
    shared = None
    n = len(calib)
    residuals = np.empty((n, net.output_dim))
    for j in range(n):
        x = calib.inputs[j]
        hidden.append(layer_input(net, layer_index, x))
        if fixed:
            if shared is None:
                shared = linearize_downstream(net, layer_index, x)
            down.append(shared)
        else:
            down.append(linearize_downstream(net, layer_index, x))
        residuals[j] = forward(net, x) - calib.targets[j]
    return MergeGeometry(layer_index, hidden, down, residuals, fixed)


def _check_deltas(net, deltas):
    if not deltas:
        raise ValueError("no residual updates to merge")
    layer = deltas[0].layer_index
    shape = net.layer_shape(layer)
    for d in deltas:
        if d.layer_index != layer:
            raise ValueError(
                f"residual updates target layers {layer} and {d.layer_index}; "
                "one QP merges a single layer"
            )
        if d.delta.shape != shape:
            raise ValueError(
                f"delta shape {d.delta.shape} does not match layer shape {shape}"
            )
        if not np.all(np.isfinite(d.delta)):
            raise NumericalError(f"task {d.task_id}: non-finite residual update")
    return layer


def build_diagonal_qp(
    net: LinearNetwork,
    deltas: list,
    calib: CalibrationSet,
    geometry: MergeGeometry | None = None,
) -> QuadraticObjective:
    """QP over per-task diagonal masks D_k applied to each residual update.

    The merged update is sum_k diag(d_k) delta_k, so each task contributes a
    per-output-coordinate scaling.  Sample j contributes the block row
    A_j = [L_j diag(r_1j) ... L_j diag(r_Kj)] with r_kj = delta_k @ u_j and
    u_j the input entering layer N.
    """
    layer = _check_deltas(net, deltas)
    if geometry is None:
        geometry = merge_geometry(net, layer, calib)
    elif geometry.layer_index != layer:
        raise ValueError("geometry was computed for a different layer")
    K = len(deltas)
    r = deltas[0].delta.shape[0]
    dim = K * r
    H = np.zeros((dim, dim))
    g = np.zeros(dim)
    const = 0.0
    mats = [d.delta for d in deltas]
    # overflow here surfaces as a NumericalError from the objective validation
    with np.errstate(over="ignore", invalid="ignore"):
        for j in range(len(calib)):
            u = geometry.hidden_inputs[j]
            L = geometry.downstream[j].matrix
            b = geometry.residuals[j]
            blocks = [L * (dm @ u)[None, :] for dm in mats]
            A = np.hstack(blocks)
            H += A.T @ A
            g += A.T @ b
            const += b @ b
    H *= 2.0
    g *= 2.0
    H = 0.5 * (H + H.T)
    return QuadraticObjective(
        H, g, const, n_tasks=K, n_directions=r, basis_id="standard", layer_index=layer
    )


def _basis_columns(basis):
    cols = getattr(basis, "columns", basis)
    cols = np.asarray(cols, dtype=float)
    if cols.ndim != 2:
        raise ValueError("basis must be a 2-D array of columns")
    p = cols.shape[1]
    if p == 0:
        raise ValueError("basis has no columns")
    gram = cols.T @ cols
    if np.abs(gram - np.eye(p)).max() > 1e-10:
        raise ValueError("basis columns are not orthonormal")
    return cols


def build_general_basis_qp(
    net: LinearNetwork,
    deltas: list,
    calib: CalibrationSet,
    basis,
    geometry: MergeGeometry | None = None,
) -> QuadraticObjective:
    """QP restricting every task's update to shared orthonormal directions.

    The merged update is sum_{k,p} d_{kp} q_p q_p^T delta_k.  With
    alpha_{kp}^j = q_p^T delta_k u_j, beta_p^j = (L_j q_p)^T b_j and the Gram
    matrix G^j = (L_j Q)^T (L_j Q), sample j contributes
    H += 2 outer(alpha^j, alpha^j) * tile(G^j) and g += 2 alpha^j * beta^j.
    With the full standard basis this reproduces the diagonal QP exactly.
    """
    layer = _check_deltas(net, deltas)
    Q = _basis_columns(basis)
    r = deltas[0].delta.shape[0]
    if Q.shape[0] != r:
        raise ValueError(
            f"basis lives in dim {Q.shape[0]} but layer output dim is {r}"
        )
    if geometry is None:
        geometry = merge_geometry(net, layer, calib)
    elif geometry.layer_index != layer:
        raise ValueError("geometry was computed for a different layer")
    K = len(deltas)
    P = Q.shape[1]
    dim = K * P
    H = np.zeros((dim, dim))
    g = np.zeros(dim)
    const = 0.0
    mats = [d.delta for d in deltas]
    basis_id = getattr(basis, "origin", "custom")
    with np.errstate(over="ignore", invalid="ignore"):
        for j in range(len(calib)):
            u = geometry.hidden_inputs[j]
            L = geometry.downstream[j].matrix
            b = geometry.residuals[j]
            LQ = L @ Q
            alpha = np.stack([Q.T @ (dm @ u) for dm in mats])  # (K, P)
            beta = LQ.T @ b  # (P,)
            G = LQ.T @ LQ  # (P, P)
            aflat = alpha.ravel()
            H += np.outer(aflat, aflat) * np.tile(G, (K, K))
            g += (alpha * beta[None, :]).ravel()
            const += b @ b
    H *= 2.0
    g *= 2.0
    H = 0.5 * (H + H.T)
    return QuadraticObjective(
        H, g, const, n_tasks=K, n_directions=P, basis_id=basis_id, layer_index=layer
    )


def _flat_coefficients(qp, d):
    values = d.values if isinstance(d, MergeCoefficients) else np.asarray(d, dtype=float)
    flat = values.ravel()
    if flat.shape[0] != qp.dim:
        raise ValueError(f"expected {qp.dim} coefficients, got {flat.shape[0]}")
    return flat


def objective_value(qp: QuadraticObjective, d) -> float:
    """J(d) = 1/2 d^T H d + g^T d + constant."""
    flat = _flat_coefficients(qp, d)
    return float(0.5 * flat @ qp.H @ flat + qp.g @ flat + qp.constant)


def objective_gradient(qp: QuadraticObjective, d) -> np.ndarray:
    """Gradient H d + g of the objective at d."""
    flat = _flat_coefficients(qp, d)
    return qp.H @ flat + qp.g


def solve_unconstrained(
    qp: QuadraticObjective, rel_cutoff: float = 1e-10
) -> MergeCoefficients:
    """Minimum-norm global minimiser d* = -H^+ g via eigendecomposition.

    Eigenvalues at or below rel_cutoff times the largest are treated as zero.
    If g has a component outside the numerical range of H the objective is
    unbounded along it in exact arithmetic; the solve still minimises over
    the range and reports the leftover norm in g_range_defect.
    """
    w, V = np.linalg.eigh(qp.H)
    lam_max = max(float(w[-1]), 0.0) if w.size else 0.0
    cut = rel_cutoff * lam_max
    keep = w > cut
    d = np.zeros(qp.dim)
    if np.any(keep):
        Vk = V[:, keep]
        coeffs = Vk.T @ qp.g
        d = -Vk @ (coeffs / w[keep])
        defect = float(np.linalg.norm(qp.g - Vk @ coeffs))
    else:
        defect = float(np.linalg.norm(qp.g))
    gnorm = float(np.linalg.norm(qp.g))
    flag = defect > 1e-8 * gnorm if gnorm > 0 else False
    if not np.all(np.isfinite(d)):
        raise NumericalError("unconstrained solve produced non-finite coefficients")
    return MergeCoefficients(
        d.reshape(qp.n_tasks, qp.n_directions),
        qp.basis_id,
        g_range_defect=defect,
        g_outside_range=flag,
    )


def solve_box_constrained(
    qp: QuadraticObjective,
    lo: float = 0.0,
    hi: float = 1.0,
    steps: int = 500,
    step_size: float = 1e-2,
    init=None,
    accept_steps: bool = False,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> MergeCoefficients:
    """Projected Adam on J(d) with per-coordinate clamping to [lo, hi].

    Defaults mirror the reference protocol: 500 steps at step size 1e-2 from
    the uniform-average point d = 1/K.  With accept_steps=True a step that
    increases the objective is rolled back (moment estimates still advance).
    """
    lo = float(lo)
    hi = float(hi)
    if not lo < hi:
        raise ValueError(f"invalid bounds: lo={lo} must be < hi={hi}")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if step_size <= 0:
        raise ValueError("step_size must be positive")
    if init is None:
        d = np.full(qp.dim, 1.0 / qp.n_tasks)
    else:
        d = np.asarray(init, dtype=float).ravel().copy()
        if d.shape[0] != qp.dim:
            raise ValueError(f"init must have {qp.dim} entries, got {d.shape[0]}")
    d = np.clip(d, lo, hi)
    m = np.zeros_like(d)
    v = np.zeros_like(d)
    best = objective_value(qp, d) if accept_steps else None
    for t in range(1, steps + 1):
        grad = qp.H @ d + qp.g
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad * grad
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        cand = np.clip(d - step_size * m_hat / (np.sqrt(v_hat) + eps), lo, hi)
        if accept_steps:
            val = objective_value(qp, cand)
            if val <= best:
                d = cand
                best = val
        else:
            d = cand
    if not np.all(np.isfinite(d)):
        raise NumericalError("box-constrained solve produced non-finite coefficients")
    return MergeCoefficients(d.reshape(qp.n_tasks, qp.n_directions), qp.basis_id)


def solve_1d(m, beta: float) -> np.ndarray:
    """Minimiser of (d^T m + beta)^2: d* = -beta m / ||m||^2, zero when m = 0.

    This is the single-direction, single-sample special case of the QP.
    """
    m = np.asarray(m, dtype=float).ravel()
    if not np.all(np.isfinite(m)) or not np.isfinite(beta):
        raise ValueError("non-finite entries in 1-D solve")
    denom = float(m @ m)
    if denom == 0.0:
        return np.zeros_like(m)
    return -float(beta) / denom * m


def merged_delta_from_coefficients(deltas: list, coeffs, basis=None) -> np.ndarray:
    """Assemble the merged weight update a coefficient vector encodes.

    Diagonal parameterisation (basis None): sum_k diag(d_k) delta_k, so
    coefficient row k scales task k's rows.  With a basis Q the update is
    sum_k Q diag(d_k) Q^T delta_k.
    """
    if not deltas:
        raise ValueError("no residual updates")
    values = coeffs.values if isinstance(coeffs, MergeCoefficients) else np.asarray(
        coeffs, dtype=float
    )
    if values.ndim == 1:
        values = values.reshape(len(deltas), -1)
    if values.shape[0] != len(deltas):
        raise ValueError(
            f"{values.shape[0]} coefficient rows for {len(deltas)} tasks"
        )
    mats = [d.delta if isinstance(d, ResidualUpdate) else np.asarray(d, float) for d in deltas]
    shape = mats[0].shape
    merged = np.zeros(shape)
    if basis is None:
        if values.shape[1] != shape[0]:
            raise ValueError(
                f"diagonal coefficients need {shape[0]} columns, got {values.shape[1]}"
            )
        for k, dm in enumerate(mats):
            merged += values[k][:, None] * dm
    else:
        Q = _basis_columns(basis)
        if Q.shape[0] != shape[0]:
            raise ValueError("basis dimension does not match delta rows")
        if values.shape[1] != Q.shape[1]:
            raise ValueError(
                f"expected {Q.shape[1]} coefficients per task, got {values.shape[1]}"
            )
        for k, dm in enumerate(mats):
            merged += Q @ (values[k][:, None] * (Q.T @ dm))
    return merged


def linearized_delta_objective(
    net: LinearNetwork,
    layer_index: int,
    merged_delta,
    calib: CalibrationSet,
    geometry: MergeGeometry | None = None,
) -> float:
    """J_lin(Delta) = sum_j ||L_j Delta u_j + b_j||^2 for any merged update.

    Equals the QP objective at the corresponding coefficients whenever Delta
    is expressible in the QP's parameterisation, and the exact calibration
    loss on all-identity networks.
    """
    delta = np.asarray(merged_delta, dtype=float)
    if geometry is None:
        geometry = merge_geometry(net, layer_index, calib)
    total = 0.0
    for j in range(geometry.residuals.shape[0]):
        u = geometry.hidden_inputs[j]
        L = geometry.downstream[j].matrix
        b = geometry.residuals[j]
        e = L @ (delta @ u) + b
        total += float(e @ e)
    return total


def calibration_mse(net: LinearNetwork, calib: CalibrationSet):
    """Pooled and per-task mean squared output error on a calibration set.

    Returns (pooled, per_task) where pooled = sum_j ||h(x_j) - y_j||^2 / n
    and per_task maps each task label to the same average over its samples.
    """
    n = len(calib)
    sq = np.empty(n)
    for j in range(n):
        e = forward(net, calib.inputs[j]) - calib.targets[j]
        sq[j] = e @ e
    pooled = float(sq.mean())
    per_task = {}
    if calib.task_ids is not None:
        for t in sorted(set(calib.task_ids), key=repr):
            mask = np.array([tid == t for tid in calib.task_ids])
            per_task[t] = float(sq[mask].mean())
    return pooled, per_task
