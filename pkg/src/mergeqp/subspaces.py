"""Output-space projection view of merging: energy matrices, bases, gaps.

Restricting the merged correction to p directions means the best achievable
relaxed loss is total residual energy minus the energy captured by the
projected subspace.  The energy matrix S = sum_j b_j b_j^T makes this a trace
computation, and the best p-dimensional subspace is spanned by the top-p
eigenvectors of S.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .networks import DownstreamMap, ResidualUpdate


@dataclass
class OrthonormalBasis:
    """Orthonormal direction set, one column per direction.

    origin records how the basis was produced ("standard", "eigen_S",
    "svd_residuals", "random(seed)", "pullback(...)").  rank_deficient is set
    when fewer directions than requested were achievable.
    """

    columns: np.ndarray
    origin: str
    rank_deficient: bool = False

    def __post_init__(self):
        self.columns = np.asarray(self.columns, dtype=float)
        if self.columns.ndim != 2:
            raise ValueError("basis columns must form a 2-D array")
        if not np.all(np.isfinite(self.columns)):
            raise ValueError("basis contains non-finite entries")
        p = self.columns.shape[1]
        gram = self.columns.T @ self.columns
        if p and np.abs(gram - np.eye(p)).max() > 1e-10:
            raise ValueError("basis columns are not orthonormal")

    @property
    def dim(self) -> int:
        return self.columns.shape[0]

    @property
    def p(self) -> int:
        return self.columns.shape[1]

    def prefix(self, p: int) -> "OrthonormalBasis":
        """First p columns, preserving origin. Prefixes form nested chains."""
        if not 1 <= p <= self.p:
            raise ValueError(f"prefix size {p} outside [1, {self.p}]")
        return OrthonormalBasis(self.columns[:, :p].copy(), self.origin)


@dataclass
class ResidualEnergyMatrix:
    """S = sum_j b_j b_j^T with its trace, the total residual energy."""

    S: np.ndarray
    total_energy: float

    def __post_init__(self):
        self.S = np.asarray(self.S, dtype=float)
        if self.S.ndim != 2 or self.S.shape[0] != self.S.shape[1]:
            raise ValueError("S must be square")
        self.total_energy = float(self.total_energy)


@dataclass
class SubspaceDiagnostics:
    """How much residual energy a model subspace captures vs the optimum."""

    captured_energy: float
    fraction: float
    relaxed_loss: float
    gap_vs_optimal: float
    approximate: bool = False


def energy_matrix(residuals) -> ResidualEnergyMatrix:
    """Accumulate S = sum_j b_j b_j^T from stacked residual rows."""
    B = np.asarray(residuals, dtype=float)
    if B.ndim != 2 or B.shape[0] == 0:
        raise ValueError("residuals must be a non-empty 2-D array of rows")
    S = B.T @ B
    S = 0.5 * (S + S.T)
    return ResidualEnergyMatrix(S, float(np.trace(S)))


def _energy_array(S):
    return S.S if isinstance(S, ResidualEnergyMatrix) else np.asarray(S, dtype=float)


def optimal_basis(S, p: int) -> OrthonormalBasis:
    """Top-p eigenvectors of S, the best p-dimensional output subspace.

    Columns are ordered by descending eigenvalue.  Each eigenvector is signed
    so its largest-magnitude entry is positive, and exact eigenvalue ties are
    broken by the ascending index of that entry, so the result is
    deterministic up to degenerate eigenspaces.
    """
    Smat = _energy_array(S)
    c = Smat.shape[0]
    if not 1 <= p <= c:
        raise ValueError(f"p={p} outside [1, {c}]")
    w, V = np.linalg.eigh(Smat)
    anchors = np.empty(c, dtype=int)
    for i in range(c):
        idx = int(np.argmax(np.abs(V[:, i])))
        if V[idx, i] < 0:
            V[:, i] = -V[:, i]
        anchors[i] = idx
    order = np.lexsort((anchors, -w))
    return OrthonormalBasis(V[:, order[:p]].copy(), "eigen_S")


def standard_basis(dim: int, p: int, order=None) -> OrthonormalBasis:
    """Coordinate directions e_i, optionally in a caller-chosen order."""
    if not 1 <= p <= dim:
        raise ValueError(f"p={p} outside [1, {dim}]")
    if order is None:
        order = np.arange(dim)
    order = np.asarray(order, dtype=int)
    if order.shape[0] < p:
        raise ValueError("order is shorter than p")
    cols = np.zeros((dim, p))
    for j in range(p):
        cols[order[j], j] = 1.0
    return OrthonormalBasis(cols, "standard")


def coordinate_energy_order(S, L=None) -> np.ndarray:
    """Coordinates ranked by the energy their induced output direction captures.

    Coordinate i maps to the output direction L e_i (column i of L, or e_i
    itself when L is None); its score is the energy a 1-D projection onto
    that direction captures.  With L = I this ranks by the diagonal of S, so
    for diagonal S the top-p coordinates match the top-p eigenvectors.
    """
    Smat = _energy_array(S)
    if L is None:
        scores = np.diag(Smat).copy()
        dim = Smat.shape[0]
    else:
        Lmat = L.matrix if isinstance(L, DownstreamMap) else np.asarray(L, dtype=float)
        dim = Lmat.shape[1]
        scores = np.empty(dim)
        for i in range(dim):
            w = Lmat[:, i]
            nrm2 = float(w @ w)
            scores[i] = float(w @ Smat @ w) / nrm2 if nrm2 > 0 else 0.0
    return np.argsort(-scores, kind="stable")


def _orthonormalize(columns: np.ndarray, tol_scale: float | None = None):
    """Modified Gram-Schmidt with one re-orthogonalisation pass.

    Columns are processed in order; a column whose residual falls below
    1e-10 times the tolerance scale (largest input column norm by default)
    is dropped as linearly dependent.
    """
    cols = np.asarray(columns, dtype=float)
    if cols.ndim != 2:
        raise ValueError("expected a 2-D array of columns")
    norms = np.linalg.norm(cols, axis=0) if cols.shape[1] else np.zeros(0)
    scale = tol_scale if tol_scale is not None else (norms.max() if norms.size else 0.0)
    tol = 1e-10 * scale
    kept = []
    for i in range(cols.shape[1]):
        v = cols[:, i].copy()
        for q in kept:
            v -= (q @ v) * q
        for q in kept:
            v -= (q @ v) * q
        nrm = np.linalg.norm(v)
        if nrm > tol and nrm > 0.0:
            kept.append(v / nrm)
    if kept:
        return np.stack(kept, axis=1)
    return np.zeros((cols.shape[0], 0))


def svd_basis(deltas, p: int) -> OrthonormalBasis:
    """Orthonormalised left singular vectors of the task updates.

    Every task's (sigma, u) pairs are pooled, sorted by descending singular
    value (ties by task order, then singular index), and the u's are
    orthonormalised in that order until p directions are found.  If the
    pooled updates span fewer than p directions the achieved rank is
    returned with rank_deficient set and a warning.
    """
    if p < 1:
        raise ValueError("p must be >= 1")
    mats = [
        d.delta if isinstance(d, ResidualUpdate) else np.asarray(d, dtype=float)
        for d in deltas
    ]
    if not mats:
        raise ValueError("no residual updates")
    entries = []
    for k, dm in enumerate(mats):
        U, s, _ = np.linalg.svd(dm, full_matrices=False)
        for i in range(s.shape[0]):
            entries.append((float(s[i]), k, i, U[:, i]))
    entries.sort(key=lambda e: (-e[0], e[1], e[2]))
    sig_max = entries[0][0] if entries else 0.0
    weighted = (
        np.stack([sig * u for sig, _, _, u in entries], axis=1)
        if entries
        else np.zeros((mats[0].shape[0], 0))
    )
    Q = _orthonormalize(weighted, tol_scale=sig_max if sig_max > 0 else 1.0)
    achieved = Q.shape[1]
    deficient = achieved < p
    if deficient:
        warnings.warn(
            f"requested p={p} but task updates only span {achieved} directions",
            stacklevel=2,
        )
    return OrthonormalBasis(Q[:, : min(p, achieved)], "svd_residuals", deficient)


def random_basis(dim: int, p: int, seed: int) -> OrthonormalBasis:
    """Haar-ish random orthonormal p-frame from a seeded Gaussian QR."""
    if not 1 <= p <= dim:
        raise ValueError(f"p={p} outside [1, {dim}]")
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((dim, p))
    Q, R = np.linalg.qr(G)
    signs = np.sign(np.diag(R))
    signs[signs == 0] = 1.0
    return OrthonormalBasis(Q * signs[None, :], f"random({seed})")


def pullback_basis(L, directions, origin: str | None = None) -> OrthonormalBasis:
    """Residual-space basis whose image under L tracks given output directions.

    Computes pinv(L) applied to each direction and orthonormalises in order,
    so prefixes stay nested.  Directions whose preimages are linearly
    dependent are dropped (rank_deficient set).
    """
    Lmat = L.matrix if isinstance(L, DownstreamMap) else np.asarray(L, dtype=float)
    W = getattr(directions, "columns", directions)
    W = np.asarray(W, dtype=float)
    if W.ndim != 2:
        raise ValueError("directions must be a 2-D array of columns")
    if W.shape[0] != Lmat.shape[0]:
        raise ValueError(
            f"directions live in dim {W.shape[0]} but L maps into {Lmat.shape[0]}"
        )
    pre = np.linalg.pinv(Lmat) @ W
    Q = _orthonormalize(pre)
    if origin is None:
        inner = getattr(directions, "origin", "custom")
        origin = f"pullback({inner})"
    return OrthonormalBasis(Q, origin, rank_deficient=Q.shape[1] < W.shape[1])


def output_projector(L, basis) -> np.ndarray:
    """Orthogonal projector onto span(L Q) = B (B^T B)^+ B^T with B = L Q.

    Computed through the SVD of B so the result is symmetric and idempotent
    to machine precision even when B is rank-deficient.
    """
    Lmat = L.matrix if isinstance(L, DownstreamMap) else np.asarray(L, dtype=float)
    Q = getattr(basis, "columns", basis)
    Q = np.asarray(Q, dtype=float)
    B = Lmat @ Q
    c = B.shape[0]
    if B.shape[1] == 0:
        return np.zeros((c, c))
    U, s, _ = np.linalg.svd(B, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros((c, c))
    cut = s[0] * max(B.shape) * np.finfo(float).eps
    Uk = U[:, s > cut]
    P = Uk @ Uk.T
    return 0.5 * (P + P.T)


def diagnostics(S, P_model, P_opt) -> SubspaceDiagnostics:
    """Captured energy, fraction, relaxed loss and gap for a model subspace.

    captured = tr(S P_model); relaxed loss = total - captured; the gap is
    tr(S (P_opt - P_model)) >= 0 when P_opt projects onto the top eigenspace
    of matching dimension.  Zero total energy reports fraction 1 by
    convention (nothing left to capture).
    """
    Smat = _energy_array(S)
    total = (
        S.total_energy
        if isinstance(S, ResidualEnergyMatrix)
        else float(np.trace(Smat))
    )
    P_model = np.asarray(P_model, dtype=float)
    P_opt = np.asarray(P_opt, dtype=float)
    captured = float(np.einsum("ij,ji->", Smat, P_model))
    fraction = 1.0 if total == 0.0 else captured / total
    relaxed = total - captured
    gap = float(np.einsum("ij,ji->", Smat, P_opt - P_model))
    return SubspaceDiagnostics(captured, fraction, relaxed, gap)


def captured_energy_pointwise(residuals, projectors) -> float:
    """sum_j b_j^T P_j b_j for sample-dependent projectors.

    This is the captured-energy surrogate when the downstream map is a
    per-sample Jacobian, so no single fixed projector exists.
    """
    B = np.asarray(residuals, dtype=float)
    if B.shape[0] != len(projectors):
        raise ValueError("one projector per residual row required")
    total = 0.0
    for j in range(B.shape[0]):
        b = B[j]
        total += float(b @ projectors[j] @ b)
    return total


def svd_closed_form_weights(sigmas, target_index: int) -> np.ndarray:
    """Optimal shared-direction coefficients sigma_t sigma_k / sum sigma^2.

    Applies when every task's update shares one rank-1 direction sigma_k u v^T
    (orthogonal remainders allowed), the downstream map is an isometry, and
    calibration targets come from task t.  Equal strengths give 1/K each and
    a single task recovers coefficient 1 exactly.
    """
    s = np.asarray(sigmas, dtype=float).ravel()
    if s.size == 0:
        raise ValueError("no singular values")
    if np.any(s < 0):
        raise ValueError("singular values must be non-negative")
    if not 0 <= target_index < s.size:
        raise ValueError(f"target index {target_index} outside [0, {s.size - 1}]")
    denom = float(s @ s)
    if denom == 0.0:
        raise ValueError("all singular values are zero")
    return s[target_index] * s / denom
