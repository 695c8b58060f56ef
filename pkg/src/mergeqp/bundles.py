"""Model bundles: base network, per-task updates, calibration data, on disk.

A bundle is everything one merging experiment needs, stored as a single JSON
file (format version 1).  Floats are written with Python's shortest
round-trip repr, so save -> load -> save reproduces values bit-exactly and
identical generator configurations produce byte-identical files.  Three
seeded generators build desk-scale bundles: plain linear stacks, the
shared-direction construction behind the closed-form merge weights, and a
small ReLU classifier fine-tuned on disjoint class subsets.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .networks import IDENTITY, RELU, LinearNetwork, ResidualUpdate, forward
from .qp import CalibrationSet

FORMAT_VERSION = 1


class BundleFormatError(ValueError):
    """A bundle or network file failed structural validation."""


@dataclass
class ModelBundle:
    """Base network, residual updates grouped by layer, per-task calibration.

    residuals maps layer index -> list of ResidualUpdate (one per task, in
    task order).  calibration holds one CalibrationSet per task, each with a
    uniform task label.  meta carries generator provenance (seed, kind,
    parameters) and round-trips untouched.
    """

    base: LinearNetwork
    residuals: dict
    calibration: list
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not isinstance(self.residuals, dict) or not self.residuals:
            raise ValueError("residuals must be a non-empty {layer: [updates]} map")
        for layer, ups in self.residuals.items():
            if not ups:
                raise ValueError(f"layer {layer} has no residual updates")
            shape = self.base.layer_shape(layer)
            for u in ups:
                if u.layer_index != layer:
                    raise ValueError(
                        f"update for layer {u.layer_index} filed under layer {layer}"
                    )
                if u.delta.shape != shape:
                    raise ValueError(
                        f"layer {layer} update shape {u.delta.shape} != {shape}"
                    )
        if not self.calibration:
            raise ValueError("bundle has no calibration sets")
        for cs in self.calibration:
            if cs.inputs.shape[1] != self.base.input_dim:
                raise ValueError("calibration input dim does not match network")
            if cs.targets.shape[1] != self.base.output_dim:
                raise ValueError("calibration target dim does not match network")

    @property
    def layers_with_updates(self) -> list:
        return sorted(self.residuals)

    @property
    def task_ids(self) -> list:
        first = self.layers_with_updates[0]
        return [u.task_id for u in self.residuals[first]]

    def pooled_calibration(self) -> CalibrationSet:
        return CalibrationSet.concat(self.calibration)


def _matrix_obj(mat: np.ndarray) -> dict:
    return {
        "rows": int(mat.shape[0]),
        "cols": int(mat.shape[1]),
        "data": [float(v) for v in mat.ravel()],
    }


def _nested_list(mat: np.ndarray) -> list:
    return [[float(v) for v in row] for row in mat]


def _network_obj(net: LinearNetwork) -> dict:
    return {
        "layers": [_matrix_obj(W) for W in net.layers],
        "activations": list(net.activations),
    }


def bundle_to_obj(bundle: ModelBundle) -> dict:
    obj = {
        "version": FORMAT_VERSION,
        "base": _network_obj(bundle.base),
        "residuals": [],
        "calibration": [],
        "meta": bundle.meta,
    }
    for layer in sorted(bundle.residuals):
        for up in bundle.residuals[layer]:
            obj["residuals"].append(
                {
                    "layer": int(layer),
                    "task": up.task_id,
                    "data": [float(v) for v in up.delta.ravel()],
                }
            )
    for cs in bundle.calibration:
        ids = set(cs.task_ids or [None])
        if len(ids) != 1:
            raise ValueError("each stored calibration set must belong to one task")
        obj["calibration"].append(
            {
                "task": next(iter(ids)),
                "inputs": _nested_list(cs.inputs),
                "targets": _nested_list(cs.targets),
            }
        )
    return obj


def save_bundle(bundle: ModelBundle, path) -> None:
    """Write a bundle as version-1 JSON. Deterministic, no timestamps."""
    with open(path, "w") as fh:
        json.dump(bundle_to_obj(bundle), fh, indent=1)
        fh.write("\n")


def _expect(obj, key, kinds, path):
    if not isinstance(obj, dict):
        raise BundleFormatError(f"{path}: expected an object")
    if key not in obj:
        raise BundleFormatError(f"{path}: missing field {key!r}")
    val = obj[key]
    if kinds is not None and not isinstance(val, kinds):
        raise BundleFormatError(
            f"{path}.{key}: expected {getattr(kinds, '__name__', kinds)}, "
            f"got {type(val).__name__}"
        )
    return val


def _parse_matrix(obj, path) -> np.ndarray:
    rows = _expect(obj, "rows", int, path)
    cols = _expect(obj, "cols", int, path)
    data = _expect(obj, "data", list, path)
    if rows < 1 or cols < 1:
        raise BundleFormatError(f"{path}: rows and cols must be positive")
    if len(data) != rows * cols:
        raise BundleFormatError(
            f"{path}.data: expected {rows * cols} values, got {len(data)}"
        )
    try:
        mat = np.asarray(data, dtype=float).reshape(rows, cols)
    except (TypeError, ValueError) as exc:
        raise BundleFormatError(f"{path}.data: {exc}") from exc
    if not np.all(np.isfinite(mat)):
        raise BundleFormatError(f"{path}.data: non-finite values")
    return mat


def _parse_2d(value, path) -> np.ndarray:
    if not isinstance(value, list) or not value:
        raise BundleFormatError(f"{path}: expected a non-empty list of rows")
    try:
        mat = np.asarray(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise BundleFormatError(f"{path}: {exc}") from exc
    if mat.ndim != 2:
        raise BundleFormatError(f"{path}: rows have inconsistent lengths")
    if not np.all(np.isfinite(mat)):
        raise BundleFormatError(f"{path}: non-finite values")
    return mat


def _parse_network(obj, path) -> LinearNetwork:
    layers_obj = _expect(obj, "layers", list, path)
    if not layers_obj:
        raise BundleFormatError(f"{path}.layers: network needs at least one layer")
    layers = [
        _parse_matrix(l, f"{path}.layers[{i}]") for i, l in enumerate(layers_obj)
    ]
    activations = _expect(obj, "activations", list, path)
    for i, a in enumerate(activations):
        if a not in (IDENTITY, RELU):
            raise BundleFormatError(
                f"{path}.activations[{i}]: unknown activation {a!r}"
            )
    try:
        return LinearNetwork(layers, activations)
    except ValueError as exc:
        raise BundleFormatError(f"{path}: {exc}") from exc


def bundle_from_obj(obj) -> ModelBundle:
    version = _expect(obj, "version", int, "$")
    if version != FORMAT_VERSION:
        raise BundleFormatError(
            f"$.version: unsupported version {version}, expected {FORMAT_VERSION}"
        )
    base = _parse_network(_expect(obj, "base", dict, "$"), "$.base")
    residuals = {}
    res_list = _expect(obj, "residuals", list, "$")
    if not res_list:
        raise BundleFormatError("$.residuals: bundle has no residual updates")
    for i, entry in enumerate(res_list):
        path = f"$.residuals[{i}]"
        layer = _expect(entry, "layer", int, path)
        if not 1 <= layer <= base.depth:
            raise BundleFormatError(f"{path}.layer: {layer} outside [1, {base.depth}]")
        task = _expect(entry, "task", None, path)
        rows, cols = base.layer_shape(layer)
        data = _expect(entry, "data", list, path)
        if len(data) != rows * cols:
            raise BundleFormatError(
                f"{path}.data: expected {rows * cols} values for layer {layer}, "
                f"got {len(data)}"
            )
        try:
            delta = np.asarray(data, dtype=float).reshape(rows, cols)
        except (TypeError, ValueError) as exc:
            raise BundleFormatError(f"{path}.data: {exc}") from exc
        if not np.all(np.isfinite(delta)):
            raise BundleFormatError(f"{path}.data: non-finite values")
        residuals.setdefault(layer, []).append(ResidualUpdate(layer, delta, task))
    calibration = []
    cal_list = _expect(obj, "calibration", list, "$")
    if not cal_list:
        raise BundleFormatError("$.calibration: bundle has no calibration data")
    for i, entry in enumerate(cal_list):
        path = f"$.calibration[{i}]"
        task = _expect(entry, "task", None, path)
        inputs = _parse_2d(_expect(entry, "inputs", list, path), f"{path}.inputs")
        targets = _parse_2d(_expect(entry, "targets", list, path), f"{path}.targets")
        if inputs.shape[0] != targets.shape[0]:
            raise BundleFormatError(
                f"{path}: {inputs.shape[0]} inputs but {targets.shape[0]} targets"
            )
        if inputs.shape[1] != base.input_dim:
            raise BundleFormatError(
                f"{path}.inputs: dim {inputs.shape[1]} != network input dim "
                f"{base.input_dim}"
            )
        if targets.shape[1] != base.output_dim:
            raise BundleFormatError(
                f"{path}.targets: dim {targets.shape[1]} != network output dim "
                f"{base.output_dim}"
            )
        calibration.append(CalibrationSet.for_task(task, inputs, targets))
    meta = obj.get("meta", {})
    if not isinstance(meta, dict):
        raise BundleFormatError("$.meta: expected an object")
    try:
        return ModelBundle(base, residuals, calibration, meta)
    except ValueError as exc:
        raise BundleFormatError(str(exc)) from exc


def load_bundle(path) -> ModelBundle:
    """Parse and validate a bundle file, naming the offending field on error."""
    with open(path) as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise BundleFormatError(f"not valid JSON: {exc}") from exc
    return bundle_from_obj(obj)


def save_network(net: LinearNetwork, path) -> None:
    """Write a bare network (e.g. a merged model) as version-1 JSON."""
    obj = {"version": FORMAT_VERSION, "network": _network_obj(net)}
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1)
        fh.write("\n")


def load_network(path) -> LinearNetwork:
    with open(path) as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise BundleFormatError(f"not valid JSON: {exc}") from exc
    version = _expect(obj, "version", int, "$")
    if version != FORMAT_VERSION:
        raise BundleFormatError(
            f"$.version: unsupported version {version}, expected {FORMAT_VERSION}"
        )
    return _parse_network(_expect(obj, "network", dict, "$"), "$.network")


def _layer_sizes(dims, n_layers):
    d, r, c = dims
    return [d] + [r] * (n_layers - 1) + [c]


def gen_linear_tasks(
    dims=(8, 6, 5),
    n_layers: int = 2,
    merge_layer=1,
    n_tasks: int = 3,
    n_samples: int = 20,
    delta_scale: float = 0.5,
    noise: float = 0.0,
    seed: int = 0,
) -> ModelBundle:
    """Random all-identity stack with Gaussian task updates at chosen layers.

    dims = (input, hidden, output); every interior layer has the hidden
    width.  merge_layer may be a single index or a sequence of indices, each
    getting an independent update per task.  Task k's calibration targets are
    the outputs of the base network with task k's updates applied (noise
    standard deviation added on top when noise > 0), so with one task and no
    noise the generating model itself reaches zero loss.
    """
    if n_layers < 1:
        raise ValueError("n_layers must be >= 1")
    if n_tasks < 1 or n_samples < 1:
        raise ValueError("need at least one task and one sample")
    layers_to_merge = (
        [int(merge_layer)] if np.isscalar(merge_layer) else sorted(int(l) for l in merge_layer)
    )
    sizes = _layer_sizes(dims, n_layers)
    for N in layers_to_merge:
        if not 1 <= N <= n_layers:
            raise ValueError(f"merge layer {N} outside [1, {n_layers}]")
    rng = np.random.default_rng(seed)
    weights = [
        rng.standard_normal((sizes[l + 1], sizes[l])) / math.sqrt(sizes[l])
        for l in range(n_layers)
    ]
    base = LinearNetwork(weights)
    residuals = {N: [] for N in layers_to_merge}
    finetuned = []
    for k in range(n_tasks):
        net_k = base
        for N in layers_to_merge:
            shape = base.layer_shape(N)
            delta = delta_scale * rng.standard_normal(shape) / math.sqrt(shape[1])
            residuals[N].append(ResidualUpdate(N, delta, k))
            net_k = LinearNetwork(
                [
                    W + delta if l == N - 1 else W
                    for l, W in enumerate(net_k.layers)
                ],
                list(net_k.activations),
            )
        finetuned.append(net_k)
    calibration = []
    for k in range(n_tasks):
        X = rng.standard_normal((n_samples, sizes[0]))
        Y = np.stack([forward(finetuned[k], x) for x in X])
        if noise > 0:
            Y = Y + noise * rng.standard_normal(Y.shape)
        calibration.append(CalibrationSet.for_task(k, X, Y))
    meta = {
        "generator": "linear",
        "dims": list(dims),
        "n_layers": n_layers,
        "merge_layers": layers_to_merge,
        "n_tasks": n_tasks,
        "n_samples": n_samples,
        "delta_scale": delta_scale,
        "noise": noise,
        "seed": seed,
    }
    return ModelBundle(base, residuals, calibration, meta)


def gen_shared_direction_instance(
    sigmas=(1.0, 2.0),
    r: int = 4,
    c: int = 6,
    input_dim: int = 5,
    n_samples: int = 12,
    target_task: int = 0,
    orth_scale: float = 0.1,
    seed: int = 0,
) -> ModelBundle:
    """Instance meeting the closed-form assumptions: shared u, isometric L.

    Two-layer network h = L W1 x with L having orthonormal columns (needs
    c >= r).  Task k's update is sigma_k u v^T plus an orthogonal remainder
    (I - u u^T) G_k scaled by orth_scale, so u^T delta_k = sigma_k v^T
    exactly.  Calibration targets come from the fine-tuned model of
    target_task.  The assumption checks (u orthogonal to remainders, L^T L
    close to identity) run before returning; meta records u, v and sigmas so
    they can be re-checked after a round trip.
    """
    s = np.asarray(sigmas, dtype=float).ravel()
    if s.size < 1:
        raise ValueError("need at least one task strength")
    if np.any(s < 0):
        raise ValueError("sigmas must be non-negative")
    if c < r:
        raise ValueError(f"isometric downstream map needs c >= r, got c={c} < r={r}")
    if not 0 <= target_task < s.size:
        raise ValueError(f"target task {target_task} outside [0, {s.size - 1}]")
    rng = np.random.default_rng(seed)
    W1 = rng.standard_normal((r, input_dim)) / math.sqrt(input_dim)
    Lraw = rng.standard_normal((c, r))
    L, _ = np.linalg.qr(Lraw)
    u = rng.standard_normal(r)
    u /= np.linalg.norm(u)
    v = rng.standard_normal(input_dim)
    v /= np.linalg.norm(v)
    base = LinearNetwork([W1, L])
    updates = []
    for k in range(s.size):
        G = rng.standard_normal((r, input_dim)) / math.sqrt(input_dim)
        remainder = orth_scale * (G - np.outer(u, u @ G))
        delta = s[k] * np.outer(u, v) + remainder
        updates.append(ResidualUpdate(1, delta, k))
    X = rng.standard_normal((n_samples, input_dim))
    target_net = LinearNetwork([W1 + updates[target_task].delta, L])
    Y = np.stack([forward(target_net, x) for x in X])
    calibration = [CalibrationSet.for_task(target_task, X, Y)]
    meta = {
        "generator": "shared_direction",
        "sigmas": [float(x) for x in s],
        "r": r,
        "c": c,
        "input_dim": input_dim,
        "n_samples": n_samples,
        "target_task": target_task,
        "orth_scale": orth_scale,
        "seed": seed,
        "u": [float(x) for x in u],
        "v": [float(x) for x in v],
    }
    bundle = ModelBundle(base, {1: updates}, calibration, meta)
    validate_shared_direction_bundle(bundle)
    return bundle


def validate_shared_direction_bundle(
    bundle: ModelBundle, u_tol: float = 1e-12, iso_tol: float = 1e-10
) -> None:
    """Re-check the closed-form assumptions on a shared-direction bundle.

    Verifies u^T (delta_k - sigma_k u v^T) vanishes for every task and that
    the last layer has orthonormal columns.  Raises ValueError on violation
    or if the bundle lacks the required meta fields.
    """
    meta = bundle.meta
    for key in ("u", "v", "sigmas"):
        if key not in meta:
            raise ValueError(f"bundle meta lacks {key!r}; not a shared-direction bundle")
    u = np.asarray(meta["u"], dtype=float)
    v = np.asarray(meta["v"], dtype=float)
    s = np.asarray(meta["sigmas"], dtype=float)
    updates = bundle.residuals.get(1)
    if updates is None or len(updates) != s.size:
        raise ValueError("residual updates do not match the recorded sigmas")
    for k, up in enumerate(updates):
        remainder = up.delta - s[k] * np.outer(u, v)
        worst = np.abs(u @ remainder).max()
        if worst > u_tol:
            raise ValueError(
                f"task {k} remainder is not orthogonal to u (|u^T R| = {worst:.3e})"
            )
    L = bundle.base.layers[-1]
    defect = np.abs(L.T @ L - np.eye(L.shape[1])).max()
    if defect > iso_tol:
        raise ValueError(f"downstream map is not an isometry (defect {defect:.3e})")


def _softmax_free_logit_targets(net, X):
    return np.stack([forward(net, x) for x in X])


def _class_batch(rng, means, classes, n, input_noise):
    picks = rng.integers(0, len(classes), size=n)
    labels = np.asarray(classes)[picks]
    X = means[labels] + input_noise * rng.standard_normal((n, means.shape[1]))
    return X, labels


def _finetune_layer(net, layer_index, X, T, steps, lr):
    """Full-batch gradient descent on mean squared loss, one layer trainable."""
    layers = [W.copy() for W in net.layers]
    M = len(layers)
    n = X.shape[0]
    for _ in range(steps):
        acts = [X]
        pre = []
        A = X
        for l in range(M):
            Z = A @ layers[l].T
            pre.append(Z)
            A = Z
            if l < M - 1 and net.activations[l] == RELU:
                A = np.maximum(Z, 0.0)
            acts.append(A)
        G = 2.0 * (acts[-1] - T) / n
        for l in range(M - 1, layer_index - 1, -1):
            G = G @ layers[l]
            if net.activations[l - 1] == RELU:
                G = G * (pre[l - 1] > 0.0)
        grad = G.T @ acts[layer_index - 1]
        layers[layer_index - 1] -= lr * grad
    return LinearNetwork(layers, list(net.activations))


def gen_relu_tasks(
    dims=(16, 12, 8, 4),
    merge_layer: int = 2,
    n_tasks: int = 2,
    n_samples: int = 100,
    n_train: int = 60,
    train_steps: int = 25,
    learning_rate: float = 0.05,
    input_noise: float = 0.3,
    seed: int = 0,
) -> ModelBundle:
    """Small ReLU classifier fine-tuned per task on disjoint class subsets.

    The base network maps dims[0] -> ... -> dims[-1] with ReLU gaps; output
    coordinates act as class logits with one Gaussian prototype per class.
    The dims[-1] classes are split into n_tasks contiguous groups, and each
    task fine-tunes only layer merge_layer by full-batch gradient descent on
    one-hot targets for its own classes.  Residual updates are the resulting
    weight differences; calibration pairs are fresh class-conditional inputs
    with the fine-tuned model's outputs as targets.
    """
    dims = [int(d) for d in dims]
    if len(dims) < 2:
        raise ValueError("need at least one layer")
    n_layers = len(dims) - 1
    if not 1 <= merge_layer <= n_layers:
        raise ValueError(f"merge layer {merge_layer} outside [1, {n_layers}]")
    n_classes = dims[-1]
    if n_tasks < 1 or n_tasks > n_classes:
        raise ValueError("n_tasks must be between 1 and the number of classes")
    rng = np.random.default_rng(seed)
    weights = [
        rng.standard_normal((dims[l + 1], dims[l])) / math.sqrt(dims[l])
        for l in range(n_layers)
    ]
    base = LinearNetwork(weights, [RELU] * (n_layers - 1))
    means = 1.5 * rng.standard_normal((n_classes, dims[0]))
    groups = [list(g) for g in np.array_split(np.arange(n_classes), n_tasks)]

    updates = []
    finetuned = []
    for k in range(n_tasks):
        X, labels = _class_batch(rng, means, groups[k], n_train, input_noise)
        T = np.zeros((n_train, n_classes))
        T[np.arange(n_train), labels] = 1.0
        net_k = _finetune_layer(base, merge_layer, X, T, train_steps, learning_rate)
        delta = net_k.layers[merge_layer - 1] - base.layers[merge_layer - 1]
        updates.append(ResidualUpdate(merge_layer, delta, k))
        finetuned.append(net_k)

    calibration = []
    for k in range(n_tasks):
        X, _ = _class_batch(rng, means, groups[k], n_samples, input_noise)
        Y = _softmax_free_logit_targets(finetuned[k], X)
        calibration.append(CalibrationSet.for_task(k, X, Y))

    meta = {
        "generator": "relu",
        "dims": dims,
        "merge_layer": merge_layer,
        "n_tasks": n_tasks,
        "n_samples": n_samples,
        "n_train": n_train,
        "train_steps": train_steps,
        "learning_rate": learning_rate,
        "input_noise": input_noise,
        "seed": seed,
        "class_groups": [[int(c) for c in g] for g in groups],
    }
    return ModelBundle(base, {merge_layer: updates}, calibration, meta)
