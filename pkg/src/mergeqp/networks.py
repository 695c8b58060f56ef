"""Dense multi-layer networks, their factorisations, and local linearisation.

Layers are numbered 1..M and weight ``layers[l]`` maps the output of layer l
to the input of layer l+1.  Each gap between consecutive layers carries an
activation flag ("identity" or "relu"); no activation follows the last layer.
All operations here are pure: they never mutate their network arguments.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

IDENTITY = "identity"
RELU = "relu"
ACTIVATIONS = (IDENTITY, RELU)


def _as_float_matrix(value, name):
    mat = np.asarray(value, dtype=float)
    if mat.ndim != 2:
        raise ValueError(f"{name} must be a 2-D array, got shape {mat.shape}")
    if not np.all(np.isfinite(mat)):
        raise ValueError(f"{name} contains non-finite entries")
    return mat


def _as_float_vector(value, name):
    vec = np.asarray(value, dtype=float)
    if vec.ndim != 1:
        raise ValueError(f"{name} must be a 1-D array, got shape {vec.shape}")
    if not np.all(np.isfinite(vec)):
        raise ValueError(f"{name} contains non-finite entries")
    return vec


@dataclass
class LinearNetwork:
    """Stack of dense layers with per-gap activation flags.

    layers
        List of weight matrices, ``layers[l]`` of shape (out_l, in_l), with
        consecutive shapes chaining (in_{l+1} == out_l).
    activations
        One flag per gap (length ``len(layers) - 1``), each "identity" or
        "relu".  ``None`` means all identity, i.e. a purely linear network.
    """

    layers: list
    activations: list | None = None

    def __post_init__(self):
        if not self.layers:
            raise ValueError("network needs at least one layer")
        self.layers = [
            _as_float_matrix(W, f"layer {i + 1}") for i, W in enumerate(self.layers)
        ]
        for i in range(len(self.layers) - 1):
            out_here = self.layers[i].shape[0]
            in_next = self.layers[i + 1].shape[1]
            if in_next != out_here:
                raise ValueError(
                    f"layer {i + 2} expects input dim {in_next} but layer "
                    f"{i + 1} produces dim {out_here}"
                )
        if self.activations is None:
            self.activations = [IDENTITY] * (len(self.layers) - 1)
        self.activations = [str(a) for a in self.activations]
        if len(self.activations) != len(self.layers) - 1:
            raise ValueError(
                f"expected {len(self.layers) - 1} activation flags, "
                f"got {len(self.activations)}"
            )
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].shape[0]

    def is_linear(self) -> bool:
        """True when every gap is an identity, so the network is one matrix."""
        return all(a == IDENTITY for a in self.activations)

    def copy(self) -> "LinearNetwork":
        return LinearNetwork([W.copy() for W in self.layers], list(self.activations))

    def layer_shape(self, layer_index: int) -> tuple:
        self._check_layer_index(layer_index)
        return self.layers[layer_index - 1].shape

    def _check_layer_index(self, layer_index: int):
        if not 1 <= layer_index <= self.depth:
            raise ValueError(
                f"layer index {layer_index} outside [1, {self.depth}]"
            )


@dataclass
class ResidualUpdate:
    """Weight update delta = W_finetuned - W_base for one task at one layer."""

    layer_index: int
    delta: np.ndarray
    task_id: object = None

    def __post_init__(self):
        self.layer_index = int(self.layer_index)
        if self.layer_index < 1:
            raise ValueError("layer_index is 1-based and must be >= 1")
        self.delta = _as_float_matrix(self.delta, "delta")


@dataclass
class DownstreamMap:
    """Linear map from a layer's output to the model output.

    kind is "exact" when the downstream gaps are all identity (the map is the
    plain weight product, independent of the input) and "jacobian" when it is
    a local linearisation at a particular input's activation pattern.
    """

    matrix: np.ndarray
    kind: str = "exact"

    def __post_init__(self):
        self.matrix = _as_float_matrix(self.matrix, "downstream matrix")
        if self.kind not in ("exact", "jacobian"):
            raise ValueError(f"unknown downstream map kind {self.kind!r}")


def forward(net: LinearNetwork, x) -> np.ndarray:
    """Evaluate the network on a single input vector."""
    a = _as_float_vector(x, "input")
    if a.shape[0] != net.input_dim:
        raise ValueError(
            f"input has dim {a.shape[0]}, network expects {net.input_dim}"
        )
    last = net.depth - 1
    for i, W in enumerate(net.layers):
        a = W @ a
        if i < last and net.activations[i] == RELU:
            a = np.maximum(a, 0.0)
    return a


def layer_input(net: LinearNetwork, layer_index: int, x) -> np.ndarray:
    """The vector actually fed into layer N, activations below included.

    For N = 1 this is x itself; on an all-identity network it equals Z @ x
    with Z from factorize.
    """
    net._check_layer_index(layer_index)
    a = _as_float_vector(x, "input")
    if a.shape[0] != net.input_dim:
        raise ValueError(
            f"input has dim {a.shape[0]}, network expects {net.input_dim}"
        )
    for i in range(layer_index - 1):
        a = net.layers[i] @ a
        if net.activations[i] == RELU:
            a = np.maximum(a, 0.0)
    return a


def factorize(net: LinearNetwork, layer_index: int) -> tuple:
    """Split an all-identity network around layer N as h(x) = L W_N Z x.

    Returns (Z, L) where Z collapses layers 1..N-1 and L collapses layers
    N+1..M.  Degenerate ends give identity matrices.  Raises ValueError if
    any gap has a non-identity activation, because then no such fixed
    factorisation exists.
    """
    net._check_layer_index(layer_index)
    if not net.is_linear():
        raise ValueError("factorize requires all-identity activations")
    Z = np.eye(net.input_dim)
    for i in range(layer_index - 1):
        Z = net.layers[i] @ Z
    out_n = net.layers[layer_index - 1].shape[0]
    L = np.eye(out_n)
    for i in range(layer_index, net.depth):
        L = net.layers[i] @ L
    return Z, L


def linearize_downstream(net: LinearNetwork, layer_index: int, x) -> DownstreamMap:
    """Jacobian of the map from layer N's output to the model output at x.

    ReLU gaps contribute diagonal 0/1 masks fixed by the base activation
    pattern; a pre-activation sitting exactly at zero masks to 0.  When every
    downstream gap is identity the result is the exact weight product and is
    independent of x.
    """
    net._check_layer_index(layer_index)
    a = _as_float_vector(x, "input")
    if a.shape[0] != net.input_dim:
        raise ValueError(
            f"input has dim {a.shape[0]}, network expects {net.input_dim}"
        )
    pre = []
    last = net.depth - 1
    for i, W in enumerate(net.layers):
        z = W @ a
        pre.append(z)
        a = z
        if i < last and net.activations[i] == RELU:
            a = np.maximum(a, 0.0)

    out_n = net.layers[layer_index - 1].shape[0]
    A = np.eye(out_n)
    kind = "exact"
    for i in range(layer_index - 1, net.depth - 1):
        if net.activations[i] == RELU:
            mask = (pre[i] > 0.0).astype(float)
            A = net.layers[i + 1] @ (mask[:, None] * A)
            kind = "jacobian"
        else:
            A = net.layers[i + 1] @ A
    return DownstreamMap(A, kind)


def hidden_residual(delta: ResidualUpdate, Z, x) -> np.ndarray:
    """r = delta @ Z @ x, the hidden-layer perturbation one task contributes."""
    Zm = _as_float_matrix(Z, "Z")
    xv = _as_float_vector(x, "x")
    if Zm.shape[1] != xv.shape[0]:
        raise ValueError(f"Z has {Zm.shape[1]} columns but x has dim {xv.shape[0]}")
    if delta.delta.shape[1] != Zm.shape[0]:
        raise ValueError(
            f"delta has {delta.delta.shape[1]} columns but Z produces dim {Zm.shape[0]}"
        )
    return delta.delta @ (Zm @ xv)


def apply_merged_residual(
    net: LinearNetwork, layer_index: int, merged_delta
) -> LinearNetwork:
    """New network with merged_delta added to layer N's weights.

    The input network is left untouched; all arrays are copied.
    """
    net._check_layer_index(layer_index)
    delta = _as_float_matrix(merged_delta, "merged delta")
    target = net.layers[layer_index - 1]
    if delta.shape != target.shape:
        raise ValueError(
            f"merged delta shape {delta.shape} does not match layer "
            f"{layer_index} shape {target.shape}"
        )
    layers = [W.copy() for W in net.layers]
    layers[layer_index - 1] = layers[layer_index - 1] + delta
    return LinearNetwork(layers, list(net.activations))
