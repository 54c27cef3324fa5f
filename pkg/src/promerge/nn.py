"""Layered feed-forward models built from Linear, Activation and LayerNorm.

Each layer exposes a row-wise forward map plus analytic gradients of a loss
with respect to that layer's own parameters (given the upstream gradient at
the layer output). Input gradients are also provided so that end-to-end
training paths can chain layers; the progressive merging path never needs
them.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .checkpoint import ModelWeights
from .tensor import ShapeError, Tensor, _GELU_C

ParamKey = tuple[str, str]  # (layer name, parameter role)


@dataclass(frozen=True)
class Linear:
    name: str
    in_dim: int
    out_dim: int
    has_bias: bool = True


@dataclass(frozen=True)
class Activation:
    name: str
    fn: str = "relu"  # "relu" | "gelu"

    def __post_init__(self):
        if self.fn not in ("relu", "gelu"):
            raise ValueError(f"unknown activation {self.fn!r}")


@dataclass(frozen=True)
class LayerNorm:
    name: str
    dim: int
    eps: float = 1e-5


LayerSpec = Union[Linear, Activation, LayerNorm]


def param_shapes(spec: LayerSpec) -> dict[str, tuple[int, ...]]:
    """Parameter roles and shapes a layer declares. Activations declare none."""
    if isinstance(spec, Linear):
        shapes = {"weight": (spec.in_dim, spec.out_dim)}
        if spec.has_bias:
            shapes["bias"] = (spec.out_dim,)
        return shapes
    if isinstance(spec, LayerNorm):
        return {"gain": (spec.dim,), "shift": (spec.dim,)}
    return {}


def is_parameterized(spec: LayerSpec) -> bool:
    return bool(param_shapes(spec))


def _dims(spec: LayerSpec) -> tuple[int | None, int | None]:
    """(in_dim, out_dim); None means the layer is width-preserving."""
    if isinstance(spec, Linear):
        return spec.in_dim, spec.out_dim
    if isinstance(spec, LayerNorm):
        return spec.dim, spec.dim
    return None, None


def architecture_fingerprint(layers: Sequence[LayerSpec]) -> str:
    """Stable hash of the ordered layer descriptors."""
    parts = []
    for spec in layers:
        if isinstance(spec, Linear):
            parts.append(f"linear:{spec.name}:{spec.in_dim}:{spec.out_dim}:{int(spec.has_bias)}")
        elif isinstance(spec, Activation):
            parts.append(f"act:{spec.name}:{spec.fn}")
        else:
            parts.append(f"layernorm:{spec.name}:{spec.dim}:{spec.eps!r}")
    return hashlib.sha256("|".join(parts).encode()).hexdigest()[:16]


def validate_layers(layers: Sequence[LayerSpec]) -> None:
    if not layers:
        raise ValueError("model needs at least one layer")
    names = [spec.name for spec in layers]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate layer names in {names}")
    width = None
    for spec in layers:
        din, dout = _dims(spec)
        if din is not None:
            if width is not None and width != din:
                raise ShapeError(
                    f"layer {spec.name!r} expects width {din}, gets {width}"
                )
            width = dout


@dataclass
class LayeredModel:
    """Ordered layer specs plus the weights that parameterize them."""

    layers: Sequence[LayerSpec]
    weights: ModelWeights = field(repr=False)

    def __post_init__(self):
        validate_layers(self.layers)
        expected = expected_keys(self.layers)
        if set(self.weights.entries) != expected:
            missing = expected - set(self.weights.entries)
            extra = set(self.weights.entries) - expected
            raise ValueError(f"weight keys mismatch: missing={missing} extra={extra}")
        fp = architecture_fingerprint(self.layers)
        if self.weights.arch_fingerprint != fp:
            raise ValueError(
                f"weights carry fingerprint {self.weights.arch_fingerprint}, "
                f"architecture is {fp}"
            )


def expected_keys(layers: Sequence[LayerSpec]) -> set[ParamKey]:
    keys = set()
    for spec in layers:
        for role in param_shapes(spec):
            keys.add((spec.name, role))
    return keys


def init_weights(layers: Sequence[LayerSpec], seed: int = 0) -> ModelWeights:
    """Gaussian fan-in init for Linear, identity for LayerNorm."""
    validate_layers(layers)
    rng = np.random.default_rng(seed)
    entries: dict[ParamKey, Tensor] = {}
    for spec in layers:
        for role, shape in param_shapes(spec).items():
            if role == "weight":
                entries[(spec.name, role)] = Tensor(
                    rng.standard_normal(shape) / math.sqrt(shape[0])
                )
            elif role == "gain":
                entries[(spec.name, role)] = Tensor.ones(shape)
            else:  # bias, shift
                entries[(spec.name, role)] = Tensor.zeros(shape)
    return ModelWeights(entries, architecture_fingerprint(layers))


def layer_params(weights: ModelWeights, spec: LayerSpec) -> dict[str, Tensor]:
    return {role: weights.entries[(spec.name, role)] for role in param_shapes(spec)}


# -- forward ------------------------------------------------------------------


def _check_batch(spec: LayerSpec, batch: Tensor) -> None:
    if len(batch.shape) != 2:
        raise ShapeError(f"batch must be rank 2, got {batch.shape}")
    din, _ = _dims(spec)
    if din is not None and batch.shape[1] != din:
        raise ShapeError(
            f"layer {spec.name!r} expects input width {din}, batch is {batch.shape}"
        )


def _layernorm_stats(spec: LayerNorm, x: np.ndarray):
    mean = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + spec.eps)
    xhat = (x - mean) * inv_std
    return xhat, inv_std


def layer_forward(spec: LayerSpec, params: dict[str, Tensor], batch: Tensor) -> Tensor:
    """Apply one layer row-wise to a B x d_in batch."""
    _check_batch(spec, batch)
    x = batch.array
    if isinstance(spec, Linear):
        out = x @ params["weight"].array
        if spec.has_bias:
            out = out + params["bias"].array
        return Tensor(out)
    if isinstance(spec, Activation):
        if spec.fn == "relu":
            return Tensor(np.maximum(x, 0.0))
        inner = _GELU_C * (x + 0.044715 * x**3)
        return Tensor(0.5 * x * (1.0 + np.tanh(inner)))
    xhat, _ = _layernorm_stats(spec, x)
    return Tensor(xhat * params["gain"].array + params["shift"].array)


def model_forward_with_features(
    layers: Sequence[LayerSpec], weights: ModelWeights, batch: Tensor
) -> list[Tensor]:
    """Per-layer outputs of the composed model; the last entry is the output."""
    features = []
    current = batch
    for spec in layers:
        current = layer_forward(spec, layer_params(weights, spec), current)
        features.append(current)
    return features


def model_forward(layers, weights, batch: Tensor) -> Tensor:
    return model_forward_with_features(layers, weights, batch)[-1]


# -- backward -----------------------------------------------------------------


def layer_backward_weights(
    spec: LayerSpec,
    params: dict[str, Tensor],
    batch_in: Tensor,
    upstream: Tensor,
) -> dict[str, Tensor]:
    """Gradient of the loss w.r.t. this layer's parameters only.

    `upstream` is dLoss/d(layer output), same shape as the output. Layers
    without parameters return an empty gradient.
    """
    _check_batch(spec, batch_in)
    x = batch_in.array
    u = upstream.array
    if isinstance(spec, Linear):
        if u.shape != (x.shape[0], spec.out_dim):
            raise ShapeError(
                f"upstream shape {upstream.shape} does not match output "
                f"({x.shape[0]}, {spec.out_dim})"
            )
        grads = {"weight": Tensor(x.T @ u)}
        if spec.has_bias:
            grads["bias"] = Tensor(u.sum(axis=0))
        return grads
    if isinstance(spec, Activation):
        return {}
    if u.shape != x.shape:
        raise ShapeError(f"upstream shape {upstream.shape} does not match {batch_in.shape}")
    xhat, _ = _layernorm_stats(spec, x)
    return {
        "gain": Tensor((u * xhat).sum(axis=0)),
        "shift": Tensor(u.sum(axis=0)),
    }


def layer_backward_input(
    spec: LayerSpec,
    params: dict[str, Tensor],
    batch_in: Tensor,
    upstream: Tensor,
) -> Tensor:
    """Gradient of the loss w.r.t. the layer input (for end-to-end chains)."""
    _check_batch(spec, batch_in)
    x = batch_in.array
    u = upstream.array
    if isinstance(spec, Linear):
        return Tensor(u @ params["weight"].array.T)
    if isinstance(spec, Activation):
        if spec.fn == "relu":
            return Tensor(u * (x > 0.0))
        inner = _GELU_C * (x + 0.044715 * x**3)
        t = np.tanh(inner)
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return Tensor(u * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * dinner))
    xhat, inv_std = _layernorm_stats(spec, x)
    g = u * params["gain"].array
    d = x.shape[1]
    return Tensor(
        inv_std
        * (g - g.mean(axis=1, keepdims=True) - xhat * (g * xhat).sum(axis=1, keepdims=True) / d)
    )


def model_backward(
    layers: Sequence[LayerSpec],
    weights: ModelWeights,
    batch: Tensor,
    feature_grads: Sequence[Tensor | None],
) -> dict[ParamKey, Tensor]:
    """Weight gradients for a loss expressed through per-layer features.

    `feature_grads[l]` is the direct dLoss/d(feature of layer l), or None if
    the loss does not touch that feature directly; contributions are chained
    backwards through the stack. Covers both output-only losses (one non-None
    entry at the top) and all-layer feature-matching losses.
    """
    if len(feature_grads) != len(layers):
        raise ShapeError("need one feature gradient slot per layer")
    inputs = [batch]
    for spec in layers[:-1]:
        inputs.append(layer_forward(spec, layer_params(weights, spec), inputs[-1]))

    grads: dict[ParamKey, Tensor] = {}
    flowing: np.ndarray | None = None
    for idx in range(len(layers) - 1, -1, -1):
        spec = layers[idx]
        direct = feature_grads[idx]
        if direct is None and flowing is None:
            continue
        if direct is None:
            upstream = Tensor(flowing)
        elif flowing is None:
            upstream = direct
        else:
            upstream = Tensor(direct.array + flowing)
        params = layer_params(weights, spec)
        for role, g in layer_backward_weights(spec, params, inputs[idx], upstream).items():
            grads[(spec.name, role)] = g
        if idx > 0:
            flowing = layer_backward_input(spec, params, inputs[idx], upstream).array
    return grads
