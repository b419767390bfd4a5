"""Small dense networks with explicit forward and reverse-mode passes.

Inputs are row batches ``(n, in)``; a 1-D input is treated as a single row
and yields a 1-D output. All arithmetic is float64.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field
from enum import StrEnum

import numpy as np

from tripletforge.src.core import ValidationError

LEAKY_SLOPE = 0.2


class Activation(StrEnum):
    LEAKY_RELU = "leaky_relu"
    SOFTMAX = "softmax"
    NONE = "none"


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: Activation = Activation.NONE
    # Negative-region slope magnitude: f(x) = slope * x for x <= 0.
    slope: float = LEAKY_SLOPE

    @property
    def in_dim(self) -> int:
        return int(self.weight.shape[1])

    @property
    def out_dim(self) -> int:
        return int(self.weight.shape[0])


@dataclass
class Mlp:
    layers: list[Layer]

    def __post_init__(self) -> None:
        if not self.layers:
            raise ValidationError("mlp", "network needs at least one layer")
        previous: int | None = None
        for index, layer in enumerate(self.layers):
            if layer.weight.ndim != 2 or layer.bias.shape != (layer.out_dim,):
                raise ValidationError("mlp", f"layer {index} has inconsistent parameter shapes")
            if previous is not None and layer.in_dim != previous:
                raise ValidationError(
                    "mlp", f"layer {index} expects {layer.in_dim} inputs, previous emits {previous}"
                )
            if not (np.all(np.isfinite(layer.weight)) and np.all(np.isfinite(layer.bias))):
                raise ValidationError("mlp", f"layer {index} has non-finite parameters")
            previous = layer.out_dim

    @classmethod
    def initialize(
        cls,
        dims: Sequence[int],
        activations: Sequence[Activation],
        rng: np.random.Generator,
        *,
        slope: float = LEAKY_SLOPE,
    ) -> Mlp:
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for weights and biases."""
        if len(activations) != len(dims) - 1:
            raise ValidationError("mlp", "need one activation per affine layer")
        layers = []
        for fan_in, fan_out, activation in zip(dims[:-1], dims[1:], activations, strict=True):
            bound = 1.0 / np.sqrt(fan_in)
            layers.append(
                Layer(
                    weight=rng.uniform(-bound, bound, size=(fan_out, fan_in)),
                    bias=rng.uniform(-bound, bound, size=fan_out),
                    activation=Activation(activation),
                    slope=slope,
                )
            )
        return cls(layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    def parameters(self) -> list[np.ndarray]:
        """Parameter tensors in declaration order: W1, b1, W2, b2, ..."""
        params: list[np.ndarray] = []
        for layer in self.layers:
            params.extend((layer.weight, layer.bias))
        return params

    def copy(self) -> Mlp:
        return Mlp(
            [
                Layer(layer.weight.copy(), layer.bias.copy(), layer.activation, layer.slope)
                for layer in self.layers
            ]
        )

    def sgd_step(self, grads: Sequence[LayerGrad], lr: float) -> None:
        for layer, grad in zip(self.layers, grads, strict=True):
            layer.weight -= lr * grad.weight
            layer.bias -= lr * grad.bias


@dataclass(frozen=True)
class LayerGrad:
    weight: np.ndarray
    bias: np.ndarray


@dataclass(frozen=True)
class ForwardCache:
    """Per-layer inputs and pre-activations retained for :func:`backward`."""

    inputs: list[np.ndarray] = field(default_factory=list)
    preacts: list[np.ndarray] = field(default_factory=list)
    outputs: list[np.ndarray] = field(default_factory=list)
    squeeze: bool = False


def leaky_relu(z: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    return np.where(z > 0.0, z, slope * z)


def leaky_relu_grad(z: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    """Derivative; the kink at 0 takes the negative-slope branch."""
    return np.where(z > 0.0, 1.0, slope)


def softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def _activate(layer: Layer, z: np.ndarray) -> np.ndarray:
    if layer.activation is Activation.LEAKY_RELU:
        return leaky_relu(z, layer.slope)
    if layer.activation is Activation.SOFTMAX:
        return softmax(z)
    return z


def forward(net: Mlp, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Affine + activation per layer; returns the output and the cache for backward."""
    batch = np.asarray(x, dtype=np.float64)
    squeeze = batch.ndim == 1
    if squeeze:
        batch = batch[None, :]
    if batch.ndim != 2 or batch.shape[1] != net.input_dim:
        raise ValidationError(
            "mlp", f"input has shape {np.shape(x)}, network expects {net.input_dim} features"
        )
    cache = ForwardCache(squeeze=squeeze)
    out = batch
    for layer in net.layers:
        cache.inputs.append(out)
        z = out @ layer.weight.T + layer.bias
        cache.preacts.append(z)
        out = _activate(layer, z)
        cache.outputs.append(out)
    if not np.all(np.isfinite(out)):
        raise ValidationError("mlp", "network output is not finite")
    return (out[0] if squeeze else out), cache


def backward(
    net: Mlp,
    cache: ForwardCache | None,
    grad_out: np.ndarray,
    *,
    from_preactivation: bool = False,
) -> tuple[list[LayerGrad], np.ndarray]:
    """Reverse-mode pass; returns parameter gradients and the input gradient.

    With ``from_preactivation`` the incoming gradient is taken with respect
    to the last layer's pre-activation (used for fused softmax cross-entropy).
    """
    if cache is None or len(cache.inputs) != len(net.layers):
        raise ValidationError("mlp", "backward needs the cache of a forward pass over this network")
    grad = np.asarray(grad_out, dtype=np.float64)
    if cache.squeeze and grad.ndim == 1:
        grad = grad[None, :]
    if grad.shape != cache.outputs[-1].shape:
        raise ValidationError("mlp", f"output gradient has shape {grad.shape}")
    grads: list[LayerGrad] = []
    for index in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[index]
        z = cache.preacts[index]
        if index == len(net.layers) - 1 and from_preactivation:
            dz = grad
        elif layer.activation is Activation.LEAKY_RELU:
            dz = grad * leaky_relu_grad(z, layer.slope)
        elif layer.activation is Activation.SOFTMAX:
            s = cache.outputs[index]
            dz = s * (grad - np.sum(grad * s, axis=-1, keepdims=True))
        else:
            dz = grad
        grads.append(LayerGrad(weight=dz.T @ cache.inputs[index], bias=dz.sum(axis=0)))
        grad = dz @ layer.weight
    grads.reverse()
    return grads, (grad[0] if cache.squeeze else grad)
