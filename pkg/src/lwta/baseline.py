"""Deterministic ReLU counterparts with identical parameter budgets.

Each LWTA layer maps to a conventional layer of the same weight shape
(J x B x U dense weights become J x (B*U); a conv block's B*U competing maps
become B*U output channels), so a twin differs from its stochastic original
in exactly one factor: the activation.
"""

from __future__ import annotations

from .network import ConvLwtaSpec, ConvSpec, DenseLwtaSpec, DenseSpec, NetworkSpec
from .training import init_weights


def relu_twin_spec(spec):
    """The matched deterministic architecture for an LWTA NetworkSpec."""
    layers = []
    for layer in spec.layers:
        if isinstance(layer, DenseLwtaSpec):
            layers.append(DenseSpec(layer.blocks * layer.units, activation="relu", bias=layer.bias))
        elif isinstance(layer, ConvLwtaSpec):
            layers.append(
                ConvSpec(
                    layer.blocks * layer.units,
                    kernel=layer.kernel,
                    stride=layer.stride,
                    padding=layer.padding,
                    activation="relu",
                    bias=layer.bias,
                )
            )
        else:
            layers.append(layer)
    return NetworkSpec(
        input_shape=spec.input_shape, classes=spec.classes, layers=layers, tau=spec.tau
    )


def build_relu_twin(spec, rng, dtype=None):
    """Initialized twin network; trainable by the same loop with the KL
    weight forced to zero (it has no latent winners)."""
    kwargs = {} if dtype is None else {"dtype": dtype}
    return init_weights(relu_twin_spec(spec), rng, **kwargs)
