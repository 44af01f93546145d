"""Network assembly: serializable layer specs, presets, and the forward pass.

A :class:`Network` is an ordered layer sequence ending in a linear classifier
head. Specs carry everything needed to rebuild architecture from a checkpoint;
parameters live in the layer objects.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, ShapeError
from .layers import (
    ConvLayer,
    ConvLwtaLayer,
    DenseLayer,
    DenseLwtaLayer,
    conv_forward,
    conv_lwta_forward,
    dense_forward,
    dense_lwta_forward,
)

DEFAULT_TAU = 0.67


@dataclass
class DenseLwtaSpec:
    blocks: int
    units: int
    bias: bool = False
    kind: str = field(default="dense_lwta", init=False)


@dataclass
class ConvLwtaSpec:
    blocks: int
    units: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    bias: bool = False
    kind: str = field(default="conv_lwta", init=False)


@dataclass
class DenseSpec:
    width: int
    activation: str = "none"
    bias: bool = False
    kind: str = field(default="dense", init=False)


@dataclass
class ConvSpec:
    channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    activation: str = "none"
    bias: bool = False
    kind: str = field(default="conv", init=False)


SPEC_KINDS = {
    "dense_lwta": DenseLwtaSpec,
    "conv_lwta": ConvLwtaSpec,
    "dense": DenseSpec,
    "conv": ConvSpec,
}


@dataclass
class NetworkSpec:
    """Architecture descriptor: input image shape (H, L, C), class count,
    layer list (the final layer is the classifier head), and the default
    relaxation temperature."""

    input_shape: tuple
    classes: int
    layers: list
    tau: float = DEFAULT_TAU

    def to_dict(self):
        layers = [dataclasses.asdict(spec) for spec in self.layers]
        return {
            "input_shape": list(self.input_shape),
            "classes": self.classes,
            "tau": self.tau,
            "layers": layers,
        }

    @classmethod
    def from_dict(cls, d):
        layers = []
        for entry in d["layers"]:
            entry = dict(entry)
            kind = entry.pop("kind")
            if kind not in SPEC_KINDS:
                raise ParameterError(f"unknown layer kind {kind!r}")
            layers.append(SPEC_KINDS[kind](**entry))
        return cls(
            input_shape=tuple(d["input_shape"]),
            classes=int(d["classes"]),
            layers=layers,
            tau=float(d["tau"]),
        )


class Network:
    """Ordered layer sequence ending in a classifier head.

    ``forward`` returns the head logits together with the WinnerStates of
    every stochastic layer, in layer order.
    """

    def __init__(self, spec, layers):
        self.spec = spec
        self.layers = layers

    @property
    def tau(self):
        return self.spec.tau

    @property
    def is_stochastic(self):
        return any(isinstance(l, (DenseLwtaLayer, ConvLwtaLayer)) for l in self.layers)

    def params(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def num_params(self):
        return sum(int(np.prod(p.shape)) for p in self.params())

    def forward(self, x, mode="relaxed", tau=None, rng=None):
        tau = self.tau if tau is None else tau
        states = []
        for layer in self.layers:
            if isinstance(layer, DenseLwtaLayer):
                x, state = dense_lwta_forward(x, layer, mode=mode, temperature=tau, rng=rng)
                states.append(state)
            elif isinstance(layer, ConvLwtaLayer):
                x, state = conv_lwta_forward(x, layer, mode=mode, temperature=tau, rng=rng)
                states.append(state)
            elif isinstance(layer, DenseLayer):
                x = dense_forward(x, layer)
            elif isinstance(layer, ConvLayer):
                x = conv_forward(x, layer)
            else:
                raise ParameterError(f"unknown layer type {type(layer).__name__}")
        return x, states


def layer_output_shape(spec, in_shape):
    """Shape after one layer, ignoring the batch axis. Dense layers flatten."""
    if isinstance(spec, (ConvLwtaSpec, ConvSpec)):
        if len(in_shape) != 3:
            raise ShapeError("conv layer needs an image-shaped input")
        h, l, c = in_shape
        k, s, p = spec.kernel, spec.stride, spec.padding
        if (h + 2 * p - k) % s or (l + 2 * p - k) % s:
            raise ShapeError("non-integral convolution output size")
        ho = (h + 2 * p - k) // s + 1
        lo = (l + 2 * p - k) // s + 1
        ch = spec.blocks * spec.units if isinstance(spec, ConvLwtaSpec) else spec.channels
        return (ho, lo, ch)
    width = spec.blocks * spec.units if isinstance(spec, DenseLwtaSpec) else spec.width
    return (width,)


def _flat(shape):
    return int(np.prod(shape))


def spec_param_count(spec):
    """Total trainable parameter count implied by a NetworkSpec."""
    total = 0
    shape = spec.input_shape
    for layer in spec.layers:
        if isinstance(layer, DenseLwtaSpec):
            j = _flat(shape)
            total += j * layer.blocks * layer.units
            if layer.bias:
                total += layer.blocks * layer.units
        elif isinstance(layer, ConvLwtaSpec):
            c = shape[2]
            total += layer.blocks * layer.kernel * layer.kernel * c * layer.units
            if layer.bias:
                total += layer.blocks * layer.units
        elif isinstance(layer, DenseSpec):
            j = _flat(shape)
            total += j * layer.width + (layer.width if layer.bias else 0)
        elif isinstance(layer, ConvSpec):
            c = shape[2]
            total += layer.kernel * layer.kernel * c * layer.channels
            if layer.bias:
                total += layer.channels
        shape = layer_output_shape(layer, shape)
    return total


def preset_spec(name, input_shape, classes, tau=DEFAULT_TAU):
    """Named desk-scale architectures. ``relu-twin:<preset>`` resolves to the
    matched deterministic baseline (see lwta.baseline)."""
    if name == "mlp-small":
        layers = [DenseLwtaSpec(64, 2), DenseLwtaSpec(64, 2), DenseSpec(classes)]
    elif name == "cnn-small":
        # stride-2 kernel-4 downsampling keeps output sizes integral on the
        # even image sizes this preset targets
        layers = [
            ConvLwtaSpec(16, 2, kernel=3, stride=1, padding=1),
            ConvLwtaSpec(16, 2, kernel=4, stride=2, padding=1),
            DenseLwtaSpec(32, 2),
            DenseSpec(classes),
        ]
    else:
        raise ParameterError(f"unknown architecture preset {name!r}")
    return NetworkSpec(input_shape=tuple(input_shape), classes=classes, layers=layers, tau=tau)


def parse_inline_arch(text, input_shape, classes, tau=DEFAULT_TAU):
    """Parse inline architecture strings like ``dense:B64xU2,conv:B16xU2k3s1p1``.

    A linear classifier head is appended automatically.
    """
    layers = []
    for token in text.split(","):
        token = token.strip()
        if not token:
            continue
        try:
            kind, rest = token.split(":", 1)
        except ValueError:
            raise ParameterError(f"bad layer token {token!r}") from None
        fields = _parse_layer_fields(rest)
        if kind == "dense":
            layers.append(DenseLwtaSpec(fields["B"], fields["U"]))
        elif kind == "conv":
            layers.append(
                ConvLwtaSpec(
                    fields["B"],
                    fields["U"],
                    kernel=fields.get("k", 3),
                    stride=fields.get("s", 1),
                    padding=fields.get("p", 1),
                )
            )
        else:
            raise ParameterError(f"unknown layer kind {kind!r} in {token!r}")
    layers.append(DenseSpec(classes))
    return NetworkSpec(input_shape=tuple(input_shape), classes=classes, layers=layers, tau=tau)


def _parse_layer_fields(text):
    """Split e.g. 'B64xU2k3s1p1' into {'B': 64, 'U': 2, 'k': 3, 's': 1, 'p': 1}."""
    fields = {}
    key = None
    digits = ""
    for ch in text.replace("x", ""):
        if ch.isdigit():
            digits += ch
        else:
            if key is not None:
                if not digits:
                    raise ParameterError(f"bad layer fields {text!r}")
                fields[key] = int(digits)
            key = ch
            digits = ""
    if key is None or not digits:
        raise ParameterError(f"bad layer fields {text!r}")
    fields[key] = int(digits)
    if "B" not in fields or "U" not in fields:
        raise ParameterError(f"layer fields must include B and U: {text!r}")
    return fields
