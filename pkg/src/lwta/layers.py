"""Stochastic local winner-takes-all layers, dense and convolutional.

A layer groups units (or feature maps) into blocks of U competitors. Linear
responses are computed per unit; a data-driven categorical over each block,
softmax of the responses, selects one winner whose linear response passes
through while the rest output zero. Winner selection is sampled per example
(and per spatial position for conv layers), so repeated forward passes route
the same input through different subnetworks.

Sampling modes:

* ``relaxed``: Gumbel-softmax sample on the simplex; differentiable with
  respect to the block logits, used during training and attack gradients.
* ``hard``: exact one-hot categorical draw, used at prediction time.
* ``argmax``: deterministic one-hot at the highest probability; debugging
  and ablation only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ParameterError, ShapeError
from .tensor import Tensor

MODES = ("relaxed", "hard", "argmax")

GUMBEL_EPS = 1e-10  # uniform draws clamped away from {0,1} before double log


@dataclass
class WinnerState:
    """Winner posterior and drawn indicators for one layer's forward pass.

    ``probs`` and ``sample`` share a trailing U axis: dense layers produce
    (N, B, U), conv layers (N, H', L', B, U). In hard/argmax mode the sample
    is exactly one-hot per block; in relaxed mode it is a simplex point.
    """

    probs: Tensor
    sample: Tensor
    mode: str

    @property
    def num_units(self):
        return self.probs.shape[-1]


@dataclass
class DenseLwtaLayer:
    """Fully connected LWTA layer; weights (J, B, U), optional bias (B, U)."""

    weights: Tensor
    bias: Tensor | None = None

    def __post_init__(self):
        if self.weights.ndim != 3:
            raise ShapeError(f"dense LWTA weights must be (J, B, U), got {self.weights.shape}")

    @property
    def input_dim(self):
        return self.weights.shape[0]

    @property
    def num_blocks(self):
        return self.weights.shape[1]

    @property
    def block_size(self):
        return self.weights.shape[2]

    def params(self):
        return [self.weights] if self.bias is None else [self.weights, self.bias]


@dataclass
class ConvLwtaLayer:
    """Convolutional LWTA layer; weights (B, h, l, C, U): B kernel blocks of
    U competing feature maps each. Competition is position-wise."""

    weights: Tensor
    stride: int = 1
    padding: int = 0
    bias: Tensor | None = None

    def __post_init__(self):
        if self.weights.ndim != 5:
            raise ShapeError(f"conv LWTA weights must be (B, h, l, C, U), got {self.weights.shape}")

    @property
    def num_blocks(self):
        return self.weights.shape[0]

    @property
    def block_size(self):
        return self.weights.shape[4]

    def params(self):
        return [self.weights] if self.bias is None else [self.weights, self.bias]


@dataclass
class DenseLayer:
    """Plain linear layer (classifier heads, ReLU baselines)."""

    weights: Tensor  # (J, K)
    bias: Tensor | None = None
    activation: str = "none"  # none | relu

    def params(self):
        return [self.weights] if self.bias is None else [self.weights, self.bias]


@dataclass
class ConvLayer:
    """Plain convolution layer for ReLU baselines; weights (h, l, C, F)."""

    weights: Tensor
    stride: int = 1
    padding: int = 0
    bias: Tensor | None = None
    activation: str = "none"

    def params(self):
        return [self.weights] if self.bias is None else [self.weights, self.bias]


def _check_mode(mode, temperature, rng):
    if mode not in MODES:
        raise ParameterError(f"unknown sampling mode {mode!r}")
    if mode == "relaxed" and not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    if mode in ("relaxed", "hard") and rng is None:
        raise ParameterError(f"mode {mode!r} needs an rng")


def sample_gumbel_softmax(log_probs, temperature, rng):
    """Reparameterized draw from the relaxed categorical over the last axis:
    softmax((log_probs + g)/temperature) with g standard Gumbel noise.
    Differentiable with respect to ``log_probs``."""
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    v = rng.random(log_probs.shape)
    v = np.clip(v, GUMBEL_EPS, 1.0 - GUMBEL_EPS)
    g = -np.log(-np.log(v))
    noisy = T.add(log_probs, Tensor(g.astype(log_probs.dtype)))
    return T.softmax(T.scale(noisy, 1.0 / temperature), axis=-1)


def sample_categorical_hard(probs, rng):
    """Exact one-hot draw per block via inverse CDF on a single uniform.

    Cumulative sums run left to right; a draw exactly on a cumulative edge
    falls into the following interval, so zero-probability units are never
    selected."""
    p = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    u = p.shape[-1]
    flat = p.reshape(-1, u)
    sums = flat.sum(axis=-1)
    if not np.allclose(sums, 1.0, atol=1e-3):
        raise ParameterError("probs rows must sum to 1")
    cum = np.cumsum(flat, axis=-1)
    draws = rng.random(flat.shape[0])
    winners = (cum <= draws[:, None]).sum(axis=-1)
    winners = np.minimum(winners, u - 1)  # guard float shortfall in the last edge
    onehot = np.zeros_like(flat)
    onehot[np.arange(flat.shape[0]), winners] = 1.0
    return Tensor(onehot.reshape(p.shape))


def winner_mask_argmax(probs):
    """Deterministic one-hot at the per-block argmax; ties break low."""
    p = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    winners = np.argmax(p, axis=-1)
    onehot = np.zeros_like(p, dtype=p.dtype)
    np.put_along_axis(onehot, winners[..., None], 1.0, axis=-1)
    return Tensor(onehot)


def _draw_sample(responses, mode, temperature, rng):
    """Winner probabilities and sample for blockwise responses (..., B, U)."""
    probs = T.softmax(responses, axis=-1)
    if mode == "relaxed":
        sample = sample_gumbel_softmax(T.log_softmax(responses, axis=-1), temperature, rng)
    elif mode == "hard":
        sample = sample_categorical_hard(probs, rng)
    else:
        sample = winner_mask_argmax(probs)
    return probs, sample


def dense_lwta_forward(x, layer, mode="relaxed", temperature=0.67, rng=None):
    """Forward pass of a dense LWTA layer.

    Returns (y, state) with y of shape (N, B*U): per block, the sampled
    indicator gates the linear response elementwise. 4-D image input is
    flattened row-major.
    """
    _check_mode(mode, temperature, rng)
    if x.ndim == 4:
        x = T.reshape(x, (x.shape[0], -1))
    if x.ndim != 2:
        raise ShapeError(f"dense input must be 2-D (or 4-D image), got {x.shape}")
    j, b, u = layer.weights.shape
    if x.shape[1] != j:
        raise ShapeError(f"input width {x.shape[1]} does not match layer input dim {j}")
    h = T.matmul(x, T.reshape(layer.weights, (j, b * u)))
    if layer.bias is not None:
        h = T.add(h, T.reshape(layer.bias, (b * u,)))
    h = T.reshape(h, (x.shape[0], b, u))
    probs, sample = _draw_sample(h, mode, temperature, rng)
    y = T.reshape(T.mul(sample, h), (x.shape[0], b * u))
    return y, WinnerState(probs=probs, sample=sample, mode=mode)


def conv_lwta_forward(x, layer, mode="relaxed", temperature=0.67, rng=None):
    """Forward pass of a convolutional LWTA layer.

    Each block's U feature maps are cross-correlated with the input; at every
    output position a winner is drawn among the U maps from the softmax of
    their responses. Returns (y, state) with y of shape (N, H', L', B*U),
    channel (b, u) stored at index b*U + u.
    """
    _check_mode(mode, temperature, rng)
    if x.ndim != 4:
        raise ShapeError(f"conv input must be 4-D NHWC, got {x.shape}")
    b, kh, kl, c, u = layer.weights.shape
    kernel = T.reshape(T.transpose(layer.weights, (1, 2, 3, 0, 4)), (kh, kl, c, b * u))
    h = T.conv2d(x, kernel, stride=layer.stride, padding=layer.padding)
    if layer.bias is not None:
        h = T.add(h, T.reshape(layer.bias, (b * u,)))
    n, ho, lo, _ = h.shape
    h = T.reshape(h, (n, ho, lo, b, u))
    probs, sample = _draw_sample(h, mode, temperature, rng)
    y = T.reshape(T.mul(sample, h), (n, ho, lo, b * u))
    return y, WinnerState(probs=probs, sample=sample, mode=mode)


def dense_forward(x, layer):
    """Plain dense layer; flattens image input like its LWTA counterpart."""
    if x.ndim == 4:
        x = T.reshape(x, (x.shape[0], -1))
    if x.shape[1] != layer.weights.shape[0]:
        raise ShapeError(
            f"input width {x.shape[1]} does not match layer input dim {layer.weights.shape[0]}"
        )
    y = T.matmul(x, layer.weights)
    if layer.bias is not None:
        y = T.add(y, layer.bias)
    if layer.activation == "relu":
        y = T.relu(y)
    return y


def conv_forward(x, layer):
    y = T.conv2d(x, layer.weights, stride=layer.stride, padding=layer.padding)
    if layer.bias is not None:
        y = T.add(y, layer.bias)
    if layer.activation == "relu":
        y = T.relu(y)
    return y
