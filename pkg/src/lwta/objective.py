"""Training objective and prediction: cross-entropy plus a KL regularizer
between the winner posteriors and a uniform categorical prior, and
Monte-Carlo averaging of stochastic predictions.

During relaxed training the KL term is computed in closed form on the
current posteriors (the exact expectation the single-sample estimator
targets); the single-sample estimator over hard draws is kept for fidelity
checks and an optional literal mode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, ParameterError
from .tensor import Tensor


@dataclass
class Prior:
    """Symmetric categorical prior: every one of the U units in a block is
    equally likely a priori."""

    units: int

    def __post_init__(self):
        if self.units < 1:
            raise ParameterError(f"prior needs at least one unit, got {self.units}")

    @property
    def log_prob(self):
        return -float(np.log(self.units))


@dataclass
class ElboBreakdown:
    """Loss components of one stochastic forward pass. All three totals are
    tape tensors; ``negative_elbo == cross_entropy + kl_weight * kl_total``
    exactly as computed."""

    cross_entropy: Tensor
    kl_total: Tensor
    negative_elbo: Tensor
    kl_weight: float


def cross_entropy_loss(logits, labels):
    """Batch-mean negative log-likelihood of the labels under stable
    log-softmax of the logits."""
    if logits.ndim != 2:
        raise ContractError(f"logits must be (batch, classes), got {logits.shape}")
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ContractError(f"labels must be shape ({logits.shape[0]},), got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ContractError("label out of range")
    logp = T.log_softmax(logits, axis=1)
    return T.scale(T.mean(T.pick(logp, labels)), -1.0)


def kl_single_sample(probs, sample, prior=None):
    """Single-sample KL estimate log q(sample) - log p(sample) for hard
    one-hot samples, summed over blocks (and positions), batch-averaged."""
    u = probs.shape[-1]
    prior = prior or Prior(u)
    n = probs.shape[0]
    winner_q = T.tsum(T.mul(probs, sample), axis=-1)  # (..., B) or (..., H', L', B)
    if np.any(winner_q.data <= 0):
        raise ContractError("sample selects a zero-probability unit")
    per_example = T.reshape(T.log(winner_q), (n, -1))
    blocks = per_example.shape[1]
    log_q = T.mean(T.tsum(per_example, axis=1))
    return T.add(log_q, Tensor(np.asarray(-blocks * prior.log_prob, dtype=log_q.dtype)))


def kl_analytic(probs, prior=None):
    """Closed-form KL to the uniform prior: sum_u q_u log(q_u * U) per block,
    summed over blocks (and positions), batch-averaged. Zero probabilities
    contribute zero (limit convention)."""
    u = probs.shape[-1]
    if prior is not None and prior.units != u:
        raise ParameterError(f"prior has {prior.units} units but probs have {u}")
    n = probs.shape[0]
    terms = T.xlogy(probs, T.scale(probs, float(u)))
    return T.mean(T.tsum(T.reshape(terms, (n, -1)), axis=1))


def elbo_loss(x, labels, network, mode="relaxed", tau=None, rng=None, kl_weight=1.0, kl_mode="analytic"):
    """One stochastic forward pass assembled into the training objective:
    cross-entropy plus ``kl_weight`` times the per-layer KL sum. A single
    reparameterized sample is drawn per latent.

    ``kl_mode='single_sample'`` evaluates the literal one-sample estimator
    instead of the closed form; it requires hard samples.
    """
    if kl_mode not in ("analytic", "single_sample"):
        raise ParameterError(f"unknown kl_mode {kl_mode!r}")
    if kl_mode == "single_sample" and mode == "relaxed":
        raise ParameterError("single-sample KL needs hard samples; use mode='hard' or 'argmax'")
    x = x if isinstance(x, Tensor) else Tensor(x)
    logits, states = network.forward(x, mode=mode, tau=tau, rng=rng)
    ce = cross_entropy_loss(logits, labels)
    kl = Tensor(np.zeros((), dtype=ce.dtype))
    for state in states:
        if kl_mode == "analytic":
            kl = T.add(kl, kl_analytic(state.probs))
        else:
            kl = T.add(kl, kl_single_sample(state.probs, state.sample))
    nelbo = T.add(ce, T.scale(kl, float(kl_weight)))
    return ElboBreakdown(cross_entropy=ce, kl_total=kl, negative_elbo=nelbo, kl_weight=float(kl_weight))


def predict(x, network, num_samples=1, rng=None, mode="hard", average="logits"):
    """Monte-Carlo prediction: draw ``num_samples`` winner configurations,
    average the resulting logit vectors, and apply softmax once.

    Returns (probs, logit_samples) as numpy arrays of shapes (N, classes)
    and (num_samples, N, classes). ``average='probs'`` instead averages
    per-sample softmax outputs (ablation option).
    """
    if num_samples < 1:
        raise ParameterError(f"need at least one prediction sample, got {num_samples}")
    if average not in ("logits", "probs"):
        raise ParameterError(f"unknown averaging {average!r}")
    if rng is None and network.is_stochastic and mode != "argmax":
        raise ParameterError("stochastic prediction needs an rng")
    x = x if isinstance(x, Tensor) else Tensor(x)
    samples = []
    for _ in range(num_samples):
        logits, _ = network.forward(x, mode=mode, rng=rng)
        samples.append(logits.data)
    samples = np.stack(samples)
    if average == "logits":
        probs = _softmax_np(samples.mean(axis=0))
    else:
        probs = np.stack([_softmax_np(s) for s in samples]).mean(axis=0)
    return probs, samples


def _softmax_np(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)
