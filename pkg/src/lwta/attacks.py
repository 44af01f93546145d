"""White-box gradient attacks: FGSM, l-infinity PGD, expectation-over-
transformation gradient averaging for stochastic networks, and the
difference-of-logits-ratio loss.

Attack-time winner sampling is relaxed (so input gradients exist); success
checking predicts with hard samples. Every attack output satisfies the
l-infinity ball and input-bounds constraints exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ParameterError
from .objective import cross_entropy_loss, predict
from .tensor import GradientTape, Tensor

LOSS_KINDS = ("ce", "dlr")


@dataclass
class AttackConfig:
    """PGD/FGSM settings. Defaults follow the common 20-step evaluation
    protocol: epsilon 8/255, step size 0.007."""

    epsilon: float = 8 / 255
    step_size: float = 0.007
    num_steps: int = 20
    eot_samples: int = 1
    loss_kind: str = "ce"
    random_start: bool = True
    input_bounds: tuple = (0.0, 1.0)
    seed: int | None = None

    def validate(self):
        if self.epsilon < 0:
            raise ParameterError(f"epsilon must be non-negative, got {self.epsilon}")
        if not self.step_size > 0:
            raise ParameterError(f"step size must be positive, got {self.step_size}")
        if self.num_steps < 1:
            raise ParameterError(f"need at least one step, got {self.num_steps}")
        if self.eot_samples < 1:
            raise ParameterError(f"need at least one EoT sample, got {self.eot_samples}")
        if self.loss_kind not in LOSS_KINDS:
            raise ParameterError(f"unknown loss kind {self.loss_kind!r}")
        lo, hi = self.input_bounds
        if not lo < hi:
            raise ParameterError(f"bad input bounds {self.input_bounds}")
        if self.seed is not None and self.seed < 0:
            raise ParameterError(f"seed must be non-negative, got {self.seed}")


@dataclass
class AttackReport:
    """Evaluation outcome; accuracies are fractions in [0, 1]."""

    natural_accuracy: float
    robust_accuracy: float
    natural_correct: np.ndarray
    robust_correct: np.ndarray
    mean_linf: float
    config: AttackConfig = field(repr=False, default=None)


def dlr_loss(logits, labels):
    """Batch-mean difference-of-logits-ratio: -(z_y - max_{i!=y} z_i) divided
    by (z_(1) - z_(3) + 1e-12) with z_(k) the k-th largest logit. Shift
    invariant; undefined below three classes."""
    if logits.ndim != 2:
        raise ParameterError(f"logits must be (batch, classes), got {logits.shape}")
    classes = logits.shape[1]
    if classes < 3:
        raise ParameterError(f"DLR loss needs at least 3 classes, got {classes}")
    labels = np.asarray(labels)
    z = logits.data
    order = np.argsort(z, axis=1)[:, ::-1]
    masked = z.copy()
    masked[np.arange(z.shape[0]), labels] = -np.inf
    best_other = np.argmax(masked, axis=1)
    z_y = T.pick(logits, labels)
    z_other = T.pick(logits, best_other)
    z_first = T.pick(logits, order[:, 0])
    z_third = T.pick(logits, order[:, 2])
    denom = T.add(T.sub(z_first, z_third), Tensor(np.asarray(1e-12, dtype=z.dtype)))
    return T.mean(T.scale(T.div(T.sub(z_y, z_other), denom), -1.0))


def _attack_loss(loss_kind):
    return cross_entropy_loss if loss_kind == "ce" else dlr_loss


def eot_gradient(x, labels, network, n=1, tau=None, rng=None, loss_fn=cross_entropy_loss):
    """Input gradient of the attack loss averaged over ``n`` independent
    winner draws at the same point (expectation over transformation).
    Relaxed sampling keeps the gradient defined. Returns a numpy array."""
    if n < 1:
        raise ParameterError(f"need at least one gradient sample, got {n}")
    x_data = x.data if isinstance(x, Tensor) else np.asarray(x)
    total = np.zeros_like(x_data)
    for _ in range(n):
        xt = Tensor(x_data, requires_grad=True)
        with GradientTape() as tape:
            logits, _ = network.forward(xt, mode="relaxed", tau=tau, rng=rng)
            loss = loss_fn(logits, labels)
        tape.backward(loss)
        total += xt.grad
    return total / n


def pgd_linf(x, labels, network, cfg, rng):
    """Iterated signed-gradient ascent projected into the epsilon ball and
    the valid input range.

    Every output satisfies max|x_adv - x| <= epsilon and the input bounds
    exactly; epsilon 0 returns the input unchanged.
    """
    cfg.validate()
    x0 = np.array(x.data if isinstance(x, Tensor) else x)
    lo, hi = cfg.input_bounds
    eps = cfg.epsilon
    if eps == 0:
        return x0
    loss_fn = _attack_loss(cfg.loss_kind)
    xa = x0.copy()
    if cfg.random_start:
        xa = x0 + rng.uniform(-eps, eps, size=x0.shape).astype(x0.dtype)
        xa = np.clip(xa, lo, hi)
    for _ in range(cfg.num_steps):
        g = eot_gradient(xa, labels, network, n=cfg.eot_samples, rng=rng, loss_fn=loss_fn)
        xa = xa + cfg.step_size * np.sign(g).astype(x0.dtype)
        delta = np.clip(xa - x0, -eps, eps)
        xa = np.clip(x0 + delta, lo, hi)
    return xa


def fgsm(x, labels, network, epsilon, rng, input_bounds=(0.0, 1.0)):
    """Single signed-gradient step of size epsilon: the one-step, no-restart
    special case of PGD."""
    cfg = AttackConfig(
        epsilon=epsilon,
        step_size=max(epsilon, np.finfo(np.float32).tiny),
        num_steps=1,
        eot_samples=1,
        loss_kind="ce",
        random_start=False,
        input_bounds=input_bounds,
    )
    return pgd_linf(x, labels, network, cfg, rng)


def evaluate_robustness(dataset, network, cfg, prediction_samples=1, rng=None, majority_votes=1):
    """Natural and robust accuracy of ``network`` on ``dataset`` under PGD.

    Clean and adversarial predictions use hard winner samples from identical
    seed streams, so epsilon 0 reproduces the natural accuracy. With
    ``majority_votes`` > 1 each example's prediction is the majority class
    over that many repeated stochastic predictions.
    """
    if len(dataset.labels) == 0:
        raise ParameterError("cannot evaluate an empty dataset")
    cfg.validate()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    seeds = rng.integers(0, 2**63 - 1, size=2)
    x = dataset.images.data
    labels = np.asarray(dataset.labels)

    natural = _predicted_classes(x, network, prediction_samples, seeds[1], majority_votes)
    x_adv = pgd_linf(x, labels, network, cfg, np.random.default_rng(seeds[0]))
    robust = _predicted_classes(x_adv, network, prediction_samples, seeds[1], majority_votes)

    natural_correct = natural == labels
    robust_correct = robust == labels
    return AttackReport(
        natural_accuracy=float(natural_correct.mean()),
        robust_accuracy=float(robust_correct.mean()),
        natural_correct=natural_correct,
        robust_correct=robust_correct,
        mean_linf=float(np.abs(x_adv - x).max(axis=tuple(range(1, x.ndim))).mean()),
        config=cfg,
    )


def _predicted_classes(x, network, prediction_samples, seed, majority_votes):
    votes = []
    pred_rng = np.random.default_rng(seed)
    for _ in range(majority_votes):
        probs, _ = predict(x, network, num_samples=prediction_samples, rng=pred_rng)
        votes.append(np.argmax(probs, axis=1))
    votes = np.stack(votes)
    if majority_votes == 1:
        return votes[0]
    counts = np.apply_along_axis(np.bincount, 0, votes, minlength=int(votes.max()) + 1)
    return np.argmax(counts, axis=0)
