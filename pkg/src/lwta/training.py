"""PGD-based adversarial training: SGD with momentum over the negative ELBO
of attacked inputs, a step-halving learning-rate schedule, and optional
temperature annealing.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import model_io
from .attacks import AttackConfig, evaluate_robustness, pgd_linf
from .data import BatchIterator
from .errors import DivergenceError, NonFiniteError, ParameterError
from .network import (
    ConvLwtaSpec,
    ConvSpec,
    DenseLwtaSpec,
    DenseSpec,
    Network,
    layer_output_shape,
)
from .layers import ConvLayer, ConvLwtaLayer, DenseLayer, DenseLwtaLayer
from .objective import elbo_loss
from .tensor import DEFAULT_DTYPE, GradientTape, Tensor


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 128
    lr0: float = 0.1
    lr_halving_start_epoch: int = 75
    momentum: float = 0.9
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(num_steps=10))
    tau0: float = 0.67
    tau_min: float = 0.67
    tau_anneal_rate: float = 0.0
    kl_weight: float | None = None  # None -> 1 / num_training_examples
    kl_mode: str = "analytic"
    seed: int = 0
    checkpoint_every: int = 1
    checkpoint_path: str | None = None
    eval_size: int = 256
    eval_prediction_samples: int = 1

    def validate(self):
        if self.epochs < 1:
            raise ParameterError(f"need at least one epoch, got {self.epochs}")
        if self.batch_size < 1:
            raise ParameterError(f"need a positive batch size, got {self.batch_size}")
        if self.lr0 < 0:
            raise ParameterError(f"learning rate must be non-negative, got {self.lr0}")
        if self.seed < 0:
            raise ParameterError(f"seed must be non-negative, got {self.seed}")
        self.attack.validate()


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    tau: float
    ce: float
    kl: float
    nelbo: float
    nat_acc: float
    rob_acc: float
    seconds: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)

    CSV_HEADER = "epoch,lr,tau,ce,kl,nelbo,nat_acc,rob_acc,seconds"

    def append(self, record):
        self.records.append(record)

    def to_csv(self):
        lines = [self.CSV_HEADER]
        for r in self.records:
            lines.append(
                f"{r.epoch},{r.lr!r},{r.tau!r},{r.ce!r},{r.kl!r},{r.nelbo!r},"
                f"{r.nat_acc!r},{r.rob_acc!r},{r.seconds!r}"
            )
        return "\n".join(lines) + "\n"


def lr_schedule(epoch, cfg):
    """lr0 until the halving start epoch, then halved again every epoch."""
    if epoch < 0:
        raise ParameterError(f"epoch must be non-negative, got {epoch}")
    if epoch < cfg.lr_halving_start_epoch:
        return cfg.lr0
    return cfg.lr0 / 2.0 ** (epoch - cfg.lr_halving_start_epoch + 1)


def tau_schedule(epoch, cfg):
    """Exponentially annealed temperature, constant when the rate is zero."""
    return max(cfg.tau_min, cfg.tau0 * float(np.exp(-cfg.tau_anneal_rate * epoch)))


def init_weights(network_spec, rng, kind="fanin-uniform", dtype=DEFAULT_DTYPE):
    """Build a network from its spec with Uniform(-s, s) weights,
    s = sqrt(6 / fan_in), where fan_in counts the inputs feeding one
    competing unit (dense: J, conv: h*l*C). ``kind='zeros'`` zero-fills
    instead, which makes every winner distribution uniform."""
    if kind not in ("fanin-uniform", "zeros"):
        raise ParameterError(f"unknown init kind {kind!r}")

    def draw(shape, fan_in):
        if kind == "zeros":
            return Tensor(np.zeros(shape, dtype=dtype))
        s = np.sqrt(6.0 / fan_in)
        return Tensor(rng.uniform(-s, s, size=shape).astype(dtype), requires_grad=True)

    layers = []
    shape = tuple(network_spec.input_shape)
    for spec in network_spec.layers:
        if isinstance(spec, DenseLwtaSpec):
            j = int(np.prod(shape))
            w = draw((j, spec.blocks, spec.units), j)
            b = Tensor(np.zeros((spec.blocks, spec.units), dtype=dtype), requires_grad=True) if spec.bias else None
            layers.append(DenseLwtaLayer(weights=w, bias=b))
        elif isinstance(spec, ConvLwtaSpec):
            c = shape[2]
            fan_in = spec.kernel * spec.kernel * c
            w = draw((spec.blocks, spec.kernel, spec.kernel, c, spec.units), fan_in)
            b = Tensor(np.zeros((spec.blocks, spec.units), dtype=dtype), requires_grad=True) if spec.bias else None
            layers.append(ConvLwtaLayer(weights=w, stride=spec.stride, padding=spec.padding, bias=b))
        elif isinstance(spec, DenseSpec):
            j = int(np.prod(shape))
            w = draw((j, spec.width), j)
            b = Tensor(np.zeros((spec.width,), dtype=dtype), requires_grad=True) if spec.bias else None
            layers.append(DenseLayer(weights=w, bias=b, activation=spec.activation))
        elif isinstance(spec, ConvSpec):
            c = shape[2]
            fan_in = spec.kernel * spec.kernel * c
            w = draw((spec.kernel, spec.kernel, c, spec.channels), fan_in)
            b = Tensor(np.zeros((spec.channels,), dtype=dtype), requires_grad=True) if spec.bias else None
            layers.append(ConvLayer(weights=w, stride=spec.stride, padding=spec.padding, bias=b, activation=spec.activation))
        else:
            raise ParameterError(f"unknown layer spec {type(spec).__name__}")
        shape = layer_output_shape(spec, shape)
    if kind == "zeros":
        for layer in layers:
            for p in layer.params():
                p.requires_grad = True
    return Network(network_spec, layers)


class SgdMomentum:
    """Classic momentum SGD: v <- m*v + g; w <- w - lr*v."""

    def __init__(self, params, momentum=0.9):
        self.params = list(params)
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr):
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.data = p.data - lr * v

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def adversarial_train(network, dataset, cfg, rng=None, eval_dataset=None):
    """PGD adversarial training loop.

    Per minibatch: attack the current network with cfg.attack, compute the
    ELBO objective on the perturbed batch, step momentum SGD. Per epoch:
    record losses, learning rate, temperature, and natural/robust accuracy on
    an evaluation subsample. Aborts with DivergenceError if the objective
    goes non-finite.
    """
    cfg.validate()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    n_train = len(dataset.labels)
    if n_train == 0:
        raise ParameterError("cannot train on an empty dataset")
    kl_weight = cfg.kl_weight if cfg.kl_weight is not None else 1.0 / n_train
    optimizer = SgdMomentum(network.params(), momentum=cfg.momentum)
    batches = BatchIterator(dataset, cfg.batch_size, seed=cfg.seed)
    history = TrainHistory()
    eval_data = (eval_dataset or dataset).subset(range(min(cfg.eval_size, len((eval_dataset or dataset).labels))))

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_schedule(epoch, cfg)
        tau = tau_schedule(epoch, cfg)
        ce_sum = kl_sum = nelbo_sum = 0.0
        n_batches = 0
        for x, labels in batches.epoch(epoch):
            try:
                if cfg.attack.epsilon > 0:
                    x_adv = pgd_linf(x, labels, network, cfg.attack, rng)
                else:
                    x_adv = x.data
                with GradientTape() as tape:
                    breakdown = elbo_loss(
                        x_adv, labels, network,
                        mode="relaxed" if cfg.kl_mode == "analytic" else "hard",
                        tau=tau, rng=rng, kl_weight=kl_weight, kl_mode=cfg.kl_mode,
                    )
                    optimizer.zero_grad()
                    tape.backward(breakdown.negative_elbo)
            except NonFiniteError as e:
                raise DivergenceError(
                    f"objective became non-finite at epoch {epoch}, batch {n_batches}: {e}"
                ) from e
            optimizer.step(lr)
            ce_sum += breakdown.cross_entropy.item()
            kl_sum += breakdown.kl_total.item()
            nelbo_sum += breakdown.negative_elbo.item()
            n_batches += 1
        nat_acc, rob_acc = _epoch_eval(network, eval_data, cfg, tau, epoch)
        history.append(
            EpochRecord(
                epoch=epoch,
                lr=lr,
                tau=tau,
                ce=ce_sum / n_batches,
                kl=kl_sum / n_batches,
                nelbo=nelbo_sum / n_batches,
                nat_acc=nat_acc,
                rob_acc=rob_acc,
                seconds=time.perf_counter() - t0,
            )
        )
        if cfg.checkpoint_path is not None and (epoch + 1) % cfg.checkpoint_every == 0:
            model_io.save(network, cfg.checkpoint_path)
    return network, history


def _epoch_eval(network, eval_data, cfg, tau, epoch):
    report = evaluate_robustness(
        eval_data,
        network,
        cfg.attack,
        prediction_samples=cfg.eval_prediction_samples,
        rng=np.random.default_rng([cfg.seed, epoch]),
    )
    return report.natural_accuracy, report.robust_accuracy
