"""Stochastic local winner-takes-all networks: Gumbel-softmax ELBO training,
PGD adversarial training, and a white-box attack harness."""

__version__ = "0.1.0"
