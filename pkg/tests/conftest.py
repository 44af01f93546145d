import numpy as np
import pytest

from lwta.tensor import GradientTape


def numeric_grads(loss_fn, tensors, h=1e-5):
    """Central-difference gradients of ``loss_fn()`` (a float, read from the
    tensors' current data) with respect to each tensor, one coordinate at a
    time. Tensors must be float64 for the differences to be meaningful."""
    grads = []
    for t in tensors:
        flat = t.data.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_fn()
            flat[i] = orig - h
            fm = loss_fn()
            flat[i] = orig
            g[i] = (fp - fm) / (2.0 * h)
        grads.append(g.reshape(t.shape))
    return grads


def analytic_grads(loss_builder, tensors):
    """Tape gradients of the scalar built by ``loss_builder()``."""
    for t in tensors:
        t.zero_grad()
    with GradientTape() as tape:
        loss = loss_builder()
    tape.backward(loss)
    return [t.grad.copy() for t in tensors]


def max_rel_err(analytic, numeric):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    return float(np.max(np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8)))


def assert_grads_match(loss_builder, tensors, tol=1e-4, h=1e-5):
    """Analytic tape gradients agree with central differences for every
    tensor; ``loss_builder`` must be deterministic across calls."""
    ana = analytic_grads(loss_builder, tensors)
    num = numeric_grads(lambda: loss_builder().item(), tensors, h=h)
    for t, a, n in zip(tensors, ana, num):
        err = max_rel_err(a, n)
        assert err < tol, f"gradient mismatch for tensor of shape {t.shape}: rel err {err}"


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
