"""Acceptance suite: one test per criterion, each printing a PASS line and
enforcing its stated tolerance and runtime budget.

Statistical criteria run under fixed seeds, so outcomes are deterministic;
the directional robustness comparison (criterion 7) asserts on the results
file produced at build time by scripts/run_robustness_comparison.py.
"""

import json
import time
from pathlib import Path

import numpy as np
import scipy.stats

from lwta import model_io
from lwta.attacks import AttackConfig, eot_gradient, fgsm, pgd_linf
from lwta.data import load_idx, save_idx, synth_blobs
from lwta.errors import LwtaError
from lwta.layers import sample_categorical_hard, sample_gumbel_softmax
from lwta.network import (
    ConvLwtaSpec,
    ConvSpec,
    DenseLwtaSpec,
    DenseSpec,
    NetworkSpec,
)
from lwta.objective import (
    elbo_loss,
    kl_analytic,
    kl_single_sample,
    predict,
)
from lwta.tensor import GradientTape, Tensor
from lwta.training import TrainConfig, adversarial_train, init_weights

from conftest import assert_grads_match

RESULTS_FILE = Path(__file__).resolve().parent.parent / "results" / "robustness_comparison.json"


class Budget:
    """Wall-clock guard for a criterion's stated runtime bound."""

    def __init__(self, seconds):
        self.limit = seconds
        self.start = time.perf_counter()

    def check(self):
        elapsed = time.perf_counter() - self.start
        assert elapsed < self.limit, f"criterion exceeded its {self.limit}s budget: {elapsed:.1f}s"
        return elapsed


def announce(number, detail):
    print(f"\nCRITERION {number:2d} PASS - {detail}")


def test_criterion_01_elbo_gradients_match_finite_differences():
    budget = Budget(10)
    spec = NetworkSpec(
        (6, 1, 1), 4,
        [DenseLwtaSpec(3, 2), DenseLwtaSpec(3, 2), DenseSpec(4)],
    )
    net = init_weights(spec, np.random.default_rng(11), dtype=np.float64)
    rng = np.random.default_rng(0)
    x = rng.random((5, 6, 1, 1))
    labels = rng.integers(0, 4, size=5)

    def build():
        # frozen noise: the rng is recreated per evaluation
        return elbo_loss(
            x, labels, net, mode="relaxed", tau=0.67,
            rng=np.random.default_rng(321), kl_weight=0.5,
        ).negative_elbo

    assert_grads_match(build, net.params(), tol=1e-4, h=1e-5)
    elapsed = budget.check()
    announce(1, f"ELBO weight gradients vs central differences, rel err < 1e-4 ({elapsed:.1f}s)")


def test_criterion_02_single_unit_networks_degenerate_to_deterministic_twins():
    budget = Budget(10)
    rng = np.random.default_rng(5)

    # dense pair: identical weights, U=1 LWTA vs plain linear stack
    dense_spec = NetworkSpec(
        (6, 1, 1), 3, [DenseLwtaSpec(5, 1), DenseLwtaSpec(4, 1), DenseSpec(3)]
    )
    lwta_dense = init_weights(dense_spec, np.random.default_rng(1), dtype=np.float64)
    plain_spec = NetworkSpec(
        (6, 1, 1), 3,
        [DenseSpec(5), DenseSpec(4), DenseSpec(3)],
    )
    plain_dense = init_weights(plain_spec, np.random.default_rng(2), dtype=np.float64)
    for lw, pl in zip(lwta_dense.layers[:-1], plain_dense.layers[:-1]):
        pl.weights.data = lw.weights.data.reshape(pl.weights.shape).copy()
    plain_dense.layers[-1].weights.data = lwta_dense.layers[-1].weights.data.copy()

    # conv pair
    conv_spec = NetworkSpec(
        (6, 6, 1), 3, [ConvLwtaSpec(4, 1, kernel=3, stride=1, padding=1), DenseSpec(3)]
    )
    lwta_conv = init_weights(conv_spec, np.random.default_rng(3), dtype=np.float64)
    plain_conv_spec = NetworkSpec(
        (6, 6, 1), 3, [ConvSpec(4, kernel=3, stride=1, padding=1), DenseSpec(3)]
    )
    plain_conv = init_weights(plain_conv_spec, np.random.default_rng(4), dtype=np.float64)
    plain_conv.layers[0].weights.data = (
        lwta_conv.layers[0].weights.data.transpose(1, 2, 3, 0, 4).reshape(3, 3, 1, 4).copy()
    )
    plain_conv.layers[-1].weights.data = lwta_conv.layers[-1].weights.data.copy()

    def plain_aligned_grads(net):
        out = []
        for layer, p in zip(net.layers, net.params()):
            g = p.grad
            if g.ndim == 5:  # conv LWTA (B,h,l,C,U) -> plain kernel layout (h,l,C,B*U)
                g = g.transpose(1, 2, 3, 0, 4)
            out.append(g.reshape(-1))
        return out

    pairs = [
        (lwta_dense, plain_dense, (6, 1, 1)),
        (lwta_conv, plain_conv, (6, 6, 1)),
    ]
    for lwta_net, plain_net, shape in pairs:
        for trial in range(50):
            x = rng.random((2, *shape))
            labels = rng.integers(0, 3, size=2)
            out_l, _ = lwta_net.forward(Tensor(x), mode="hard", rng=np.random.default_rng(trial))
            out_p, _ = plain_net.forward(Tensor(x))
            np.testing.assert_allclose(out_l.data, out_p.data, atol=1e-6)

            grads, losses = [], []
            for net in (lwta_net, plain_net):
                for p in net.params():
                    p.zero_grad()
                with GradientTape() as tape:
                    bd = elbo_loss(x, labels, net, mode="relaxed",
                                   rng=np.random.default_rng(trial), kl_weight=1.0)
                tape.backward(bd.negative_elbo)
                grads.append(plain_aligned_grads(net))
                losses.append(bd.negative_elbo.item())
                if net is lwta_net:
                    assert bd.kl_total.item() == 0.0
            np.testing.assert_allclose(losses[0], losses[1], atol=1e-6)
            for ga, gb in zip(grads[0], grads[1]):
                np.testing.assert_allclose(ga, gb, atol=1e-6)
    elapsed = budget.check()
    announce(2, f"U=1 dense and conv networks match their deterministic twins, tol 1e-6, 100 inputs ({elapsed:.1f}s)")


def test_criterion_03_sampling_fidelity():
    budget = Budget(30)
    master = np.random.default_rng(20250808)
    vectors = 0
    for u, repeats in ((2, 7), (4, 7), (8, 6)):
        for _ in range(repeats):
            vectors += 1
            logits = master.normal(0, 1.5, size=u)
            probs = np.exp(logits - logits.max())
            probs /= probs.sum()
            tiled = Tensor(np.tile(probs, (100_000, 1)), dtype=np.float64)
            sample = sample_categorical_hard(tiled, master)
            counts = sample.data.sum(axis=0)
            _, p_value = scipy.stats.chisquare(counts, probs * 100_000)
            assert p_value > 0.01, f"chi-square p={p_value} for U={u}"
    assert vectors == 20

    # relaxed samples at tau=0.01 are one-hot at argmax(log pi + g) whenever
    # the perturbed logits are distinct (winner margin >= 0.1)
    class FrozenNoise:
        def __init__(self, values):
            self.values = values

        def random(self, shape):
            return self.values

    gen = np.random.default_rng(99)
    trials = 0
    while trials < 1000:
        u = int(gen.integers(2, 9))
        logits = gen.normal(0, 2, size=u)
        log_probs = logits - (np.log(np.exp(logits - logits.max()).sum()) + logits.max())
        v = np.clip(gen.random(u), 1e-10, 1 - 1e-10)
        perturbed = log_probs - np.log(-np.log(v))
        top2 = np.sort(perturbed)[-2:]
        if top2[1] - top2[0] < 0.1:
            continue
        out = sample_gumbel_softmax(Tensor(log_probs, dtype=np.float64), 0.01, FrozenNoise(v))
        assert np.argmax(out.data) == np.argmax(perturbed)
        assert out.data.max() > 0.999
        trials += 1
    elapsed = budget.check()
    announce(3, f"hard draws pass chi-square at 100k for 20 logit vectors; tau=0.01 relaxed draws are one-hot ({elapsed:.1f}s)")


def test_criterion_04_kl_estimator_consistency():
    budget = Budget(30)
    gen = np.random.default_rng(116)
    for _ in range(50):
        u = int(gen.integers(2, 9))
        logits = gen.normal(0, 3, size=u)
        probs = np.exp(logits - logits.max())
        probs /= probs.sum()
        tiled = Tensor(np.tile(probs, (100_000, 1, 1)), dtype=np.float64)
        sample = sample_categorical_hard(tiled, gen)
        mc = kl_single_sample(tiled, sample).item()
        exact = kl_analytic(Tensor(probs.reshape(1, 1, u), dtype=np.float64)).item()
        assert abs(mc - exact) <= max(0.01 * exact, 1e-3)

    for u in (2, 3, 4, 5, 8):
        uniform = Tensor(np.full((1, 1, u), 1.0 / u), dtype=np.float64)
        assert kl_analytic(uniform).item() == 0.0
    for u in (2, 4, 8):
        degenerate = np.zeros((1, 1, u))
        degenerate[0, 0, 0] = 1.0
        assert kl_analytic(Tensor(degenerate, dtype=np.float64)).item() == float(np.log(float(u)))
    elapsed = budget.check()
    announce(4, f"single-sample KL matches closed form within max(1%, 1e-3) for 50 distributions; exact limits hold ({elapsed:.1f}s)")


def test_criterion_05_attack_constraint_fuzz():
    budget = Budget(60)
    spec = NetworkSpec((6, 1, 1), 3, [DenseLwtaSpec(3, 2), DenseSpec(3)])
    net = init_weights(spec, np.random.default_rng(50), dtype=np.float64)
    gen = np.random.default_rng(5150)
    for trial in range(1000):
        n = int(gen.integers(1, 3))
        x = gen.random((n, 6, 1, 1))
        labels = gen.integers(0, 3, size=n)
        eps = float(gen.choice([0.0, gen.uniform(0.001, 0.3)]))
        cfg = AttackConfig(
            epsilon=eps,
            step_size=float(gen.uniform(0.001, 0.2)),
            num_steps=int(gen.integers(1, 4)),
            eot_samples=int(gen.integers(1, 3)),
            loss_kind="dlr" if trial % 7 == 0 else "ce",
            random_start=bool(gen.integers(0, 2)),
        )
        if trial % 3 == 0:
            adv = fgsm(x, labels, net, eps, gen)
        else:
            adv = pgd_linf(x, labels, net, cfg, gen)
        assert np.abs(adv - x).max() <= eps + 1e-6
        assert adv.min() >= 0.0 and adv.max() <= 1.0
        if eps == 0.0:
            np.testing.assert_array_equal(adv, x)
    elapsed = budget.check()
    announce(5, f"1000 fuzzed attacks stay inside the epsilon ball and input bounds; eps=0 is the identity ({elapsed:.1f}s)")


def test_criterion_06_eot_variance_reduction():
    budget = Budget(60)
    spec = NetworkSpec((4, 1, 1), 3, [DenseLwtaSpec(4, 2), DenseSpec(3)])
    net = init_weights(spec, np.random.default_rng(23), dtype=np.float64)
    for p in net.params():
        p.data = p.data * 0.3  # spread-out winner posteriors
    x = np.random.default_rng(1).random((1, 4, 1, 1))
    labels = np.array([1])
    master = np.random.default_rng(606)
    singles, averaged = [], []
    for _ in range(200):
        singles.append(eot_gradient(x, labels, net, n=1, rng=master))
        averaged.append(eot_gradient(x, labels, net, n=20, rng=master))
    var_single = np.stack(singles).var(axis=0).mean()
    var_avg = np.stack(averaged).var(axis=0).mean()
    ratio = var_avg / var_single
    assert ratio < 0.15, f"variance ratio {ratio}"
    elapsed = budget.check()
    announce(6, f"EoT-20 gradient variance ratio {ratio:.3f} < 0.15 over 200 repeats ({elapsed:.1f}s)")


def test_criterion_07_directional_robustness_reproduction():
    assert RESULTS_FILE.exists(), (
        "results/robustness_comparison.json missing; run "
        "scripts/run_robustness_comparison.py to regenerate it"
    )
    results = json.loads(RESULTS_FILE.read_text())
    assert not results["quick_mode"], "results file was generated by a --quick smoke run"

    protocol = results["protocol"]
    assert protocol["epochs"] == 10
    assert protocol["train_attack"] == {"epsilon": 0.1, "num_steps": 10, "step_size": 0.02}
    assert protocol["eval_attack"]["epsilon"] == 0.1
    assert protocol["eval_attack"]["num_steps"] == 40
    assert results["dataset"]["train_examples"] == 10_000

    lwta_nat = results["lwta"]["natural_accuracy"]
    twin_nat = results["relu_twin"]["natural_accuracy"]
    lwta_rob = results["lwta"]["robust_accuracy"]
    twin_rob = results["relu_twin"]["robust_accuracy"]
    assert lwta_nat >= 0.9 * twin_nat, f"natural {lwta_nat} vs 0.9 * {twin_nat}"
    assert lwta_rob >= twin_rob, f"robust {lwta_rob} vs twin {twin_rob}"
    assert results["elapsed_seconds"] < 1800
    announce(7, (
        f"PGD-trained mlp-small: natural {lwta_nat:.4f} vs twin {twin_nat:.4f}, "
        f"robust {lwta_rob:.4f} vs twin {twin_rob:.4f} under PGD-40 "
        f"({results['elapsed_seconds']:.0f}s recorded at build time)"
    ))


def test_criterion_08_prediction_averaging_reduces_spread():
    budget = Budget(60)
    data = synth_blobs(3, 40, 6, separation=0.6, seed=8, sigma=0.15)
    spec = NetworkSpec((6, 1, 1), 3, [DenseLwtaSpec(4, 2), DenseSpec(3)])
    cfg = TrainConfig(
        epochs=6, batch_size=32, lr0=0.2, lr_halving_start_epoch=100,
        attack=AttackConfig(epsilon=0.0, step_size=0.01, num_steps=1),
        kl_weight=0.02,  # keeps the winner posteriors stochastic
        seed=3, eval_size=16,
    )
    net, _ = adversarial_train(init_weights(spec, np.random.default_rng(2)), data, cfg)
    x = data.images.data[:1]
    spreads = {}
    for num_samples in (1, 8, 32):
        tops = []
        for rep in range(50):
            probs, _ = predict(x, net, num_samples=num_samples,
                               rng=np.random.default_rng([num_samples, rep]))
            tops.append(probs[0].max())
        spreads[num_samples] = float(np.std(tops))
    assert spreads[1] > spreads[8] > spreads[32], spreads
    elapsed = budget.check()
    announce(8, (
        f"max-class probability std falls monotonically: "
        f"L=1 {spreads[1]:.4f} > L=8 {spreads[8]:.4f} > L=32 {spreads[32]:.4f} ({elapsed:.1f}s)"
    ))


def test_criterion_09_determinism_and_io(tmp_path):
    budget = Budget(60)
    data = synth_blobs(3, 20, 8, separation=0.8, seed=5, sigma=0.1)
    spec = NetworkSpec((8, 1, 1), 3, [DenseLwtaSpec(4, 2), DenseSpec(3)])

    checkpoints = []
    for tag in ("a", "b"):
        cfg = TrainConfig(
            epochs=2, batch_size=32, lr0=0.2, lr_halving_start_epoch=1,
            attack=AttackConfig(epsilon=0.04, step_size=0.02, num_steps=2),
            seed=17, eval_size=16, checkpoint_path=str(tmp_path / f"{tag}.lwta"),
        )
        adversarial_train(init_weights(spec, np.random.default_rng(4)), data, cfg)
        checkpoints.append((tmp_path / f"{tag}.lwta").read_bytes())
    assert checkpoints[0] == checkpoints[1]

    net = init_weights(spec, np.random.default_rng(4))
    model_path = tmp_path / "model.lwta"
    model_io.save(net, model_path)
    loaded = model_io.load(model_path)
    for p, q in zip(net.params(), loaded.params()):
        np.testing.assert_array_equal(p.data, q.data)

    # corruption fuzz: 100 model-file corruptions + 100 dataset-file corruptions
    raw_model = model_path.read_bytes()
    img_path, lbl_path = tmp_path / "img.idx", tmp_path / "lbl.idx"
    save_idx(data, img_path, lbl_path)
    raw_img = img_path.read_bytes()
    gen = np.random.default_rng(909)
    failures = 0
    for trial in range(200):
        target_model = trial < 100
        raw = raw_model if target_model else raw_img
        if trial % 2 == 0:
            corrupted = raw[: int(gen.integers(0, len(raw)))]
        else:
            buf = bytearray(raw)
            buf[int(gen.integers(0, len(raw)))] ^= 1 << int(gen.integers(0, 8))
            corrupted = bytes(buf)
        if corrupted == raw:
            continue
        try:
            if target_model:
                model_path.write_bytes(corrupted)
                model_io.load(model_path)
            else:
                img_path.write_bytes(corrupted)
                load_idx(img_path, lbl_path)
        except LwtaError:
            pass  # typed rejection is the contract
        except Exception:
            failures += 1
        # flips that leave the file valid (e.g. a pixel byte) may load fine
    assert failures == 0
    elapsed = budget.check()
    announce(9, f"bit-identical fixed-seed checkpoints, exact round-trips, 200 corruptions all typed ({elapsed:.1f}s)")


def test_criterion_10_lr_schedule_conformance():
    budget = Budget(1)
    from lwta.training import lr_schedule

    gen = np.random.default_rng(77)
    data = synth_blobs(2, 4, 3, separation=0.8, seed=1, sigma=0.05)
    for _ in range(3):
        start = int(gen.integers(1, 4))
        epochs = int(gen.integers(start + 1, 7))
        cfg = TrainConfig(
            epochs=epochs, batch_size=8, lr0=float(gen.uniform(0.05, 0.4)),
            lr_halving_start_epoch=start,
            attack=AttackConfig(epsilon=0.0, step_size=0.01, num_steps=1),
            seed=int(gen.integers(0, 100)), eval_size=4,
        )
        spec = NetworkSpec((3, 1, 1), 2, [DenseLwtaSpec(2, 2), DenseSpec(2)])
        _, hist = adversarial_train(init_weights(spec, np.random.default_rng(0)), data, cfg)
        for record in hist.records:
            expected = cfg.lr0 if record.epoch < start else cfg.lr0 / 2.0 ** (record.epoch - start + 1)
            assert record.lr == expected
            assert record.lr == lr_schedule(record.epoch, cfg)
    elapsed = budget.check()
    announce(10, f"recorded learning rates match the halving rule exactly for 3 random configs ({elapsed:.2f}s)")
