#!/usr/bin/env python3
"""Desk-scale comparison of a stochastic LWTA network against its ReLU twin
under identical PGD adversarial training.

Generates a 10k-example synthetic IDX dataset (plus a held-out eval split
with the same class centers), trains mlp-small and its parameter-matched
ReLU twin with the same adversarial training configuration (epsilon 0.1,
10 inner steps, 10 epochs), evaluates both under a PGD-40 attack, and
records everything in results/robustness_comparison.json.

Usage: python scripts/run_robustness_comparison.py [--out results] [--quick]
"""

import argparse
import dataclasses
import json
import os
import sys
import time
from pathlib import Path

# single-threaded linear algebra for cross-run reproducibility; must happen
# before numpy loads
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
    os.environ.setdefault(_var, os.environ.get("LWTA_NUM_THREADS", "1"))

import numpy as np

REPO = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(REPO / "src"))

from lwta import model_io
from lwta.attacks import AttackConfig, evaluate_robustness
from lwta.baseline import build_relu_twin
from lwta.data import load_idx, save_idx, synth_blobs
from lwta.network import preset_spec
from lwta.training import TrainConfig, adversarial_train, init_weights

CLASSES = 10
IMAGE_SHAPE = (8, 8, 1)
DIM = 64
TRAIN_EXAMPLES = 10_000
EVAL_EXAMPLES = 2_000
SEPARATION = 0.22
SIGMA = 0.16
DATA_SEED = 101
TRAIN_SEED = 7
EPOCHS = 10
EPSILON = 0.1
TRAIN_STEPS = 10
EVAL_STEPS = 40
# winner-sampling hyperparameters for the stochastic model; the twin has no
# latents, so these do not touch its training
TAU = 0.15
KL_WEIGHT = 0.002
EVAL_SEEDS = (33, 77, 123)


def make_datasets(data_dir, quick):
    train_n = 1_000 if quick else TRAIN_EXAMPLES
    eval_n = 200 if quick else EVAL_EXAMPLES
    per_class = (train_n + eval_n) // CLASSES
    full = synth_blobs(
        CLASSES, per_class, DIM,
        separation=SEPARATION, seed=DATA_SEED, sigma=SIGMA, image_shape=IMAGE_SHAPE,
    )
    train = full.subset(range(train_n))
    evald = full.subset(range(train_n, train_n + eval_n))
    data_dir.mkdir(parents=True, exist_ok=True)
    save_idx(train, data_dir / "train-images.idx", data_dir / "train-labels.idx")
    save_idx(evald, data_dir / "eval-images.idx", data_dir / "eval-labels.idx")
    # reload through the IDX path so the experiment consumes the file format
    train = load_idx(data_dir / "train-images.idx", data_dir / "train-labels.idx", classes=CLASSES)
    evald = load_idx(data_dir / "eval-images.idx", data_dir / "eval-labels.idx", classes=CLASSES)
    return train, evald


def run_one(tag, network, train, evald, out_dir, epochs):
    cfg = TrainConfig(
        epochs=epochs,
        batch_size=128,
        lr0=0.1,
        lr_halving_start_epoch=8,
        attack=AttackConfig(epsilon=EPSILON, step_size=0.02, num_steps=TRAIN_STEPS),
        tau0=TAU,
        tau_min=TAU,
        kl_weight=KL_WEIGHT,
        seed=TRAIN_SEED,
        eval_size=256,
        checkpoint_path=str(out_dir / f"{tag}.lwta"),
    )
    t0 = time.perf_counter()
    network, history = adversarial_train(network, train, cfg, eval_dataset=evald)
    train_seconds = time.perf_counter() - t0
    model_io.save(network, out_dir / f"{tag}.lwta")
    (out_dir / f"{tag}-history.csv").write_text(history.to_csv())

    per_seed = {}
    for seed in EVAL_SEEDS:
        eval_cfg = AttackConfig(
            epsilon=EPSILON, step_size=0.007, num_steps=EVAL_STEPS, eot_samples=1, seed=seed,
        )
        report = evaluate_robustness(
            evald, network, eval_cfg, prediction_samples=1, rng=np.random.default_rng(seed)
        )
        per_seed[str(seed)] = {
            "natural_accuracy": report.natural_accuracy,
            "robust_accuracy": report.robust_accuracy,
            "mean_linf": report.mean_linf,
        }
    primary = per_seed[str(EVAL_SEEDS[0])]
    print(f"[{tag}] natural {primary['natural_accuracy']:.4f}  robust {primary['robust_accuracy']:.4f}  "
          f"({train_seconds:.0f}s train)")
    return {
        "natural_accuracy": primary["natural_accuracy"],
        "robust_accuracy": primary["robust_accuracy"],
        "mean_linf": primary["mean_linf"],
        "per_eval_seed": per_seed,
        "train_seconds": round(train_seconds, 2),
        "train_config": dataclasses.asdict(cfg),
        "eval_config": {"epsilon": EPSILON, "step_size": 0.007, "num_steps": EVAL_STEPS,
                        "eot_samples": 1, "seeds": list(EVAL_SEEDS)},
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default=str(REPO / "results"))
    parser.add_argument("--data-dir", default=str(REPO / "results" / "data"))
    parser.add_argument("--quick", action="store_true", help="1k-example smoke run")
    args = parser.parse_args()

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    epochs = 2 if args.quick else EPOCHS

    wall_start = time.perf_counter()
    train, evald = make_datasets(Path(args.data_dir), args.quick)
    spec = preset_spec("mlp-small", IMAGE_SHAPE, CLASSES, tau=TAU)

    lwta_net = init_weights(spec, np.random.default_rng(TRAIN_SEED))
    lwta_result = run_one("lwta-mlp-small", lwta_net, train, evald, out_dir, epochs)

    twin_net = build_relu_twin(spec, np.random.default_rng(TRAIN_SEED))
    twin_result = run_one("relu-twin-mlp-small", twin_net, train, evald, out_dir, epochs)

    elapsed = time.perf_counter() - wall_start
    natural_ratio = lwta_result["natural_accuracy"] / max(twin_result["natural_accuracy"], 1e-12)
    results = {
        "dataset": {
            "kind": "synthetic blobs, IDX files",
            "classes": CLASSES,
            "image_shape": list(IMAGE_SHAPE),
            "train_examples": len(train),
            "eval_examples": len(evald),
            "separation": SEPARATION,
            "sigma": SIGMA,
            "seed": DATA_SEED,
            "train_fingerprint": train.fingerprint(),
            "eval_fingerprint": evald.fingerprint(),
        },
        "protocol": {
            "architecture": "mlp-small",
            "epochs": epochs,
            "train_attack": {"epsilon": EPSILON, "num_steps": TRAIN_STEPS, "step_size": 0.02},
            "eval_attack": {"epsilon": EPSILON, "num_steps": EVAL_STEPS, "step_size": 0.007},
            "prediction_samples": 1,
            "tau": TAU,
            "kl_weight": KL_WEIGHT,
            "seed": TRAIN_SEED,
        },
        "lwta": lwta_result,
        "relu_twin": twin_result,
        "comparison": {
            "natural_accuracy_ratio": natural_ratio,
            "natural_ratio_criterion": natural_ratio >= 0.9,
            "robust_criterion": lwta_result["robust_accuracy"] >= twin_result["robust_accuracy"],
        },
        "elapsed_seconds": round(elapsed, 2),
        "quick_mode": bool(args.quick),
    }
    path = out_dir / "robustness_comparison.json"
    path.write_text(json.dumps(results, indent=2) + "\n")
    print(f"\nwrote {path}")
    print(f"natural: lwta {lwta_result['natural_accuracy']:.4f} vs relu {twin_result['natural_accuracy']:.4f} "
          f"(ratio {natural_ratio:.3f}, needs >= 0.9)")
    print(f"robust:  lwta {lwta_result['robust_accuracy']:.4f} vs relu {twin_result['robust_accuracy']:.4f} "
          f"(needs lwta >= relu)")
    print(f"elapsed: {elapsed:.0f}s")
    ok = results["comparison"]["natural_ratio_criterion"] and results["comparison"]["robust_criterion"]
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
