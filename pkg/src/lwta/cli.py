"""Command-line entry point: train, attack, inspect-winners.

Every command is deterministic under --seed; JSON outputs validate against
the schemas shipped in lwta/schemas/. LWTA_NUM_THREADS caps the linear
algebra thread pools (default 1, for reproducibility) and must therefore be
applied before numpy loads.
"""

from __future__ import annotations

import os


def _cap_threads():
    n = os.environ.get("LWTA_NUM_THREADS", "1")
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
        os.environ.setdefault(var, n)


_cap_threads()

import argparse
import dataclasses
import json
import sys
import time
import zlib
from pathlib import Path

import numpy as np

from . import __version__, model_io
from .attacks import AttackConfig, evaluate_robustness
from .baseline import relu_twin_spec
from .data import load_cifar10_binary, load_idx, load_idx_images, synth_blobs
from .errors import LwtaError, ParameterError
from .network import parse_inline_arch, preset_spec
from .tensor import Tensor
from .training import TrainConfig, adversarial_train, init_weights

USAGE_EXIT = 2
RUNTIME_EXIT = 1


class UsageError(Exception):
    pass


def parse_number(text):
    """Numeric flag value; fractions like 8/255 are accepted verbatim."""
    text = str(text).strip()
    if "/" in text:
        num, den = text.split("/", 1)
        return float(num) / float(den)
    return float(text)


def parse_data_spec(spec):
    """Dataset flag grammar:

    idx:<images>,<labels>          IDX image/label pair
    cifar10:<dir>[,test]           CIFAR-10 binary batches
    blobs:k=v,...                  synthetic blobs (classes, n, dim, sep,
                                   seed, sigma, shape=HxLxC)
    """
    try:
        kind, rest = spec.split(":", 1)
    except ValueError:
        raise UsageError(f"data spec {spec!r} needs a scheme prefix (idx:, cifar10:, blobs:)")
    if kind == "idx":
        parts = rest.split(",")
        if len(parts) != 2:
            raise UsageError("idx data spec needs 'idx:<images>,<labels>'")
        return load_idx(parts[0], parts[1])
    if kind == "cifar10":
        parts = rest.split(",")
        split = parts[1] if len(parts) > 1 else "train"
        if split not in ("train", "test"):
            raise UsageError(f"unknown cifar10 split {split!r}")
        return load_cifar10_binary(parts[0], split=split)
    if kind == "blobs":
        fields = {}
        for item in rest.split(","):
            if not item:
                continue
            try:
                key, value = item.split("=", 1)
            except ValueError:
                raise UsageError(f"bad blobs field {item!r}") from None
            fields[key] = value
        shape = None
        if "shape" in fields:
            shape = tuple(int(d) for d in fields["shape"].split("x"))
        return synth_blobs(
            classes=int(fields.get("classes", 10)),
            n_per_class=int(fields.get("n", 100)),
            dim=int(fields.get("dim", 64)),
            separation=parse_number(fields.get("sep", 0.5)),
            seed=int(fields.get("seed", 0)),
            sigma=parse_number(fields.get("sigma", 0.1)),
            image_shape=shape,
        )
    raise UsageError(f"unknown data scheme {kind!r}")


def load_data_or_usage(spec):
    """Data problems are flag problems from the CLI's point of view."""
    try:
        return parse_data_spec(spec)
    except UsageError:
        raise
    except (LwtaError, OSError) as e:
        raise UsageError(f"cannot load data {spec!r}: {e}") from e


def resolve_arch(arch, input_shape, classes, tau):
    """Preset name, relu-twin:<arch>, or inline spec like dense:B64xU2,..."""
    if arch.startswith("relu-twin:"):
        return relu_twin_spec(resolve_arch(arch[len("relu-twin:"):], input_shape, classes, tau))
    if ":" in arch:
        return parse_inline_arch(arch, input_shape, classes, tau)
    return preset_spec(arch, input_shape, classes, tau)


def build_manifest(command, args, seed, dataset=None, extra=None):
    manifest = {
        "command": command,
        "argv": list(args),
        "seed": seed,
        "library_version": __version__,
        "started_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    if dataset is not None:
        manifest["dataset"] = {
            "name": dataset.name,
            "examples": len(dataset),
            "classes": dataset.classes,
            "fingerprint": dataset.fingerprint(),
        }
    if extra:
        manifest.update(extra)
    return manifest


def _finish(manifest):
    manifest["finished_utc"] = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
    return manifest


def cmd_train(args, argv):
    dataset = load_data_or_usage(args.data)
    input_shape = tuple(dataset.images.shape[1:])
    spec = resolve_arch(args.arch, input_shape, dataset.classes, parse_number(args.tau))
    attack = AttackConfig(
        epsilon=parse_number(args.eps),
        step_size=parse_number(args.step_size),
        num_steps=args.attack_steps,
        eot_samples=args.eot,
        random_start=True,
        seed=args.seed,
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr0=parse_number(args.lr0),
        lr_halving_start_epoch=args.lr_halving_start,
        momentum=parse_number(args.momentum),
        attack=attack,
        tau0=parse_number(args.tau),
        tau_min=parse_number(args.tau),
        kl_weight=None if args.kl_weight is None else parse_number(args.kl_weight),
        seed=args.seed,
        eval_size=args.eval_size,
        checkpoint_path=str(out_dir / "checkpoint.lwta"),
    )
    manifest = build_manifest(
        "train", argv, args.seed, dataset,
        extra={"config": dataclasses.asdict(cfg), "arch": args.arch},
    )
    network = init_weights(spec, np.random.default_rng(args.seed))
    network, history = adversarial_train(network, dataset, cfg)
    model_io.save(network, out_dir / "checkpoint.lwta")
    (out_dir / "history.csv").write_text(history.to_csv())
    (out_dir / "manifest.json").write_text(json.dumps(_finish(manifest), indent=2, sort_keys=True) + "\n")
    # the trailing 4 bytes are the file's own CRC, so hash the body for a
    # content fingerprint (a whole-file CRC is the constant residue)
    checksum = zlib.crc32((out_dir / "checkpoint.lwta").read_bytes()[:-4])
    print(f"trained {args.arch}: {len(history.records)} epochs, "
          f"checkpoint crc32 {checksum:08x}, final nat_acc "
          f"{history.records[-1].nat_acc:.4f}, rob_acc {history.records[-1].rob_acc:.4f}")
    return 0


def cmd_attack(args, argv):
    network = model_io.load(args.model)
    dataset = load_data_or_usage(args.data)
    if args.loss == "dlr" and dataset.classes < 3:
        raise UsageError("DLR loss needs at least 3 classes")
    cfg = AttackConfig(
        epsilon=parse_number(args.eps),
        step_size=parse_number(args.step_size),
        num_steps=args.steps,
        eot_samples=args.eot,
        loss_kind=args.loss,
        random_start=not args.no_random_start,
        seed=args.seed,
    )
    manifest = build_manifest(
        "attack", argv, args.seed, dataset,
        extra={"model": args.model,
               "config": dict(dataclasses.asdict(cfg), prediction_samples=args.predict_samples)},
    )
    report = evaluate_robustness(
        dataset, network, cfg,
        prediction_samples=args.predict_samples,
        rng=np.random.default_rng(args.seed),
    )
    document = {
        "natural_accuracy": report.natural_accuracy,
        "robust_accuracy": report.robust_accuracy,
        "mean_linf": report.mean_linf,
        "examples": len(dataset),
        "config": dataclasses.asdict(cfg),
        "manifest": _finish(manifest),
    }
    _emit_json(document, args.out)
    return 0


def cmd_inspect_winners(args, argv):
    network = model_io.load(args.model)
    try:
        images = load_idx_images(args.input)
    except (LwtaError, OSError) as e:
        raise UsageError(f"cannot load input {args.input!r}: {e}") from e
    if not 0 <= args.index < images.shape[0]:
        raise UsageError(f"--index {args.index} outside [0, {images.shape[0]})")
    if args.draws < 1:
        raise UsageError("--draws must be at least 1")
    x = Tensor(images[args.index : args.index + 1])
    rng = np.random.default_rng(args.seed)
    per_layer = None
    for _ in range(args.draws):
        _, states = network.forward(x, mode="hard", rng=rng)
        if per_layer is None:
            per_layer = [[] for _ in states]
        for i, state in enumerate(states):
            winners = np.argmax(state.sample.data, axis=-1).reshape(-1)
            per_layer[i].append(winners)
    layers = []
    for i, draws in enumerate(per_layer or []):
        stacked = np.stack(draws)  # (R, num_block_slots)
        u = network.layers[_stochastic_layer_index(network, i)].block_size
        layers.append({
            "layer": i,
            "block_size": u,
            "num_blocks": int(stacked.shape[1]),
            "winners": stacked.tolist(),
            "entropy": None if args.draws == 1 else _empirical_entropy(stacked, u),
        })
    manifest = build_manifest(
        "inspect-winners", argv, args.seed,
        extra={"model": args.model,
               "config": {"input": args.input, "index": args.index, "draws": args.draws}},
    )
    document = {
        "draws": args.draws,
        "layers": layers,
        "manifest": _finish(manifest),
    }
    _emit_json(document, args.out)
    return 0


def _stochastic_layer_index(network, state_index):
    from .layers import ConvLwtaLayer, DenseLwtaLayer

    seen = -1
    for i, layer in enumerate(network.layers):
        if isinstance(layer, (DenseLwtaLayer, ConvLwtaLayer)):
            seen += 1
            if seen == state_index:
                return i
    raise LwtaError(f"no stochastic layer for state {state_index}")


def _empirical_entropy(winners, block_size):
    """Per-block-slot plug-in entropy of the winner distribution over draws."""
    draws = winners.shape[0]
    out = []
    for col in winners.T:
        counts = np.bincount(col, minlength=block_size)
        p = counts[counts > 0] / draws
        out.append(float(-(p * np.log(p)).sum()) + 0.0)  # normalize -0.0
    return out


def _emit_json(document, out_path):
    text = json.dumps(document, indent=2, sort_keys=True) + "\n"
    if out_path:
        Path(out_path).write_text(text)
    else:
        sys.stdout.write(text)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="lwta",
        description="Stochastic LWTA networks: adversarial training and attack evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="PGD adversarial training")
    train.add_argument("--data", required=True, help="idx:<img>,<lbl> | cifar10:<dir> | blobs:k=v,...")
    train.add_argument("--arch", default="mlp-small",
                       help="preset, relu-twin:<arch>, or inline like dense:B64xU2,dense:B64xU2")
    train.add_argument("--epochs", type=int, default=10)
    train.add_argument("--batch-size", type=int, default=128)
    train.add_argument("--eps", default="8/255", help="training attack radius (fractions ok)")
    train.add_argument("--attack-steps", type=int, default=10)
    train.add_argument("--step-size", default="0.007")
    train.add_argument("--eot", type=int, default=1)
    train.add_argument("--tau", default="0.67")
    train.add_argument("--kl-weight", default=None)
    train.add_argument("--lr0", default="0.1")
    train.add_argument("--lr-halving-start", type=int, default=75)
    train.add_argument("--momentum", default="0.9")
    train.add_argument("--eval-size", type=int, default=256)
    train.add_argument("--seed", type=int, default=0)
    train.add_argument("--out", required=True, help="output directory")
    train.set_defaults(func=cmd_train)

    attack = sub.add_parser("attack", help="evaluate natural and robust accuracy")
    attack.add_argument("--model", required=True)
    attack.add_argument("--data", required=True)
    attack.add_argument("--eps", default="8/255")
    attack.add_argument("--steps", type=int, default=20)
    attack.add_argument("--step-size", default="0.007")
    attack.add_argument("--eot", type=int, default=1)
    attack.add_argument("--loss", choices=["ce", "dlr"], default="ce")
    attack.add_argument("--predict-samples", type=int, default=1)
    attack.add_argument("--no-random-start", action="store_true")
    attack.add_argument("--seed", type=int, default=0)
    attack.add_argument("--out", default=None, help="report path (default stdout)")
    attack.set_defaults(func=cmd_attack)

    inspect = sub.add_parser("inspect-winners", help="winner indices across repeated draws")
    inspect.add_argument("--model", required=True)
    inspect.add_argument("--input", required=True, help="IDX image file")
    inspect.add_argument("--index", type=int, default=0)
    inspect.add_argument("--draws", type=int, default=16)
    inspect.add_argument("--seed", type=int, default=0)
    inspect.add_argument("--out", default=None)
    inspect.set_defaults(func=cmd_inspect_winners)
    return parser


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if e.code is not None else USAGE_EXIT
    try:
        return args.func(args, argv)
    except (UsageError, ParameterError) as e:
        print(f"error: {e}", file=sys.stderr)
        return USAGE_EXIT
    except (LwtaError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return RUNTIME_EXIT


if __name__ == "__main__":
    sys.exit(main())
