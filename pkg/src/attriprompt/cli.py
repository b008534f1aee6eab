"""Command-line entry point: ``attriprompt {gen,train,eval,gradcheck,inspect-retrieval,sweep}``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .data import SyntheticSpec, generate_synthetic, load_spec, load_with_split, write_generated
from .errors import AttriPromptError
from .experiment import SWEEP_PARAMS, format_sweep, gradient_suite, sweep
from .retrieval import retrieval_scores, select_unique
from .training import AttriPromptModel, Trainer, evaluate

GRAD_TOLERANCE = 1e-3


def existing_file(text: str) -> Path:
    path = Path(text)
    if not path.is_file():
        raise argparse.ArgumentTypeError(f"no such file: {text}")
    return path


def number_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def cmd_gen(args) -> int:
    spec = load_spec(args.spec)
    dataset, split = generate_synthetic(spec)
    write_generated(args.out, dataset, split)
    print(f"wrote {len(dataset)} images over {len(dataset.class_names)} classes to {args.out}")
    return 0


def cmd_train(args) -> int:
    config = load_config(args.config)
    dataset, split = load_with_split(args.data)
    model = AttriPromptModel(config)
    trainer = Trainer(model, dataset, split)
    log_path = args.log or Path(str(args.out) + ".log")
    with open(log_path, "w") as log:
        log.write(f"# seed {config.seed}\n")
        log.write("# step ce align cc div match total\n")
        trainer.run(lambda t, b: log.write(b.format_line(t) + "\n"))
    save_checkpoint(args.out, model, trainer.optimizer, trainer.step)
    print(f"trained {trainer.step} steps; checkpoint {args.out}, log {log_path}")
    return 0


def cmd_eval(args) -> int:
    state = load_checkpoint(args.ckpt)
    dataset, split = load_with_split(args.data)
    print(evaluate(split, state.model, dataset, lambda1=args.lambda1).summary(), end="")
    return 0


def cmd_gradcheck(args) -> int:
    config = load_config(args.config) if args.config else RunConfig()
    errors = gradient_suite(config, args.step)
    worst = max(errors.values())
    for name, err in errors.items():
        flag = "ok" if err <= GRAD_TOLERANCE else "FAIL"
        print(f"{name:<20} {err:.3e} {flag}")
    print(f"max relative error {worst:.3e} (tolerance {GRAD_TOLERANCE:g})")
    return 0 if worst <= GRAD_TOLERANCE else 1


def cmd_inspect(args) -> int:
    state = load_checkpoint(args.ckpt)
    dataset, _ = load_with_split(args.data)
    if not 0 <= args.image < len(dataset):
        raise AttriPromptError(f"image index {args.image} outside [0, {len(dataset)})")
    model = state.model
    encoded = model.encode_image(dataset.images[args.image])
    np.set_printoptions(precision=4, suppress=True, linewidth=120)
    print(f"image {args.image} label {dataset.labels[args.image]} ({dataset.class_names[dataset.labels[args.image]]})")
    for j, attrs in enumerate(encoded.attributes):
        scores = retrieval_scores(attrs, model.pool)
        print(f"text layer {j} <- vision layer {model.layer_map[j]}: sse {attrs.sse:.6g} after {attrs.iterations} iterations")
        print("centroids:")
        print(attrs.centroids)
        print("scores (attribute x prompt):")
        print(scores)
        print("selected prompts:", select_unique(scores))
    return 0


def cmd_sweep(args) -> int:
    config = load_config(args.config) if args.config else RunConfig()
    spec = load_spec(args.spec) if args.spec else SyntheticSpec()
    if args.epochs:
        config = config.replace(epochs=args.epochs)
    rows = sweep(args.param, args.values, args.seeds, config, spec)
    print(format_sweep(args.param, rows), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="attriprompt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic attribute-composition dataset")
    p.add_argument("--spec", type=existing_file, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train prompts, keys and heads; write log and checkpoint")
    p.add_argument("--data", type=existing_file, required=True)
    p.add_argument("--config", type=existing_file, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--log", type=Path, help="loss log path (default: <out>.log)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="print base_acc / novel_acc / hm for a checkpoint")
    p.add_argument("--data", type=existing_file, required=True)
    p.add_argument("--ckpt", type=existing_file, required=True)
    p.add_argument("--lambda1", type=float, help="fusion weight (default: the checkpoint's)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every trainable gradient")
    p.add_argument("--config", type=existing_file)
    p.add_argument("--step", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("inspect-retrieval", help="dump per-layer centroids, scores and selections")
    p.add_argument("--data", type=existing_file, required=True)
    p.add_argument("--ckpt", type=existing_file, required=True)
    p.add_argument("--image", type=int, required=True)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("sweep", help="ablate one hyperparameter over a list of values")
    p.add_argument("--param", choices=sorted(SWEEP_PARAMS), required=True)
    p.add_argument("--values", type=number_list, required=True)
    p.add_argument("--seeds", type=int_list, default=[0])
    p.add_argument("--config", type=existing_file)
    p.add_argument("--spec", type=existing_file)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (AttriPromptError, OSError) as exc:
        print(f"attriprompt {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
