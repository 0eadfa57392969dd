"""Command line entry point: gen-data, train, eval, gradcheck, inspect.

Exit codes: 0 success, 1 usage error, 2 data error, 3 check failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from ..positivity import ConfigError
from ..scenes import SPLITS, ContainerError, SceneDims, generate_dataset, read_container, write_container
from .checkpoint import CheckpointError, load_checkpoint
from .config import PAPER_PRESETS, TrainConfig, load_config, paper_preset

OK, USAGE, DATA, CHECK = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(USAGE)


def _shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON training configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="apl-avqa", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write train/val/test feature containers")
    _shared(p)
    p.add_argument("--samples", type=int, default=2000)
    p.add_argument("--t", type=int, help="segments per video")
    p.add_argument("--n", type=int, help="object slots per segment")
    p.add_argument("--noise", type=float, default=0.1)

    p = sub.add_parser("train", help="fit a model and save the best-validation checkpoint")
    _shared(p)
    p.add_argument("--data", type=Path, required=True, help="directory written by gen-data")
    p.add_argument("--log", type=Path, help="metrics JSON lines (default stdout)")
    p.add_argument("--paper-preset", choices=sorted(PAPER_PRESETS))
    p.add_argument("--epochs", type=int)
    p.add_argument("--lam", type=float)
    p.add_argument("--phi", type=float)

    p = sub.add_parser("eval", help="score a checkpoint on a container")
    _shared(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True, help="container file, or a gen-data directory (uses test)")

    p = sub.add_parser("gradcheck", help="finite-difference check of the full objective")
    _shared(p)
    p.add_argument("--lam", type=float)
    p.add_argument("--coords", type=int, default=600, help="sampled coordinates")

    p = sub.add_parser("inspect", help="dump attention and positivity records for one sample")
    _shared(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--index", type=int, default=0)
    return parser


def _config(args) -> TrainConfig:
    try:
        config = load_config(args.config) if args.config else TrainConfig()
    except (OSError, ValueError, TypeError) as exc:
        raise UsageError(f"bad config {args.config}: {exc}") from exc
    if getattr(args, "paper_preset", None):
        config = paper_preset(args.paper_preset, config)
    if args.seed is not None:
        config = config.with_updates(seed=args.seed)
    return config


def _emit(payload: dict, out: Path | None) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True)
    if out is None:
        print(text)
    else:
        out.write_text(text + "\n")


def _container(path: Path, split: str = "test"):
    return read_container(path / f"{split}.aplf" if path.is_dir() else path)


def cmd_gen_data(args) -> int:
    if args.out is None:
        raise UsageError("gen-data needs --out DIR")
    config = _config(args)
    scene = config.scene
    if args.t is not None or args.n is not None:
        scene = replace(scene, T=args.t or scene.T, N=args.n or scene.N)
    if args.samples < 3:
        raise UsageError("--samples must be at least 3")
    args.out.mkdir(parents=True, exist_ok=True)
    splits = generate_dataset(config.seed, args.samples, dims=scene, noise_sigma=args.noise)
    for name, container in zip(SPLITS, splits):
        write_container(args.out / f"{name}.aplf", container)
    print(json.dumps({name: len(c) for name, c in zip(SPLITS, splits)}))
    return OK


def cmd_train(args) -> int:
    from .train import train

    config = _config(args)
    train_set = _container(args.data, "train")
    val_set = _container(args.data, "val")
    if args.config is None:
        config = config.with_updates(scene=train_set.dims)
    updates = {}
    if args.epochs is not None:
        updates["epochs"] = args.epochs
    if args.lam is not None or args.phi is not None:
        loss = config.loss
        loss = replace(loss, lam=args.lam if args.lam is not None else loss.lam,
                       phi=args.phi if args.phi is not None else loss.phi)
        updates["loss"] = loss
    config = config.with_updates(**updates)
    out = args.out or Path("model.aplc")
    sink = args.log.open("w") if args.log else sys.stdout
    try:
        result = train(config, train_set, val_set, log=lambda rec: print(json.dumps(rec), file=sink, flush=True),
                       checkpoint_path=out)
    finally:
        if args.log:
            sink.close()
    print(json.dumps({"checkpoint": str(out), "best_epoch": result.best_epoch, "best_val_acc": result.best_val_acc}),
          file=sys.stderr)
    return OK


def cmd_eval(args) -> int:
    from .evaluate import evaluate

    model, config, _ = load_checkpoint(args.checkpoint)
    container = _container(args.data)
    if container.dims != config.scene:
        raise ValueError(f"container dims {container.dims} do not match checkpoint {config.scene}")
    _emit(evaluate(model, container, config.loss).as_dict(), args.out)
    return OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import GradCheckConfig, gradcheck

    check = GradCheckConfig(seed=args.seed or 0, n_samples=args.coords)
    if args.lam is not None:
        check = replace(check, loss=replace(check.loss, lam=args.lam))
    result = gradcheck(check)
    _emit(result.as_dict(), args.out)
    return OK if result.report.passed else CHECK


def cmd_inspect(args) -> int:
    from .evaluate import inspect

    model, config, _ = load_checkpoint(args.checkpoint)
    container = _container(args.data)
    if container.dims != config.scene:
        raise ValueError(f"container dims {container.dims} do not match checkpoint {config.scene}")
    _emit(inspect(model, container, args.index, config.loss), args.out)
    return OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "inspect": cmd_inspect,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return USAGE
    except (ContainerError, CheckpointError, FileNotFoundError, IsADirectoryError, IndexError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return DATA


if __name__ == "__main__":
    sys.exit(main())
