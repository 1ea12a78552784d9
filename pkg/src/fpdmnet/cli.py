"""Command-line entry point: ``fpdm <subcommand> [flags]``.

Exit status is 0 on success, 1 on a usage error and 2 when the command itself
fails. Every subcommand accepts ``--config FILE`` with flat ``key = value``
lines (keys spelled like the long flags, with or without dashes); explicit
flags override file values. ``FPDM_THREADS`` caps BLAS threads.
"""
from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path
from typing import List, Optional

from .model import ConfigError

ARCH_CHOICES = ("mnet-b", "mnet-a", "unet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _read_config(path: str) -> dict:
    values = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from None
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        values[key.strip().lstrip("-").replace("-", "_")] = value.strip()
    return values


def _size(text: str):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    return h, w


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--arch", choices=ARCH_CHOICES, default="mnet-b",
                   help="mnet-b: conv-BN-ReLU, mnet-a: conv-ReLU-BN, unet: baseline")
    p.add_argument("--depth", type=int, default=4, help="number of 2x2 pooling steps")
    p.add_argument("--base", type=int, default=64, help="feature maps at full resolution")
    p.add_argument("--dropout", type=float, default=0.2)


def build_parser() -> _Parser:
    parser = _Parser(prog="fpdm", description="Fingerprint denoising and inpainting with FPD-M-net.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def command(name, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--config", metavar="FILE", help="flat key = value file; explicit flags win")
        return p

    p = command("generate-data", "write synthetic distorted/clean fingerprint pairs and a manifest")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("pgm", "png"), default="pgm")

    p = command("train", "train a model on a generated dataset")
    p.add_argument("--data", required=True, help="dataset directory or manifest.csv")
    p.add_argument("--out", required=True, help="run directory for checkpoints and train_log.csv")
    _model_flags(p)
    p.add_argument("--epochs", type=int, default=75)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr1", type=float, default=0.1, help="learning rate before the phase boundary")
    p.add_argument("--lr2", type=float, default=0.01, help="learning rate from the phase boundary on")
    p.add_argument("--momentum1", type=float, default=0.75)
    p.add_argument("--momentum2", type=float, default=0.95)
    p.add_argument("--phase-boundary", type=int, default=50, help="first epoch of the second phase")
    p.add_argument("--decay", type=float, default=1e-5, help="time-based decay per update")
    p.add_argument("--delta", type=float, default=0.85, help="MS-SSIM weight in the loss")
    p.add_argument("--quiet", action="store_true", help="no per-epoch progress on stderr")

    p = command("infer", "clean distorted images with a trained checkpoint")
    p.add_argument("--model", required=True, help="checkpoint file or run directory (newest epoch)")
    p.add_argument("--input", required=True, help="image file or directory of images")
    p.add_argument("--output", required=True, help="output directory")

    p = command("evaluate", "MSE / PSNR / SSIM report")
    p.add_argument("--pred", help="directory of predicted images")
    p.add_argument("--ref", help="directory of reference images (matched by file name)")
    p.add_argument("--model", help="checkpoint file or run directory, evaluated on --data")
    p.add_argument("--data", help="dataset directory or manifest.csv")
    p.add_argument("--out", help="write the report as CSV here")

    p = command("gradcheck", "finite-difference gradient checks")
    p.add_argument("--op", default="all", help="check name or 'all'")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--list", action="store_true", help="list check names and exit")

    p = command("summary", "layer table and parameter count")
    _model_flags(p)
    p.add_argument("--input-size", type=_size, metavar="HxW",
                   help="network input size (default: padded 275x400)")
    p.add_argument("--model", help="summarize a checkpoint instead")
    return parser


def _apply_config(parser: _Parser, argv: List[str]) -> None:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    values = _read_config(known.config)
    command = next((a for a in argv if not a.startswith("-")), None)
    sub = parser._subparsers._group_actions[0].choices.get(command) if command else None
    if sub is None:
        return
    dests = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in values.items():
        action = dests.get(key)
        if action is None or key in ("help", "config"):
            raise UsageError(f"{known.config}: unknown key {key!r} for {command}")
        if action.nargs == 0:
            defaults[key] = raw.lower() in ("1", "true", "yes", "on")
            continue
        try:
            value = action.type(raw) if action.type else raw
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise UsageError(f"{known.config}: bad value for {key}: {exc}") from None
        if action.choices is not None and value not in action.choices:
            raise UsageError(f"{known.config}: {key} must be one of {list(action.choices)}")
        defaults[key] = value
        action.required = False
    sub.set_defaults(**defaults)


def _model_config(args, input_size=None):
    from .data import NATIVE_SHAPE, padding_for
    from .model import ModelConfig

    if input_size is None:
        pads = padding_for(NATIVE_SHAPE, 2 ** max(args.depth, 0))
        input_size = tuple(s + sum(p) for s, p in zip(NATIVE_SHAPE, pads))
    return ModelConfig(
        depth=args.depth, base=args.base, dropout=args.dropout,
        bn_order="after" if args.arch == "mnet-a" else "before",
        arch="unet" if args.arch == "unet" else "fpd-mnet",
        input_size=input_size,
    )


def _cmd_generate(args) -> int:
    from .data import make_dataset

    if args.count < 1:
        raise UsageError("--count must be >= 1")
    manifest = make_dataset(args.count, args.seed, args.out, fmt=args.format)
    print(f"wrote {len(manifest)} pairs to {manifest.root}")
    return 0


def _cmd_train(args) -> int:
    from .data import DatasetManifest
    from .metrics import LossConfig
    from .training import TrainConfig, train

    manifest = DatasetManifest.load(args.data)
    cfg = TrainConfig(
        epochs=args.epochs, batch_size=args.batch, lr_phase1=args.lr1, lr_phase2=args.lr2,
        momentum_phase1=args.momentum1, momentum_phase2=args.momentum2,
        phase_boundary=args.phase_boundary, decay=args.decay, seed=args.seed,
        loss=LossConfig(delta=args.delta), model=_model_config(args),
    )
    started = time.perf_counter()
    state = {"epoch": -1}

    def progress(row):
        if args.quiet or row.epoch == state["epoch"]:
            return
        state["epoch"] = row.epoch
        print(f"epoch {row.epoch + 1}/{cfg.epochs} step {row.step} lr {row.lr:.6g} loss {row.loss:.5f} "
              f"({time.perf_counter() - started:.0f}s)", file=sys.stderr)

    result = train(cfg, manifest, args.out, progress=progress)
    means = result.log.epoch_means()
    print(f"trained {len(means)} epochs, {len(result.log.rows)} steps; "
          f"epoch loss {means[0]:.5f} -> {means[max(means)]:.5f}; final checkpoint {result.checkpoint_paths[-1]}")
    return 0


def _cmd_infer(args) -> int:
    from .imageio import list_images, load_image, save_image
    from .training import load_model, predict

    model = load_model(args.model)
    src = Path(args.input)
    files = list_images(src) if src.is_dir() else [src]
    if not files:
        raise FileNotFoundError(f"no .pgm/.png images in {src}")
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    for f in files:
        save_image(predict(model, load_image(f)), out / f.name)
    print(f"wrote {len(files)} image(s) to {out}")
    return 0


def _cmd_evaluate(args) -> int:
    from .metrics import summarize

    if args.pred or args.ref:
        if not (args.pred and args.ref) or args.model or args.data:
            raise UsageError("use either --pred with --ref, or --model with --data")
        from .imageio import list_images, load_image

        refs = {p.name: p for p in list_images(args.ref)}
        preds = {p.name: p for p in list_images(args.pred)}
        names = sorted(set(refs) & set(preds))
        if not names:
            raise FileNotFoundError("no file names in common between --pred and --ref")
        report = summarize((Path(n).stem, load_image(preds[n]), load_image(refs[n])) for n in names)
    elif args.model and args.data:
        from .data import DatasetManifest
        from .training import evaluate, load_model

        report = evaluate(load_model(args.model), DatasetManifest.load(args.data))
    else:
        raise UsageError("use either --pred with --ref, or --model with --data")
    print(report.format())
    if args.out:
        report.to_csv(args.out)
    return 0


def _cmd_gradcheck(args) -> int:
    from .gradcheck import CHECKS, run_suite

    if args.list:
        print("\n".join(CHECKS))
        return 0
    names = None if args.op == "all" else [args.op]
    if names and names[0] not in CHECKS:
        raise UsageError(f"unknown op {args.op!r}; choose from: all, {', '.join(CHECKS)}")
    reports = run_suite(names, seed=args.seed)
    for r in reports:
        print(r.row())
    failed = [r.op_name for r in reports if not r.passed]
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(failed)}", file=sys.stderr)
        return 2
    return 0


def _cmd_summary(args) -> int:
    from .model import build

    if args.model:
        from .training import load_model

        net = load_model(args.model)
    else:
        net = build(_model_config(args, args.input_size))
    cfg = net.config
    print(f"{cfg.arch} depth={cfg.depth} base={cfg.base} bn_order={cfg.bn_order} input={cfg.input_size[0]}x{cfg.input_size[1]}")
    print(net.summary())
    return 0


COMMANDS = {
    "generate-data": _cmd_generate,
    "train": _cmd_train,
    "infer": _cmd_infer,
    "evaluate": _cmd_evaluate,
    "gradcheck": _cmd_gradcheck,
    "summary": _cmd_summary,
}


def _thread_limit():
    raw = os.environ.get("FPDM_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"FPDM_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"FPDM_THREADS must be a positive integer, got {raw!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def run(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
        limiter = _thread_limit()
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        usage = parser._subparsers._group_actions[0].choices[args.command].format_usage()
        print(f"fpdm {args.command}: error: {exc}\n{usage}".rstrip(), file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - every failure maps to exit code 2
        print(f"fpdm {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
