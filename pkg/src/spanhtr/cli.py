"""Command-line entry point: ``spanhtr <command> [options]``.

Commands: generate, train, eval, predict, visualize.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Only the primary
result goes to stdout; the resolved configuration and diagnostics go to
stderr.

A ``--config`` file is a JSON object whose keys are the long option names
of the chosen command (dashes or underscores); flags given on the command
line win. ``train`` also accepts a ``model`` object of ModelConfig
overrides, ``generate`` a ``spec`` object of SyntheticSpec fields.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
OVERLAY_ALPHA = 0.45

logger = logging.getLogger("spanhtr")


class UsageError(Exception):
    pass


def _regime_name(value: str) -> str:
    from .training import get_regime
    try:
        return get_regime(value).name
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _common_options(suppress: bool) -> argparse.ArgumentParser:
    # subcommands repeat the global flags with suppressed defaults so that a
    # value given before the command name is not reset by the subparser
    def d(value):
        return argparse.SUPPRESS if suppress else value

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=d(0), help="random seed (default 0)")
    common.add_argument("--config", type=Path, default=d(None), help="JSON file of option defaults")
    common.add_argument("--threads", type=int, default=d(None),
                        help="cap on numerical library threads (default: library choice)")
    common.add_argument("--verbosity", type=int, choices=(0, 1, 2), default=d(1),
                        help="0 errors only, 1 progress, 2 debug")
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spanhtr", parents=[_common_options(False)],
                                     description="Paragraph-level handwriting recognition")
    common = _common_options(True)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("generate", parents=[common], help="write a synthetic paragraph dataset")
    p.add_argument("--spec", type=Path, help="SyntheticSpec JSON file (default: built-in spec)")
    p.add_argument("--count", type=int)
    p.add_argument("--out", type=Path)
    p.add_argument("--lines", action="store_true",
                   help="write single-line crops of the paragraphs (for line-level pretraining)")

    p = sub.add_parser("train", parents=[common], help="train one regime")
    p.add_argument("--regime", type=_regime_name,
                   help="pool-line-r, span-line-ra, span-scratch, span-pt-r or span-pt-ra")
    p.add_argument("--data", type=Path, help="training manifest")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--init", type=Path, help="checkpoint to initialize from (PT regimes)")
    p.add_argument("--val-data", type=Path, help="validation manifest")
    p.add_argument("--encoder-only", action="store_true",
                   help="transfer encoder weights only (decoder freshly initialized)")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--max-steps", type=int, default=1000)
    p.add_argument("--max-wall-time", type=float, help="seconds")
    p.add_argument("--max-cpu-time", type=float, help="process CPU seconds")
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--eval-every", type=int, default=100)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--clip-norm", type=float)
    p.add_argument("--charset", help="pin the symbol set (default: inferred from the data)")
    p.add_argument("--model-preset", choices=("full", "reduced"), default="full",
                   help="full: widths 32..512 and 4 DSCBs; reduced: 16..128 and 1 DSCB")

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on a manifest")
    p.add_argument("--ckpt", type=Path)
    p.add_argument("--data", type=Path)
    p.add_argument("--report", type=Path,
                   help="JSONL report path (default: <ckpt>.eval.jsonl)")

    p = sub.add_parser("predict", parents=[common], help="transcribe one image")
    p.add_argument("--ckpt", type=Path)
    p.add_argument("--image", type=Path)

    p = sub.add_parser("visualize", parents=[common],
                       help="overlay character predictions on the input image")
    p.add_argument("--ckpt", type=Path)
    p.add_argument("--image", type=Path)
    p.add_argument("--out", type=Path, help="overlay PNG path")
    p.add_argument("--rows", type=Path, help="row text path (default: <out>.rows.txt)")
    return parser


def _apply_config_file(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    """Parse ``argv`` with defaults taken from ``--config`` when present."""
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    try:
        cfg = json.loads(args.config.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        parser.error(f"cannot read config file {args.config}: {exc}")
    if not isinstance(cfg, dict):
        parser.error("config file must hold a JSON object")
    sub = _subparser(parser, args.command)
    dests = {a.dest for a in sub._actions}
    extras = {"train": {"model"}, "generate": {"spec"}}.get(args.command, set())
    defaults, unknown = {}, []
    for key, value in cfg.items():
        dest = key.replace("-", "_")
        if dest in extras:
            defaults[f"config_{dest}"] = value
        elif dest in dests and dest not in ("help", "config"):
            defaults[dest] = value
        else:
            unknown.append(key)
    if unknown:
        parser.error(f"unknown keys in {args.config} for '{args.command}': {sorted(unknown)}")
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _subparser(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    return parser._subparsers._group_actions[0].choices[command]


def _check_required(parser: argparse.ArgumentParser, args: argparse.Namespace) -> None:
    # checked after merging so that required options may come from --config
    missing = [opt for opt in sorted(_required_options(args.command))
               if getattr(args, opt[2:].replace("-", "_")) is None]
    if missing:
        _subparser(parser, args.command).error(
            f"the following arguments are required: {', '.join(missing)}")


def _required_options(command: str) -> set[str]:
    return {
        "generate": {"--count", "--out"},
        "train": {"--regime", "--data", "--out"},
        "eval": {"--ckpt", "--data"},
        "predict": {"--ckpt", "--image"},
        "visualize": {"--ckpt", "--image", "--out"},
    }[command]


def _echo_config(args: argparse.Namespace) -> None:
    resolved = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())}
    logger.info("resolved configuration: %s", json.dumps(resolved, sort_keys=True))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    from .data import SyntheticSpec, generate_synthetic

    spec_data = getattr(args, "config_spec", None)
    if args.spec is not None:
        spec = SyntheticSpec.load(args.spec)
    elif spec_data is not None:
        spec = SyntheticSpec.from_dict(spec_data)
    else:
        spec = SyntheticSpec()
    if args.count < 1:
        raise UsageError("--count must be at least 1")
    manifest = generate_synthetic(spec, args.count, args.out, seed=args.seed, lines=args.lines)
    print(manifest)
    return EXIT_OK


def cmd_train(args) -> int:
    from .model import reduced_config
    from .training import TrainRunConfig, get_regime, train

    regime = get_regime(args.regime)
    if regime.init_from and args.init is None:
        raise UsageError(f"regime {regime.name} requires --init <checkpoint> "
                         f"(a {regime.init_from} checkpoint)")
    model = {}
    if args.model_preset == "reduced":
        cfg = reduced_config(1)
        model = dict(cb_channels=cfg.cb_channels, dscb_count=cfg.dscb_count,
                     dscb_channels=cfg.dscb_channels)
    model.update(getattr(args, "config_model", None) or {})
    config = TrainRunConfig(
        regime=regime.name, data=str(args.data), out_dir=str(args.out),
        val_data=str(args.val_data) if args.val_data else None,
        init=str(args.init) if args.init else None, encoder_only=args.encoder_only,
        batch_size=args.batch_size, max_steps=args.max_steps, max_wall_time=args.max_wall_time,
        max_cpu_time=args.max_cpu_time,
        seed=args.seed, lr=args.lr, eval_every=args.eval_every, augment=not args.no_augment,
        clip_norm=args.clip_norm, charset=args.charset, model=model)
    result = train(config)
    logger.info("metrics log: %s", result.metrics)
    if result.val_cers:
        logger.info("best validation CER: %.4f", min(c for _, c in result.val_cers))
    print(result.best)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .training import evaluate

    report = evaluate(args.ckpt, args.data)
    path = args.report or args.ckpt.with_suffix(args.ckpt.suffix + ".eval.jsonl")
    report.write(path)
    s = report.summary()
    print(f"samples {s['samples']}")
    print(f"CER {100 * s['cer']:.2f}%")
    print(f"WER {100 * s['wer']:.2f}%")
    print(f"mean per-sample CER {100 * s['mean_sample_cer']:.2f}%")
    print(f"mean per-sample WER {100 * s['mean_sample_wer']:.2f}%")
    logger.info("report written to %s", path)
    return EXIT_OK


def _load_for_inference(args):
    from .checkpoint import Checkpoint
    from .data import load_image, preprocess

    ckpt = Checkpoint.load(args.ckpt)
    image = preprocess(load_image(args.image), ckpt.stats)
    return ckpt, ckpt.build(), image


def cmd_predict(args) -> int:
    from .training import recognize

    ckpt, model, image = _load_for_inference(args)
    print(recognize(model, image, ckpt.charset))
    return EXIT_OK


def row_texts(classes, charset) -> list[str]:
    """Text emitted by each lattice row under the global best-path collapse.

    ``classes`` is the (rows, cols) argmax grid. A character belongs to the
    row where its run of identical classes starts, with runs continuing
    across row boundaries exactly as in the row-concatenated sequence, so
    joining the rows gives the decoded paragraph.
    """
    blank = charset.blank_index
    rows = []
    prev = None
    for r in range(classes.shape[0]):
        out = []
        for k in classes[r]:
            k = int(k)
            if k != prev and k != blank:
                out.append(charset.symbols[k])
            prev = k
        rows.append("".join(out))
    return rows


def render_overlay(image, stats, classes, blank: int):
    """RGB uint8 picture of the preprocessed input with non-blank cells in red."""
    import numpy as np
    from .model import HEIGHT_REDUCTION, WIDTH_REDUCTION

    base = np.clip(stats.denormalize(image), 0, 255).transpose(1, 2, 0)
    mask = np.kron((classes != blank).astype(np.float32),
                   np.ones((HEIGHT_REDUCTION, WIDTH_REDUCTION), dtype=np.float32))
    red = np.array([255.0, 0.0, 0.0])
    alpha = OVERLAY_ALPHA * mask[..., None]
    out = base * (1 - alpha) + red * alpha
    return np.rint(out).astype(np.uint8)


def cmd_visualize(args) -> int:
    import numpy as np
    from .data import save_png
    from .training import predict_lattice

    ckpt, model, image = _load_for_inference(args)
    lattice = predict_lattice(model, image)
    classes = np.argmax(lattice.grid.data[0], axis=0)  # (rows, cols)
    rows = row_texts(classes, ckpt.charset)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_png(args.out, render_overlay(image, ckpt.stats, classes, ckpt.charset.blank_index))
    rows_path = args.rows or args.out.with_suffix(".rows.txt")
    rows_path.write_text("\n".join(rows) + "\n" if any(rows) else "", encoding="utf-8")
    print(args.out)
    logger.info("row text written to %s", rows_path)
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval,
            "predict": cmd_predict, "visualize": cmd_visualize}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _apply_config_file(parser, argv)
        _check_required(parser, args)
    except SystemExit as exc:
        return int(exc.code or 0)
    level = {0: logging.ERROR, 1: logging.INFO, 2: logging.DEBUG}[args.verbosity]
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s",
                        force=True)
    if args.threads is not None:
        if args.threads < 1:
            parser.print_usage(sys.stderr)
            print("spanhtr: error: --threads must be >= 1", file=sys.stderr)
            return EXIT_USAGE
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    _echo_config(args)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        _subparser(parser, args.command).print_usage(sys.stderr)
        print(f"spanhtr {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError) as exc:
        # CheckpointError and ManifestError are ValueErrors
        print(f"spanhtr {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
