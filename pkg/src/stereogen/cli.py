"""Command-line entry point.

Exit codes: 0 on success, 1 for usage or configuration errors, 2 when a
step fails at run time.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from pydantic import ValidationError

from . import pipeline
from .config import json_schema, load_config
from .synthdata import parse_caption

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad usage; we reserve 2 for run-time failures."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="dotted-key override, e.g. trainer.seed=7 (repeatable)",
    )
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stereogen", description="Stacked-stereo diffusion toolkit")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    commands = {
        "gen-data": "render the synthetic stereo dataset",
        "train-mono": "fit the monocular disparity estimator",
        "train-base": "pretrain the base denoiser on single views",
        "train-stage1": "adapter fine-tuning on stacked pairs",
        "train-stage2": "reward fine-tuning through the sampler",
        "sample": "generate one stereo pair from a caption",
        "eval": "score the latest model on held-out prompts",
        "ablate": "run the ablation table",
        "plot": "plot stage-2 reward curves",
        "schema": "print the configuration JSON schema",
    }
    subs = {}
    for name, help_text in commands.items():
        subs[name] = sub.add_parser(name, help=help_text, description=help_text)
        _common(subs[name])
    subs["sample"].add_argument("--prompt", required=True)
    subs["sample"].add_argument("--seed", type=int, default=None)
    subs["sample"].add_argument("--out", default="sample")
    return parser


def _run(args, cfg) -> object:
    if args.command == "schema":
        print(json.dumps(json_schema(), indent=2))
        return None
    if args.command == "gen-data":
        return pipeline.gen_data(cfg)
    if args.command == "train-mono":
        return pipeline.train_mono_step(cfg)
    if args.command == "train-base":
        pipeline.pretrain_base(cfg)
        return pipeline.artifact(cfg, "base")
    if args.command == "train-stage1":
        pipeline.train_stage1(cfg)
        return pipeline.artifact(cfg, "stage1")
    if args.command == "train-stage2":
        pipeline.train_stage2(cfg)
        return pipeline.artifact(cfg, "stage2")
    if args.command == "sample":
        return pipeline.sample_step(cfg, args.prompt, args.seed, args.out)
    if args.command == "eval":
        rows = pipeline.evaluate_step(cfg)
        print((cfg.run_dir() / "table.txt").read_text(), end="")
        return f"{len(rows)} prompts scored"
    if args.command == "ablate":
        pipeline.ablate_step(cfg)
        print((cfg.run_dir() / "ablation" / "table.txt").read_text(), end="")
        return None
    if args.command == "plot":
        return [str(p) for p in pipeline.plot_step(cfg)]
    raise UsageError(f"unknown command {args.command!r}")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        cfg = load_config(args.config, args.overrides)
        if args.command == "sample":
            parse_caption(args.prompt)
    except (ValidationError, ValueError, OSError) as e:
        print(f"error: invalid configuration: {e}", file=sys.stderr)
        return EXIT_USAGE
    try:
        result = _run(args, cfg)
    except Exception as e:  # noqa: BLE001 - report, do not dump a traceback on users
        logging.getLogger(__name__).debug("failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    if result is not None:
        print(result if isinstance(result, str) else json.dumps(result, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
