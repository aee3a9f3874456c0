"""Command-line entry point: ``rcc-edl {synth,detect-merge,crossval,eval,report}``.

Exit codes: 0 success, 1 validation error, 2 I/O error, 3 numeric fault.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .errors import EDLError
from .pipeline import RunConfig

COMMANDS = ("synth", "detect-merge", "crossval", "eval", "report")


def _proportions(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    defaults = RunConfig()
    parser = argparse.ArgumentParser(prog="rcc-edl", description="Evidential 3D CNN for renal tumor subtyping.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=defaults.seed)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--side", type=int, default=defaults.side, help="cube side in voxels")

    def cohort(p):
        p.add_argument("--manifest", required=True)
        p.add_argument("--voi", help="VoI table from detect-merge (default: merge each subject's boxes)")

    def model(p):
        p.add_argument("--folds", dest="k_folds", type=int, default=defaults.k_folds)
        p.add_argument("--epochs", type=int, default=defaults.epochs)
        p.add_argument("--lr", dest="learning_rate", type=float, default=defaults.learning_rate)
        p.add_argument("--batch", dest="batch_size", type=int, default=defaults.batch_size)
        p.add_argument("--stage1-channels", type=int, default=defaults.stage1_channels)
        p.add_argument("--block-channels", type=int, default=defaults.block_channels)
        p.add_argument("--evidence-activation", choices=("relu", "softplus"), default=defaults.evidence_activation)
        p.add_argument("--bootstrap", dest="bootstrap_resamples", type=int, default=defaults.bootstrap_resamples)

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    common(p)
    p.add_argument("--n", type=int, default=defaults.n)
    p.add_argument("--difficulty", choices=("easy", "medium", "hard"), default=defaults.difficulty)
    p.add_argument("--proportions", type=_proportions, default=defaults.proportions)

    p = sub.add_parser("detect-merge", help="merge per-slice boxes into 3D VoIs")
    common(p)
    p.add_argument("--manifest", required=True)

    p = sub.add_parser("crossval", help="stratified k-fold training and pooled report")
    common(p)
    cohort(p)
    model(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a (external) manifest")
    common(p)
    cohort(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bootstrap", dest="bootstrap_resamples", type=int, default=defaults.bootstrap_resamples)

    p = sub.add_parser("report", help="print the summary of an existing report directory")
    p.add_argument("--out", required=True)
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    values = {k: v for k, v in vars(args).items() if k not in ("verbose",) and v is not None}
    return RunConfig.from_dict(values)


def run(config: RunConfig) -> str:
    """Execute one command and return the text to print."""
    if config.command == "synth":
        manifest = pipeline.cmd_synth(config)
        return f"wrote {config.n} subjects; manifest {manifest}\n"
    if config.command == "detect-merge":
        table, skipped = pipeline.cmd_detect_merge(config)
        lines = [f"merged VoIs for {len(table)} subjects", f"skipped subjects: {len(skipped)}"]
        lines += [f"  {sid}: {reason}" for sid, reason in skipped]
        return "\n".join(lines) + "\n"
    if config.command == "crossval":
        pipeline.cmd_crossval(config)
    elif config.command == "eval":
        pipeline.cmd_eval(config)
    elif config.command == "report":
        return pipeline.cmd_report(config)
    return pipeline.render_summary(pipeline.Path(config.out))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)
    try:
        sys.stdout.write(run(config_from_args(args)))
    except EDLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
