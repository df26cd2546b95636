"""Command-line entry point.

``seqguard <subcommand> --config <file> [overrides]`` where subcommands
are the pipeline stages (parse, sessionize, dataset, train, eval, judge,
compare, report), ``run`` for the whole pipeline, and ``ablate`` for the
three-arm comparison. Exit codes: 0 success, 1 usage, 2 data error,
3 stage failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from typing import Optional

from .config import apply_overrides, config_from_dict, load_json_file
from .pipeline import STAGES, StageError, run_ablation, run_pipeline, run_stage
from .tensor import ShapeMismatch

_STAGE_COMMANDS = [s for s in STAGES]
_COMMANDS = ["run", "ablate"] + _STAGE_COMMANDS

# Named flag -> dotted config key. Anything else is reachable via --set.
_FLAG_KEYS = {
    "logs": "logs",
    "labels": "labels",
    "out": "out_dir",
    "seed": "seed",
    "arm": "arm",
    "sample_size": "sample_size",
    "depth": "drain.depth",
    "sim_threshold": "drain.sim_threshold",
    "max_children": "drain.max_children",
    "header_pattern": "drain.header_pattern",
    "window_length": "window.window_length",
    "stride": "window.stride",
    "judge_model": "judge.model",
    "cache_dir": "judge.cache_dir",
    "fixtures": "judge.fixtures",
    "rate_limit": "judge.rate_limit",
}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="seqguard", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="subcommand")
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--logs", help="raw log file")
        p.add_argument("--labels", help="block label CSV")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="root seed")
        p.add_argument("--arm", choices=["A", "B", "C"], help="ablation arm")
        p.add_argument("--sample-size", type=int, dest="sample_size")
        p.add_argument("--depth", type=int, help="parse tree depth")
        p.add_argument("--sim-threshold", type=float, dest="sim_threshold")
        p.add_argument("--max-children", type=int, dest="max_children")
        p.add_argument("--header-pattern", dest="header_pattern")
        p.add_argument("--window-length", type=int, dest="window_length")
        p.add_argument("--stride", type=int)
        p.add_argument("--judge-model", dest="judge_model")
        p.add_argument("--cache-dir", dest="cache_dir")
        p.add_argument("--fixtures", help="judge fixture directory (no network)")
        p.add_argument("--rate-limit", type=float, dest="rate_limit")
        p.add_argument(
            "--set",
            action="append",
            default=[],
            dest="overrides",
            metavar="KEY=VALUE",
            help="override any config key by dotted path",
        )
        if name == "run":
            p.add_argument("--resume-from", choices=list(STAGES), dest="resume_from")
    return parser


def _resolve_config(args: argparse.Namespace):
    payload = load_json_file(args.config) if args.config else {}
    overrides = []
    for flag, dotted in _FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append(f"{dotted}={json.dumps(value)}")
    overrides.extend(args.overrides)
    payload = apply_overrides(payload, overrides)
    return config_from_dict(payload)


_DATA_ERRORS = (OSError, ValueError, KeyError, EOFError)


def _exit_code_for(cause: BaseException) -> int:
    if isinstance(cause, ShapeMismatch):
        return 3
    if isinstance(cause, _DATA_ERRORS):
        return 2
    return 3


def main(argv: Optional[list[str]] = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1

    try:
        config = _resolve_config(args)
    except (OSError, ValueError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1

    try:
        if args.command == "run":
            report = run_pipeline(config, resume_from=args.resume_from)
            metrics = report["metrics"]
            print(
                f"ok run: out={config.out_dir} "
                f"f1={metrics['f1']:.4f} auc={metrics['auc']:.4f}"
            )
        elif args.command == "ablate":
            summary = run_ablation(config)
            for row in summary["rows"]:
                print(
                    f"arm {row['arm']} ({row['loss']}): f1={row['f1']:.4f} "
                    f"precision={row['precision']:.4f} recall={row['recall']:.4f}"
                )
        else:
            result = run_stage(args.command, config)
            compact = {
                k: v
                for k, v in result.items()
                if isinstance(v, (int, float, str, bool))
            }
            print(f"ok {args.command}: {json.dumps(compact, sort_keys=True)}")
        return 0
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code_for(exc.cause)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
