"""Command-line entry point.

Subcommands:
  run              generate the task suite, train the sequence, export reports
  verify-fixtures  recompute the reference metric tables and check them
  report           re-emit CSV reports from a stored run directory

Config files are INI-style with [suite], [train], [merge] and [output]
sections; command-line flags override file values. The fully resolved
config is echoed to the output directory as config.resolved.cfg, and that
echo reproduces the run exactly when passed back via --config. All
randomness flows from the single --seed (applied to both the suite and
the trainer), so toggling merge behavior never perturbs data or
initialization.

Exit codes: 0 success, 1 runtime/verification failure, 2 usage/config
failure. The MOEFORGE_LOG env var sets log verbosity (debug/info/...).
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import logging
import os
import sys
from pathlib import Path
from typing import Optional

from . import evaluator
from .errors import ConfigError, MoeForgeError
from .evaluator import round_half_up
from .task_suite import SuiteConfig, generate_suite
from .trainer import TrainConfig, run_sequence

logger = logging.getLogger("moeforge")

# TrainConfig fields that live in the [merge] section instead of [train]
_MERGE_FIELDS = {"merge_cycle": "cycle", "merge_enabled": "enabled"}


def _parse_bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _coerce(text: str, pytype):
    if pytype is bool:
        value = _parse_bool(text)
    elif pytype is int:
        value = int(text)
    elif pytype is float:
        value = float(text)
    else:
        value = text
    return value


def _field_types(dc) -> dict:
    return {f.name: type(f.default) for f in dataclasses.fields(dc)}


@dataclasses.dataclass
class CliConfig:
    suite: SuiteConfig
    train: TrainConfig
    out_dir: Optional[str] = None

    def validate(self) -> "CliConfig":
        self.suite.validate()
        self.train.validate()
        return self


def load_config_file(path) -> CliConfig:
    """Parse an INI config into a CliConfig (file values over defaults)."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file not found: {path}")
    suite = SuiteConfig()
    train = TrainConfig()
    out_dir = None
    suite_types = _field_types(SuiteConfig)
    train_types = _field_types(TrainConfig)
    for section in parser.sections():
        items = dict(parser.items(section))
        if section == "suite":
            for key, raw in items.items():
                if key not in suite_types:
                    raise ConfigError(f"unknown [suite] option {key!r}")
                setattr(suite, key, _coerce(raw, suite_types[key]))
        elif section == "train":
            for key, raw in items.items():
                if key not in train_types or key in _MERGE_FIELDS:
                    raise ConfigError(f"unknown [train] option {key!r}")
                setattr(train, key, _coerce(raw, train_types[key]))
        elif section == "merge":
            rev = {v: k for k, v in _MERGE_FIELDS.items()}
            for key, raw in items.items():
                if key not in rev:
                    raise ConfigError(f"unknown [merge] option {key!r}")
                field = rev[key]
                setattr(train, field, _coerce(raw, train_types[field]))
        elif section == "output":
            for key, raw in items.items():
                if key != "dir":
                    raise ConfigError(f"unknown [output] option {key!r}")
                out_dir = raw
        else:
            raise ConfigError(f"unknown config section [{section}]")
    return CliConfig(suite=suite, train=train, out_dir=out_dir)


def config_text(cli: CliConfig) -> str:
    """Deterministic INI rendering of a resolved config (field order).

    The output directory is deliberately omitted: the echo describes the
    experiment, which must reproduce byte-identically wherever it is
    re-run, so the artifact location is not part of it."""
    lines = ["[suite]"]
    for f in dataclasses.fields(SuiteConfig):
        lines.append(f"{f.name} = {_render(getattr(cli.suite, f.name))}")
    lines.append("")
    lines.append("[train]")
    for f in dataclasses.fields(TrainConfig):
        if f.name in _MERGE_FIELDS:
            continue
        lines.append(f"{f.name} = {_render(getattr(cli.train, f.name))}")
    lines.append("")
    lines.append("[merge]")
    for field, key in _MERGE_FIELDS.items():
        lines.append(f"{key} = {_render(getattr(cli.train, field))}")
    return "\n".join(lines) + "\n"


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def resolve_config(args) -> CliConfig:
    """Defaults <- config file <- command-line flags, in that order."""
    if getattr(args, "config", None):
        cli = load_config_file(args.config)
    else:
        cli = CliConfig(suite=SuiteConfig(), train=TrainConfig())
    if getattr(args, "seed", None) is not None:
        cli.suite.seed = args.seed
        cli.train.seed = args.seed
    overrides = {
        "tasks": ("suite", "tasks"),
        "experts": ("train", "n_experts"),
        "topk": ("train", "topk"),
        "merge_cycle": ("train", "merge_cycle"),
        "merge_enabled": ("train", "merge_enabled"),
        "iterations": ("train", "iterations"),
        "batch": ("train", "batch"),
    }
    for flag, (part, field) in overrides.items():
        value = getattr(args, flag, None)
        if value is not None:
            setattr(getattr(cli, part), field, value)
    if getattr(args, "out", None):
        cli.out_dir = args.out
    return cli.validate()


def cmd_run(args) -> int:
    cli = resolve_config(args)
    out_dir = Path(cli.out_dir) if cli.out_dir else Path(
        f"runs/seed{cli.train.seed}"
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.resolved.cfg").write_text(config_text(cli),
                                                 encoding="utf-8")
    logger.info("run: %d tasks, seed %d, out %s",
                cli.suite.tasks, cli.train.seed, out_dir)
    suite = generate_suite(cli.suite)
    result = run_sequence(suite, cli.train, out_dir=out_dir)
    print(f"completed {result.completed_tasks} tasks -> {out_dir}")
    return 0


def cmd_verify_fixtures(args) -> int:
    report = evaluator.verify_paper_fixtures()
    for variant in sorted({c.variant for c in report.checks}):
        print(f"[{variant}]")
        for metric in ("transfer", "average", "last"):
            mean = next(c for c in report.checks
                        if c.variant == variant and c.metric == metric
                        and c.task == "mean")
            status = "ok" if mean.passed else "FAIL"
            print(f"  {metric:9s} mean: computed {round_half_up(mean.computed)} "
                  f"expected {mean.expected} [{status}]")
    if report.passed:
        print(f"all {len(report.checks)} fixture checks within "
              f"{report.tolerance}")
        return 0
    for c in report.failures:
        print(f"MISMATCH {c.variant}/{c.metric}/{c.task}: "
              f"expected {c.expected}, got {c.computed}", file=sys.stderr)
    return 1


def cmd_report(args) -> int:
    run_dir = Path(args.out) if args.out else None
    if run_dir is None or not run_dir.exists():
        print(f"report: run directory not found: {run_dir}", file=sys.stderr)
        return 1
    result_path = run_dir / "run_result.json"
    if not result_path.exists():
        print(f"report: no run_result.json under {run_dir}", file=sys.stderr)
        return 1
    from . import serialize
    run = serialize.load_json(result_path)
    written = evaluator.export_report(run, run_dir / "reports")
    print(f"wrote {len(written)} report files -> {run_dir / 'reports'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moeforge",
        description="Desk-scale MoE continual learning with expert merging",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="train a task sequence end to end")
    run_p.add_argument("--config", help="INI config file")
    run_p.add_argument("--seed", type=int, help="seed for suite and training")
    run_p.add_argument("--tasks", type=int, help="number of tasks")
    run_p.add_argument("--experts", type=int, help="experts per block")
    run_p.add_argument("--topk", type=int, help="experts selected per sample")
    run_p.add_argument("--merge-cycle", type=int, dest="merge_cycle",
                       help="iterations between merges")
    run_p.add_argument("--merge-enabled", type=_parse_bool,
                       dest="merge_enabled", help="true/false")
    run_p.add_argument("--iterations", type=int, help="iterations per task")
    run_p.add_argument("--batch", type=int, help="minibatch size")
    run_p.add_argument("--out", help="output directory")
    run_p.set_defaults(func=cmd_run)

    verify_p = sub.add_parser("verify-fixtures",
                              help="check embedded reference tables")
    verify_p.set_defaults(func=cmd_verify_fixtures)

    report_p = sub.add_parser("report",
                              help="re-emit CSV reports from a run directory")
    report_p.add_argument("--out", help="run directory to report on")
    report_p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("MOEFORGE_LOG", "warning").upper()
    logging.basicConfig(stream=sys.stderr,
                        level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except MoeForgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # keep the promised exit-code contract
        print(f"unexpected error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
