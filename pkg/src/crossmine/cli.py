"""Command-line pipeline driver.

Each subcommand runs one stage against the artifact paths named in the
config file. `--set section.key=value` overrides any config key, so a
committed config plus the command line fully determines a run.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import ConfigError, load_pipeline_config
from .corpus import LogFormatError
from .pipeline import (
    atomic_path,
    stage_eval,
    stage_ingest,
    stage_mine,
    stage_prompts,
    stage_report,
    stage_simulate,
    stage_train,
)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2


def _add_config_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="config file path")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one config key (repeatable)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crossmine",
        description="Session-log positive mining and tiered contrastive training.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate the synthetic world and session logs")
    _add_config_args(p)

    p = sub.add_parser("mine", help="mine training groups from the session log")
    _add_config_args(p)
    p.add_argument("--sources", default=None, help="comma list: search,reformulation,recommendation")

    p = sub.add_parser("prompts", help="emit knowledge-generation prompts per query")
    _add_config_args(p)

    p = sub.add_parser("ingest-wk", help="merge knowledge responses into the groups file")
    _add_config_args(p)

    p = sub.add_parser("train", help="train the encoder on the groups file")
    _add_config_args(p)
    p.add_argument("--loss", default=None, help="override trainer.loss")
    p.add_argument("--seed", type=int, default=None, help="override trainer.seed")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the held-out log")
    _add_config_args(p)
    p.add_argument("--checkpoint", default=None, help="override paths.checkpoint")
    p.add_argument("--out", default=None, help="override paths.report")

    p = sub.add_parser("report", help="render a comparison table from eval reports")
    p.add_argument("reports", nargs="+", type=Path, help="eval report files")
    p.add_argument("--out", type=Path, default=None, help="also write the table to a file")
    return parser


def _config_from_args(args: argparse.Namespace):
    overrides = list(args.overrides)
    if getattr(args, "sources", None):
        overrides.append(f"mining.sources={args.sources}")
    if getattr(args, "loss", None):
        overrides.append(f"trainer.loss={args.loss}")
    if getattr(args, "seed", None) is not None:
        overrides.append(f"trainer.seed={args.seed}")
    if getattr(args, "checkpoint", None):
        overrides.append(f"paths.checkpoint={args.checkpoint}")
    if getattr(args, "out", None) and args.command == "eval":
        overrides.append(f"paths.report={args.out}")
    return load_pipeline_config(args.config, overrides)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            table = stage_report(args.reports)
            if args.out is not None:
                with atomic_path(args.out) as tmp:
                    tmp.write_text(table, encoding="utf-8")
            sys.stdout.write(table)
            return EXIT_OK

        cfg = _config_from_args(args)
        if args.command == "simulate":
            summary = stage_simulate(cfg)
            for key in sorted(summary):
                print(f"{key}: {summary[key]}")
        elif args.command == "mine":
            counts = stage_mine(cfg)
            for source in sorted(counts):
                print(f"{source}: {counts[source]}")
            print(f"total_samples: {sum(counts.values())}")
        elif args.command == "prompts":
            n = stage_prompts(cfg)
            print(f"prompts_written: {n}")
        elif args.command == "ingest-wk":
            added, skipped = stage_ingest(cfg)
            print(f"knowledge_docs_added: {added}")
            print(f"records_skipped: {skipped}")
        elif args.command == "train":
            steps, last_loss = stage_train(cfg)
            print(f"steps: {steps}")
            print(f"final_loss: {last_loss:.6f}")
        elif args.command == "eval":
            report = stage_eval(cfg)
            for split in sorted(report.recall):
                for k in sorted(report.recall[split]):
                    print(f"{split}_recall@{k}: {report.recall[split][k]:.4f}")
            print(f"ndcg@{report.ndcg_k}: {report.ndcg:.4f}")
        else:  # pragma: no cover - argparse enforces the choices
            raise ConfigError(f"unknown command {args.command!r}")
        return EXIT_OK
    except (ConfigError, LogFormatError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
