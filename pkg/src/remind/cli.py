"""Command-line entry point: ``remind <command> --config cfg.yaml``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import CapabilityError, OracleError, RemindError

logger = logging.getLogger("remind")

EXIT_OK, EXIT_DATA, EXIT_ORACLE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_DATA, f"{self.prog}: error: {message}\n")


def _common(p):
    p.add_argument("--config", required=True, help="YAML experiment config")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="override the output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="remind", description="Audit unlearning with input-loss-landscape features.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, help_text in [
        ("run", "full pipeline: features, classifiers, baselines, report"),
        ("plot", "feature histograms from an existing features.csv"),
        ("validate-config", "check a config and print a summary"),
        ("warm-cache", "issue every oracle query without evaluating"),
        ("score-baselines", "scalar baselines only"),
    ]:
        p = sub.add_parser(name, help=help_text)
        _common(p)
        if name == "plot":
            p.add_argument("--features", help="features CSV (default: <out>/features.csv)")
            p.add_argument("--bins", type=int, help="bin count (default from config)")
    return parser


def _load(args):
    from .config import load_config

    overrides = {"seed": args.seed}
    if args.out:
        overrides["output_dir"] = str(Path(args.out).resolve())
    return load_config(args.config, overrides)


def _summary(cfg) -> str:
    lines = [
        f"config_hash: {cfg.config_hash()}",
        f"seed: {cfg.seed}",
        f"oracle: {cfg.oracle_kind} {cfg.oracle_url or cfg.cache_path or cfg.synthetic_profiles_path}",
        f"splits: {', '.join(f'{k}={v}' for k, v in cfg.split_paths.items())}",
        f"perturbation: p={cfg.p} m={cfg.m} K={cfg.K} max_tokens={cfg.max_tokens}",
        f"classifiers: {', '.join(cfg.classifiers) or '-'}",
        f"baselines: {', '.join(cfg.baselines) or '-'}",
        f"views: {', '.join(cfg.views)}",
        f"output_dir: {cfg.resolve(cfg.output_dir)}",
    ]
    return "\n".join(lines)


def dispatch(args) -> int:
    from . import runner
    from .histograms import emit_feature_histograms

    cfg = _load(args)
    if args.command == "validate-config":
        print(_summary(cfg))
    elif args.command == "run":
        report = runner.run_experiment(cfg)
        print(report.to_text(), end="")
        logger.info("cache hits=%s misses=%s live_calls=%s", report.cache_stats.get("hits"),
                    report.cache_stats.get("misses"), report.cache_stats.get("live_calls"))
    elif args.command == "warm-cache":
        stats = runner.warm_cache(cfg)
        logger.info("cache hits=%s misses=%s live_calls=%s", stats.get("hits"), stats.get("misses"),
                    stats.get("live_calls"))
    elif args.command == "score-baselines":
        print(runner.score_baselines_only(cfg).to_text(), end="")
    elif args.command == "plot":
        out = cfg.resolve(cfg.output_dir)
        features = Path(args.features) if args.features else out / "features.csv"
        for path in emit_feature_histograms(features, out / "histograms", args.bins or cfg.histogram_bins):
            print(path)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return dispatch(args)
    except OracleError as exc:
        logger.error("oracle failure: %s (completed calls are cached; rerun to resume)", exc)
        return EXIT_ORACLE
    except (RemindError, CapabilityError, OSError) as exc:
        logger.error("%s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
