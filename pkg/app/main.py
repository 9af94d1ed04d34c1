import argparse
import logging
import sys
from collections.abc import Callable, Sequence
from pathlib import Path
from typing import Any

from app.core.config import PipelineConfig, load_config
from app.core.errors import EXIT_OK, CloakwatchError, ConfigError
from app.schemas.dns import ResolverMode
from app.schemas.features import Target
from app.services import fetch_service, openwpm_service, pipeline_service
from app.services.ingest_service import REFERENCE_SUMMARIES

logger = logging.getLogger("app.main")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(level: str) -> None:
    root = logging.getLogger()
    if not root.handlers:  # don't double-add on repeated main() calls
        h = logging.StreamHandler(sys.stdout)
        h.setFormatter(logging.Formatter(LOG_FORMAT))
        root.addHandler(h)
    root.setLevel(level)


def _cmd_convert(config: PipelineConfig, args: argparse.Namespace) -> None:
    openwpm_service.convert_openwpm(args.db, args.output, metadata_csv=args.metadata)


def _cmd_fetch(config: PipelineConfig, args: argparse.Namespace) -> None:
    url = args.url or config.dataset_url
    if not url:
        raise ConfigError("fetch needs a dataset URL (--url or dataset_url in the config)")
    fetch_service.download(url, args.dest)


COMMANDS: dict[str, Callable[[PipelineConfig, argparse.Namespace], Any]] = {
    "label": lambda config, _: pipeline_service.cmd_label(config),
    "features": lambda config, _: pipeline_service.cmd_features(config),
    "train": lambda config, _: pipeline_service.cmd_train(config),
    "evaluate": lambda config, _: pipeline_service.cmd_evaluate(config),
    "importance": lambda config, _: pipeline_service.cmd_importance(config),
    "drift": lambda config, _: pipeline_service.cmd_drift(config),
    "summary": lambda config, _: pipeline_service.cmd_summary(config),
    "convert": _cmd_convert,
    "fetch": _cmd_fetch,
}

# argparse dest -> PipelineConfig field
_OVERRIDES = {
    "crawl": "crawl_path",
    "fdns": "fdns_path",
    "filters": "filter_paths",
    "dictionary": "dictionary_path",
    "labeled": "labeled_path",
    "train_data": "train_data_path",
    "test_data": "test_data_path",
    "out": "output_dir",
    "target": "target",
    "seed": "seed",
    "resolver": "resolver",
    "upstream": "upstream",
    "reference": "reference",
    "log_level": "log_level",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML config file")
    common.add_argument("--crawl", type=Path, help="crawl JSONL file")
    common.add_argument("--fdns", type=Path, help="forward-DNS JSONL file")
    common.add_argument(
        "--filters", type=Path, action="append", help="filter list file (repeatable)"
    )
    common.add_argument("--dictionary", type=Path, help="English word list")
    common.add_argument("--labeled", type=Path, help="labeled JSONL file")
    common.add_argument("--train-data", type=Path, help="labeled dataset to train on (drift)")
    common.add_argument("--test-data", type=Path, help="labeled dataset to test on (drift)")
    common.add_argument("--target", choices=[t.value for t in Target])
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--resolver", choices=[m.value for m in ResolverMode])
    common.add_argument("--upstream", help="DNS server as addr[:port]")
    common.add_argument("--reference", choices=sorted(REFERENCE_SUMMARIES))
    common.add_argument(
        "--log-level", type=str.upper, choices=["DEBUG", "INFO", "WARNING", "ERROR"]
    )

    parser = argparse.ArgumentParser(
        prog="cloakwatch",
        description="Detect CNAME-cloaking-based web tracking in crawl data.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("label", parents=[common], help="resolve and label a crawl")
    sub.add_parser("features", parents=[common], help="export the encoded feature matrix")
    sub.add_parser("train", parents=[common], help="compare, tune and train the voting model")
    sub.add_parser("evaluate", parents=[common], help="score models and filter-list baselines")
    sub.add_parser("importance", parents=[common], help="permutation feature importance")
    sub.add_parser("drift", parents=[common], help="train on one dataset, test on another")
    sub.add_parser("summary", parents=[common], help="dataset summary table")

    convert = sub.add_parser("convert", parents=[common], help="crawler SQLite to crawl JSONL")
    convert.add_argument("--db", type=Path, required=True, help="crawler SQLite database")
    convert.add_argument("--metadata", type=Path, help="site metadata CSV")
    convert.add_argument("output", type=Path, help="crawl JSONL to write")

    fetch = sub.add_parser("fetch", parents=[common], help="download a published dataset")
    fetch.add_argument("--url", help="dataset archive URL")
    fetch.add_argument("dest", type=Path, help="file to write")
    return parser


def config_from_args(args: argparse.Namespace) -> PipelineConfig:
    overrides = {field: getattr(args, dest, None) for dest, field in _OVERRIDES.items()}
    return load_config(args.config, **overrides)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level or "INFO")

    try:
        config = config_from_args(args)
        configure_logging(config.log_level)
        pipeline_service.write_effective_config(config)
        COMMANDS[args.command](config, args)
    except CloakwatchError as exc:
        logger.error("%s failed: %s", args.command, exc.detail)
        return exc.exit_code
    except Exception:
        logger.exception("%s failed unexpectedly", args.command)
        return 1
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
