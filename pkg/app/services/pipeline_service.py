import json
import logging
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from app.core.config import PipelineConfig
from app.core.dns import LiveResolver, OfflineResolver, Resolver, build_dns_resolver
from app.core.domains import DomainParser
from app.core.errors import ConfigError, InputFileError
from app.schemas.dns import ResolverMode
from app.schemas.features import EncodedMatrix, FeatureSchema, PartyKind, Target
from app.schemas.filters import FilterList
from app.schemas.labels import LabeledDataset, LabeledRequest
from app.schemas.learn import (
    VOTING_MEMBERS,
    Algorithm,
    HyperParams,
    Metrics,
    TrainedModel,
    VotingModel,
)
from app.schemas.summary import DatasetSummary
from app.services import feature_service, ingest_service, labeler_service, learn_service
from app.services.feature_service import Instance
from app.services.filterlist_service import combine_lists, load_list
from app.services.model_store import load_model, save_model

logger = logging.getLogger(__name__)

LABELED_NAME = "labeled.jsonl"
VOTE_NAME = "vote"


@dataclass(frozen=True)
class TargetData:
    """Feature instances of one target before encoding, in dataset order."""

    target: Target
    ids: list[str]
    instances: list[Instance]
    labels: list[int]

    def encode(self, wanted: Sequence[str], schema: FeatureSchema) -> EncodedMatrix:
        position = {instance_id: i for i, instance_id in enumerate(self.ids)}
        rows = [position[instance_id] for instance_id in wanted]
        return feature_service.encode(
            [self.instances[i] for i in rows],
            schema,
            labels=[self.labels[i] for i in rows],
            instance_ids=list(wanted),
        )


@dataclass(frozen=True)
class Split:
    train_ids: list[str]
    test_ids: list[str]


@dataclass(frozen=True)
class TrainOutcome:
    vote: VotingModel
    default_members: dict[Algorithm, TrainedModel]
    tuned_params: dict[Algorithm, HyperParams]
    report: dict[str, Any]


# Artifact helpers


def provenance(config: PipelineConfig) -> dict[str, Any]:
    return {
        "seed": config.seed,
        "test_fraction": config.test_fraction,
        "k_folds": config.k_folds,
        "request_negative_ratio": config.request_negative_ratio,
        "top_categories": config.top_categories,
        "filter_sources": [path.stem for path in config.filter_paths],
    }


def write_json(path: Path, payload: dict[str, Any], config: PipelineConfig) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    document = {**payload, "provenance": provenance(config)}
    path.write_text(json.dumps(document, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info("Wrote %s", path)
    return path


def write_sidecar(path: Path, config: PipelineConfig, **extra: Any) -> Path:
    """`<name>.meta.json` next to a JSONL or CSV artifact."""
    return write_json(path.with_suffix(".meta.json"), {"artifact": path.name, **extra}, config)


def write_csv(path: Path, rows: list[dict[str, Any]], config: PipelineConfig) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows).to_csv(path, index=False)
    write_sidecar(path, config)
    logger.info("Wrote %s", path)
    return path


def write_effective_config(config: PipelineConfig) -> Path:
    path = config.output_dir / "effective_config.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = config.model_dump(mode="json")
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def target_dir(config: PipelineConfig, target: Target) -> Path:
    return config.output_dir / target.value


def model_path(config: PipelineConfig, target: Target, name: str) -> Path:
    return target_dir(config, target) / "models" / f"{name}.json.gz"


# Shared inputs


def domain_parser(config: PipelineConfig) -> DomainParser:
    return DomainParser(config.psl_path)


def filter_lists(config: PipelineConfig) -> list[FilterList]:
    paths = config.require("filter_paths")
    return [load_list(path) for path in paths]


def combined_lists(config: PipelineConfig) -> FilterList:
    return combine_lists(filter_lists(config))


def labeled_input(config: PipelineConfig) -> Path:
    return config.labeled_path or config.output_dir / LABELED_NAME


def build_resolver(
    config: PipelineConfig, sites: Sequence[Any], parser: DomainParser
) -> tuple[Resolver, int]:
    if config.resolver is ResolverMode.live:
        client = build_dns_resolver(upstream=config.upstream, timeout=config.dns_timeout)
        return LiveResolver(client), config.resolve_concurrency

    fdns_path = config.fdns_path
    if fdns_path is None:
        raise ConfigError("Offline resolution needs an FDNS file (--fdns)")
    hosts = {
        request.host
        for site in sites
        for request in site.requests
        if feature_service.classify_party(request.host, site.domain, parser)
        is PartyKind.first_subdomain
    }
    index = ingest_service.load_fdns(fdns_path, names=sorted(hosts))
    return OfflineResolver(index), 1


# label / summary


def summarize(
    config: PipelineConfig, summary: DatasetSummary
) -> dict[str, Any]:
    payload: dict[str, Any] = {"summary": summary.model_dump(), "rows": summary.rows()}
    if config.reference is not None:
        reference = ingest_service.REFERENCE_SUMMARIES.get(config.reference)
        if reference is None:
            raise ConfigError(
                f"Unknown reference {config.reference!r}; "
                f"choose from {', '.join(sorted(ingest_service.REFERENCE_SUMMARIES))}"
            )
        deviations = ingest_service.validate_summary(summary, reference)
        for deviation in deviations:
            logger.warning(
                "%s deviates from the %s reference: expected %d, observed %d (%.2f%%)",
                deviation.metric,
                config.reference,
                deviation.expected,
                deviation.observed,
                deviation.relative_error * 100,
            )
        payload["reference"] = config.reference
        payload["deviations"] = [d.model_dump() for d in deviations]

    write_json(config.output_dir / "summary.json", payload, config)
    write_csv(config.output_dir / "summary.csv", summary.rows(), config)
    return payload


def labeled_summary(dataset: LabeledDataset, parser: DomainParser) -> DatasetSummary:
    summary = ingest_service.dataset_summary(dataset.records, parser)
    return summary.model_copy(
        update={
            "positive_sites": dataset.positive_sites,
            "positive_requests": dataset.positive_requests,
        }
    )


def cmd_label(config: PipelineConfig) -> LabeledDataset:
    crawl_path = config.require("crawl_path")
    parser = domain_parser(config)
    lists = combined_lists(config)
    sites = ingest_service.load_crawl(crawl_path)
    resolver, concurrency = build_resolver(config, sites, parser)

    dataset = labeler_service.label_dataset(
        sites, resolver, lists, parser, concurrency=concurrency
    )
    out = config.output_dir / LABELED_NAME
    labeler_service.dump_labeled(dataset, out)
    write_sidecar(
        out,
        config,
        resolver=config.resolver.value,
        resolve_failures=dataset.resolve_failures,
    )
    summarize(config, labeled_summary(dataset, parser))
    return dataset


def cmd_summary(config: PipelineConfig) -> dict[str, Any]:
    parser = domain_parser(config)
    labeled = labeled_input(config)
    if config.labeled_path is not None or (config.crawl_path is None and labeled.is_file()):
        summary = labeled_summary(labeler_service.load_labeled(labeled), parser)
    elif config.crawl_path is not None:
        summary = ingest_service.dataset_summary(
            ingest_service.load_crawl(config.crawl_path), parser
        )
    else:
        raise ConfigError("summary needs --crawl or a labeled dataset (--labeled)")
    return summarize(config, summary)


# features


def target_data(
    config: PipelineConfig,
    dataset: LabeledDataset,
    target: Target,
    parser: DomainParser,
    lists: FilterList | None = None,
) -> TargetData:
    if target is Target.site:
        ids, rows, labels = feature_service.site_instances(dataset, parser)
    else:
        dictionary = feature_service.load_dictionary(config.dictionary_path)
        ids, rows, labels = feature_service.request_instances(
            dataset,
            dictionary,
            lists if lists is not None else combined_lists(config),
            parser,
            negative_ratio=config.request_negative_ratio,
            seed=config.seed,
        )
    if not ids:
        raise InputFileError(f"No {target} instances in the labeled dataset")
    return TargetData(target=target, ids=list(ids), instances=list(rows), labels=list(labels))


def make_split(config: PipelineConfig, data: TargetData) -> Split:
    train_idx, test_idx = learn_service.split_train_test(
        np.asarray(data.labels), config.test_fraction, config.seed
    )
    return Split(
        train_ids=[data.ids[i] for i in train_idx],
        test_ids=[data.ids[i] for i in test_idx],
    )


def load_or_make_split(config: PipelineConfig, data: TargetData) -> Split:
    """
    Reuse `<target>/split.json` when it was drawn with the current seed and
    test fraction and partitions exactly the current instances.
    """
    path = target_dir(config, data.target) / "split.json"
    if path.is_file():
        stored = json.loads(path.read_text(encoding="utf-8"))
        drawn_with = stored.get("provenance", {})
        train_ids, test_ids = stored.get("train", []), stored.get("test", [])
        if (
            drawn_with.get("seed") == config.seed
            and drawn_with.get("test_fraction") == config.test_fraction
            and set(train_ids).isdisjoint(test_ids)
            and set(train_ids) | set(test_ids) == set(data.ids)
        ):
            return Split(train_ids=train_ids, test_ids=test_ids)
        logger.warning("Stored split %s does not match the current run; recomputing", path)

    split = make_split(config, data)
    write_json(path, {"train": split.train_ids, "test": split.test_ids}, config)
    return split


def training_schema(config: PipelineConfig, data: TargetData, split: Split) -> FeatureSchema:
    position = {instance_id: i for i, instance_id in enumerate(data.ids)}
    train_rows = [data.instances[position[i]] for i in split.train_ids]
    return feature_service.build_schema(train_rows, data.target, config.top_categories)


def prepare(
    config: PipelineConfig, target: Target
) -> tuple[LabeledDataset, TargetData, Split, FeatureSchema]:
    parser = domain_parser(config)
    dataset = labeler_service.load_labeled(labeled_input(config))
    data = target_data(config, dataset, target, parser)
    split = load_or_make_split(config, data)
    return dataset, data, split, training_schema(config, data, split)


def cmd_features(config: PipelineConfig) -> EncodedMatrix:
    target = config.target
    _, data, split, schema = prepare(config, target)
    matrix = data.encode(data.ids, schema)
    out = config.output_dir / f"features_{target.value}.csv"
    feature_service.export_csv(matrix, out)
    write_sidecar(
        out,
        config,
        target=target.value,
        schema=schema.model_dump(mode="json"),
        schema_fingerprint=schema.fingerprint,
        train_size=len(split.train_ids),
        test_size=len(split.test_ids),
    )
    logger.info(
        "Encoded %d %s instances into %d columns", len(matrix), target, len(schema.columns)
    )
    return matrix


# train / evaluate / importance


def _grid_winner(
    config: PipelineConfig, target: Target, algorithm: Algorithm, train: EncodedMatrix
) -> tuple[HyperParams, dict[str, Any] | None]:
    grid = config.grids_for(target).get(algorithm)
    if not grid:
        logger.info("No grid for %s; keeping default parameters", algorithm)
        return learn_service.make_params({"seed": config.seed}), None
    result = learn_service.grid_search(
        algorithm, train, grid, config.k_folds, seed=config.seed, n_jobs=config.n_jobs
    )
    return result.best_params, result.model_dump(mode="json")


def fit_target(config: PipelineConfig, target: Target, train: EncodedMatrix) -> TrainOutcome:
    defaults = learn_service.make_params({"seed": config.seed})

    comparison = []
    for algorithm in config.compare_algorithms:
        result = learn_service.cross_validate(
            algorithm, train, defaults, config.k_folds, n_jobs=config.n_jobs
        )
        logger.info(
            "CV %s: mean F1=%.4f std=%.4f", algorithm, result.mean_f1, result.std_f1
        )
        comparison.append(result.model_dump(mode="json"))

    tuned_params: dict[Algorithm, HyperParams] = {}
    searches: dict[str, Any] = {}
    for algorithm in VOTING_MEMBERS[target]:
        params, search = _grid_winner(config, target, algorithm, train)
        tuned_params[algorithm] = params
        if search is not None:
            searches[algorithm.value] = search

    default_members = {
        algorithm: learn_service.train(algorithm, train, defaults, n_jobs=config.n_jobs)
        for algorithm in VOTING_MEMBERS[target]
    }
    vote = learn_service.train_vote(tuned_params, train, n_jobs=config.n_jobs)
    report = {
        "target": target.value,
        "train_size": len(train),
        "comparison": comparison,
        "grid_search": searches,
        "members": [algorithm.value for algorithm in VOTING_MEMBERS[target]],
    }
    return TrainOutcome(
        vote=vote, default_members=default_members, tuned_params=tuned_params, report=report
    )


def cmd_train(config: PipelineConfig) -> TrainOutcome:
    target = config.target
    _, data, split, schema = prepare(config, target)
    train = data.encode(split.train_ids, schema)
    outcome = fit_target(config, target, train)

    write_json(target_dir(config, target) / "cv_report.json", outcome.report, config)
    meta = provenance(config)
    for algorithm, model in outcome.default_members.items():
        save_model(model, model_path(config, target, f"{algorithm.value}.default"), meta)
    for member in outcome.vote.members:
        save_model(member, model_path(config, target, member.algorithm.value), meta)
    save_model(outcome.vote, model_path(config, target, VOTE_NAME), meta)
    return outcome


def _load_vote(config: PipelineConfig, target: Target) -> VotingModel:
    model = load_model(model_path(config, target, VOTE_NAME))
    if not isinstance(model, VotingModel):
        raise InputFileError(f"{model_path(config, target, VOTE_NAME)} is not a voting model")
    return model


def _metrics_row(name: str, variant: str, metrics: Metrics) -> dict[str, Any]:
    return {"model": name, "variant": variant, **metrics.model_dump()}


def _test_requests(dataset: LabeledDataset, test_ids: Sequence[str]) -> list[LabeledRequest]:
    by_id: dict[str, LabeledRequest] = {}
    for labeled_site in dataset.sites:
        for index, labeled in enumerate(labeled_site.requests):
            by_id[f"{labeled_site.site.site_id}#{index}"] = labeled
    return [by_id[instance_id] for instance_id in test_ids]


def cmd_evaluate(config: PipelineConfig) -> list[dict[str, Any]]:
    target = config.target
    dataset, data, split, _ = prepare(config, target)
    vote = _load_vote(config, target)
    test = data.encode(split.test_ids, vote.schema)

    rows: list[dict[str, Any]] = []
    for member in vote.members:
        default_path = model_path(config, target, f"{member.algorithm.value}.default")
        if default_path.is_file():
            default_model = load_model(default_path)
            rows.append(
                _metrics_row(
                    member.algorithm.value, "default", learn_service.evaluate(default_model, test)
                )
            )
        tuned = learn_service.evaluate(member, test)
        rows.append(_metrics_row(member.algorithm.value, "tuned", tuned))
    rows.append(_metrics_row(VOTE_NAME, "tuned", learn_service.evaluate(vote, test)))

    if target is Target.request:
        requests = _test_requests(dataset, split.test_ids)
        for path in config.filter_paths:
            baseline = learn_service.baseline_filterlist(requests, load_list(path))
            rows.append(_metrics_row(f"filterlist:{path.stem}", "baseline", baseline))

    for row in rows:
        logger.info(
            "%s/%s precision=%.3f recall=%.3f F1=%.3f",
            row["model"],
            row["variant"],
            row["precision"],
            row["recall"],
            row["f1"],
        )
    write_json(target_dir(config, target) / "metrics.json", {"metrics": rows}, config)
    write_csv(target_dir(config, target) / "metrics.csv", rows, config)
    return rows


def cmd_importance(config: PipelineConfig) -> dict[str, Any]:
    target = config.target
    _, data, split, _ = prepare(config, target)
    vote = _load_vote(config, target)
    test = data.encode(split.test_ids, vote.schema)

    report = learn_service.permutation_importance(
        vote, test, n_repeats=config.importance_repeats, seed=config.seed
    )
    payload = report.model_dump(mode="json")
    write_json(target_dir(config, target) / "importance.json", payload, config)
    write_csv(
        target_dir(config, target) / "importance.csv",
        [
            {
                "feature": item.feature,
                "median": item.median,
                "q1": item.q1,
                "q3": item.q3,
                "mean": item.mean,
                "std": item.std,
            }
            for item in report.ranked()
        ],
        config,
    )
    return payload


# drift


def cmd_drift(config: PipelineConfig) -> dict[str, Any]:
    """
    Train on dataset A, then score A's hold-out split and the hold-out
    split of dataset B drawn with the same seed. delta = same - cross.
    """
    target = config.target
    parser = domain_parser(config)
    lists = combined_lists(config)
    train_path = config.require("train_data_path")
    test_path = config.require("test_data_path")

    data_a = target_data(config, labeler_service.load_labeled(train_path), target, parser, lists)
    data_b = target_data(config, labeler_service.load_labeled(test_path), target, parser, lists)
    split_a = make_split(config, data_a)
    split_b = make_split(config, data_b)
    schema = training_schema(config, data_a, split_a)

    outcome = fit_target(config, target, data_a.encode(split_a.train_ids, schema))
    same = learn_service.evaluate(outcome.vote, data_a.encode(split_a.test_ids, schema))
    cross = learn_service.evaluate(outcome.vote, data_b.encode(split_b.test_ids, schema))
    delta = {
        name: getattr(same, name) - getattr(cross, name) for name in ("precision", "recall", "f1")
    }
    logger.info(
        "Drift %s: same F1=%.3f cross F1=%.3f delta=%.3f",
        target,
        same.f1,
        cross.f1,
        delta["f1"],
    )

    payload = {
        "target": target.value,
        "train_data": str(train_path),
        "test_data": str(test_path),
        "same": same.model_dump(),
        "cross": cross.model_dump(),
        "delta": delta,
    }
    write_json(target_dir(config, target) / "drift.json", payload, config)
    return payload
