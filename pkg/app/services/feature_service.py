import logging
import math
from collections import Counter
from collections.abc import Sequence
from pathlib import Path

import numpy as np
import pandas as pd

from app.core.domains import DomainParser, normalize_fqdn
from app.core.errors import EmptyInputError, EmptySiteError, InputFileError, SchemaMismatchError
from app.schemas.crawl import RequestRecord, SiteRecord
from app.schemas.features import (
    FEATURE_TYPES,
    OTHER,
    EncodedMatrix,
    FeatureSchema,
    PartyKind,
    RequestFeatures,
    SiteFeatures,
    Target,
)
from app.schemas.filters import FilterList
from app.schemas.labels import LabeledDataset
from app.services.filterlist_service import prefix_in_blacklist

logger = logging.getLogger(__name__)

SCRIPT_CONTENT_TYPE = "script"

Instance = SiteFeatures | RequestFeatures


def classify_party(request_host: str, site_domain: str, parser: DomainParser) -> PartyKind:
    host = normalize_fqdn(request_host)
    site_registrable = parser.registrable(site_domain)
    if host == site_registrable:
        return PartyKind.first_domain
    if parser.registrable(host) == site_registrable:
        return PartyKind.first_subdomain
    return PartyKind.third


def metric_entropy(s: str) -> float:
    """Shannon entropy (bits) of the character distribution, per character."""
    if not s:
        raise EmptyInputError("metric entropy of an empty string is undefined")
    counts = np.fromiter(Counter(s).values(), dtype=np.float64)
    probabilities = counts / len(s)
    entropy = float(-np.dot(probabilities, np.log2(probabilities))) + 0.0
    return entropy / len(s)


def subdomain_prefix(host: str, parser: DomainParser) -> tuple[str, list[str]]:
    labels = list(parser.prefix_labels(host))
    return "".join(labels), labels


def load_dictionary(path: Path) -> frozenset[str]:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise InputFileError(f"Cannot read dictionary {path}: {exc}") from exc
    words = {
        line.strip().lower()
        for line in text.splitlines()
        if line.strip() and not line.startswith("#")
    }
    logger.debug("Loaded %d dictionary words from %s", len(words), path)
    return frozenset(words)


def site_features(site: SiteRecord, parser: DomainParser) -> SiteFeatures:
    num_url = len(site.requests)
    if num_url == 0:
        raise EmptySiteError(f"site {site.site_id} has no requests")

    num_3rd = 0
    num_script = 0
    num_xhr = 0
    num_3rd_window = 0
    for request in site.requests:
        if classify_party(request.host, site.domain, parser) is PartyKind.third:
            num_3rd += 1
        if request.content_type == SCRIPT_CONTENT_TYPE:
            num_script += 1
        if request.is_xhr:
            num_xhr += 1
        if request.is_third_party_window:
            num_3rd_window += 1

    return SiteFeatures(
        num_url=num_url,
        num_1st=num_url - num_3rd,
        num_3rd=num_3rd,
        num_script=num_script,
        pct_script_call=min(1.0, site.script_call_count / num_url),
        pct_xhr=num_xhr / num_url,
        pct_3rd_window=num_3rd_window / num_url,
        ranking=site.ranking,
        country=site.country,
        category=site.category,
    )


def request_features(
    request: RequestRecord,
    dictionary: frozenset[str],
    lists: FilterList,
    parser: DomainParser,
) -> RequestFeatures:
    host = request.host
    prefix, labels = subdomain_prefix(host, parser)
    leftmost = labels[0].lower() if labels else ""

    return RequestFeatures(
        method=request.method,
        is_xhr=request.is_xhr,
        content_type=request.content_type,
        len_url=len(request.url),
        len_sub=len(host),
        len_prefix_sub=len(prefix),
        num_prefix_sub=len(labels),
        prefix_sub_blacklist=leftmost != "" and prefix_in_blacklist(lists, leftmost),
        is_sub_dic=leftmost != "" and leftmost in dictionary,
        entropy_url=metric_entropy(request.url),
        entropy_sub=metric_entropy(host),
        entropy_prefix_sub=metric_entropy(prefix) if prefix else 0.0,
    )


def site_instances(
    dataset: LabeledDataset, parser: DomainParser
) -> tuple[list[str], list[SiteFeatures], list[int]]:
    ids: list[str] = []
    rows: list[SiteFeatures] = []
    labels: list[int] = []
    for labeled in dataset.sites:
        if not labeled.site.requests:
            continue
        ids.append(labeled.site.site_id)
        rows.append(site_features(labeled.site, parser))
        labels.append(int(labeled.label))
    return ids, rows, labels


def request_instances(
    dataset: LabeledDataset,
    dictionary: frozenset[str],
    lists: FilterList,
    parser: DomainParser,
    *,
    negative_ratio: float | None,
    seed: int,
) -> tuple[list[str], list[RequestFeatures], list[int]]:
    """
    All positive requests plus seeded negatives at `negative_ratio` times
    the positive count (all negatives when the ratio is None).
    """
    positives: list[tuple[int, str, RequestRecord]] = []
    negatives: list[tuple[int, str, RequestRecord]] = []
    for labeled_site in dataset.sites:
        for index, labeled in enumerate(labeled_site.requests):
            entry = (
                len(positives) + len(negatives),
                f"{labeled_site.site.site_id}#{index}",
                labeled.request,
            )
            (positives if labeled.label else negatives).append(entry)

    if negative_ratio is not None:
        wanted = min(len(negatives), math.ceil(negative_ratio * len(positives)))
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(len(negatives), size=wanted, replace=False))
        negatives = [negatives[i] for i in keep]

    chosen = sorted(
        [(order, key, request, 1) for order, key, request in positives]
        + [(order, key, request, 0) for order, key, request in negatives]
    )
    ids = [key for _, key, _, _ in chosen]
    rows = [request_features(request, dictionary, lists, parser) for _, _, request, _ in chosen]
    labels = [label for _, _, _, label in chosen]
    logger.info(
        "Request instances: %d positive, %d negative", len(positives), len(negatives)
    )
    return ids, rows, labels


def build_schema(instances: Sequence[Instance], target: Target, top_k: int = 20) -> FeatureSchema:
    feature_type = FEATURE_TYPES[target]
    vocabularies: dict[str, tuple[str, ...]] = {}
    for name in feature_type.categorical_fields:
        counts = Counter(
            value for value in (getattr(row, name) for row in instances) if value != OTHER
        )
        ranked = sorted(counts.items(), key=lambda item: (-item[1], item[0]))
        vocabularies[name] = tuple(value for value, _ in ranked[:top_k])
    return FeatureSchema(
        target=target, numeric=feature_type.numeric_fields, vocabularies=vocabularies
    )


def encode(
    instances: Sequence[Instance],
    schema: FeatureSchema,
    labels: Sequence[int] | None = None,
    instance_ids: Sequence[str] = (),
) -> EncodedMatrix:
    feature_type = FEATURE_TYPES[schema.target]
    if schema.numeric != feature_type.numeric_fields or set(schema.vocabularies) != set(
        feature_type.categorical_fields
    ):
        raise SchemaMismatchError(f"schema does not describe {schema.target} features")
    if labels is not None and len(labels) != len(instances):
        raise SchemaMismatchError("labels do not align with instances")
    if instance_ids and len(instance_ids) != len(instances):
        raise SchemaMismatchError("instance ids do not align with instances")

    offsets: dict[str, dict[str, int]] = {}
    other_column: dict[str, int] = {}
    column = len(schema.numeric)
    for name, values in sorted(schema.vocabularies.items()):
        offsets[name] = {value: column + i for i, value in enumerate(values)}
        column += len(values)
        other_column[name] = column
        column += 1

    X = np.zeros((len(instances), column), dtype=np.float64)
    for row, instance in enumerate(instances):
        if not isinstance(instance, feature_type):
            raise SchemaMismatchError(
                f"expected {feature_type.__name__}, got {type(instance).__name__}"
            )
        for j, name in enumerate(schema.numeric):
            X[row, j] = float(getattr(instance, name))
        for name, positions in offsets.items():
            X[row, positions.get(getattr(instance, name), other_column[name])] = 1.0

    y = np.asarray(labels if labels is not None else [0] * len(instances), dtype=np.int64)
    return EncodedMatrix(schema=schema, X=X, y=y, instance_ids=tuple(instance_ids))


def export_csv(matrix: EncodedMatrix, path: Path) -> None:
    frame = pd.DataFrame(matrix.X, columns=matrix.columns)
    if matrix.instance_ids:
        frame.insert(0, "instance_id", list(matrix.instance_ids))
    frame["label"] = matrix.y
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)
