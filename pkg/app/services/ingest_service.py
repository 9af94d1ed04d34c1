import gzip
import io
import json
import logging
from collections.abc import Iterable, Iterator, Sequence
from contextlib import contextmanager
from pathlib import Path
from typing import Final, Literal, TextIO

from pydantic import ValidationError

from app.core.domains import DomainParser, normalize_fqdn
from app.core.errors import InputFileError, SchemaError
from app.schemas.crawl import CrawlLine, CrawlLoad, RequestRecord, SiteMeta, SiteRecord
from app.schemas.dns import MAX_CHAIN_HOPS, CnameChain, FdnsIndex, FdnsRecord
from app.schemas.features import PartyKind
from app.schemas.summary import DatasetSummary, SummaryDeviation
from app.services.feature_service import classify_party

logger = logging.getLogger(__name__)

_GZIP_MAGIC: Final = b"\x1f\x8b"

# Counts of the two published crawls (sites, requests, party split).
REFERENCE_SUMMARIES: Final = {
    "2018": DatasetSummary(
        total_sites=2010,
        total_requests=298649,
        first_party_domain=60278,
        first_party_subdomain=52476,
        third_party=185896,
        positive_sites=1005,
        positive_requests=2546,
    ),
    "2020": DatasetSummary(
        total_sites=3524,
        total_requests=433774,
        first_party_domain=120689,
        first_party_subdomain=36399,
        third_party=276686,
        positive_sites=1532,
        positive_requests=4047,
    ),
}


@contextmanager
def open_text(path: Path) -> Iterator[TextIO]:
    """Open a plain or gzip-compressed UTF-8 text file."""
    try:
        with path.open("rb") as head:
            compressed = head.read(2) == _GZIP_MAGIC
        if compressed:
            handle: TextIO = io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8")
        else:
            handle = path.open("r", encoding="utf-8")
    except OSError as exc:
        raise InputFileError(f"Cannot read {path}: {exc}") from exc

    with handle:
        yield handle


def validation_detail(exc: ValidationError) -> str:
    first = exc.errors()[0]
    location = ".".join(str(part) for part in first.get("loc", ())) or "line"
    return f"{location}: {first.get('msg', 'invalid value')}"


def read_crawl(lines: Iterable[str]) -> CrawlLoad:
    order: list[str] = []
    domains: dict[str, str] = {}
    metas: dict[str, SiteMeta] = {}
    requests: dict[str, list[RequestRecord]] = {}
    malformed: list[int] = []

    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            payload = json.loads(line)
        except json.JSONDecodeError:
            malformed.append(line_no)
            continue
        if not isinstance(payload, dict):
            malformed.append(line_no)
            continue

        try:
            row = CrawlLine.model_validate(payload)
            request = RequestRecord(
                site_id=row.site_id,
                url=row.url,
                method=row.method,
                content_type=row.content_type,
                is_xhr=row.is_xhr,
                is_third_party_window=row.is_third_party_window,
                timestamp=row.timestamp,
            )
        except ValidationError as exc:
            raise SchemaError(validation_detail(exc), line_no=line_no) from exc

        site_domain = normalize_fqdn(row.site_domain)
        known_domain = domains.get(row.site_id)
        if known_domain is None:
            order.append(row.site_id)
            domains[row.site_id] = site_domain
            requests[row.site_id] = []
        elif known_domain != site_domain:
            raise SchemaError(
                f"site {row.site_id!r} changes domain from {known_domain!r} to {site_domain!r}",
                line_no=line_no,
            )
        if row.site_meta is not None and row.site_id not in metas:
            metas[row.site_id] = row.site_meta
        requests[row.site_id].append(request)

    sites = []
    for site_id in order:
        meta = metas.get(site_id, SiteMeta())
        sites.append(
            SiteRecord(
                site_id=site_id,
                domain=domains[site_id],
                ranking=meta.ranking,
                country=meta.country,
                category=meta.category,
                script_call_count=meta.script_call_count,
                requests=tuple(requests[site_id]),
            )
        )
    return CrawlLoad(sites=sites, malformed_lines=malformed)


def load_crawl(path: Path, format: Literal["jsonl"] = "jsonl") -> list[SiteRecord]:
    if format != "jsonl":
        raise InputFileError(f"Unsupported crawl format: {format}")
    with open_text(path) as handle:
        loaded = read_crawl(handle)

    if loaded.malformed_lines:
        preview = ", ".join(str(n) for n in loaded.malformed_lines[:10])
        logger.warning(
            "Skipped %d malformed line(s) in %s (first: %s)",
            len(loaded.malformed_lines),
            path,
            preview,
        )
    logger.info(
        "Loaded %d sites / %d requests from %s",
        len(loaded.sites),
        sum(len(site.requests) for site in loaded.sites),
        path,
    )
    return loaded.sites


def request_line(
    site: SiteRecord, request: RequestRecord, *, with_meta: bool
) -> dict[str, object]:
    line: dict[str, object] = {
        "site_id": site.site_id,
        "site_domain": site.domain,
        "url": request.url,
        "method": request.method,
        "content_type": request.content_type,
        "is_xhr": request.is_xhr,
        "is_third_party_window": request.is_third_party_window,
        "timestamp": request.timestamp,
    }
    if with_meta:
        line["site_meta"] = site.meta.model_dump()
    return line


def dump_crawl(sites: Sequence[SiteRecord], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        for site in sites:
            for index, request in enumerate(site.requests):
                handle.write(json.dumps(request_line(site, request, with_meta=index == 0)))
                handle.write("\n")


def build_chains(
    edges: dict[str, str], names: Iterable[str] | None = None
) -> dict[str, CnameChain]:
    chains: dict[str, CnameChain] = {}
    owners = edges.keys() if names is None else [normalize_fqdn(n) for n in names]

    for owner in owners:
        if owner not in edges or owner in chains:
            continue
        targets: list[str] = []
        seen = {owner}
        current = owner
        while current in edges:
            if len(targets) == MAX_CHAIN_HOPS:
                logger.warning(
                    "CNAME chain for %s exceeds %d hops; truncated", owner, MAX_CHAIN_HOPS
                )
                break
            target = edges[current]
            if target in seen:
                logger.warning("CNAME loop at %s while following %s", target, owner)
                break
            targets.append(target)
            seen.add(target)
            current = target
        chains[owner] = CnameChain(owner=owner, targets=tuple(targets))
    return chains


def load_fdns(path: Path, names: Iterable[str] | None = None) -> FdnsIndex:
    edges: dict[str, str] = {}
    with open_text(path) as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = FdnsRecord.model_validate_json(line)
            except ValidationError as exc:
                raise SchemaError(validation_detail(exc), line_no=line_no) from exc
            if record.type.lower() != "cname":
                continue
            name = normalize_fqdn(record.name)
            value = normalize_fqdn(record.value)
            if not name or not value or name == value:
                continue
            edges.setdefault(name, value)

    index = FdnsIndex(chains=build_chains(edges, names))
    logger.info("Loaded %d CNAME chains from %s", len(index), path)
    return index


def dataset_summary(
    sites: Sequence[SiteRecord], parser: DomainParser
) -> DatasetSummary:
    counts = dict.fromkeys(PartyKind, 0)
    for site in sites:
        for request in site.requests:
            counts[classify_party(request.host, site.domain, parser)] += 1

    return DatasetSummary(
        total_sites=len(sites),
        total_requests=sum(counts.values()),
        first_party_domain=counts[PartyKind.first_domain],
        first_party_subdomain=counts[PartyKind.first_subdomain],
        third_party=counts[PartyKind.third],
    )


def validate_summary(
    summary: DatasetSummary, reference: DatasetSummary, tolerance: float = 0.01
) -> list[SummaryDeviation]:
    deviations: list[SummaryDeviation] = []
    observed = summary.model_dump()
    for metric, expected in reference.model_dump().items():
        value = observed.get(metric)
        if expected is None or value is None:
            continue
        error = abs(value - expected) / expected if expected else float(value != 0)
        if error > tolerance:
            deviations.append(
                SummaryDeviation(
                    metric=metric, expected=expected, observed=value, relative_error=error
                )
            )
    return deviations
