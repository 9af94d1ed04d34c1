import json
import logging
from collections.abc import Sequence
from pathlib import Path

from pydantic import ValidationError

from app.core.dns import Resolver
from app.core.domains import DomainParser, normalize_fqdn
from app.core.errors import ResolveError, SchemaError
from app.schemas.crawl import RequestRecord, SiteMeta, SiteRecord
from app.schemas.dns import CnameChain
from app.schemas.features import PartyKind
from app.schemas.filters import FilterList, FilterRule
from app.schemas.labels import LabeledDataset, LabeledLine, LabeledRequest, LabeledSite
from app.services.feature_service import classify_party
from app.services.filterlist_service import match_any
from app.services.ingest_service import open_text, request_line, validation_detail
from app.workers.resolver import resolve_names

logger = logging.getLogger(__name__)


def resolve(name: str, resolver: Resolver) -> CnameChain:
    return resolver.resolve(normalize_fqdn(name))


def label_request(
    request: RequestRecord,
    site_domain: str,
    chain: CnameChain | None,
    lists: FilterList,
    parser: DomainParser,
) -> LabeledRequest:
    """
    Positive iff the host is a first-party subdomain whose CNAME chain
    reaches a name blocked by the tracker lists. Only chain targets are
    matched, never the owner itself.
    """
    party = classify_party(request.host, site_domain, parser)
    kept_chain = chain if chain else None
    if party is not PartyKind.first_subdomain or kept_chain is None:
        return _with_hit(request, party, kept_chain, None)
    return _with_hit(request, party, kept_chain, match_any(lists, kept_chain.targets))


def _with_hit(
    request: RequestRecord,
    party: PartyKind,
    chain: CnameChain | None,
    hit: tuple[str, FilterRule] | None,
) -> LabeledRequest:
    if hit is None:
        return LabeledRequest(request=request, party=party, cname_chain=chain)

    _, rule = hit
    return LabeledRequest(
        request=request,
        label=True,
        party=party,
        matched_rule=rule.raw,
        cname_chain=chain,
    )


def label_site(site: SiteRecord, labeled: Sequence[LabeledRequest]) -> bool:
    if len(labeled) != len(site.requests):
        raise SchemaError(f"site {site.site_id} has unlabeled requests")
    return any(request.label for request in labeled)


def label_dataset(
    sites: Sequence[SiteRecord],
    resolver: Resolver,
    lists: FilterList,
    parser: DomainParser,
    *,
    concurrency: int = 1,
) -> LabeledDataset:
    hosts: dict[str, None] = {}
    for site in sites:
        for request in site.requests:
            if classify_party(request.host, site.domain, parser) is PartyKind.first_subdomain:
                hosts.setdefault(request.host)

    logger.info("Resolving %d first-party subdomains", len(hosts))
    resolved = resolve_names(list(hosts), resolver, concurrency=concurrency)

    # A host shared by many requests has its chain matched once.
    hits: dict[str, tuple[str, FilterRule] | None] = {}
    labeled_sites: list[LabeledSite] = []
    for site in sites:
        labeled: list[LabeledRequest] = []
        for request in site.requests:
            party = classify_party(request.host, site.domain, parser)
            outcome = resolved.get(request.host) if party is PartyKind.first_subdomain else None
            if isinstance(outcome, ResolveError):
                labeled.append(LabeledRequest(request=request, party=party, resolve_failed=True))
                continue
            chain = outcome if outcome else None
            if chain is not None and request.host not in hits:
                hits[request.host] = match_any(lists, chain.targets)
            hit = hits[request.host] if chain is not None else None
            labeled.append(_with_hit(request, party, chain, hit))
        labeled_sites.append(
            LabeledSite(site=site, label=label_site(site, labeled), requests=tuple(labeled))
        )

    dataset = LabeledDataset(sites=labeled_sites)
    logger.info(
        "Labeled %d sites: %d positive sites, %d positive requests, %d resolve failures",
        len(labeled_sites),
        dataset.positive_sites,
        dataset.positive_requests,
        dataset.resolve_failures,
    )
    return dataset


def _labeled_line(labeled_site: LabeledSite, index: int) -> dict[str, object]:
    site = labeled_site.site
    if not labeled_site.requests:
        return {
            "site_id": site.site_id,
            "site_domain": site.domain,
            "site_meta": site.meta.model_dump(),
            "site_label": labeled_site.label,
        }

    labeled = labeled_site.requests[index]
    line = request_line(site, labeled.request, with_meta=index == 0)
    line.update(
        label=labeled.label,
        party=labeled.party.value,
        matched_rule=labeled.matched_rule,
        cname_chain=list(labeled.cname_chain.targets) if labeled.cname_chain else None,
        resolve_failed=labeled.resolve_failed,
    )
    if index == 0:
        line["site_label"] = labeled_site.label
    return line


def dump_labeled(dataset: LabeledDataset, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        for labeled_site in dataset.sites:
            for index in range(max(1, len(labeled_site.requests))):
                handle.write(json.dumps(_labeled_line(labeled_site, index)))
                handle.write("\n")


def _labeled_request(line: LabeledLine, request: RequestRecord) -> LabeledRequest:
    if line.party is None:
        raise ValueError("labeled request line is missing 'party'")
    chain = (
        CnameChain(owner=request.host, targets=tuple(line.cname_chain))
        if line.cname_chain
        else None
    )
    return LabeledRequest(
        request=request,
        label=line.label,
        party=line.party,
        matched_rule=line.matched_rule,
        cname_chain=chain,
        resolve_failed=line.resolve_failed,
    )


def load_labeled(path: Path) -> LabeledDataset:
    order: list[str] = []
    domains: dict[str, str] = {}
    metas: dict[str, SiteMeta] = {}
    declared: dict[str, bool] = {}
    requests: dict[str, list[LabeledRequest]] = {}

    with open_text(path) as handle:
        for line_no, text in enumerate(handle, start=1):
            if not text.strip():
                continue
            try:
                line = LabeledLine.model_validate_json(text)
                labeled = None
                if line.url is not None:
                    request = RequestRecord(
                        site_id=line.site_id,
                        url=line.url,
                        method=line.method,
                        content_type=line.content_type,
                        is_xhr=line.is_xhr,
                        is_third_party_window=line.is_third_party_window,
                        timestamp=line.timestamp,
                    )
                    labeled = _labeled_request(line, request)
            except ValidationError as exc:
                raise SchemaError(validation_detail(exc), line_no=line_no) from exc
            except ValueError as exc:
                raise SchemaError(str(exc), line_no=line_no) from exc

            site_domain = normalize_fqdn(line.site_domain)
            if line.site_id not in domains:
                order.append(line.site_id)
                domains[line.site_id] = site_domain
                requests[line.site_id] = []
            elif domains[line.site_id] != site_domain:
                raise SchemaError(
                    f"site {line.site_id!r} changes domain", line_no=line_no
                )
            if line.site_meta is not None:
                metas.setdefault(line.site_id, line.site_meta)
            if line.site_label is not None:
                declared.setdefault(line.site_id, line.site_label)
            if labeled is not None:
                requests[line.site_id].append(labeled)

    sites: list[LabeledSite] = []
    for site_id in order:
        meta = metas.get(site_id, SiteMeta())
        labeled_requests = tuple(requests[site_id])
        site = SiteRecord(
            site_id=site_id,
            domain=domains[site_id],
            ranking=meta.ranking,
            country=meta.country,
            category=meta.category,
            script_call_count=meta.script_call_count,
            requests=tuple(item.request for item in labeled_requests),
        )
        label = label_site(site, labeled_requests)
        if declared.get(site_id, label) != label:
            raise SchemaError(f"site {site_id!r} label disagrees with its requests")
        sites.append(LabeledSite(site=site, label=label, requests=labeled_requests))

    logger.info("Loaded %d labeled sites from %s", len(sites), path)
    return LabeledDataset(sites=sites)
