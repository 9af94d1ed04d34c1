import json
from types import SimpleNamespace

import dns.exception
import dns.resolver
import pytest

from app.core.dns import LiveResolver, OfflineResolver, build_dns_resolver, parse_upstream
from app.core.errors import ConfigError, ResolveError, SchemaError
from app.schemas.dns import CnameChain, FdnsIndex
from app.schemas.features import PartyKind
from app.schemas.labels import LabeledSite
from app.services import labeler_service
from app.services.filterlist_service import parse_list
from app.services.ingest_service import build_chains
from app.tests.corpus import FILTER_TEXT, make_request, make_site
from app.workers.resolver import resolve_names


class FakeDnsClient:
    """Stands in for dns.resolver.Resolver, answering from a CNAME map."""

    def __init__(self, edges: dict[str, str], failing: frozenset[str] = frozenset()) -> None:
        self.edges = edges
        self.failing = failing
        self.queries: list[tuple[str, str]] = []

    def resolve(self, name: str, rdtype: str):
        self.queries.append((name, rdtype))
        if name in self.failing:
            raise dns.exception.Timeout()
        if name not in self.edges:
            raise dns.resolver.NXDOMAIN()
        return [SimpleNamespace(target=f"{self.edges[name]}.")]


class FailingResolver:
    def __init__(self, inner, failing: set[str]) -> None:
        self.inner = inner
        self.failing = failing

    def resolve(self, name: str) -> CnameChain:
        if name in self.failing:
            raise ResolveError(f"{name} timed out")
        return self.inner.resolve(name)


def _offline(edges: dict[str, str]) -> OfflineResolver:
    return OfflineResolver(FdnsIndex(chains=build_chains(edges)))


def test_offline_resolve_single_hop():
    resolver = _offline({"a.example.com": "metric.tracker.com"})

    chain = labeler_service.resolve("a.example.com", resolver)

    assert chain.targets == ("metric.tracker.com",)


def test_offline_resolve_absent_name_is_empty():
    chain = labeler_service.resolve("b.example.com", _offline({}))

    assert chain.targets == ()
    assert not chain


def test_offline_resolve_follows_chain():
    chain = labeler_service.resolve("A.", _offline({"a": "b", "b": "c"}))

    assert chain.targets == ("b", "c")


def test_live_resolver_follows_cname_hops():
    client = FakeDnsClient({"a.example.com": "b.cdn.net", "b.cdn.net": "metric.tracker.com"})

    chain = LiveResolver(client).resolve("A.Example.com.")

    assert chain == CnameChain(owner="a.example.com", targets=("b.cdn.net", "metric.tracker.com"))
    assert client.queries[0] == ("a.example.com", "CNAME")


def test_live_resolver_no_answer_ends_chain():
    class NoAnswerClient:
        def resolve(self, name, rdtype):
            raise dns.resolver.NoAnswer()

    assert LiveResolver(NoAnswerClient()).resolve("a.example.com").targets == ()


def test_live_resolver_timeout_is_not_an_empty_chain():
    client = FakeDnsClient({"a.example.com": "x.tracker.com"}, failing=frozenset({"a.example.com"}))

    with pytest.raises(ResolveError):
        LiveResolver(client).resolve("a.example.com")


def test_live_resolver_servfail_raises():
    class ServfailClient:
        def resolve(self, name, rdtype):
            raise dns.resolver.NoNameservers()

    with pytest.raises(ResolveError):
        LiveResolver(ServfailClient()).resolve("a.example.com")


def test_live_resolver_breaks_loops():
    client = FakeDnsClient({"a.example.com": "b.example.net", "b.example.net": "a.example.com"})

    chain = LiveResolver(client).resolve("a.example.com")

    assert chain.targets == ("b.example.net",)


def test_offline_and_live_resolvers_label_identically(corpus, tracker_list, parser):
    offline = corpus.offline_resolver()
    edges = {
        name: chain.targets[0] for name, chain in offline.index.chains.items() if chain.targets
    }
    live = LiveResolver(FakeDnsClient(edges))

    from_offline = labeler_service.label_dataset(corpus.sites, offline, tracker_list, parser)
    from_live = labeler_service.label_dataset(corpus.sites, live, tracker_list, parser)

    assert from_offline == from_live


def test_label_request_cloaked_subdomain(tracker_list, parser):
    request = make_request("s1", "https://a.example.com/track.js")
    chain = CnameChain(owner="a.example.com", targets=("metric.trk-cloak.net",))

    labeled = labeler_service.label_request(request, "example.com", chain, tracker_list, parser)

    assert labeled.label
    assert labeled.party is PartyKind.first_subdomain
    assert labeled.matched_rule == "||trk-cloak.net^"
    assert labeled.cname_chain == chain


def test_label_request_apex_is_never_positive(tracker_list, parser):
    request = make_request("s1", "https://example.com/")
    chain = CnameChain(owner="example.com", targets=("metric.trk-cloak.net",))

    labeled = labeler_service.label_request(request, "example.com", chain, tracker_list, parser)

    assert not labeled.label
    assert labeled.party is PartyKind.first_domain


def test_label_request_third_party_is_never_positive(tracker_list, parser):
    request = make_request("s1", "https://cdn.other.com/lib.js")
    chain = CnameChain(owner="cdn.other.com", targets=("x.trk-cloak.net",))

    labeled = labeler_service.label_request(request, "example.com", chain, tracker_list, parser)

    assert not labeled.label
    assert labeled.party is PartyKind.third


def test_label_request_matches_targets_not_owner(parser):
    lists = parse_list("||example.com^", "owner")
    request = make_request("s1", "https://a.example.com/")
    chain = CnameChain(owner="a.example.com", targets=("edge.cdn.net",))

    labeled = labeler_service.label_request(request, "example.com", chain, lists, parser)

    assert not labeled.label


def test_label_request_without_chain_is_negative(tracker_list, parser):
    request = make_request("s1", "https://a.example.com/")

    labeled = labeler_service.label_request(
        request, "example.com", CnameChain(owner="a.example.com"), tracker_list, parser
    )

    assert not labeled.label
    assert labeled.cname_chain is None


def test_label_site_is_or_of_requests(tracker_list, parser):
    site = make_site(
        "s1",
        "example.com",
        ["https://a.example.com/t.js"] + [f"https://example.com/{i}" for i in range(39)],
    )
    chain = CnameChain(owner="a.example.com", targets=("x.trk-cloak.net",))
    labeled = [
        labeler_service.label_request(r, site.domain, chain, tracker_list, parser)
        for r in site.requests
    ]

    assert labeler_service.label_site(site, labeled)
    negatives = [item.model_copy(update={"label": False}) for item in labeled]
    assert not labeler_service.label_site(site, negatives)


def test_label_site_requires_every_request(tracker_list, parser):
    site = make_site("s1", "example.com", ["https://example.com/", "https://example.com/a"])

    with pytest.raises(SchemaError):
        labeler_service.label_site(site, [])


def test_label_dataset_on_corpus(labeled_corpus, corpus):
    assert labeled_corpus.positive_sites == corpus.positive_sites
    assert labeled_corpus.positive_requests == corpus.positive_requests
    assert labeled_corpus.resolve_failures == 0
    for labeled_site in labeled_corpus.sites:
        assert labeled_site.label == any(r.label for r in labeled_site.requests)
        for labeled in labeled_site.requests:
            assert labeled.label == (labeled.request.host in corpus.cloaked_hosts)


def test_label_dataset_counts_resolve_failures(corpus, tracker_list, parser):
    cloaked = sorted(corpus.cloaked_hosts)[0]
    resolver = FailingResolver(corpus.offline_resolver(), {cloaked})

    dataset = labeler_service.label_dataset(corpus.sites, resolver, tracker_list, parser)

    assert dataset.resolve_failures == 2
    assert dataset.positive_requests == corpus.positive_requests - 2
    failed = [r for s in dataset.sites for r in s.requests if r.resolve_failed]
    assert all(not r.label and r.request.host == cloaked for r in failed)


def test_resolve_failure_only_counts_where_host_is_first_party(tracker_list, parser):
    sites = [
        make_site("s1", "foo.com", ["https://cdn.foo.com/a.js"]),
        make_site("s2", "bar.com", ["https://cdn.foo.com/a.js"]),
    ]
    resolver = FailingResolver(_offline({}), {"cdn.foo.com"})

    dataset = labeler_service.label_dataset(sites, resolver, tracker_list, parser)

    first_party, third_party = (site.requests[0] for site in dataset.sites)
    assert (first_party.party, first_party.resolve_failed) == (PartyKind.first_subdomain, True)
    assert (third_party.party, third_party.resolve_failed) == (PartyKind.third, False)
    assert third_party.cname_chain is None
    assert dataset.resolve_failures == 1


def test_label_dataset_matches_each_chain_once(tracker_list, parser, monkeypatch):
    site = make_site(
        "s1",
        "example.com",
        [f"https://t.example.com/px?n={n}" for n in range(3)] + ["https://example.com/"],
    )
    resolver = _offline({"t.example.com": "x.trk-cloak.net"})
    calls = []
    match_any = labeler_service.match_any

    def counting(lists, names):
        calls.append(tuple(names))
        return match_any(lists, names)

    monkeypatch.setattr(labeler_service, "match_any", counting)

    dataset = labeler_service.label_dataset([site], resolver, tracker_list, parser)

    assert calls == [("x.trk-cloak.net",)]
    assert [r.label for r in dataset.sites[0].requests] == [True, True, True, False]


def test_label_dataset_concurrent_matches_sequential(corpus, tracker_list, parser):
    resolver = corpus.offline_resolver()

    sequential = labeler_service.label_dataset(corpus.sites, resolver, tracker_list, parser)
    concurrent = labeler_service.label_dataset(
        corpus.sites, resolver, tracker_list, parser, concurrency=8
    )

    assert sequential == concurrent


def test_resolve_names_keeps_input_order():
    resolver = FailingResolver(_offline({"a": "b", "c": "d"}), {"x"})
    names = ["c", "x", "a", "zz"]

    results = resolve_names(names, resolver, concurrency=4)

    assert list(results) == names
    assert results["a"].targets == ("b",)
    assert results["c"].targets == ("d",)
    assert isinstance(results["x"], ResolveError)
    assert results["zz"].targets == ()


def test_adding_block_rules_never_removes_positives(corpus, parser):
    base = parse_list(FILTER_TEXT, "base")
    extended = parse_list(FILTER_TEXT + "\n||edge-cdn.net^\nmetrics", "extended")
    resolver = corpus.offline_resolver()

    before = labeler_service.label_dataset(corpus.sites, resolver, base, parser)
    after = labeler_service.label_dataset(corpus.sites, resolver, extended, parser)

    for site_before, site_after in zip(before.sites, after.sites, strict=True):
        for a, b in zip(site_before.requests, site_after.requests, strict=True):
            assert not a.label or b.label
    assert after.positive_requests > before.positive_requests


def test_labeled_round_trip(tmp_path, labeled_corpus):
    path = tmp_path / "labeled.jsonl"

    labeler_service.dump_labeled(labeled_corpus, path)

    assert labeler_service.load_labeled(path) == labeled_corpus


def test_labeled_round_trip_keeps_sites_without_requests(tmp_path, labeled_corpus):
    empty = make_site("empty", "quiet.org", [], country="FR")
    dataset = labeled_corpus.model_copy(
        update={"sites": [*labeled_corpus.sites[:2], LabeledSite(site=empty)]}
    )
    path = tmp_path / "labeled.jsonl"

    labeler_service.dump_labeled(dataset, path)
    loaded = labeler_service.load_labeled(path)

    assert loaded == dataset
    assert loaded.sites[-1].site.requests == ()
    assert loaded.sites[-1].site.country == "FR"


def test_load_labeled_rejects_inconsistent_site_label(tmp_path, labeled_corpus):
    path = tmp_path / "labeled.jsonl"
    labeler_service.dump_labeled(labeled_corpus, path)
    lines = path.read_text(encoding="utf-8").splitlines()
    first = json.loads(lines[0])
    first["site_label"] = not first["site_label"]
    lines[0] = json.dumps(first)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    with pytest.raises(SchemaError):
        labeler_service.load_labeled(path)


def test_load_labeled_rejects_positive_without_evidence(tmp_path):
    line = {
        "site_id": "s1",
        "site_domain": "example.com",
        "url": "https://a.example.com/",
        "label": True,
        "party": "first_subdomain",
    }
    path = tmp_path / "labeled.jsonl"
    path.write_text(json.dumps(line) + "\n", encoding="utf-8")

    with pytest.raises(SchemaError) as exc_info:
        labeler_service.load_labeled(path)

    assert exc_info.value.line_no == 1


@pytest.mark.parametrize(
    ("upstream", "expected"),
    [
        ("192.0.2.53", ("192.0.2.53", 53)),
        ("192.0.2.53:5353", ("192.0.2.53", 5353)),
        ("[2001:db8::1]:53", ("2001:db8::1", 53)),
        ("2001:db8::1", ("2001:db8::1", 53)),
    ],
)
def test_parse_upstream(upstream, expected):
    assert parse_upstream(upstream) == expected


@pytest.mark.parametrize("upstream", ["dns.example.com", "192.0.2.1:0", "192.0.2.1:abc"])
def test_parse_upstream_rejects_invalid(upstream):
    with pytest.raises(ConfigError):
        parse_upstream(upstream)


def test_build_dns_resolver_uses_upstream():
    client = build_dns_resolver(upstream="192.0.2.53:5353", timeout=2.0)

    assert [str(server) for server in client.nameservers] == ["192.0.2.53"]
    assert client.port == 5353
    assert client.timeout == 2.0
    assert client.lifetime == 2.0
