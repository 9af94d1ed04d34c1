import logging
import re
from collections.abc import Iterable, Sequence
from pathlib import Path

from app.core.domains import normalize_fqdn
from app.core.errors import InputFileError
from app.schemas.filters import FilterList, FilterRule, RuleAnchor, RuleKind

logger = logging.getLogger(__name__)

# Characters the Adblock `^` placeholder does not stand for.
_SEPARATOR = r"(?:[^\w.%-]|$)"
_LITERAL_DOMAIN = re.compile(r"[a-z0-9][a-z0-9.-]*")
_ELEMENT_HIDING_MARKERS = ("##", "#@#", "#?#", "#$#", "#%#")

KNOWN_OPTIONS = frozenset(
    {
        "third-party",
        "first-party",
        "script",
        "image",
        "stylesheet",
        "xmlhttprequest",
        "subdocument",
        "document",
        "ping",
        "media",
        "font",
        "object",
        "websocket",
        "popup",
        "other",
        "important",
        "match-case",
        "domain",
        "network",
        "all",
    }
)


def _pattern_to_regex(pattern: str, anchor: RuleAnchor) -> str:
    body = pattern
    tail = ""
    if body.endswith("|"):
        body = body[:-1]
        tail = "$"

    pieces: list[str] = []
    for char in body:
        if char == "*":
            pieces.append(".*")
        elif char == "^":
            pieces.append(_SEPARATOR)
        else:
            pieces.append(re.escape(char))
    translated = "".join(pieces) + tail

    if anchor is RuleAnchor.domain:
        return r"^(?:[^/]*\.)?" + translated
    if anchor is RuleAnchor.start:
        return "^" + translated
    return translated


def _split_options(text: str) -> tuple[str, tuple[str, ...]]:
    if "$" not in text:
        return text, ()
    pattern, _, raw_options = text.rpartition("$")
    options = tuple(
        option.strip().lower() for option in raw_options.split(",") if option.strip()
    )
    return pattern, options


def _literal_domain(pattern: str) -> str | None:
    """
    The domain a `||` pattern names exactly, or None when the domain part
    contains wildcards or is cut short by one.
    """
    found = _LITERAL_DOMAIN.match(pattern)
    if found is None:
        return None
    literal = found.group(0)
    rest = pattern[found.end() :]
    if not rest or rest[0] not in "^/|":
        return None
    literal = literal.rstrip(".")
    return literal or None


def parse_rule(raw: str) -> FilterRule:
    text = raw.strip()

    if (
        not text
        or text.startswith("!")
        or text.startswith("[")
        or any(marker in text for marker in _ELEMENT_HIDING_MARKERS)
    ):
        return FilterRule(raw=raw, kind=RuleKind.unsupported)

    is_exception = text.startswith("@@")
    if is_exception:
        text = text[2:]

    pattern, options = _split_options(text)
    pattern = pattern.lower()

    # Regex rules are outside the supported subset.
    if len(pattern) > 1 and pattern.startswith("/") and pattern.endswith("/"):
        return FilterRule(raw=raw, kind=RuleKind.unsupported, options=options)

    if pattern.startswith("||"):
        anchor = RuleAnchor.domain
        pattern = pattern[2:]
    elif pattern.startswith("|"):
        anchor = RuleAnchor.start
        pattern = pattern[1:]
    else:
        anchor = RuleAnchor.none

    if not pattern.strip("*"):
        return FilterRule(raw=raw, kind=RuleKind.unsupported, options=options)

    if is_exception:
        kind = RuleKind.exception
    elif anchor is RuleAnchor.domain:
        kind = RuleKind.domain_anchor
    else:
        kind = RuleKind.plain

    literal = _literal_domain(pattern) if anchor is RuleAnchor.domain else None

    return FilterRule(
        raw=raw,
        kind=kind,
        pattern=pattern,
        anchor=anchor,
        options=options,
        regex=_pattern_to_regex(pattern, anchor),
        literal_domain=literal,
    )


def _build_list(source_name: str, rules: list[FilterRule]) -> FilterList:
    domain_index: dict[str, list[int]] = {}
    fallback: list[int] = []
    prefixes: set[str] = set()

    for rule_id, rule in enumerate(rules):
        if not rule.matchable:
            continue
        if rule.literal_domain is not None:
            domain_index.setdefault(rule.literal_domain, []).append(rule_id)
            labels = rule.literal_domain.split(".")
            if rule.kind is RuleKind.domain_anchor and len(labels) >= 3:
                prefixes.add(labels[0])
        elif "/" not in rule.pattern:
            # Path patterns cannot match a bare domain name.
            fallback.append(rule_id)

    return FilterList(
        source_name=source_name,
        rules=rules,
        domain_index=domain_index,
        fallback=fallback,
        subdomain_prefixes=frozenset(prefixes),
    )


def parse_list(text: str, source_name: str) -> FilterList:
    rules = [parse_rule(line) for line in text.splitlines() if line.strip()]
    filter_list = _build_list(source_name, rules)

    counts = filter_list.kind_counts()
    unknown_options = sorted(
        {
            option.partition("=")[0].lstrip("~")
            for rule in rules
            for option in rule.options
        }
        - KNOWN_OPTIONS
    )
    logger.info(
        "Parsed filter list %s: %s",
        source_name,
        ", ".join(f"{kind.value}={count}" for kind, count in counts.items()),
    )
    if unknown_options:
        logger.debug("Unrecognized options in %s: %s", source_name, unknown_options)
    return filter_list


def load_list(path: Path) -> FilterList:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise InputFileError(f"Cannot read filter list {path}: {exc}") from exc
    return parse_list(text, path.stem)


def combine_lists(lists: Sequence[FilterList], source_name: str | None = None) -> FilterList:
    rules: list[FilterRule] = []
    for filter_list in lists:
        rules.extend(filter_list.rules)
    name = source_name or "+".join(filter_list.source_name for filter_list in lists)
    return _build_list(name or "empty", rules)


def _candidate_ids(filter_list: FilterList, fqdn: str) -> list[int]:
    labels = fqdn.split(".")
    ids: set[int] = set(filter_list.fallback)
    for start in range(len(labels)):
        ids.update(filter_list.domain_index.get(".".join(labels[start:]), ()))
    return sorted(ids)


def match_domain(filter_list: FilterList, fqdn: str) -> FilterRule | None:
    name = normalize_fqdn(fqdn)
    if not name:
        return None

    first_block: FilterRule | None = None
    for rule_id in _candidate_ids(filter_list, name):
        matcher = filter_list.matcher(rule_id)
        if matcher is None or matcher.search(name) is None:
            continue
        rule = filter_list.rules[rule_id]
        if rule.kind is RuleKind.exception:
            return None
        if first_block is None:
            first_block = rule
    return first_block


def match_any(filter_list: FilterList, names: Iterable[str]) -> tuple[str, FilterRule] | None:
    for name in names:
        rule = match_domain(filter_list, name)
        if rule is not None:
            return name, rule
    return None


def prefix_in_blacklist(filter_list: FilterList, prefix: str) -> bool:
    return prefix.strip().lower() in filter_list.subdomain_prefixes
