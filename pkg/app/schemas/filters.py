import re
from collections import Counter
from enum import StrEnum

from pydantic import BaseModel, ConfigDict, Field, PrivateAttr


class RuleKind(StrEnum):
    domain_anchor = "domain_anchor"
    plain = "plain"
    exception = "exception"
    unsupported = "unsupported"


class RuleAnchor(StrEnum):
    domain = "domain"
    start = "start"
    none = "none"


class FilterRule(BaseModel):
    model_config = ConfigDict(frozen=True)

    raw: str
    kind: RuleKind
    pattern: str = ""
    anchor: RuleAnchor = RuleAnchor.none
    options: tuple[str, ...] = ()
    regex: str | None = None
    # Literal domain the rule is indexed under, when it names one exactly.
    literal_domain: str | None = None

    @property
    def matchable(self) -> bool:
        return self.kind is not RuleKind.unsupported and self.regex is not None


class FilterList(BaseModel):
    """
    Parsed filter list. Treat as immutable once built by the parser.

    Every matchable rule id appears either under its literal domain in
    `domain_index` or in `fallback`, except path patterns without a
    literal domain, which no domain name can match.
    """

    source_name: str
    rules: list[FilterRule] = Field(default_factory=list)
    domain_index: dict[str, list[int]] = Field(default_factory=dict)
    fallback: list[int] = Field(default_factory=list)
    subdomain_prefixes: frozenset[str] = frozenset()

    _matchers: dict[int, re.Pattern[str]] = PrivateAttr(default_factory=dict)

    def model_post_init(self, __context: object) -> None:
        self._matchers = {
            rule_id: re.compile(rule.regex)
            for rule_id, rule in enumerate(self.rules)
            if rule.matchable and rule.regex is not None
        }

    def matcher(self, rule_id: int) -> re.Pattern[str] | None:
        return self._matchers.get(rule_id)

    def kind_counts(self) -> dict[RuleKind, int]:
        counts = Counter(rule.kind for rule in self.rules)
        return {kind: counts.get(kind, 0) for kind in RuleKind}

    def __len__(self) -> int:
        return len(self.rules)
