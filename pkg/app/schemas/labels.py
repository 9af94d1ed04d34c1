from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.schemas.crawl import CrawlLine, RequestRecord, SiteRecord
from app.schemas.dns import CnameChain
from app.schemas.features import PartyKind


class LabeledRequest(BaseModel):
    model_config = ConfigDict(frozen=True)

    request: RequestRecord
    label: bool = False
    party: PartyKind = PartyKind.third
    matched_rule: str | None = None
    cname_chain: CnameChain | None = None
    resolve_failed: bool = False

    @model_validator(mode="after")
    def _positive_has_evidence(self) -> "LabeledRequest":
        if self.label and (self.matched_rule is None or not self.cname_chain):
            raise ValueError("a positive label needs the matched rule and CNAME chain")
        return self


class LabeledSite(BaseModel):
    model_config = ConfigDict(frozen=True)

    site: SiteRecord
    label: bool = False
    requests: tuple[LabeledRequest, ...] = ()

    @model_validator(mode="after")
    def _label_is_any_request(self) -> "LabeledSite":
        if self.label != any(request.label for request in self.requests):
            raise ValueError("site label must equal the OR of its request labels")
        return self


class LabeledDataset(BaseModel):
    sites: list[LabeledSite] = Field(default_factory=list)

    @property
    def records(self) -> list[SiteRecord]:
        return [labeled.site for labeled in self.sites]

    @property
    def positive_sites(self) -> int:
        return sum(1 for site in self.sites if site.label)

    @property
    def positive_requests(self) -> int:
        return sum(1 for site in self.sites for request in site.requests if request.label)

    @property
    def resolve_failures(self) -> int:
        return sum(
            1 for site in self.sites for request in site.requests if request.resolve_failed
        )


class LabeledLine(CrawlLine):
    """
    One line of the labeled JSONL format: a crawl line plus its label.

    A line without `url` only carries a site that has no requests.
    """

    url: str | None = None
    method: str = "GET"
    content_type: str = "other"
    is_xhr: bool = False
    is_third_party_window: bool = False

    label: bool = False
    party: PartyKind | None = None
    matched_rule: str | None = None
    cname_chain: list[str] | None = None
    resolve_failed: bool = False
    site_label: bool | None = None
