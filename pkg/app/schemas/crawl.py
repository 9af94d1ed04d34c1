import re
from typing import Any

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.core.domains import host_of_url, normalize_fqdn
from app.core.errors import UrlError

UNKNOWN = "UNK"

_METHOD_TOKEN = re.compile(r"[A-Z][A-Z0-9_-]*")


class SiteMeta(BaseModel):
    ranking: int = Field(default=0, ge=0)
    country: str = UNKNOWN
    category: str = UNKNOWN
    script_call_count: int = Field(default=0, ge=0)

    @field_validator("country", "category", mode="before")
    @classmethod
    def _unknown_if_blank(cls, value: Any) -> Any:
        if value is None or (isinstance(value, str) and not value.strip()):
            return UNKNOWN
        return value

    @field_validator("ranking", "script_call_count", mode="before")
    @classmethod
    def _zero_if_missing(cls, value: Any) -> Any:
        return 0 if value is None else value


class CrawlLine(BaseModel):
    """One line of the crawl JSONL wire format."""

    model_config = ConfigDict(extra="ignore")

    site_id: str = Field(min_length=1)
    site_domain: str = Field(min_length=1)
    url: str
    method: str
    content_type: str
    is_xhr: bool
    is_third_party_window: bool
    timestamp: float = 0.0
    site_meta: SiteMeta | None = None


class RequestRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    site_id: str
    url: str
    method: str
    content_type: str
    is_xhr: bool = False
    is_third_party_window: bool = False
    timestamp: float = 0.0
    host: str = Field(default="", exclude=True)

    @model_validator(mode="before")
    @classmethod
    def _derive_host(cls, data: Any) -> Any:
        if isinstance(data, dict) and isinstance(data.get("url"), str):
            try:
                data = {**data, "host": host_of_url(data["url"])}
            except UrlError as exc:
                raise ValueError(exc.detail) from exc
        return data

    @field_validator("method")
    @classmethod
    def _uppercase_method(cls, value: str) -> str:
        token = value.strip().upper()
        if not _METHOD_TOKEN.fullmatch(token):
            raise ValueError("method must be a non-empty HTTP token")
        return token

    @field_validator("content_type")
    @classmethod
    def _lowercase_content_type(cls, value: str) -> str:
        return value.strip().lower() or "other"


class SiteRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    site_id: str
    domain: str
    ranking: int = Field(default=0, ge=0)
    country: str = UNKNOWN
    category: str = UNKNOWN
    script_call_count: int = Field(default=0, ge=0)
    requests: tuple[RequestRecord, ...] = ()

    @field_validator("domain")
    @classmethod
    def _normalize_domain(cls, value: str) -> str:
        domain = normalize_fqdn(value)
        if not domain:
            raise ValueError("site domain must not be empty")
        return domain

    @model_validator(mode="after")
    def _requests_belong_to_site(self) -> "SiteRecord":
        for request in self.requests:
            if request.site_id != self.site_id:
                raise ValueError(
                    f"request site_id {request.site_id!r} does not match site {self.site_id!r}"
                )
        return self

    @property
    def meta(self) -> SiteMeta:
        return SiteMeta(
            ranking=self.ranking,
            country=self.country,
            category=self.category,
            script_call_count=self.script_call_count,
        )


class CrawlLoad(BaseModel):
    sites: list[SiteRecord]
    malformed_lines: list[int] = Field(default_factory=list)
