from enum import StrEnum

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.core.domains import normalize_fqdn

MAX_CHAIN_HOPS = 8


class ResolverMode(StrEnum):
    offline = "offline"
    live = "live"


class FdnsRecord(BaseModel):
    """Subset of one forward-DNS dataset line."""

    model_config = ConfigDict(extra="ignore")

    name: str = Field(min_length=1)
    type: str
    value: str


class CnameChain(BaseModel):
    model_config = ConfigDict(frozen=True)

    owner: str
    targets: tuple[str, ...] = ()

    @field_validator("owner")
    @classmethod
    def _normalize_owner(cls, value: str) -> str:
        return normalize_fqdn(value)

    @field_validator("targets")
    @classmethod
    def _normalize_targets(cls, values: tuple[str, ...]) -> tuple[str, ...]:
        return tuple(normalize_fqdn(v) for v in values)

    @model_validator(mode="after")
    def _acyclic_and_bounded(self) -> "CnameChain":
        if self.owner in self.targets:
            raise ValueError(f"CNAME chain for {self.owner} loops back to its owner")
        if len(self.targets) > MAX_CHAIN_HOPS:
            raise ValueError(f"CNAME chain longer than {MAX_CHAIN_HOPS} hops")
        return self

    def __bool__(self) -> bool:
        return bool(self.targets)


class FdnsIndex(BaseModel):
    """Offline name -> CNAME chain map; lookups ignore case and a trailing dot."""

    model_config = ConfigDict(frozen=True)

    chains: dict[str, CnameChain] = Field(default_factory=dict)

    def lookup(self, name: str) -> CnameChain:
        key = normalize_fqdn(name)
        return self.chains.get(key) or CnameChain(owner=key)

    def __contains__(self, name: object) -> bool:
        return isinstance(name, str) and normalize_fqdn(name) in self.chains

    def __len__(self) -> int:
        return len(self.chains)
