import hashlib
import json
from dataclasses import dataclass, field
from enum import StrEnum
from typing import ClassVar

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

OTHER = "other"


class PartyKind(StrEnum):
    first_domain = "first_domain"
    first_subdomain = "first_subdomain"
    third = "third"


class Target(StrEnum):
    site = "site"
    request = "request"


class SiteFeatures(BaseModel):
    model_config = ConfigDict(frozen=True)

    numeric_fields: ClassVar[tuple[str, ...]] = (
        "num_url",
        "num_1st",
        "num_3rd",
        "num_script",
        "pct_script_call",
        "pct_xhr",
        "pct_3rd_window",
        "ranking",
    )
    categorical_fields: ClassVar[tuple[str, ...]] = ("country", "category")

    num_url: int = Field(ge=0)
    num_1st: int = Field(ge=0)
    num_3rd: int = Field(ge=0)
    num_script: int = Field(ge=0)
    pct_script_call: float = Field(ge=0, le=1)
    pct_xhr: float = Field(ge=0, le=1)
    pct_3rd_window: float = Field(ge=0, le=1)
    ranking: int = Field(ge=0)
    country: str
    category: str


class RequestFeatures(BaseModel):
    model_config = ConfigDict(frozen=True)

    numeric_fields: ClassVar[tuple[str, ...]] = (
        "is_xhr",
        "len_url",
        "len_sub",
        "len_prefix_sub",
        "num_prefix_sub",
        "prefix_sub_blacklist",
        "is_sub_dic",
        "entropy_url",
        "entropy_sub",
        "entropy_prefix_sub",
    )
    categorical_fields: ClassVar[tuple[str, ...]] = ("method", "content_type")

    method: str
    is_xhr: bool
    content_type: str
    len_url: int = Field(ge=0)
    len_sub: int = Field(ge=0)
    len_prefix_sub: int = Field(ge=0)
    num_prefix_sub: int = Field(ge=0)
    prefix_sub_blacklist: bool
    is_sub_dic: bool
    entropy_url: float = Field(ge=0, le=8)
    entropy_sub: float = Field(ge=0, le=8)
    entropy_prefix_sub: float = Field(ge=0, le=8)


FEATURE_TYPES: dict[Target, type[SiteFeatures] | type[RequestFeatures]] = {
    Target.site: SiteFeatures,
    Target.request: RequestFeatures,
}


class FeatureSchema(BaseModel):
    """Column layout fixed from a training split."""

    model_config = ConfigDict(frozen=True)

    target: Target
    numeric: tuple[str, ...]
    vocabularies: dict[str, tuple[str, ...]]

    @property
    def columns(self) -> list[str]:
        columns = list(self.numeric)
        for name, values in sorted(self.vocabularies.items()):
            columns.extend(f"{name}={value}" for value in values)
            columns.append(f"{name}={OTHER}")
        return columns

    @property
    def column_features(self) -> list[str]:
        """Source feature name for every encoded column."""
        sources = list(self.numeric)
        for name, values in sorted(self.vocabularies.items()):
            sources.extend([name] * (len(values) + 1))
        return sources

    @property
    def fingerprint(self) -> str:
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class EncodedMatrix:
    schema: FeatureSchema
    X: np.ndarray
    y: np.ndarray
    instance_ids: tuple[str, ...] = field(default=())

    @property
    def columns(self) -> list[str]:
        return self.schema.columns

    @property
    def fingerprint(self) -> str:
        return self.schema.fingerprint

    def __len__(self) -> int:
        return int(self.X.shape[0])

    def take(self, indices: np.ndarray) -> "EncodedMatrix":
        ids = tuple(self.instance_ids[i] for i in indices) if self.instance_ids else ()
        return EncodedMatrix(
            schema=self.schema, X=self.X[indices], y=self.y[indices], instance_ids=ids
        )
