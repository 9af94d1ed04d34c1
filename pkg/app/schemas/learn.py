from dataclasses import dataclass
from enum import StrEnum

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from app.schemas.features import FeatureSchema, Target


class Algorithm(StrEnum):
    decision_tree = "decision_tree"
    random_forest = "random_forest"
    extra_trees = "extra_trees"
    gradient_boosting = "gradient_boosting"
    adaboost = "adaboost"
    knn = "knn"
    logistic_regression = "logistic_regression"
    svc = "svc"
    mlp = "mlp"
    lda = "lda"


UNSUPPORTED_ALGORITHMS = frozenset({Algorithm.svc, Algorithm.mlp, Algorithm.lda})

# Soft-voting members per prediction target.
VOTING_MEMBERS: dict[Target, tuple[Algorithm, ...]] = {
    Target.site: (Algorithm.random_forest, Algorithm.extra_trees, Algorithm.gradient_boosting),
    Target.request: (Algorithm.random_forest, Algorithm.extra_trees),
}


class HyperParams(BaseModel):
    """
    Training settings shared by every algorithm.

    `max_features` is an absolute column count when integral and a fraction
    of the columns when real; `None` for it or `max_depth` keeps the
    algorithm's own default.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    max_features: int | float | None = None
    min_samples_split: int = Field(default=2, ge=2)
    min_samples_leaf: int = Field(default=1, ge=1)
    n_estimators: int = Field(default=100, ge=1)
    learning_rate: float = Field(default=0.1, gt=0)
    max_depth: int | None = Field(default=None, ge=1)
    n_neighbors: int = Field(default=5, ge=1)
    C: float = Field(default=1.0, gt=0)
    seed: int = 2

    @field_validator("max_features")
    @classmethod
    def _count_or_fraction(cls, value: int | float | None) -> int | float | None:
        if isinstance(value, bool):
            raise ValueError("max_features must be a count or a fraction")
        if isinstance(value, int) and value < 1:
            raise ValueError("max_features count must be >= 1")
        if isinstance(value, float) and not 0 < value <= 1:
            raise ValueError("max_features fraction must be in (0, 1]")
        return value


class Metrics(BaseModel):
    model_config = ConfigDict(frozen=True)

    precision: float = Field(ge=0, le=1)
    recall: float = Field(ge=0, le=1)
    f1: float = Field(ge=0, le=1)
    tp: int = Field(ge=0)
    fp: int = Field(ge=0)
    tn: int = Field(ge=0)
    fn: int = Field(ge=0)


class CVResult(BaseModel):
    algorithm: Algorithm
    params: HyperParams
    fold_f1: list[float]
    mean_f1: float
    std_f1: float


class GridSearchResult(BaseModel):
    algorithm: Algorithm
    best_params: HyperParams
    best_score: float
    points: list[CVResult] = Field(default_factory=list)


class FeatureImportance(BaseModel):
    feature: str
    drops: list[float]
    mean: float
    std: float
    median: float
    q1: float
    q3: float


class ImportanceReport(BaseModel):
    baseline_f1: float
    n_repeats: int
    seed: int
    features: list[FeatureImportance]

    def ranked(self) -> list[FeatureImportance]:
        return sorted(self.features, key=lambda item: (-item.median, item.feature))


@dataclass(frozen=True)
class TreeArrays:
    """
    Flattened binary tree. Leaves have `children_left == -1`; `value` is
    P(positive) for classification trees and the raw score for regression
    trees. Samples go left when `x[feature] <= threshold`.
    """

    children_left: np.ndarray
    children_right: np.ndarray
    feature: np.ndarray
    threshold: np.ndarray
    value: np.ndarray

    @property
    def node_count(self) -> int:
        return int(self.children_left.shape[0])

    @property
    def depth(self) -> int:
        deepest = 0
        stack = [(0, 0)]
        while stack:
            node, level = stack.pop()
            deepest = max(deepest, level)
            if self.children_left[node] != -1:
                stack.append((int(self.children_left[node]), level + 1))
                stack.append((int(self.children_right[node]), level + 1))
        return deepest


@dataclass(frozen=True)
class TrainedModel:
    algorithm: Algorithm
    params: HyperParams
    schema: FeatureSchema
    trees: tuple[TreeArrays, ...] = ()
    tree_weights: tuple[float, ...] = ()
    init_score: float = 0.0
    coef: np.ndarray | None = None
    intercept: float = 0.0
    train_X: np.ndarray | None = None
    train_y: np.ndarray | None = None
    classes: tuple[int, int] = (0, 1)

    @property
    def schema_fingerprint(self) -> str:
        return self.schema.fingerprint


@dataclass(frozen=True)
class VotingModel:
    members: tuple[TrainedModel, ...]

    @property
    def schema(self) -> FeatureSchema:
        return self.members[0].schema

    @property
    def algorithms(self) -> tuple[Algorithm, ...]:
        return tuple(member.algorithm for member in self.members)
