import logging
from collections.abc import Mapping, Sequence
from dataclasses import replace
from typing import Any

import numpy as np
from pydantic import ValidationError
from scipy.special import expit, logit
from sklearn.base import BaseEstimator
from sklearn.ensemble import (
    AdaBoostClassifier,
    ExtraTreesClassifier,
    GradientBoostingClassifier,
    RandomForestClassifier,
)
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import confusion_matrix, precision_recall_fscore_support
from sklearn.model_selection import ParameterGrid, StratifiedKFold, train_test_split
from sklearn.neighbors import KNeighborsClassifier
from sklearn.preprocessing import StandardScaler
from sklearn.tree import DecisionTreeClassifier

from app.core.errors import (
    DegenerateDataError,
    InvalidParamsError,
    NotSupportedError,
    SchemaMismatchError,
    TooFewInstancesError,
)
from app.schemas.features import EncodedMatrix
from app.schemas.filters import FilterList
from app.schemas.labels import LabeledRequest
from app.schemas.learn import (
    UNSUPPORTED_ALGORITHMS,
    Algorithm,
    CVResult,
    FeatureImportance,
    GridSearchResult,
    HyperParams,
    ImportanceReport,
    Metrics,
    TrainedModel,
    TreeArrays,
    VotingModel,
)
from app.services.filterlist_service import match_domain

logger = logging.getLogger(__name__)

Model = TrainedModel | VotingModel

_PROBA_EPS = float(np.finfo(np.float32).eps)
_DEFAULT_BOOSTING_DEPTH = 3
_DEFAULT_STUMP_DEPTH = 1
_LOGISTIC_MAX_ITER = 1000


def make_params(values: Mapping[str, Any]) -> HyperParams:
    try:
        return HyperParams.model_validate(dict(values))
    except ValidationError as exc:
        first = exc.errors()[0]
        location = ".".join(str(part) for part in first.get("loc", ())) or "params"
        raise InvalidParamsError(f"{location}: {first.get('msg', 'invalid value')}") from exc


def build_estimator(
    algorithm: Algorithm, params: HyperParams, *, n_jobs: int = 1
) -> BaseEstimator:
    """Unfitted scikit-learn estimator configured from `params`."""
    if algorithm in UNSUPPORTED_ALGORITHMS:
        raise NotSupportedError(f"Algorithm {algorithm} is not implemented")

    tree_settings: dict[str, Any] = {
        "min_samples_split": params.min_samples_split,
        "min_samples_leaf": params.min_samples_leaf,
        "random_state": params.seed,
    }
    match algorithm:
        case Algorithm.decision_tree:
            return DecisionTreeClassifier(
                criterion="gini",
                max_features=params.max_features,
                max_depth=params.max_depth,
                **tree_settings,
            )
        case Algorithm.random_forest | Algorithm.extra_trees:
            forest = (
                RandomForestClassifier
                if algorithm is Algorithm.random_forest
                else ExtraTreesClassifier
            )
            return forest(
                n_estimators=params.n_estimators,
                criterion="gini",
                max_features=params.max_features if params.max_features is not None else "sqrt",
                max_depth=params.max_depth,
                n_jobs=n_jobs,
                **tree_settings,
            )
        case Algorithm.gradient_boosting:
            return GradientBoostingClassifier(
                loss="log_loss",
                n_estimators=params.n_estimators,
                learning_rate=params.learning_rate,
                max_depth=params.max_depth or _DEFAULT_BOOSTING_DEPTH,
                max_features=params.max_features,
                **tree_settings,
            )
        case Algorithm.adaboost:
            return AdaBoostClassifier(
                estimator=DecisionTreeClassifier(
                    max_depth=params.max_depth or _DEFAULT_STUMP_DEPTH,
                    random_state=params.seed,
                ),
                n_estimators=params.n_estimators,
                learning_rate=params.learning_rate,
                random_state=params.seed,
            )
        case Algorithm.knn:
            return KNeighborsClassifier(n_neighbors=params.n_neighbors, n_jobs=n_jobs)
        case Algorithm.logistic_regression:
            return LogisticRegression(
                C=params.C, max_iter=_LOGISTIC_MAX_ITER, random_state=params.seed
            )
    raise NotSupportedError(f"Algorithm {algorithm} is not implemented")


def _check_trainable(matrix: EncodedMatrix, params: HyperParams, algorithm: Algorithm) -> None:
    if len(matrix) == 0:
        raise DegenerateDataError("cannot train on an empty matrix")
    classes = np.unique(matrix.y)
    if not set(classes.tolist()) <= {0, 1}:
        raise DegenerateDataError(f"labels must be 0/1, got {classes.tolist()}")
    if classes.size < 2:
        raise DegenerateDataError("training data contains a single class")

    n_features = matrix.X.shape[1]
    if isinstance(params.max_features, int) and params.max_features > n_features:
        raise InvalidParamsError(
            f"max_features={params.max_features} exceeds the {n_features} encoded columns"
        )
    if algorithm is Algorithm.knn and params.n_neighbors > len(matrix):
        raise InvalidParamsError(
            f"n_neighbors={params.n_neighbors} exceeds the {len(matrix)} training rows"
        )


def _classifier_tree(estimator: DecisionTreeClassifier) -> TreeArrays:
    tree = estimator.tree_
    counts = np.asarray(tree.value[:, 0, :], dtype=np.float64)
    totals = counts.sum(axis=1)
    positive = np.divide(counts[:, 1], totals, out=np.zeros_like(totals), where=totals > 0)
    return _tree_arrays(tree, positive)


def _regression_tree(estimator: BaseEstimator) -> TreeArrays:
    tree = estimator.tree_
    return _tree_arrays(tree, np.asarray(tree.value[:, 0, 0], dtype=np.float64))


def _tree_arrays(tree: Any, value: np.ndarray) -> TreeArrays:
    return TreeArrays(
        children_left=np.asarray(tree.children_left, dtype=np.int64).copy(),
        children_right=np.asarray(tree.children_right, dtype=np.int64).copy(),
        feature=np.asarray(tree.feature, dtype=np.int64).copy(),
        threshold=np.asarray(tree.threshold, dtype=np.float64).copy(),
        value=value.copy(),
    )


def _to_trained(
    algorithm: Algorithm,
    params: HyperParams,
    matrix: EncodedMatrix,
    estimator: Any,
    scaler: StandardScaler | None,
) -> TrainedModel:
    base = {"algorithm": algorithm, "params": params, "schema": matrix.schema}
    match algorithm:
        case Algorithm.decision_tree:
            return TrainedModel(**base, trees=(_classifier_tree(estimator),))
        case Algorithm.random_forest | Algorithm.extra_trees:
            return TrainedModel(
                **base, trees=tuple(_classifier_tree(member) for member in estimator.estimators_)
            )
        case Algorithm.gradient_boosting:
            prior = float(estimator.init_.class_prior_[1])
            stages = tuple(_regression_tree(stage[0]) for stage in estimator.estimators_)
            return TrainedModel(
                **base,
                trees=stages,
                tree_weights=(float(estimator.learning_rate),) * len(stages),
                init_score=float(logit(np.clip(prior, _PROBA_EPS, 1 - _PROBA_EPS))),
            )
        case Algorithm.adaboost:
            members = estimator.estimators_
            weights = estimator.estimator_weights_[: len(members)]
            return TrainedModel(
                **base,
                trees=tuple(_classifier_tree(member) for member in members),
                tree_weights=tuple(float(w) for w in weights),
            )
        case Algorithm.knn:
            return TrainedModel(
                **base,
                train_X=np.asarray(matrix.X, dtype=np.float64).copy(),
                train_y=np.asarray(matrix.y, dtype=np.int64).copy(),
            )
        case Algorithm.logistic_regression:
            assert scaler is not None
            # Fold standardisation into the linear weights.
            coef = estimator.coef_[0] / scaler.scale_
            intercept = float(estimator.intercept_[0] - np.dot(coef, scaler.mean_))
            return TrainedModel(**base, coef=coef.astype(np.float64), intercept=intercept)
    raise NotSupportedError(f"Algorithm {algorithm} is not implemented")


def train(
    algorithm: Algorithm,
    matrix: EncodedMatrix,
    params: HyperParams,
    *,
    n_jobs: int = 1,
) -> TrainedModel:
    estimator = build_estimator(algorithm, params, n_jobs=n_jobs)
    _check_trainable(matrix, params, algorithm)

    X = matrix.X
    scaler = None
    if algorithm is Algorithm.logistic_regression:
        scaler = StandardScaler().fit(X)
        X = scaler.transform(X)

    try:
        estimator.fit(X, matrix.y)
    except ValueError as exc:
        raise InvalidParamsError(f"{algorithm} rejected its parameters: {exc}") from exc

    model = _to_trained(algorithm, params, matrix, estimator, scaler)
    logger.debug("Trained %s on %d rows (%d trees)", algorithm, len(matrix), len(model.trees))
    return model


def train_vote(
    members: Mapping[Algorithm, HyperParams], matrix: EncodedMatrix, *, n_jobs: int = 1
) -> VotingModel:
    return VotingModel(
        members=tuple(
            train(algorithm, matrix, params, n_jobs=n_jobs)
            for algorithm, params in members.items()
        )
    )


def leaf_values(tree: TreeArrays, X: np.ndarray) -> np.ndarray:
    """Leaf value reached by every row; thresholds compare single-precision inputs."""
    X32 = np.asarray(X, dtype=np.float32)
    node = np.zeros(X32.shape[0], dtype=np.int64)
    active = np.flatnonzero(tree.children_left[node] != -1)
    while active.size:
        current = node[active]
        go_left = X32[active, tree.feature[current]] <= tree.threshold[current]
        node[active] = np.where(
            go_left, tree.children_left[current], tree.children_right[current]
        )
        active = active[tree.children_left[node[active]] != -1]
    return tree.value[node]


def _positive_proba(model: TrainedModel, X: np.ndarray) -> np.ndarray:
    match model.algorithm:
        case Algorithm.decision_tree:
            return leaf_values(model.trees[0], X)
        case Algorithm.random_forest | Algorithm.extra_trees:
            total = np.zeros(X.shape[0], dtype=np.float64)
            for tree in model.trees:
                total += leaf_values(tree, X)
            return total / len(model.trees)
        case Algorithm.gradient_boosting:
            raw = np.full(X.shape[0], model.init_score, dtype=np.float64)
            for tree, weight in zip(model.trees, model.tree_weights, strict=True):
                raw += weight * leaf_values(tree, X)
            return expit(raw)
        case Algorithm.adaboost:
            decision = np.zeros(X.shape[0], dtype=np.float64)
            for tree, weight in zip(model.trees, model.tree_weights, strict=True):
                decision += weight * np.where(leaf_values(tree, X) > 0.5, 1.0, -1.0)
            return expit(decision / sum(model.tree_weights))
        case Algorithm.knn:
            neighbours = KNeighborsClassifier(n_neighbors=model.params.n_neighbors)
            neighbours.fit(model.train_X, model.train_y)
            return neighbours.predict_proba(X)[:, 1]
        case Algorithm.logistic_regression:
            return expit(np.asarray(X, dtype=np.float64) @ model.coef + model.intercept)
    raise NotSupportedError(f"Algorithm {model.algorithm} is not implemented")


def _check_schema(fingerprint: str, matrix: EncodedMatrix) -> None:
    if fingerprint != matrix.fingerprint:
        raise SchemaMismatchError(
            "model was trained on a different feature schema than the input matrix"
        )


def predict_proba(model: TrainedModel, matrix: EncodedMatrix) -> np.ndarray:
    """(n, 2) array of [P(negative), P(positive)] per row."""
    _check_schema(model.schema_fingerprint, matrix)
    positive = np.clip(_positive_proba(model, matrix.X), 0.0, 1.0)
    return np.column_stack([1.0 - positive, positive])


def vote_labels(probas: Sequence[np.ndarray]) -> np.ndarray:
    """
    Soft vote over member probability pairs: positive iff the summed
    positive probability exceeds the summed negative one. Ties are negative.
    """
    margin = np.zeros(probas[0].shape[0], dtype=np.float64)
    for proba in probas:
        margin += proba[:, 1] - proba[:, 0]
    return (margin > 0).astype(np.int64)


def soft_vote(models: Sequence[TrainedModel], matrix: EncodedMatrix) -> np.ndarray:
    if not models:
        raise InvalidParamsError("soft voting needs at least one model")
    fingerprints = {model.schema_fingerprint for model in models}
    if len(fingerprints) != 1:
        raise SchemaMismatchError("voting members disagree on the feature schema")
    return vote_labels([predict_proba(model, matrix) for model in models])


def predict(model: Model, matrix: EncodedMatrix) -> np.ndarray:
    if isinstance(model, VotingModel):
        return soft_vote(model.members, matrix)
    return vote_labels([predict_proba(model, matrix)])


def harmonic_f1(precision: float, recall: float) -> float:
    total = precision + recall
    return 2 * precision * recall / total if total > 0 else 0.0


def metrics_from_predictions(y_true: np.ndarray, y_pred: np.ndarray) -> Metrics:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.size == 0:
        return Metrics(precision=0.0, recall=0.0, f1=0.0, tp=0, fp=0, tn=0, fn=0)

    tn, fp, fn, tp = confusion_matrix(y_true, y_pred, labels=[0, 1]).ravel()
    precision, recall, f1, _ = precision_recall_fscore_support(
        y_true, y_pred, average="binary", pos_label=1, zero_division=0
    )
    return Metrics(
        precision=float(precision),
        recall=float(recall),
        f1=float(f1),
        tp=int(tp),
        fp=int(fp),
        tn=int(tn),
        fn=int(fn),
    )


def evaluate(model: Model, matrix: EncodedMatrix) -> Metrics:
    return metrics_from_predictions(matrix.y, predict(model, matrix))


def baseline_filterlist(requests: Sequence[LabeledRequest], lists: FilterList) -> Metrics:
    """Scores blocking by the request host itself, as a subdomain blacklist would."""
    y_true = np.fromiter((int(item.label) for item in requests), dtype=np.int64)
    y_pred = np.fromiter(
        (int(match_domain(lists, item.request.host) is not None) for item in requests),
        dtype=np.int64,
    )
    return metrics_from_predictions(y_true, y_pred)


def stratified_kfold(
    labels: EncodedMatrix | np.ndarray, k: int = 10, seed: int = 2
) -> list[tuple[np.ndarray, np.ndarray]]:
    y = labels.y if isinstance(labels, EncodedMatrix) else np.asarray(labels)
    if k < 2:
        raise InvalidParamsError(f"k must be at least 2, got {k}")
    classes, counts = np.unique(y, return_counts=True)
    if classes.size < 2:
        raise DegenerateDataError("stratified folds need both classes")
    if counts.min() < k:
        raise TooFewInstancesError(
            f"class {classes[counts.argmin()]} has {counts.min()} instances, fewer than k={k}"
        )
    splitter = StratifiedKFold(n_splits=k, shuffle=True, random_state=seed)
    return list(splitter.split(np.zeros((y.shape[0], 1)), y))


def split_train_test(
    labels: EncodedMatrix | np.ndarray, test_fraction: float = 0.2, seed: int = 2
) -> tuple[np.ndarray, np.ndarray]:
    """Stratified hold-out split; both index arrays come back sorted."""
    y = labels.y if isinstance(labels, EncodedMatrix) else np.asarray(labels)
    _, counts = np.unique(y, return_counts=True)
    if counts.size < 2 or counts.min() < 2:
        raise TooFewInstancesError("each class needs at least two instances to split")
    train_idx, test_idx = train_test_split(
        np.arange(y.shape[0]),
        test_size=test_fraction,
        stratify=y,
        random_state=seed,
    )
    return np.sort(train_idx), np.sort(test_idx)


def cross_validate(
    algorithm: Algorithm,
    matrix: EncodedMatrix,
    params: HyperParams,
    k: int = 10,
    *,
    n_jobs: int = 1,
) -> CVResult:
    scores: list[float] = []
    for fold, (train_idx, valid_idx) in enumerate(stratified_kfold(matrix, k, params.seed)):
        model = train(algorithm, matrix.take(train_idx), params, n_jobs=n_jobs)
        scores.append(evaluate(model, matrix.take(valid_idx)).f1)
        logger.debug("%s fold %d F1=%.4f", algorithm, fold, scores[-1])

    fold_scores = np.asarray(scores)
    return CVResult(
        algorithm=algorithm,
        params=params,
        fold_f1=scores,
        mean_f1=float(fold_scores.mean()),
        std_f1=float(fold_scores.std()),
    )


def grid_search(
    algorithm: Algorithm,
    matrix: EncodedMatrix,
    grid: Mapping[str, Sequence[Any]],
    k: int = 10,
    *,
    seed: int = 2,
    n_jobs: int = 1,
) -> GridSearchResult:
    """Exhaustive CV over `grid`; the first point in grid order wins ties."""
    if not grid or any(len(values) == 0 for values in grid.values()):
        raise InvalidParamsError(f"empty parameter grid for {algorithm}")

    points: list[CVResult] = []
    best: CVResult | None = None
    candidates = list(ParameterGrid({name: list(values) for name, values in grid.items()}))
    for index, point in enumerate(candidates, start=1):
        params = make_params({**point, "seed": seed})
        result = cross_validate(algorithm, matrix, params, k, n_jobs=n_jobs)
        points.append(result)
        logger.info(
            "Grid %s %d/%d mean F1=%.4f (std %.4f) %s",
            algorithm,
            index,
            len(candidates),
            result.mean_f1,
            result.std_f1,
            point,
        )
        if best is None or result.mean_f1 > best.mean_f1:
            best = result

    assert best is not None
    return GridSearchResult(
        algorithm=algorithm, best_params=best.params, best_score=best.mean_f1, points=points
    )


def permutation_importance(
    model: Model, matrix: EncodedMatrix, n_repeats: int = 10, seed: int = 2
) -> ImportanceReport:
    """
    F1 drop when one source feature is shuffled across rows. The one-hot
    block of a categorical feature moves as a unit; each (feature, repeat)
    pair has its own seeded generator.
    """
    groups: dict[str, list[int]] = {}
    for column, source in enumerate(matrix.schema.column_features):
        groups.setdefault(source, []).append(column)

    baseline = evaluate(model, matrix).f1
    rows = len(matrix)
    features: list[FeatureImportance] = []
    for group_index, (name, columns) in enumerate(groups.items()):
        drops: list[float] = []
        for repeat in range(n_repeats):
            rng = np.random.default_rng([seed, group_index, repeat])
            order = rng.permutation(rows)
            shuffled = matrix.X.copy()
            shuffled[:, columns] = matrix.X[np.ix_(order, columns)]
            drops.append(baseline - evaluate(model, replace(matrix, X=shuffled)).f1)

        values = np.asarray(drops)
        q1, median, q3 = np.percentile(values, [25, 50, 75])
        features.append(
            FeatureImportance(
                feature=name,
                drops=drops,
                mean=float(values.mean()),
                std=float(values.std()),
                median=float(median),
                q1=float(q1),
                q3=float(q3),
            )
        )
    return ImportanceReport(
        baseline_f1=baseline, n_repeats=n_repeats, seed=seed, features=features
    )
