import gzip
import json
import logging
from pathlib import Path
from typing import Any, Final

import numpy as np
from pydantic import ValidationError

from app.core.errors import InputFileError, SchemaMismatchError
from app.schemas.features import FeatureSchema
from app.schemas.learn import Algorithm, HyperParams, TrainedModel, TreeArrays, VotingModel

logger = logging.getLogger(__name__)

FORMAT_VERSION: Final = 1
MODEL_FORMAT: Final = "cloakwatch.model"
VOTE_FORMAT: Final = "cloakwatch.vote"

_TREE_FIELDS: Final = ("children_left", "children_right", "feature", "threshold", "value")
_INT_TREE_FIELDS: Final = frozenset({"children_left", "children_right", "feature"})


def _tree_document(tree: TreeArrays) -> dict[str, list[Any]]:
    return {name: getattr(tree, name).tolist() for name in _TREE_FIELDS}


def _model_document(model: TrainedModel) -> dict[str, Any]:
    return {
        "format": MODEL_FORMAT,
        "version": FORMAT_VERSION,
        "algorithm": model.algorithm.value,
        "params": model.params.model_dump(mode="json"),
        "schema": model.schema.model_dump(mode="json"),
        "schema_fingerprint": model.schema_fingerprint,
        "classes": list(model.classes),
        "trees": [_tree_document(tree) for tree in model.trees],
        "tree_weights": list(model.tree_weights),
        "init_score": model.init_score,
        "coef": model.coef.tolist() if model.coef is not None else None,
        "intercept": model.intercept,
        "train_X": model.train_X.tolist() if model.train_X is not None else None,
        "train_y": model.train_y.tolist() if model.train_y is not None else None,
    }


def model_document(
    model: TrainedModel | VotingModel, provenance: dict[str, Any] | None = None
) -> dict[str, Any]:
    if isinstance(model, VotingModel):
        document: dict[str, Any] = {
            "format": VOTE_FORMAT,
            "version": FORMAT_VERSION,
            "algorithms": [algorithm.value for algorithm in model.algorithms],
            "schema_fingerprint": model.schema.fingerprint,
            "members": [_model_document(member) for member in model.members],
        }
    else:
        document = _model_document(model)
    if provenance is not None:
        document["provenance"] = provenance
    return document


def dumps_model(
    model: TrainedModel | VotingModel, provenance: dict[str, Any] | None = None
) -> bytes:
    text = json.dumps(model_document(model, provenance), sort_keys=True, separators=(",", ":"))
    return text.encode("utf-8")


def save_model(
    model: TrainedModel | VotingModel,
    path: Path,
    provenance: dict[str, Any] | None = None,
) -> Path:
    """Write `model` as JSON, gzip-compressed when the name ends in ".gz"."""
    payload = dumps_model(model, provenance)
    if path.suffix == ".gz":
        payload = gzip.compress(payload, mtime=0)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(payload)
    logger.info("Wrote model %s", path)
    return path


def _tree_from_document(document: dict[str, list[Any]]) -> TreeArrays:
    return TreeArrays(
        **{
            name: np.asarray(
                document[name], dtype=np.int64 if name in _INT_TREE_FIELDS else np.float64
            )
            for name in _TREE_FIELDS
        }
    )


def _optional_array(values: list[Any] | None, dtype: type) -> np.ndarray | None:
    return None if values is None else np.asarray(values, dtype=dtype)


def _model_from_document(document: dict[str, Any]) -> TrainedModel:
    if document.get("format") != MODEL_FORMAT:
        raise SchemaMismatchError(f"not a model document: {document.get('format')!r}")

    schema = FeatureSchema.model_validate(document["schema"])
    if schema.fingerprint != document["schema_fingerprint"]:
        raise SchemaMismatchError("model schema does not match its recorded fingerprint")

    train_X = _optional_array(document.get("train_X"), np.float64)
    if train_X is not None and train_X.size == 0:
        train_X = train_X.reshape(0, len(schema.columns))
    return TrainedModel(
        algorithm=Algorithm(document["algorithm"]),
        params=HyperParams.model_validate(document["params"]),
        schema=schema,
        trees=tuple(_tree_from_document(tree) for tree in document["trees"]),
        tree_weights=tuple(float(w) for w in document["tree_weights"]),
        init_score=float(document["init_score"]),
        coef=_optional_array(document.get("coef"), np.float64),
        intercept=float(document["intercept"]),
        train_X=train_X,
        train_y=_optional_array(document.get("train_y"), np.int64),
        classes=tuple(document.get("classes", (0, 1))),
    )


def loads_model(payload: bytes) -> TrainedModel | VotingModel:
    if payload[:2] == b"\x1f\x8b":
        payload = gzip.decompress(payload)
    try:
        document = json.loads(payload)
        if document.get("version") != FORMAT_VERSION:
            raise SchemaMismatchError(
                f"unsupported model format version {document.get('version')!r}"
            )
        if document.get("format") == VOTE_FORMAT:
            members = tuple(_model_from_document(member) for member in document["members"])
            if not members or {m.schema_fingerprint for m in members} != {
                document["schema_fingerprint"]
            }:
                raise SchemaMismatchError("voting members disagree on the feature schema")
            return VotingModel(members=members)
        return _model_from_document(document)
    except (AttributeError, KeyError, TypeError, ValueError, ValidationError) as exc:
        raise SchemaMismatchError(f"malformed model document: {exc}") from exc


def load_model(path: Path) -> TrainedModel | VotingModel:
    try:
        payload = path.read_bytes()
    except OSError as exc:
        raise InputFileError(f"Cannot read model {path}: {exc}") from exc
    return loads_model(payload)
