import gzip
import json

import numpy as np
import pytest

from app.core.errors import InputFileError, SchemaMismatchError
from app.schemas.features import EncodedMatrix, FeatureSchema, Target
from app.schemas.learn import Algorithm, HyperParams, VotingModel
from app.services import learn_service, model_store

PROVENANCE = {"target": "site", "seed": 2, "train_rows": 200}


@pytest.fixture(scope="module")
def matrix() -> EncodedMatrix:
    rng = np.random.default_rng(31)
    X = rng.normal(size=(200, 3))
    y = (X[:, 0] - X[:, 2] > 0).astype(np.int64)
    schema = FeatureSchema(target=Target.site, numeric=("a", "b", "c"), vocabularies={})
    return EncodedMatrix(schema=schema, X=X, y=y)


@pytest.mark.parametrize(
    "algorithm",
    [
        Algorithm.decision_tree,
        Algorithm.random_forest,
        Algorithm.extra_trees,
        Algorithm.gradient_boosting,
        Algorithm.adaboost,
        Algorithm.knn,
        Algorithm.logistic_regression,
    ],
)
def test_saved_model_predicts_like_original(tmp_path, matrix, algorithm):
    model = learn_service.train(algorithm, matrix, HyperParams(n_estimators=15, seed=3))
    path = tmp_path / f"{algorithm}.json.gz"

    model_store.save_model(model, path, PROVENANCE)
    loaded = model_store.load_model(path)

    assert loaded.algorithm is algorithm
    assert loaded.params == model.params
    assert loaded.schema_fingerprint == matrix.fingerprint
    assert np.array_equal(
        learn_service.predict_proba(loaded, matrix), learn_service.predict_proba(model, matrix)
    )


def test_vote_round_trip(tmp_path, matrix):
    params = HyperParams(n_estimators=10)
    vote = learn_service.train_vote(
        {Algorithm.random_forest: params, Algorithm.gradient_boosting: params}, matrix
    )
    path = tmp_path / "vote.json.gz"

    model_store.save_model(vote, path)
    loaded = model_store.load_model(path)

    assert isinstance(loaded, VotingModel)
    assert loaded.algorithms == vote.algorithms
    assert np.array_equal(learn_service.predict(loaded, matrix), learn_service.predict(vote, matrix))


def test_saves_are_byte_identical(tmp_path, matrix):
    model = learn_service.train(Algorithm.random_forest, matrix, HyperParams(n_estimators=5))

    first = model_store.save_model(model, tmp_path / "a.json.gz", PROVENANCE)
    second = model_store.save_model(model, tmp_path / "b.json.gz", PROVENANCE)

    assert first.read_bytes() == second.read_bytes()


def test_retraining_reproduces_the_same_bytes(matrix):
    params = HyperParams(n_estimators=8, seed=9)

    first = learn_service.train(Algorithm.extra_trees, matrix, params)
    second = learn_service.train(Algorithm.extra_trees, matrix, params)

    assert model_store.dumps_model(first) == model_store.dumps_model(second)


def test_plain_json_model_keeps_provenance(tmp_path, matrix):
    model = learn_service.train(Algorithm.decision_tree, matrix, HyperParams())
    path = tmp_path / "tree.json"

    model_store.save_model(model, path, PROVENANCE)

    document = json.loads(path.read_text(encoding="utf-8"))
    assert document["format"] == model_store.MODEL_FORMAT
    assert document["provenance"] == PROVENANCE
    assert document["schema"]["numeric"] == ["a", "b", "c"]


def test_load_rejects_unknown_version(matrix):
    model = learn_service.train(Algorithm.decision_tree, matrix, HyperParams())
    document = json.loads(model_store.dumps_model(model))
    document["version"] = model_store.FORMAT_VERSION + 1

    with pytest.raises(SchemaMismatchError):
        model_store.loads_model(json.dumps(document).encode("utf-8"))


def test_load_rejects_tampered_schema(matrix):
    model = learn_service.train(Algorithm.decision_tree, matrix, HyperParams())
    document = json.loads(model_store.dumps_model(model))
    document["schema"]["numeric"] = ["a", "b", "z"]

    with pytest.raises(SchemaMismatchError):
        model_store.loads_model(gzip.compress(json.dumps(document).encode("utf-8")))


def test_load_rejects_garbage():
    with pytest.raises(SchemaMismatchError):
        model_store.loads_model(b"not json at all")
    with pytest.raises(SchemaMismatchError):
        model_store.loads_model(b'{"version": 1, "format": "cloakwatch.model"}')


def test_load_missing_file(tmp_path):
    with pytest.raises(InputFileError):
        model_store.load_model(tmp_path / "absent.json.gz")
