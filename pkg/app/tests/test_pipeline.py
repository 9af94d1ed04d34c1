import json
from pathlib import Path

import pandas as pd
import pytest

from app.core.config import load_config
from app.core.errors import EXIT_CONFIG, EXIT_DATA, EXIT_OK
from app.main import main
from app.schemas.features import SiteFeatures, Target
from app.services import pipeline_service
from app.services.labeler_service import load_labeled
from app.tests.corpus import Corpus, make_corpus

CONFIG_TEMPLATE = """
crawl_path = "{crawl}"
fdns_path = "{fdns}"
filter_paths = ["{filters}"]
output_dir = "{out}"
k_folds = 3
compare_algorithms = ["decision_tree", "random_forest"]
importance_repeats = 3
request_negative_ratio = 4.0

[site_grids.random_forest]
n_estimators = [10]
max_features = [1, 2]

[site_grids.extra_trees]
n_estimators = [10]

[site_grids.gradient_boosting]
n_estimators = [10]
max_depth = [2]

[request_grids.random_forest]
n_estimators = [10]
min_samples_split = [2, 4]

[request_grids.extra_trees]
n_estimators = [10]
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory, corpus) -> Path:
    root = tmp_path_factory.mktemp("pipeline")
    files = corpus.write(root / "input")
    (root / "cloakwatch.toml").write_text(
        CONFIG_TEMPLATE.format(
            crawl=files.crawl.as_posix(),
            fdns=files.fdns.as_posix(),
            filters=files.filters.as_posix(),
            out=(root / "out").as_posix(),
        ),
        encoding="utf-8",
    )
    assert main(["label", "--config", str(root / "cloakwatch.toml")]) == EXIT_OK
    return root


@pytest.fixture(scope="module")
def config_path(workspace) -> str:
    return str(workspace / "cloakwatch.toml")


@pytest.fixture(scope="module")
def trained(workspace, config_path) -> Path:
    for target in ("request", "site"):
        assert main(["train", "--config", config_path, "--target", target]) == EXIT_OK
    return workspace / "out"


def test_label_writes_dataset_and_summary(workspace, corpus):
    out = workspace / "out"

    dataset = load_labeled(out / "labeled.jsonl")

    assert dataset.positive_sites == corpus.positive_sites == 12
    assert dataset.positive_requests == corpus.positive_requests
    meta = json.loads((out / "labeled.meta.json").read_text(encoding="utf-8"))
    assert meta["resolve_failures"] == 0
    assert meta["provenance"]["filter_sources"] == ["trackers"]
    summary = json.loads((out / "summary.json").read_text(encoding="utf-8"))
    assert summary["summary"]["positive_sites"] == 12
    assert (out / "summary.csv").is_file()
    assert (out / "effective_config.json").is_file()


def test_label_offline_without_fdns_is_config_error(tmp_path, corpus_files):
    code = main(
        [
            "label",
            "--crawl",
            str(corpus_files.crawl),
            "--filters",
            str(corpus_files.filters),
            "--out",
            str(tmp_path / "out"),
        ]
    )

    assert code == EXIT_CONFIG


def test_label_missing_crawl_is_data_error(tmp_path, corpus_files):
    code = main(
        [
            "label",
            "--crawl",
            str(tmp_path / "absent.jsonl"),
            "--fdns",
            str(corpus_files.fdns),
            "--filters",
            str(corpus_files.filters),
            "--out",
            str(tmp_path / "out"),
        ]
    )

    assert code == EXIT_DATA


def test_missing_config_file_is_config_error(tmp_path):
    assert main(["summary", "--config", str(tmp_path / "absent.toml")]) == EXIT_CONFIG


def test_train_writes_members_and_vote(trained):
    for target, members in (
        ("request", ["random_forest", "extra_trees"]),
        ("site", ["random_forest", "extra_trees", "gradient_boosting"]),
    ):
        models = trained / target / "models"
        for name in members:
            assert (models / f"{name}.json.gz").is_file()
            assert (models / f"{name}.default.json.gz").is_file()
        assert (models / "vote.json.gz").is_file()

        report = json.loads((trained / target / "cv_report.json").read_text(encoding="utf-8"))
        assert [row["algorithm"] for row in report["comparison"]] == [
            "decision_tree",
            "random_forest",
        ]
        assert report["members"] == members
        assert set(report["grid_search"]) == set(members)


def test_retraining_is_byte_identical(trained, config_path):
    vote = trained / "request" / "models" / "vote.json.gz"
    before = vote.read_bytes()

    assert main(["train", "--config", config_path, "--target", "request"]) == EXIT_OK

    assert vote.read_bytes() == before


def test_evaluate_request_target(trained, config_path):
    assert main(["evaluate", "--config", config_path, "--target", "request"]) == EXIT_OK

    rows = json.loads((trained / "request" / "metrics.json").read_text(encoding="utf-8"))[
        "metrics"
    ]
    names = {(row["model"], row["variant"]) for row in rows}
    assert ("vote", "tuned") in names
    assert ("random_forest", "default") in names
    assert ("filterlist:trackers", "baseline") in names
    vote = next(row for row in rows if row["model"] == "vote")
    assert vote["f1"] >= 0.75
    assert (trained / "request" / "metrics.csv").is_file()


def test_evaluate_site_target_has_no_filterlist_rows(trained, config_path):
    assert main(["evaluate", "--config", config_path, "--target", "site"]) == EXIT_OK

    rows = json.loads((trained / "site" / "metrics.json").read_text(encoding="utf-8"))["metrics"]
    assert not any(row["model"].startswith("filterlist:") for row in rows)
    assert [row["model"] for row in rows if row["variant"] == "tuned"] == [
        "random_forest",
        "extra_trees",
        "gradient_boosting",
        "vote",
    ]


def test_importance_ranks_every_feature(trained, config_path):
    assert main(["importance", "--config", config_path, "--target", "site"]) == EXIT_OK

    report = json.loads((trained / "site" / "importance.json").read_text(encoding="utf-8"))
    features = {item["feature"] for item in report["features"]}
    assert features == set(SiteFeatures.numeric_fields) | {"country", "category"}
    assert all(len(item["drops"]) == 3 for item in report["features"])
    frame = pd.read_csv(trained / "site" / "importance.csv")
    assert list(frame.columns) == ["feature", "median", "q1", "q3", "mean", "std"]


def test_evaluate_without_models_is_data_error(workspace, config_path, tmp_path):
    code = main(
        [
            "evaluate",
            "--config",
            config_path,
            "--labeled",
            str(workspace / "out" / "labeled.jsonl"),
            "--out",
            str(tmp_path / "fresh"),
        ]
    )

    assert code == EXIT_DATA


def test_features_csv(workspace, config_path):
    assert main(["features", "--config", config_path, "--target", "site"]) == EXIT_OK

    frame = pd.read_csv(workspace / "out" / "features_site.csv")
    columns = list(frame.columns)
    assert columns[0] == "instance_id"
    assert columns[1 : 1 + len(SiteFeatures.numeric_fields)] == list(SiteFeatures.numeric_fields)
    assert columns[-1] == "label"
    assert len(frame) == 24
    assert frame["label"].sum() == 12
    split = json.loads((workspace / "out" / "site" / "split.json").read_text(encoding="utf-8"))
    assert sorted(split["train"] + split["test"]) == sorted(frame["instance_id"])


def test_summary_against_reference(config_path, tmp_path):
    args = ["summary", "--config", config_path, "--reference", "2020", "--out", str(tmp_path)]
    assert main(args) == EXIT_OK

    summary = json.loads((tmp_path / "summary.json").read_text(encoding="utf-8"))
    assert summary["reference"] == "2020"
    assert "total_sites" in {d["metric"] for d in summary["deviations"]}


def test_drift_on_same_dataset_has_zero_delta(workspace, config_path, tmp_path):
    labeled = str(workspace / "out" / "labeled.jsonl")
    out = tmp_path / "drift"

    code = main(
        [
            "drift",
            "--config",
            config_path,
            "--target",
            "site",
            "--train-data",
            labeled,
            "--test-data",
            labeled,
            "--out",
            str(out),
        ]
    )

    assert code == EXIT_OK
    drift = json.loads((out / "site" / "drift.json").read_text(encoding="utf-8"))
    assert drift["delta"] == {"precision": 0.0, "recall": 0.0, "f1": 0.0}
    assert drift["same"] == drift["cross"]


def _label_corpus(config_path: str, corpus: Corpus, root: Path) -> Path:
    files = corpus.write(root / "input")
    out = root / "out"
    code = main(
        [
            "label",
            "--config",
            config_path,
            "--crawl",
            str(files.crawl),
            "--fdns",
            str(files.fdns),
            "--out",
            str(out),
        ]
    )
    assert code == EXIT_OK
    return out


def test_drift_across_crawl_years(config_path, tmp_path):
    year_a = _label_corpus(config_path, make_corpus(160, seed=5), tmp_path / "a")
    year_b = _label_corpus(config_path, make_corpus(160, seed=8, year="B"), tmp_path / "b")

    code = main(
        [
            "drift",
            "--config",
            config_path,
            "--target",
            "request",
            "--train-data",
            str(year_a / "labeled.jsonl"),
            "--test-data",
            str(year_b / "labeled.jsonl"),
            "--out",
            str(tmp_path / "drift"),
        ]
    )

    assert code == EXIT_OK
    drift = json.loads((tmp_path / "drift" / "request" / "drift.json").read_text(encoding="utf-8"))
    assert set(drift["delta"]) == {"precision", "recall", "f1"}
    assert drift["delta"]["f1"] == pytest.approx(drift["same"]["f1"] - drift["cross"]["f1"])
    assert 0 < drift["cross"]["f1"] < drift["same"]["f1"]


def test_split_is_redrawn_when_seed_or_fraction_change(workspace, config_path, parser, tmp_path):
    dataset = load_labeled(workspace / "out" / "labeled.jsonl")
    base = load_config(Path(config_path), output_dir=tmp_path)
    data = pipeline_service.target_data(base, dataset, Target.site, parser)
    split_path = tmp_path / "site" / "split.json"

    first = pipeline_service.load_or_make_split(base, data)
    assert pipeline_service.load_or_make_split(base, data) == first
    assert len(first.test_ids) == 5

    wider = load_config(Path(config_path), output_dir=tmp_path, test_fraction=0.5)
    redrawn = pipeline_service.load_or_make_split(wider, data)
    assert len(redrawn.test_ids) == 12
    stored = json.loads(split_path.read_text(encoding="utf-8"))
    assert stored["provenance"]["test_fraction"] == 0.5
    assert sorted(stored["test"]) == sorted(redrawn.test_ids)

    reseeded = load_config(Path(config_path), output_dir=tmp_path, test_fraction=0.5, seed=11)
    pipeline_service.load_or_make_split(reseeded, data)
    stored = json.loads(split_path.read_text(encoding="utf-8"))
    assert stored["provenance"]["seed"] == 11


@pytest.mark.slow
def test_request_model_on_large_synthetic_crawl(config_path, tmp_path):
    out = _label_corpus(config_path, make_corpus(2000, seed=13), tmp_path)

    for command in ("train", "evaluate"):
        args = [command, "--config", config_path, "--target", "request", "--out", str(out)]
        assert main(args) == EXIT_OK

    rows = json.loads((out / "request" / "metrics.json").read_text(encoding="utf-8"))["metrics"]
    vote = next(row for row in rows if row["model"] == "vote")
    assert vote["f1"] >= 0.95
