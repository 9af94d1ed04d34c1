from pathlib import Path

import pytest

from app.core.config import DEFAULT_DICTIONARY, DEFAULT_SITE_GRIDS, PipelineConfig, load_config
from app.core.errors import ConfigError
from app.schemas.dns import ResolverMode
from app.schemas.features import Target
from app.schemas.learn import Algorithm


def _write_toml(tmp_path: Path, text: str) -> Path:
    path = tmp_path / "cloakwatch.toml"
    path.write_text(text, encoding="utf-8")
    return path


def test_defaults():
    config = load_config()

    assert config.seed == 2
    assert config.k_folds == 10
    assert config.test_fraction == 0.2
    assert config.target is Target.request
    assert config.resolver is ResolverMode.offline
    assert config.dictionary_path == DEFAULT_DICTIONARY
    assert config.request_negative_ratio == 9.0
    assert config.log_level == "INFO"
    assert Algorithm.gradient_boosting in config.site_grids


def test_toml_file_values(tmp_path):
    path = _write_toml(
        tmp_path,
        """
seed = 11
target = "site"
filter_paths = ["easyprivacy.txt", "adguard.txt"]

[site_grids.random_forest]
n_estimators = [10]
max_features = [1, 0.5]
""",
    )

    config = load_config(path)

    assert config.seed == 11
    assert config.target is Target.site
    assert config.filter_paths == [Path("easyprivacy.txt"), Path("adguard.txt")]
    assert config.grids_for(Target.site) == {
        Algorithm.random_forest: {"n_estimators": [10], "max_features": [1, 0.5]}
    }
    assert config.grids_for(Target.request) == config.request_grids


def test_overrides_beat_file_and_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("CLOAKWATCH_SEED", "5")
    path = _write_toml(tmp_path, "seed = 7\nk_folds = 4\n")

    config = load_config(path, seed=9, k_folds=None)

    assert config.seed == 9
    assert config.k_folds == 4


def test_file_beats_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("CLOAKWATCH_SEED", "5")
    path = _write_toml(tmp_path, "seed = 7\n")

    assert load_config(path).seed == 7


def test_environment_and_dotenv(tmp_path, monkeypatch):
    monkeypatch.setenv("CLOAKWATCH_K_FOLDS", "5")
    (tmp_path / ".env").write_text("CLOAKWATCH_LOG_LEVEL=debug\n", encoding="utf-8")

    config = load_config()

    assert config.k_folds == 5
    assert config.log_level == "DEBUG"


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.toml")


def test_unparseable_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(_write_toml(tmp_path, "seed = = 3\n"))


@pytest.mark.parametrize(
    "text",
    [
        "k_folds = 1\n",
        "test_fraction = 1.5\n",
        'log_level = "LOUD"\n',
        'compare_algorithms = ["svc"]\n',
        'resolver = "carrier-pigeon"\n',
        "[site_grids.random_forest]\nbogus = [1]\n",
        "[request_grids.extra_trees]\nn_estimators = []\n",
    ],
)
def test_invalid_settings_raise_config_error(tmp_path, text):
    with pytest.raises(ConfigError):
        load_config(_write_toml(tmp_path, text))


def test_require_names_missing_setting():
    config = PipelineConfig()

    with pytest.raises(ConfigError, match="crawl_path"):
        config.require("crawl_path")
    with pytest.raises(ConfigError, match="filter_paths"):
        config.require("filter_paths")
    assert config.require("seed") == 2


def test_default_grids_are_not_shared():
    config = load_config()
    config.site_grids[Algorithm.random_forest]["n_estimators"].append(7)

    assert 7 not in DEFAULT_SITE_GRIDS[Algorithm.random_forest]["n_estimators"]
