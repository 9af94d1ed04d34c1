import logging
from pathlib import Path
from typing import Any, Final

from pydantic import Field, ValidationError, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict, TomlConfigSettingsSource

from app.core.errors import ConfigError
from app.schemas.dns import ResolverMode
from app.schemas.features import Target
from app.schemas.learn import UNSUPPORTED_ALGORITHMS, Algorithm, HyperParams

logger = logging.getLogger(__name__)

DEFAULT_DICTIONARY: Final = Path(__file__).resolve().parent.parent / "data" / "words.txt"

Grid = dict[str, list[int | float | None]]

# Each grid contains the best settings reported for the published crawls.
DEFAULT_SITE_GRIDS: Final[dict[Algorithm, Grid]] = {
    Algorithm.random_forest: {
        "max_features": [1, 0.3],
        "min_samples_split": [2, 8],
        "min_samples_leaf": [1, 3],
        "n_estimators": [100, 300],
    },
    Algorithm.extra_trees: {
        "max_features": [1, 10],
        "min_samples_split": [2],
        "min_samples_leaf": [1, 3],
        "n_estimators": [100, 300],
    },
    Algorithm.gradient_boosting: {
        "max_features": [0.3],
        "min_samples_leaf": [1, 100],
        "n_estimators": [100, 300],
        "learning_rate": [0.1, 0.2],
        "max_depth": [3, 8],
    },
}

DEFAULT_REQUEST_GRIDS: Final[dict[Algorithm, Grid]] = {
    Algorithm.random_forest: {
        "max_features": [1],
        "min_samples_split": [2, 8],
        "min_samples_leaf": [1],
        "n_estimators": [100, 300],
    },
    Algorithm.extra_trees: {
        "max_features": [1],
        "min_samples_split": [2],
        "min_samples_leaf": [1, 3],
        "n_estimators": [100, 300],
    },
}

DEFAULT_COMPARE: Final = [
    Algorithm.decision_tree,
    Algorithm.random_forest,
    Algorithm.extra_trees,
    Algorithm.gradient_boosting,
    Algorithm.adaboost,
    Algorithm.knn,
    Algorithm.logistic_regression,
]

_LOG_LEVELS: Final = ("DEBUG", "INFO", "WARNING", "ERROR")


def _copy_grids(grids: dict[Algorithm, Grid]) -> dict[Algorithm, Grid]:
    return {algorithm: {k: list(v) for k, v in grid.items()} for algorithm, grid in grids.items()}


class PipelineConfig(BaseSettings):
    model_config = SettingsConfigDict(
        env_prefix="CLOAKWATCH_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    crawl_path: Path | None = None
    fdns_path: Path | None = None
    filter_paths: list[Path] = Field(default_factory=list)
    dictionary_path: Path = DEFAULT_DICTIONARY
    psl_path: Path | None = None
    output_dir: Path = Path("out")
    labeled_path: Path | None = None
    train_data_path: Path | None = None
    test_data_path: Path | None = None

    target: Target = Target.request
    resolver: ResolverMode = ResolverMode.offline
    upstream: str | None = None
    dns_timeout: float = Field(default=5.0, gt=0)
    resolve_concurrency: int = Field(default=32, ge=1)

    seed: int = 2
    k_folds: int = Field(default=10, ge=2)
    test_fraction: float = Field(default=0.2, gt=0, lt=1)
    n_jobs: int = Field(default=1, ge=-1)
    top_categories: int = Field(default=20, ge=1)
    request_negative_ratio: float | None = Field(default=9.0, gt=0)
    importance_repeats: int = Field(default=10, ge=1)
    compare_algorithms: list[Algorithm] = Field(default_factory=lambda: list(DEFAULT_COMPARE))
    site_grids: dict[Algorithm, Grid] = Field(
        default_factory=lambda: _copy_grids(DEFAULT_SITE_GRIDS)
    )
    request_grids: dict[Algorithm, Grid] = Field(
        default_factory=lambda: _copy_grids(DEFAULT_REQUEST_GRIDS)
    )

    reference: str | None = None
    dataset_url: str | None = None
    log_level: str = "INFO"

    @field_validator("log_level")
    @classmethod
    def _known_level(cls, value: str) -> str:
        level = value.strip().upper()
        if level not in _LOG_LEVELS:
            raise ValueError(f"log_level must be one of {', '.join(_LOG_LEVELS)}")
        return level

    @field_validator("compare_algorithms")
    @classmethod
    def _implemented(cls, values: list[Algorithm]) -> list[Algorithm]:
        unsupported = [a.value for a in values if a in UNSUPPORTED_ALGORITHMS]
        if unsupported:
            raise ValueError(f"algorithms not implemented: {', '.join(unsupported)}")
        return values

    @field_validator("site_grids", "request_grids")
    @classmethod
    def _known_grid_keys(cls, grids: dict[Algorithm, Grid]) -> dict[Algorithm, Grid]:
        known = set(HyperParams.model_fields) - {"seed"}
        for algorithm, grid in grids.items():
            unknown = sorted(set(grid) - known)
            if unknown:
                raise ValueError(f"{algorithm} grid has unknown parameters: {', '.join(unknown)}")
            if not grid or any(not values for values in grid.values()):
                raise ValueError(f"{algorithm} grid must list at least one value per parameter")
        return grids

    def grids_for(self, target: Target) -> dict[Algorithm, Grid]:
        return self.site_grids if target is Target.site else self.request_grids

    def require(self, name: str) -> Any:
        value = getattr(self, name)
        if value is None or value == []:
            raise ConfigError(f"Missing required setting '{name}'")
        return value


def _config_error(exc: ValidationError) -> ConfigError:
    first = exc.errors()[0]
    location = ".".join(str(part) for part in first.get("loc", ())) or "config"
    return ConfigError(f"Invalid setting {location}: {first.get('msg', 'invalid value')}")


def load_config(config_file: Path | None = None, **overrides: Any) -> PipelineConfig:
    """
    Effective configuration: explicit overrides, then the TOML file, then
    CLOAKWATCH_* environment variables and `.env`, then defaults.
    """
    file_values: dict[str, Any] = {}
    if config_file is not None:
        if not config_file.is_file():
            raise ConfigError(f"Config file not found: {config_file}")
        try:
            file_values = TomlConfigSettingsSource(PipelineConfig, toml_file=config_file)()
        except ValueError as exc:
            raise ConfigError(f"Cannot parse {config_file}: {exc}") from exc

    values = {**file_values, **{k: v for k, v in overrides.items() if v is not None}}
    try:
        config = PipelineConfig(**values)
    except ValidationError as exc:
        raise _config_error(exc) from exc
    logger.debug("Effective config: %s", config.model_dump(mode="json"))
    return config
