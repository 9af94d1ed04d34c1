from pathlib import Path

from sqlalchemy import Engine, MetaData, create_engine, text
from sqlalchemy.engine import URL
from sqlalchemy.exc import SQLAlchemyError

from app.core.errors import InputFileError


def build_crawl_engine(sqlite_path: Path) -> Engine:
    """Read-only engine over a crawler's SQLite database."""
    if not sqlite_path.is_file():
        raise InputFileError(f"Crawl database not found: {sqlite_path}")

    url = URL.create(
        "sqlite",
        database=f"file:{sqlite_path.resolve()}",
        query={"mode": "ro", "uri": "true"},
    )
    return create_engine(url, connect_args={"check_same_thread": False})


def reflect_tables(engine: Engine, names: tuple[str, ...]) -> MetaData:
    metadata = MetaData()
    try:
        metadata.reflect(bind=engine, only=lambda name, _: name in names)
    except SQLAlchemyError as exc:
        raise InputFileError(f"Cannot read crawl database: {exc}") from exc
    return metadata


def ping_database(engine: Engine) -> bool:
    try:
        with engine.connect() as connection:
            connection.execute(text("SELECT 1"))
        return True
    except SQLAlchemyError:
        return False
