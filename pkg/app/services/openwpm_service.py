"""
Converter from an OpenWPM crawl database to the crawl JSONL format.

Reads `site_visits`, `http_requests` and (when present) `javascript`.
Site metadata (ranking, country, category) comes from an optional CSV
with a `domain` column.
"""

import logging
from pathlib import Path
from typing import Final

import pandas as pd
from pydantic import ValidationError
from sqlalchemy import Column, Table, select

from app.core.database import build_crawl_engine, ping_database, reflect_tables
from app.core.domains import host_of_url, normalize_fqdn
from app.core.errors import InputFileError, UrlError
from app.schemas.crawl import RequestRecord, SiteMeta, SiteRecord
from app.services.ingest_service import dump_crawl

logger = logging.getLogger(__name__)

_REQUIRED_TABLES: Final = ("site_visits", "http_requests")
_JAVASCRIPT_TABLE: Final = "javascript"

# Canvas, WebGL, audio and navigator/screen probing.
FINGERPRINT_SYMBOLS: Final = (
    r"^(?:HTMLCanvasElement|CanvasRenderingContext2D|WebGLRenderingContext"
    r"|WebGL2RenderingContext|AudioContext|OfflineAudioContext|AnalyserNode"
    r"|OscillatorNode|window\.navigator|window\.screen|Navigator|Screen)\b"
)

# Firefox nsIContentPolicy codes used by older OpenWPM releases.
_CONTENT_POLICY_TYPES: Final = {
    1: "other",
    2: "script",
    3: "image",
    4: "stylesheet",
    5: "object",
    6: "main_frame",
    7: "sub_frame",
    10: "ping",
    11: "xmlhttprequest",
    12: "object_subrequest",
    14: "font",
    15: "media",
    16: "websocket",
    19: "beacon",
    20: "xmlhttprequest",
    21: "imageset",
}


def _column(table: Table, *names: str) -> Column | None:
    for name in names:
        if name in table.c:
            return table.c[name].label(names[0])
    return None


def _missing(value: object) -> bool:
    return value is None or (isinstance(value, float) and pd.isna(value))


def _text(value: object, default: str) -> str:
    return default if _missing(value) else str(value)


def _flag(value: object) -> bool:
    return False if _missing(value) else bool(value)


def _content_type(value: object) -> str:
    if _missing(value):
        return "other"
    if isinstance(value, int | float):
        return _CONTENT_POLICY_TYPES.get(int(value), "other")
    return str(value).strip().lower() or "other"


def _read_frames(sqlite_path: Path) -> tuple[pd.DataFrame, pd.DataFrame, pd.Series]:
    engine = build_crawl_engine(sqlite_path)
    if not ping_database(engine):
        raise InputFileError(f"Cannot open crawl database {sqlite_path}")

    metadata = reflect_tables(engine, (*_REQUIRED_TABLES, _JAVASCRIPT_TABLE))
    missing = [name for name in _REQUIRED_TABLES if name not in metadata.tables]
    if missing:
        raise InputFileError(f"{sqlite_path} lacks table(s): {', '.join(missing)}")

    visits_table = metadata.tables["site_visits"]
    requests_table = metadata.tables["http_requests"]
    request_columns = [
        column
        for column in (
            _column(requests_table, "visit_id"),
            _column(requests_table, "url"),
            _column(requests_table, "method"),
            _column(requests_table, "resource_type", "content_policy_type"),
            _column(requests_table, "is_XHR", "is_xhr"),
            _column(requests_table, "is_third_party_window"),
            _column(requests_table, "time_stamp"),
        )
        if column is not None
    ]

    with engine.connect() as connection:
        visits = pd.read_sql(
            select(visits_table.c.visit_id, visits_table.c.site_url).order_by(
                visits_table.c.visit_id
            ),
            connection,
        )
        requests = pd.read_sql(
            select(*request_columns).order_by(
                requests_table.c.visit_id, *requests_table.primary_key.columns
            ),
            connection,
        )
        script_calls = pd.Series(dtype="int64")
        if _JAVASCRIPT_TABLE in metadata.tables:
            javascript = metadata.tables[_JAVASCRIPT_TABLE]
            calls = pd.read_sql(select(javascript.c.visit_id, javascript.c.symbol), connection)
            fingerprinting = calls["symbol"].fillna("").str.contains(FINGERPRINT_SYMBOLS)
            script_calls = calls[fingerprinting].groupby("visit_id").size()
    engine.dispose()

    if "time_stamp" in requests:
        stamps = pd.to_datetime(requests["time_stamp"], utc=True, errors="coerce")
        epoch = pd.Timestamp(0, tz="UTC")
        requests["timestamp"] = (stamps - epoch).dt.total_seconds().fillna(0.0)
    else:
        requests["timestamp"] = 0.0
    return visits, requests, script_calls


def _site_metadata(metadata_csv: Path | None) -> dict[str, SiteMeta]:
    if metadata_csv is None:
        return {}
    try:
        frame = pd.read_csv(metadata_csv, dtype={"country": str, "category": str})
    except (OSError, ValueError) as exc:
        raise InputFileError(f"Cannot read site metadata {metadata_csv}: {exc}") from exc
    if "domain" not in frame:
        raise InputFileError(f"{metadata_csv} has no 'domain' column")

    frame = frame.astype(object).where(frame.notna(), None)
    metas: dict[str, SiteMeta] = {}
    for row in frame.to_dict("records"):
        try:
            metas[normalize_fqdn(str(row["domain"]))] = SiteMeta(
                ranking=row.get("ranking"),
                country=row.get("country"),
                category=row.get("category"),
            )
        except ValidationError as exc:
            raise InputFileError(f"{metadata_csv}: bad row for {row['domain']!r}: {exc}") from exc
    return metas


def convert_openwpm(
    sqlite_path: Path, out_path: Path, metadata_csv: Path | None = None
) -> list[SiteRecord]:
    visits, requests, script_calls = _read_frames(sqlite_path)
    metas = _site_metadata(metadata_csv)
    grouped = {visit_id: frame for visit_id, frame in requests.groupby("visit_id", sort=False)}

    sites: list[SiteRecord] = []
    skipped_requests = 0
    for visit_id, site_url in visits.itertuples(index=False):
        try:
            domain = host_of_url(str(site_url))
        except UrlError:
            logger.warning("Skipping visit %s with unusable site URL %r", visit_id, site_url)
            continue

        site_id = str(visit_id)
        records: list[RequestRecord] = []
        frame = grouped.get(visit_id)
        for row in [] if frame is None else frame.to_dict("records"):
            try:
                records.append(
                    RequestRecord(
                        site_id=site_id,
                        url=_text(row.get("url"), ""),
                        method=_text(row.get("method"), "GET"),
                        content_type=_content_type(row.get("resource_type")),
                        is_xhr=_flag(row.get("is_XHR")),
                        is_third_party_window=_flag(row.get("is_third_party_window")),
                        timestamp=float(row["timestamp"]),
                    )
                )
            except ValidationError:
                skipped_requests += 1
        if not records:
            logger.warning("Visit %s (%s) has no usable requests; dropped", visit_id, domain)
            continue

        meta = metas.get(domain) or metas.get(domain.removeprefix("www.")) or SiteMeta()
        sites.append(
            SiteRecord(
                site_id=site_id,
                domain=domain,
                ranking=meta.ranking,
                country=meta.country,
                category=meta.category,
                script_call_count=int(script_calls.get(visit_id, 0)),
                requests=tuple(records),
            )
        )

    if skipped_requests:
        logger.warning("Skipped %d request(s) with unusable URL or method", skipped_requests)
    dump_crawl(sites, out_path)
    logger.info("Converted %d sites from %s into %s", len(sites), sqlite_path, out_path)
    return sites
