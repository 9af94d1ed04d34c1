import logging
import os
import tempfile
from pathlib import Path

import httpx

from app.core.errors import InputFileError

logger = logging.getLogger(__name__)

_CHUNK_SIZE = 1 << 16


def download(
    url: str,
    dest: Path,
    *,
    transport: httpx.BaseTransport | None = None,
    timeout: float = 60.0,
) -> Path:
    """Stream `url` into `dest`; a partial download never replaces an existing file."""
    dest.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=dest.parent, prefix=f".{dest.name}.", suffix=".part")
    tmp_path = Path(tmp_name)
    written = 0
    try:
        with (
            os.fdopen(fd, "wb") as handle,
            httpx.Client(transport=transport, timeout=timeout, follow_redirects=True) as client,
            client.stream("GET", url) as response,
        ):
            response.raise_for_status()
            for chunk in response.iter_bytes(_CHUNK_SIZE):
                handle.write(chunk)
                written += len(chunk)
        tmp_path.replace(dest)
    except httpx.HTTPError as exc:
        tmp_path.unlink(missing_ok=True)
        raise InputFileError(f"Download of {url} failed: {exc}") from exc
    except OSError as exc:
        tmp_path.unlink(missing_ok=True)
        raise InputFileError(f"Cannot write {dest}: {exc}") from exc

    logger.info("Downloaded %s (%d bytes) into %s", url, written, dest)
    return dest
