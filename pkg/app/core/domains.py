import ipaddress
import logging
from pathlib import Path
from urllib.parse import urlsplit

import tldextract

from app.core.errors import UrlError

logger = logging.getLogger(__name__)


def normalize_fqdn(name: str) -> str:
    return name.strip().lower().rstrip(".")


def host_of_url(url: str) -> str:
    try:
        parts = urlsplit(url.strip())
        host = parts.hostname
    except ValueError as exc:
        raise UrlError(f"Unparseable URL: {url!r}") from exc
    if not parts.scheme or not host:
        raise UrlError(f"URL has no scheme or host: {url!r}")
    return normalize_fqdn(host)


def is_ip_address(host: str) -> bool:
    try:
        ipaddress.ip_address(host.strip("[]"))
    except ValueError:
        return False
    return True


class DomainParser:
    """
    Registrable-domain (eTLD+1) lookups against a pinned public suffix list.

    Without `psl_path` the snapshot bundled with the installed tldextract
    release is used, so results only change when that pin changes.
    """

    def __init__(self, psl_path: Path | None = None) -> None:
        if psl_path is None:
            self._extract = tldextract.TLDExtract(suffix_list_urls=())
        else:
            if not psl_path.is_file():
                raise UrlError(f"Public suffix list not found: {psl_path}")
            self._extract = tldextract.TLDExtract(
                suffix_list_urls=(psl_path.resolve().as_uri(),),
                fallback_to_snapshot=False,
            )
        self._cache: dict[str, tuple[str, tuple[str, ...]]] = {}

    def _split(self, host: str) -> tuple[str, tuple[str, ...]]:
        cached = self._cache.get(host)
        if cached is not None:
            return cached

        if not host:
            raise UrlError("Empty host")
        if is_ip_address(host):
            result: tuple[str, tuple[str, ...]] = (host, ())
        else:
            ext = self._extract(host)
            if ext.domain and ext.suffix:
                registrable = f"{ext.domain}.{ext.suffix}"
                labels = tuple(ext.subdomain.split(".")) if ext.subdomain else ()
            else:
                registrable, labels = host, ()
            result = (registrable, labels)

        self._cache[host] = result
        return result

    def registrable(self, host: str) -> str:
        return self._split(normalize_fqdn(host))[0]

    def prefix_labels(self, host: str) -> tuple[str, ...]:
        return self._split(normalize_fqdn(host))[1]
