import ipaddress
import logging
from typing import Protocol

import dns.exception
import dns.resolver

from app.core.domains import normalize_fqdn
from app.core.errors import ConfigError, ResolveError
from app.schemas.dns import MAX_CHAIN_HOPS, CnameChain, FdnsIndex

logger = logging.getLogger(__name__)

DEFAULT_DNS_PORT = 53


class Resolver(Protocol):
    def resolve(self, name: str) -> CnameChain: ...


class OfflineResolver:
    """Answers CNAME lookups from a forward-DNS snapshot."""

    def __init__(self, index: FdnsIndex) -> None:
        self.index = index

    def resolve(self, name: str) -> CnameChain:
        return self.index.lookup(name)


class LiveResolver:
    """
    Follows CNAME records hop by hop through an upstream DNS server.

    NXDOMAIN and empty answers end the chain; timeouts and server failures
    raise ResolveError so they are never mistaken for "no CNAME".
    """

    def __init__(self, client: dns.resolver.Resolver) -> None:
        self.client = client

    def _next_hop(self, name: str) -> str | None:
        try:
            answer = self.client.resolve(name, "CNAME")
        except (dns.resolver.NXDOMAIN, dns.resolver.NoAnswer):
            return None
        except dns.exception.Timeout as exc:
            raise ResolveError(f"CNAME query for {name} timed out") from exc
        except dns.exception.DNSException as exc:
            raise ResolveError(f"CNAME query for {name} failed: {exc}") from exc

        for record in answer:
            target = normalize_fqdn(str(record.target))
            if target:
                return target
        return None

    def resolve(self, name: str) -> CnameChain:
        owner = normalize_fqdn(name)
        targets: list[str] = []
        current = owner
        while len(targets) < MAX_CHAIN_HOPS:
            target = self._next_hop(current)
            if target is None:
                break
            if target == owner or target in targets:
                logger.warning("CNAME loop at %s while following %s", target, owner)
                break
            targets.append(target)
            current = target
        return CnameChain(owner=owner, targets=tuple(targets))


def parse_upstream(upstream: str) -> tuple[str, int]:
    """Split "addr[:port]" (IPv6 as "[addr]:port") into address and port."""
    text = upstream.strip()
    host, port_text = text, ""
    if text.startswith("["):
        host, _, rest = text[1:].partition("]")
        port_text = rest.removeprefix(":")
    elif text.count(":") == 1:
        host, port_text = text.split(":")

    try:
        address = str(ipaddress.ip_address(host))
    except ValueError as exc:
        raise ConfigError(f"Upstream resolver must be an IP address: {upstream!r}") from exc

    if not port_text:
        return address, DEFAULT_DNS_PORT
    if not port_text.isdigit() or not 0 < int(port_text) < 65536:
        raise ConfigError(f"Invalid upstream port in {upstream!r}")
    return address, int(port_text)


def build_dns_resolver(*, upstream: str | None, timeout: float) -> dns.resolver.Resolver:
    resolver = dns.resolver.Resolver(configure=upstream is None)
    if upstream is not None:
        address, port = parse_upstream(upstream)
        # port first: dnspython binds it into each nameserver on assignment
        resolver.port = port
        resolver.nameservers = [address]
    resolver.timeout = timeout
    resolver.lifetime = timeout
    return resolver
