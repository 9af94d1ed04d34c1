import asyncio
import logging
from collections.abc import Sequence

from app.core.dns import Resolver
from app.core.errors import ResolveError
from app.schemas.dns import CnameChain

logger = logging.getLogger(__name__)


def resolve_one(resolver: Resolver, name: str) -> CnameChain | ResolveError:
    """Resolve a single name, returning the failure instead of raising it."""
    try:
        return resolver.resolve(name)
    except ResolveError as exc:
        logger.debug("Resolve failed for %s: %s", name, exc.detail)
        return exc


async def resolve_all(
    names: Sequence[str], resolver: Resolver, *, concurrency: int
) -> list[CnameChain | ResolveError]:
    semaphore = asyncio.Semaphore(max(1, concurrency))

    async def _bounded(name: str) -> CnameChain | ResolveError:
        async with semaphore:
            return await asyncio.to_thread(resolve_one, resolver, name)

    results = await asyncio.gather(*(_bounded(name) for name in names))
    failed = sum(1 for result in results if isinstance(result, ResolveError))
    if failed:
        logger.warning("%d of %d names failed to resolve", failed, len(names))
    return list(results)


def resolve_names(
    names: Sequence[str], resolver: Resolver, *, concurrency: int = 1
) -> dict[str, CnameChain | ResolveError]:
    if concurrency <= 1:
        results = [resolve_one(resolver, name) for name in names]
    else:
        results = asyncio.run(resolve_all(names, resolver, concurrency=concurrency))
    return dict(zip(names, results, strict=True))
