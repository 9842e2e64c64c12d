"""
Static-map HTTP client with an on-disk tile cache.

Tiles are cached as PNG under ``{cache_dir}/{zoom}/{lat}_{lon}_{size}.png``
with lat/lon at 7 decimals. All workers share one rate limiter; concurrent
requests for the same cache key collapse into a single download.
"""

import logging
import os
import string
import threading
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, Optional, Tuple

import requests

from ..errors import ConfigError, FetchError, ProviderMismatchError
from ..geo import TileGeometry
from .tiles import ImageTile, TileSource

logger = logging.getLogger(__name__)

DEFAULT_API_KEY_ENV = "CRIMEMAP_TILE_API_KEY"
REQUIRED_PLACEHOLDERS = frozenset({"lat", "lon", "zoom", "size"})
ALLOWED_PLACEHOLDERS = REQUIRED_PLACEHOLDERS | {"key"}
USER_AGENT = "crimemap/0.1 (+https://github.com/crimemap/crimemap)"


def default_cache_dir() -> Path:
    """
    Tile cache directory following the XDG Base Directory Specification.

    Returns:
        $XDG_CACHE_HOME/crimemap/tiles, or ~/.cache/crimemap/tiles
    """
    xdg_cache = os.getenv("XDG_CACHE_HOME")
    if xdg_cache:
        return Path(xdg_cache) / "crimemap" / "tiles"
    return Path.home() / ".cache" / "crimemap" / "tiles"


@dataclass(frozen=True)
class ProviderConfig:
    """
    Static-map endpoint settings.

    The API key itself is never stored here; only the name of the environment
    variable that holds it.

    Attributes:
        url_template: URL with {lat} {lon} {zoom} {size} and optionally {key}
        api_key_env: Environment variable holding the API key
        cache_dir: Tile cache root; the XDG cache directory when None
        rate_limit: Maximum requests per second across all workers
        retries: Extra attempts after the first failed request
        backoff_s: Delay before the first retry; doubles on each retry
        timeout_s: Per-request timeout
    """

    url_template: str
    api_key_env: str = DEFAULT_API_KEY_ENV
    cache_dir: Optional[str] = None
    rate_limit: float = 10.0
    retries: int = 3
    backoff_s: float = 0.5
    timeout_s: float = 30.0

    def __post_init__(self) -> None:
        try:
            names = {
                name
                for _, name, _, _ in string.Formatter().parse(self.url_template)
                if name is not None
            }
        except ValueError as e:
            raise ConfigError(f"Malformed url_template: {e}") from e
        missing = REQUIRED_PLACEHOLDERS - names
        if missing:
            raise ConfigError(
                f"url_template is missing placeholders: {', '.join(sorted(missing))}"
            )
        unknown = names - ALLOWED_PLACEHOLDERS
        if unknown:
            raise ConfigError(
                f"url_template has unknown placeholders: {', '.join(sorted(unknown))}"
            )
        if self.rate_limit <= 0:
            raise ConfigError("rate_limit must be positive")
        if self.retries < 0:
            raise ConfigError("retries must be non-negative")
        if self.backoff_s < 0 or self.timeout_s <= 0:
            raise ConfigError("backoff_s must be >= 0 and timeout_s > 0")

    @property
    def needs_key(self) -> bool:
        return "{key}" in self.url_template

    @property
    def api_key(self) -> Optional[str]:
        return os.environ.get(self.api_key_env) or None

    @property
    def cache_root(self) -> Path:
        return Path(self.cache_dir) if self.cache_dir else default_cache_dir()

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ProviderConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in data.items() if k in known})


def tile_request_url(geom: TileGeometry, cfg: ProviderConfig) -> str:
    """
    Substitute a tile geometry into the provider's URL template.

    Raises:
        ConfigError: If the template needs a key and the environment has none
    """
    key = cfg.api_key
    if cfg.needs_key and not key:
        raise ConfigError(
            f"url_template requires an API key; set the {cfg.api_key_env} "
            f"environment variable"
        )
    return cfg.url_template.format(
        lat=f"{geom.center_lat:.7f}",
        lon=f"{geom.center_lon:.7f}",
        zoom=geom.zoom,
        size=geom.size_px,
        key=key or "",
    )


def redact(url: str, cfg: ProviderConfig) -> str:
    """URL safe for logs and error messages."""
    key = cfg.api_key
    return url.replace(key, "***") if key else url


class RateLimiter:
    """
    Token bucket of capacity one: successive acquisitions are spaced at least
    ``1 / rate`` seconds apart, whichever thread makes them.
    """

    def __init__(
        self,
        rate: float,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self.interval = 1.0 / rate
        self._clock = clock
        self._sleep = sleep
        self._next = float("-inf")
        self._lock = threading.Lock()

    def acquire(self) -> None:
        with self._lock:
            now = self._clock()
            slot = max(now, self._next)
            self._next = slot + self.interval
        if slot > now:
            self._sleep(slot - now)


@dataclass
class _KeyLock:
    lock: threading.Lock = field(default_factory=threading.Lock)
    users: int = 0


class TileClient:
    """
    Cached, rate-limited tile fetcher.

    Safe to share between threads. Attributes:
        config: Provider settings
        session: requests session reused for all downloads
        requests_made: Number of HTTP requests issued (including retries)
    """

    def __init__(
        self,
        config: ProviderConfig,
        session: Optional[requests.Session] = None,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self.config = config
        self.session = session or requests.Session()
        self.session.headers.update({"User-Agent": USER_AGENT})
        self.limiter = RateLimiter(config.rate_limit, sleep=sleep)
        self.requests_made = 0
        self._sleep = sleep
        self._key_locks: Dict[Tuple[int, str, str, int], _KeyLock] = {}
        self._guard = threading.Lock()

    def cache_path(self, geom: TileGeometry) -> Path:
        zoom, lat, lon, size = geom.cache_key
        return self.config.cache_root / str(zoom) / f"{lat}_{lon}_{size}.png"

    def fetch(self, geom: TileGeometry) -> ImageTile:
        """
        Return the tile for ``geom``, from cache when present.

        Raises:
            FetchError: If every attempt failed
            ProviderMismatchError: If the provider's image has the wrong size
        """
        with self._single_flight(geom.cache_key):
            cached = self._read_cache(geom)
            if cached is not None:
                return cached
            data = self._download(geom)
            tile = ImageTile.from_image_bytes(data, geom, TileSource.REMOTE)
            self._write_cache(tile)
            return tile

    @contextmanager
    def _single_flight(self, key: Tuple[int, str, str, int]) -> Iterator[None]:
        """Hold the lock for ``key``; the entry is dropped once no fetch uses it."""
        with self._guard:
            entry = self._key_locks.setdefault(key, _KeyLock())
            entry.users += 1
        try:
            with entry.lock:
                yield
        finally:
            with self._guard:
                entry.users -= 1
                if entry.users == 0:
                    del self._key_locks[key]

    def _read_cache(self, geom: TileGeometry) -> Optional[ImageTile]:
        path = self.cache_path(geom)
        if not path.exists():
            return None
        try:
            return ImageTile.from_image_bytes(path.read_bytes(), geom, TileSource.CACHE)
        except (OSError, ProviderMismatchError) as e:
            logger.warning(f"Ignoring unusable cache entry {path}: {e}")
            return None

    def _write_cache(self, tile: ImageTile) -> None:
        path = self.cache_path(tile.geometry)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(f"{path.name}.{threading.get_ident()}.tmp")
        try:
            tmp.write_bytes(tile.to_png_bytes())
            os.replace(tmp, path)
        except OSError:
            tmp.unlink(missing_ok=True)
            raise

    def _download(self, geom: TileGeometry) -> bytes:
        url = tile_request_url(geom, self.config)
        safe_url = redact(url, self.config)
        status: Optional[int] = None
        attempts = self.config.retries + 1
        for attempt in range(attempts):
            self.limiter.acquire()
            with self._guard:
                self.requests_made += 1
            try:
                response = self.session.get(url, timeout=self.config.timeout_s)
            except requests.exceptions.RequestException as e:
                status = None
                logger.warning(
                    f"Tile request failed ({attempt + 1}/{attempts}) for {safe_url}: "
                    f"{type(e).__name__}"
                )
            else:
                status = response.status_code
                if status == 200:
                    logger.debug(f"Fetched {safe_url}")
                    return response.content
                logger.warning(
                    f"Tile request returned {status} ({attempt + 1}/{attempts}) "
                    f"for {safe_url}"
                )
                if 400 <= status < 500 and status != 429:
                    break
            if attempt + 1 < attempts:
                self._sleep(self.config.backoff_s * (2**attempt))
        raise FetchError(safe_url, status)


def fetch_tile(
    geom: TileGeometry,
    cfg: ProviderConfig,
    session: Optional[requests.Session] = None,
) -> ImageTile:
    """One-off fetch through a fresh :class:`TileClient`."""
    return TileClient(cfg, session=session).fetch(geom)
