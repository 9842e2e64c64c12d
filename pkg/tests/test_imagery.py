"""
Tests for tile fetching, caching, synthetic tiles, and datasets.
"""

import re
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
import requests
import responses
from werkzeug import Response

from crimemap.errors import (
    ConfigError,
    CrimeMapError,
    DatasetBuildError,
    DegenerateInputError,
    FetchError,
    ProviderMismatchError,
    ShapeError,
)
from crimemap.geo import CellId, TileGeometry, cell_center
from crimemap.imagery import (
    DatasetManifest,
    ImageTile,
    ProviderConfig,
    RateLimiter,
    SyntheticTileProvider,
    TileClient,
    TileSource,
    build_dataset,
    load_dataset,
    synth_tile,
    tile_request_url,
    to_model_input,
)
from crimemap.imagery import client as client_module
from crimemap.imagery.client import redact
from crimemap.labeling import CrimeLevel

TEMPLATE = "https://tiles.example/{zoom}/{lat}/{lon}/{size}.png"
TILE_URL = "https://tiles.example/17/41.8781000/-87.6298000/256.png"
GEOM = TileGeometry(41.8781, -87.6298, zoom=17)


def _png(size: int, color=(90, 120, 60)) -> bytes:
    pixels = np.zeros((size, size, 3), dtype=np.uint8)
    pixels[:] = color
    return ImageTile(pixels, TileGeometry(0.0, 0.0, 17, size), TileSource.SYNTHETIC).to_png_bytes()


def _build_3x3(make_labeled_grid, out_dir, labels=None, **kwargs):
    grid, cells = make_labeled_grid(3, 1)
    if labels is None:
        labels = {c.cell: c.level for c in cells}
    provider = SyntheticTileProvider(grid, labels, seed=0)
    manifest = build_dataset(cells, provider, grid, out_dir, size_px=64, workers=4, **kwargs)
    return manifest, cells


class FakeSleep:
    """Records requested delays instead of sleeping."""

    def __init__(self):
        self.calls = []

    def __call__(self, seconds):
        self.calls.append(seconds)

    @property
    def backoffs(self):
        return [s for s in self.calls if s >= 0.01]


class TestProviderConfig:
    """Test provider configuration validation."""

    def test_missing_placeholder(self):
        with pytest.raises(ConfigError, match="zoom"):
            ProviderConfig("https://tiles.example/{lat}/{lon}/{size}.png")

    def test_unknown_placeholder(self):
        with pytest.raises(ConfigError, match="style"):
            ProviderConfig(TEMPLATE + "?style={style}")

    def test_malformed_template(self):
        with pytest.raises(ConfigError):
            ProviderConfig("https://tiles.example/{zoom}/{lat}/{lon}/{size")

    @pytest.mark.parametrize(
        "kwargs", [{"rate_limit": 0}, {"retries": -1}, {"backoff_s": -1.0}, {"timeout_s": 0}]
    )
    def test_invalid_numbers(self, kwargs):
        with pytest.raises(ConfigError):
            ProviderConfig(TEMPLATE, **kwargs)

    def test_dict_round_trip_ignores_unknown_keys(self, tmp_path):
        cfg = ProviderConfig(TEMPLATE, cache_dir=str(tmp_path), retries=1)
        data = {**cfg.to_dict(), "provider": "remote"}
        assert ProviderConfig.from_dict(data) == cfg


class TestTileRequestUrl:
    """Test URL construction and key handling."""

    def test_seven_decimal_substitution(self):
        assert tile_request_url(GEOM, ProviderConfig(TEMPLATE)) == TILE_URL

    def test_rounding(self):
        geom = TileGeometry(41.87812345678, -87.6, zoom=18, size_px=128)
        url = tile_request_url(geom, ProviderConfig(TEMPLATE))
        assert url == "https://tiles.example/18/41.8781235/-87.6000000/128.png"

    def test_key_required_but_unset(self, monkeypatch):
        monkeypatch.delenv("CRIMEMAP_TILE_API_KEY", raising=False)
        with pytest.raises(ConfigError, match="CRIMEMAP_TILE_API_KEY"):
            tile_request_url(GEOM, ProviderConfig(TEMPLATE + "?key={key}"))

    def test_key_from_environment_is_redacted(self, monkeypatch):
        monkeypatch.setenv("TILE_KEY", "sekrit")
        cfg = ProviderConfig(TEMPLATE + "?key={key}", api_key_env="TILE_KEY")
        url = tile_request_url(GEOM, cfg)
        assert url.endswith("?key=sekrit")
        assert redact(url, cfg) == TILE_URL + "?key=***"


class TestRateLimiter:
    """Test request spacing with a fake clock."""

    def test_spacing(self):
        now = [0.0]
        sleeps = []

        def sleep(seconds):
            sleeps.append(seconds)
            now[0] += seconds

        limiter = RateLimiter(2.0, clock=lambda: now[0], sleep=sleep)
        for _ in range(3):
            limiter.acquire()
        assert sleeps == pytest.approx([0.5, 0.5])

        now[0] = 10.0
        limiter.acquire()
        assert len(sleeps) == 2


class TestTileClient:
    """Test downloads, retries, and the on-disk cache."""

    def _client(self, tmp_path, **kwargs):
        cfg = ProviderConfig(
            kwargs.pop("template", TEMPLATE),
            cache_dir=str(tmp_path / "cache"),
            rate_limit=1e6,
            backoff_s=0.5,
            **kwargs,
        )
        sleep = FakeSleep()
        return TileClient(cfg, sleep=sleep), sleep

    def test_cache_path_layout(self, tmp_path):
        client, _ = self._client(tmp_path)
        path = client.cache_path(GEOM)
        assert path == tmp_path / "cache" / "17" / "41.8781000_-87.6298000_256.png"

    def test_retries_with_exponential_backoff(self, tmp_path, mock_responses):
        mock_responses.add(responses.GET, TILE_URL, status=503)
        mock_responses.add(responses.GET, TILE_URL, status=429)
        mock_responses.add(responses.GET, TILE_URL, body=_png(256), status=200)
        client, sleep = self._client(tmp_path)

        tile = client.fetch(GEOM)

        assert tile.source == TileSource.REMOTE
        assert tile.pixels.shape == (256, 256, 3)
        assert len(mock_responses.calls) == 3
        assert client.requests_made == 3
        assert sleep.backoffs == [0.5, 1.0]

    def test_not_found_is_not_retried(self, tmp_path, mock_responses):
        mock_responses.add(responses.GET, TILE_URL, status=404)
        client, sleep = self._client(tmp_path)

        with pytest.raises(FetchError) as excinfo:
            client.fetch(GEOM)

        assert excinfo.value.status == 404
        assert len(mock_responses.calls) == 1
        assert sleep.backoffs == []

    def test_gives_up_after_retries(self, tmp_path, mock_responses):
        mock_responses.add(responses.GET, TILE_URL, status=500)
        client, sleep = self._client(tmp_path, retries=2)

        with pytest.raises(FetchError) as excinfo:
            client.fetch(GEOM)

        assert excinfo.value.status == 500
        assert client.requests_made == 3
        assert sleep.backoffs == [0.5, 1.0]

    def test_connection_error(self, tmp_path, mock_responses):
        mock_responses.add(
            responses.GET, TILE_URL, body=requests.exceptions.ConnectionError("refused")
        )
        client, _ = self._client(tmp_path, retries=0)

        with pytest.raises(FetchError) as excinfo:
            client.fetch(GEOM)

        assert excinfo.value.status is None

    def test_wrong_size_is_provider_mismatch(self, tmp_path, mock_responses):
        mock_responses.add(responses.GET, TILE_URL, body=_png(128), status=200)
        client, _ = self._client(tmp_path)

        with pytest.raises(ProviderMismatchError, match="128x128"):
            client.fetch(GEOM)
        assert not client.cache_path(GEOM).exists()

    def test_api_key_never_in_error(self, tmp_path, mock_responses, monkeypatch):
        monkeypatch.setenv("TILE_KEY", "sekrit")
        mock_responses.add(responses.GET, TILE_URL + "?key=sekrit", status=403)
        client, _ = self._client(tmp_path, template=TEMPLATE + "?key={key}", api_key_env="TILE_KEY")

        with pytest.raises(FetchError) as excinfo:
            client.fetch(GEOM)

        assert "sekrit" not in str(excinfo.value)
        assert "***" in excinfo.value.url

    @pytest.mark.integration
    def test_second_fetch_hits_cache(self, tmp_path, httpserver):
        httpserver.expect_request("/17/41.8781000/-87.6298000/256.png").respond_with_data(
            _png(256), content_type="image/png"
        )
        template = httpserver.url_for("/") + "{zoom}/{lat}/{lon}/{size}.png"
        client, _ = self._client(tmp_path, template=template)

        first = client.fetch(GEOM)
        second = client.fetch(GEOM)
        fresh, _ = self._client(tmp_path, template=template)
        third = fresh.fetch(GEOM)

        assert first.source == TileSource.REMOTE
        assert second.source == TileSource.CACHE
        assert third.source == TileSource.CACHE
        assert np.array_equal(first.pixels, third.pixels)
        assert client.requests_made == 1
        assert fresh.requests_made == 0
        assert len(httpserver.log) == 1
        assert client.cache_path(GEOM).exists()

    def test_failed_cache_write_leaves_no_temp_file(self, tmp_path, mock_responses, monkeypatch):
        mock_responses.add(responses.GET, TILE_URL, body=_png(256), status=200)
        client, _ = self._client(tmp_path)

        def refuse(src, dst):
            raise OSError("disk full")

        monkeypatch.setattr(client_module.os, "replace", refuse)
        with pytest.raises(OSError, match="disk full"):
            client.fetch(GEOM)
        assert list((tmp_path / "cache").rglob("*.tmp")) == []
        assert not client.cache_path(GEOM).exists()

    def test_key_locks_are_released(self, tmp_path, mock_responses):
        mock_responses.add(responses.GET, TILE_URL, body=_png(256), status=200)
        client, _ = self._client(tmp_path)
        client.fetch(GEOM)
        client.fetch(GEOM)
        assert client._key_locks == {}

    @pytest.mark.integration
    def test_cold_cache_issues_one_request_per_cell(self, tmp_path, httpserver):
        httpserver.expect_request(re.compile(r"^/17/.*\.png$")).respond_with_data(
            _png(256), content_type="image/png"
        )
        template = httpserver.url_for("/") + "{zoom}/{lat}/{lon}/{size}.png"
        client, _ = self._client(tmp_path, template=template)
        geoms = [TileGeometry(41.8781 + i * 1e-4, -87.6298, zoom=17) for i in range(6)]

        with ThreadPoolExecutor(max_workers=4) as pool:
            tiles = list(pool.map(client.fetch, geoms))
        assert [t.source for t in tiles] == [TileSource.REMOTE] * 6
        assert len(httpserver.log) == 6
        assert client.requests_made == 6

        with ThreadPoolExecutor(max_workers=4) as pool:
            again = list(pool.map(client.fetch, geoms))
        assert [t.source for t in again] == [TileSource.CACHE] * 6
        assert len(httpserver.log) == 6

    @pytest.mark.integration
    def test_concurrent_fetches_of_one_key_download_once(self, tmp_path, httpserver):
        def slow_tile(request):
            time.sleep(0.2)
            return Response(_png(256), content_type="image/png")

        httpserver.expect_request("/17/41.8781000/-87.6298000/256.png").respond_with_handler(
            slow_tile
        )
        template = httpserver.url_for("/") + "{zoom}/{lat}/{lon}/{size}.png"
        client, _ = self._client(tmp_path, template=template)

        with ThreadPoolExecutor(max_workers=8) as pool:
            tiles = list(pool.map(client.fetch, [GEOM] * 8))
        assert len(httpserver.log) == 1
        assert client.requests_made == 1
        assert sorted(t.source.value for t in tiles) == ["cache"] * 7 + ["remote"]
        assert all(np.array_equal(t.pixels, tiles[0].pixels) for t in tiles)
        assert client._key_locks == {}

    @pytest.mark.integration
    def test_observed_rate_stays_within_limit(self, tmp_path, httpserver):
        arrivals = []

        def record(request):
            arrivals.append(time.monotonic())
            return Response(_png(256), content_type="image/png")

        httpserver.expect_request(re.compile(r"^/17/.*\.png$")).respond_with_handler(record)
        cfg = ProviderConfig(
            httpserver.url_for("/") + "{zoom}/{lat}/{lon}/{size}.png",
            cache_dir=str(tmp_path / "cache"),
            rate_limit=20.0,
        )
        client = TileClient(cfg)
        geoms = [TileGeometry(41.8781 + i * 1e-4, -87.6298, zoom=17) for i in range(21)]

        with ThreadPoolExecutor(max_workers=4) as pool:
            list(pool.map(client.fetch, geoms))
        assert len(arrivals) == 21
        observed = (len(arrivals) - 1) / (max(arrivals) - min(arrivals))
        assert observed <= 20.0 * 1.1


class TestImageTile:
    """Test tile validation and conversion."""

    def test_rejects_wrong_shape(self):
        with pytest.raises(ShapeError):
            ImageTile(np.zeros((64, 64, 3), dtype=np.uint8), GEOM, TileSource.REMOTE)

    def test_rejects_wrong_dtype(self):
        with pytest.raises(ShapeError):
            ImageTile(np.zeros((256, 256, 3), dtype=np.float32), GEOM, TileSource.REMOTE)

    def test_undecodable_bytes(self):
        with pytest.raises(ProviderMismatchError):
            ImageTile.from_image_bytes(b"<html>quota exceeded</html>", GEOM, TileSource.REMOTE)

    def test_model_input_is_resized_and_scaled(self):
        pixels = np.full((64, 64, 3), 255, dtype=np.uint8)
        image = to_model_input(pixels, (16, 16, 3))
        assert image.shape == (16, 16, 3)
        assert image.dtype == np.float32
        assert np.allclose(image, 1.0)

    def test_model_input_needs_rgb(self):
        with pytest.raises(ShapeError):
            to_model_input(np.zeros((16, 16, 3), dtype=np.uint8), (16, 16, 4))


class TestSyntheticTiles:
    """Test synthetic tile rendering."""

    geom = TileGeometry(41.8781, -87.6298, zoom=17, size_px=64)

    def test_deterministic(self):
        a = synth_tile(CellId(2, 3), CrimeLevel.HIGH, 5, self.geom)
        b = synth_tile(CellId(2, 3), CrimeLevel.HIGH, 5, self.geom)
        assert np.array_equal(a.pixels, b.pixels)
        assert a.source == TileSource.SYNTHETIC

    def test_seed_and_cell_change_pixels(self):
        base = synth_tile(CellId(2, 3), CrimeLevel.LOW, 5, self.geom)
        assert not np.array_equal(base.pixels, synth_tile(CellId(2, 3), CrimeLevel.LOW, 6, self.geom).pixels)
        assert not np.array_equal(base.pixels, synth_tile(CellId(2, 4), CrimeLevel.LOW, 5, self.geom).pixels)

    def test_low_crime_is_greener_than_high(self):
        def greenness(level):
            pixels = synth_tile(CellId(0, 0), level, 0, self.geom).pixels.astype(float)
            return float((pixels[..., 1] - pixels[..., 0]).mean())

        assert greenness(CrimeLevel.LOW) > greenness(CrimeLevel.HIGH) + 20

    def test_provider_uses_cell_under_center(self, small_grid, synthetic_provider):
        cell = CellId(1, 1)
        geom = TileGeometry(*cell_center(cell, small_grid), zoom=17, size_px=64)
        tile = synthetic_provider.fetch(geom)
        expected = synth_tile(cell, CrimeLevel.NEUTRAL, 0, geom)
        assert np.array_equal(tile.pixels, expected.pixels)

    def test_provider_outside_grid(self, synthetic_provider):
        with pytest.raises(FetchError):
            synthetic_provider.fetch(TileGeometry(0.0, 0.0, zoom=17, size_px=64))


class TestBuildDataset:
    """Test dataset construction."""

    def test_nine_cells(self, tmp_path, make_labeled_grid):
        manifest, cells = _build_3x3(make_labeled_grid, tmp_path / "ds")

        assert len(manifest) == 9
        assert [e.cell for e in manifest.entries] == sorted(
            (c.cell for c in cells), key=lambda c: (c.row, c.col)
        )
        assert [e.level for e in manifest.entries] == [c.level for c in cells]
        assert len(list((tmp_path / "ds" / "tiles").glob("*.png"))) == 9
        assert len((tmp_path / "ds" / "manifest.tsv").read_text().splitlines()) == 9
        log = (tmp_path / "ds" / "fetch_log.tsv").read_text().splitlines()
        assert len(log) == 9
        assert all(line.split("\t")[1] == "synthetic" for line in log)

    def test_rebuild_is_byte_identical(self, tmp_path, make_labeled_grid):
        _build_3x3(make_labeled_grid, tmp_path / "a")
        _build_3x3(make_labeled_grid, tmp_path / "b")
        for name in ["manifest.tsv", "tiles/r1c1.png"]:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_failure_threshold(self, tmp_path, make_labeled_grid):
        _, cells = make_labeled_grid(3, 1)
        labels = {c.cell: c.level for c in cells if c.cell != CellId(1, 1)}

        with pytest.raises(DatasetBuildError, match="r1c1"):
            _build_3x3(make_labeled_grid, tmp_path / "strict", labels=labels)
        assert not (tmp_path / "strict" / "manifest.tsv").exists()

        manifest, _ = _build_3x3(
            make_labeled_grid, tmp_path / "lenient", labels=labels, max_failure_fraction=0.2
        )
        assert len(manifest) == 8
        assert [cell for cell, _ in manifest.failures] == [CellId(1, 1)]
        assert "r1c1\tfailed" in (tmp_path / "lenient" / "fetch_log.tsv").read_text()

    def test_no_cells(self, tmp_path, small_grid, synthetic_provider):
        with pytest.raises(DegenerateInputError):
            build_dataset([], synthetic_provider, small_grid, tmp_path)


class TestLoadDataset:
    """Test reading datasets back as network inputs."""

    def test_shapes(self, tiny_dataset):
        assert tiny_dataset.images.shape == (100, 16, 16, 3)
        assert tiny_dataset.images.dtype == np.float32
        assert tiny_dataset.labels.dtype == np.int64
        assert tiny_dataset.labels.tolist() == [int(e.level) for e in tiny_dataset.entries]
        assert 0.0 <= tiny_dataset.images.min() <= tiny_dataset.images.max() <= 1.0

    def test_subset(self, tiny_dataset):
        part = tiny_dataset.subset([3, 1])
        assert len(part) == 2
        assert part.entries == [tiny_dataset.entries[3], tiny_dataset.entries[1]]

    def test_manifest_read_from_directory(self, tmp_path, make_labeled_grid):
        manifest, _ = _build_3x3(make_labeled_grid, tmp_path / "ds")
        assert DatasetManifest.read(tmp_path / "ds").entries == manifest.entries

    def test_malformed_manifest(self, tmp_path):
        (tmp_path / "manifest.tsv").write_text("r0c0\t41.0\n")
        with pytest.raises(CrimeMapError, match="manifest.tsv:1"):
            DatasetManifest.read(tmp_path)

    def test_missing_tile(self, tmp_path, make_labeled_grid):
        manifest, _ = _build_3x3(make_labeled_grid, tmp_path / "ds")
        (tmp_path / "ds" / "tiles" / "r0c0.png").unlink()
        with pytest.raises(CrimeMapError, match="r0c0"):
            load_dataset(manifest, (16, 16, 3))

    def test_empty_manifest(self, tmp_path):
        (tmp_path / "manifest.tsv").write_text("")
        with pytest.raises(DegenerateInputError):
            load_dataset(tmp_path, (16, 16, 3))
