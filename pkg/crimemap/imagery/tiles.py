"""Image tiles and the provider protocol."""

import io
from dataclasses import dataclass
from enum import Enum
from typing import Protocol, Tuple

import numpy as np
from PIL import Image

from ..errors import ProviderMismatchError, ShapeError
from ..geo import TileGeometry


class TileSource(str, Enum):
    """Where a tile came from."""

    REMOTE = "remote"
    CACHE = "cache"
    SYNTHETIC = "synthetic"


@dataclass(frozen=True)
class ImageTile:
    """
    Square RGB raster.

    Attributes:
        pixels: uint8 array of shape (size_px, size_px, 3), row-major
        geometry: Center, zoom, and size the tile was requested with
        source: Origin of the pixels
    """

    pixels: np.ndarray
    geometry: TileGeometry
    source: TileSource

    def __post_init__(self) -> None:
        size = self.geometry.size_px
        if self.pixels.dtype != np.uint8:
            raise ShapeError(f"Tile pixels must be uint8, got {self.pixels.dtype}")
        if self.pixels.shape != (size, size, 3):
            raise ShapeError(
                f"Tile pixels have shape {self.pixels.shape}, "
                f"expected {(size, size, 3)}"
            )

    def to_png_bytes(self) -> bytes:
        buffer = io.BytesIO()
        Image.fromarray(self.pixels, mode="RGB").save(buffer, format="PNG")
        return buffer.getvalue()

    @classmethod
    def from_image_bytes(
        cls, data: bytes, geometry: TileGeometry, source: TileSource
    ) -> "ImageTile":
        """
        Decode PNG/JPEG bytes into a tile.

        Raises:
            ProviderMismatchError: If the bytes are not an image of the
                requested size
        """
        try:
            with Image.open(io.BytesIO(data)) as image:
                rgb = image.convert("RGB")
        except (OSError, ValueError) as e:
            raise ProviderMismatchError(
                f"Provider returned undecodable image: {e}"
            ) from e
        expected = (geometry.size_px, geometry.size_px)
        if rgb.size != expected:
            raise ProviderMismatchError(
                f"Provider returned {rgb.size[0]}x{rgb.size[1]} for a "
                f"{expected[0]}x{expected[1]} request"
            )
        return cls(np.asarray(rgb, dtype=np.uint8).copy(), geometry, source)


def to_model_input(pixels: np.ndarray, shape: Tuple[int, int, int]) -> np.ndarray:
    """
    Bilinearly resize an RGB raster to a network input, scaled to [0, 1].

    Returns:
        float32 array of ``shape`` (height, width, channels)
    """
    height, width, channels = shape
    if channels != 3:
        raise ShapeError(f"Network input must have 3 channels, got {channels}")
    if pixels.shape[:2] != (height, width):
        image = Image.fromarray(pixels, mode="RGB").resize(
            (width, height), Image.Resampling.BILINEAR
        )
        pixels = np.asarray(image)
    return pixels.astype(np.float32) / np.float32(255.0)


class TileProvider(Protocol):
    """Anything that can turn a tile geometry into a tile."""

    def fetch(self, geom: TileGeometry) -> ImageTile:
        ...
