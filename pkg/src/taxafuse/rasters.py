"""Single-file binary rasters and satellite patch extraction.

File layout (little-endian):
  uint32 width, uint32 height, float64[6] geotransform, uint32 band count,
  then band-major float32 pixels, each band row-major (height x width).

The geotransform follows the usual affine convention:
  lon = g0 + col * g1 + row * g2
  lat = g3 + col * g4 + row * g5
Only axis-aligned transforms (g2 == g4 == 0) are supported for lookups.

Patches are extracted centred on a query location, full windows only: a
location outside coverage, or one whose window would run off the raster
edge, is an error rather than padded with fabricated context.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

# extents mirror the satellite ablation grid; 10 m pixels make a 256 px
# patch cover about 2.56 km, i.e. ~1.3 km of context around the location
ALLOWED_EXTENTS = (128, 256, 512)
SENTINEL2_GSD_M = 10.0

_HEADER_FMT = "<II6dI"
_HEADER_SIZE = struct.calcsize(_HEADER_FMT)


class RasterError(ValueError):
    """Malformed raster file or invalid query."""


class CoverageError(RasterError):
    """Query location or window not fully inside the raster."""


@dataclass(frozen=True)
class GeoTransform:
    origin_lon: float
    lon_per_col: float
    row_shear: float
    origin_lat: float
    col_shear: float
    lat_per_row: float

    def __post_init__(self):
        if self.row_shear != 0.0 or self.col_shear != 0.0:
            raise RasterError("sheared geotransforms are not supported")
        if self.lon_per_col == 0.0 or self.lat_per_row == 0.0:
            raise RasterError("zero pixel size in geotransform")

    def to_pixel(self, lon: float, lat: float) -> tuple[float, float]:
        """Fractional (row, col) of a location."""
        col = (lon - self.origin_lon) / self.lon_per_col
        row = (lat - self.origin_lat) / self.lat_per_row
        return row, col

    def as_tuple(self) -> tuple[float, ...]:
        return (
            self.origin_lon,
            self.lon_per_col,
            self.row_shear,
            self.origin_lat,
            self.col_shear,
            self.lat_per_row,
        )


class ArrayRaster:
    """In-memory raster provider over a (bands, height, width) array."""

    def __init__(self, data: np.ndarray, transform: GeoTransform):
        data = np.asarray(data, dtype=np.float32)
        if data.ndim != 3:
            raise RasterError(f"raster data must be (bands, h, w), got shape {data.shape}")
        self.data = data
        self.transform = transform

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def contains(self, lon: float, lat: float) -> bool:
        row, col = self.transform.to_pixel(lon, lat)
        return 0 <= row < self.height and 0 <= col < self.width

    def query(self, lon: float, lat: float, extent_px: int) -> np.ndarray:
        """Full (bands, extent, extent) window centred on the location."""
        if not (math.isfinite(lon) and math.isfinite(lat)):
            raise RasterError(f"non-finite query location ({lon}, {lat})")
        row_f, col_f = self.transform.to_pixel(lon, lat)
        if not (0 <= row_f < self.height and 0 <= col_f < self.width):
            raise CoverageError(
                f"location ({lon}, {lat}) outside raster coverage "
                f"({self.height}x{self.width} px)"
            )
        row_c, col_c = int(math.floor(row_f)), int(math.floor(col_f))
        half = extent_px // 2
        r0, c0 = row_c - half, col_c - half
        r1, c1 = r0 + extent_px, c0 + extent_px
        if r0 < 0 or c0 < 0 or r1 > self.height or c1 > self.width:
            raise CoverageError(
                f"window {extent_px}px at ({lon}, {lat}) extends beyond the "
                f"raster edge; no padding is performed"
            )
        return np.array(self.data[:, r0:r1, c0:c1], dtype=np.float64)


def extract_patch(provider, lon: float, lat: float, extent_px: int) -> np.ndarray:
    """Extract a multi-band patch of an allowed extent centred on a location."""
    if extent_px not in ALLOWED_EXTENTS:
        raise RasterError(f"extent {extent_px} not in {ALLOWED_EXTENTS}")
    patch = provider.query(lon, lat, extent_px)
    patch = np.asarray(patch, dtype=np.float64)
    if patch.ndim != 3 or patch.shape[1:] != (extent_px, extent_px):
        raise RasterError(f"provider returned bad patch shape {patch.shape}")
    return patch


def write_raster(path, data: np.ndarray, transform: GeoTransform) -> None:
    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 3:
        raise RasterError(f"raster data must be (bands, h, w), got shape {data.shape}")
    bands, height, width = data.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(_HEADER_FMT, width, height, *transform.as_tuple(), bands))
        fh.write(np.ascontiguousarray(data).astype("<f4").tobytes())


def read_raster(path) -> ArrayRaster:
    with open(path, "rb") as fh:
        header = fh.read(_HEADER_SIZE)
        if len(header) != _HEADER_SIZE:
            raise RasterError(f"{path}: truncated raster header")
        width, height, *gt, bands = struct.unpack(_HEADER_FMT, header)
        body = fh.read()
    expected = bands * height * width * 4
    if len(body) != expected:
        raise RasterError(
            f"{path}: body holds {len(body)} bytes, expected {expected} "
            f"({bands}x{height}x{width} float32)"
        )
    data = np.frombuffer(body, dtype="<f4").reshape(bands, height, width)
    return ArrayRaster(data, GeoTransform(*gt))
