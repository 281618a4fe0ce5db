"""Minimal tiled GeoTIFF codec for 3-band 8-bit rasters.

Supported subset (little-endian classic TIFF, one IFD):

====== ======================= =====================================
tag    name                    value written
====== ======================= =====================================
256    ImageWidth              LONG
257    ImageLength             LONG
258    BitsPerSample           SHORT x3 = 8, 8, 8
259    Compression             50000 (ZSTD) or 8 (DEFLATE); 1 is read
262    PhotometricInterp.      2 (RGB)
277    SamplesPerPixel         3
284    PlanarConfiguration     1 (chunky)
317    Predictor               1 (none) or 2 (horizontal differencing)
322    TileWidth / 323 Length  256
324    TileOffsets             LONG per tile, 0 for empty tiles
325    TileByteCounts          LONG per tile, 0 for empty tiles
339    SampleFormat            SHORT x3 = 1 (unsigned)
33550  ModelPixelScaleTag      DOUBLE x3 = (res, res, 0)
33922  ModelTiepointTag        DOUBLE x6 = (0, 0, 0, x_min, y_max, 0)
34735  GeoKeyDirectoryTag      projected, PixelIsArea, user-defined CS, metre
42113  GDAL_NODATA             ASCII "0"
====== ======================= =====================================

Rasters are stored north-up: file row 0 is the northern edge.  Arrays handed
to and returned from this module use the same orientation; callers working
with south-up arrays flip them.
"""
from __future__ import annotations

import struct
import threading
import zlib
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

try:
    import zstandard
except ImportError:  # pragma: no cover - exercised only where zstandard is missing
    zstandard = None

COMPRESSION_NONE = 1
COMPRESSION_DEFLATE = 8
COMPRESSION_ZSTD = 50000
SUPPORTED_COMPRESSION = (COMPRESSION_NONE, COMPRESSION_DEFLATE, COMPRESSION_ZSTD)

TAG_WIDTH, TAG_LENGTH, TAG_BITS, TAG_COMPRESSION, TAG_PHOTOMETRIC = 256, 257, 258, 259, 262
TAG_SAMPLES, TAG_PLANAR, TAG_PREDICTOR = 277, 284, 317
TAG_TILE_WIDTH, TAG_TILE_LENGTH, TAG_TILE_OFFSETS, TAG_TILE_BYTES = 322, 323, 324, 325
TAG_SAMPLE_FORMAT = 339
TAG_PIXEL_SCALE, TAG_TIEPOINT, TAG_GEOKEYS, TAG_NODATA = 33550, 33922, 34735, 42113

# GeoKey directory: version 1.1.0, then (key, location, count, value) entries
GEOKEYS = (
    (1024, 0, 1, 1),      # GTModelTypeGeoKey: projected
    (1025, 0, 1, 1),      # GTRasterTypeGeoKey: PixelIsArea
    (3072, 0, 1, 32767),  # ProjectedCSTypeGeoKey: user-defined local frame
    (3076, 0, 1, 9001),   # ProjLinearUnitsGeoKey: metre
)

_TYPES = {1: ("B", 1), 2: ("s", 1), 3: ("H", 2), 4: ("I", 4), 12: ("d", 8)}


class TiffFormatError(ValueError):
    pass


class UnsupportedCompressionError(TiffFormatError):
    pass


class NotGeoreferencedError(TiffFormatError):
    pass


@dataclass(frozen=True)
class GeoReference:
    """``x_min``/``y_max`` is the world position of the outer corner of file pixel (0, 0)."""

    x_min: float
    y_max: float
    resolution: float


def default_compression() -> int:
    return COMPRESSION_ZSTD if zstandard is not None else COMPRESSION_DEFLATE


def _compress(data: bytes, code: int) -> bytes:
    if code == COMPRESSION_ZSTD:
        if zstandard is None:
            raise UnsupportedCompressionError("ZSTD requested but the zstandard package is missing")
        return zstandard.ZstdCompressor(level=9).compress(data)
    if code == COMPRESSION_DEFLATE:
        return zlib.compress(data, 6)
    if code == COMPRESSION_NONE:
        return data
    raise UnsupportedCompressionError(f"compression code {code} not supported")


def _decompress(data: bytes, code: int, expected: int) -> bytes:
    if code == COMPRESSION_ZSTD:
        if zstandard is None:
            raise UnsupportedCompressionError("file uses ZSTD but the zstandard package is missing")
        return zstandard.ZstdDecompressor().decompress(data, max_output_size=expected)
    if code == COMPRESSION_DEFLATE:
        return zlib.decompress(data)
    if code == COMPRESSION_NONE:
        return data
    raise UnsupportedCompressionError(f"compression code {code} not supported")


def _predict(tile: np.ndarray) -> np.ndarray:
    out = tile.copy()
    out[:, 1:] = tile[:, 1:] - tile[:, :-1]  # uint8 wraps modulo 256
    return out


def _unpredict(tile: np.ndarray) -> np.ndarray:
    return np.cumsum(tile, axis=1, dtype=np.uint8)


def _entry(tag: int, typ: int, values) -> tuple:
    if typ == 2:
        payload = values.encode("ascii") + b"\0"
        count = len(payload)
    else:
        values = list(values)
        fmt, _ = _TYPES[typ]
        payload = struct.pack("<%d%s" % (len(values), fmt), *values)
        count = len(values)
    return tag, typ, count, payload


def write_geotiff(path, raster: np.ndarray, geo: GeoReference, compression: int | None = None,
                  predictor: bool = True, tile_size: int = 256) -> None:
    """Write a north-up (H, W, 3) uint8 raster; all-zero tiles are left out of the file."""
    raster = np.asarray(raster)
    if raster.dtype != np.uint8 or raster.ndim != 3 or raster.shape[2] != 3:
        raise ValueError("raster must be (H, W, 3) uint8")
    code = default_compression() if compression is None else compression
    if code not in SUPPORTED_COMPRESSION:
        raise UnsupportedCompressionError(f"compression code {code} not supported")
    h, w, _ = raster.shape
    ts = tile_size
    n_down, n_across = -(-h // ts), -(-w // ts)
    padded = np.zeros((n_down * ts, n_across * ts, 3), np.uint8)
    padded[:h, :w] = raster

    blobs: list[bytes | None] = []
    for tr in range(n_down):
        for tc in range(n_across):
            tile = padded[tr * ts:(tr + 1) * ts, tc * ts:(tc + 1) * ts]
            if not tile.any():
                blobs.append(None)
                continue
            if predictor:
                tile = _predict(tile)
            blobs.append(_compress(np.ascontiguousarray(tile).tobytes(), code))

    geokeys = [1, 1, 0, len(GEOKEYS)] + [v for key in GEOKEYS for v in key]
    entries = [
        _entry(TAG_WIDTH, 4, [w]),
        _entry(TAG_LENGTH, 4, [h]),
        _entry(TAG_BITS, 3, [8, 8, 8]),
        _entry(TAG_COMPRESSION, 3, [code]),
        _entry(TAG_PHOTOMETRIC, 3, [2]),
        _entry(TAG_SAMPLES, 3, [3]),
        _entry(TAG_PLANAR, 3, [1]),
        _entry(TAG_PREDICTOR, 3, [2 if predictor else 1]),
        _entry(TAG_TILE_WIDTH, 3, [ts]),
        _entry(TAG_TILE_LENGTH, 3, [ts]),
        None,  # tile offsets, filled below
        _entry(TAG_TILE_BYTES, 4, [0 if b is None else len(b) for b in blobs]),
        _entry(TAG_SAMPLE_FORMAT, 3, [1, 1, 1]),
        _entry(TAG_PIXEL_SCALE, 12, [geo.resolution, geo.resolution, 0.0]),
        _entry(TAG_TIEPOINT, 12, [0.0, 0.0, 0.0, geo.x_min, geo.y_max, 0.0]),
        _entry(TAG_GEOKEYS, 3, geokeys),
        _entry(TAG_NODATA, 2, "0"),
    ]
    n_tiles = len(blobs)
    ifd_offset = 8
    ifd_size = 2 + 12 * len(entries) + 4
    # out-of-line tag payloads follow the IFD, then the tile data
    extra_start = ifd_offset + ifd_size
    sizes = [len(e[3]) if e is not None else 4 * n_tiles for e in entries]
    extra_len = sum(s + (s & 1) for s in sizes if s > 4)
    data_start = extra_start + extra_len
    offsets, pos = [], data_start
    for b in blobs:
        if b is None:
            offsets.append(0)
        else:
            offsets.append(pos)
            pos += len(b)
    entries[10] = _entry(TAG_TILE_OFFSETS, 4, offsets)

    head = bytearray(b"II" + struct.pack("<HI", 42, ifd_offset))
    ifd = bytearray(struct.pack("<H", len(entries)))
    extra = bytearray()
    for tag, typ, count, payload in entries:
        if len(payload) <= 4:
            ifd += struct.pack("<HHI", tag, typ, count) + payload.ljust(4, b"\0")
        else:
            ifd += struct.pack("<HHII", tag, typ, count, extra_start + len(extra))
            extra += payload
            if len(payload) & 1:
                extra += b"\0"
    ifd += struct.pack("<I", 0)
    assert len(head) + len(ifd) == extra_start and extra_start + len(extra) == data_start
    with open(path, "wb") as fh:
        fh.write(bytes(head + ifd + extra))
        for b in blobs:
            if b is not None:
                fh.write(b)


class GeoTiffReader:
    """Lazy tile access with a thread-safe LRU cache."""

    def __init__(self, path, cache_tiles: int = 64):
        self.path = Path(path)
        self.cache_tiles = cache_tiles
        self._cache: OrderedDict = OrderedDict()
        self._lock = threading.Lock()
        with open(self.path, "rb") as fh:
            self._parse(fh)

    def _parse(self, fh):
        head = fh.read(8)
        if len(head) < 8 or head[:2] != b"II":
            raise TiffFormatError(f"{self.path}: not a little-endian TIFF")
        magic, ifd = struct.unpack("<HI", head[2:])
        if magic != 42:
            raise TiffFormatError(f"{self.path}: unsupported TIFF variant {magic}")
        fh.seek(ifd)
        (n,) = struct.unpack("<H", fh.read(2))
        raw = fh.read(12 * n)
        tags = {}
        for k in range(n):
            tag, typ, count, value = struct.unpack("<HHI4s", raw[12 * k:12 * k + 12])
            if typ not in _TYPES:
                continue
            fmt, size = _TYPES[typ]
            nbytes = size * count
            if nbytes <= 4:
                payload = value[:nbytes]
            else:
                (off,) = struct.unpack("<I", value)
                fh.seek(off)
                payload = fh.read(nbytes)
            if typ == 2:
                tags[tag] = payload.rstrip(b"\0").decode("ascii", errors="replace")
            else:
                tags[tag] = struct.unpack("<%d%s" % (count, fmt), payload)
        self.tags = tags

        def need(tag):
            if tag not in tags:
                raise TiffFormatError(f"{self.path}: missing required tag {tag}")
            return tags[tag]

        self.compression = need(TAG_COMPRESSION)[0]
        if self.compression not in SUPPORTED_COMPRESSION:
            raise UnsupportedCompressionError(f"{self.path}: compression code {self.compression} not supported")
        if tuple(need(TAG_BITS)) != (8, 8, 8) or need(TAG_SAMPLES)[0] != 3:
            raise TiffFormatError(f"{self.path}: only 3 x 8-bit samples are supported")
        if tags.get(TAG_PLANAR, (1,))[0] != 1:
            raise TiffFormatError(f"{self.path}: only chunky pixel layout is supported")
        self.predictor = tags.get(TAG_PREDICTOR, (1,))[0]
        if self.predictor not in (1, 2):
            raise TiffFormatError(f"{self.path}: predictor {self.predictor} not supported")
        self.width = need(TAG_WIDTH)[0]
        self.height = need(TAG_LENGTH)[0]
        self.tile_width = need(TAG_TILE_WIDTH)[0]
        self.tile_length = need(TAG_TILE_LENGTH)[0]
        self.offsets = need(TAG_TILE_OFFSETS)
        self.bytecounts = need(TAG_TILE_BYTES)
        self.tiles_across = -(-self.width // self.tile_width)
        self.tiles_down = -(-self.height // self.tile_length)
        if len(self.offsets) != self.tiles_across * self.tiles_down or len(self.bytecounts) != len(self.offsets):
            raise TiffFormatError(f"{self.path}: tile table size mismatch")
        for tag in (TAG_PIXEL_SCALE, TAG_TIEPOINT, TAG_GEOKEYS):
            if tag not in tags:
                raise NotGeoreferencedError(f"{self.path}: missing geo tag {tag}")
        sx, sy, _ = tags[TAG_PIXEL_SCALE]
        if abs(sx - sy) > 1e-12 * max(sx, 1.0):
            raise TiffFormatError(f"{self.path}: non-square pixels ({sx}, {sy})")
        tp = tags[TAG_TIEPOINT]
        if tp[0] != 0 or tp[1] != 0:
            raise TiffFormatError(f"{self.path}: tie point must reference raster (0, 0)")
        self.geo = GeoReference(float(tp[3]), float(tp[4]), float(sx))

    def tile_present(self, tr: int, tc: int) -> bool:
        return self.bytecounts[tr * self.tiles_across + tc] > 0

    def read_tile(self, tr: int, tc: int) -> np.ndarray:
        """Decoded (tile_length, tile_width, 3) tile in file orientation; zeros if absent."""
        key = (tr, tc)
        with self._lock:
            if key in self._cache:
                self._cache.move_to_end(key)
                return self._cache[key]
        k = tr * self.tiles_across + tc
        shape = (self.tile_length, self.tile_width, 3)
        if self.bytecounts[k] == 0:
            tile = np.zeros(shape, np.uint8)
        else:
            with open(self.path, "rb") as fh:
                fh.seek(self.offsets[k])
                blob = fh.read(self.bytecounts[k])
            raw = _decompress(blob, self.compression, int(np.prod(shape)))
            if len(raw) != np.prod(shape):
                raise TiffFormatError(f"{self.path}: tile {key} decodes to {len(raw)} bytes")
            tile = np.frombuffer(raw, np.uint8).reshape(shape)
            if self.predictor == 2:
                tile = _unpredict(tile)
        tile.setflags(write=False)
        with self._lock:
            self._cache[key] = tile
            self._cache.move_to_end(key)
            while len(self._cache) > self.cache_tiles:
                self._cache.popitem(last=False)
        return tile

    def read_all(self) -> np.ndarray:
        out = np.zeros((self.tiles_down * self.tile_length, self.tiles_across * self.tile_width, 3), np.uint8)
        for tr in range(self.tiles_down):
            for tc in range(self.tiles_across):
                if self.tile_present(tr, tc):
                    out[tr * self.tile_length:(tr + 1) * self.tile_length,
                        tc * self.tile_width:(tc + 1) * self.tile_width] = self.read_tile(tr, tc)
        return out[:self.height, :self.width]


def read_geotiff(path) -> tuple[np.ndarray, GeoReference]:
    r = GeoTiffReader(path)
    return r.read_all(), r.geo
