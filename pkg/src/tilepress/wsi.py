"""Synthetic pyramidal slide format (SPYR): generator, reader, writer,
and box-filter pyramid construction.

SPYR layout, all integers little-endian u32:

    "SPYR" | version=1 | width | height | tile_size | level_count | channels=3
    then per level: width | height | row-major raw RGB8 tiles

Edge tiles are zero-padded to ``tile_size``; every tile is exactly
``tile_size * tile_size * 3`` bytes. No compression: conversion cost stays
dominated by tiling and DICOM encoding, and byte-level oracles stay simple.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"SPYR"
SPYR_VERSION = 1
CHANNELS = 3
GENERATOR_TILE_SIZES = (256, 512)

_HEADER = struct.Struct("<6I")
_LEVEL_HEADER = struct.Struct("<2I")


class SpyrError(Exception):
    """Base for SPYR parsing and generation failures."""


class InvalidDimensions(SpyrError):
    pass


class BadMagic(SpyrError):
    pass


class TruncatedPayload(SpyrError):
    pass


class HeaderInconsistent(SpyrError):
    """Header fields disagree with each other or the payload; names the field."""

    def __init__(self, fieldname: str, detail: str = ""):
        self.fieldname = fieldname
        super().__init__(f"{fieldname}: {detail}" if detail else fieldname)


def grid_shape(width: int, height: int, tile_size: int) -> tuple[int, int]:
    """Tile grid (columns, rows) covering a level, by ceiling division."""
    return (-(-width // tile_size), -(-height // tile_size))


def level_dims(width: int, height: int, tile_size: int) -> list[tuple[int, int]]:
    """Dimension chain from base down to the first level that fits one tile."""
    dims = [(width, height)]
    w, h = width, height
    while max(w, h) > tile_size:
        w = -(-w // 2)
        h = -(-h // 2)
        dims.append((w, h))
    return dims


@dataclass
class Level:
    """One pyramid level: an RGB8 raster of shape (height, width, 3)."""

    pixels: np.ndarray

    def __post_init__(self):
        p = self.pixels
        if p.ndim != 3 or p.shape[2] != CHANNELS or p.dtype != np.uint8:
            raise InvalidDimensions(f"level pixels must be uint8 (h, w, 3), got {p.shape} {p.dtype}")
        if p.shape[0] < 1 or p.shape[1] < 1:
            raise InvalidDimensions("level dimensions must be >= 1")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def tiles(self, tile_size: int) -> list[bytes]:
        """Row-major tiles, edge tiles zero-padded to tile_size square."""
        return [t.tobytes() for t in self._tile_array(tile_size)]

    def _tile_array(self, tile_size: int) -> np.ndarray:
        gw, gh = grid_shape(self.width, self.height, tile_size)
        padded = np.zeros((gh * tile_size, gw * tile_size, CHANNELS), dtype=np.uint8)
        padded[: self.height, : self.width] = self.pixels
        tiled = padded.reshape(gh, tile_size, gw, tile_size, CHANNELS)
        return tiled.transpose(0, 2, 1, 3, 4).reshape(gh * gw, tile_size, tile_size, CHANNELS)

    @classmethod
    def from_tiles(cls, width: int, height: int, tile_size: int, data: bytes) -> "Level":
        gw, gh = grid_shape(width, height, tile_size)
        arr = np.frombuffer(data, dtype=np.uint8)
        arr = arr.reshape(gh, gw, tile_size, tile_size, CHANNELS)
        full = arr.transpose(0, 2, 1, 3, 4).reshape(gh * tile_size, gw * tile_size, CHANNELS)
        return cls(full[:height, :width].copy())

    def __eq__(self, other) -> bool:
        return isinstance(other, Level) and np.array_equal(self.pixels, other.pixels)


@dataclass
class WsiPyramid:
    """Multi-level tiled RGB image; level 0 is the full-resolution base."""

    slide_id: str
    tile_size: int
    levels: list[Level] = field(default_factory=list)

    @property
    def width(self) -> int:
        return self.levels[0].width

    @property
    def height(self) -> int:
        return self.levels[0].height

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, WsiPyramid)
            and self.slide_id == other.slide_id
            and self.tile_size == other.tile_size
            and self.levels == other.levels
        )


def downsample_level(src: Level) -> Level:
    """Halve a level with a 2x2 box filter.

    Output dims are ceil(src/2) per axis. Each output pixel is the
    per-channel mean of its 2x2 source block, rounded half-up; odd edges
    replicate the last row/column so padding never skews the average.
    """
    a = src.pixels.astype(np.uint16)
    if a.shape[0] % 2:
        a = np.concatenate([a, a[-1:, :, :]], axis=0)
    if a.shape[1] % 2:
        a = np.concatenate([a, a[:, -1:, :]], axis=1)
    total = a[0::2, 0::2] + a[1::2, 0::2] + a[0::2, 1::2] + a[1::2, 1::2]
    return Level(((total + 2) // 4).astype(np.uint8))


def build_pyramid(base: Level, tile_size: int, slide_id: str = "") -> WsiPyramid:
    """Downsample until the coarsest level fits inside a single tile."""
    if tile_size < 1:
        raise InvalidDimensions("tile_size must be >= 1")
    levels = [base]
    while max(levels[-1].width, levels[-1].height) > tile_size:
        levels.append(downsample_level(levels[-1]))
    return WsiPyramid(slide_id=slide_id, tile_size=tile_size, levels=levels)


def generate_base(slide_id: str, width: int, height: int, seed: int) -> Level:
    """Deterministic seeded texture: per-pixel noise over smooth gradients."""
    mix = (seed ^ zlib.crc32(slide_id.encode("utf-8"))) & 0xFFFFFFFFFFFFFFFF
    rng = np.random.Generator(np.random.PCG64(mix))
    noise = rng.integers(0, 256, size=(height, width, CHANNELS), dtype=np.uint8)
    xs = (np.arange(width, dtype=np.uint32) * 255) // max(width - 1, 1)
    ys = (np.arange(height, dtype=np.uint32) * 255) // max(height - 1, 1)
    grad = np.empty((height, width, CHANNELS), dtype=np.uint8)
    grad[:, :, 0] = xs[np.newaxis, :]
    grad[:, :, 1] = ys[:, np.newaxis]
    grad[:, :, 2] = ((xs[np.newaxis, :] + ys[:, np.newaxis]) // 2).astype(np.uint8)
    return Level((noise // 2 + grad // 2).astype(np.uint8))


def generate_slide(slide_id: str, width: int, height: int, tile_size: int, seed: int) -> bytes:
    """Produce a complete SPYR slide (full pyramid) as bytes."""
    if width < 1 or height < 1:
        raise InvalidDimensions(f"width/height must be >= 1, got {width}x{height}")
    if tile_size not in GENERATOR_TILE_SIZES:
        raise InvalidDimensions(f"tile_size must be one of {GENERATOR_TILE_SIZES}, got {tile_size}")
    base = generate_base(slide_id, width, height, seed)
    return write_spyr(build_pyramid(base, tile_size, slide_id=slide_id))


def write_spyr(pyramid: WsiPyramid) -> bytes:
    base = pyramid.levels[0]
    parts = [
        MAGIC,
        _HEADER.pack(
            SPYR_VERSION,
            base.width,
            base.height,
            pyramid.tile_size,
            len(pyramid.levels),
            CHANNELS,
        ),
    ]
    for level in pyramid.levels:
        parts.append(_LEVEL_HEADER.pack(level.width, level.height))
        parts.append(level._tile_array(pyramid.tile_size).tobytes())
    return b"".join(parts)


def read_spyr(data: bytes, slide_id: str = "") -> WsiPyramid:
    """Parse and fully validate a SPYR byte stream.

    A single-level file with any base size is accepted (base-only input);
    multi-level files must carry the exact ceiling-halving chain.
    """
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagic(f"expected {MAGIC!r} at offset 0")
    if len(data) < 4 + _HEADER.size:
        raise TruncatedPayload("header cut short")
    version, width, height, tile_size, level_count, channels = _HEADER.unpack_from(data, 4)
    if version != SPYR_VERSION:
        raise HeaderInconsistent("version", f"expected {SPYR_VERSION}, got {version}")
    if channels != CHANNELS:
        raise HeaderInconsistent("channels", f"expected {CHANNELS}, got {channels}")
    if width < 1 or height < 1:
        raise HeaderInconsistent("dimensions", f"{width}x{height}")
    if tile_size < 1:
        raise HeaderInconsistent("tile_size", str(tile_size))
    if level_count < 1:
        raise HeaderInconsistent("level_count", str(level_count))
    if level_count > 1:
        expected = level_dims(width, height, tile_size)
        if level_count != len(expected):
            raise HeaderInconsistent(
                "level_count", f"expected {len(expected)} for {width}x{height}, got {level_count}"
            )
    else:
        expected = [(width, height)]

    offset = 4 + _HEADER.size
    levels = []
    for idx in range(level_count):
        if offset + _LEVEL_HEADER.size > len(data):
            raise TruncatedPayload(f"level {idx} header missing")
        lw, lh = _LEVEL_HEADER.unpack_from(data, offset)
        offset += _LEVEL_HEADER.size
        if (lw, lh) != expected[idx]:
            raise HeaderInconsistent(
                "level_dims", f"level {idx}: expected {expected[idx]}, got {(lw, lh)}"
            )
        gw, gh = grid_shape(lw, lh, tile_size)
        nbytes = gw * gh * tile_size * tile_size * CHANNELS
        if offset + nbytes > len(data):
            raise TruncatedPayload(
                f"level {idx}: need {nbytes} tile bytes, have {len(data) - offset}"
            )
        levels.append(Level.from_tiles(lw, lh, tile_size, data[offset : offset + nbytes]))
        offset += nbytes
    if offset != len(data):
        raise HeaderInconsistent("payload_length", f"{len(data) - offset} trailing bytes")
    return WsiPyramid(slide_id=slide_id, tile_size=tile_size, levels=levels)
