"""Minimal, strict DICOM Part 10 encoder and verifying decoder.

Scope: a whole-slide-microscopy subset — one SOP instance per pyramid
level, tiles as native (uncompressed) multi-frame RGB8 pixel data,
Explicit VR Little Endian only. The decoder is deliberately strict so the
downstream store can reject anything the encoder would not have produced;
unknown tags are skipped via their declared lengths.
"""

from __future__ import annotations

import hashlib
import re
import struct
from dataclasses import dataclass, field

from .wsi import Level

WSI_SOP_CLASS_UID = "1.2.840.10008.5.1.4.1.1.77.1.6"
EXPLICIT_VR_LE = "1.2.840.10008.1.2.1"
IMPLEMENTATION_CLASS_UID = "1.3.6.1.4.1.61431.1.1"
DEFAULT_UID_ROOT = "1.3.6.1.4.1.61431"
MAX_UID_LEN = 64

_UID_RE = re.compile(r"^[0-9]+(\.[0-9]+)*$")
_LONG_VRS = frozenset({"OB", "OW", "OF", "SQ", "UT", "UN"})


class DicomError(Exception):
    """Base for encode/decode failures."""


class UidInvalid(DicomError):
    pass


class RootTooLong(DicomError):
    pass


class FrameSizeMismatch(DicomError):
    pass


class MissingPreamble(DicomError):
    pass


class BadTransferSyntax(DicomError):
    pass


class RequiredTagMissing(DicomError):
    def __init__(self, tag_name: str):
        self.tag_name = tag_name
        super().__init__(tag_name)


class LengthOverrun(DicomError):
    pass


def validate_uid(uid: str, what: str = "uid") -> str:
    if not uid or len(uid) > MAX_UID_LEN or not _UID_RE.match(uid):
        raise UidInvalid(f"{what} {uid!r} is not a valid UID")
    for comp in uid.split("."):
        if len(comp) > 1 and comp[0] == "0":
            raise UidInvalid(f"{what} {uid!r} has a leading zero component")
    return uid


@dataclass(frozen=True)
class UidTriple:
    study: str
    series: str
    sop: str


def make_uids(slide_id: str, level_index: int, root: str = DEFAULT_UID_ROOT) -> UidTriple:
    """Derive (study, series, sop) UIDs deterministically from identity.

    Same slide always maps to the same study/series; same (slide, level)
    to the same SOP instance UID, which is what makes re-conversion after
    redelivery a no-op at the store.
    """
    validate_uid(root, "root")

    def fold(tag: str) -> str:
        digest = hashlib.sha256(tag.encode("utf-8")).digest()
        return str(int.from_bytes(digest[:8], "big"))

    triple = UidTriple(
        study=f"{root}.1.{fold('study:' + slide_id)}",
        series=f"{root}.2.{fold('series:' + slide_id)}",
        sop=f"{root}.3.{fold(f'sop:{slide_id}:{level_index}')}",
    )
    for uid in (triple.study, triple.series, triple.sop):
        if len(uid) > MAX_UID_LEN:
            raise RootTooLong(f"root {root!r} leaves no room: {uid!r} exceeds {MAX_UID_LEN} chars")
    return triple


@dataclass
class DicomInstance:
    """One decoded (or to-be-encoded) multi-frame instance."""

    sop_instance_uid: str
    series_instance_uid: str
    study_instance_uid: str
    level_index: int
    total_pixel_matrix: tuple[int, int]  # (columns, rows) of the level
    rows: int
    columns: int
    number_of_frames: int
    frames: list[bytes]
    tags: dict[str, object] = field(default_factory=dict, compare=False, repr=False)


# -- encoding ----------------------------------------------------------------


def _even(value: bytes, pad: bytes) -> bytes:
    return value + pad if len(value) % 2 else value


def _element(group: int, elem: int, vr: str, value: bytes) -> bytes:
    value = _even(value, b"\x00" if vr in ("UI", "OB") else b" ")
    if vr in _LONG_VRS:
        return struct.pack("<HH", group, elem) + vr.encode() + b"\x00\x00" + struct.pack("<I", len(value)) + value
    return struct.pack("<HH", group, elem) + vr.encode() + struct.pack("<H", len(value)) + value


def _ui(s: str) -> bytes:
    return s.encode("ascii")


def _str(s: str) -> bytes:
    return s.encode("ascii")


def _us(n: int) -> bytes:
    return struct.pack("<H", n)


def _ul(n: int) -> bytes:
    return struct.pack("<I", n)


def encode_instance(level: Level, uids: UidTriple, level_index: int, tile_size: int) -> bytes:
    """Encode one pyramid level as a Part 10 stream, tiles as frames."""
    frames = level.tiles(tile_size)
    instance = DicomInstance(
        sop_instance_uid=uids.sop,
        series_instance_uid=uids.series,
        study_instance_uid=uids.study,
        level_index=level_index,
        total_pixel_matrix=(level.width, level.height),
        rows=tile_size,
        columns=tile_size,
        number_of_frames=len(frames),
        frames=frames,
    )
    return encode_dicom(instance)


def encode_dicom(instance: DicomInstance) -> bytes:
    for name, uid in (
        ("sop_instance_uid", instance.sop_instance_uid),
        ("series_instance_uid", instance.series_instance_uid),
        ("study_instance_uid", instance.study_instance_uid),
    ):
        validate_uid(uid, name)
    frame_size = instance.rows * instance.columns * 3
    if len(instance.frames) != instance.number_of_frames:
        raise FrameSizeMismatch(
            f"number_of_frames={instance.number_of_frames} but {len(instance.frames)} frames given"
        )
    for i, f in enumerate(instance.frames):
        if len(f) != frame_size:
            raise FrameSizeMismatch(f"frame {i}: {len(f)} bytes, expected {frame_size}")

    image_type = (
        "ORIGINAL\\PRIMARY\\VOLUME\\NONE"
        if instance.level_index == 0
        else "DERIVED\\PRIMARY\\VOLUME\\RESAMPLED"
    )
    pixel_data = b"".join(instance.frames)

    meta_body = b"".join(
        (
            _element(0x0002, 0x0001, "OB", b"\x00\x01"),
            _element(0x0002, 0x0002, "UI", _ui(WSI_SOP_CLASS_UID)),
            _element(0x0002, 0x0003, "UI", _ui(instance.sop_instance_uid)),
            _element(0x0002, 0x0010, "UI", _ui(EXPLICIT_VR_LE)),
            _element(0x0002, 0x0012, "UI", _ui(IMPLEMENTATION_CLASS_UID)),
        )
    )
    meta = _element(0x0002, 0x0000, "UL", _ul(len(meta_body))) + meta_body

    dataset = b"".join(
        (
            _element(0x0008, 0x0008, "CS", _str(image_type)),
            _element(0x0008, 0x0016, "UI", _ui(WSI_SOP_CLASS_UID)),
            _element(0x0008, 0x0018, "UI", _ui(instance.sop_instance_uid)),
            _element(0x0008, 0x0060, "CS", _str("SM")),
            _element(0x0020, 0x000D, "UI", _ui(instance.study_instance_uid)),
            _element(0x0020, 0x000E, "UI", _ui(instance.series_instance_uid)),
            _element(0x0020, 0x0013, "IS", _str(str(instance.level_index + 1))),
            _element(0x0028, 0x0002, "US", _us(3)),
            _element(0x0028, 0x0004, "CS", _str("RGB")),
            _element(0x0028, 0x0006, "US", _us(0)),
            _element(0x0028, 0x0008, "IS", _str(str(instance.number_of_frames))),
            _element(0x0028, 0x0010, "US", _us(instance.rows)),
            _element(0x0028, 0x0011, "US", _us(instance.columns)),
            _element(0x0028, 0x0100, "US", _us(8)),
            _element(0x0028, 0x0101, "US", _us(8)),
            _element(0x0028, 0x0102, "US", _us(7)),
            _element(0x0028, 0x0103, "US", _us(0)),
            _element(0x0048, 0x0006, "UL", _ul(instance.total_pixel_matrix[0])),
            _element(0x0048, 0x0007, "UL", _ul(instance.total_pixel_matrix[1])),
            _element(0x7FE0, 0x0010, "OB", pixel_data),
        )
    )
    return b"\x00" * 128 + b"DICM" + meta + dataset


# -- decoding ----------------------------------------------------------------

_REQUIRED_TAGS = {
    (0x0008, 0x0016): "SOPClassUID",
    (0x0008, 0x0018): "SOPInstanceUID",
    (0x0008, 0x0060): "Modality",
    (0x0020, 0x000D): "StudyInstanceUID",
    (0x0020, 0x000E): "SeriesInstanceUID",
    (0x0020, 0x0013): "InstanceNumber",
    (0x0028, 0x0002): "SamplesPerPixel",
    (0x0028, 0x0004): "PhotometricInterpretation",
    (0x0028, 0x0008): "NumberOfFrames",
    (0x0028, 0x0010): "Rows",
    (0x0028, 0x0011): "Columns",
    (0x0028, 0x0100): "BitsAllocated",
    (0x0048, 0x0006): "TotalPixelMatrixColumns",
    (0x0048, 0x0007): "TotalPixelMatrixRows",
    (0x7FE0, 0x0010): "PixelData",
}

_NAMED_TAGS = dict(_REQUIRED_TAGS)
_NAMED_TAGS.update(
    {
        (0x0008, 0x0008): "ImageType",
        (0x0028, 0x0006): "PlanarConfiguration",
        (0x0028, 0x0101): "BitsStored",
        (0x0028, 0x0102): "HighBit",
        (0x0028, 0x0103): "PixelRepresentation",
    }
)


def _read_element(data: bytes, pos: int) -> tuple[int, int, str, bytes, int]:
    """Parse one Explicit VR LE element; returns (group, elem, vr, value, next_pos)."""
    if pos + 8 > len(data):
        raise LengthOverrun(f"element header truncated at offset {pos}")
    group, elem = struct.unpack_from("<HH", data, pos)
    vr = data[pos + 4 : pos + 6].decode("ascii", errors="replace")
    if not vr.isalpha() or not vr.isupper():
        raise LengthOverrun(f"invalid VR {vr!r} at offset {pos}; not Explicit VR Little Endian?")
    if vr in _LONG_VRS:
        if pos + 12 > len(data):
            raise LengthOverrun(f"long element header truncated at offset {pos}")
        (length,) = struct.unpack_from("<I", data, pos + 8)
        if length == 0xFFFFFFFF:
            raise LengthOverrun(f"undefined length at offset {pos} is outside the subset")
        start = pos + 12
    else:
        (length,) = struct.unpack_from("<H", data, pos + 6)
        start = pos + 8
    end = start + length
    if end > len(data):
        raise LengthOverrun(
            f"tag ({group:04X},{elem:04X}) declares {length} bytes, only {len(data) - start} remain"
        )
    return group, elem, vr, data[start:end], end


def _decode_value(vr: str, raw: bytes) -> object:
    if vr == "US":
        return struct.unpack("<H", raw)[0]
    if vr == "UL":
        return struct.unpack("<I", raw)[0]
    if vr in ("UI",):
        return raw.rstrip(b"\x00").decode("ascii")
    if vr in ("CS", "IS", "SH", "LO", "DA", "TM"):
        return raw.rstrip(b" ").decode("ascii")
    return raw


def decode_instance(data: bytes) -> DicomInstance:
    """Strictly parse a Part 10 stream of the encoder's subset."""
    if len(data) < 132 or data[128:132] != b"DICM":
        raise MissingPreamble("no DICM marker at offset 128")

    pos = 132
    group, elem, vr, raw, pos = _read_element(data, pos)
    if (group, elem, vr) != (0x0002, 0x0000, "UL"):
        raise LengthOverrun("file meta must begin with the (0002,0000) group length element")
    meta_len = struct.unpack("<I", raw)[0]
    meta_end = pos + meta_len
    if meta_end > len(data):
        raise LengthOverrun(f"meta group length {meta_len} runs past end of stream")

    meta: dict[tuple[int, int], object] = {}
    while pos < meta_end:
        group, elem, vr, raw, pos = _read_element(data, pos)
        if group != 0x0002:
            raise LengthOverrun("meta group length spans a non-0002 element")
        meta[(group, elem)] = _decode_value(vr, raw)
    if pos != meta_end:
        raise LengthOverrun("meta group length does not land on an element boundary")

    transfer = meta.get((0x0002, 0x0010))
    if transfer != EXPLICIT_VR_LE:
        raise BadTransferSyntax(f"only Explicit VR Little Endian accepted, got {transfer!r}")

    values: dict[tuple[int, int], object] = {}
    while pos < len(data):
        group, elem, vr, raw, pos = _read_element(data, pos)
        values[(group, elem)] = _decode_value(vr, raw)

    for tag, name in _REQUIRED_TAGS.items():
        if tag not in values:
            raise RequiredTagMissing(name)

    rows = int(values[(0x0028, 0x0010)])
    cols = int(values[(0x0028, 0x0011)])
    n_frames = int(values[(0x0028, 0x0008)])
    pixel = values[(0x7FE0, 0x0010)]
    frame_size = rows * cols * 3
    if frame_size <= 0 or n_frames <= 0:
        raise LengthOverrun(f"degenerate geometry: {n_frames} frames of {rows}x{cols}")
    if len(pixel) != n_frames * frame_size:
        raise LengthOverrun(
            f"PixelData holds {len(pixel)} bytes, expected {n_frames} frames x {frame_size}"
        )

    tags = {_NAMED_TAGS.get(tag, f"({tag[0]:04X},{tag[1]:04X})"): v for tag, v in values.items() if tag != (0x7FE0, 0x0010)}
    return DicomInstance(
        sop_instance_uid=str(values[(0x0008, 0x0018)]),
        series_instance_uid=str(values[(0x0020, 0x000E)]),
        study_instance_uid=str(values[(0x0020, 0x000D)]),
        level_index=int(values[(0x0020, 0x0013)]) - 1,
        total_pixel_matrix=(int(values[(0x0048, 0x0006)]), int(values[(0x0048, 0x0007)])),
        rows=rows,
        columns=cols,
        number_of_frames=n_frames,
        frames=[pixel[i * frame_size : (i + 1) * frame_size] for i in range(n_frames)],
        tags=tags,
    )
