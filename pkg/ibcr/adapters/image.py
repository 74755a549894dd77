"""Checkpoint image codec.

Layout (little-endian), documented in docs/image-format.md:

    header   magic "IBCR", version u16, flags u16, rank u32, node_id u32,
             port_index u16, section_count u16, epoch u32
    table    section_count x (kind u16, deflated u16, offset u64,
             stored_len u64, raw_len u64, crc32 u32)
    crc32    u32 over header + table
    data     sections at their offsets

The memory section is binary; every other section is the JSON form of its
state model.
"""

import contextlib
import logging
import os
import struct
import zlib
from enum import IntEnum
from pathlib import Path

from pydantic import ValidationError

from ibcr.domain.errors import CorruptImage
from ibcr.domain.errors import ImageMissing
from ibcr.domain.errors import UnsupportedImage
from ibcr.domain.errors import WriteFailed
from ibcr.domain.models import ImageStats
from ibcr.domain.models import NodeAddr
from ibcr.domain.state import DrainedCqState
from ibcr.domain.state import MemoryRegionState
from ibcr.domain.state import NodeImage
from ibcr.domain.state import PluginState
from ibcr.domain.state import ResourceLogState
from ibcr.domain.state import WorkloadStateImage
from ibcr.domain.state import WqeLogState


logger = logging.getLogger(__name__)

MAGIC = b"IBCR"
VERSION = 1
FLAG_COMPRESSED = 0x1

HEADER = struct.Struct("<4sHHIIHHI")
ENTRY = struct.Struct("<HHQQQI")
CRC = struct.Struct("<I")
REGION = struct.Struct("<QQ")
COUNT = struct.Struct("<I")


class SectionKind(IntEnum):
    MEMORY = 1
    RESOURCE_LOG = 2
    WQE_LOG = 3
    DRAINED_CQ = 4
    TRANSLATION = 5
    WORKLOAD_STATE = 6


_MODELS = {
    SectionKind.RESOURCE_LOG: ("resource_log", ResourceLogState),
    SectionKind.WQE_LOG: ("wqe_log", WqeLogState),
    SectionKind.DRAINED_CQ: ("drained", DrainedCqState),
    SectionKind.TRANSLATION: ("plugin", PluginState),
    SectionKind.WORKLOAD_STATE: ("workload", WorkloadStateImage),
}


def _encode_memory(regions: list[MemoryRegionState]) -> bytes:
    parts = [COUNT.pack(len(regions))]
    for region in regions:
        parts.append(REGION.pack(region.base_addr, len(region.data)))
        parts.append(region.data)
    return b"".join(parts)


def _decode_memory(raw: bytes) -> list[MemoryRegionState]:
    try:
        (count,) = COUNT.unpack_from(raw)
        pos = COUNT.size
        regions = []
        for _ in range(count):
            base, length = REGION.unpack_from(raw, pos)
            pos += REGION.size
            if pos + length > len(raw):
                raise CorruptImage("memory region runs past its section")
            regions.append(MemoryRegionState(base_addr=base, data=raw[pos : pos + length]))
            pos += length
    except struct.error as err:
        raise CorruptImage(f"memory section: {err}") from None
    if pos != len(raw):
        raise CorruptImage("trailing bytes in memory section")
    return regions


def _sections(image: NodeImage) -> dict[SectionKind, bytes]:
    out = {SectionKind.MEMORY: _encode_memory(image.memory)}
    for kind, (attr, _) in _MODELS.items():
        out[kind] = getattr(image, attr).to_json()
    return out


def encode_image(image: NodeImage, compress: bool = True) -> tuple[bytes, ImageStats]:
    sections = _sections(image)
    table_size = HEADER.size + ENTRY.size * len(sections) + CRC.size
    entries, blobs = [], []
    offset = table_size
    for kind, raw in sections.items():
        stored, deflated = raw, 0
        if compress:
            packed = zlib.compress(raw)
            # incompressible payloads are kept as they are
            if len(packed) < len(raw):
                stored, deflated = packed, 1
        entries.append(ENTRY.pack(kind, deflated, offset, len(stored), len(raw), zlib.crc32(stored)))
        blobs.append(stored)
        offset += len(stored)
    flags = FLAG_COMPRESSED if compress else 0
    header = HEADER.pack(
        MAGIC, VERSION, flags, image.rank, image.node_id, image.port_index, len(sections), image.epoch
    ) + b"".join(entries)
    data = header + CRC.pack(zlib.crc32(header)) + b"".join(blobs)
    stats = ImageStats(
        bytes_written=len(data),
        sections={kind.name: len(blob) for kind, blob in zip(sections, blobs, strict=True)},
    )
    return data, stats


def decode_image(data: bytes) -> NodeImage:
    if len(data) < HEADER.size:
        raise CorruptImage(f"image truncated to {len(data)} bytes")
    magic, version, _, rank, node_id, port_index, count, epoch = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise UnsupportedImage(f"bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedImage(f"image version {version}, this build reads {VERSION}")
    table_end = HEADER.size + ENTRY.size * count
    if len(data) < table_end + CRC.size:
        raise CorruptImage("section table truncated")
    (header_crc,) = CRC.unpack_from(data, table_end)
    if zlib.crc32(data[:table_end]) != header_crc:
        raise CorruptImage("header checksum mismatch")
    raw_sections: dict[SectionKind, bytes] = {}
    for i in range(count):
        kind, deflated, offset, stored_len, raw_len, crc = ENTRY.unpack_from(data, HEADER.size + i * ENTRY.size)
        stored = data[offset : offset + stored_len]
        if len(stored) != stored_len:
            raise CorruptImage(f"section {kind} truncated")
        if zlib.crc32(stored) != crc:
            raise CorruptImage(f"section {kind} checksum mismatch")
        try:
            raw = zlib.decompress(stored) if deflated else stored
        except zlib.error as err:
            raise CorruptImage(f"section {kind}: {err}") from None
        if len(raw) != raw_len:
            raise CorruptImage(f"section {kind} inflated to {len(raw)}, expected {raw_len}")
        try:
            raw_sections[SectionKind(kind)] = raw
        except ValueError:
            raise CorruptImage(f"unknown section kind {kind}") from None
    missing = set(SectionKind) - set(raw_sections)
    if missing:
        raise CorruptImage(f"missing sections {sorted(k.name for k in missing)}")
    fields = {"memory": _decode_memory(raw_sections[SectionKind.MEMORY])}
    try:
        for kind, (attr, model) in _MODELS.items():
            fields[attr] = model.model_validate_json(raw_sections[kind])
    except ValidationError as err:
        raise CorruptImage(f"section {kind.name} does not validate: {err}") from None
    return NodeImage(rank=rank, node_id=node_id, port_index=port_index, epoch=epoch, **fields)


def write_image(image: NodeImage, path: str | Path, compress: bool = True) -> ImageStats:
    """Write ``image`` atomically: temp file, fsync, rename."""
    path = Path(path)
    data, stats = encode_image(image, compress)
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with tmp.open("wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except OSError as err:
        with contextlib.suppress(OSError):
            tmp.unlink()
        raise WriteFailed(f"writing {path}: {err}") from err
    logger.info("wrote image %s (%d bytes, rank %d)", path, stats.bytes_written, image.rank)
    return stats


def read_image(path: str | Path, rebind_to: NodeAddr | None = None) -> NodeImage:
    """Load an image; ``rebind_to`` moves it to another endpoint."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise ImageMissing(f"no image at {path}") from None
    image = decode_image(data)
    if rebind_to is not None:
        image = image.model_copy(update={"node_id": rebind_to.node_id, "port_index": rebind_to.port_index})
    return image
