import hashlib
import struct
from collections.abc import Iterable
from collections.abc import Mapping


def payload_hash(payload: bytes) -> str:
    return hashlib.blake2b(payload, digest_size=16).hexdigest()


def transcript_digest(entries: Iterable[tuple[int, int, int, int, str]]) -> str:
    """SHA-256 over (event_index, wr_id, opcode, byte_len, payload_hash) rows."""
    h = hashlib.sha256()
    for index, wr_id, opcode, byte_len, digest in entries:
        h.update(struct.pack("<QQBI", index, wr_id, opcode, byte_len))
        h.update(bytes.fromhex(digest))
    return h.hexdigest()


def snapshot_hash(snapshot: Mapping[bytes, bytes]) -> str:
    h = hashlib.sha256()
    for key in sorted(snapshot):
        value = snapshot[key]
        h.update(struct.pack("<I", len(key)) + key)
        h.update(struct.pack("<I", len(value)) + value)
    return h.hexdigest()
