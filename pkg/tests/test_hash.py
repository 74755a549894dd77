"""Hash helpers behind transcripts and directory snapshots."""

from ibcr.hash import payload_hash
from ibcr.hash import snapshot_hash
from ibcr.hash import transcript_digest


def test_payload_hash_consistent():
    assert payload_hash(b"abc") == payload_hash(b"abc")
    assert len(payload_hash(b"abc")) == 32


def test_payload_hash_detects_one_flipped_byte():
    assert payload_hash(b"\x00" * 64) != payload_hash(b"\x00" * 63 + b"\x01")


def test_transcript_digest_depends_on_order():
    a = (0, 1, 0, 4, payload_hash(b"a"))
    b = (1, 2, 0, 4, payload_hash(b"b"))
    assert transcript_digest([a, b]) == transcript_digest([a, b])
    assert transcript_digest([a, b]) != transcript_digest([b, a])


def test_transcript_digest_of_nothing_is_stable():
    assert transcript_digest([]) == transcript_digest(iter(()))


def test_snapshot_hash_ignores_insertion_order():
    assert snapshot_hash({b"k1": b"v1", b"k2": b"v2"}) == snapshot_hash({b"k2": b"v2", b"k1": b"v1"})
    assert snapshot_hash({b"k1": b"v1"}) != snapshot_hash({b"k1": b"v2"})
