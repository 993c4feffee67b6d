"""Wire codec for the DTN protocol data unit.

Header layout (8 octets, big-endian, MSB first):

    octets 0-2   TTL, remaining lifetime in whole seconds (24-bit unsigned)
    octet  3     bit 7: TBC flag (more fragments follow), bits 6-0: protocol
    octet  4     payload ID (random per-message tag for duplicate detection)
    octets 5-7   start pointer, octet offset of this fragment (24-bit unsigned)
    octets 8..   fragment data

The duplicate-detection fingerprint deliberately ignores the TTL octets so
that retransmissions of the same message with a decayed TTL still collide.
"""

from __future__ import annotations

from dataclasses import dataclass, field

HEADER_LEN = 8

_MAX_24BIT = (1 << 24) - 1
_MAX_8BIT = 0xFF
_MAX_7BIT = 0x7F

_FNV64_OFFSET = 0xCBF29CE484222325
_FNV64_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


class PduError(Exception):
    """Base class for codec failures."""


class FieldOutOfRange(PduError):
    """A header field does not fit in its bit width."""


class TruncatedPdu(PduError):
    """Buffer is shorter than the fixed header."""


@dataclass(frozen=True)
class DtnPdu:
    """One protocol data unit: fixed header plus fragment bytes."""

    ttl_s: int
    tbc: bool
    protocol: int
    payload_id: int
    start_ptr: int
    data: bytes = field(default=b"")

    def validate(self) -> None:
        if not 0 <= self.ttl_s <= _MAX_24BIT:
            raise FieldOutOfRange(f"ttl_s {self.ttl_s} outside [0, 2^24-1]")
        if not 0 <= self.protocol <= _MAX_7BIT:
            raise FieldOutOfRange(f"protocol {self.protocol} outside [0, 127]")
        if not 0 <= self.payload_id <= _MAX_8BIT:
            raise FieldOutOfRange(f"payload_id {self.payload_id} outside [0, 255]")
        if not 0 <= self.start_ptr <= _MAX_24BIT:
            raise FieldOutOfRange(f"start_ptr {self.start_ptr} outside [0, 2^24-1]")


def encode(pdu: DtnPdu) -> bytes:
    """Serialize a PDU; rejects out-of-range fields instead of masking them."""
    pdu.validate()
    buf = bytearray(HEADER_LEN)
    buf[0] = (pdu.ttl_s >> 16) & 0xFF
    buf[1] = (pdu.ttl_s >> 8) & 0xFF
    buf[2] = pdu.ttl_s & 0xFF
    buf[3] = (0x80 if pdu.tbc else 0x00) | pdu.protocol
    buf[4] = pdu.payload_id
    buf[5] = (pdu.start_ptr >> 16) & 0xFF
    buf[6] = (pdu.start_ptr >> 8) & 0xFF
    buf[7] = pdu.start_ptr & 0xFF
    return bytes(buf) + bytes(pdu.data)


def decode(buf: bytes, src: int = 0) -> DtnPdu:
    """Parse header + data from ``buf``. ``src`` is only used for error context."""
    if len(buf) < HEADER_LEN:
        raise TruncatedPdu(f"{len(buf)}-octet frame from node {src} is below the {HEADER_LEN}-octet header")
    return DtnPdu(
        ttl_s=(buf[0] << 16) | (buf[1] << 8) | buf[2],
        tbc=bool(buf[3] & 0x80),
        protocol=buf[3] & 0x7F,
        payload_id=buf[4],
        start_ptr=(buf[5] << 16) | (buf[6] << 8) | buf[7],
        data=bytes(buf[HEADER_LEN:]),
    )


def fingerprint(pdu: DtnPdu, src: int) -> int:
    """TTL-blind 64-bit FNV-1a over the sender address and the PDU bytes.

    The canonical input is the 4-octet big-endian source address followed by
    the encoded PDU with its TTL octets forced to zero, so two copies of a
    message that differ only in remaining lifetime hash identically.
    """
    wire = bytearray(encode(pdu))
    wire[0] = wire[1] = wire[2] = 0
    h = _FNV64_OFFSET
    for b in src.to_bytes(4, "big") + bytes(wire):
        h ^= b
        h = (h * _FNV64_PRIME) & _MASK64
    return h
