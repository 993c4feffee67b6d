"""Non-volatile spool for pending messages, plus fragment reassembly.

Every accepted message lives in exactly one file under the store directory
until it is delivered or its lifetime runs out.  The file carries enough
metadata to survive a power failure:

    octets 0-3   next hop address (32-bit unsigned, big-endian)
    octets 4-11  absolute expiry instant, milliseconds (64-bit unsigned, BE)
    octet  12    protocol number of the original request
    octets 13..  application payload

The filename doubles as the message id: a zero-padded decimal counter with
the message's 8-bit wire payload id appended as a hex suffix, e.g.
``00000042-a7``.  Recovery can therefore restore the payload id along with
the message, keeping duplicate detection stable across a reboot.
"""

from __future__ import annotations

import logging
import os
import random
import re
from dataclasses import dataclass
from enum import Enum
from typing import Optional

log = logging.getLogger(__name__)

_PREAMBLE_LEN = 13
_ID_RE = re.compile(r"^(\d{8})-([0-9a-f]{2})$")

DEFAULT_BYTE_BUDGET = 16 * 1024 * 1024


class StorageError(Exception):
    pass


class StorageFull(StorageError):
    """Accepting the message would exceed the configured byte budget."""


class UnknownId(StorageError):
    pass


class CorruptFile(StorageError):
    """A spool file cannot be parsed; recovery skips it."""


class OverlapMismatch(StorageError):
    """Two fragments disagree about the bytes of an overlapping span."""


class MessageState(Enum):
    PENDING = "pending"
    DELIVERED = "delivered"
    EXPIRED = "expired"


class Priority(Enum):
    ARRIVAL = "arrival"
    EXPIRY = "expiry"
    RANDOM = "random"


@dataclass
class DtnPduMetadata:
    """Bookkeeping for one stored message."""

    message_id: str
    next_hop: int
    expiry_at: int  # ms
    bytes_sent: int
    arrival_at: int  # ms
    state: MessageState
    protocol: int
    size: int


class ReassemblyBuffer:
    """Sparse accumulation of fragments for one (sender, payload id) key."""

    def __init__(self):
        self.final_length: Optional[int] = None
        self._data = bytearray()
        self._covered: list[tuple[int, int]] = []

    def insert(self, start: int, frag: bytes, tbc: bool) -> None:
        end = start + len(frag)
        if self.final_length is not None and end > self.final_length:
            raise OverlapMismatch(f"fragment [{start},{end}) extends past final length {self.final_length}")
        if not tbc:
            if self.final_length is not None and self.final_length != end:
                raise OverlapMismatch(f"conflicting final lengths {self.final_length} vs {end}")
            if any(e > end for _, e in self._covered):
                raise OverlapMismatch(f"existing span extends past final length {end}")
        for s, e in self._covered:
            lo, hi = max(s, start), min(e, end)
            if lo < hi and self._data[lo:hi] != frag[lo - start : hi - start]:
                raise OverlapMismatch(f"bytes differ on overlap [{lo},{hi})")
        if end > len(self._data):
            self._data.extend(bytes(end - len(self._data)))
        self._data[start:end] = frag
        if not tbc:
            self.final_length = end
        self._merge(start, end)

    def _merge(self, start: int, end: int) -> None:
        merged = []
        for s, e in self._covered:
            if e < start or s > end:
                merged.append((s, e))
            else:
                start, end = min(s, start), max(e, end)
        merged.append((start, end))
        merged.sort()
        self._covered = merged

    @property
    def complete(self) -> bool:
        if self.final_length is None:
            return False
        if self.final_length == 0:
            return True
        return self._covered == [(0, self.final_length)]

    def body(self) -> bytes:
        return bytes(self._data[: self.final_length])


class MessageStore:
    """File-backed message spool with in-memory metadata tracking.

    All operations are invoked from a single logical executor; there is no
    internal locking.  Construction never touches existing files: call
    :meth:`recover` to rebuild state from a directory that survived a crash.
    """

    def __init__(self, directory: str, rng: Optional[random.Random] = None, byte_budget: int = DEFAULT_BYTE_BUDGET):
        self.directory = directory
        self.rng = rng if rng is not None else random.Random()
        self.byte_budget = byte_budget
        self._meta: dict[str, DtnPduMetadata] = {}
        self._bodies: dict[str, bytes] = {}
        self._payload_ids: dict[str, int] = {}
        self._counter = 0
        self._used_bytes = 0
        self._buffers: dict[tuple[int, int], ReassemblyBuffer] = {}
        os.makedirs(directory, exist_ok=True)

    # -- spool -------------------------------------------------------------

    def put(self, body: bytes, next_hop: int, ttl_s: int, protocol: int, now: int) -> str:
        if ttl_s <= 0:
            raise ValueError("ttl_s must be positive")
        file_size = _PREAMBLE_LEN + len(body)
        if self._used_bytes + file_size > self.byte_budget:
            raise StorageFull(f"budget {self.byte_budget} exceeded by {file_size}-octet message")
        self._counter += 1
        payload_id = self.rng.randrange(256)
        message_id = f"{self._counter:08d}-{payload_id:02x}"
        expiry_at = now + ttl_s * 1000
        path = os.path.join(self.directory, message_id)
        with open(path, "wb") as fh:
            fh.write(next_hop.to_bytes(4, "big"))
            fh.write(expiry_at.to_bytes(8, "big"))
            fh.write(bytes([protocol]))
            fh.write(body)
        self._meta[message_id] = DtnPduMetadata(
            message_id=message_id,
            next_hop=next_hop,
            expiry_at=expiry_at,
            bytes_sent=0,
            arrival_at=now,
            state=MessageState.PENDING,
            protocol=protocol,
            size=len(body),
        )
        self._bodies[message_id] = bytes(body)
        self._payload_ids[message_id] = payload_id
        self._used_bytes += file_size
        return message_id

    def metadata(self, message_id: str) -> DtnPduMetadata:
        try:
            return self._meta[message_id]
        except KeyError:
            raise UnknownId(message_id) from None

    def body(self, message_id: str) -> bytes:
        self.metadata(message_id)
        return self._bodies[message_id]

    def payload_id(self, message_id: str) -> int:
        self.metadata(message_id)
        return self._payload_ids[message_id]

    def pending_for(self, next_hop: int, now: int, priority: Priority = Priority.ARRIVAL,
                    rng: Optional[random.Random] = None) -> list[str]:
        """Ids of live messages bound for ``next_hop``, in sending order."""
        live = [
            m for m in self._meta.values()
            if m.state is MessageState.PENDING and m.next_hop == next_hop and m.expiry_at > now
        ]
        if priority is Priority.ARRIVAL:
            live.sort(key=lambda m: m.arrival_at)
        elif priority is Priority.EXPIRY:
            live.sort(key=lambda m: m.expiry_at)
        else:
            ids = [m.message_id for m in live]
            (rng if rng is not None else self.rng).shuffle(ids)
            return ids
        return [m.message_id for m in live]

    def has_pending_for(self, next_hop: int, now: int) -> bool:
        return any(
            m.state is MessageState.PENDING and m.next_hop == next_hop and m.expiry_at > now
            for m in self._meta.values()
        )

    def pending_ids(self) -> list[str]:
        return [m.message_id for m in self._meta.values() if m.state is MessageState.PENDING]

    def advance_bytes(self, message_id: str, n: int) -> None:
        md = self.metadata(message_id)
        md.bytes_sent = min(md.bytes_sent + n, md.size)

    def mark_delivered(self, message_id: str) -> None:
        self._mark(message_id, MessageState.DELIVERED)

    def mark_expired(self, message_id: str) -> None:
        self._mark(message_id, MessageState.EXPIRED)

    def _mark(self, message_id: str, state: MessageState) -> None:
        md = self.metadata(message_id)
        if md.state is not MessageState.PENDING:
            raise ValueError(f"{message_id} already terminal ({md.state.value})")
        md.state = state

    def gc(self, now: int) -> list[str]:
        """Expire overdue messages and purge every terminal entry from disk.

        Returns the ids newly transitioned to EXPIRED by this call; messages
        that were already DELIVERED or EXPIRED are deleted silently.
        """
        newly_expired = []
        for md in self._meta.values():
            if md.state is MessageState.PENDING and md.expiry_at <= now:
                md.state = MessageState.EXPIRED
                newly_expired.append(md.message_id)
        for mid in [m.message_id for m in self._meta.values() if m.state is not MessageState.PENDING]:
            self._drop(mid)
        return newly_expired

    def _drop(self, message_id: str) -> None:
        md = self._meta.pop(message_id)
        self._bodies.pop(message_id, None)
        self._payload_ids.pop(message_id, None)
        path = os.path.join(self.directory, message_id)
        try:
            os.remove(path)
        except FileNotFoundError:
            pass
        self._used_bytes -= _PREAMBLE_LEN + md.size

    # -- crash recovery ----------------------------------------------------

    def recover(self, now: int) -> int:
        """Rebuild the metadata map from spool files left by a previous run.

        Expired files are deleted, unreadable files are skipped with a log
        line, and everything else comes back as PENDING with its original
        next hop and expiry.  Returns the number of restored messages.
        """
        restored = 0
        for name in sorted(os.listdir(self.directory)):
            path = os.path.join(self.directory, name)
            if not os.path.isfile(path):
                continue
            try:
                next_hop, expiry_at, protocol, body, payload_id = self._parse_file(name, path)
            except CorruptFile as exc:
                log.warning("skipping unreadable spool file %s: %s", name, exc)
                continue
            counter = int(name.split("-")[0])
            self._counter = max(self._counter, counter)
            if expiry_at <= now:
                os.remove(path)
                continue
            self._meta[name] = DtnPduMetadata(
                message_id=name,
                next_hop=next_hop,
                expiry_at=expiry_at,
                bytes_sent=0,
                arrival_at=now,
                state=MessageState.PENDING,
                protocol=protocol,
                size=len(body),
            )
            self._bodies[name] = body
            self._payload_ids[name] = payload_id
            self._used_bytes += _PREAMBLE_LEN + len(body)
            restored += 1
        return restored

    @staticmethod
    def _parse_file(name: str, path: str) -> tuple[int, int, int, bytes, int]:
        m = _ID_RE.match(name)
        if m is None:
            raise CorruptFile("filename is not a message id")
        raw = open(path, "rb").read()
        if len(raw) < _PREAMBLE_LEN:
            raise CorruptFile(f"{len(raw)} octets is below the {_PREAMBLE_LEN}-octet preamble")
        next_hop = int.from_bytes(raw[0:4], "big")
        expiry_at = int.from_bytes(raw[4:12], "big")
        protocol = raw[12]
        return next_hop, expiry_at, protocol, raw[_PREAMBLE_LEN:], int(m.group(2), 16)

    # -- reassembly ----------------------------------------------------------

    def insert_fragment(self, key: tuple[int, int], start_ptr: int, data: bytes, tbc: bool,
                        now: int) -> Optional[bytes]:
        """Feed one fragment; returns the whole body once coverage is complete.

        Duplicate or overlapping fragments with identical bytes are idempotent.
        A byte-level disagreement raises :class:`OverlapMismatch` and discards
        the partial buffer, so a later retransmission starts clean.
        """
        buf = self._buffers.setdefault(key, ReassemblyBuffer())
        try:
            buf.insert(start_ptr, data, tbc)
        except OverlapMismatch:
            del self._buffers[key]
            raise
        if buf.complete:
            del self._buffers[key]
            return buf.body()
        return None
