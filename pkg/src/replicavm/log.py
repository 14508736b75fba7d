"""Binary record log: header, frames, CRC-checked codec and a streaming writer.

Frame layout, little-endian::

    len u32 | lsn u64 | kind u8 | nbranches u64 | ip u64 | cnt u64 | payload | crc u32

``len`` is the payload length and ``crc`` is CRC-32 over every preceding
byte of the frame.  The file starts with a 23-byte header::

    magic "RRLG" | version u16 | disk_mode u8 | program_hash u64 | state_digest u64
"""

from __future__ import annotations

import enum
import struct
import zlib
from dataclasses import dataclass
from typing import Callable, Iterator, Optional

from .guest import Epoch

MAGIC = b"RRLG"
VERSION = 1
MAX_PAYLOAD = 64 * 1024

_FRAME_HEAD = struct.Struct("<IQBQQQ")
_CRC = struct.Struct("<I")
_HEADER = struct.Struct("<4sHBQQ")
FRAME_OVERHEAD = _FRAME_HEAD.size + _CRC.size  # 41
HEADER_SIZE = _HEADER.size


class FrameKind(enum.IntEnum):
    ND_VALUE = 1
    INTERRUPT = 2
    NET_RX = 3
    DISK_READ = 4
    SNAPSHOT_REF = 5
    END = 6


# frames applied between instructions, at a step boundary
ASYNC_KINDS = frozenset((FrameKind.INTERRUPT, FrameKind.NET_RX, FrameKind.SNAPSHOT_REF, FrameKind.END))
# frames consumed by the instruction executing at their epoch
SYNC_KINDS = frozenset((FrameKind.ND_VALUE, FrameKind.DISK_READ))


class LogError(Exception):
    pass


class CorruptFrame(LogError):
    def __init__(self, position: int, message: str = "bad crc"):
        super().__init__(f"{message} at byte {position}")
        self.position = position


class IncompleteFrame(LogError):
    def __init__(self, position: int):
        super().__init__(f"incomplete frame at byte {position}")
        self.position = position


@dataclass(frozen=True)
class LogFrame:
    lsn: int
    kind: FrameKind
    epoch: Epoch
    payload: bytes = b""

    @property
    def value(self) -> int:
        return int.from_bytes(self.payload, "little")


@dataclass(frozen=True)
class LogHeader:
    disk_mode: int
    program_hash: int
    state_digest: int
    version: int = VERSION

    def encode(self) -> bytes:
        return _HEADER.pack(MAGIC, self.version, self.disk_mode, self.program_hash, self.state_digest)

    @classmethod
    def decode(cls, data: bytes) -> "LogHeader":
        if len(data) < HEADER_SIZE:
            raise LogError("truncated header")
        magic, version, mode, phash, digest = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise LogError(f"bad magic {magic!r}")
        if version != VERSION:
            raise LogError(f"unsupported log version {version}")
        return cls(mode, phash, digest, version)


def crc32(data: bytes) -> int:
    return zlib.crc32(data) & 0xFFFFFFFF


def encode_frame(frame: LogFrame) -> bytes:
    if len(frame.payload) > MAX_PAYLOAD:
        raise ValueError(f"payload of {len(frame.payload)} bytes exceeds 64 KiB")
    e = frame.epoch
    body = _FRAME_HEAD.pack(len(frame.payload), frame.lsn, int(frame.kind),
                            e.nbranches, e.ip, e.cnt) + frame.payload
    return body + _CRC.pack(crc32(body))


def decode_frame(data: bytes, offset: int = 0) -> tuple[LogFrame, int]:
    """Decode the frame at ``offset``; returns it with the offset past it."""
    if len(data) - offset < _FRAME_HEAD.size:
        raise IncompleteFrame(offset)
    plen, lsn, kind, nb, ip, cnt = _FRAME_HEAD.unpack_from(data, offset)
    if plen > MAX_PAYLOAD:
        raise CorruptFrame(offset, "bad length")
    end = offset + _FRAME_HEAD.size + plen
    if len(data) < end + _CRC.size:
        raise IncompleteFrame(offset)
    (crc,) = _CRC.unpack_from(data, end)
    if crc != crc32(bytes(data[offset:end])):
        raise CorruptFrame(offset)
    try:
        kind = FrameKind(kind)
    except ValueError:
        raise CorruptFrame(offset, f"unknown kind {kind}") from None
    payload = bytes(data[offset + _FRAME_HEAD.size:end])
    return LogFrame(lsn, kind, Epoch(nb, ip, cnt), payload), end + _CRC.size


def iter_frames(data: bytes, offset: int = 0) -> Iterator[LogFrame]:
    while offset < len(data):
        frame, offset = decode_frame(data, offset)
        yield frame


class LogWriter:
    """Single-producer append-only log.

    Frames get consecutive LSNs starting at ``first_lsn``.  Encoded bytes go
    to ``stream`` if given; every frame is also passed to the listeners.
    """

    def __init__(self, header: LogHeader, stream=None, first_lsn: int = 1):
        self.header = header
        self.frames: list = []
        self.nbytes = 0
        self.next_lsn = first_lsn
        self.stream = stream
        self.listeners: list = []
        self.closed = False
        if stream is not None:
            stream.write(header.encode())

    def append(self, kind: FrameKind, epoch: Epoch, payload: bytes = b"") -> LogFrame:
        if self.closed:
            raise LogError("log already ended")
        frame = LogFrame(self.next_lsn, FrameKind(kind), epoch, bytes(payload))
        raw = encode_frame(frame)
        if self.stream is not None:
            self.stream.write(raw)
        self.next_lsn += 1
        self.nbytes += len(raw)
        self.frames.append(frame)
        for fn in self.listeners:
            fn(frame)
        if kind == FrameKind.END:
            self.closed = True
            if self.stream is not None:
                self.stream.flush()
        return frame

    def subscribe(self, fn: Callable[[LogFrame], None]) -> None:
        self.listeners.append(fn)

    def to_bytes(self) -> bytes:
        return self.header.encode() + b"".join(encode_frame(f) for f in self.frames)


@dataclass
class RecordLog:
    header: LogHeader
    frames: list

    @property
    def complete(self) -> bool:
        return bool(self.frames) and self.frames[-1].kind == FrameKind.END

    @property
    def nbytes(self) -> int:
        """Frame bytes, header excluded."""
        return sum(FRAME_OVERHEAD + len(f.payload) for f in self.frames)

    def payload_bytes(self, kind: Optional[FrameKind] = None) -> int:
        return sum(len(f.payload) for f in self.frames if kind is None or f.kind == kind)

    def count(self, kind: FrameKind) -> int:
        return sum(1 for f in self.frames if f.kind == kind)

    def to_bytes(self) -> bytes:
        return self.header.encode() + b"".join(encode_frame(f) for f in self.frames)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())


def parse_log(data: bytes, allow_truncated: bool = True) -> RecordLog:
    """Decode a whole log, checking every CRC and the LSN chain.

    A torn tail (incomplete last frame) is dropped when ``allow_truncated``;
    the result then has no END frame and reports ``complete == False``.
    """
    header = LogHeader.decode(data)
    frames = []
    offset = HEADER_SIZE
    while offset < len(data):
        try:
            frame, offset = decode_frame(data, offset)
        except IncompleteFrame:
            if allow_truncated:
                break
            raise
        if frames and frame.lsn != frames[-1].lsn + 1:
            raise CorruptFrame(offset, f"lsn {frame.lsn} after {frames[-1].lsn}")
        if frames and frames[-1].kind == FrameKind.END:
            raise CorruptFrame(offset, "frame after END")
        frames.append(frame)
    return RecordLog(header, frames)


def read_log(path) -> RecordLog:
    with open(path, "rb") as fh:
        return parse_log(fh.read())


def log_growth_rate(log, wall_seconds: float, instructions: int) -> tuple[float, float]:
    """Return (bytes per second, bytes per thousand instructions), header excluded."""
    if wall_seconds <= 0:
        raise ValueError("wall_seconds must be positive")
    nbytes = log.nbytes
    per_kinstr = nbytes * 1000.0 / instructions if instructions else float("inf")
    return nbytes / wall_seconds, per_kinstr
