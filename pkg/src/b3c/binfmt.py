"""Little-endian container helpers shared by dataset and checkpoint files.

Layout common to both: 4-byte magic, u32 format version, body, CRC-32 of
everything before the trailer.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np


class FormatError(ValueError):
    """Base class for unreadable files."""


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    def __init__(self, found: int, supported: int):
        super().__init__(f"file format version {found} is not supported (this build reads version {supported})")
        self.found = found
        self.supported = supported


class TruncatedFileError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class Writer:
    def __init__(self, magic: bytes, version: int):
        self.buf = bytearray(magic)
        self.u32(version)

    def u8(self, v: int) -> None:
        self.buf += struct.pack("<B", v)

    def u32(self, v: int) -> None:
        self.buf += struct.pack("<I", v)

    def u64(self, v: int) -> None:
        self.buf += struct.pack("<Q", v)

    def text(self, s: str) -> None:
        raw = s.encode("utf-8")
        self.u32(len(raw))
        self.buf += raw

    def raw(self, b: bytes) -> None:
        self.buf += b

    def finish(self) -> bytes:
        return bytes(self.buf) + struct.pack("<I", zlib.crc32(self.buf) & 0xFFFFFFFF)


class Reader:
    def __init__(self, data: bytes, pos: int = 0, end: int | None = None):
        self.data = data
        self.pos = pos
        self.end = len(data) if end is None else end

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise TruncatedFileError(f"need {n} bytes at offset {self.pos}, only {self.end - self.pos} left")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def text(self) -> str:
        n = self.u32()
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ChecksumError(f"undecodable string at offset {self.pos - n}") from exc

    def array(self, dtype: str, count: int) -> np.ndarray:
        size = np.dtype(dtype).itemsize * count
        return np.frombuffer(self.take(size), dtype=dtype).copy()


def open_container(data: bytes, magic: bytes, version: int, parse):
    """Validate magic/version/CRC and run ``parse(reader)`` over the body.

    When the CRC does not match, the body is still walked to tell a file that
    ends early (``TruncatedFileError``) from one whose bytes were altered
    (``ChecksumError``).
    """
    if len(data) < 4 or data[:4] != magic:
        raise BadMagicError(f"expected magic {magic!r}, found {bytes(data[:4])!r}")
    if len(data) < 8:
        raise TruncatedFileError("file ends inside the header")
    found = struct.unpack("<I", data[4:8])[0]
    if found != version:
        raise VersionMismatchError(found, version)
    if len(data) < 12:
        raise TruncatedFileError("file too short to hold a checksum")
    body_end = len(data) - 4
    stored = struct.unpack("<I", data[body_end:])[0]
    if zlib.crc32(data[:body_end]) & 0xFFFFFFFF == stored:
        reader = Reader(data, 8, body_end)
        out = parse(reader)
        if reader.pos != body_end:
            raise FormatError(f"{body_end - reader.pos} trailing bytes after body")
        return out
    # mismatch: decide whether the structure itself runs past the end
    try:
        reader = Reader(data, 8, len(data))
        parse(reader)
    except TruncatedFileError:
        raise TruncatedFileError("file is shorter than its declared contents") from None
    except Exception:
        pass
    else:
        if reader.pos > body_end:
            raise TruncatedFileError("file is shorter than its declared contents")
    raise ChecksumError("CRC-32 mismatch: file contents are corrupted")
