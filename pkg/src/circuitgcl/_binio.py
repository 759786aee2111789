"""Little-endian framing and cursor helpers shared by the binary file formats."""

from __future__ import annotations

import struct
import zlib

from ._errors import ContractError, GraphFormatError


class ByteWriter:
    """Accumulates little-endian fields into a bytes payload."""

    def __init__(self):
        self._parts = []

    def u8(self, v):
        self._parts.append(struct.pack("<B", v))
        return self

    def u16(self, v):
        self._parts.append(struct.pack("<H", v))
        return self

    def u32(self, v):
        self._parts.append(struct.pack("<I", v))
        return self

    def f64(self, v):
        self._parts.append(struct.pack("<d", v))
        return self

    def raw(self, data):
        self._parts.append(bytes(data))
        return self

    def text(self, s):
        data = s.encode("utf-8")
        if len(data) > 0xFFFF:
            raise ContractError(f"string too long for format ({len(data)} bytes)")
        self.u16(len(data))
        return self.raw(data)

    def getvalue(self):
        return b"".join(self._parts)


class ByteReader:
    """Cursor over bytes; failures carry the absolute byte offset."""

    def __init__(self, data, base=0):
        self._data = data
        self._pos = 0
        self._base = base

    @property
    def offset(self):
        return self._base + self._pos

    def remaining(self):
        return len(self._data) - self._pos

    def _take(self, n, what):
        end = self._pos + n
        if end > len(self._data):
            raise GraphFormatError(f"truncated {what}", offset=self.offset)
        chunk = self._data[self._pos:end]
        self._pos = end
        return chunk

    def u8(self, what="u8"):
        return self._take(1, what)[0]

    def u16(self, what="u16"):
        return struct.unpack("<H", self._take(2, what))[0]

    def u32(self, what="u32"):
        return struct.unpack("<I", self._take(4, what))[0]

    def f64(self, what="f64"):
        return struct.unpack("<d", self._take(8, what))[0]

    def raw(self, n, what="bytes"):
        return self._take(n, what)

    def text(self, what="string"):
        n = self.u16(what)
        start = self.offset
        data = self._take(n, what)
        try:
            return data.decode("utf-8")
        except UnicodeDecodeError:
            raise GraphFormatError(f"invalid utf-8 in {what}", offset=start) from None

    def sub(self, n, what="section"):
        start = self.offset
        return ByteReader(self._take(n, what), base=start)

    def expect_end(self):
        if self._pos != len(self._data):
            raise GraphFormatError("trailing bytes", offset=self.offset)


def frame(magic, version, payload):
    """magic + u32 version + payload + u32 crc32 over everything after the magic."""
    body = struct.pack("<I", version) + payload
    return magic + body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def unframe(data, magic):
    """Validate framing and return (version, payload)."""
    if len(data) < len(magic) + 8:
        raise GraphFormatError("file too short", offset=len(data))
    if data[: len(magic)] != magic:
        raise GraphFormatError(f"bad magic, expected {magic!r}", offset=0)
    body = data[len(magic):-4]
    (stored,) = struct.unpack("<I", data[-4:])
    if stored != zlib.crc32(body) & 0xFFFFFFFF:
        raise GraphFormatError("checksum mismatch", offset=len(data) - 4)
    (version,) = struct.unpack("<I", body[:4])
    return version, body[4:]
