"""Shared helpers for the binary file formats (.mdrs, .mdtf, .ckpt).

All formats are little-endian with a 4-byte ASCII magic. Readers fail with
a FileFormatError carrying the byte offset of the first inconsistency.
"""

from __future__ import annotations

import struct


class FileFormatError(ValueError):
    """Malformed or truncated binary file; `offset` is the failing byte."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class Reader:
    """Cursor over an in-memory file image with offset-aware errors."""

    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise FileFormatError(f"truncated file: expected {n} bytes for {what}", self.pos)
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        vals = struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt), what))
        return vals[0] if len(vals) == 1 else vals

    def expect_magic(self, magic: bytes) -> None:
        at = self.pos
        got = self.take(len(magic), "magic")
        if got != magic:
            raise FileFormatError(f"bad magic: expected {magic!r}, got {got!r}", at)

    def expect_version(self, version: int) -> None:
        at = self.pos
        got = self.unpack("I", "version")
        if got != version:
            raise FileFormatError(f"unsupported version {got}, expected {version}", at)

    def done(self) -> None:
        if self.pos != len(self.blob):
            raise FileFormatError(
                f"{len(self.blob) - self.pos} unexpected trailing bytes", self.pos
            )
