"""Binary container primitives shared by dataset and model files.

Layout: magic bytes, little-endian u32 version, canonical-JSON header
block, then length-prefixed payload blocks until EOF.  Every read error
reports the byte offset where parsing failed.
"""

from __future__ import annotations

import json
import struct


class FormatError(ValueError):
    """A file failed to parse; ``offset`` is the failing byte position."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def canonical_json(obj) -> bytes:
    """Serialize with sorted keys and fixed separators; byte-stable."""
    return json.dumps(
        obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True
    ).encode("ascii")


def read_exact(fh, n: int, what: str) -> bytes:
    offset = fh.tell()
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(
            f"truncated {what}: wanted {n} bytes, got {len(data)}", offset
        )
    return data


def write_preamble(fh, magic: bytes, version: int, header) -> None:
    fh.write(magic)
    fh.write(struct.pack("<I", version))
    blob = canonical_json(header)
    fh.write(struct.pack("<Q", len(blob)))
    fh.write(blob)


def read_preamble(fh, magic: bytes, supported_versions) -> tuple[int, dict]:
    offset = fh.tell()
    got = read_exact(fh, len(magic), "magic")
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}", offset)
    version = struct.unpack("<I", read_exact(fh, 4, "version"))[0]
    if version not in supported_versions:
        raise FormatError(f"unsupported format version {version}", fh.tell() - 4)
    length = struct.unpack("<Q", read_exact(fh, 8, "header length"))[0]
    offset = fh.tell()
    try:
        header = json.loads(read_exact(fh, length, "header"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"header is not valid JSON: {exc}", offset) from exc
    if not isinstance(header, dict):
        raise FormatError("header must be a JSON object", offset)
    return version, header


def write_block(fh, payload: bytes) -> None:
    fh.write(struct.pack("<Q", len(payload)))
    fh.write(payload)


def read_block(fh) -> bytes | None:
    """Next length-prefixed block, or None at a clean end of file."""
    offset = fh.tell()
    prefix = fh.read(8)
    if len(prefix) == 0:
        return None
    if len(prefix) < 8:
        raise FormatError("truncated block length prefix", offset)
    length = struct.unpack("<Q", prefix)[0]
    return read_exact(fh, length, "block payload")
