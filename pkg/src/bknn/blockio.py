"""Versioned binary container with per-block CRCs.

Layout (little-endian throughout)::

    magic:   8 bytes
    version: u16
    count:   u32                      number of blocks
    block:   name_len u16, name utf-8, payload_len u64, payload_crc u32,
             header_crc u32 (over the four preceding fields), payload

Block headers and payloads are independently checksummed, so a flipped byte
anywhere after the file header is reported with the byte range it was
detected in.  Writing is a pure function of the blocks, so files are
byte-stable across runs.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

from .errors import DataFormatError

_HEAD = struct.Struct("<8sHI")
_NAME_LEN = struct.Struct("<H")
_BLOCK_BODY = struct.Struct("<QI")
_CRC = struct.Struct("<I")


def write_blocks(path: Path | str, magic: bytes, version: int,
                 blocks: list[tuple[str, bytes]]) -> None:
    if len(magic) != 8:
        raise ValueError("magic must be exactly 8 bytes")
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(magic, version, len(blocks)))
        for name, payload in blocks:
            raw_name = name.encode("utf-8")
            header = (_NAME_LEN.pack(len(raw_name)) + raw_name
                      + _BLOCK_BODY.pack(len(payload), zlib.crc32(payload)))
            fh.write(header)
            fh.write(_CRC.pack(zlib.crc32(header)))
            fh.write(payload)


def read_blocks(path: Path | str, magic: bytes, version: int) -> dict[str, bytes]:
    data = Path(path).read_bytes()
    if len(data) < _HEAD.size:
        raise DataFormatError(f"{path}: truncated header at byte {len(data)}")
    got_magic, got_version, count = _HEAD.unpack_from(data, 0)
    if got_magic != magic:
        raise DataFormatError(f"{path}: bad magic {got_magic!r} at byte 0, expected {magic!r}")
    if got_version != version:
        raise DataFormatError(
            f"{path}: unsupported format version {got_version} at byte 8")
    blocks: dict[str, bytes] = {}
    off = _HEAD.size
    for _ in range(count):
        head_start = off
        if off + _NAME_LEN.size > len(data):
            raise DataFormatError(f"{path}: truncated block header at byte {off}")
        (name_len,) = _NAME_LEN.unpack_from(data, off)
        off += _NAME_LEN.size
        head_end = off + name_len + _BLOCK_BODY.size
        if head_end + _CRC.size > len(data):
            raise DataFormatError(
                f"{path}: truncated block header, bytes [{head_start}, {len(data)})")
        header = data[head_start:head_end]
        (head_crc,) = _CRC.unpack_from(data, head_end)
        if zlib.crc32(header) != head_crc:
            raise DataFormatError(
                f"{path}: checksum mismatch in block header, "
                f"bytes [{head_start}, {head_end + _CRC.size})")
        name = data[head_start + _NAME_LEN.size:head_start + _NAME_LEN.size
                    + name_len].decode("utf-8")
        payload_len, payload_crc = _BLOCK_BODY.unpack_from(data, head_end - _BLOCK_BODY.size)
        off = head_end + _CRC.size
        payload = data[off:off + payload_len]
        if len(payload) != payload_len:
            raise DataFormatError(
                f"{path}: block {name!r} truncated at byte {off + len(payload)}")
        if zlib.crc32(payload) != payload_crc:
            raise DataFormatError(
                f"{path}: checksum mismatch in block {name!r}, "
                f"bytes [{off}, {off + payload_len})")
        blocks[name] = payload
        off += payload_len
    if off != len(data):
        raise DataFormatError(f"{path}: {len(data) - off} trailing bytes at byte {off}")
    return blocks


def require(blocks: dict[str, bytes], name: str, path) -> bytes:
    if name not in blocks:
        raise DataFormatError(f"{path}: missing block {name!r} (corrupt or wrong file)")
    return blocks[name]
