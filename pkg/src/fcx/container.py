"""Binary container for named float32 arrays.

Layout: 8-byte magic ``FCXCKPT1``, a canonical UTF-8 JSON header terminated
by a newline, a little-endian float32 blob, and the CRC32 of the blob as a
little-endian uint32. The header carries a lexicographically sorted key
order so that save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from fcx.errors import CorruptCheckpoint, UnsupportedVersion
from fcx.utils import canonical_json

MAGIC = b"FCXCKPT1"
MAGIC_PREFIX = b"FCXCKPT"
FORMAT_VERSION = 1


def encode(meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    table = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f4")
        raw = a.tobytes()
        table.append({"name": name, "shape": list(a.shape), "offset": offset,
                      "length": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    header = dict(meta)
    header["format_version"] = FORMAT_VERSION
    header["arrays"] = table
    header["blob_length"] = len(blob)
    head = canonical_json(header).encode("utf-8") + b"\n"
    return MAGIC + head + blob + struct.pack("<I", zlib.crc32(blob) & 0xFFFFFFFF)


def decode(buf: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(buf) < len(MAGIC) or not buf.startswith(MAGIC_PREFIX):
        raise CorruptCheckpoint("bad magic")
    if buf[:8] != MAGIC:
        raise UnsupportedVersion(f"container version {buf[:8]!r} not supported")
    nl = buf.find(b"\n", 8)
    if nl < 0:
        raise CorruptCheckpoint("header not terminated")
    try:
        header = json.loads(buf[8:nl].decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise CorruptCheckpoint(f"unreadable header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise UnsupportedVersion(f"format_version {header.get('format_version')!r}")
    n_blob = header.get("blob_length")
    start = nl + 1
    if not isinstance(n_blob, int) or len(buf) != start + n_blob + 4:
        raise CorruptCheckpoint("truncated or oversized container")
    blob = buf[start:start + n_blob]
    (crc,) = struct.unpack("<I", buf[start + n_blob:])
    if crc != (zlib.crc32(blob) & 0xFFFFFFFF):
        raise CorruptCheckpoint("checksum mismatch")
    arrays = {}
    for entry in header.pop("arrays"):
        raw = blob[entry["offset"]:entry["offset"] + entry["length"]]
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]) \
            .astype(np.float64)
    header.pop("blob_length")
    header.pop("format_version")
    return header, arrays


def write(path, meta: dict, arrays: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(meta, arrays))
    return path


def read(path) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes())
