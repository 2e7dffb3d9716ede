"""Binary container shared by estimator and auto-encoder model files.

Layout::

    b"VXLMODEL"                      magic, 8 bytes
    uint32 little-endian             format version
    uint32 little-endian             header length in bytes
    header                           UTF-8 JSON (architecture, mel config,
                                     fingerprint, variant, tensor table)
    blobs                            raw little-endian float64, in the order
                                     of header["tensors"]
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"VXLMODEL"
FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    """File is not a readable model container."""


class FingerprintMismatch(ValueError):
    """Model was built for a different analysis configuration."""

    def __init__(self, expected: str, found: str, what: str = "mel config"):
        super().__init__(f"{what} fingerprint mismatch: expected {expected}, file has {found}")
        self.expected = expected
        self.found = found


def write_container(path: str | Path, header: dict, tensors: list[tuple[str, np.ndarray]]) -> None:
    header = dict(header)
    header["format_version"] = FORMAT_VERSION
    header["tensors"] = [{"name": n, "shape": list(a.shape)} for n, a in tensors]
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for _, arr in tensors:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_container(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise ModelFormatError(f"{path}: not a model file (bad magic or truncated header)")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    if len(raw) < 16 + hlen:
        raise ModelFormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[16:16 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"{path}: corrupt header ({exc})") from exc
    tensors = {}
    offset = 16 + hlen
    for entry in header.get("tensors", []):
        shape = tuple(entry["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(raw):
            raise ModelFormatError(f"{path}: truncated at tensor {entry['name']!r}")
        tensors[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=nbytes // 8, offset=offset).reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(raw):
        raise ModelFormatError(f"{path}: {len(raw) - offset} trailing bytes after last tensor")
    return header, tensors


def file_fingerprint(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
