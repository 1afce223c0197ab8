"""Named-tensor archive.

Layout (little-endian)::

    b"STNT1\\0"
    u32 manifest length, manifest (utf-8 JSON: [{"name", "dtype", "shape"}, ...], optional "meta")
    raw tensor payloads in manifest order
    u32 CRC32 of everything above
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from typing import Dict, Optional, Tuple

import numpy as np

MAGIC = b"STNT1\0"
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "i64": np.dtype("<i8"),
           "i32": np.dtype("<i4"), "u8": np.dtype("u1")}


class CheckpointError(RuntimeError):
    pass


def _code(arr: np.ndarray) -> str:
    code = {("f", 4): "f32", ("f", 8): "f64", ("i", 8): "i64", ("i", 4): "i32",
            ("u", 1): "u8"}.get((arr.dtype.kind, arr.dtype.itemsize))
    if code is None:
        raise CheckpointError(f"unsupported dtype {arr.dtype}")
    return code


def encode(tensors: Dict[str, np.ndarray], meta: Optional[dict] = None) -> bytes:
    entries, payloads = [], []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _code(arr)
        entries.append({"name": name, "dtype": code, "shape": list(arr.shape)})
        payloads.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    manifest = {"tensors": entries}
    if meta is not None:
        manifest["meta"] = meta
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    body = MAGIC + struct.pack("<I", len(head)) + head + b"".join(payloads)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode(blob: bytes) -> Tuple[Dict[str, np.ndarray], dict]:
    if len(blob) < len(MAGIC) + 8 or not blob.startswith(MAGIC):
        raise CheckpointError("not a STNT1 checkpoint (bad magic)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError("checkpoint CRC mismatch (file is corrupt or truncated)")
    pos = len(MAGIC)
    (n,) = struct.unpack("<I", body[pos:pos + 4])
    pos += 4
    manifest = json.loads(body[pos:pos + n].decode("utf-8"))
    pos += n
    out: Dict[str, np.ndarray] = {}
    for e in manifest["tensors"]:
        dt = _DTYPES[e["dtype"]]
        count = int(np.prod(e["shape"], dtype=np.int64))
        size = count * dt.itemsize
        if pos + size > len(body):
            raise CheckpointError(f"payload of {e['name']} runs past the end of the file")
        arr = np.frombuffer(body, dtype=dt, count=count, offset=pos).reshape(e["shape"])
        out[e["name"]] = arr.astype(dt.newbyteorder("="), copy=True)
        pos += size
    if pos != len(body):
        raise CheckpointError(f"{len(body) - pos} trailing bytes after the last tensor")
    return out, manifest.get("meta", {})


def save(path: str, tensors: Dict[str, np.ndarray], meta: Optional[dict] = None) -> None:
    """Write atomically: temp file in the target directory, fsync, rename."""
    blob = encode(tensors, meta)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".stnt-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path: str) -> Tuple[Dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        return decode(f.read())
