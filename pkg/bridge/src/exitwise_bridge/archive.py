"""Writer/reader for the engine's tensor-archive format.

This is an independent implementation of the documented external format:
4-byte magic ``TAR0``, little-endian u64 header length, UTF-8 JSON manifest
(``{"entries": [{name, dtype, shape, offset}, ...]}``), then the raw
little-endian payload. Supported dtypes: f32, i8, i32, i64. Iteration order
of the input dict fixes the payload layout, so identical inputs produce
byte-identical files.
"""

import json
import struct

import numpy as np

MAGIC = b"TAR0"

_DTYPES = {
    "f32": np.dtype("<f4"),
    "i8": np.dtype("i1"),
    "i32": np.dtype("<i4"),
    "i64": np.dtype("<i8"),
}
_NAMES = {v: k for k, v in _DTYPES.items()}


class ArchiveFormatError(RuntimeError):
    pass


def write_archive(path, tensors):
    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in _NAMES:
            raise ArchiveFormatError(
                f"tensor {name!r} has unsupported dtype {arr.dtype}")
        data = arr.tobytes()
        entries.append({"name": name, "dtype": _NAMES[arr.dtype],
                        "shape": list(arr.shape), "offset": offset})
        chunks.append(data)
        offset += len(data)
    header = json.dumps({"entries": entries}).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for chunk in chunks:
            f.write(chunk)


def read_archive(path):
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ArchiveFormatError(f"{path}: bad magic")
        (hlen,) = struct.unpack("<Q", f.read(8))
        manifest = json.loads(f.read(hlen).decode("utf-8"))
        payload = f.read()
    out = {}
    for e in manifest["entries"]:
        dt = _DTYPES[e["dtype"]]
        count = int(np.prod(e["shape"], dtype=np.int64)) if e["shape"] else 1
        start = e["offset"]
        out[e["name"]] = np.frombuffer(
            payload[start:start + count * dt.itemsize], dtype=dt
        ).reshape(e["shape"]).copy()
    return out
