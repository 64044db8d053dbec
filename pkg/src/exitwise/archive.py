"""Self-describing binary tensor archive.

Layout: 4-byte magic ``TAR0``, little-endian u64 header length, UTF-8 JSON
manifest, raw little-endian payload. Manifest entries carry name, dtype,
shape, and byte offset into the payload. Round-trips are bit-exact.
"""

import json
import struct

import numpy as np

from .errors import ArchiveError

MAGIC = b"TAR0"

_DTYPES = {
    "f32": np.dtype("<f4"),
    "i8": np.dtype("i1"),
    "i32": np.dtype("<i4"),
    "i64": np.dtype("<i8"),
}
_DTYPE_NAMES = {v: k for k, v in _DTYPES.items()}


def _dtype_name(arr):
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    key = np.dtype(dt)
    if key not in _DTYPE_NAMES:
        raise ArchiveError(f"unsupported dtype {arr.dtype} (use f32/i8/i32/i64)")
    return _DTYPE_NAMES[key]


def write_archive(path, tensors):
    """Write a dict of name -> ndarray; iteration order fixes the layout."""
    entries = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        dname = _dtype_name(arr)
        data = arr.astype(_DTYPES[dname], copy=False).tobytes()
        entries.append({
            "name": name,
            "dtype": dname,
            "shape": list(arr.shape),
            "offset": offset,
        })
        chunks.append(data)
        offset += len(data)
    header = json.dumps({"entries": entries}).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for chunk in chunks:
            f.write(chunk)


def _read_manifest(f):
    magic = f.read(4)
    if magic != MAGIC:
        raise ArchiveError(f"bad magic {magic!r}")
    (hlen,) = struct.unpack("<Q", f.read(8))
    try:
        manifest = json.loads(f.read(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArchiveError(f"unreadable manifest: {exc}") from exc
    if "entries" not in manifest:
        raise ArchiveError("manifest missing 'entries'")
    return manifest


def read_archive(path):
    """Read an archive back into a dict of name -> ndarray, manifest order."""
    with open(path, "rb") as f:
        manifest = _read_manifest(f)
        payload = f.read()
    out = {}
    for e in manifest["entries"]:
        dt = _DTYPES.get(e["dtype"])
        if dt is None:
            raise ArchiveError(f"entry {e['name']!r} has unknown dtype {e['dtype']!r}")
        count = int(np.prod(e["shape"], dtype=np.int64)) if e["shape"] else 1
        start = e["offset"]
        end = start + count * dt.itemsize
        if end > len(payload):
            raise ArchiveError(f"entry {e['name']!r} overruns the payload")
        out[e["name"]] = np.frombuffer(
            payload[start:end], dtype=dt).reshape(e["shape"]).copy()
    return out


def validate_archive(path):
    """Check manifest/payload consistency; returns the entry summary.

    Raises ArchiveError on overlapping entries, dangling offsets, or
    unknown dtypes.
    """
    with open(path, "rb") as f:
        manifest = _read_manifest(f)
        payload_len = len(f.read())
    spans = []
    for e in manifest["entries"]:
        for key in ("name", "dtype", "shape", "offset"):
            if key not in e:
                raise ArchiveError(f"manifest entry missing {key!r}: {e}")
        dt = _DTYPES.get(e["dtype"])
        if dt is None:
            raise ArchiveError(f"entry {e['name']!r} has unknown dtype {e['dtype']!r}")
        count = int(np.prod(e["shape"], dtype=np.int64)) if e["shape"] else 1
        start = int(e["offset"])
        end = start + count * dt.itemsize
        if start < 0 or end > payload_len:
            raise ArchiveError(
                f"entry {e['name']!r} spans [{start}, {end}) outside payload "
                f"of {payload_len} bytes")
        spans.append((start, end, e["name"]))
    spans.sort()
    for (s0, e0, n0), (s1, e1, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise ArchiveError(f"entries {n0!r} and {n1!r} overlap")
    return [(e["name"], e["dtype"], tuple(e["shape"])) for e in manifest["entries"]]
