"""Binary container used by the grid, wind-field and index files.

Layout (all integers little-endian)::

    magic        8 bytes, file-type specific
    version      uint32
    header_len   uint32
    header       header_len bytes of UTF-8 JSON; ``header["arrays"]`` lists
                 {name, dtype, shape} for every payload array, in order
    payload      raw C-order array bytes, concatenated in header order
"""

import hashlib
import json
import struct
from pathlib import Path

import numpy as np


class FormatError(ValueError):
    """Raised when a stored artifact is corrupt, truncated or from another version."""


_PREFIX = struct.Struct("<8sII")


def write_container(path, magic, version, header, arrays):
    header = dict(header)
    specs = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        specs.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header["arrays"] = specs
    head = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(magic, version, len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)


def read_container(path, magic, version):
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        raise FormatError(f"{path}: truncated file (no header); expected magic {magic!r}")
    got_magic, got_version, head_len = _PREFIX.unpack_from(data)
    if got_magic != magic:
        raise FormatError(f"{path}: bad magic {got_magic!r}, expected {magic!r}")
    if got_version != version:
        raise FormatError(f"{path}: unsupported version {got_version}, expected {version}")
    start = _PREFIX.size
    if len(data) < start + head_len:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(data[start:start + head_len])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header: {exc}") from None
    offset = start + head_len
    arrays = {}
    for spec in header.get("arrays", []):
        dtype = np.dtype(spec["dtype"])
        count = int(np.prod(spec["shape"], dtype=np.int64))
        nbytes = count * dtype.itemsize
        if len(data) < offset + nbytes:
            raise FormatError(f"{path}: truncated payload in array {spec['name']!r}")
        arrays[spec["name"]] = np.frombuffer(data, dtype, count, offset).reshape(spec["shape"]).copy()
        offset += nbytes
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} trailing bytes after payload")
    return header, arrays


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
