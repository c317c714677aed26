"""Self-describing binary container used for datasets and checkpoints.

Layout (all integers little-endian)::

    bytes 0-7    magic (8 ASCII bytes, identifies the payload kind)
    bytes 8-11   uint32 format version
    bytes 12-15  uint32 reserved (0)
    8 bytes      uint64 length N of the metadata blob
    N bytes      UTF-8 JSON metadata
    rest         float64 payload, little-endian

The metadata records the shape of every array in the payload under
``"arrays"`` so the reader can slice it without further conventions.
"""

import json
import struct

import numpy as np

from .exceptions import FormatError

VERSION = 1
DATASET_MAGIC = b"INVLDATA"
CHECKPOINT_MAGIC = b"INVLCKPT"
_HEADER = struct.Struct("<8sII")
_LEN = struct.Struct("<Q")


def write_container(path, magic: bytes, meta: dict, arrays) -> None:
    arrays = [np.ascontiguousarray(a, dtype="<f8") for a in arrays]
    meta = dict(meta)
    meta["arrays"] = [list(a.shape) for a in arrays]
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(magic, VERSION, 0))
        fh.write(_LEN.pack(len(blob)))
        fh.write(blob)
        for a in arrays:
            fh.write(a.tobytes(order="C"))


def read_container(path, magic: bytes):
    """Return ``(meta, arrays)``; raises :class:`FormatError` on any inconsistency."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size + _LEN.size:
        raise FormatError(f"{path}: truncated header")
    got_magic, version, _ = _HEADER.unpack_from(raw, 0)
    if got_magic != magic:
        raise FormatError(f"{path}: bad magic {got_magic!r}, expected {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}, expected {VERSION}")
    (n,) = _LEN.unpack_from(raw, _HEADER.size)
    start = _HEADER.size + _LEN.size
    if len(raw) < start + n:
        raise FormatError(f"{path}: truncated metadata")
    try:
        meta = json.loads(raw[start : start + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt metadata ({exc})") from None
    offset = start + n
    arrays = []
    for shape in meta.pop("arrays", []):
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * count
        if end > len(raw):
            raise FormatError(f"{path}: truncated payload")
        arrays.append(np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).copy())
        offset = end
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes after payload")
    return meta, arrays
