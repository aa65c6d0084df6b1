"""Named-tensor binary archive.

One file format backs both the body model container and network
checkpoints: a little-endian uint64 header length, a UTF-8 JSON header,
then raw tensor bytes. The header records, per tensor, its dtype, shape
and byte offset into the payload region. Tensors are stored row-major
(C order) little-endian. The JSON is serialized with sorted keys and no
whitespace so identical inputs produce identical files.

See docs/formats.md for the byte-level layout.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MAGIC = b"BFTENSR1"
FORMAT_VERSION = 1

# dtypes permitted on disk, keyed by their numpy little-endian codes
_ALLOWED_DTYPES = {"<f8", "<f4", "<i4", "<i8"}


class TensorFileError(ValueError):
    pass


def _dtype_code(arr: np.ndarray) -> str:
    code = np.dtype(arr.dtype).newbyteorder("<").str
    if code not in _ALLOWED_DTYPES:
        raise TensorFileError(f"dtype {arr.dtype} not storable; use one of {sorted(_ALLOWED_DTYPES)}")
    return code


def write_tensorfile(path, kind: str, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    """Write named tensors plus a JSON metadata block to ``path``.

    Tensor payload order follows the dict insertion order, so callers
    control the on-disk field order. ``meta`` must be JSON-serializable.
    """
    entries = {}
    offset = 0
    blobs = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _dtype_code(arr)
        raw = arr.astype(code, copy=False).tobytes()  # tobytes always emits C order
        entries[name] = {"dtype": code, "shape": list(arr.shape), "offset": offset}
        offset += len(raw)
        blobs.append(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "meta": meta,
        "tensors": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(np.uint64(len(header_bytes)).tobytes())
        f.write(header_bytes)
        for raw in blobs:
            f.write(raw)


def read_tensorfile(path) -> tuple[str, dict, dict[str, np.ndarray]]:
    """Read an archive back as ``(kind, meta, {name: array})``."""
    path = Path(path)
    data = path.read_bytes()
    if data[:8] != MAGIC:
        raise TensorFileError(f"{path}: not a tensor archive (bad magic)")
    header_len = int(np.frombuffer(data[8:16], dtype="<u8")[0])
    try:
        header = json.loads(data[16 : 16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise TensorFileError(f"{path}: corrupt header: {e}") from e
    if header.get("format_version") != FORMAT_VERSION:
        raise TensorFileError(f"{path}: unsupported format version {header.get('format_version')}")
    payload = data[16 + header_len :]
    tensors = {}
    for name, entry in header["tensors"].items():
        dt = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        nbytes = dt.itemsize * int(np.prod(shape, dtype=np.int64)) if shape else dt.itemsize
        start = entry["offset"]
        if start + nbytes > len(payload):
            raise TensorFileError(f"{path}: tensor {name!r} extends past end of file")
        tensors[name] = np.frombuffer(payload[start : start + nbytes], dtype=dt).reshape(shape).copy()
    return header["kind"], header["meta"], tensors
