"""Parameter checkpoint files.

Layout: one line of UTF-8 JSON terminated by ``\\n``, then the payload of
little-endian float64 arrays back to back.  The header holds::

    {"format": "pdfd-checkpoint", "version": 1,
     "tensors": [{"name": ..., "shape": [...], "offset": o, "nbytes": n}, ...],
     "meta": {...}}

``offset`` counts bytes from the start of the payload (the byte after the
newline).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = "pdfd-checkpoint"
VERSION = 1


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": a.nbytes})
        chunks.append(a.tobytes())
        offset += a.nbytes
    header = {"format": MAGIC, "version": VERSION, "tensors": entries, "meta": meta or {}}
    line = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(Path(path), "wb") as fh:
        fh.write(line + b"\n")
        for c in chunks:
            fh.write(c)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from None
    nl = raw.find(b"\n")
    if nl < 0:
        raise FormatError("checkpoint header has no terminating newline", offset=len(raw))
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"checkpoint header is not valid JSON: {exc}", offset=0) from None
    if not isinstance(header, dict) or header.get("format") != MAGIC:
        raise FormatError("not a pdfd checkpoint", offset=0)
    if header.get("version") != VERSION:
        raise FormatError(f"unsupported checkpoint version {header.get('version')}", offset=0)
    payload = memoryview(raw)[nl + 1:]
    arrays = {}
    try:
        for entry in header["tensors"]:
            shape = tuple(int(s) for s in entry["shape"])
            off, nbytes = int(entry["offset"]), int(entry["nbytes"])
            count = int(np.prod(shape)) if shape else 1
            if nbytes != 8 * count:
                raise FormatError(f"tensor {entry['name']}: nbytes {nbytes} disagrees with shape {shape}", nl + 1 + off)
            if off < 0 or off + nbytes > len(payload):
                raise FormatError(f"tensor {entry['name']} runs past end of file", nl + 1 + off)
            arr = np.frombuffer(payload[off:off + nbytes], dtype="<f8").reshape(shape).astype(np.float64)
            arrays[entry["name"]] = arr
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"malformed tensor table: {exc}", offset=0) from None
    return arrays, header.get("meta", {})
