"""Single-file named-tensor archive with integrity checking.

Checkpoints, adapter bundles, and prompt embeddings are persisted in a
small custom container rather than ``npz``/``torch.save``: both of those
embed zip timestamps, which breaks the byte-identical-artifact guarantee
the pipeline makes for identical config+seed runs.

Layout: ``MAGIC | u64 header length | header JSON | payload``.  The header
records entry names, dtypes, shapes, offsets, a free-form ``meta`` dict,
and a sha256 over the payload that is verified on load.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .util import sha256_hex

MAGIC = b"NTAR1\n"

_DTYPES = {
    "float64": np.float64,
    "float32": np.float32,
    "int64": np.int64,
    "uint8": np.uint8,
}


class ArchiveError(RuntimeError):
    """Malformed or unreadable archive."""


class ArchiveIntegrityError(ArchiveError):
    """Archive payload does not match its recorded checksum."""


def _to_array(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    arr = np.ascontiguousarray(value)
    if arr.dtype.name not in _DTYPES:
        raise ArchiveError(f"unsupported dtype {arr.dtype.name}")
    return arr


def save_archive(path, entries: Mapping[str, object], meta: dict | None = None) -> None:
    """Write named arrays plus a JSON ``meta`` dict to ``path``.

    Entry order in the payload is sorted by name, so identical content
    always produces identical bytes.
    """
    path = Path(path)
    arrays = {name: _to_array(value) for name, value in entries.items()}
    header_entries = {}
    chunks = []
    offset = 0
    for name in sorted(arrays):
        arr = arrays[name]
        raw = arr.tobytes()
        header_entries[name] = {
            "dtype": arr.dtype.name,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        }
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "entries": header_entries,
        "meta": meta or {},
        "payload_sha256": sha256_hex(payload),
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload)


def load_archive(path) -> tuple[dict[str, torch.Tensor], dict]:
    """Read an archive back as ``(entries, meta)``, entries as tensors.

    Raises :class:`ArchiveIntegrityError` if the payload checksum does not
    match; no partial state is returned.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ArchiveError(f"{path} is not a named-tensor archive")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        try:
            header = json.loads(fh.read(header_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ArchiveError(f"{path}: unreadable header") from exc
        payload = fh.read()
    if sha256_hex(payload) != header.get("payload_sha256"):
        raise ArchiveIntegrityError(f"{path}: payload checksum mismatch (archive corrupted)")
    entries = {}
    for name, info in header["entries"].items():
        start, nbytes = info["offset"], info["nbytes"]
        arr = np.frombuffer(payload[start : start + nbytes], dtype=_DTYPES[info["dtype"]])
        entries[name] = torch.from_numpy(arr.reshape(info["shape"]).copy())
    return entries, header.get("meta", {})
