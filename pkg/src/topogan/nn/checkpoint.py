"""Checkpoint bundles of one or more models.

Layout: ``b"TGCK"``, u32 format version, u32 header length, a UTF-8 JSON
header (network specs as text, blob table with CRC32 per blob, free-form
``extra`` metadata), then the float32 little-endian weight blobs.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
import zlib
from pathlib import Path
from typing import Mapping

import numpy as np

from topogan.errors import IntegrityError
from topogan.nn.network import Model, NetworkSpec

MAGIC = b"TGCK"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


def encode_bundle(models: Mapping[str, Model], extra: dict | None = None) -> bytes:
    blobs = []
    offset = 0
    table = {}
    for mname, model in models.items():
        entries = []
        for kind, values in (("param", model.parameters()), ("state", model.states())):
            for name, arr in values.items():
                data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
                entries.append({"name": name, "kind": kind, "shape": list(arr.shape), "offset": offset,
                                "nbytes": len(data), "crc32": zlib.crc32(data)})
                blobs.append(data)
                offset += len(data)
        table[mname] = {"spec": model.spec.to_text(), "blobs": entries}
    header = json.dumps({"models": table, "extra": extra or {}}, sort_keys=True).encode()
    return _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(blobs)


def decode_bundle(blob: bytes) -> tuple[dict[str, Model], dict]:
    if len(blob) < _PREFIX.size:
        raise IntegrityError("checkpoint shorter than its prefix")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise IntegrityError(f"bad checkpoint magic {magic!r}")
    if version != VERSION:
        raise IntegrityError(f"unsupported checkpoint version {version}")
    start = _PREFIX.size + hlen
    try:
        header = json.loads(blob[_PREFIX.size:start].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"corrupt checkpoint header: {exc}") from exc
    body = blob[start:]
    models = {}
    for mname, entry in header["models"].items():
        model = Model(NetworkSpec.from_text(entry["spec"]))
        params, states = {}, {}
        for b in entry["blobs"]:
            data = body[b["offset"]: b["offset"] + b["nbytes"]]
            if len(data) != b["nbytes"]:
                raise IntegrityError(f"checkpoint truncated inside {mname}:{b['name']}")
            if zlib.crc32(data) != b["crc32"]:
                raise IntegrityError(f"checksum mismatch for {mname}:{b['name']}")
            arr = np.frombuffer(data, dtype="<f4").reshape(b["shape"]).astype(np.float32)
            (params if b["kind"] == "param" else states)[b["name"]] = arr
        model.set_parameters(params)
        model.set_parameters(states, state=True)
        models[mname] = model
    return models, header.get("extra", {})


def save_bundle(path: str | Path, models: Mapping[str, Model], extra: dict | None = None) -> str:
    """Write a checkpoint; returns the sha256 of the file contents."""
    data = encode_bundle(models, extra)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_bundle(path: str | Path) -> tuple[dict[str, Model], dict]:
    return decode_bundle(Path(path).read_bytes())


def write_log_csv(path: str | Path, rows: list[dict]) -> None:
    if not rows:
        Path(path).write_text("step\n")
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
