"""On-disk formats.

* Volumes and projection stacks: little-endian float32 raw file plus a JSON
  sidecar with the same stem (``vol.raw`` + ``vol.json``).
* Model weights: one binary file = 8-byte magic, uint32 header length, UTF-8
  JSON header, then the arrays back to back as little-endian float64.  The
  header lists every array's name, shape and byte offset.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError
from .geometry import ConeBeamGeometry, Volume

WEIGHTS_MAGIC = b"CBCTWT01"


def _paths(path):
    p = Path(path)
    stem = p.with_suffix("") if p.suffix in (".raw", ".json") else p
    return stem.with_suffix(".raw"), stem.with_suffix(".json")


def save_volume(volume: Volume, path, extra: dict | None = None) -> Path:
    raw, side = _paths(path)
    raw.parent.mkdir(parents=True, exist_ok=True)
    np.asarray(volume.data, dtype="<f4").tofile(raw)
    meta = {**volume.metadata(), "dtype": "float32-le", "order": "C (x, y, z)"}
    if extra:
        meta.update(extra)
    side.write_text(json.dumps(meta, indent=2))
    return raw


def load_volume(path) -> tuple[Volume, dict]:
    raw, side = _paths(path)
    meta = json.loads(side.read_text())
    dims = tuple(meta["dims"])
    data = np.fromfile(raw, dtype="<f4")
    if data.size != int(np.prod(dims)):
        raise InvalidArgumentError(f"{raw}: expected {np.prod(dims)} values, found {data.size}")
    return Volume(data.reshape(dims).astype(np.float32), tuple(meta["spacing"]), tuple(meta["origin"])), meta


def save_projections(proj, path) -> Path:
    raw, side = _paths(path)
    raw.parent.mkdir(parents=True, exist_ok=True)
    np.asarray(proj.views, dtype="<f4").tofile(raw)
    meta = {"geometry": proj.geometry.to_dict(), "shape": list(proj.views.shape), "dtype": "float32-le"}
    side.write_text(json.dumps(meta, indent=2))
    return raw


def load_projections(path):
    from .projector import ProjectionSet

    raw, side = _paths(path)
    meta = json.loads(side.read_text())
    geom = ConeBeamGeometry.from_dict(meta["geometry"])
    views = np.fromfile(raw, dtype="<f4").reshape(meta["shape"])
    return ProjectionSet(geom, views.astype(np.float32))


def save_weights(path, header: dict, arrays: dict[str, np.ndarray]) -> Path:
    table = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        a = np.asarray(arrays[name], dtype="<f8", order="C")
        table.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes
    head = json.dumps({**header, "arrays": table}, sort_keys=True).encode()
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)
    return p


def load_weights(path) -> tuple[dict, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if blob[:8] != WEIGHTS_MAGIC:
        raise InvalidArgumentError(f"{path}: not a weights file")
    (n,) = struct.unpack("<I", blob[8:12])
    header = json.loads(blob[12 : 12 + n].decode())
    body = memoryview(blob)[12 + n :]
    arrays = {}
    for entry in header.pop("arrays"):
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        a = np.frombuffer(body, dtype="<f8", count=count, offset=entry["offset"]) if count else np.zeros(0)
        arrays[entry["name"]] = a.reshape(shape).copy()
    return header, arrays
