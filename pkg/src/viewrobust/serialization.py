"""Deterministic artifact I/O.

Every file this package writes is reproducible byte-for-byte from the
same inputs: no timestamps, no environment-dependent fields.  Text
artifacts start with comment headers recording the tool version, the
full configuration, and the master seed; binary artifacts carry the
same record in their JSON manifest.

The array container is a single-file format for checkpoints: a magic
line, a length-prefixed JSON manifest, then the raw C-order bytes of
each array in manifest order.
"""

import dataclasses
import json
import struct

import numpy as np

from . import __version__
from .validation import ValidationError

_MAGIC = b"VRARRS1\n"


def config_to_jsonable(obj):
    """Best-effort conversion of configs/dataclasses to JSON-safe values."""
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: config_to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, dict):
        return {str(k): config_to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [config_to_jsonable(x) for x in obj]
    return obj


def make_meta(seed, config=None, **extra):
    """The standard header record stamped into every output artifact."""
    meta = {"tool": "viewrobust", "version": __version__, "seed": seed}
    if config is not None:
        meta["config"] = config_to_jsonable(config)
    meta.update(extra)
    return meta


def meta_comment(meta):
    """One-line '#' comment encoding of a meta record, for text artifacts."""
    return "# " + json.dumps(meta, sort_keys=True, separators=(",", ":"))


def write_csv(path, fieldnames, rows, meta=None):
    """CSV with an optional leading meta comment; floats via repr."""
    lines = []
    if meta is not None:
        lines.append(meta_comment(meta))
    lines.append(",".join(fieldnames))
    for row in rows:
        cells = []
        for name in fieldnames:
            val = row[name] if isinstance(row, dict) else row[fieldnames.index(name)]
            cells.append(repr(val) if isinstance(val, float) else str(val))
        lines.append(",".join(cells))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_csv(path):
    """Inverse of write_csv: returns (meta or None, fieldnames, list of dicts)."""
    meta = None
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    idx = 0
    if lines and lines[0].startswith("# "):
        meta = json.loads(lines[0][2:])
        idx = 1
    fieldnames = lines[idx].split(",")
    rows = []
    for line in lines[idx + 1 :]:
        if not line:
            continue
        rows.append(dict(zip(fieldnames, line.split(","))))
    return meta, fieldnames, rows


def write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config_to_jsonable(payload), fh, indent=1)
        fh.write("\n")


def read_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def write_array_container(path, header, arrays):
    """Write named arrays plus a JSON header to one deterministic file."""
    manifest = {
        "header": config_to_jsonable(header),
        "arrays": [
            {"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape)}
            for name, arr in arrays.items()
        ],
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr).tobytes())


def read_array_container(path):
    """Inverse of write_array_container: (header, dict of arrays)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValidationError(f"{path}: not an array container (bad magic)")
        (blob_len,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(blob_len).decode("utf-8"))
        arrays = {}
        for spec in manifest["arrays"]:
            dtype = np.dtype(spec["dtype"])
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = fh.read(dtype.itemsize * count)
            if len(data) != dtype.itemsize * count:
                raise ValidationError(f"{path}: truncated array {spec['name']}")
            arrays[spec["name"]] = np.frombuffer(data, dtype=dtype).reshape(shape).copy()
    return manifest["header"], arrays
