"""Versioned checkpoint container.

A checkpoint is a .npz archive holding named float arrays plus a reserved
"_meta" entry with a JSON header (format version, configs, counters).
Loading validates the version; consumers validate the exact name set so a
checkpoint with unknown or missing parameters is rejected loudly.
"""

from __future__ import annotations

import io
import json
from dataclasses import asdict, is_dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import CheckpointError

FORMAT_VERSION = 1
_META_KEY = "_meta"


def _jsonable(obj):
    if is_dataclass(obj) and not isinstance(obj, type):
        return asdict(obj)
    return obj


def save_arrays(path: str | Path, arrays: Mapping[str, np.ndarray],
                meta: dict | None = None) -> Path:
    path = Path(path)
    if _META_KEY in arrays:
        raise CheckpointError(f"array name {_META_KEY!r} is reserved")
    header = {"format_version": FORMAT_VERSION}
    for key, value in (meta or {}).items():
        header[key] = _jsonable(value)
    payload = {name: np.asarray(arr) for name, arr in arrays.items()}
    payload[_META_KEY] = np.array(json.dumps(header, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **payload)
    return path


def serialize_arrays(arrays: Mapping[str, np.ndarray]) -> bytes:
    """Deterministic bytes for a named array group (freeze-set snapshots)."""
    buf = io.BytesIO()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        buf.write(name.encode("utf-8") + b"\x00")
        buf.write(str(arr.dtype).encode() + b"\x00")
        buf.write(repr(arr.shape).encode() + b"\x00")
        buf.write(arr.tobytes())
    return buf.getvalue()


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as data:
            if _META_KEY not in data:
                raise CheckpointError(f"{path} is not a tuneqa checkpoint (no header)")
            meta = json.loads(str(data[_META_KEY][()]))
            arrays = {k: data[k] for k in data.files if k != _META_KEY}
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint {path} has format version {version}, expected {FORMAT_VERSION}"
        )
    return arrays, meta


def require_names(arrays: Mapping[str, np.ndarray], expected: set[str],
                  context: str) -> None:
    unknown = set(arrays) - expected
    missing = expected - set(arrays)
    if unknown or missing:
        raise CheckpointError(
            f"{context}: parameter names mismatch "
            f"(unknown={sorted(unknown)}, missing={sorted(missing)})"
        )
