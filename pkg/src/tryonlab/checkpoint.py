"""Flat name->array checkpoint container (npz) with a JSON meta header,
config echo, and a content checksum."""

from __future__ import annotations

import hashlib
import io
import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


class CorruptCheckpointError(RuntimeError):
    """Checksum or header mismatch while loading a checkpoint."""


def _checksum(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = dict(meta)
    meta["format_version"] = FORMAT_VERSION
    meta["checksum"] = _checksum(arrays)
    header = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    payload = {name: np.ascontiguousarray(arr) for name, arr in arrays.items()}
    buf = io.BytesIO()
    np.savez(buf, __meta__=header, **payload)
    path.write_bytes(buf.getvalue())


def load_arrays(path: str | Path, expected_kind: str | None = None
                ) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(Path(path), allow_pickle=False) as data:
        if "__meta__" not in data:
            raise CorruptCheckpointError(f"{path}: missing meta header")
        meta = json.loads(data["__meta__"].tobytes().decode())
        arrays = {name: data[name] for name in data.files if name != "__meta__"}
    if meta.get("format_version") != FORMAT_VERSION:
        raise CorruptCheckpointError(
            f"{path}: format version {meta.get('format_version')} != {FORMAT_VERSION}")
    if meta.get("checksum") != _checksum(arrays):
        raise CorruptCheckpointError(f"{path}: checksum mismatch")
    if expected_kind is not None and meta.get("kind") != expected_kind:
        raise CorruptCheckpointError(
            f"{path}: kind {meta.get('kind')!r} != expected {expected_kind!r}")
    return arrays, meta
