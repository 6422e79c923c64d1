"""Deterministic array-archive I/O.

All on-disk artifacts (face models, network checkpoints, feature caches,
corpus clips) share one container: a ZIP holding raw little-endian array
blobs plus a ``meta.json`` header. Entries are stored uncompressed with a
frozen timestamp so that identical contents produce identical bytes,
which the reproducibility tests rely on.
"""

from __future__ import annotations

import hashlib
import json
import zipfile
from pathlib import Path

import numpy as np

# DOS epoch; zipfile cannot store anything earlier.
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)

_DTYPE_TAGS = {
    "f8": np.dtype("<f8"),
    "i8": np.dtype("<i8"),
}


def canonical_json(obj) -> str:
    """Serialize with sorted keys and no whitespace; stable across runs."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _normalize(arr: np.ndarray) -> tuple[np.ndarray, str]:
    arr = np.asarray(arr)
    if arr.dtype.kind == "f":
        return np.ascontiguousarray(arr, dtype="<f8"), "f8"
    if arr.dtype.kind in "iub":
        return np.ascontiguousarray(arr, dtype="<i8"), "i8"
    raise TypeError(f"unsupported array dtype {arr.dtype!r}")


def save_archive(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write arrays + metadata to ``path`` deterministically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    index = {}
    blobs = []
    for name in sorted(arrays):
        arr, tag = _normalize(arrays[name])
        index[name] = {"shape": list(arr.shape), "dtype": tag}
        blobs.append((f"{name}.{tag}", arr.tobytes()))
    header = {"arrays": index, "meta": meta or {}}
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        _write_entry(zf, "meta.json", canonical_json(header).encode())
        for entry_name, payload in blobs:
            _write_entry(zf, entry_name, payload)


def _write_entry(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def load_archive(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read back an archive written by :func:`save_archive`."""
    with zipfile.ZipFile(path, "r") as zf:
        header = json.loads(zf.read("meta.json").decode())
        arrays = {}
        for name, spec in header["arrays"].items():
            dtype = _DTYPE_TAGS[spec["dtype"]]
            raw = zf.read(f"{name}.{spec['dtype']}")
            arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(spec["shape"]).copy()
    return arrays, header["meta"]
