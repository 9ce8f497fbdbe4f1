"""Binary tensor files (.tns) and hashed JSON manifests.

The .tns wire format: magic ``SURT``, format version u8 = 1, rank u8, then
rank little-endian u32 dims, then the values as little-endian float32 in
row-major order. Readers promote to float64. Anything persisted is therefore
exactly float32-representable; in-memory math stays in float64.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"SURT"
VERSION = 1


def write_tns(path, array) -> None:
    """Write an array as a .tns file (values rounded to float32)."""
    arr = np.asarray(array, dtype=np.float64)
    dims = arr.shape if arr.ndim > 0 else (1,)
    if len(dims) > 255:
        raise FormatError(f"rank {len(dims)} exceeds the format limit")
    payload = arr.astype("<f4").tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<BB", VERSION, len(dims)))
        fh.write(struct.pack(f"<{len(dims)}I", *dims))
        fh.write(payload)


def read_tns(path) -> np.ndarray:
    """Read a .tns file, promoting values to float64."""
    raw = Path(path).read_bytes()
    if len(raw) < 6 or raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic bytes, not a .tns file")
    version, rank = struct.unpack_from("<BB", raw, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    head = 6 + 4 * rank
    if len(raw) < head:
        raise FormatError(f"{path}: truncated dimension header")
    dims = struct.unpack_from(f"<{rank}I", raw, 6)
    count = int(np.prod(dims)) if rank else 1
    if len(raw) != head + 4 * count:
        raise FormatError(f"{path}: payload size does not match dims {dims}")
    values = np.frombuffer(raw, dtype="<f4", offset=head, count=count)
    return values.astype(np.float64).reshape(dims)


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_json(path, obj) -> None:
    """Deterministic JSON: sorted keys, fixed indentation, trailing newline."""
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    Path(path).write_text(text, encoding="utf-8")


def read_json(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def write_hashed_bundle(out_dir, manifest: dict, tensors: dict) -> None:
    """Persist named arrays as .tns files plus a manifest with their hashes.

    ``manifest`` gains a ``files`` mapping of file name to sha256 and a
    ``schema_version`` field; it must not carry either key already.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, arr in sorted(tensors.items()):
        fname = f"{name}.tns"
        write_tns(out / fname, arr)
        files[fname] = sha256_file(out / fname)
    doc = dict(manifest)
    doc["schema_version"] = VERSION
    doc["files"] = files
    write_json(out / "manifest.json", doc)


def read_hashed_bundle(in_dir) -> tuple[dict, dict]:
    """Load a manifest.json bundle, verifying version and per-file hashes."""
    src = Path(in_dir)
    manifest = read_json(src / "manifest.json")
    if manifest.get("schema_version") != VERSION:
        raise FormatError(
            f"{src}: manifest schema_version {manifest.get('schema_version')!r}, expected {VERSION}"
        )
    tensors = {}
    for fname, digest in manifest["files"].items():
        fpath = src / fname
        if sha256_file(fpath) != digest:
            raise FormatError(f"{fpath}: sha256 mismatch, file corrupted or tampered")
        tensors[fname[:-len(".tns")]] = read_tns(fpath)
    return manifest, tensors
