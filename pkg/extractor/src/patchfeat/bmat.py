"""Writers for the downstream pipeline's on-disk formats.

This package talks to the imputation engine only through files, so the
formats are implemented here from their byte-level description rather
than imported: BMAT (magic "BMAT", u32 LE version 1, u64 rows, u64 cols,
float32 LE row-major payload) and the JSON manifest that names, types,
and hashes each artifact.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import NumericalError, ValidationError

BMAT_MAGIC = b"BMAT"
FORMAT_VERSION = 1
MANIFEST_KIND = "histoexpr-manifest"

_HEAD = struct.Struct("<4sIQQ")


def bmat_bytes(matrix: np.ndarray) -> bytes:
    out = np.ascontiguousarray(matrix, dtype=np.float32)
    if out.ndim != 2:
        raise ValidationError(f"BMAT needs a 2-D matrix, got shape {out.shape}")
    if not np.isfinite(out).all():
        raise NumericalError("matrix contains non-finite entries")
    head = _HEAD.pack(BMAT_MAGIC, FORMAT_VERSION, out.shape[0], out.shape[1])
    return head + out.tobytes()


def write_bmat(path: str | Path, matrix: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(bmat_bytes(matrix))


def write_text_list(path: str | Path, items: list[str]) -> None:
    for item in items:
        if "\n" in item or "\r" in item:
            raise ValidationError(f"list entry contains a newline: {item!r}")
    with open(path, "w", encoding="utf-8") as fh:
        for item in items:
            fh.write(item + "\n")


def sha256_file(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _format_tag(rel_path: str) -> str:
    if rel_path.endswith(".bmat"):
        return "bmat"
    if rel_path.endswith(".csv"):
        return "csv"
    return "text"


def write_manifest(
    out_dir: str | Path, files: dict[str, str], provenance: dict
) -> Path:
    """Hash every named file under out_dir and write manifest.json."""
    out_dir = Path(out_dir)
    entries = {}
    for role, rel in sorted(files.items()):
        target = out_dir / rel
        entries[role] = {
            "path": rel,
            "format": _format_tag(rel),
            "sha256": sha256_file(target),
        }
    doc = {
        "kind": MANIFEST_KIND,
        "version": FORMAT_VERSION,
        "files": entries,
        "provenance": provenance,
        "splits": {},
    }
    path = out_dir / "manifest.json"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    return path
