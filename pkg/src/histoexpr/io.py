"""Binary matrix, blob-container, manifest, and text-list file handling.

BMAT layout: magic b"BMAT", little-endian u32 version (1), u64 rows, u64
cols, then rows*cols float32 values row-major.  Checkpoint and index files
share one container skeleton: a four-byte magic, u32 version, u64 header
byte length, a UTF-8 JSON header, then BMAT blobs in header-declared order.
CSV matrices (one header row) are accepted anywhere BMAT is; BMAT is the
canonical form for content hashes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .errors import FormatError, ValidationError
from .linalg import F32, Matrix

BMAT_MAGIC = b"BMAT"
FORMAT_VERSION = 1

_BMAT_HEAD = struct.Struct("<4sIQQ")
_CONTAINER_HEAD = struct.Struct("<4sIQ")

MANIFEST_KIND = "histoexpr-manifest"
DATASET_FILES = ("features", "expression", "coords", "gene_names", "spot_ids")


def canonical_json(obj) -> str:
    """Key-sorted compact JSON so equal content gives equal bytes."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# BMAT


def _as_matrix_f32(matrix: Matrix, label: str) -> Matrix:
    arr = np.asarray(matrix)
    if arr.ndim != 2:
        raise ValidationError(f"{label}: expected a 2-d matrix, got ndim={arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{label}: matrix contains non-finite values")
    return np.ascontiguousarray(arr, dtype=F32)


def bmat_bytes(matrix: Matrix, label: str = "matrix", validate: bool = True) -> bytes:
    if validate:
        arr = _as_matrix_f32(matrix, label)
    else:
        # Hash-verification path: encode whatever bits are present.
        arr = np.ascontiguousarray(np.asarray(matrix), dtype=F32)
    head = _BMAT_HEAD.pack(BMAT_MAGIC, FORMAT_VERSION, arr.shape[0], arr.shape[1])
    return head + arr.tobytes(order="C")


def write_bmat(path: str | Path, matrix: Matrix) -> None:
    with open(path, "wb") as fh:
        fh.write(bmat_bytes(matrix, str(path)))


def _read_exact(fh: BinaryIO, n: int, path: str, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"{path}: truncated {what} ({len(data)} of {n} bytes)")
    return data


def read_bmat_from(fh: BinaryIO, path: str) -> Matrix:
    head = _read_exact(fh, _BMAT_HEAD.size, path, "BMAT header")
    magic, version, rows, cols = _BMAT_HEAD.unpack(head)
    if magic != BMAT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {BMAT_MAGIC!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported BMAT version {version}")
    payload = _read_exact(fh, rows * cols * 4, path, f"{rows}x{cols} float32 payload")
    return np.frombuffer(payload, dtype="<f4").reshape(rows, cols).astype(F32, copy=True)


def read_bmat(path: str | Path) -> Matrix:
    with open(path, "rb") as fh:
        matrix = read_bmat_from(fh, str(path))
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after BMAT payload")
    return matrix


# ---------------------------------------------------------------------------
# CSV matrices (one header row, comma-separated)


def write_csv_matrix(path: str | Path, matrix: Matrix, columns: list[str] | None = None) -> None:
    arr = _as_matrix_f32(matrix, str(path))
    if columns is None:
        columns = [f"c{j}" for j in range(arr.shape[1])]
    if len(columns) != arr.shape[1]:
        raise ValidationError(
            f"{path}: {len(columns)} column names for {arr.shape[1]} columns"
        )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(columns) + "\n")
        for row in arr:
            fh.write(",".join(f"{v:.9g}" for v in row) + "\n")


def read_csv_matrix(path: str | Path) -> Matrix:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if not header.strip():
            raise FormatError(f"{path}: empty CSV, expected a header row")
        width = len(header.rstrip("\n").split(","))
        rows = []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            cells = line.rstrip("\n").split(",")
            if len(cells) != width:
                raise FormatError(
                    f"{path}:{lineno}: expected {width} cells, got {len(cells)}"
                )
            try:
                rows.append([float(c) for c in cells])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: non-numeric cell ({exc})") from exc
    if not rows:
        raise FormatError(f"{path}: CSV has a header but no data rows")
    return np.asarray(rows, dtype=F32)


def read_matrix(path: str | Path) -> Matrix:
    """Dispatch on extension: .bmat binary, anything else parsed as CSV."""
    if str(path).endswith(".bmat"):
        return read_bmat(path)
    return read_csv_matrix(path)


# ---------------------------------------------------------------------------
# Text lists (one item per line)


def write_text_list(path: str | Path, items: list[str]) -> None:
    for item in items:
        if "\n" in item or "\r" in item:
            raise ValidationError(f"{path}: list item contains a newline: {item!r}")
    with open(path, "w", encoding="utf-8") as fh:
        for item in items:
            fh.write(item + "\n")


def read_text_list(path: str | Path) -> list[str]:
    with open(path, "r", encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# Blob containers (BLPC checkpoints, BLIX indexes)


def container_content_hash(header: dict, blobs: list[tuple[str, Matrix]]) -> str:
    """Hash over the header minus volatile fields, then every blob's bytes."""
    scrubbed = {k: v for k, v in header.items() if k not in ("created", "content_hash")}
    digest = hashlib.sha256(canonical_json(scrubbed).encode("utf-8"))
    for name, matrix in blobs:
        digest.update(bmat_bytes(matrix, name, validate=False))
    return digest.hexdigest()


def write_container(
    path: str | Path, magic: bytes, header: dict, blobs: list[tuple[str, Matrix]]
) -> str:
    """Write a blob container and return its content hash.

    The blob order is recorded in the header; the content hash is computed
    before insertion so it never hashes itself.
    """
    names = [name for name, _ in blobs]
    if len(set(names)) != len(names):
        raise ValidationError(f"{path}: duplicate blob names {names}")
    header = dict(header)
    header["blobs"] = names
    content_hash = container_content_hash(header, blobs)
    header["content_hash"] = content_hash
    header.setdefault("created", None)
    raw = canonical_json(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CONTAINER_HEAD.pack(magic, FORMAT_VERSION, len(raw)))
        fh.write(raw)
        for name, matrix in blobs:
            fh.write(bmat_bytes(matrix, f"{path}:{name}"))
    return content_hash


def read_container(path: str | Path, magic: bytes) -> tuple[dict, dict[str, Matrix]]:
    """Read a blob container, verifying magic, version, and content hash."""
    with open(path, "rb") as fh:
        head = _read_exact(fh, _CONTAINER_HEAD.size, str(path), "container header")
        found, version, header_len = _CONTAINER_HEAD.unpack(head)
        if found != magic:
            raise FormatError(f"{path}: bad magic {found!r}, expected {magic!r}")
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported container version {version}")
        raw = _read_exact(fh, header_len, str(path), "JSON header")
        try:
            header = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: unreadable container header ({exc})") from exc
        names = header.get("blobs")
        if not isinstance(names, list):
            raise FormatError(f"{path}: container header lacks a blob list")
        blobs: dict[str, Matrix] = {}
        for name in names:
            blobs[name] = read_bmat_from(fh, f"{path}:{name}")
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after final blob")
    stored = header.get("content_hash")
    actual = container_content_hash(header, [(n, blobs[n]) for n in names])
    if stored != actual:
        raise FormatError(f"{path}: content hash mismatch (header {stored}, actual {actual})")
    return header, blobs


# ---------------------------------------------------------------------------
# Manifests


@dataclass(frozen=True)
class FileEntry:
    path: str
    format: str
    sha256: str


@dataclass
class Manifest:
    """Paths plus hashes for one dataset, all relative to the manifest file."""

    root: Path
    files: dict[str, FileEntry]
    provenance: dict = field(default_factory=dict)
    splits: dict[str, str] = field(default_factory=dict)

    def resolve(self, role: str) -> Path:
        if role not in self.files:
            raise ValidationError(f"manifest has no '{role}' entry")
        return self.root / self.files[role].path

    def split_manifest(self, label: str) -> Path:
        if label not in self.splits:
            raise ValidationError(f"manifest has no '{label}' split")
        return self.root / self.splits[label]


def _format_tag(path: str) -> str:
    if path.endswith(".bmat"):
        return "bmat"
    if path.endswith(".csv"):
        return "csv"
    return "text"


def build_manifest(
    root: str | Path,
    files: dict[str, str],
    provenance: dict | None = None,
    splits: dict[str, str] | None = None,
) -> Manifest:
    """Hash the named files (paths relative to root) into a Manifest."""
    root = Path(root)
    entries = {}
    for role, rel in files.items():
        target = root / rel
        if not target.is_file():
            raise FormatError(f"manifest file missing: {target}")
        entries[role] = FileEntry(path=rel, format=_format_tag(rel), sha256=sha256_file(target))
    return Manifest(
        root=root,
        files=entries,
        provenance=dict(provenance or {}),
        splits=dict(splits or {}),
    )


def save_manifest(path: str | Path, manifest: Manifest) -> None:
    doc = {
        "kind": MANIFEST_KIND,
        "version": FORMAT_VERSION,
        "files": {
            role: {"path": e.path, "format": e.format, "sha256": e.sha256}
            for role, e in sorted(manifest.files.items())
        },
        "provenance": manifest.provenance,
        "splits": manifest.splits,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def load_manifest(path: str | Path, verify: bool = True) -> Manifest:
    """Load a manifest; with verify, every referenced file must hash-match."""
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise FormatError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid manifest JSON ({exc})") from exc
    if doc.get("kind") != MANIFEST_KIND:
        raise FormatError(f"{path}: not a {MANIFEST_KIND} document")
    files = {}
    for role, entry in doc.get("files", {}).items():
        files[role] = FileEntry(
            path=entry["path"], format=entry["format"], sha256=entry["sha256"]
        )
    manifest = Manifest(
        root=path.parent,
        files=files,
        provenance=doc.get("provenance", {}),
        splits=doc.get("splits", {}),
    )
    if verify:
        for role, entry in manifest.files.items():
            target = manifest.root / entry.path
            if not target.is_file():
                raise FormatError(f"{path}: missing file for '{role}': {target}")
            actual = sha256_file(target)
            if actual != entry.sha256:
                raise FormatError(
                    f"{path}: hash mismatch for '{role}' ({entry.path}): "
                    f"manifest {entry.sha256}, actual {actual}"
                )
    return manifest
