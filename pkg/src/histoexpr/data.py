"""Paired image-feature/expression datasets and gene-set bookkeeping."""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .io import Manifest, build_manifest, load_manifest, read_matrix, read_text_list
from .io import save_manifest, write_bmat, write_text_list
from .linalg import F32, Matrix, as_f32, check_finite

GENE_SET_LABELS = ("MG", "HEG", "HVG", "custom")


@dataclass(frozen=True)
class GeneSet:
    """Distinct gene indices into a fixed gene_names universe."""

    label: str
    indices: tuple[int, ...]
    universe_size: int

    def __post_init__(self):
        if self.label not in GENE_SET_LABELS:
            raise ValidationError(
                f"gene set label {self.label!r} not in {GENE_SET_LABELS}"
            )
        if len(set(self.indices)) != len(self.indices):
            raise ValidationError(f"gene set {self.label}: duplicate indices")
        for idx in self.indices:
            if not 0 <= idx < self.universe_size:
                raise ValidationError(
                    f"gene set {self.label}: index {idx} outside universe "
                    f"of size {self.universe_size}"
                )

    def __len__(self) -> int:
        return len(self.indices)

    def columns(self, matrix: Matrix) -> Matrix:
        if matrix.shape[1] != self.universe_size:
            raise ValidationError(
                f"gene set {self.label}: universe size {self.universe_size} "
                f"does not match matrix with {matrix.shape[1]} columns"
            )
        return matrix[:, list(self.indices)]


def gene_set_from_names(label: str, names: list[str], universe: list[str]) -> GeneSet:
    """Resolve gene names against a universe; unknown names are an error."""
    positions = {gene: i for i, gene in enumerate(universe)}
    missing = [g for g in names if g not in positions]
    if missing:
        raise ValidationError(f"gene set {label}: unknown genes {missing[:5]}")
    return GeneSet(
        label=label,
        indices=tuple(positions[g] for g in names),
        universe_size=len(universe),
    )


@dataclass
class PairedDataset:
    """One spot per row: image-patch features paired with expression."""

    features: Matrix
    expression: Matrix
    gene_names: list[str]
    spot_ids: list[str]
    coords: Matrix | None = None

    def __post_init__(self):
        self.features = check_finite(as_f32(self.features), "features")
        self.expression = check_finite(as_f32(self.expression), "expression")
        n = self.features.shape[0]
        if self.expression.shape[0] != n:
            raise ValidationError(
                f"features have {n} rows but expression has "
                f"{self.expression.shape[0]}"
            )
        if len(self.spot_ids) != n:
            raise ValidationError(f"{len(self.spot_ids)} spot_ids for {n} rows")
        if len(self.gene_names) != self.expression.shape[1]:
            raise ValidationError(
                f"{len(self.gene_names)} gene names for "
                f"{self.expression.shape[1]} expression columns"
            )
        if len(set(self.gene_names)) != len(self.gene_names):
            raise ValidationError("gene names are not unique")
        if self.coords is not None:
            self.coords = check_finite(as_f32(self.coords), "coords")
            if self.coords.shape != (n, 2):
                raise ValidationError(
                    f"coords shape {self.coords.shape}, expected ({n}, 2)"
                )

    @property
    def n_spots(self) -> int:
        return self.features.shape[0]

    @property
    def n_genes(self) -> int:
        return self.expression.shape[1]

    def take(self, rows) -> "PairedDataset":
        rows = np.asarray(rows)
        return replace(
            self,
            features=self.features[rows],
            expression=self.expression[rows],
            spot_ids=[self.spot_ids[i] for i in rows],
            coords=None if self.coords is None else self.coords[rows],
        )


def save_dataset(
    dataset: PairedDataset,
    out_dir: str | Path,
    provenance: dict | None = None,
    splits: dict[str, str] | None = None,
) -> Path:
    """Write BMAT/text files plus manifest.json under out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_bmat(out_dir / "features.bmat", dataset.features)
    write_bmat(out_dir / "expression.bmat", dataset.expression)
    write_text_list(out_dir / "gene_names.txt", dataset.gene_names)
    write_text_list(out_dir / "spot_ids.txt", dataset.spot_ids)
    files = {
        "features": "features.bmat",
        "expression": "expression.bmat",
        "gene_names": "gene_names.txt",
        "spot_ids": "spot_ids.txt",
    }
    if dataset.coords is not None:
        write_bmat(out_dir / "coords.bmat", dataset.coords)
        files["coords"] = "coords.bmat"
    manifest = build_manifest(out_dir, files, provenance=provenance, splits=splits)
    path = out_dir / "manifest.json"
    save_manifest(path, manifest)
    return path


def load_dataset(manifest: str | Path | Manifest, verify: bool = True) -> PairedDataset:
    if not isinstance(manifest, Manifest):
        manifest = load_manifest(manifest, verify=verify)
    coords = None
    if "coords" in manifest.files:
        coords = read_matrix(manifest.resolve("coords"))
    return PairedDataset(
        features=read_matrix(manifest.resolve("features")),
        expression=read_matrix(manifest.resolve("expression")),
        gene_names=read_text_list(manifest.resolve("gene_names")),
        spot_ids=read_text_list(manifest.resolve("spot_ids")),
        coords=coords,
    )
