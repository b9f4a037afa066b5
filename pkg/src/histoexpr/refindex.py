"""Reference index, exact k-nearest-neighbor search, and imputation.

Search is exact brute force: squared Euclidean distances in float64 with a
stable sort, so ties always resolve toward the lower reference index.
Queries are embedded with the image tower and answered against reference
embeddings stored in a BLIX container.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import PairedDataset
from .errors import ValidationError
from .io import read_container, write_container
from .linalg import F32, F64, Matrix, as_f32, check_finite
from .model import ModelCheckpoint, encode_expression, encode_image

BLIX_MAGIC = b"BLIX"

SIMPLE = "simple"
AVERAGE = "average"
WEIGHTED = "weighted"
AGGREGATIONS = (SIMPLE, AVERAGE, WEIGHTED)

IMAGE_KEY = "image"
EXPRESSION_KEY = "expression"
INDEX_KEYS = (IMAGE_KEY, EXPRESSION_KEY)

WEIGHT_EPS = 1e-8


@dataclass(frozen=True)
class ImputationConfig:
    k: int = 50
    aggregation: str = AVERAGE

    def __post_init__(self):
        if self.k < 1:
            raise ValidationError(f"k must be >= 1, got {self.k}")
        if self.aggregation not in AGGREGATIONS:
            raise ValidationError(
                f"aggregation {self.aggregation!r} not in {AGGREGATIONS}"
            )


@dataclass
class ReferenceIndex:
    """Immutable after build: embeddings paired with expression profiles."""

    embeddings: Matrix
    expression: Matrix
    checkpoint_hash: str
    gene_names: list[str]
    key: str = IMAGE_KEY

    def __post_init__(self):
        self.embeddings = check_finite(as_f32(self.embeddings), "index embeddings")
        self.expression = check_finite(as_f32(self.expression), "index expression")
        if self.embeddings.shape[0] != self.expression.shape[0]:
            raise ValidationError(
                f"{self.embeddings.shape[0]} embeddings for "
                f"{self.expression.shape[0]} expression rows"
            )
        if self.embeddings.shape[0] == 0:
            raise ValidationError("reference index is empty")
        if len(self.gene_names) != self.expression.shape[1]:
            raise ValidationError(
                f"{len(self.gene_names)} gene names for "
                f"{self.expression.shape[1]} expression columns"
            )
        if self.key not in INDEX_KEYS:
            raise ValidationError(f"index key {self.key!r} not in {INDEX_KEYS}")

    @property
    def n_ref(self) -> int:
        return self.embeddings.shape[0]


def build_index(
    ckpt: ModelCheckpoint,
    reference: PairedDataset,
    key: str = IMAGE_KEY,
    workers: int = 1,
) -> ReferenceIndex:
    """Embed every reference spot; expression is stored as provided."""
    if key == IMAGE_KEY:
        embeddings = encode_image(ckpt, reference.features, workers=workers)
    elif key == EXPRESSION_KEY:
        embeddings = encode_expression(ckpt, reference.expression, workers=workers)
    else:
        raise ValidationError(f"index key {key!r} not in {INDEX_KEYS}")
    return ReferenceIndex(
        embeddings=embeddings,
        expression=reference.expression,
        checkpoint_hash=ckpt.content_hash,
        gene_names=list(reference.gene_names),
        key=key,
    )


def _squared_distances(index: ReferenceIndex, query_emb: np.ndarray) -> np.ndarray:
    ref64 = index.embeddings.astype(F64)
    diff = ref64 - query_emb.astype(F64)
    return np.einsum("ij,ij->i", diff, diff)


def knn(index: ReferenceIndex, query_emb: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices and Euclidean distances of the k nearest references, ascending.

    Exact search; equal distances resolve toward the lower index.
    """
    query = np.asarray(query_emb, dtype=F32).reshape(-1)
    if query.shape[0] != index.embeddings.shape[1]:
        raise ValidationError(
            f"query has {query.shape[0]} dims, index has {index.embeddings.shape[1]}"
        )
    if not 1 <= k <= index.n_ref:
        raise ValidationError(f"k={k} outside [1, {index.n_ref}]")
    d2 = _squared_distances(index, query)
    order = np.argsort(d2, kind="stable")[:k]
    return order, np.sqrt(d2[order])


def _aggregate(index: ReferenceIndex, order: np.ndarray, d2: np.ndarray, cfg: ImputationConfig) -> np.ndarray:
    if cfg.aggregation == SIMPLE:
        return index.expression[order[0]].copy()
    rows = index.expression[order].astype(F64)
    if cfg.aggregation == AVERAGE:
        return rows.mean(axis=0).astype(F32)
    weights = 1.0 / (d2[order] + WEIGHT_EPS)
    weights /= weights.sum()
    return (weights @ rows).astype(F32)


def impute(
    index: ReferenceIndex,
    ckpt: ModelCheckpoint,
    query_feats: Matrix,
    cfg: ImputationConfig,
    workers: int = 1,
) -> Matrix:
    """Predict expression for each query patch from its nearest references.

    simple copies the single nearest profile; average takes the unweighted
    mean of k profiles; weighted uses w ~ 1/(d^2 + 1e-8), so a zero-distance
    neighbor dominates.
    """
    if ckpt.content_hash != index.checkpoint_hash:
        raise ValidationError(
            "checkpoint does not match the one that built this index "
            f"({ckpt.content_hash[:12]} vs {index.checkpoint_hash[:12]})"
        )
    if cfg.k > index.n_ref:
        raise ValidationError(
            f"k={cfg.k} exceeds reference size {index.n_ref}"
        )
    query_emb = encode_image(ckpt, query_feats, workers=workers)
    k = 1 if cfg.aggregation == SIMPLE else cfg.k
    out = np.empty((query_emb.shape[0], index.expression.shape[1]), dtype=F32)
    for i in range(query_emb.shape[0]):
        d2 = _squared_distances(index, query_emb[i])
        order = np.argsort(d2, kind="stable")[:k]
        out[i] = _aggregate(index, order, d2, cfg)
    return check_finite(out, "imputed expression")


def save_index(path: str | Path, index: ReferenceIndex, created: str | None = None) -> str:
    header = {
        "kind": "index",
        "checkpoint_hash": index.checkpoint_hash,
        "n_ref": index.n_ref,
        "h": index.embeddings.shape[1],
        "n_genes": index.expression.shape[1],
        "gene_names": index.gene_names,
        "key": index.key,
    }
    if created is not None:
        header["created"] = created
    blobs = [("embeddings", index.embeddings), ("expression", index.expression)]
    return write_container(path, BLIX_MAGIC, header, blobs)


def load_index(path: str | Path) -> ReferenceIndex:
    header, blobs = read_container(path, BLIX_MAGIC)
    return ReferenceIndex(
        embeddings=blobs["embeddings"],
        expression=blobs["expression"],
        checkpoint_hash=header["checkpoint_hash"],
        gene_names=list(header["gene_names"]),
        key=header.get("key", IMAGE_KEY),
    )
