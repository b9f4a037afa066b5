"""Expression normalization and highly-variable / highly-expressed gene picks.

Normalization scales each spot to a fixed total count and applies log1p.
HVG selection runs on the pre-log scaled counts: per-gene dispersion
(variance over mean) is z-scored within 20 equal-frequency mean bins so
genes compete against peers of similar abundance.
"""

from __future__ import annotations

import numpy as np

from .data import GeneSet
from .errors import ValidationError
from .linalg import F32, F64, Matrix, as_f32, check_finite

HVG_BINS = 20


def _check_counts(raw: Matrix, spot_ids: list[str] | None) -> Matrix:
    raw = check_finite(as_f32(raw), "raw counts")
    if raw.min() < 0:
        raise ValidationError("raw counts contain negative values")
    sums = raw.astype(F64).sum(axis=1)
    zero = np.flatnonzero(sums == 0.0)
    if zero.size:
        if spot_ids is not None:
            offenders = [spot_ids[i] for i in zero[:5]]
        else:
            offenders = [f"row {i}" for i in zero[:5]]
        raise ValidationError(
            f"{zero.size} spots have zero total counts, e.g. {offenders}"
        )
    return raw


def scale_to_total(
    raw_counts: Matrix, target_sum: float = 1e4, spot_ids: list[str] | None = None
) -> Matrix:
    """Scale every row to sum target_sum (pre-log normalized counts)."""
    if target_sum <= 0:
        raise ValidationError(f"target_sum must be positive, got {target_sum}")
    raw = _check_counts(raw_counts, spot_ids)
    raw64 = raw.astype(F64)
    scaled = raw64 * (target_sum / raw64.sum(axis=1, keepdims=True))
    return scaled.astype(F32)


def normalize(
    raw_counts: Matrix, target_sum: float = 1e4, spot_ids: list[str] | None = None
) -> Matrix:
    """Total-count scale each spot, then log1p element-wise."""
    scaled = scale_to_total(raw_counts, target_sum, spot_ids)
    return np.log1p(scaled.astype(F64)).astype(F32)


def _expressed_columns(matrix: Matrix) -> np.ndarray:
    return np.flatnonzero(matrix.astype(F64).max(axis=0) > 0.0)


def _column_moments(mat64: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-column mean and population variance, invariant to row order.

    Columns are sorted before summation so the reduction order is a
    function of the values alone, never of how the spots were stored.
    """
    ordered = np.sort(mat64, axis=0)
    means = ordered.sum(axis=0) / ordered.shape[0]
    centered = ordered - means
    variances = (centered * centered).sum(axis=0) / ordered.shape[0]
    return means, variances


def select_hvg(normalized_pre_log_counts: Matrix, n: int) -> GeneSet:
    """Top n genes by binned dispersion z-score, most variable first.

    Dispersion is var/mean on the pre-log scaled counts.  Genes are split
    into 20 equal-frequency mean bins (fewer when that would leave under
    three genes per bin) and z-scored within each bin; constant genes rank
    below every varying gene, and unexpressed genes are never eligible.
    Ties break toward the lower gene index.
    """
    mat = check_finite(as_f32(normalized_pre_log_counts), "normalized counts")
    if mat.shape[0] < 2:
        raise ValidationError("HVG selection needs at least 2 spots")
    n_genes = mat.shape[1]
    expressed = _expressed_columns(mat)
    if n > expressed.size:
        raise ValidationError(
            f"asked for {n} variable genes but only {expressed.size} are expressed"
        )
    if n < 1:
        raise ValidationError(f"gene count must be at least 1, got {n}")

    means, variances = _column_moments(mat.astype(F64))
    dispersion = np.zeros(n_genes)
    dispersion[expressed] = variances[expressed] / means[expressed]

    # Equal-frequency mean bins over expressed genes only.
    order = np.lexsort((expressed, means[expressed]))
    ranked = expressed[order]
    n_bins = max(1, min(HVG_BINS, ranked.size // 3))
    z = np.zeros(n_genes)
    for chunk in np.array_split(ranked, n_bins):
        d = dispersion[chunk]
        spread = d.std()
        if spread > 0:
            z[chunk] = (d - d.mean()) / spread

    varying = (variances > 0).astype(F64)
    # lexsort sorts ascending by last key first; negate for descending,
    # leaving gene index as the final tie-break.
    pick = expressed[np.lexsort((expressed, -z[expressed], -varying[expressed]))][:n]
    return GeneSet(label="HVG", indices=tuple(int(i) for i in pick), universe_size=n_genes)


def select_heg(normalized: Matrix, n: int) -> GeneSet:
    """Top n genes by mean normalized expression, highest first."""
    mat = check_finite(as_f32(normalized), "normalized expression")
    n_genes = mat.shape[1]
    expressed = _expressed_columns(mat)
    if n > expressed.size:
        raise ValidationError(
            f"asked for {n} expressed genes but only {expressed.size} are expressed"
        )
    if n < 1:
        raise ValidationError(f"gene count must be at least 1, got {n}")
    means, _ = _column_moments(mat.astype(F64))
    pick = expressed[np.lexsort((expressed, -means[expressed]))][:n]
    return GeneSet(label="HEG", indices=tuple(int(i) for i in pick), universe_size=n_genes)


def hvg_union(per_slice_sets: list[GeneSet]) -> GeneSet:
    """Union of per-slice gene sets, indices ascending."""
    if not per_slice_sets:
        raise ValidationError("hvg_union needs at least one gene set")
    universe = per_slice_sets[0].universe_size
    for gene_set in per_slice_sets:
        if gene_set.universe_size != universe:
            raise ValidationError(
                f"gene universes differ: {gene_set.universe_size} vs {universe}"
            )
    merged = sorted(set().union(*(gs.indices for gs in per_slice_sets)))
    return GeneSet(label="HVG", indices=tuple(merged), universe_size=universe)
