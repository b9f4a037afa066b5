"""Batch alignment objective for paired image/expression embeddings.

The loss cross-entropies the paired similarity matrix against either a
one-hot target (each row matches itself) or a similarity-smoothed target
built from the two intra-modal similarity matrices, so rows that look
alike within the batch are not forced apart. Gradients are analytic and
treat the target as a constant: nothing flows through the target branch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, ValidationError
from .linalg import F32, F64, Matrix, matmul, row_softmax, xent_rows

SMOOTHED = "smoothed"
ONE_HOT = "one_hot"
OBJECTIVES = (SMOOTHED, ONE_HOT)


@dataclass(frozen=True)
class SimilarityBlock:
    """Paired and intra-modal similarity matrices for one batch.

    cross[i, j] is the dot product of expression embedding i with image
    embedding j; the two internal blocks are symmetric by construction.
    """

    cross: Matrix
    img_internal: Matrix
    expr_internal: Matrix

    @property
    def batch_size(self) -> int:
        return self.cross.shape[0]


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 1.0
    objective: str = SMOOTHED

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValidationError(f"temperature must be positive, got {self.temperature}")
        if self.objective not in OBJECTIVES:
            raise ValidationError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")


@dataclass(frozen=True)
class ContrastiveLoss:
    loss: float
    grad_img: Matrix
    grad_expr: Matrix


def similarities(img_emb: Matrix, expr_emb: Matrix) -> SimilarityBlock:
    """Cross and intra-modal similarity products for one aligned batch."""
    img_emb = np.asarray(img_emb)
    expr_emb = np.asarray(expr_emb)
    if img_emb.shape != expr_emb.shape or img_emb.ndim != 2 or img_emb.shape[0] < 1:
        raise ShapeError(
            f"embeddings must share a B x h shape with B >= 1, "
            f"got {img_emb.shape} and {expr_emb.shape}"
        )
    return SimilarityBlock(
        cross=matmul(expr_emb, img_emb.T),
        img_internal=matmul(img_emb, img_emb.T),
        expr_internal=matmul(expr_emb, expr_emb.T),
    )


def smoothed_targets(block: SimilarityBlock, temperature: float) -> Matrix:
    """Row-stochastic target: softmax of the mean internal similarity, scaled."""
    if temperature <= 0:
        raise ValidationError(f"temperature must be positive, got {temperature}")
    mean_internal = (
        block.img_internal.astype(F64) + block.expr_internal.astype(F64)
    ) / 2.0
    return row_softmax(mean_internal, scale=temperature)


def _targets_for(img64: Matrix, expr64: Matrix, cfg: LossConfig) -> Matrix:
    if cfg.objective == ONE_HOT:
        return np.eye(img64.shape[0], dtype=F64)
    mean_internal = (img64 @ img64.T + expr64 @ expr64.T) / 2.0
    z = mean_internal * cfg.temperature
    z -= z.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


def loss_with_targets(img_emb: Matrix, expr_emb: Matrix, targets: Matrix) -> float:
    """Loss value for a fixed target matrix (the detached-target objective).

    Mean of the 2B per-row cross entropies: rows of the paired similarity
    against the target, plus rows of its transpose against the transposed
    target (whose rows need not sum to 1). Computed fully in float64.
    """
    img64 = np.asarray(img_emb, dtype=F64)
    expr64 = np.asarray(expr_emb, dtype=F64)
    t64 = np.asarray(targets, dtype=F64)
    cross = expr64 @ img64.T
    ce_expr = xent_rows(cross, t64)
    ce_img = xent_rows(cross.T, t64.T)
    return float(0.5 * (ce_expr.mean() + ce_img.mean()))


def contrastive_loss(img_emb: Matrix, expr_emb: Matrix, cfg: LossConfig) -> ContrastiveLoss:
    """Loss and analytic gradients with respect to both embedding matrices."""
    img_emb = np.asarray(img_emb)
    expr_emb = np.asarray(expr_emb)
    if img_emb.shape != expr_emb.shape or img_emb.ndim != 2 or img_emb.shape[0] < 1:
        raise ShapeError(
            f"embeddings must share a B x h shape with B >= 1, "
            f"got {img_emb.shape} and {expr_emb.shape}"
        )
    b = img_emb.shape[0]
    img64 = img_emb.astype(F64)
    expr64 = expr_emb.astype(F64)
    targets = _targets_for(img64, expr64, cfg)
    loss = loss_with_targets(img64, expr64, targets)

    cross = expr64 @ img64.T
    p = _softmax64(cross)
    q = _softmax64(cross.T)
    # d(loss)/d(cross). Rows of the transposed target are weighted by their
    # sums (columns of a row-stochastic matrix do not sum to 1).
    col_sums = targets.sum(axis=0)
    g = ((p - targets) + (col_sums[:, None] * q - targets.T).T) / (2.0 * b)
    grad_expr = (g @ img64).astype(F32)
    grad_img = (g.T @ expr64).astype(F32)
    return ContrastiveLoss(loss=loss, grad_img=grad_img, grad_expr=grad_expr)


def _softmax64(z: Matrix) -> Matrix:
    z = z - z.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z
