"""Dense float32 kernels with float64 accumulation.

Matrices are 2-D C-order numpy arrays stored as float32; products and
reductions run in float64 and round back to float32, which keeps batch
sums stable without doubling storage. All kernels are deterministic for
identical inputs; `matmul` with ``workers > 1`` splits independent row
blocks across threads and is bitwise identical to the serial result.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ShapeError, ValidationError

Matrix = np.ndarray

F32 = np.float32
F64 = np.float64


def check_finite(a: Matrix, name: str = "matrix") -> Matrix:
    if not np.isfinite(a).all():
        raise NumericalError(f"{name} contains non-finite entries")
    return a


def as_f32(a, name: str = "matrix") -> Matrix:
    """Coerce to a finite, C-order float32 2-D matrix."""
    out = np.ascontiguousarray(a, dtype=F32)
    if out.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {out.shape}")
    return check_finite(out, name)


def matmul(a: Matrix, b: Matrix, workers: int = 1) -> Matrix:
    """Product of an m x k and a k x n matrix, accumulated in float64."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    a64 = a.astype(F64, copy=False)
    b64 = b.astype(F64, copy=False)
    if workers > 1 and a.shape[0] >= 2 * workers:
        blocks = np.array_split(np.arange(a.shape[0]), workers)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda idx: a64[idx] @ b64, blocks))
        out = np.concatenate(parts, axis=0)
    else:
        out = a64 @ b64
    return out.astype(F32)


def row_softmax(m: Matrix, scale: float = 1.0) -> Matrix:
    """Row-wise softmax of ``scale * m`` with per-row max subtraction."""
    z = np.asarray(m, dtype=F64) * float(scale)
    if z.ndim != 2:
        raise ShapeError(f"row_softmax needs a 2-D matrix, got shape {z.shape}")
    z -= z.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z.astype(F32)


def _logsumexp_rows(z: Matrix) -> Matrix:
    m = z.max(axis=1, keepdims=True)
    return m[:, 0] + np.log(np.exp(z - m).sum(axis=1))


def xent_rows(logits: Matrix, weights: Matrix) -> np.ndarray:
    """Unvalidated kernel: row i is sum_j weights[i,j] * (lse_i - logits[i,j]).

    Equals the soft cross entropy when each weight row sums to 1; callers that
    need arbitrary row weights (e.g. a transposed stochastic matrix) use this
    directly.
    """
    z = np.asarray(logits, dtype=F64)
    w = np.asarray(weights, dtype=F64)
    lse = _logsumexp_rows(z)
    return (w * (lse[:, None] - z)).sum(axis=1)


def soft_cross_entropy(logits: Matrix, targets: Matrix) -> np.ndarray:
    """Per-row cross entropy of row-softmaxed logits against soft targets.

    Row i is -sum_j targets[i, j] * log softmax(logits)[i, j], computed
    through log-sum-exp so no probability is ever passed to log.
    """
    z = np.asarray(logits, dtype=F64)
    t = np.asarray(targets, dtype=F64)
    if z.shape != t.shape or z.ndim != 2:
        raise ShapeError(f"logits/targets shape mismatch: {z.shape} vs {t.shape}")
    row_sums = t.sum(axis=1)
    if np.abs(row_sums - 1.0).max() > 1e-5:
        worst = int(np.abs(row_sums - 1.0).argmax())
        raise ValidationError(
            f"target row {worst} sums to {row_sums[worst]:.6g}, expected 1"
        )
    return xent_rows(z, t)


@dataclass
class AdamWState:
    """Per-parameter AdamW state with decoupled weight decay."""

    m: Matrix
    v: Matrix
    t: int = 0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    @classmethod
    def fresh(cls, shape: tuple[int, ...], lr: float = 0.001, **hyper) -> "AdamWState":
        if lr <= 0:
            raise ValidationError(f"learning rate must be positive, got {lr}")
        return cls(m=np.zeros(shape, dtype=F32), v=np.zeros(shape, dtype=F32), lr=lr, **hyper)


def adamw_step(param: Matrix, grad: Matrix, state: AdamWState) -> Matrix:
    """One AdamW update; returns the new parameter and advances the state.

    param <- param * (1 - lr * weight_decay) - lr * m_hat / (sqrt(v_hat) + eps)
    with the usual bias-corrected first/second moments.
    """
    if param.shape != grad.shape or param.shape != state.m.shape:
        raise ShapeError(
            f"adamw_step shape mismatch: param {param.shape}, grad {grad.shape}, "
            f"state {state.m.shape}"
        )
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    state.m = (b1 * state.m + (1.0 - b1) * grad).astype(F32)
    state.v = (b2 * state.v + (1.0 - b2) * grad * grad).astype(F32)
    # bias corrections as float64 scalars; bX**t underflows float32 for large t
    c1 = 1.0 - float(b1) ** state.t
    c2 = 1.0 - float(b2) ** state.t
    m_hat = state.m.astype(F64) / c1
    v_hat = state.v.astype(F64) / c2
    new = param.astype(F64) * (1.0 - state.lr * state.weight_decay)
    new -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new.astype(F32)
