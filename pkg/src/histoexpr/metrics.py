"""Evaluation metrics: per-gene correlation, moment ratios, GGC, clustering.

Degenerate columns (zero variance in either input) never produce NaN: they
get r = 0 with a cleared validity flag, and set averages skip them while
reporting how many were skipped.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import GeneSet
from .errors import ValidationError
from .linalg import F64, Matrix, as_f32, check_finite

KMEANS_TOL = 1e-4
KMEANS_MAX_ITER = 100


@dataclass(frozen=True)
class GeneCorrelations:
    r: np.ndarray
    valid: np.ndarray

    def __len__(self) -> int:
        return self.r.shape[0]


@dataclass(frozen=True)
class SetAverage:
    value: float
    n_valid: int
    n_excluded: int


def _checked_pair(pred: Matrix, truth: Matrix, min_rows: int = 2):
    pred = check_finite(as_f32(pred), "pred")
    truth = check_finite(as_f32(truth), "truth")
    if pred.shape != truth.shape:
        raise ValidationError(
            f"pred shape {pred.shape} does not match truth shape {truth.shape}"
        )
    if pred.shape[0] < min_rows:
        raise ValidationError(f"need at least {min_rows} rows, got {pred.shape[0]}")
    return pred.astype(F64), truth.astype(F64)


def pearson_per_gene(pred: Matrix, truth: Matrix) -> GeneCorrelations:
    """Column-wise Pearson r; zero-variance columns give r=0, flagged invalid."""
    x, y = _checked_pair(pred, truth)
    valid = (np.ptp(x, axis=0) > 0) & (np.ptp(y, axis=0) > 0)
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    num = (xc * yc).sum(axis=0)
    den = np.sqrt((xc * xc).sum(axis=0) * (yc * yc).sum(axis=0))
    r = np.zeros(x.shape[1])
    safe = np.where(valid, den, 1.0)
    r[valid] = np.clip(num[valid] / safe[valid], -1.0, 1.0)
    return GeneCorrelations(r=r, valid=valid)


def set_average(per_gene: GeneCorrelations, gene_set: GeneSet) -> SetAverage:
    """Mean r over the set's valid genes; all-invalid set is an error."""
    if gene_set.universe_size != len(per_gene):
        raise ValidationError(
            f"gene set over {gene_set.universe_size} genes, "
            f"correlations over {len(per_gene)}"
        )
    idx = list(gene_set.indices)
    if not idx:
        raise ValidationError(f"gene set {gene_set.label} is empty")
    mask = per_gene.valid[idx]
    kept = np.asarray(idx)[mask]
    if kept.size == 0:
        raise ValidationError(
            f"gene set {gene_set.label}: every gene is flagged invalid"
        )
    return SetAverage(
        value=float(per_gene.r[kept].mean()),
        n_valid=int(kept.size),
        n_excluded=int(len(idx) - kept.size),
    )


def ggc(expr: Matrix) -> Matrix:
    """Gene-gene Pearson matrix: symmetric, diagonal 1 for varying genes."""
    mat = check_finite(as_f32(expr), "expression")
    if mat.shape[0] < 2:
        raise ValidationError(f"GGC needs at least 2 rows, got {mat.shape[0]}")
    x = mat.astype(F64)
    valid = np.ptp(x, axis=0) > 0
    xc = x - x.mean(axis=0)
    norms = np.sqrt((xc * xc).sum(axis=0))
    xc[:, valid] /= norms[valid]
    xc[:, ~valid] = 0.0
    corr = xc.T @ xc
    corr = np.clip((corr + corr.T) / 2.0, -1.0, 1.0)
    corr[~valid, :] = 0.0
    corr[:, ~valid] = 0.0
    np.fill_diagonal(corr, np.where(valid, 1.0, 0.0))
    return corr


@dataclass(frozen=True)
class MomentRatios:
    mean_ratio: np.ndarray
    var_ratio: np.ndarray
    mean_valid: np.ndarray
    var_valid: np.ndarray


def moment_preservation(pred: Matrix, truth: Matrix) -> MomentRatios:
    """Per-gene predicted/truth mean and variance ratios (population variance)."""
    x, y = _checked_pair(pred, truth, min_rows=1)
    mean_t = y.mean(axis=0)
    var_t = y.var(axis=0)
    mean_valid = mean_t != 0
    var_valid = var_t != 0
    mean_ratio = np.zeros(x.shape[1])
    var_ratio = np.zeros(x.shape[1])
    mean_ratio[mean_valid] = x.mean(axis=0)[mean_valid] / mean_t[mean_valid]
    var_ratio[var_valid] = x.var(axis=0)[var_valid] / var_t[var_valid]
    return MomentRatios(
        mean_ratio=mean_ratio,
        var_ratio=var_ratio,
        mean_valid=mean_valid,
        var_valid=var_valid,
    )


def _nearest_squared(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - centers[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def kmeans(rows: Matrix, k: int, seed: int) -> np.ndarray:
    """Seeded k-means++ then Lloyd iterations; deterministic per seed."""
    x = check_finite(as_f32(rows), "kmeans input").astype(F64)
    n = x.shape[0]
    if not 1 <= k <= n:
        raise ValidationError(f"k={k} outside [1, {n}]")
    rng = np.random.default_rng(seed)

    centers = np.empty((k, x.shape[1]))
    first = int(rng.integers(n))
    centers[0] = x[first]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            idx = int(rng.integers(n))
        centers[j] = x[idx]
        d2 = np.minimum(d2, ((x - centers[j]) ** 2).sum(axis=1))

    labels = np.zeros(n, dtype=np.int64)
    for _ in range(KMEANS_MAX_ITER):
        dist = _nearest_squared(x, centers)
        labels = dist.argmin(axis=1)
        new_centers = centers.copy()
        for j in range(k):
            members = labels == j
            if members.any():
                new_centers[j] = x[members].mean(axis=0)
        # Re-seed any empty cluster with the worst-fit point.
        own = dist[np.arange(n), labels]
        for j in range(k):
            if not (labels == j).any():
                worst = int(own.argmax())
                new_centers[j] = x[worst]
                own[worst] = -1.0
        movement = np.sqrt(((new_centers - centers) ** 2).sum(axis=1)).max()
        centers = new_centers
        if movement < KMEANS_TOL:
            break
    return _nearest_squared(x, centers).argmin(axis=1)


def _contingency(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    return table


def _pairs(counts: np.ndarray) -> int:
    c = counts.astype(object)
    return int((c * (c - 1) // 2).sum())


def _entropy(counts: np.ndarray, n: int) -> float:
    p = counts[counts > 0] / n
    return float(-(p * np.log(p)).sum())


def cluster_agreement(a, b) -> tuple[float, float]:
    """Adjusted Rand index (permutation model) and arithmetic-mean NMI."""
    a = np.asarray(a).reshape(-1)
    b = np.asarray(b).reshape(-1)
    if a.shape != b.shape:
        raise ValidationError(f"label lengths differ: {a.shape[0]} vs {b.shape[0]}")
    n = a.shape[0]
    if n == 0:
        raise ValidationError("empty labelings")
    table = _contingency(a, b)
    row_sums = table.sum(axis=1)
    col_sums = table.sum(axis=0)

    sum_cells = _pairs(table.reshape(-1))
    sum_rows = _pairs(row_sums)
    sum_cols = _pairs(col_sums)
    total = n * (n - 1) // 2
    if total == 0:
        ari = 1.0
    else:
        expected = sum_rows * sum_cols / total
        max_index = (sum_rows + sum_cols) / 2.0
        ari = 1.0 if max_index == expected else (sum_cells - expected) / (max_index - expected)

    h_a = _entropy(row_sums, n)
    h_b = _entropy(col_sums, n)
    if h_a == 0.0 and h_b == 0.0:
        nmi = 1.0
    elif h_a == 0.0 or h_b == 0.0:
        nmi = 0.0
    else:
        nz = table > 0
        p = table[nz] / n
        outer = (row_sums[:, None] * col_sums[None, :])[nz] / (n * n)
        mi = float((p * np.log(p / outer)).sum())
        nmi = float(np.clip(mi / ((h_a + h_b) / 2.0), 0.0, 1.0))
    return float(ari), float(nmi)


@dataclass
class MetricsReport:
    gene_names: list[str]
    correlations: GeneCorrelations
    moments: MomentRatios
    set_averages: dict[str, SetAverage]
    ggc_genes: list[str]
    ggc_pred: Matrix
    ggc_truth: Matrix
    ari: float
    nmi: float
    n_clusters: int
    warnings: list[str] = field(default_factory=list)


def build_report(
    pred: Matrix,
    truth: Matrix,
    gene_names: list[str],
    sets: list[GeneSet],
    clusters: int,
    seed: int,
    ggc_set: GeneSet | None = None,
) -> MetricsReport:
    """Full evaluation of predictions against held-out truth."""
    if len(gene_names) != pred.shape[1]:
        raise ValidationError(
            f"{len(gene_names)} gene names for {pred.shape[1]} prediction columns"
        )
    correlations = pearson_per_gene(pred, truth)
    moments = moment_preservation(pred, truth)
    averages: dict[str, SetAverage] = {}
    for gs in sets:
        key = gs.label
        suffix = 2
        while key in averages:
            key = f"{gs.label}_{suffix}"
            suffix += 1
        averages[key] = set_average(correlations, gs)

    if ggc_set is None and sets:
        ggc_set = sets[0]
    if ggc_set is not None:
        idx = list(ggc_set.indices)
        ggc_names = [gene_names[i] for i in idx]
        ggc_pred = ggc(pred[:, idx])
        ggc_truth = ggc(truth[:, idx])
    else:
        ggc_names = list(gene_names)
        ggc_pred = ggc(pred)
        ggc_truth = ggc(truth)

    labels_pred = kmeans(pred, clusters, seed)
    labels_truth = kmeans(truth, clusters, seed)
    ari, nmi = cluster_agreement(labels_pred, labels_truth)
    return MetricsReport(
        gene_names=list(gene_names),
        correlations=correlations,
        moments=moments,
        set_averages=averages,
        ggc_genes=ggc_names,
        ggc_pred=ggc_pred,
        ggc_truth=ggc_truth,
        ari=ari,
        nmi=nmi,
        n_clusters=clusters,
    )


def _write_square_csv(path: Path, names: list[str], matrix: Matrix) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("gene," + ",".join(names) + "\n")
        for name, row in zip(names, matrix):
            fh.write(name + "," + ",".join(f"{v:.10g}" for v in row) + "\n")


def write_report(report: MetricsReport, out_dir: str | Path) -> list[Path]:
    """Emit per_gene_r.csv, set_averages.csv, GGC tables, and summary.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    path = out_dir / "per_gene_r.csv"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("gene,r,valid,mean_ratio,mean_valid,var_ratio,var_valid\n")
        for j, name in enumerate(report.gene_names):
            fh.write(
                f"{name},{report.correlations.r[j]:.10g},"
                f"{int(report.correlations.valid[j])},"
                f"{report.moments.mean_ratio[j]:.10g},"
                f"{int(report.moments.mean_valid[j])},"
                f"{report.moments.var_ratio[j]:.10g},"
                f"{int(report.moments.var_valid[j])}\n"
            )
    written.append(path)

    path = out_dir / "set_averages.csv"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("set,mean_r,n_valid,n_excluded\n")
        for label, avg in sorted(report.set_averages.items()):
            fh.write(f"{label},{avg.value:.10g},{avg.n_valid},{avg.n_excluded}\n")
    written.append(path)

    for name, matrix in (("ggc_pred", report.ggc_pred), ("ggc_truth", report.ggc_truth)):
        path = out_dir / f"{name}.csv"
        _write_square_csv(path, report.ggc_genes, matrix)
        written.append(path)

    path = out_dir / "summary.json"
    summary = {
        "set_averages": {
            label: {"mean_r": avg.value, "n_valid": avg.n_valid, "n_excluded": avg.n_excluded}
            for label, avg in sorted(report.set_averages.items())
        },
        "clustering": {"ari": report.ari, "nmi": report.nmi, "k": report.n_clusters},
        "n_genes": len(report.gene_names),
        "warnings": report.warnings,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    written.append(path)
    return written
