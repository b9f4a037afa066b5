"""Metric contracts: Pearson, set averages, GGC, moments, clustering."""

import json

import numpy as np
import pytest

from histoexpr.data import GeneSet
from histoexpr.errors import ValidationError
from histoexpr.metrics import (
    GeneCorrelations,
    build_report,
    cluster_agreement,
    ggc,
    kmeans,
    moment_preservation,
    pearson_per_gene,
    set_average,
    write_report,
)


def cols(*columns):
    return np.array(columns, dtype=np.float32).T


class TestPearsonPerGene:
    def test_identical_small_integer_columns_give_exactly_one(self):
        out = pearson_per_gene(cols([1, 2, 3, 4]), cols([1, 2, 3, 4]))
        assert out.r[0] == 1.0
        assert bool(out.valid[0])

    def test_scaled_column_gives_exactly_one(self):
        out = pearson_per_gene(cols([1, 2, 3]), cols([2, 4, 6]))
        assert out.r[0] == 1.0

    def test_reversed_column_gives_exactly_minus_one(self):
        out = pearson_per_gene(cols([1, 2, 3]), cols([3, 2, 1]))
        assert out.r[0] == -1.0

    def test_hand_value_half(self):
        # xc=(-1,0,1), yc=(-1,1,0): num=1, den=sqrt(2*2)=2
        out = pearson_per_gene(cols([1, 2, 3]), cols([1, 3, 2]))
        assert out.r[0] == pytest.approx(0.5, abs=1e-12)

    def test_constant_column_flagged_invalid(self):
        out = pearson_per_gene(cols([5, 5, 5], [1, 2, 3]), cols([1, 2, 3], [4, 4, 4]))
        assert not out.valid[0] and out.r[0] == 0.0
        assert not out.valid[1] and out.r[1] == 0.0

    def test_affine_invariance(self, rng):
        x = rng.normal(size=(50, 3)).astype(np.float32)
        y = rng.normal(size=(50, 3)).astype(np.float32)
        base = pearson_per_gene(x, y)
        shifted = pearson_per_gene(2.5 * x + 7.0, y)
        np.testing.assert_allclose(shifted.r, base.r, atol=1e-6)
        flipped = pearson_per_gene(-x, y)
        np.testing.assert_allclose(flipped.r, -base.r, atol=1e-6)

    def test_independent_noise_near_zero(self, rng):
        x = rng.normal(size=(10000, 4)).astype(np.float32)
        y = rng.normal(size=(10000, 4)).astype(np.float32)
        assert np.abs(pearson_per_gene(x, y).r).max() < 0.05

    def test_matches_scipy_oracle(self, rng):
        stats = pytest.importorskip("scipy.stats")
        x = rng.uniform(0.0, 4.0, size=(80, 6)).astype(np.float32)
        y = rng.uniform(0.0, 4.0, size=(80, 6)).astype(np.float32)
        out = pearson_per_gene(x, y)
        for j in range(6):
            want = stats.pearsonr(x[:, j].astype(np.float64), y[:, j].astype(np.float64))[0]
            assert out.r[j] == pytest.approx(want, abs=1e-6)

    def test_always_inside_unit_interval(self, rng):
        x = rng.normal(scale=1e-3, size=(30, 20)).astype(np.float32)
        out = pearson_per_gene(x, (x + rng.normal(scale=1e-6, size=x.shape)).astype(np.float32))
        assert np.all(out.r <= 1.0) and np.all(out.r >= -1.0)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValidationError, match="does not match"):
            pearson_per_gene(np.zeros((3, 2), np.float32), np.zeros((3, 3), np.float32))

    def test_single_row_rejected(self):
        with pytest.raises(ValidationError, match="at least 2"):
            pearson_per_gene(np.zeros((1, 2), np.float32), np.zeros((1, 2), np.float32))


class TestSetAverage:
    def make(self, r, valid):
        return GeneCorrelations(r=np.asarray(r, float), valid=np.asarray(valid, bool))

    def test_plain_mean_over_members(self):
        per_gene = self.make([0.2, 0.4, 0.9, -0.1], [True] * 4)
        gs = GeneSet(label="HVG", indices=(0, 2), universe_size=4)
        avg = set_average(per_gene, gs)
        assert avg.value == pytest.approx(0.55, abs=1e-12)
        assert avg.n_valid == 2 and avg.n_excluded == 0

    def test_invalid_members_excluded_and_counted(self):
        per_gene = self.make([0.5, 0.0, 0.7], [True, False, True])
        gs = GeneSet(label="HEG", indices=(0, 1, 2), universe_size=3)
        avg = set_average(per_gene, gs)
        assert avg.value == pytest.approx(0.6, abs=1e-12)
        assert avg.n_valid == 2 and avg.n_excluded == 1

    def test_all_invalid_is_an_error(self):
        per_gene = self.make([0.0, 0.0], [False, False])
        gs = GeneSet(label="MG", indices=(0, 1), universe_size=2)
        with pytest.raises(ValidationError, match="invalid"):
            set_average(per_gene, gs)

    def test_empty_set_is_an_error(self):
        per_gene = self.make([0.1], [True])
        with pytest.raises(ValidationError, match="empty"):
            set_average(per_gene, GeneSet(label="custom", indices=(), universe_size=1))

    def test_universe_mismatch_rejected(self):
        per_gene = self.make([0.1, 0.2], [True, True])
        with pytest.raises(ValidationError, match="correlations over"):
            set_average(per_gene, GeneSet(label="HVG", indices=(0,), universe_size=3))


class TestGgc:
    def test_duplicated_column_correlates_perfectly(self):
        m = ggc(cols([1, 2, 3, 5], [1, 2, 3, 5]))
        np.testing.assert_allclose(m, np.ones((2, 2)), atol=1e-12)

    def test_negated_column_gives_minus_one(self):
        m = ggc(cols([1, 2, 4], [-1, -2, -4]))
        assert m[0, 1] == pytest.approx(-1.0, abs=1e-12)

    def test_single_varying_gene(self):
        np.testing.assert_array_equal(ggc(cols([1, 2, 3])), [[1.0]])

    def test_constant_gene_zeroed_everywhere(self):
        m = ggc(cols([1, 2, 3], [7, 7, 7]))
        assert m[0, 0] == 1.0
        assert m[1, 1] == 0.0
        assert m[0, 1] == 0.0 and m[1, 0] == 0.0

    def test_symmetric_unit_diagonal_bounded(self, rng):
        m = ggc(rng.uniform(0.0, 5.0, size=(40, 8)).astype(np.float32))
        np.testing.assert_array_equal(m, m.T)
        np.testing.assert_allclose(np.diag(m), np.ones(8))
        assert np.all(m >= -1.0) and np.all(m <= 1.0)

    def test_matches_corrcoef_oracle(self, rng):
        x = rng.normal(size=(60, 5)).astype(np.float32)
        want = np.corrcoef(x.astype(np.float64), rowvar=False)
        np.testing.assert_allclose(ggc(x), want, atol=1e-6)

    def test_single_row_rejected(self):
        with pytest.raises(ValidationError, match="at least 2"):
            ggc(np.zeros((1, 3), np.float32))


class TestMomentPreservation:
    def test_perfect_prediction_gives_unit_ratios(self, rng):
        x = rng.uniform(1.0, 5.0, size=(20, 4)).astype(np.float32)
        out = moment_preservation(x, x)
        np.testing.assert_allclose(out.mean_ratio, np.ones(4), atol=1e-6)
        np.testing.assert_allclose(out.var_ratio, np.ones(4), atol=1e-6)

    def test_mean_predictor_zeroes_variance_ratio(self, rng):
        truth = rng.uniform(1.0, 5.0, size=(20, 3)).astype(np.float32)
        pred = np.tile(truth.mean(axis=0), (20, 1)).astype(np.float32)
        out = moment_preservation(pred, truth)
        np.testing.assert_allclose(out.mean_ratio, np.ones(3), atol=1e-6)
        np.testing.assert_allclose(out.var_ratio, np.zeros(3), atol=1e-12)

    def test_doubled_prediction(self):
        truth = cols([1.0, 2.0, 3.0])
        out = moment_preservation(2.0 * truth, truth)
        assert out.mean_ratio[0] == pytest.approx(2.0, abs=1e-6)
        assert out.var_ratio[0] == pytest.approx(4.0, abs=1e-6)

    def test_degenerate_truth_flagged(self):
        truth = cols([0.0, 0.0, 0.0], [3.0, 3.0, 3.0])
        out = moment_preservation(cols([1, 2, 3], [1, 2, 3]), truth)
        assert not out.mean_valid[0] and out.mean_ratio[0] == 0.0
        assert not out.var_valid[1] and out.var_ratio[1] == 0.0
        assert out.mean_valid[1]


class TestKmeans:
    def blobs(self, rng, n_per=30, gap=20.0):
        a = rng.normal(size=(n_per, 2)) + [0.0, 0.0]
        b = rng.normal(size=(n_per, 2)) + [gap, gap]
        return np.vstack([a, b]).astype(np.float32)

    def test_separated_blobs_recovered(self, rng):
        x = self.blobs(rng)
        labels = kmeans(x, 2, seed=0)
        first, second = labels[:30], labels[30:]
        assert len(set(first.tolist())) == 1
        assert len(set(second.tolist())) == 1
        assert first[0] != second[0]

    def test_k_one_collapses(self, rng):
        labels = kmeans(rng.normal(size=(10, 3)).astype(np.float32), 1, seed=0)
        np.testing.assert_array_equal(labels, np.zeros(10, dtype=labels.dtype))

    def test_k_equals_n_separates_distinct_points(self):
        x = (10.0 * np.arange(6, dtype=np.float32))[:, None]
        labels = kmeans(x, 6, seed=3)
        assert len(set(labels.tolist())) == 6

    def test_deterministic_per_seed(self, rng):
        x = rng.normal(size=(50, 4)).astype(np.float32)
        a = kmeans(x, 5, seed=42)
        b = kmeans(x, 5, seed=42)
        np.testing.assert_array_equal(a, b)

    def test_every_cluster_nonempty(self, rng):
        x = rng.normal(size=(40, 3)).astype(np.float32)
        labels = kmeans(x, 6, seed=1)
        assert set(labels.tolist()) == set(range(6))

    def test_k_out_of_range_rejected(self, rng):
        x = rng.normal(size=(5, 2)).astype(np.float32)
        with pytest.raises(ValidationError):
            kmeans(x, 0, seed=0)
        with pytest.raises(ValidationError):
            kmeans(x, 6, seed=0)


def oracle_ari(a, b):
    """Pair-counting route: classify every pair as together/apart in each."""
    n = len(a)
    n11 = n00 = n10 = n01 = 0
    for i in range(n):
        for j in range(i + 1, n):
            same_a = a[i] == a[j]
            same_b = b[i] == b[j]
            if same_a and same_b:
                n11 += 1
            elif same_a:
                n10 += 1
            elif same_b:
                n01 += 1
            else:
                n00 += 1
    num = 2.0 * (n11 * n00 - n10 * n01)
    den = (n11 + n10) * (n10 + n00) + (n11 + n01) * (n01 + n00)
    return 1.0 if den == 0 else num / den


class TestClusterAgreement:
    def test_identical_labelings_perfect(self):
        a = [0, 0, 1, 1, 2, 2]
        ari, nmi = cluster_agreement(a, a)
        assert ari == 1.0 and nmi == 1.0

    def test_renamed_labels_still_perfect(self):
        a = [0, 0, 1, 1, 2, 2]
        b = ["z", "z", "x", "x", "q", "q"]
        ari, nmi = cluster_agreement(a, b)
        assert ari == 1.0 and nmi == 1.0

    def test_single_cluster_vs_split_scores_zero(self):
        a = [0, 0, 0, 0]
        b = [0, 0, 1, 1]
        ari, nmi = cluster_agreement(a, b)
        assert ari == 0.0 and nmi == 0.0

    def test_both_single_cluster_scores_one(self):
        ari, nmi = cluster_agreement([1, 1, 1], [7, 7, 7])
        assert ari == 1.0 and nmi == 1.0

    def test_matches_pair_counting_oracle(self, rng):
        for _ in range(5):
            a = rng.integers(0, 4, size=60)
            b = rng.integers(0, 3, size=60)
            ari, _ = cluster_agreement(a, b)
            assert ari == pytest.approx(oracle_ari(a, b), abs=1e-10)

    def test_matches_sklearn_oracle(self, rng):
        skm = pytest.importorskip("sklearn.metrics")
        for _ in range(5):
            a = rng.integers(0, 5, size=200)
            b = rng.integers(0, 4, size=200)
            ari, nmi = cluster_agreement(a, b)
            assert ari == pytest.approx(skm.adjusted_rand_score(a, b), abs=1e-10)
            assert nmi == pytest.approx(skm.normalized_mutual_info_score(a, b), abs=1e-10)

    def test_independent_labelings_score_near_zero(self, rng):
        a = rng.integers(0, 4, size=2000)
        b = rng.integers(0, 4, size=2000)
        ari, nmi = cluster_agreement(a, b)
        assert abs(ari) < 0.05
        assert nmi < 0.05

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValidationError, match="lengths differ"):
            cluster_agreement([0, 1], [0, 1, 2])

    def test_empty_rejected(self):
        with pytest.raises(ValidationError, match="empty"):
            cluster_agreement([], [])


class TestReport:
    def build(self, rng, n=40, g=6):
        truth = rng.uniform(0.0, 4.0, size=(n, g)).astype(np.float32)
        pred = (truth + rng.normal(scale=0.5, size=(n, g))).astype(np.float32)
        names = [f"gene{j}" for j in range(g)]
        sets = [
            GeneSet(label="HVG", indices=(0, 1, 2), universe_size=g),
            GeneSet(label="HEG", indices=(2, 3), universe_size=g),
        ]
        return pred, truth, names, sets

    def test_report_fields_consistent(self, rng):
        pred, truth, names, sets = self.build(rng)
        report = build_report(pred, truth, names, sets, clusters=3, seed=0)
        assert len(report.correlations) == 6
        assert set(report.set_averages) == {"HVG", "HEG"}
        assert report.ggc_genes == names[:3]
        assert report.ggc_pred.shape == (3, 3)
        assert -1.0 <= report.ari <= 1.0
        assert 0.0 <= report.nmi <= 1.0

    def test_duplicate_set_labels_get_suffixes(self, rng):
        pred, truth, names, _ = self.build(rng)
        sets = [
            GeneSet(label="HVG", indices=(0,), universe_size=6),
            GeneSet(label="HVG", indices=(1,), universe_size=6),
        ]
        report = build_report(pred, truth, names, sets, clusters=2, seed=0)
        assert set(report.set_averages) == {"HVG", "HVG_2"}

    def test_no_sets_uses_all_genes_for_ggc(self, rng):
        pred, truth, names, _ = self.build(rng)
        report = build_report(pred, truth, names, [], clusters=2, seed=0)
        assert report.ggc_pred.shape == (6, 6)
        assert report.set_averages == {}

    def test_written_files_round_trip(self, rng, tmp_path):
        pred, truth, names, sets = self.build(rng)
        report = build_report(pred, truth, names, sets, clusters=3, seed=0)
        written = write_report(report, tmp_path / "report")
        assert [p.name for p in written] == [
            "per_gene_r.csv",
            "set_averages.csv",
            "ggc_pred.csv",
            "ggc_truth.csv",
            "summary.json",
        ]
        lines = (tmp_path / "report" / "per_gene_r.csv").read_text().strip().splitlines()
        assert len(lines) == 1 + 6
        summary = json.loads((tmp_path / "report" / "summary.json").read_text())
        assert summary["n_genes"] == 6
        assert summary["clustering"]["k"] == 3
        assert set(summary["set_averages"]) == {"HVG", "HEG"}

    def test_gene_name_count_mismatch_rejected(self, rng):
        pred, truth, names, sets = self.build(rng)
        with pytest.raises(ValidationError, match="gene names"):
            build_report(pred, truth, names[:-1], sets, clusters=2, seed=0)
