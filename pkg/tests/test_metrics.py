"""Expression-accuracy metrics, DE testing and the evaluation report."""

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from celldiff import metrics as mt


def brute_pds(pred, true, dist):
    ids = sorted(pred)
    M = len(ids)
    total = 0
    for lam in ids:
        own = dist(pred[lam], true[lam])
        total += sum(1 for p in ids if p != lam and dist(pred[lam], true[p]) < own)
    return 1 - total / M / M


def brute_auroc(labels, scores):
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    wins = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a in pos for b in neg)
    return wins / (len(pos) * len(neg))


def brute_exact_p(x, y):
    pooled = np.concatenate([x, y])
    ranks = stats.rankdata(pooled)
    n, n1 = len(pooled), len(x)
    mu = n1 * (n + 1) / 2
    obs = abs(ranks[:n1].sum() - mu)
    combos = list(itertools.combinations(range(n), n1))
    return sum(abs(ranks[list(c)].sum() - mu) >= obs - 1e-9 for c in combos) / len(combos)


L1 = lambda a, b: np.abs(a - b).sum()  # noqa: E731


class TestDeltas:
    def test_equal_sets(self):
        X = np.random.default_rng(0).random((5, 3))
        np.testing.assert_array_equal(mt.pseudobulk_delta(X, X), 0.0)

    def test_single_cells(self):
        np.testing.assert_allclose(mt.pseudobulk_delta([[1.0, 2.0]], [[0.5, 3.0]]), [0.5, -1.0])

    def test_multiplicity(self):
        a, b = np.array([1.0, 0.0]), np.array([0.0, 4.0])
        np.testing.assert_allclose(mt.pseudobulk_delta([a, a, a, b], [[0.0, 0.0]]), 0.75 * a + 0.25 * b)

    def test_empty(self):
        with pytest.raises(ValueError):
            mt.pseudobulk_delta(np.zeros((0, 2)), np.ones((1, 2)))


class TestPDS:
    def test_perfect(self):
        true = {i: np.eye(4)[i] for i in range(4)}
        assert mt.pds(dict(true), true) == 1.0

    def test_hand_instance(self):
        true = {"a": np.array([0.0, 0.0]), "b": np.array([1.0, 0.0]), "c": np.array([5.0, 5.0])}
        pred = {"a": np.array([0.9, 0.0]), "b": np.array([1.0, 0.1]), "c": np.array([5.0, 5.0])}
        assert mt.pds_ranks(pred, true)["a"] == 1
        assert mt.pds(pred, true) == pytest.approx(1 - 1 / 9)
        assert mt.pds(pred, true) == pytest.approx(brute_pds(pred, true, L1))

    def test_ties_do_not_count(self):
        true = {"a": np.array([0.0]), "b": np.array([2.0])}
        pred = {"a": np.array([1.0]), "b": np.array([2.0])}
        assert mt.pds(pred, true) == 1.0

    def test_random_predictions_near_chance(self):
        rng = np.random.default_rng(0)
        M, vals = 10, []
        for _ in range(400):
            true = {i: rng.standard_normal(5) for i in range(M)}
            pred = {i: rng.standard_normal(5) for i in range(M)}
            vals.append(mt.pds(pred, true))
        assert np.mean(vals) == pytest.approx(0.5 + 1 / (2 * M), abs=0.02)

    @pytest.mark.parametrize("dist", mt.DISTANCES)
    def test_matches_brute_force_and_relabeling(self, dist):
        rng = np.random.default_rng(1)
        fn = {"l1": L1, "l2": lambda a, b: np.linalg.norm(a - b),
              "cosine": lambda a, b: 1 - a @ b / np.linalg.norm(a) / np.linalg.norm(b)}[dist]
        true = {f"p{i}": rng.standard_normal(4) for i in range(6)}
        pred = {k: v + 0.8 * rng.standard_normal(4) for k, v in true.items()}
        value = mt.pds(pred, true, dist)
        assert value == pytest.approx(brute_pds(pred, true, fn), abs=1e-12)
        perm = dict(zip(true, rng.permutation(list(true))))
        assert mt.pds({perm[k]: v for k, v in pred.items()}, {perm[k]: v for k, v in true.items()}, dist) == value

    def test_errors(self):
        with pytest.raises(ValueError):
            mt.pds({"a": np.ones(2)}, {"b": np.ones(2)})
        with pytest.raises(ValueError):
            mt.pds({"a": np.ones(2)}, {"a": np.ones(2)})
        with pytest.raises(ValueError):
            mt.pds({"a": np.ones(2), "b": np.ones(2)}, {"a": np.ones(2), "b": np.ones(2)}, "hamming")


class TestAccuracy:
    def test_perfect(self):
        true = {"a": np.array([1.0, 2.0, 0.5]), "b": np.array([-1.0, 0.0, 3.0])}
        assert mt.pdcorr(true, true) == (1.0, 0)
        assert mt.mae(true, true) == 0.0 and mt.mse(true, true) == 0.0
        assert mt.r2_score(true["a"], true["a"]) == 1.0

    def test_constant_offset(self):
        rng = np.random.default_rng(2)
        true = {k: rng.standard_normal(5) for k in "abc"}
        v = np.array([0.1, -0.2, 0.3, 0.0, 0.4])
        pred = {k: t + v for k, t in true.items()}
        assert mt.mae(pred, true) == pytest.approx(np.abs(v).sum())
        assert mt.mse(pred, true) == pytest.approx((v**2).sum())
        scalar = {k: t + 0.7 for k, t in true.items()}
        assert mt.pdcorr(scalar, true)[0] == pytest.approx(1.0)

    def test_anti_correlated(self):
        assert mt.pdcorr({"a": [1.0, 2.0, 3.0]}, {"a": [3.0, 2.0, 1.0]})[0] == pytest.approx(-1.0)

    def test_zero_variance_skipped(self):
        value, skipped = mt.pdcorr({"a": [1.0, 1.0, 1.0], "b": [1.0, 2.0, 3.0]},
                                   {"a": [1.0, 2.0, 3.0], "b": [2.0, 4.0, 6.0]})
        assert value == pytest.approx(1.0) and skipped == 1


class TestWilcoxon:
    def test_exact_separated(self):
        assert mt.wilcoxon_rank_sum([1, 2, 3], [4, 5, 6]) == pytest.approx(0.1)

    def test_identical_samples(self):
        assert mt.wilcoxon_rank_sum([1, 2, 3], [1, 2, 3]) == 1.0

    def test_exact_matches_enumeration_with_ties(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            x, y = rng.integers(0, 4, 4).astype(float), rng.integers(0, 4, 5).astype(float)
            assert mt.wilcoxon_rank_sum(x, y) == pytest.approx(brute_exact_p(x, y))

    def test_normal_close_to_exact_on_all_splits_of_eight(self):
        values = np.arange(8.0)
        worst = 0.0
        for combo in itertools.combinations(range(8), 4):
            rest = [i for i in range(8) if i not in combo]
            x, y = values[list(combo)], values[rest]
            worst = max(worst, abs(mt.wilcoxon_rank_sum(x, y, exact=True) - mt.wilcoxon_rank_sum(x, y, exact=False)))
        assert worst < 0.05

    def test_normal_matches_scipy(self):
        rng = np.random.default_rng(4)
        x, y = rng.integers(0, 6, 30).astype(float), rng.integers(1, 7, 25).astype(float)
        ref = stats.mannwhitneyu(x, y, alternative="two-sided", method="asymptotic", use_continuity=True).pvalue
        assert mt.wilcoxon_rank_sum(x, y) == pytest.approx(ref, rel=1e-10)

    def test_gene_vectorised_matches_scalar(self):
        rng = np.random.default_rng(5)
        A, B = rng.random((12, 4)), rng.random((9, 4)) + 0.2
        p = mt.wilcoxon_genes(A, B)
        np.testing.assert_allclose(p, [mt.wilcoxon_rank_sum(A[:, g], B[:, g]) for g in range(4)], rtol=1e-12)

    def test_all_tied(self):
        assert mt.wilcoxon_rank_sum(np.zeros(20), np.zeros(20)) == 1.0

    def test_empty(self):
        with pytest.raises(ValueError):
            mt.wilcoxon_rank_sum([], [1.0])


class TestBH:
    def test_single(self):
        np.testing.assert_array_equal(mt.bh_adjust([0.03]), [0.03])

    def test_hand(self):
        np.testing.assert_allclose(mt.bh_adjust([0.01, 0.02, 0.03, 0.04]), 0.04)

    def test_constant(self):
        np.testing.assert_allclose(mt.bh_adjust([0.2] * 5), 0.2)

    def test_matches_scipy_and_order(self):
        p = np.random.default_rng(6).random(30) ** 2
        np.testing.assert_allclose(mt.bh_adjust(p), stats.false_discovery_control(p, method="bh"), rtol=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=12), st.data())
    def test_monotone_and_bounds(self, p, data):
        q = mt.bh_adjust(p)
        assert np.all(q >= np.asarray(p) - 1e-15) and np.all(q <= 1)
        i = data.draw(st.integers(0, len(p) - 1))
        raised = list(p)
        raised[i] = data.draw(st.floats(p[i], 1))
        assert np.all(mt.bh_adjust(raised) >= q - 1e-15)


class TestDE:
    def test_identical_no_calls(self):
        X = np.random.default_rng(7).random((4, 6))
        de = mt.de_analysis(X, X)
        assert de.n_significant == 0
        np.testing.assert_array_equal(de.pvals, 1.0)

    def test_zero_means_log_fold_change(self):
        de = mt.de_analysis(np.zeros((3, 2)), np.zeros((3, 2)))
        np.testing.assert_array_equal(de.logfc, 0.0)

    def test_planted_gene_and_fdr(self):
        rng = np.random.default_rng(8)
        fp, found = [], 0
        for _ in range(100):
            ctrl = 20 + rng.standard_normal((50, 20))
            pert = 20 + rng.standard_normal((50, 20))
            pert[:, 0] += 10
            de = mt.de_analysis(pert, ctrl)
            found += de.significant[0]
            fp.append(de.significant[1:].sum() / max(de.n_significant, 1))
        assert found == 100
        assert np.mean(fp) <= 0.08

    def test_invariants(self):
        rng = np.random.default_rng(9)
        de = mt.de_analysis(rng.random((30, 10)) + np.linspace(0, 0.5, 10), rng.random((30, 10)))
        assert np.all((de.pvals >= 0) & (de.pvals <= 1))
        assert np.all(de.padj >= de.pvals - 1e-15)


def de_table(logfc, significant):
    logfc = np.asarray(logfc, float)
    sig = np.asarray(significant, bool)
    padj = np.where(sig, 0.01, 0.5)
    return mt.DEResult(pvals=padj, padj=padj, logfc=logfc, significant=sig)


class TestDEAgreement:
    def test_identical(self):
        t = de_table([1, -2, 3, 0.1], [1, 1, 1, 0])
        assert mt.de_overlap_precision(t, t) == (1.0, 1.0)
        assert mt.dir_agreement(t, t) == 1.0
        assert mt.lfc_spearman(t, t) == pytest.approx(1.0)

    def test_disjoint(self):
        t = de_table([1, 1, 0, 0], [1, 1, 0, 0])
        p = de_table([0, 0, 1, 1], [0, 0, 1, 1])
        assert mt.de_overlap_precision(t, p) == (0.0, 0.0)

    def test_half_overlap(self):
        t = de_table([4, 3, 2, 1, 0, 0, 0, 0], [1, 1, 1, 1, 0, 0, 0, 0])
        p = de_table([4, 0, 2, 0, 3, 1, 0, 0], [1, 0, 1, 0, 1, 1, 0, 0])
        over, prec = mt.de_overlap_precision(t, p)
        assert over == 0.5
        assert prec == len({0, 1, 2, 3} & {0, 2, 4, 5}) / 4

    def test_negated(self):
        t = de_table([1, -2, 3], [1, 1, 1])
        p = de_table([-1, 2, -3], [1, 1, 1])
        assert mt.dir_agreement(t, p) == 0.0
        assert mt.lfc_spearman(t, p) == pytest.approx(-1.0)

    def test_constant_prediction_undefined(self):
        t = de_table([1, -2, 3], [1, 1, 1])
        assert math.isnan(mt.lfc_spearman(t, de_table([1, 1, 1], [0, 0, 0])))
        assert math.isnan(mt.dir_agreement(t, de_table([1, 1, 1], [0, 0, 0])))

    def test_no_truth_calls(self):
        t = de_table([1, 2], [0, 0])
        over, prec = mt.de_overlap_precision(t, t)
        assert math.isnan(over) and math.isnan(prec)


class TestRanking:
    def test_separating(self):
        assert mt.auroc_auprc([0, 0, 1, 1], [0.1, 0.2, 0.8, 0.9]) == (1.0, 1.0)

    def test_all_equal(self):
        assert mt.auroc([0, 1, 0, 1], [3.0] * 4) == 0.5

    def test_six_gene_hand(self):
        labels, scores = [1, 0, 1, 0, 0, 1], [0.9, 0.9, 0.2, 0.5, 0.1, 0.6]
        assert mt.auroc(labels, scores) == pytest.approx(brute_auroc(labels, scores))

    def test_exhaustive_small_inputs(self):
        rng = np.random.default_rng(10)
        for n in range(2, 13):
            for _ in range(30):
                labels = rng.integers(0, 2, n)
                if labels.min() == labels.max():
                    continue
                scores = rng.integers(0, 4, n).astype(float)
                assert mt.auroc(labels, scores) == pytest.approx(brute_auroc(labels, scores), abs=1e-12)

    def test_auprc_step_interpolation(self):
        # ranking: pos, neg, pos → precision 1 at recall 1/2, 2/3 at recall 1
        assert mt.auprc([1, 0, 1], [3.0, 2.0, 1.0]) == pytest.approx(0.5 + 0.5 * 2 / 3)

    def test_single_class(self):
        assert math.isnan(mt.auroc([1, 1], [0.1, 0.2]))
        assert math.isnan(mt.auprc([0, 0], [0.1, 0.2]))


class TestEffectSize:
    def test_identical(self):
        assert mt.effect_size_corr([1, 5, 3], [1, 5, 3]) == pytest.approx(1.0)

    def test_reversed(self):
        assert mt.effect_size_corr([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)

    def test_constant(self):
        assert math.isnan(mt.effect_size_corr([1, 2, 3], [4, 4, 4]))

    def test_too_few(self):
        with pytest.raises(ValueError):
            mt.effect_size_corr([1], [1])


class TestBounds:
    def test_fuzz(self):
        rng = np.random.default_rng(11)
        for _ in range(10**4):
            n = int(rng.integers(2, 9))
            labels = rng.integers(0, 2, n)
            scores = rng.random(n).round(1)
            a, b = mt.auroc(labels, scores), mt.auprc(labels, scores)
            if labels.min() != labels.max():
                assert 0 <= a <= 1 and 0 <= b <= 1
            x, y = rng.standard_normal(n), rng.standard_normal(n)
            r = mt.pearson(x, y)
            assert -1 <= r <= 1
            p = mt.bh_adjust(rng.random(n))
            assert np.all((0 <= p) & (p <= 1))

    def test_pds_bounds(self):
        rng = np.random.default_rng(12)
        for _ in range(200):
            M = int(rng.integers(2, 6))
            v = mt.pds({i: rng.random(3) for i in range(M)}, {i: rng.random(3) for i in range(M)})
            assert 0 <= v <= 1


class TestEvaluate:
    def setup_method(self):
        rng = np.random.default_rng(13)
        self.ctrl = {}
        self.truth = {}
        for i in range(4):
            key = ("ctx", f"p{i}")
            base = rng.random(10)
            self.ctrl[key] = np.abs(base + 0.05 * rng.standard_normal((40, 10)))
            shift = np.zeros(10)
            shift[i * 2:(i * 2) + 2] = 1.0
            self.truth[key] = np.abs(base + shift + 0.05 * rng.standard_normal((40, 10)))

    def test_truth_against_itself(self):
        r = mt.evaluate(self.truth, self.truth, self.ctrl)
        assert r.value("PDS_L1") == 1.0 and r.value("PDCorr") == pytest.approx(1.0)
        assert r.value("MAE") == 0.0 and r.value("DEOver") == 1.0 and r.value("AUROC") == 1.0
        assert r.es == pytest.approx(1.0) or math.isnan(r.es)

    def test_missing_reported(self):
        pred = {k: v for k, v in list(self.truth.items())[:3]}
        r = mt.evaluate(self.truth, pred, self.ctrl)
        assert r.missing == ["ctx|p3"] and len(r.per_perturbation) == 3

    def test_bounds_and_round_trip(self, tmp_path):
        rng = np.random.default_rng(14)
        pred = {k: np.abs(v + 0.3 * rng.standard_normal(v.shape)) for k, v in self.truth.items()}
        r = mt.evaluate(self.truth, pred, self.ctrl, method="noisy")
        for m in ("PDS_L1", "PDS_L2", "PDS_cos", "AUROC", "AUPRC", "DEOver", "DEPrec", "DirAgr"):
            assert 0 <= r.value(m) <= 1
        jpath, tpath = r.save(tmp_path / "rep")
        back = mt.MetricReport.load(jpath)
        assert back.aggregate.keys() == r.aggregate.keys()
        for k, v in r.aggregate.items():
            assert (math.isnan(v) and math.isnan(back.aggregate[k])) or v == back.aggregate[k]
        assert len(tpath.read_text().splitlines()) == 5

    def test_win_rate(self):
        a = mt.MetricReport("a", per_perturbation={"x": {"MAE": 1.0}, "y": {"MAE": 3.0}, "z": {"MAE": math.nan}})
        b = mt.MetricReport("b", per_perturbation={"x": {"MAE": 2.0}, "y": {"MAE": 2.0}, "z": {"MAE": 1.0}})
        assert mt.win_rate(a, b, "MAE") == (0.5, 1, 2)
