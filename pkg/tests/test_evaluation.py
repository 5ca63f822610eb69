import itertools
import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from evmaf.errors import InputError
from evmaf.evaluation import (EvalReport, MetricSeries, PairwiseSet, build_pairs,
                              compare_pairwise, evaluate_series, f_test_residuals,
                              fisher_aggregate, fisher_exact, fit_logistic, logistic4,
                              pairwise_accuracy, read_pairs_csv, spearman, srocc,
                              write_pairs_csv)


def average_ranks(v):
    """Average 1-based ranks, written out by hand."""
    order = sorted(range(len(v)), key=lambda i: v[i])
    ranks = [0.0] * len(v)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and v[order[j + 1]] == v[order[i]]:
            j += 1
        for k in range(i, j + 1):
            ranks[order[k]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def pearson(a, b):
    ma, mb = sum(a) / len(a), sum(b) / len(b)
    num = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    den = math.sqrt(sum((x - ma) ** 2 for x in a) * sum((y - mb) ** 2 for y in b))
    return num / den


def brute_fisher(table):
    """Two-sided exact p by enumerating every table with the same margins."""
    (a, b), (c, d) = table
    r1, r2, c1 = a + b, c + d, a + c
    n = r1 + r2

    def prob(x):
        return math.comb(r1, x) * math.comb(r2, c1 - x) / math.comb(n, c1)

    obs = prob(a)
    return min(1.0, sum(prob(x) for x in range(max(0, c1 - r2), min(r1, c1) + 1)
                        if prob(x) <= obs * (1 + 1e-7)))


class TestSrocc:
    def test_against_hand_oracle(self, rng):
        for _ in range(50):
            n = int(rng.integers(2, 30))
            x = list(rng.integers(0, 6, n).astype(float))
            y = list(rng.normal(size=n))
            rx, ry = average_ranks(x), average_ranks(y)
            if len(set(x)) == 1:
                continue
            assert srocc(x, y) == pytest.approx(pearson(rx, ry), abs=1e-12)

    def test_matches_scipy(self, rng):
        x, y = rng.normal(size=40), rng.normal(size=40)
        assert srocc(x, y) == pytest.approx(stats.spearmanr(x, y)[0], abs=1e-12)

    def test_monotone_transform_invariant(self, rng):
        x = rng.normal(size=30)
        y = x + rng.normal(0, 0.5, 30)
        assert srocc(np.exp(x), y) == pytest.approx(srocc(x, y), abs=1e-15)

    def test_perfect_and_inverse(self):
        x = np.arange(10.0)
        assert srocc(x, x ** 3) == 1.0
        assert srocc(x, -x) == -1.0

    def test_constant_is_degenerate(self):
        res = spearman(np.ones(5), np.arange(5.0))
        assert res.value == 0.0 and res.degenerate

    @pytest.mark.parametrize("x,y", [([1.0], [1.0]), ([1.0, 2.0], [1.0])])
    def test_bad_lengths(self, x, y):
        with pytest.raises(InputError):
            srocc(x, y)


class TestFisherAggregate:
    def test_single_and_equal(self):
        assert fisher_aggregate([0.8]) == 0.8
        assert fisher_aggregate([0.7, 0.7, 0.7]) == 0.7

    def test_closed_form(self):
        rs = [0.9, 0.5, -0.2]
        expected = math.tanh(sum(math.atanh(r) for r in rs) / 3)
        assert fisher_aggregate(rs) == pytest.approx(expected, abs=1e-15)

    @given(st.lists(st.floats(-0.99, 0.99), min_size=1, max_size=10))
    def test_bounded_by_extremes(self, rs):
        v = fisher_aggregate(rs)
        assert min(rs) - 1e-12 <= v <= max(rs) + 1e-12

    def test_unit_correlation_clamped(self):
        with pytest.warns(RuntimeWarning, match="clamped"):
            v = fisher_aggregate([1.0, 0.5])
        assert 0.5 < v < 1.0

    def test_empty(self):
        with pytest.raises(InputError):
            fisher_aggregate([])


class TestLogistic:
    def test_recovers_noiseless_curve(self, rng):
        m = rng.uniform(0, 10, 60)
        true = (90.0, 5.0, 1.2, 0.0)
        fit = fit_logistic(m, logistic4(m, *true))
        assert fit.rms < 1e-6

    def test_never_worse_than_linear(self, rng):
        m = rng.uniform(0, 1, 40)
        mos = 100 * m + rng.normal(0, 5, 40)
        fit = fit_logistic(m, mos)
        slope, icpt = np.polyfit(m, mos, 1)
        lin_rms = np.sqrt(np.mean((mos - (slope * m + icpt)) ** 2))
        assert fit.rms <= lin_rms + 1e-9

    def test_decreasing_metric(self, rng):
        m = rng.uniform(0, 10, 50)
        mos = 100 - 9 * m + rng.normal(0, 1, 50)
        fit = fit_logistic(m, mos)
        assert srocc(fit(m), mos) == pytest.approx(srocc(-m, mos), abs=0.02)

    def test_constant_metric_falls_back(self, rng):
        mos = rng.uniform(0, 100, 10)
        fit = fit_logistic(np.ones(10), mos)
        np.testing.assert_allclose(fit.residuals, mos - mos.mean(), atol=1e-9)


class TestFTest:
    def test_self_comparison_is_zero(self, rng):
        r = rng.normal(size=30)
        assert f_test_residuals(r, r) == 0

    def test_antisymmetric(self, rng):
        for scale in (1.0, 1.3, 2.0, 5.0):
            a = rng.normal(size=30)
            b = scale * rng.normal(size=30)
            assert f_test_residuals(a, b) == -f_test_residuals(b, a)

    def test_threshold_matches_f_distribution(self):
        n = 30
        crit = stats.f.ppf(0.975, n - 4, n - 4)
        base = np.ones(n)
        assert f_test_residuals(base, base * math.sqrt(crit * 1.001)) == 1
        assert f_test_residuals(base, base * math.sqrt(crit * 0.999)) == 0

    def test_small_sample_warns(self):
        with pytest.warns(RuntimeWarning):
            assert f_test_residuals([1, 2, 3, 4], [5, 6, 7, 8]) == 0


class TestPairwise:
    def _series(self, scores, mos, db="d"):
        return MetricSeries(db, np.asarray(scores, float), np.asarray(mos, float))

    def test_pair_count_and_orientation(self, rng):
        s = [self._series(rng.random(n), rng.random(n), f"d{n}") for n in (5, 9)]
        pairs = build_pairs(s)
        assert len(pairs) == math.comb(5, 2) + math.comb(9, 2)
        assert np.all(pairs.mos_diff >= 0)

    def test_hand_example(self):
        s = self._series([1, 2, 3, 0], [10, 20, 30, 40])
        acc = pairwise_accuracy(build_pairs([s]))
        # only the three pairs involving the last sequence disagree
        assert (acc.correct, acc.incorrect) == (3, 3)
        assert acc.accuracy == 0.5

    def test_ties_tallied(self):
        s = self._series([1, 1, 2, 3], [5, 6, 6, 7])
        acc = pairwise_accuracy(build_pairs([s]))
        assert acc.metric_ties == 1 and acc.mos_ties == 1
        # the equal-MOS pair keeps index order, so its metric difference is -1
        assert (acc.correct, acc.incorrect) == (5, 1)

    def test_reversed_metric_only_mos_ties_correct(self):
        mos = np.array([10.0, 20.0, 20.0, 30.0, 40.0, 40.0])
        acc = pairwise_accuracy(build_pairs([self._series(-mos, mos)]))
        assert acc.correct == acc.mos_ties == 2

    def test_large_pair_file_ratios(self, rng, tmp_path):
        n = 102_842
        for correct, ratio in ((88_239, 0.858), (86_799, 0.844)):
            metric = np.where(np.arange(n) < correct, 1.0, -1.0)
            pairs = PairwiseSet(rng.uniform(0, 50, n), rng.permutation(metric))
            write_pairs_csv(tmp_path / "p.csv", pairs)
            acc = pairwise_accuracy(read_pairs_csv(tmp_path / "p.csv"))
            assert round(acc.accuracy, 4) == pytest.approx(ratio, abs=1e-4)
            assert acc.correct == correct

    def test_series_validation(self):
        with pytest.raises(InputError):
            self._series([1, 2, 3], [1, 2, 3])
        with pytest.raises(InputError):
            self._series([1, 2, 3, np.nan], [1, 2, 3, 4])

    def test_csv_round_trip(self, rng, tmp_path):
        pairs = build_pairs([self._series(rng.random(6), rng.random(6))])
        write_pairs_csv(tmp_path / "p.csv", pairs)
        back = read_pairs_csv(tmp_path / "p.csv")
        np.testing.assert_array_equal(back.mos_diff, pairs.mos_diff)
        np.testing.assert_array_equal(back.metric_diff, pairs.metric_diff)
        assert list(back.database) == list(pairs.database)

    def test_compare_builds_table(self, rng):
        mos = rng.random(12)
        a = build_pairs([self._series(mos, mos)])
        b = build_pairs([self._series(rng.random(12), mos)])
        acc_a, acc_b, table, p = compare_pairwise(a, b)
        assert table[0] == [acc_a.correct, acc_a.incorrect] == [66, 0]
        assert 0 <= p < 1e-6


class TestFisherExact:
    def test_against_brute_force(self):
        for table in itertools.product(range(7), repeat=4):
            t = [[table[0], table[1]], [table[2], table[3]]]
            if min(sum(t[0]), sum(t[1]), t[0][0] + t[1][0], t[0][1] + t[1][1]) == 0:
                assert fisher_exact(t) == 1.0
                continue
            assert fisher_exact(t) == pytest.approx(brute_fisher(t), rel=1e-9, abs=1e-15)

    def test_matches_scipy(self, rng):
        for _ in range(30):
            t = rng.integers(0, 200, (2, 2))
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                ref = stats.fisher_exact(t)[1]
            assert fisher_exact(t) == pytest.approx(ref, rel=1e-6)

    def test_large_counts_are_finite(self):
        p = fisher_exact([[88239, 14603], [86799, 16043]])
        assert 0 < p < 1e-15

    @pytest.mark.parametrize("bad", [[[1, 2, 3]], [[-1, 2], [3, 4]], [[1.5, 2], [3, 4]]])
    def test_rejects_bad_tables(self, bad):
        with pytest.raises(InputError):
            fisher_exact(bad)


class TestReport:
    def _series(self, rng):
        out = {}
        mos = {db: rng.uniform(0, 100, 40) for db in ("a", "b", "c")}
        for name, noise in (("good", 3.0), ("anchor", 12.0), ("random", None)):
            out[name] = {}
            for db, m in mos.items():
                s = rng.uniform(0, 100, 40) if noise is None else m + rng.normal(0, noise, 40)
                out[name][db] = MetricSeries(db, s, m)
        return out

    def test_consistency(self, rng):
        rep = evaluate_series(self._series(rng), anchor="anchor")
        for m in rep.metrics:
            assert rep.overall[m] == fisher_aggregate([rep.srocc[m][db] for db in rep.databases])
        assert all(v == 0 for v in rep.verdict["anchor"].values())
        assert all(v == 1 for v in rep.verdict["good"].values())
        assert all(v == -1 for v in rep.verdict["random"].values())

    def test_text_and_csv(self, rng, tmp_path):
        rep = evaluate_series(self._series(rng), anchor="anchor")
        rep.config_hash = "abc"
        text = rep.to_text()
        assert "# config_hash=abc" in text
        assert f"{rep.srocc['good']['a']:.4f} (1)" in text
        rep.write_csv(tmp_path / "r.csv")
        rows = (tmp_path / "r.csv").read_text().splitlines()
        assert rows[0].startswith("metric,a_srocc") and len(rows) == 4

    def test_empty(self):
        with pytest.raises(InputError):
            evaluate_series({})

    def test_report_type(self, rng):
        assert isinstance(evaluate_series(self._series(rng)), EvalReport)
