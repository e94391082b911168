import math
import warnings
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dri_iqa.evaluation import (
    DegenerateRankWarning,
    EvaluationError,
    EvaluationRecord,
    emit_scatter_plot,
    partition,
    plcc,
    run_protocol,
    srocc,
)


def pearson_of_ranks(s, p):
    # ranks by double argsort, valid for tie-free data only
    rs = np.argsort(np.argsort(s)).astype(float)
    rp = np.argsort(np.argsort(p)).astype(float)
    rs -= rs.mean()
    rp -= rp.mean()
    return float(rs @ rp / math.sqrt((rs @ rs) * (rp @ rp)))


def rows(n):
    return [SimpleNamespace(path=f"img{i}.png", mos=float(i % 7) + 0.1 * i) for i in range(n)]


class TestSrocc:
    def test_identical_order(self):
        assert srocc(np.arange(10), np.arange(10) * 3.0) == 1.0

    def test_reversed_order(self):
        assert srocc(np.arange(10), -np.arange(10)) == -1.0

    def test_hand_case(self):
        assert abs(srocc([1, 2, 3, 4, 5], [1, 2, 3, 5, 4]) - 0.9) <= 1e-9

    def test_records_input(self):
        recs = [EvaluationRecord(s, p) for s, p in zip([1, 2, 3, 4, 5], [1, 2, 3, 5, 4])]
        assert srocc(recs) == srocc([1, 2, 3, 4, 5], [1, 2, 3, 5, 4])

    def test_brute_force_oracle(self):
        g = np.random.default_rng(0)
        worst = 0.0
        for _ in range(1000):
            s, p = g.standard_normal(50), g.standard_normal(50)
            worst = max(worst, abs(srocc(s, p) - pearson_of_ranks(s, p)))
        assert worst <= 1e-10

    def test_ties_use_average_ranks(self):
        s = [1, 2, 2, 3, 4]
        p = [1, 3, 2, 4, 5]
        rs = np.array([1, 2.5, 2.5, 4, 5])
        rp = np.array([1, 3, 2, 4, 5])
        expected = np.corrcoef(rs, rp)[0, 1]
        assert srocc(s, p) == pytest.approx(expected, abs=1e-12)

    def test_constant_predictions(self):
        with pytest.warns(DegenerateRankWarning):
            assert srocc([1, 2, 3], [5, 5, 5]) == 0.0

    def test_too_few(self):
        with pytest.raises(EvaluationError):
            srocc([1.0], [1.0])

    @pytest.mark.parametrize("transform", [np.exp, lambda x: x**3, lambda x: 2.5 * x - 7])
    def test_monotone_invariance(self, transform):
        g = np.random.default_rng(1)
        for _ in range(100):
            s, p = g.standard_normal(30), g.standard_normal(30)
            assert abs(srocc(s, transform(p)) - srocc(s, p)) <= 1e-12

    def test_null_control(self):
        g = np.random.default_rng(2)
        mos = g.uniform(1, 5, 200)
        for _ in range(20):
            assert abs(srocc(mos, g.standard_normal(200))) < 0.2


class TestPlcc:
    def test_affine(self):
        s = np.array([1.0, 2.5, 3.0, 7.0])
        assert plcc(s, 2 * s + 3) == pytest.approx(1.0, abs=1e-12)

    def test_negation(self):
        s = np.array([1.0, 2.5, 3.0, 7.0])
        assert plcc(s, -s) == pytest.approx(-1.0, abs=1e-12)

    def test_hand_case(self):
        assert abs(plcc([1, 2, 3], [2, 4, 7]) - 5 / math.sqrt(2 * 114 / 9)) <= 1e-9
        assert round(plcc([1, 2, 3], [2, 4, 7]), 4) == 0.9934

    def test_affine_invariance_both_columns(self):
        g = np.random.default_rng(3)
        for _ in range(100):
            s, p = g.standard_normal(20), g.standard_normal(20)
            base = plcc(s, p)
            assert abs(plcc(3 * s + 1, p) - base) <= 1e-12
            assert abs(plcc(s, 0.5 * p - 2) - base) <= 1e-12
            assert abs(plcc(s, -p) + base) <= 1e-12

    @pytest.mark.parametrize("s,p,column", [([1, 1, 1], [1, 2, 3], "subjective"), ([1, 2, 3], [4, 4, 4], "predicted")])
    def test_zero_variance_named(self, s, p, column):
        with pytest.raises(EvaluationError, match=column):
            plcc(s, p)


@given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)), min_size=2, max_size=60))
@settings(max_examples=200, deadline=None)
def test_metric_bounds(pairs):
    s, p = np.array(pairs).T
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateRankWarning)
        assert -1.0 <= srocc(s, p) <= 1.0
    if np.ptp(s) > 0 and np.ptp(p) > 0:
        assert -1.0 <= plcc(s, p) <= 1.0


class TestRecord:
    def test_non_finite_rejected(self):
        with pytest.raises(EvaluationError):
            EvaluationRecord(float("nan"), 1.0)


class TestProtocol:
    @given(st.integers(10, 300), st.floats(0.05, 0.95), st.integers(0, 20), st.integers(0, 20))
    @settings(max_examples=100, deadline=None)
    def test_partition_disjoint_and_exhaustive(self, n, frac, split, seed):
        tr, te = partition(n, frac, split, seed)
        assert set(tr).isdisjoint(te)
        assert sorted([*tr, *te]) == list(range(n))
        assert len(te) >= 2

    def test_partition_varies_with_split_and_seed(self):
        assert not np.array_equal(partition(50, 0.8, 0, 0)[1], partition(50, 0.8, 1, 0)[1])
        assert not np.array_equal(partition(50, 0.8, 0, 0)[1], partition(50, 0.8, 0, 1)[1])

    def test_single_run(self):
        report = run_protocol(rows(20), lambda tr, seed, split: (lambda r: r.mos), splits=1, seeds=1)
        assert len(report.runs) == 1
        assert report.srocc == 1.0

    def test_run_count_and_means(self):
        g = np.random.default_rng(0)
        noise = {f"img{i}.png": g.standard_normal() for i in range(40)}
        report = run_protocol(rows(40), lambda tr, seed, split: (lambda r: r.mos + noise[r.path]), splits=3, seeds=[4, 5])
        assert len(report.runs) == 6
        assert report.srocc == pytest.approx(np.mean([r.srocc for r in report.runs]), abs=1e-15)
        assert set(report.per_seed()) == {4, 5}
        assert all(r.n_train + r.n_test == 40 for r in report.runs)

    def test_deterministic(self):
        def factory(tr, seed, split):
            g = np.random.default_rng([seed, split])
            return lambda r: r.mos + g.standard_normal()

        a = run_protocol(rows(30), factory, splits=2, seeds=2).to_json()
        b = run_protocol(rows(30), factory, splits=2, seeds=2).to_json()
        assert a == b

    def test_shuffled_label_control(self):
        def factory(tr, seed, split):
            g = np.random.default_rng([seed, split, 99])
            return lambda r: g.standard_normal()

        # 200 held-out items per run
        report = run_protocol(rows(250), factory, splits=10, seeds=5, train_fraction=0.2)
        assert all(r.n_test == 200 for r in report.runs)
        assert all(abs(r.srocc) < 0.2 for r in report.runs)

    def test_too_few_rows(self):
        with pytest.raises(EvaluationError, match="10 rows"):
            run_protocol(rows(9), lambda *a: (lambda r: 0.0))

    def test_bad_fraction(self):
        with pytest.raises(EvaluationError):
            partition(10, 1.0, 0, 0)

    def test_report_json(self, tmp_path):
        report = run_protocol(rows(20), lambda tr, seed, split: (lambda r: r.mos), splits=2, seeds=1)
        report.write(tmp_path / "r.json")
        import json

        data = json.loads((tmp_path / "r.json").read_text())
        assert data["aggregate"]["n_runs"] == 2
        assert len(data["runs"]) == 2


class TestScatterPlot:
    def test_writes_file(self, tmp_path):
        g = np.random.default_rng(0)
        recs = [EvaluationRecord(float(s), float(s + g.normal(0, 0.3))) for s in g.uniform(1, 5, 100)]
        out = tmp_path / "scatter.png"
        values = emit_scatter_plot(recs, out)
        assert out.stat().st_size > 0
        assert values == {"srocc": srocc(recs), "plcc": plcc(recs)}

    def test_perfect_predictions(self, tmp_path):
        recs = [EvaluationRecord(float(i), float(i)) for i in range(10)]
        values = emit_scatter_plot(recs, tmp_path / "p.png")
        assert values == {"srocc": 1.0, "plcc": pytest.approx(1.0, abs=1e-12)}

    def test_unwritable_path(self, tmp_path):
        with pytest.raises(EvaluationError):
            emit_scatter_plot([EvaluationRecord(1.0, 1.0), EvaluationRecord(2.0, 3.0)], tmp_path / "nope" / "x.png")

    def test_empty(self, tmp_path):
        with pytest.raises(EvaluationError):
            emit_scatter_plot([], tmp_path / "x.png")
