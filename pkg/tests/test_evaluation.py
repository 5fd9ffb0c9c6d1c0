import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps

from cnnqoe.architecture import ModelConfig, build_model, count_params
from cnnqoe.data import Fold, SplitProtocol, fit_stats, split, synth_database
from cnnqoe.errors import CorrelationError, ParameterError, ShapeError
from cnnqoe.evaluation import (
    average_ranks,
    bench_inference,
    evaluate,
    pcc,
    predict_trace,
    rmse,
    srocc,
    write_predictions,
    write_report,
)

import metric_oracle as oracle


class TestMetrics:
    def test_pcc_examples(self):
        a = np.array([1.0, 2.0, 3.0, 5.0])
        assert pcc(a, a) == pytest.approx(1.0, abs=1e-15)
        assert pcc([1, 2, 3], [1, 4, 9]) == pytest.approx(0.989743318610787, abs=1e-12)
        assert pcc(a, -a) == pytest.approx(-1.0, abs=1e-15)

    def test_srocc_examples(self):
        assert srocc([1, 2, 3], [1, 4, 9]) == pytest.approx(1.0)
        assert srocc([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1.0)
        assert srocc([1, 1, 2], [3, 3, 5]) == pytest.approx(1.0)

    def test_average_ranks(self):
        np.testing.assert_array_equal(average_ranks([10, 20, 10, 30, 20, 20]), [1.5, 4, 1.5, 6, 4, 4])
        np.testing.assert_array_equal(average_ranks([1, 1, 2]), oracle.average_rank([1, 1, 2]))

    def test_rmse_examples(self):
        assert rmse([1, 2], [1, 2]) == 0.0
        assert rmse([0, 0], [3, 4]) == pytest.approx(3.5355339059327378, abs=1e-12)

    @pytest.mark.parametrize("c", [-3.0, 0.5, 7.0])
    def test_rmse_homogeneous(self, rng, c):
        a, b = rng.normal(size=(2, 20))
        assert rmse(c * a, c * b) == pytest.approx(abs(c) * rmse(a, b), rel=1e-12)

    def test_constant_is_error(self):
        with pytest.raises(CorrelationError):
            pcc([1, 1, 1], [1, 2, 3])
        with pytest.raises(CorrelationError):
            srocc([1, 2, 3], [5, 5, 5])

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            rmse([1, 2], [1])
        with pytest.raises(ShapeError):
            pcc([1], [1])
        with pytest.raises(ShapeError):
            rmse([], [])

    def test_oracle_agreement(self):
        r = np.random.default_rng(0)
        for i in range(200):
            n = int(r.integers(2, 40))
            a = r.normal(size=n)
            b = r.normal(size=n) if i % 2 else np.round(r.normal(size=n), 1)  # ties on odd draws
            assert abs(pcc(a, b) - oracle.pearson(a, b)) <= 1e-12
            assert abs(srocc(a, b) - oracle.spearman(a, b)) <= 1e-12
            assert abs(rmse(a, b) - oracle.root_mean_square_error(a, b)) <= 1e-12

    def test_scipy_agreement(self, rng):
        a = rng.normal(size=50)
        b = np.round(a + rng.normal(size=50), 1)
        assert srocc(a, b) == pytest.approx(sps.spearmanr(a, b).statistic, abs=1e-12)
        assert pcc(a, b) == pytest.approx(sps.pearsonr(a, b).statistic, abs=1e-12)

    @settings(max_examples=80, deadline=None)
    @given(seed=st.integers(0, 2**31), scale=st.floats(0.01, 100), shift=st.floats(-100, 100))
    def test_affine_invariance(self, seed, scale, shift):
        r = np.random.default_rng(seed)
        a, b = r.normal(size=(2, 15))
        assert pcc(scale * a + shift, b) == pytest.approx(pcc(a, b), abs=1e-9)
        assert srocc(a, scale * b + shift) == pytest.approx(srocc(a, b), abs=1e-12)

    @settings(max_examples=80, deadline=None)
    @given(seed=st.integers(0, 2**31))
    def test_srocc_monotone_invariance(self, seed):
        r = np.random.default_rng(seed)
        a, b = r.normal(size=(2, 15))
        assert srocc(np.exp(a) ** 3, np.arctan(b)) == pytest.approx(srocc(a, b), abs=1e-12)


class ConstantModel:
    """Stands in for a model: predicts a fixed normalized value."""

    def __init__(self, value):
        self.config = ModelConfig()
        self.value = value

    def forward_sequence(self, X):
        return np.full(X.shape[:-2] + (X.shape[-1],), self.value)


class OracleModel:
    """Predicts the exact normalized target by looking it up."""

    def __init__(self, traces, stats):
        from cnnqoe.data import normalize
        from cnnqoe.training import window_array

        self.config = ModelConfig()
        self.table = {}
        for t in traces:
            nt = normalize(t, stats)
            for w, y in zip(window_array(nt.x, 9), nt.y):
                self.table[w.tobytes()] = y

    def forward_sequence(self, X):
        out = np.zeros(X.shape[:-2] + (X.shape[-1],))
        for i in range(X.shape[0]):
            out[i, -1] = self.table[X[i].tobytes()]
        return out


@pytest.fixture(scope="module")
def db():
    return synth_database(6, 60, seed=11)


class TestEvaluate:
    def test_perfect_model(self, db):
        stats = fit_stats(db)
        folds = [Fold(db[:4], db[4:])]
        rep = evaluate(OracleModel(db, stats), folds, stats)
        for row in rep.rows:
            assert row.pcc == pytest.approx(1.0, abs=1e-12)
            assert row.rmse == pytest.approx(0.0, abs=1e-9)

    def test_constant_model(self, db):
        stats = fit_stats(db)
        rep = evaluate(ConstantModel(0.25), [Fold([], db[:3])], stats)
        for row, trace in zip(rep.rows, db[:3]):
            c = 0.25 * 100.0
            assert row.rmse == pytest.approx(math.sqrt(np.mean((trace.qoe - c) ** 2)), rel=1e-12)
            assert row.pcc is None and "undefined" in row.error
        assert rep.aggregate["pcc"] is None

    def test_aggregate_is_mean(self, db):
        stats = fit_stats(db)
        model = build_model(ModelConfig(), 0)
        rep = evaluate(model, [Fold([], db)], stats)
        assert len(rep.rows) == 6
        assert rep.aggregate["rmse"] == pytest.approx(np.mean([r.rmse for r in rep.rows]), rel=1e-15)
        assert rep.aggregate["pcc"] == pytest.approx(np.mean([r.pcc for r in rep.rows]), rel=1e-15)

    def test_per_fold_models(self, db):
        folds = split(db, SplitProtocol("fraction", 0.5, seed=0))
        models = [build_model(ModelConfig(), i) for i in range(len(folds))]
        stats = [fit_stats(f.train) for f in folds]
        rep = evaluate(models, folds, stats)
        assert len(rep.rows) == len(folds) == 6
        assert [r.fold for r in rep.rows] == list(range(6))
        with pytest.raises(ShapeError):
            evaluate(models[:2], folds, stats)

    def test_deterministic(self, db):
        stats = fit_stats(db)
        model = build_model(ModelConfig(), 1)
        a = evaluate(model, [Fold([], db)], stats)
        b = evaluate(model, [Fold([], db)], stats)
        assert a.rows == b.rows and a.aggregate == b.aggregate

    def test_predictions_cover_trace(self, db):
        stats = fit_stats(db)
        rep = evaluate(build_model(ModelConfig(), 0), [Fold([], db[:1])], stats)
        y, p = rep.predictions[db[0].id]
        assert len(y) == len(p) == 60

    def test_short_trace_skipped(self, db, caplog):
        from cnnqoe.data import SynthParams, synth_trace

        short = synth_trace(SynthParams(1, id="short"))
        rep = evaluate(build_model(ModelConfig(), 0), [Fold([], [short, db[0]])], fit_stats(db))
        assert rep.rows[0].error == "too short" and rep.rows[0].rmse is None
        assert rep.rows[1].rmse is not None
        assert "short" in caplog.text

    def test_predict_trace_matches_full_window(self, db):
        stats = fit_stats(db)
        from cnnqoe.data import normalize
        from cnnqoe.architecture import forward

        model = build_model(ModelConfig(), 2)
        nt = normalize(db[0], stats)
        pred = predict_trace(model, nt.x)
        padded = np.concatenate([np.zeros((4, 8)), nt.x], axis=1)
        for t in (0, 5, 30, 59):
            assert pred[t] == forward(model, padded[:, t : t + 9])

    def test_report_files(self, tmp_path, db):
        stats = fit_stats(db)
        rep = evaluate(build_model(ModelConfig(), 0), [Fold([], db[:2])], stats)
        write_report(rep, tmp_path / "r.csv")
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0] == "fold,trace_id,samples,pcc,srocc,rmse,error"
        assert len(lines) == 4 and lines[-1].startswith("mean,")
        y, p = rep.predictions[db[0].id]
        write_predictions(y, p, tmp_path / "p.csv")
        rows = (tmp_path / "p.csv").read_text().splitlines()
        assert rows[0] == "t,y_true,y_pred" and len(rows) == 61


class TestBench:
    def test_report(self):
        model = build_model(ModelConfig(), 0)
        res = bench_inference(model, reps=30, warmup=2)
        assert 0 < res.median_ms <= res.p95_ms
        assert res.complexity.param_count == count_params(model) == 6561
        assert res.complexity.receptive_field == 9

    def test_reps_floor(self):
        with pytest.raises(ParameterError):
            bench_inference(build_model(ModelConfig(), 0), reps=29)

    def test_width_scaling(self):
        small = bench_inference(build_model(ModelConfig(n=16), 0), reps=30).complexity.flops_per_step
        big = bench_inference(build_model(ModelConfig(n=32), 0), reps=30).complexity.flops_per_step
        assert big >= 2 * small

    def test_repeatable_median(self):
        model = build_model(ModelConfig(), 0)
        medians = [bench_inference(model, reps=200, warmup=20).median_ms for _ in range(3)]
        assert max(medians) <= 1.2 * min(medians)
