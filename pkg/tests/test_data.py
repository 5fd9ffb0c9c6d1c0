import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cnnqoe.data import (
    LEAVE_ONE_OUT,
    RANDOM_80_20,
    RANDOM_FRACTION,
    NormalizationStats,
    QoETrace,
    SplitProtocol,
    SynthParams,
    check_trace,
    denormalize_features,
    denormalize_qoe,
    fit_stats,
    normalize,
    normalize_qoe,
    parse_trace,
    random_quality_schedule,
    random_rebuffer_schedule,
    read_traces,
    save_trace,
    split,
    synth_database,
    synth_trace,
    trace_violations,
    write_trace,
)
from cnnqoe.errors import DataError, ParameterError, ParseError, SplitError

VALID = """# id=a
# content=c1
# pattern=p1
# qoe_min=0
# qoe_max=100
t,stsq,pi,nr,tr,qoe
0,3.5,0,0,0,80
1,3.5,1,1,0,60
2,4.0,0,1,1,65
"""


def with_rows(rows, header="t,stsq,pi,nr,tr,qoe"):
    return "# qoe_min=0\n# qoe_max=100\n" + header + "\n" + "\n".join(rows) + "\n"


class TestParse:
    def test_valid(self):
        tr = parse_trace(VALID.encode())
        assert len(tr) == 3
        assert (tr.id, tr.content_id, tr.pattern_id) == ("a", "c1", "p1")
        assert tr.qoe_range == (0.0, 100.0)
        np.testing.assert_array_equal(tr.nr, [0, 1, 1])

    def test_non_monotone_nr(self):
        text = with_rows(["0,1,0,0,0,50", "1,1,1,1,0,50", "2,1,0,0,1,50"])
        with pytest.raises(ParseError, match="nr decreases") as exc:
            parse_trace(text)
        assert exc.value.line == 6

    def test_missing_column(self):
        with pytest.raises(ParseError, match="missing column"):
            parse_trace(with_rows(["0,1,0,0,50"], header="t,stsq,pi,nr,qoe"))

    def test_pi_not_binary(self):
        with pytest.raises(ParseError, match="pi must be 0 or 1") as exc:
            parse_trace(with_rows(["0,1,0,0,0,50", "1,1,2,0,1,50"]))
        assert exc.value.line == 5

    def test_qoe_out_of_range(self):
        with pytest.raises(ParseError, match="outside range"):
            parse_trace(with_rows(["0,1,0,0,0,150"]))

    def test_tr_must_count(self):
        with pytest.raises(ParseError, match="tr must"):
            parse_trace(with_rows(["0,1,0,0,0,50", "1,1,0,0,3,50"]))

    def test_tr_zero_while_stalled(self):
        with pytest.raises(ParseError, match="during rebuffering"):
            parse_trace(with_rows(["0,1,0,0,0,50", "1,1,1,1,1,50"]))

    def test_missing_range(self):
        with pytest.raises(ParseError, match="qoe_min"):
            parse_trace("t,stsq,pi,nr,tr,qoe\n0,1,0,0,0,1\n")

    def test_bad_number(self):
        with pytest.raises(ParseError, match="line 4"):
            parse_trace(with_rows(["0,abc,0,0,0,50"]))

    def test_time_index_gap(self):
        with pytest.raises(ParseError, match="expected t=1"):
            parse_trace(with_rows(["0,1,0,0,0,50", "2,1,0,0,1,50"]))

    def test_empty(self):
        with pytest.raises(ParseError):
            parse_trace(with_rows([]))

    def test_round_trip_canonical(self):
        messy = VALID.replace("80", "80.000").replace("# id=a", "#   id = a ")
        tr = parse_trace(messy)
        canonical = write_trace(tr)
        assert write_trace(parse_trace(canonical)) == canonical
        assert parse_trace(canonical) == tr

    def test_files(self, tmp_path):
        traces = synth_database(3, 30, seed=1)
        for t in traces:
            save_trace(t, tmp_path / f"{t.id}.csv")
        assert read_traces(tmp_path) == traces
        assert b"\r\n" not in (tmp_path / "trace_000.csv").read_bytes()


class TestNormalize:
    def stats(self, qoe_range=(0.0, 100.0)):
        return NormalizationStats({"stsq": (0.0, 50.0), "nr": (0.0, 4.0), "tr": (0.0, 100.0)}, qoe_range)

    def test_qoe_at_max(self):
        assert normalize_qoe(100.0, (0.0, 100.0)) == 1.0

    def test_netflix_midpoint(self):
        assert normalize_qoe(-0.375, (-2.28, 1.53)) == pytest.approx(0.5, abs=1e-12)

    def test_inverse(self):
        trace = synth_trace(SynthParams(60, [(10, 3)], [(0, 1), (30, 3)], seed=4))
        st = fit_stats([trace])
        nt = normalize(trace, st)
        assert nt.clamped == 0
        assert np.all((nt.x >= 0) & (nt.x <= 1))
        np.testing.assert_allclose(denormalize_qoe(nt.y, st.qoe_range), trace.qoe, rtol=0, atol=1e-12)
        np.testing.assert_allclose(denormalize_features(nt.x, st), trace.features(), rtol=0, atol=1e-12)

    def test_pi_passthrough(self):
        trace = synth_trace(SynthParams(40, [(5, 2)], seed=0))
        nt = normalize(trace, fit_stats([trace]))
        np.testing.assert_array_equal(nt.x[1], trace.pi)

    def test_clamps_out_of_range(self):
        trace = synth_trace(SynthParams(150, seed=0))
        nt = normalize(trace, self.stats())
        assert nt.clamped == 49  # tr runs 0..149 against a 0..100 range
        assert nt.x[3].max() == 1.0

    def test_constant_feature_gets_unit_span(self):
        trace = synth_trace(SynthParams(20, seed=0))
        st = fit_stats([trace])
        assert st.bounds["nr"] == (0.0, 1.0)

    def test_mixed_ranges_rejected(self):
        a = synth_trace(SynthParams(10, qoe_range=(0, 100)))
        b = synth_trace(SynthParams(10, qoe_range=(1, 5)))
        with pytest.raises(DataError):
            fit_stats([a, b])

    @settings(max_examples=50, deadline=None)
    @given(lo=st.floats(-100, 100), span=st.floats(0.01, 1000), u=st.lists(st.floats(0, 1), min_size=1, max_size=20))
    def test_qoe_bijection(self, lo, span, u):
        rng = (lo, lo + span)
        q = denormalize_qoe(u, rng)
        back = denormalize_qoe(normalize_qoe(q, rng), rng)
        assert np.max(np.abs(back - q)) <= 1e-12 * max(1.0, abs(lo) + span)


def grid_db(contents=6, patterns=6):
    return synth_database(contents * patterns, 20, seed=2, contents=contents, patterns=patterns)


class TestSplit:
    def test_leave_one_out_counts(self):
        db = grid_db()
        folds = split(db, SplitProtocol(LEAVE_ONE_OUT))
        assert len(folds) == 36
        assert all(len(f.train) == 25 and len(f.test) == 1 for f in folds)

    def test_leave_one_out_exclusion(self):
        db = grid_db()
        for fold in split(db, SplitProtocol("loo")):
            test = fold.test[0]
            assert test not in fold.train
            assert all(t.content_id != test.content_id and t.pattern_id != test.pattern_id for t in fold.train)

    def test_two_unrelated_traces(self):
        db = synth_database(2, 10, seed=0)
        folds = split(db, SplitProtocol(LEAVE_ONE_OUT))
        assert folds[0].train == [db[1]] and folds[1].train == [db[0]]

    def test_leave_one_out_needs_metadata(self):
        db = synth_database(2, 10, seed=0)
        db[0].content_id = ""
        with pytest.raises(SplitError, match="metadata"):
            split(db, SplitProtocol(LEAVE_ONE_OUT))

    def test_leave_one_out_empty_training(self):
        db = synth_database(2, 10, seed=0)
        db[1].content_id = db[0].content_id
        with pytest.raises(SplitError):
            split(db, SplitProtocol(LEAVE_ONE_OUT))

    def test_80_20(self):
        db = grid_db()
        a = split(db, SplitProtocol(RANDOM_80_20, seed=3))
        b = split(db, SplitProtocol("80_20", seed=3))
        assert len(a) == 1
        assert (len(a[0].train), len(a[0].test)) == (28, 8)
        assert [t.id for t in a[0].train] == [t.id for t in b[0].train]
        assert {t.id for t in a[0].train}.isdisjoint(t.id for t in a[0].test)
        c = split(db, SplitProtocol(RANDOM_80_20, seed=4))
        assert [t.id for t in c[0].test] != [t.id for t in a[0].test]

    def test_fraction_per_test(self):
        db = synth_database(10, 10, seed=0)
        folds = split(db, SplitProtocol(RANDOM_FRACTION, 0.8, seed=1))
        assert len(folds) == 10
        for i, fold in enumerate(folds):
            assert fold.test == [db[i]]
            assert len(fold.train) == 7  # floor(0.8 * 9)
            assert db[i] not in fold.train

    def test_bad_protocols(self):
        with pytest.raises(ParameterError):
            SplitProtocol("kfold")
        with pytest.raises(ParameterError):
            SplitProtocol(RANDOM_80_20, fraction=1.0)
        with pytest.raises(SplitError):
            split([], SplitProtocol())


class TestSynth:
    def test_steady_state(self):
        tr = synth_trace(SynthParams(80, quality=[(0, 2)], noise=0.0))
        assert not tr.nr.any() and not tr.pi.any()
        np.testing.assert_array_equal(tr.tr, np.arange(80))
        assert np.ptp(tr.qoe[40:]) < 1e-9

    def test_single_stall(self):
        tr = synth_trace(SynthParams(60, rebuffers=[(30, 3)]))
        np.testing.assert_array_equal(np.flatnonzero(tr.pi), [30, 31, 32])
        assert tr.nr[29] == 0 and tr.nr[30] == 1 and tr.nr[-1] == 1
        assert tr.tr[29] == 29 and tr.tr[30] == 0 and tr.tr[33] == 1

    def test_stall_lowers_qoe_then_recovers(self):
        clean = synth_trace(SynthParams(80, noise=0.0))
        stalled = synth_trace(SynthParams(80, rebuffers=[(30, 3)], noise=0.0))
        assert stalled.qoe[31] < clean.qoe[31] - 20
        np.testing.assert_allclose(stalled.qoe[33 + 15 :], clean.qoe[33 + 15 :])

    def test_switch_resets_tr(self):
        tr = synth_trace(SynthParams(40, quality=[(0, 0), (20, 3)]))
        assert tr.tr[20] == 0 and tr.tr[21] == 1 and tr.tr[19] == 19

    def test_determinism(self):
        p = SynthParams(120, [(10, 2), (50, 4)], [(0, 1), (60, 4)], seed=9, id="x")
        assert write_trace(synth_trace(p)) == write_trace(synth_trace(p))
        assert write_trace(synth_trace(p)) != write_trace(synth_trace(SynthParams(120, [(10, 2), (50, 4)], [(0, 1), (60, 4)], seed=10, id="x")))

    @pytest.mark.parametrize("stalls", [[(10, 5), (12, 2)], [(10, 2), (12, 2)]])
    def test_overlap_rejected(self, stalls):
        with pytest.raises(ParameterError):
            synth_trace(SynthParams(40, rebuffers=stalls))

    def test_bad_params(self):
        with pytest.raises(ParameterError):
            synth_trace(SynthParams(0))
        with pytest.raises(ParameterError):
            synth_trace(SynthParams(10, rebuffers=[(8, 5)]))
        with pytest.raises(ParameterError):
            synth_trace(SynthParams(10, quality=[(0, 9)]))

    def test_law_is_function_of_features(self):
        """Identical feature rows and histories give identical QoE."""
        a = synth_trace(SynthParams(60, [(20, 2)], [(0, 2)], noise=0.0, seed=1))
        b = synth_trace(SynthParams(60, [(20, 2)], [(0, 2)], noise=0.0, seed=2))
        np.testing.assert_array_equal(a.qoe, b.qoe)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**31), T=st.integers(1, 200))
    def test_random_schedules_satisfy_invariants(self, seed, T):
        r = np.random.default_rng(seed)
        params = SynthParams(T, random_rebuffer_schedule(T, r), random_quality_schedule(T, r), seed=seed)
        assert trace_violations(synth_trace(params)) == []

    def test_database_layout(self):
        db = grid_db(3, 4)
        assert len({t.content_id for t in db}) == 3 and len({t.pattern_id for t in db}) == 4
        same_pattern = [t for t in db if t.pattern_id == "p1"]
        assert all(np.array_equal(same_pattern[0].pi, t.pi) for t in same_pattern)
        for t in db:
            check_trace(t)
