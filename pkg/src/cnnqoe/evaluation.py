"""Accuracy metrics, fold evaluation and the inference latency benchmark."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from cnnqoe.architecture import ComplexityReport, Model, complexity_report, receptive_field
from cnnqoe.data import Fold, NormalizationStats, denormalize_qoe, normalize
from cnnqoe.errors import CorrelationError, ParameterError, ShapeError
from cnnqoe.training import predict_samples, window_array

logger = logging.getLogger(__name__)


def _pair(a, b, min_len):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < min_len:
        raise ShapeError(f"need at least {min_len} samples, got {a.size}")
    return a, b


def pcc(a, b) -> float:
    """Sample Pearson correlation."""
    a, b = _pair(a, b, 2)
    da, db = a - a.mean(), b - b.mean()
    sa, sb = np.sqrt(np.dot(da, da)), np.sqrt(np.dot(db, db))
    if sa == 0 or sb == 0:
        raise CorrelationError("correlation undefined for a constant sequence")
    return float(np.clip(np.dot(da, db) / (sa * sb), -1.0, 1.0))


def average_ranks(a) -> np.ndarray:
    """1-based ranks with ties sharing the mean of their positions."""
    a = np.asarray(a, dtype=np.float64)
    order = np.argsort(a, kind="mergesort")
    sorted_a = a[order]
    # boundaries of runs of equal values
    starts = np.flatnonzero(np.r_[True, sorted_a[1:] != sorted_a[:-1]])
    ends = np.r_[starts[1:], a.size]
    ranks = np.empty(a.size)
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = (s + e + 1) / 2.0
    return ranks


def srocc(a, b) -> float:
    """Spearman rank-order correlation with average ranks for ties."""
    a, b = _pair(a, b, 2)
    return pcc(average_ranks(a), average_ranks(b))


def rmse(a, b) -> float:
    a, b = _pair(a, b, 1)
    d = a - b
    return float(np.sqrt(np.mean(d * d)))


# -- evaluation --------------------------------------------------------------


@dataclass
class TraceResult:
    fold: int
    trace_id: str
    samples: int
    pcc: float | None = None
    srocc: float | None = None
    rmse: float | None = None
    error: str = ""


@dataclass
class EvalReport:
    rows: list[TraceResult]
    aggregate: dict
    predictions: dict = field(default_factory=dict)  # trace id -> (y_true, y_pred)
    complexity: ComplexityReport | None = None
    latency: dict | None = None


def predict_trace(model: Model, x: np.ndarray) -> np.ndarray:
    """Per-second predictions for a normalized ``(C, T)`` feature matrix."""
    return predict_samples(model, window_array(x, receptive_field(model.config)))


def _aggregate(rows):
    agg = {}
    for name in ("pcc", "srocc", "rmse"):
        values = [getattr(r, name) for r in rows if getattr(r, name) is not None]
        agg[name] = float(np.mean(values)) if values else None
    return agg


def evaluate(models, folds: list[Fold], stats) -> EvalReport:
    """Predict every test trace of every fold and score it in native QoE units.

    ``models`` and ``stats`` are either single objects shared by all folds or
    lists with one entry per fold. Aggregates are unweighted means over the
    rows that produced a value.
    """
    per_fold_models = models if isinstance(models, (list, tuple)) else [models] * len(folds)
    per_fold_stats = stats if isinstance(stats, (list, tuple)) else [stats] * len(folds)
    if len(per_fold_models) != len(folds) or len(per_fold_stats) != len(folds):
        raise ShapeError("need one model and one stats entry per fold")

    rows, predictions = [], {}
    for f, (fold, model, st) in enumerate(zip(folds, per_fold_models, per_fold_stats)):
        for trace in fold.test:
            row = TraceResult(f, trace.id, len(trace))
            if len(trace) < 2:
                logger.warning("fold %d: trace %r has %d sample(s), skipped", f, trace.id, len(trace))
                row.error = "too short"
                rows.append(row)
                continue
            nt = normalize(trace, st)
            y_pred = denormalize_qoe(predict_trace(model, nt.x), st.qoe_range)
            y_true = trace.qoe
            predictions[trace.id] = (y_true, y_pred)
            row.rmse = rmse(y_true, y_pred)
            errors = []
            try:
                row.pcc = pcc(y_true, y_pred)
                row.srocc = srocc(y_true, y_pred)
            except CorrelationError as exc:
                errors.append(str(exc))
            row.error = "; ".join(errors)
            rows.append(row)
    return EvalReport(rows, _aggregate(rows), predictions)


def _fmt(v):
    return "" if v is None else repr(float(v))


def write_report(report: EvalReport, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fold", "trace_id", "samples", "pcc", "srocc", "rmse", "error"])
        for r in report.rows:
            w.writerow([r.fold, r.trace_id, r.samples, _fmt(r.pcc), _fmt(r.srocc), _fmt(r.rmse), r.error])
        agg = report.aggregate
        w.writerow(["mean", "", sum(r.samples for r in report.rows), _fmt(agg["pcc"]), _fmt(agg["srocc"]), _fmt(agg["rmse"]), ""])


def write_predictions(y_true, y_pred, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "y_true", "y_pred"])
        for t, (a, b) in enumerate(zip(y_true, y_pred)):
            w.writerow([t, repr(float(a)), repr(float(b))])


# -- latency benchmark ---------------------------------------------------------


@dataclass
class BenchResult:
    median_ms: float
    p95_ms: float
    mean_ms: float
    reps: int
    complexity: ComplexityReport

    def latency(self) -> dict:
        return {"median_ms": self.median_ms, "p95_ms": self.p95_ms, "mean_ms": self.mean_ms}


def bench_inference(model: Model, reps: int = 100, warmup: int = 10, seed: int = 0) -> BenchResult:
    """Time single-window predictions on one thread."""
    if reps < 30:
        raise ParameterError(f"reps must be >= 30, got {reps}")
    W = receptive_field(model.config)
    window = np.random.default_rng(seed).random((model.config.in_channels, W))
    times = np.empty(reps)
    with threadpool_limits(limits=1):
        for _ in range(warmup):
            model.forward_sequence(window)
        for i in range(reps):
            t0 = time.perf_counter()
            model.forward_sequence(window)[-1]
            times[i] = time.perf_counter() - t0
    times *= 1e3
    return BenchResult(
        median_ms=float(np.median(times)),
        p95_ms=float(np.percentile(times, 95)),
        mean_ms=float(times.mean()),
        reps=reps,
        complexity=complexity_report(model),
    )
