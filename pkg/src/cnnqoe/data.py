"""QoE trace ingestion, normalization, split protocols and synthetic traces.

Trace CSV layout::

    # id=trace_000
    # content=c0
    # pattern=p0
    # qoe_min=0
    # qoe_max=100
    t,stsq,pi,nr,tr,qoe
    0,4.2,0,0,0,81.5
    ...

One row per second. ``stsq`` is a distortion score (larger is worse),
``pi`` flags rebuffering, ``nr`` counts rebuffering events so far and
``tr`` counts seconds since the last rebuffer or quality switch.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from cnnqoe.errors import DataError, ParameterError, ParseError, SplitError
from cnnqoe.seeding import derive_rng

logger = logging.getLogger(__name__)

COLUMNS = ("t", "stsq", "pi", "nr", "tr", "qoe")
FEATURES = ("stsq", "pi", "nr", "tr")
_TOL = 1e-9


@dataclass
class QoETrace:
    id: str
    stsq: np.ndarray
    pi: np.ndarray
    nr: np.ndarray
    tr: np.ndarray
    qoe: np.ndarray
    qoe_range: tuple[float, float]
    content_id: str = ""
    pattern_id: str = ""

    def __post_init__(self):
        self.stsq = np.asarray(self.stsq, dtype=np.float64)
        self.pi = np.asarray(self.pi, dtype=np.int64)
        self.nr = np.asarray(self.nr, dtype=np.int64)
        self.tr = np.asarray(self.tr, dtype=np.float64)
        self.qoe = np.asarray(self.qoe, dtype=np.float64)
        self.qoe_range = (float(self.qoe_range[0]), float(self.qoe_range[1]))

    def __len__(self):
        return self.qoe.size

    def features(self) -> np.ndarray:
        """Raw feature matrix ``(4, T)`` in (stsq, pi, nr, tr) order."""
        return np.stack([self.stsq, self.pi, self.nr, self.tr]).astype(np.float64)

    def __eq__(self, other):
        if not isinstance(other, QoETrace):
            return NotImplemented
        return (
            (self.id, self.content_id, self.pattern_id, self.qoe_range)
            == (other.id, other.content_id, other.pattern_id, other.qoe_range)
            and all(
                np.array_equal(getattr(self, f), getattr(other, f))
                for f in ("stsq", "pi", "nr", "tr", "qoe")
            )
        )


def trace_violations(trace: QoETrace) -> list[tuple[int, str]]:
    """Invariant violations as ``(time index, message)`` pairs."""
    out = []
    lo, hi = trace.qoe_range
    if not hi > lo:
        out.append((0, f"qoe range [{lo}, {hi}] is empty"))
    T = len(trace)
    for name in ("stsq", "pi", "nr", "tr"):
        if getattr(trace, name).shape != (T,):
            out.append((0, f"column {name} has length {getattr(trace, name).size}, expected {T}"))
            return out
    for t in range(T):
        if not np.isfinite(trace.stsq[t]) or trace.stsq[t] < 0:
            out.append((t, f"stsq must be finite and >= 0, got {trace.stsq[t]}"))
        if trace.pi[t] not in (0, 1):
            out.append((t, f"pi must be 0 or 1, got {trace.pi[t]}"))
        if trace.nr[t] < 0:
            out.append((t, f"nr must be >= 0, got {trace.nr[t]}"))
        if t > 0 and trace.nr[t] < trace.nr[t - 1]:
            out.append((t, f"nr decreases from {trace.nr[t - 1]} to {trace.nr[t]}"))
        tr = trace.tr[t]
        if not np.isfinite(tr) or tr < 0:
            out.append((t, f"tr must be finite and >= 0, got {tr}"))
        elif trace.pi[t] == 1 and abs(tr) > _TOL:
            out.append((t, f"tr must be 0 during rebuffering, got {tr}"))
        elif t > 0 and abs(tr) > _TOL and abs(tr - trace.tr[t - 1] - 1) > _TOL:
            out.append((t, f"tr must reset to 0 or advance by 1, got {trace.tr[t - 1]} -> {tr}"))
        q = trace.qoe[t]
        if not np.isfinite(q) or q < lo - _TOL or q > hi + _TOL:
            out.append((t, f"qoe {q} outside range [{lo}, {hi}]"))
    return out


def check_trace(trace: QoETrace) -> QoETrace:
    problems = trace_violations(trace)
    if problems:
        t, msg = problems[0]
        raise DataError(f"trace {trace.id!r} at t={t}: {msg}")
    return trace


# -- CSV -------------------------------------------------------------------


def parse_trace(raw) -> QoETrace:
    """Parse trace CSV text (``str`` or ``bytes``) and check all invariants."""
    if isinstance(raw, (bytes, bytearray)):
        raw = raw.decode("utf-8")
    meta: dict[str, str] = {}
    header = None
    header_line = 0
    rows: list[tuple[int, list[str]]] = []
    for lineno, line in enumerate(raw.splitlines(), start=1):
        stripped = line.strip()
        if not stripped:
            continue
        if stripped.startswith("#"):
            body = stripped[1:].strip()
            if "=" in body:
                key, value = body.split("=", 1)
                meta[key.strip()] = value.strip()
            continue
        fields = next(csv.reader([stripped]))
        if header is None:
            header, header_line = [f.strip() for f in fields], lineno
            missing = [c for c in COLUMNS if c not in header]
            if missing:
                raise ParseError(f"missing column(s): {', '.join(missing)}", header_line)
            continue
        rows.append((lineno, fields))
    if header is None:
        raise ParseError("no header row")
    if not rows:
        raise ParseError("trace has no data rows", header_line)
    for key in ("qoe_min", "qoe_max"):
        if key not in meta:
            raise ParseError(f"missing '# {key}=' metadata")
    try:
        qoe_range = (float(meta["qoe_min"]), float(meta["qoe_max"]))
    except ValueError as exc:
        raise ParseError(f"bad qoe range metadata: {exc}") from None

    idx = {c: header.index(c) for c in COLUMNS}
    cols: dict[str, list] = {c: [] for c in COLUMNS}
    for lineno, fields in rows:
        if len(fields) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(fields)}", lineno)
        try:
            t = int(fields[idx["t"]])
            stsq = float(fields[idx["stsq"]])
            pi = int(fields[idx["pi"]])
            nr = int(fields[idx["nr"]])
            tr = float(fields[idx["tr"]])
            qoe = float(fields[idx["qoe"]])
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
        if t != len(cols["t"]):
            raise ParseError(f"expected t={len(cols['t'])}, got {t}", lineno)
        for name, value in zip(COLUMNS, (t, stsq, pi, nr, tr, qoe)):
            cols[name].append(value)

    trace = QoETrace(
        id=meta.get("id", ""),
        content_id=meta.get("content", ""),
        pattern_id=meta.get("pattern", ""),
        stsq=cols["stsq"],
        pi=cols["pi"],
        nr=cols["nr"],
        tr=cols["tr"],
        qoe=cols["qoe"],
        qoe_range=qoe_range,
    )
    problems = trace_violations(trace)
    if problems:
        t, msg = problems[0]
        raise ParseError(msg, rows[t][0])
    return trace


def _num(x: float) -> str:
    return repr(float(x))


def write_trace(trace: QoETrace) -> str:
    """Canonical CSV text for ``trace``; floats use shortest round-trip form."""
    buf = io.StringIO()
    buf.write(f"# id={trace.id}\n# content={trace.content_id}\n# pattern={trace.pattern_id}\n")
    buf.write(f"# qoe_min={_num(trace.qoe_range[0])}\n# qoe_max={_num(trace.qoe_range[1])}\n")
    buf.write(",".join(COLUMNS) + "\n")
    for t in range(len(trace)):
        buf.write(
            f"{t},{_num(trace.stsq[t])},{int(trace.pi[t])},{int(trace.nr[t])},"
            f"{_num(trace.tr[t])},{_num(trace.qoe[t])}\n"
        )
    return buf.getvalue()


def read_trace(path) -> QoETrace:
    try:
        return parse_trace(Path(path).read_bytes())
    except ParseError as exc:
        raise ParseError(f"{path}: {exc}") from None


def save_trace(trace: QoETrace, path) -> None:
    Path(path).write_text(write_trace(trace), encoding="utf-8", newline="\n")


def read_traces(path) -> list[QoETrace]:
    """Read one trace file, or every ``*.csv`` in a directory (sorted by name)."""
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("*.csv"))
        if not files:
            raise DataError(f"no .csv traces in {path}")
        return [read_trace(f) for f in files]
    return [read_trace(path)]


# -- normalization -----------------------------------------------------------

_SCALED = ("stsq", "nr", "tr")


@dataclass(frozen=True)
class NormalizationStats:
    """Min-max bounds for the scaled features plus the QoE scale."""

    bounds: dict
    qoe_range: tuple[float, float]

    def to_dict(self) -> dict:
        return {"bounds": {k: list(v) for k, v in self.bounds.items()}, "qoe_range": list(self.qoe_range)}

    @classmethod
    def from_dict(cls, d) -> NormalizationStats:
        return cls({k: tuple(v) for k, v in d["bounds"].items()}, tuple(d["qoe_range"]))


def fit_stats(traces: list[QoETrace]) -> NormalizationStats:
    """Per-feature min/max over ``traces``.

    A feature that never varies (e.g. ``nr`` with no rebuffering) gets a unit
    span so that normalization stays defined.
    """
    if not traces:
        raise DataError("cannot fit normalization stats on zero traces")
    bounds = {}
    for name in _SCALED:
        values = np.concatenate([getattr(tr, name) for tr in traces]).astype(np.float64)
        lo, hi = float(values.min()), float(values.max())
        if not hi > lo:
            hi = lo + 1.0
        bounds[name] = (lo, hi)
    ranges = {tr.qoe_range for tr in traces}
    if len(ranges) != 1:
        raise DataError(f"traces disagree on qoe range: {sorted(ranges)}")
    return NormalizationStats(bounds, ranges.pop())


@dataclass
class NormalizedTrace:
    x: np.ndarray  # (4, T)
    y: np.ndarray  # (T,)
    clamped: int = 0


def normalize(trace: QoETrace, stats: NormalizationStats) -> NormalizedTrace:
    """Scale features and QoE to [0, 1]; out-of-range features are clamped."""
    x = trace.features()
    clamped = 0
    for row, name in enumerate(FEATURES):
        if name not in _SCALED:
            continue
        lo, hi = stats.bounds[name]
        scaled = (x[row] - lo) / (hi - lo)
        outside = (scaled < 0) | (scaled > 1)
        clamped += int(outside.sum())
        x[row] = np.clip(scaled, 0.0, 1.0)
    if clamped:
        logger.warning("trace %r: clamped %d feature values outside training range", trace.id, clamped)
    y = normalize_qoe(trace.qoe, stats.qoe_range)
    return NormalizedTrace(x, y, clamped)


def normalize_qoe(qoe, qoe_range) -> np.ndarray:
    lo, hi = qoe_range
    return (np.asarray(qoe, dtype=np.float64) - lo) / (hi - lo)


def denormalize_qoe(y, qoe_range) -> np.ndarray:
    lo, hi = qoe_range
    return np.asarray(y, dtype=np.float64) * (hi - lo) + lo


def denormalize_features(x, stats: NormalizationStats) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    for row, name in enumerate(FEATURES):
        if name in _SCALED:
            lo, hi = stats.bounds[name]
            x[row] = x[row] * (hi - lo) + lo
    return x


# -- split protocols -------------------------------------------------------

LEAVE_ONE_OUT = "leave_one_out_excluding_content_and_pattern"
RANDOM_80_20 = "random_80_20"
RANDOM_FRACTION = "random_fraction_per_test"
SPLIT_KINDS = (LEAVE_ONE_OUT, RANDOM_80_20, RANDOM_FRACTION)
SPLIT_ALIASES = {"loo": LEAVE_ONE_OUT, "80_20": RANDOM_80_20, "fraction": RANDOM_FRACTION}


@dataclass(frozen=True)
class SplitProtocol:
    kind: str = LEAVE_ONE_OUT
    fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        kind = SPLIT_ALIASES.get(self.kind, self.kind)
        if kind not in SPLIT_KINDS:
            raise ParameterError(f"unknown split kind {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if kind != LEAVE_ONE_OUT and not 0.0 < self.fraction < 1.0:
            raise ParameterError(f"fraction must lie in (0, 1), got {self.fraction}")


@dataclass
class Fold:
    train: list[QoETrace]
    test: list[QoETrace] = field(default_factory=list)


def _take(n_total: int, fraction: float) -> int:
    return int(np.floor(fraction * n_total + 1e-9))


def split(db: list[QoETrace], protocol: SplitProtocol) -> list[Fold]:
    if not db:
        raise SplitError("cannot split an empty database")
    folds = []
    if protocol.kind == LEAVE_ONE_OUT:
        for tr in db:
            if not tr.content_id or not tr.pattern_id:
                raise SplitError(
                    f"trace {tr.id!r} lacks content/pattern metadata required by leave-one-out"
                )
        for tr in db:
            train = [
                o for o in db if o.content_id != tr.content_id and o.pattern_id != tr.pattern_id
            ]
            if not train:
                raise SplitError(f"no training traces remain for test trace {tr.id!r}")
            folds.append(Fold(train, [tr]))
    elif protocol.kind == RANDOM_80_20:
        n_train = _take(len(db), protocol.fraction)
        if n_train < 1 or n_train >= len(db):
            raise SplitError(f"{len(db)} traces cannot be split at fraction {protocol.fraction}")
        order = derive_rng(protocol.seed, "split").permutation(len(db))
        folds.append(Fold([db[i] for i in sorted(order[:n_train])], [db[i] for i in sorted(order[n_train:])]))
    else:
        for i, tr in enumerate(db):
            rest = [o for j, o in enumerate(db) if j != i]
            n_train = _take(len(rest), protocol.fraction)
            if n_train < 1:
                raise SplitError(f"no training traces remain for test trace {tr.id!r}")
            pick = derive_rng(protocol.seed, "split", i).choice(len(rest), n_train, replace=False)
            folds.append(Fold([rest[j] for j in sorted(pick)], [tr]))
    return folds


# -- synthetic traces ---------------------------------------------------------

# STSQ per quality level; larger means more distortion.
STSQ_LEVELS = (2.0, 8.0, 16.0, 28.0, 45.0)
STSQ_SCALE = 60.0
SMOOTHING = 0.5
STALL_DEPTH = 0.3
STALL_DEPTH_STEP = 0.05
RECOVERY_SECONDS = 15.0
QOE_FLOOR = 0.15
QOE_GAIN = 0.8


@dataclass
class SynthParams:
    """Schedule for one synthetic session.

    ``rebuffers`` holds ``(start, length)`` stalls in seconds; ``quality``
    holds ``(start, level)`` switches into :data:`STSQ_LEVELS`, the first of
    which should start at 0 (level 0 is assumed otherwise).
    """

    duration: int
    rebuffers: list[tuple[int, int]] = field(default_factory=list)
    quality: list[tuple[int, int]] = field(default_factory=lambda: [(0, 0)])
    seed: int = 0
    noise: float = 1.0
    qoe_range: tuple[float, float] = (0.0, 100.0)
    id: str = "synth"
    content_id: str = ""
    pattern_id: str = ""


def synth_trace(params: SynthParams) -> QoETrace:
    """Generate a trace whose QoE follows a fixed law of its features.

    Per second, instantaneous quality is ``1 - stsq / 60`` (clipped to
    [0, 1]) and is exponentially smoothed with factor 0.5. Once a stall
    has occurred, a penalty of ``0.3 + 0.05 * (nr - 1)`` applies at full
    depth while ``tr`` is 0 and fades linearly to zero as ``tr`` reaches
    15 s, so it recovers over 15 s after each impairment. The normalized
    QoE is ``clip(0.15 + 0.8 * smoothed - penalty, 0, 1)``, mapped onto
    ``qoe_range``. Only ``stsq`` carries seeded noise.
    """
    T = int(params.duration)
    if T < 1:
        raise ParameterError(f"duration must be >= 1, got {T}")

    pi = np.zeros(T, dtype=np.int64)
    stalls = sorted(params.rebuffers)
    prev_end = -2
    for start, length in stalls:
        if length < 1 or start < 0 or start + length > T:
            raise ParameterError(f"rebuffer ({start}, {length}) does not fit a {T}s session")
        if start <= prev_end + 1:
            raise ParameterError(f"rebuffer at t={start} overlaps or touches the previous one")
        pi[start : start + length] = 1
        prev_end = start + length - 1

    level = np.zeros(T, dtype=np.int64)
    switches = np.zeros(T, dtype=bool)
    for start, lvl in sorted(params.quality):
        if not 0 <= lvl < len(STSQ_LEVELS):
            raise ParameterError(f"quality level {lvl} outside 0..{len(STSQ_LEVELS) - 1}")
        if not 0 <= start < T:
            raise ParameterError(f"quality switch at t={start} outside the session")
        level[start:] = lvl
    switches[1:] = level[1:] != level[:-1]

    rng = derive_rng(params.seed, "synth", params.id)
    base = np.asarray(STSQ_LEVELS)[level]
    stsq = np.maximum(base + params.noise * rng.standard_normal(T), 0.0)

    starts = np.zeros(T, dtype=np.int64)
    starts[0] = pi[0]
    starts[1:] = (pi[1:] == 1) & (pi[:-1] == 0)
    nr = np.cumsum(starts)

    tr = np.zeros(T)
    for t in range(1, T):
        tr[t] = 0.0 if pi[t] or switches[t] else tr[t - 1] + 1.0

    inst = np.clip(1.0 - stsq / STSQ_SCALE, 0.0, 1.0)
    smooth = np.empty(T)
    acc = inst[0]
    for t in range(T):
        acc = SMOOTHING * acc + (1.0 - SMOOTHING) * inst[t]
        smooth[t] = acc
    depth = np.where(nr > 0, STALL_DEPTH + STALL_DEPTH_STEP * (nr - 1), 0.0)
    penalty = depth * np.clip(1.0 - tr / RECOVERY_SECONDS, 0.0, 1.0)
    y = np.clip(QOE_FLOOR + QOE_GAIN * smooth - penalty, 0.0, 1.0)

    return QoETrace(
        id=params.id,
        content_id=params.content_id,
        pattern_id=params.pattern_id,
        stsq=stsq,
        pi=pi,
        nr=nr,
        tr=tr,
        qoe=denormalize_qoe(y, params.qoe_range),
        qoe_range=params.qoe_range,
    )


def random_quality_schedule(duration: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Quality switches every 10 to 30 s, starting at a random level."""
    level = int(rng.integers(len(STSQ_LEVELS)))
    schedule = [(0, level)]
    t = int(rng.integers(10, 31))
    while t < duration:
        level = int((level + rng.choice([-2, -1, 1, 2])) % len(STSQ_LEVELS))
        schedule.append((t, level))
        t += int(rng.integers(10, 31))
    return schedule


def random_rebuffer_schedule(duration: int, rng: np.random.Generator, max_events: int = 3) -> list[tuple[int, int]]:
    """Up to ``max_events`` non-touching stalls of 1 to 6 s."""
    events = []
    n = int(rng.integers(0, max_events + 1))
    if duration < 8:
        return events
    for start in sorted(rng.choice(np.arange(1, duration - 6), size=min(n, duration - 7), replace=False)):
        start = int(start)
        length = int(rng.integers(1, 7))
        if events and start <= events[-1][0] + events[-1][1]:
            continue
        events.append((start, min(length, duration - start)))
    return events


def synth_database(count: int, duration: int = 120, seed: int = 0, contents: int | None = None, patterns: int | None = None, qoe_range=(0.0, 100.0)) -> list[QoETrace]:
    """A set of synthetic traces with varied schedules.

    With ``contents`` and ``patterns`` given, trace ``i`` gets content
    ``i // patterns`` (which fixes its quality schedule) and pattern
    ``i % patterns`` (which fixes its stall schedule), mimicking a database of
    every content under every playout pattern.
    """
    traces = []
    for i in range(count):
        if contents and patterns:
            c, p = (i // patterns) % contents, i % patterns
        else:
            c, p = i, i
        quality = random_quality_schedule(duration, derive_rng(seed, "content", c))
        stalls = random_rebuffer_schedule(duration, derive_rng(seed, "pattern", p))
        params = SynthParams(
            duration=duration,
            rebuffers=stalls,
            quality=quality,
            seed=seed,
            qoe_range=qoe_range,
            id=f"trace_{i:03d}",
            content_id=f"c{c}",
            pattern_id=f"p{p}",
        )
        traces.append(synth_trace(params))
    return traces
