"""Supervised training on windowed traces, plus architecture grid search."""

from __future__ import annotations

import csv
import itertools
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from cnnqoe.architecture import (
    MAX_RECEPTIVE_FIELD,
    Model,
    ModelConfig,
    build_model,
    count_params,
    receptive_field,
)
from cnnqoe.data import NormalizedTrace, QoETrace, fit_stats, normalize
from cnnqoe.errors import DataError, ParameterError, SearchError, ShapeError, TrainingError
from cnnqoe.seeding import derive_rng

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    early_stop_patience: int | None = None

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ParameterError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ParameterError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer not in ("adam", "sgd"):
            raise ParameterError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ParameterError(f"{name} must lie in (0, 1)")
        if self.early_stop_patience is not None and self.early_stop_patience < 1:
            raise ParameterError("early_stop_patience must be >= 1 or None")


# -- samples ---------------------------------------------------------------


@dataclass
class WindowSample:
    window: np.ndarray  # (C, W)
    target: float


def window_array(x: np.ndarray, W: int) -> np.ndarray:
    """All ``T`` windows of ``x`` (``(C, T)``), zero-padded on the left: ``(T, C, W)``."""
    if W < 1:
        raise ParameterError(f"window length must be >= 1, got {W}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 1:
        raise DataError("cannot window an empty trace")
    padded = np.concatenate([np.zeros((x.shape[0], W - 1)), x], axis=1)
    view = np.lib.stride_tricks.sliding_window_view(padded, W, axis=1)
    return np.ascontiguousarray(view.transpose(1, 0, 2))


def make_windows(trace: NormalizedTrace, W: int) -> list[WindowSample]:
    """One sample per second; the window for ``t`` ends at ``x[t]``."""
    windows = window_array(trace.x, W)
    return [WindowSample(w, float(y)) for w, y in zip(windows, trace.y)]


def stack_samples(samples) -> tuple[np.ndarray, np.ndarray]:
    """Accepts a list of :class:`WindowSample` or an ``(X, y)`` pair."""
    if isinstance(samples, tuple):
        X, y = samples
        return np.asarray(X, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if not samples:
        raise DataError("no training samples")
    return np.stack([s.window for s in samples]), np.array([s.target for s in samples])


def trace_samples(traces: list[NormalizedTrace], W: int) -> tuple[np.ndarray, np.ndarray]:
    X = np.concatenate([window_array(t.x, W) for t in traces])
    y = np.concatenate([t.y for t in traces])
    return X, y


# -- loss and optimizers -------------------------------------------------------


def mse_loss(pred, target) -> tuple[float, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"pred {pred.shape} vs target {target.shape}")
    if pred.size == 0:
        raise ShapeError("empty loss input")
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


class Sgd:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params, grads):
        _check_finite(grads)
        for name, p in params:
            p -= self.lr * grads[name]


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params, grads):
        _check_finite(grads)
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in params:
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def _check_finite(grads):
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in {name}", layer=name)


def make_optimizer(tconfig: TrainConfig):
    if tconfig.optimizer == "sgd":
        return Sgd(tconfig.learning_rate)
    return Adam(tconfig.learning_rate, tconfig.adam_beta1, tconfig.adam_beta2, tconfig.adam_epsilon)


# -- training loop ---------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float | None = None


@dataclass
class TrainResult:
    model: Model
    history: list[EpochRecord] = field(default_factory=list)
    stopped_early: bool = False

    @property
    def final_train_rmse(self) -> float:
        return float(np.sqrt(self.history[-1].train_loss))


def predict_samples(model: Model, X: np.ndarray, chunk: int = 4096) -> np.ndarray:
    if X.shape[0] == 0:
        return np.zeros(0)
    return np.concatenate(
        [model.forward_sequence(X[i : i + chunk])[:, -1] for i in range(0, X.shape[0], chunk)]
    )


def sample_loss(model: Model, X, y) -> float:
    return mse_loss(predict_samples(model, X), y)[0]


def train(model: Model, samples, tconfig: TrainConfig, validation=None) -> TrainResult:
    """Fit ``model`` in place with mini-batch MSE.

    The recorded train loss of an epoch is the full-set loss after that
    epoch's updates, so the last entry describes the returned model.
    """
    X, y = stack_samples(samples)
    if X.shape[0] == 0:
        raise DataError("no training samples")
    Xv = yv = None
    if validation is not None:
        Xv, yv = stack_samples(validation)

    shuffle_rng = derive_rng(tconfig.seed, "shuffle")
    dropout_rng = derive_rng(tconfig.seed, "dropout")
    optimizer = make_optimizer(tconfig)
    params = model.parameters()
    history: list[EpochRecord] = []
    best = (np.inf, None)
    stale = 0
    N = X.shape[0]

    for epoch in range(1, tconfig.epochs + 1):
        order = shuffle_rng.permutation(N)
        for start in range(0, N, tconfig.batch_size):
            idx = order[start : start + tconfig.batch_size]
            out, cache = model.forward_sequence(X[idx], training=True, rng=dropout_rng, keep_cache=True)
            _, dpred = mse_loss(out[:, -1], y[idx])
            dout = np.zeros_like(out)
            dout[:, -1] = dpred
            try:
                optimizer.step(params, model.backward(cache, dout))
            except TrainingError as exc:
                raise TrainingError(str(exc), history=history, layer=exc.layer) from None

        record = EpochRecord(epoch, sample_loss(model, X, y))
        if Xv is not None:
            record.val_loss = sample_loss(model, Xv, yv)
        if not np.isfinite(record.train_loss) or (
            record.val_loss is not None and not np.isfinite(record.val_loss)
        ):
            raise TrainingError(f"loss diverged at epoch {epoch}", history=history)
        history.append(record)
        logger.debug("epoch %d train %.6g val %s", epoch, record.train_loss, record.val_loss)

        if tconfig.early_stop_patience is not None and record.val_loss is not None:
            if record.val_loss < best[0]:
                best = (record.val_loss, model.state())
                stale = 0
            else:
                stale += 1
                if stale >= tconfig.early_stop_patience:
                    model.load_state(best[1])
                    return TrainResult(model, history, stopped_early=True)
    return TrainResult(model, history)


def write_history(history: list[EpochRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss"])
        for r in history:
            w.writerow([r.epoch, repr(r.train_loss), "" if r.val_loss is None else repr(r.val_loss)])


# -- grid search -------------------------------------------------------------

SEARCH_SPACE = {"k": [2, 3], "L": [2, 3, 4], "n": [16, 32, 64]}


@dataclass
class Candidate:
    config: ModelConfig
    val_rmse: float
    param_count: int
    index: int


@dataclass
class GridResult:
    ranking: list[Candidate]
    skipped: list[ModelConfig]

    @property
    def best(self) -> ModelConfig:
        return self.ranking[0].config


def _fit_candidate(args):
    index, config, data, tconfig, seed = args
    X, y, Xv, yv = data
    W = receptive_field(config)
    model = build_model(config, derive_rng(seed, "init", index))
    tc = replace(tconfig, seed=int(derive_rng(seed, "train", index).integers(2**31)))
    train(model, (X[..., -W:], y), tc, (Xv[..., -W:], yv))
    rmse = float(np.sqrt(sample_loss(model, Xv[..., -W:], yv)))
    return Candidate(config, rmse, count_params(model), index)


def grid_search(
    space: dict,
    train_traces: list[QoETrace],
    val_traces: list[QoETrace],
    tconfig: TrainConfig,
    base: ModelConfig | None = None,
    jobs: int = 1,
) -> GridResult:
    """Train one model per (k, L, n) and rank by validation RMSE.

    Configs whose receptive field exceeds 20 steps are skipped. Ties go to
    fewer parameters, then smaller L, then smaller k.
    """
    base = base or ModelConfig()
    if not train_traces or not val_traces:
        raise SearchError("grid search needs training and validation traces")
    keys = ("k", "L", "n")
    values = [list(space.get(key, [getattr(base, key)])) for key in keys]
    if any(not v for v in values):
        raise SearchError("empty hyperparameter list in search space")

    configs, skipped = [], []
    for k, L, n in itertools.product(*values):
        cfg = replace(base, k=int(k), L=int(L), n=int(n))
        if receptive_field(cfg) > MAX_RECEPTIVE_FIELD:
            skipped.append(cfg)
        else:
            configs.append(cfg)
    if not configs:
        raise SearchError("every config in the space violates the receptive-field bound")

    stats = fit_stats(train_traces)
    W = max(receptive_field(c) for c in configs)
    X, y = trace_samples([normalize(t, stats) for t in train_traces], W)
    Xv, yv = trace_samples([normalize(t, stats) for t in val_traces], W)
    tasks = [(i, cfg, (X, y, Xv, yv), tconfig, tconfig.seed) for i, cfg in enumerate(configs)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_fit_candidate, tasks))
    else:
        results = [_fit_candidate(t) for t in tasks]
    return GridResult(rank_candidates(results), skipped)


def rank_candidates(candidates: list[Candidate]) -> list[Candidate]:
    """Lowest validation RMSE first; ties go to fewer params, then smaller L, then k."""
    return sorted(candidates, key=lambda c: (c.val_rmse, c.param_count, c.config.L, c.config.k))


def write_ranking(result: GridResult, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "k", "L", "n", "variant", "receptive_field", "params", "val_rmse"])
        for rank, c in enumerate(result.ranking, start=1):
            cfg = c.config
            w.writerow([rank, cfg.k, cfg.L, cfg.n, cfg.variant, receptive_field(cfg), c.param_count, repr(c.val_rmse)])
