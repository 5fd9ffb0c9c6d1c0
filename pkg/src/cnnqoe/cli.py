"""Command-line entry point: cnnqoe <subcommand> ...

Settings come from built-in defaults, then an optional flat ``key = value``
config file (``--config``), then command-line flags. Exit status is 0 on
success, 2 on usage or configuration errors and 1 on runtime failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, replace
from pathlib import Path

from cnnqoe.architecture import (
    ModelConfig,
    build_model,
    complexity_report,
    count_flops,
    count_params,
    dilated_stack_receptive_field,
    load_model,
    receptive_field,
    save_model,
    validate_config,
)
from cnnqoe.data import (
    LEAVE_ONE_OUT,
    NormalizationStats,
    SplitProtocol,
    fit_stats,
    normalize,
    read_trace,
    read_traces,
    save_trace,
    split,
    synth_database,
)
from cnnqoe.errors import CnnQoeError, ConfigError, ParameterError, SplitError
from cnnqoe.evaluation import bench_inference, evaluate, write_predictions, write_report
from cnnqoe.evaluation import predict_trace
from cnnqoe.seeding import derive_rng
from cnnqoe.training import TrainConfig, grid_search, train, trace_samples, write_history, write_ranking
from cnnqoe.data import denormalize_qoe

logger = logging.getLogger("cnnqoe")


class UsageError(CnnQoeError):
    pass


def _int_list(text):
    return [int(v) for v in str(text).replace(" ", "").split(",") if v]


def _bool(text):
    if isinstance(text, bool):
        return text
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (parser, default)
SCHEMA = {
    "k": (int, 2),
    "L": (int, 3),
    "n": (int, 32),
    "variant": (str, "proposed"),
    "dropout_p": (float, 0.0),
    "window": (int, 0),
    "override_receptive_field": (_bool, False),
    "lr": (float, 1e-3),
    "epochs": (int, 100),
    "batch_size": (int, 32),
    "seed": (int, 0),
    "optimizer": (str, "adam"),
    "patience": (int, 0),
    "train": (str, ""),
    "val": (str, ""),
    "protocol": (str, ""),
    "fraction": (float, 0.8),
    "out_dir": (str, "."),
    "grid_k": (_int_list, [2, 3]),
    "grid_L": (_int_list, [2, 3, 4]),
    "grid_n": (_int_list, [16, 32, 64]),
    "jobs": (int, 1),
}


@dataclass
class RunConfig:
    values: dict

    def __getattr__(self, name):
        try:
            return self.__dict__["values"][name]
        except KeyError:
            raise AttributeError(name) from None

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            k=self.k,
            L=self.L,
            n=self.n,
            in_channels=4,
            variant=self.variant,
            dropout_p=self.dropout_p,
            override=self.override_receptive_field,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.lr,
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.seed,
            optimizer=self.optimizer,
            early_stop_patience=self.patience or None,
        )


def read_config_file(path) -> dict:
    raw = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        raw[key] = value
    return raw


def resolve_config(file_values: dict, flag_values: dict) -> RunConfig:
    """Merge defaults < config file < flags, validating every key."""
    values = {key: default for key, (_, default) in SCHEMA.items()}
    for source in (file_values, flag_values):
        for key, value in source.items():
            if value is None:
                continue
            if key not in SCHEMA:
                raise UsageError(f"unknown config key {key!r}")
            parser = SCHEMA[key][0]
            try:
                values[key] = parser(value) if isinstance(value, str) or parser is _int_list else value
            except ValueError as exc:
                raise UsageError(f"bad value for {key}: {exc}") from None
    return RunConfig(values)


def _run_config(args, keys) -> RunConfig:
    file_values = read_config_file(args.config) if getattr(args, "config", None) else {}
    flags = {key: getattr(args, key, None) for key in keys}
    if getattr(args, "override_receptive_field", False):
        flags["override_receptive_field"] = True
    cfg = resolve_config(file_values, flags)
    try:
        cfg.train_config()
    except ParameterError as exc:
        raise UsageError(str(exc)) from None
    return cfg


def stats_path(model_path) -> Path:
    return Path(model_path).with_suffix(".stats.json")


def _write_stats(stats: NormalizationStats, path) -> None:
    Path(path).write_text(json.dumps(stats.to_dict(), indent=2, sort_keys=True) + "\n")


def _read_stats(model_path) -> NormalizationStats:
    path = stats_path(model_path)
    if not path.exists():
        raise UsageError(f"normalization stats {path} not found next to the model")
    return NormalizationStats.from_dict(json.loads(path.read_text()))


def _checked_model_config(cfg: RunConfig) -> ModelConfig:
    mc = cfg.model_config()
    check = validate_config(mc)
    if not check.ok:
        raise ConfigError(check.violations)
    for msg in check.warnings:
        print(f"warning: {msg}", file=sys.stderr)
    if cfg.window and cfg.window < receptive_field(mc):
        raise UsageError(f"window {cfg.window} is shorter than the receptive field {receptive_field(mc)}")
    return mc


def _fit(mc: ModelConfig, tc: TrainConfig, train_traces, val_traces, seed):
    stats = fit_stats(train_traces)
    W = receptive_field(mc)
    samples = trace_samples([normalize(t, stats) for t in train_traces], W)
    val = trace_samples([normalize(t, stats) for t in val_traces], W) if val_traces else None
    model = build_model(mc, derive_rng(seed, "init"))
    result = train(model, samples, replace(tc, seed=int(derive_rng(seed, "train").integers(2**31))), val)
    return result, stats


# -- subcommands ---------------------------------------------------------------


def cmd_synth(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    traces = synth_database(
        args.count, args.duration, args.seed, contents=args.contents, patterns=args.patterns
    )
    for trace in traces:
        save_trace(trace, out / f"{trace.id}.csv")
    print(f"wrote {len(traces)} traces to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _run_config(args, ("k", "L", "n", "variant", "dropout_p", "window", "lr", "epochs", "batch_size", "seed", "optimizer", "patience", "train", "val", "out_dir"))
    mc = _checked_model_config(cfg)
    if not cfg.train:
        raise UsageError("no training traces given (--train or 'train =' in the config)")
    train_traces = read_traces(cfg.train)
    val_traces = read_traces(cfg.val) if cfg.val else []
    result, stats = _fit(mc, cfg.train_config(), train_traces, val_traces, cfg.seed)

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model_path = out / "model.cqoe"
    save_model(result.model, model_path)
    _write_stats(stats, stats_path(model_path))
    write_history(result.history, out / "history.csv")
    last = result.history[-1]
    print(f"model: k={mc.k} L={mc.L} n={mc.n} variant={mc.variant}")
    print(f"params: {count_params(result.model)}  receptive field: {receptive_field(mc)}")
    print(f"epochs: {len(result.history)}  final train loss: {last.train_loss:.6g}", end="")
    print(f"  final val loss: {last.val_loss:.6g}" if last.val_loss is not None else "")
    print(f"saved {model_path}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _run_config(args, ("protocol", "fraction", "seed", "lr", "epochs", "batch_size", "optimizer", "patience", "out_dir"))
    model = load_model(args.model)
    traces = read_traces(args.traces)
    out = Path(cfg.out_dir)
    if cfg.protocol:
        protocol = SplitProtocol(cfg.protocol, cfg.fraction, cfg.seed)
        if protocol.kind == LEAVE_ONE_OUT:
            missing = [t.id for t in traces if not t.content_id or not t.pattern_id]
            if missing:
                raise UsageError(
                    "leave-one-out needs '# content=' and '# pattern=' metadata; missing in: "
                    + ", ".join(missing)
                )
        folds = split(traces, protocol)
        models, stats = [], []
        for i, fold in enumerate(folds):
            result, st = _fit(model.config, cfg.train_config(), fold.train, [], derive_rng(cfg.seed, "fold", i).integers(2**31))
            models.append(result.model)
            stats.append(st)
        report = evaluate(models, folds, stats)
    else:
        from cnnqoe.data import Fold

        folds = [Fold([], traces)]
        report = evaluate(model, folds, _read_stats(args.model))
    (out / "predictions").mkdir(parents=True, exist_ok=True)
    write_report(report, out / "report.csv")
    for trace_id, (y, p) in report.predictions.items():
        write_predictions(y, p, out / "predictions" / f"{trace_id}.csv")
    agg = report.aggregate
    print(f"rows: {len(report.rows)}  mean pcc: {agg['pcc']}  mean srocc: {agg['srocc']}  mean rmse: {agg['rmse']}")
    return 0


def cmd_predict(args) -> int:
    model = load_model(args.model)
    stats = _read_stats(args.model)
    trace = read_trace(args.trace)
    nt = normalize(trace, stats)
    pred = denormalize_qoe(predict_trace(model, nt.x), stats.qoe_range)
    write_predictions(trace.qoe, pred, args.out)
    print(f"wrote {len(pred)} predictions to {args.out}")
    return 0


def cmd_bench(args) -> int:
    if args.reps < 30:
        raise UsageError("--reps must be at least 30")
    model = load_model(args.model)
    res = bench_inference(model, args.reps, args.warmup)
    c = res.complexity
    print(f"latency ms: median {res.median_ms:.4f}  p95 {res.p95_ms:.4f}  mean {res.mean_ms:.4f}  ({res.reps} reps)")
    print(f"params: {c.param_count}  flops/step: {c.flops_per_step}  receptive field: {c.receptive_field}  size: {c.model_size_bytes} bytes")
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("median_ms,p95_ms,mean_ms,reps,params,flops,receptive_field,model_size_bytes\n")
            fh.write(f"{res.median_ms!r},{res.p95_ms!r},{res.mean_ms!r},{res.reps},{c.param_count},{c.flops_per_step},{c.receptive_field},{c.model_size_bytes}\n")
    return 0


def cmd_inspect(args) -> int:
    model = load_model(args.model)
    mc = model.config
    c = complexity_report(model)
    print(f"variant: {mc.variant}  k={mc.k}  L={mc.L}  n={mc.n}  in_channels={mc.in_channels}  dropout_p={mc.dropout_p}")
    for name, conv in model.named_layers():
        wn = " +weight-norm" if conv.gain is not None else ""
        print(f"  {name:<16} {conv.out_channels}x{conv.in_channels}x{conv.width}  dilation={conv.dilation}{wn}")
    print(f"params: {c.param_count}")
    print(f"flops/step: {count_flops(model)}")
    print(f"receptive field: {c.receptive_field}")
    if mc.variant == "proposed":
        print(
            f"note: the dilated stack alone spans {dilated_stack_receptive_field(mc.k, mc.L)} steps; "
            f"the initial causal conv extends the literal stack to {c.receptive_field}"
        )
    print(f"model size: {c.model_size_bytes} bytes")
    return 0


def cmd_grid(args) -> int:
    cfg = _run_config(args, ("variant", "dropout_p", "lr", "epochs", "batch_size", "seed", "optimizer", "patience", "train", "val", "out_dir", "jobs"))
    if not cfg.train or not cfg.val:
        raise UsageError("grid search needs --train and --val traces")
    space = {"k": cfg.grid_k, "L": cfg.grid_L, "n": cfg.grid_n}
    base = replace(cfg.model_config(), override=cfg.override_receptive_field)
    result = grid_search(space, read_traces(cfg.train), read_traces(cfg.val), cfg.train_config(), base, jobs=cfg.jobs)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_ranking(result, out / "grid.csv")
    for cand in result.ranking:
        c = cand.config
        print(f"k={c.k} L={c.L} n={c.n}  params={cand.param_count}  val_rmse={cand.val_rmse:.6f}")
    print(f"skipped {len(result.skipped)} config(s) over the receptive-field bound")
    print(f"best: k={result.best.k} L={result.best.L} n={result.best.n}")
    return 0


# -- parser ------------------------------------------------------------------


def _add_model_flags(p):
    p.add_argument("--k", type=int)
    p.add_argument("--L", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--variant", choices=["proposed", "original_tcn"])
    p.add_argument("--dropout-p", dest="dropout_p", type=float)
    p.add_argument("--window", type=int)
    p.add_argument("--override-receptive-field", action="store_true")


def _add_train_flags(p):
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--optimizer", choices=["adam", "sgd"])
    p.add_argument("--patience", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cnnqoe", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write synthetic trace CSVs")
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--duration", type=int, default=120)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--contents", type=int)
    p.add_argument("--patterns", type=int)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config")
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--train")
    p.add_argument("--val")
    p.add_argument("--out-dir", dest="out_dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a model, or run a split protocol")
    p.add_argument("--config")
    p.add_argument("--model", required=True)
    p.add_argument("--traces", required=True)
    p.add_argument("--protocol", help="loo | 80_20 | fraction (omit to score the given model as-is)")
    p.add_argument("--fraction", type=float)
    _add_train_flags(p)
    p.add_argument("--out-dir", dest="out_dir")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="write per-second predictions for one trace")
    p.add_argument("--model", required=True)
    p.add_argument("--trace", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("bench", help="time single-window inference")
    p.add_argument("--model", required=True)
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("inspect", help="print model structure and complexity")
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("grid", help="grid-search k, L, n")
    p.add_argument("--config")
    p.add_argument("--variant", choices=["proposed", "original_tcn"])
    p.add_argument("--dropout-p", dest="dropout_p", type=float)
    p.add_argument("--override-receptive-field", action="store_true")
    _add_train_flags(p)
    p.add_argument("--train")
    p.add_argument("--val")
    p.add_argument("--jobs", type=int)
    p.add_argument("--out-dir", dest="out_dir")
    p.set_defaults(func=cmd_grid)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (UsageError, ConfigError, ParameterError) as exc:
        print(f"cnnqoe {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (CnnQoeError, OSError) as exc:
        print(f"cnnqoe {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
