"""Command-line entry point: ``usn {space,gen,train,sweep,bench}``.

Experiment settings come from an optional flat ``key = value`` config file
and are overridden by command-line flags. Every file written embeds the fully
resolved configuration, and files are written to a temporary name and renamed
into place so an interrupted run never leaves a partial output.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from usn.modelspace import SpaceParams, expected_variation, usn_space_detail

log = logging.getLogger("usn")

DEFAULT_DENSITY_GRID = (0.0, 0.004, 0.016, 0.05, 0.1, 0.2, 0.333, 0.5, 0.75, 1.0)


class UsageError(Exception):
    pass


@dataclass
class ExperimentConfig:
    dataset: str = "mnist"  # mnist | idx | csv | blobs
    data_dir: str = ""
    train_images: str = ""
    train_labels: str = ""
    val_images: str = ""
    val_labels: str = ""
    csv_path: str = ""
    val_csv_path: str = ""
    label_column: str = "label"
    blob_classes: int = 3
    blob_features: int = 20
    blob_per_class: int = 200
    blob_separation: float = 6.0
    n_train: int = 12000
    n_val: int = 10000
    stratify: bool = False

    hidden_size: int = 250
    density: float = 0.1
    activation: str = "relu"
    dropout: float = 0.2
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7
    dtype: str = "float32"

    epochs: int = 30
    batch_size: int = 32
    n_runs: int = 1
    topology_mode: str = "random"
    density_grid: list = field(default_factory=lambda: list(DEFAULT_DENSITY_GRID))
    hidden_size_grid: list = field(default_factory=lambda: [250])
    seed: int = 0
    out: str = "runs"
    threads: int = 0  # 0 keeps the kernel library's default
    workers: int = 1

    def validate(self):
        if self.dataset not in ("mnist", "idx", "csv", "blobs"):
            raise UsageError(f"unknown dataset kind {self.dataset!r}")
        if self.topology_mode not in ("fixed", "random"):
            raise UsageError(f"topology_mode must be fixed or random, got {self.topology_mode!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.n_runs < 1:
            raise UsageError("epochs, batch_size and n_runs must be positive")
        if not self.density_grid or not self.hidden_size_grid:
            raise UsageError("density_grid and hidden_size_grid must be non-empty")
        for d in [self.density, *self.density_grid]:
            if not 0.0 <= d <= 1.0:
                raise UsageError(f"density {d} outside [0, 1]")
        paths = {
            "mnist": [self.data_dir or None],
            "idx": [self.train_images, self.train_labels, self.val_images, self.val_labels],
            "csv": [self.csv_path] + ([self.val_csv_path] if self.val_csv_path else []),
            "blobs": [],
        }[self.dataset]
        for p in paths:
            if p is not None and not Path(p).exists():
                raise UsageError(f"path not found: {p!r}")

    def model_config(self, input_size, output_size, hidden_size=None, density=None):
        from usn.network import HiddenLayerConfig, ModelConfig, OptimizerConfig

        layer = HiddenLayerConfig(
            size=hidden_size if hidden_size is not None else self.hidden_size,
            density=density if density is not None else self.density,
            activation=self.activation,
            dropout=self.dropout,
        )
        opt = OptimizerConfig(self.learning_rate, self.beta1, self.beta2, self.epsilon)
        return ModelConfig(input_size, [layer], output_size, seed=self.seed, optimizer=opt, dtype=self.dtype)

    def to_dict(self):
        return dataclasses.asdict(self)


_LIST_FIELDS = {"density_grid": float, "hidden_size_grid": int}


def _coerce(name, raw):
    ftype = {f.name: f.type for f in fields(ExperimentConfig)}[name]
    if name in _LIST_FIELDS:
        if isinstance(raw, (list, tuple)):
            return [_LIST_FIELDS[name](v) for v in raw]
        return [_LIST_FIELDS[name](v) for v in str(raw).replace(",", " ").split()]
    if ftype == "bool":
        if isinstance(raw, bool):
            return raw
        return str(raw).strip().lower() in ("1", "true", "yes", "on")
    if ftype == "int":
        return int(raw)
    if ftype == "float":
        return float(raw)
    return str(raw)


def parse_config_text(text: str) -> dict:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    known = {f.name for f in fields(ExperimentConfig)}
    out = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in known:
            raise UsageError(f"config line {n}: unknown key {key!r}")
        try:
            out[key] = _coerce(key, value)
        except ValueError as exc:
            raise UsageError(f"config line {n}: {exc}") from None
    return out


def resolve_config(config_path=None, overrides=None) -> ExperimentConfig:
    values = {}
    if config_path:
        values.update(parse_config_text(Path(config_path).read_text()))
    for k, v in (overrides or {}).items():
        if v is not None:
            try:
                values[k] = _coerce(k, v)
            except ValueError as exc:
                raise UsageError(f"--{k.replace('_', '-')}: {exc}") from None
    cfg = ExperimentConfig(**values)
    cfg.validate()
    return cfg


def write_atomic(path, data) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp-{os.getpid()}")
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(tmp, mode) as f:
        f.write(data)
    os.replace(tmp, path)
    return path


def _csv_text(header, rows, config=None) -> str:
    buf = io.StringIO()
    if config is not None:
        buf.write("# config: " + json.dumps(config, sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return v


def _json_text(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


# ---------------------------------------------------------------- space

SPACE_HEADER = ("density", "edges", "log10_N", "log10_N1", "log10_N2", "log10_Nu", "log10_p", "V")


def cmd_space(n_in: int, n_out: int, densities, rounding: str = "nearest") -> list[tuple]:
    """One row of model-space quantities per density."""
    rows = []
    for d in densities:
        p = SpaceParams(n_in, n_out, d)
        s = usn_space_detail(p, rounding)
        rows.append((p.density, p.total_edges, s.log10_n, s.log10_n1, s.log10_n2,
                     s.log10_nu, s.log10_p, expected_variation(p.density)))
    return rows


# ---------------------------------------------------------------- gen

def cmd_gen(n_in, n_out, density, seed, out_path, random=False):
    from usn.topology import degree_spec, generate_random, generate_uniform, serialize_pattern

    spec = degree_spec(n_in, n_out, density)
    if random:
        p = generate_random(n_in, n_out, spec.total_edges, seed)
    else:
        p = generate_uniform(spec, seed)
    write_atomic(out_path, serialize_pattern(p))
    return p


# ---------------------------------------------------------------- data

def load_data(cfg: ExperimentConfig):
    """Resolve ``(train, validation)`` datasets for an experiment config."""
    from usn import datasets as ds

    if cfg.dataset == "mnist":
        root = Path(cfg.data_dir) if cfg.data_dir else ds.default_mnist_dir()
        full_train = ds.load_mnist(root, "train")
        full_val = ds.load_mnist(root, "test")
        train, _ = ds.subsample_split(full_train, min(cfg.n_train, full_train.n_samples), 0, cfg.seed, cfg.stratify)
        if cfg.n_val < full_val.n_samples:
            val, _ = ds.subsample_split(full_val, cfg.n_val, 0, cfg.seed + 1, cfg.stratify)
        else:
            val = full_val
        return train, val
    if cfg.dataset == "idx":
        tr = ds.load_idx(cfg.train_images, cfg.train_labels)
        va = ds.load_idx(cfg.val_images, cfg.val_labels, n_classes=tr.n_classes)
        train, _ = ds.subsample_split(tr, min(cfg.n_train, tr.n_samples), 0, cfg.seed, cfg.stratify)
        val, _ = ds.subsample_split(va, min(cfg.n_val, va.n_samples), 0, cfg.seed + 1, cfg.stratify)
        return train, val
    if cfg.dataset == "csv":
        data = ds.load_csv(cfg.csv_path, cfg.label_column)
        if cfg.val_csv_path:
            val = ds.load_csv(cfg.val_csv_path, cfg.label_column)
            if val.class_names != data.class_names:
                raise ds.DatasetError("training and validation CSVs have different label sets")
            return data, val
        n_val = min(cfg.n_val, data.n_samples - 1)
        n_train = min(cfg.n_train, data.n_samples - n_val)
        return ds.subsample_split(data, n_train, n_val, cfg.seed, cfg.stratify)
    data = ds.synthetic_blobs(cfg.blob_classes, cfg.blob_features, cfg.blob_per_class,
                              cfg.blob_separation, cfg.seed)
    n_val = min(cfg.n_val, data.n_samples // 2)
    n_train = min(cfg.n_train, data.n_samples - n_val)
    return ds.subsample_split(data, n_train, n_val, cfg.seed, cfg.stratify)


# ---------------------------------------------------------------- train

HISTORY_HEADER = ("run", "epoch", "train_loss", "train_acc", "val_loss", "val_acc", "seconds")


def cmd_train(cfg: ExperimentConfig, data=None) -> dict:
    """Train one model; write ``history.csv``, ``summary.json`` and ``model.usnm``."""
    from usn.network import count_parameters, init_model, save_checkpoint
    from usn.training import converging_epoch, fit, overfit_gap

    out = Path(cfg.out)
    train, val = data if data is not None else load_data(cfg)
    model_cfg = cfg.model_config(train.n_features, train.n_classes)
    model = init_model(model_cfg)
    history = fit(model, train, val, epochs=cfg.epochs, batch_size=cfg.batch_size, seed=cfg.seed)
    resolved = cfg.to_dict()
    write_atomic(out / "history.csv", _csv_text(HISTORY_HEADER, history.rows(0), resolved))
    last = history.records[-1]
    summary = {
        "config": resolved,
        "model_config": model_cfg.to_dict(),
        "master_seed": cfg.seed,
        "n_train": train.n_samples,
        "n_val": val.n_samples,
        "pixel_scaling": "x/255" if cfg.dataset in ("mnist", "idx") else None,
        "n_parameters": count_parameters(model),
        "sparse_weights": sum(h.pattern.n_edges for h in model.hidden),
        "epochs": len(history),
        "final": {"train_loss": last.train_loss, "train_acc": last.train_acc,
                  "val_loss": last.val_loss, "val_acc": last.val_acc},
        "converging_epoch": converging_epoch(history.metric("val_loss")),
        "gap": overfit_gap(history).tolist(),
    }
    write_atomic(out / "summary.json", _json_text(summary))
    write_atomic(out / "model.usnm", save_checkpoint(model))
    return summary


# ---------------------------------------------------------------- sweep

SWEEP_HEADER = ("hidden_size", "density") + HISTORY_HEADER
CELL_HEADER = (
    "hidden_size", "density", "status", "n_parameters", "sparse_weights", "median_epoch_seconds",
    "converging_epoch", "final_val_loss_p10", "final_val_loss_p50", "final_val_loss_p90",
    "final_val_acc_p50", "final_train_loss_p50", "final_gap_p50", "final_loss_variance",
    "mean_topology_distance",
)


def cmd_sweep(cfg: ExperimentConfig, data=None) -> dict:
    """Full factorial (hidden size x density) replicate runs; returns the summary dict."""
    from usn.topology import degree_spec
    from usn.training import overfit_gap, run_replicates

    out = Path(cfg.out)
    train, val = data if data is not None else load_data(cfg)
    long_rows, cell_rows, cells = [], [], []
    for h in cfg.hidden_size_grid:
        for d in cfg.density_grid:
            model_cfg = cfg.model_config(train.n_features, train.n_classes, h, d)
            edges = degree_spec(train.n_features, h, d).total_edges
            try:
                s = run_replicates(model_cfg, train, val, cfg.n_runs, cfg.topology_mode, cfg.seed,
                                   epochs=cfg.epochs, batch_size=cfg.batch_size, workers=cfg.workers)
            except Exception as exc:  # a failed cell is recorded and the sweep continues
                log.error("cell hidden=%d density=%g failed: %s", h, d, exc)
                cells.append({"hidden_size": h, "density": d, "status": "failed", "error": str(exc)})
                cell_rows.append((h, d, "failed") + ("",) * (len(CELL_HEADER) - 3))
                continue
            for run, hist in enumerate(s.histories):
                long_rows.extend((h, d) + row for row in hist.rows(run))
            gaps = np.median([overfit_gap(x)[-1] for x in s.histories])
            secs = float(np.median([r.seconds for x in s.histories for r in x.records]))
            cell_rows.append((
                h, d, "ok", s.n_parameters, edges, secs, s.converging_epoch,
                s.final("val_loss", 10), s.final("val_loss", 50), s.final("val_loss", 90),
                s.final("val_acc", 50), s.final("train_loss", 50), float(gaps),
                s.final_loss_variance, s.mean_topology_distance,
            ))
            cells.append({"hidden_size": h, "density": d, "status": "ok",
                          "sparse_weights": edges, **s.to_dict()})
    resolved = cfg.to_dict()
    write_atomic(out / "sweep.csv", _csv_text(SWEEP_HEADER, long_rows, resolved))
    write_atomic(out / "cells.csv", _csv_text(CELL_HEADER, cell_rows, resolved))
    summary = {"config": resolved, "master_seed": cfg.seed, "cells": cells}
    write_atomic(out / "summary.json", _json_text(summary))
    return summary


# ---------------------------------------------------------------- bench

BENCH_HEADER = ("n_in", "n_out", "density", "edges", "n_parameters", "kernel", "median_seconds",
                "repetitions", "batch_size")


def _median_time(fn, repetitions, warmup=1):
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def bench_layer(n_in, n_out, density, repetitions=5, batch_size=32, n_classes=10, seed=0) -> dict:
    """Median wall-clock of the layer kernels and of one full training step."""
    from usn import sparselinalg as sl
    from usn.network import (HiddenLayerConfig, ModelConfig, count_parameters, forward,
                             init_model, loss_and_grad, nadam_step)

    cfg = ModelConfig(n_in, [HiddenLayerConfig(n_out, density, "relu", 0.0)], n_classes, seed=seed)
    model = init_model(cfg)
    rng = np.random.default_rng(seed)
    x = rng.random((n_in, batch_size), dtype=np.float32)
    y = np.zeros((n_classes, batch_size), dtype=np.float32)
    y[rng.integers(0, n_classes, batch_size), np.arange(batch_size)] = 1
    layer = model.hidden[0]
    g = rng.standard_normal((n_out, batch_size), dtype=np.float32)

    def step():
        probs, cache = forward(model, x, training=False)
        _, grads = loss_and_grad(probs, y, cache, model)
        nadam_step(model, grads)

    return {
        "edges": layer.pattern.n_edges,
        "n_parameters": count_parameters(model),
        "spmm": _median_time(lambda: sl.spmm(layer.matrix, x), repetitions),
        "spmm_transpose": _median_time(lambda: sl.spmm_transpose(layer.matrix, g), repetitions),
        "sddmm": _median_time(lambda: sl.sddmm(g, x, layer.pattern), repetitions),
        "step": _median_time(step, repetitions),
    }


def cmd_bench(shapes, densities, repetitions=5, batch_size=32, seed=0) -> list[tuple]:
    rows = []
    for n_in, n_out in shapes:
        for d in densities:
            r = bench_layer(n_in, n_out, d, repetitions, batch_size, seed=seed)
            for kernel in ("spmm", "spmm_transpose", "sddmm", "step"):
                rows.append((n_in, n_out, d, r["edges"], r["n_parameters"], kernel, r[kernel],
                             repetitions, batch_size))
    return rows


# ---------------------------------------------------------------- argparse

def _floats(s):
    try:
        return [float(v) for v in s.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {s!r}") from None


def _shape(s):
    try:
        a, b = s.lower().split("x")
        return int(a), int(b)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected NINxNOUT, got {s!r}") from None


def _common(p):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out", help="output directory (or file for gen)")
    p.add_argument("--threads", type=int, help="kernel worker threads")


_EXPERIMENT_FLAGS = [f.name for f in fields(ExperimentConfig) if f.name not in ("seed", "out", "threads")]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="usn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("space", help="model-space sizes as log10 values (CSV)")
    p.add_argument("n_in", type=int)
    p.add_argument("n_out", type=int)
    p.add_argument("density", type=float, nargs="*")
    p.add_argument("--grid", type=_floats, help="comma-separated densities")
    p.add_argument("--rounding", choices=("nearest", "split"), default="nearest",
                   help="how fractional mean degrees are turned into integers")
    _common(p)

    p = sub.add_parser("gen", help="write a sparsity pattern file")
    p.add_argument("n_in", type=int)
    p.add_argument("n_out", type=int)
    p.add_argument("density", type=float)
    p.add_argument("--random", action="store_true", help="unconstrained degrees")
    _common(p)

    for name, helptext in (("train", "train one model"), ("sweep", "hidden size x density sweep")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        for flag in _EXPERIMENT_FLAGS:
            p.add_argument("--" + flag.replace("_", "-"), dest=flag, default=None)

    p = sub.add_parser("bench", help="kernel and training-step timings (CSV)")
    p.add_argument("--shapes", type=lambda s: [_shape(v) for v in s.split(",")], default=[(2000, 1024)])
    p.add_argument("--densities", type=_floats, default=[0.1, 1.0])
    p.add_argument("--repetitions", type=int, default=5)
    p.add_argument("--batch-size", type=int, default=32)
    _common(p)
    return parser


def _emit(text, out_file=None):
    if out_file:
        write_atomic(out_file, text)
    else:
        sys.stdout.write(text)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads:
        from usn.sparselinalg import set_num_threads

        set_num_threads(args.threads)
    seed = args.seed if args.seed is not None else 0
    try:
        if args.command == "space":
            densities = list(args.density) + list(args.grid or [])
            if not densities:
                raise UsageError("give at least one density")
            if args.n_in < 1 or args.n_out < 1 or any(not 0 <= d <= 1 for d in densities):
                raise UsageError("sizes must be positive and densities in [0, 1]")
            rows = cmd_space(args.n_in, args.n_out, densities, args.rounding)
            meta = {"n_in": args.n_in, "n_out": args.n_out, "densities": densities,
                    "rounding": args.rounding}
            _emit(_csv_text(SPACE_HEADER, rows, meta if args.out else None),
                  Path(args.out) / "space.csv" if args.out else None)
            return 0
        if args.command == "gen":
            if args.n_in < 1 or args.n_out < 1 or not 0 <= args.density <= 1:
                raise UsageError("sizes must be positive and density in [0, 1]")
            out = args.out or f"pattern_{args.n_in}x{args.n_out}_{args.density:g}_{seed}.usn"
            p = cmd_gen(args.n_in, args.n_out, args.density, seed, out, args.random)
            print(f"wrote {p!r} to {out}", file=sys.stderr)
            return 0
        if args.command == "bench":
            rows = cmd_bench(args.shapes, args.densities, args.repetitions, args.batch_size, seed)
            meta = {"shapes": args.shapes, "densities": args.densities,
                    "repetitions": args.repetitions, "batch_size": args.batch_size, "seed": seed}
            _emit(_csv_text(BENCH_HEADER, rows, meta), Path(args.out) / "bench.csv" if args.out else None)
            return 0
        overrides = {k: getattr(args, k) for k in _EXPERIMENT_FLAGS}
        overrides.update(seed=args.seed, out=args.out, threads=args.threads)
        cfg = resolve_config(args.config, overrides)
    except UsageError as exc:
        parser.error(str(exc))
    if cfg.threads:
        from usn.sparselinalg import set_num_threads

        set_num_threads(cfg.threads)
    try:
        if args.command == "train":
            summary = cmd_train(cfg)
            print(_json_text(summary["final"]), end="")
            return 0
        summary = cmd_sweep(cfg)
        return 0 if all(c["status"] == "ok" for c in summary["cells"]) else 1
    except Exception as exc:
        from usn.training import TrainingDiverged

        record = exc.record() if isinstance(exc, TrainingDiverged) else {
            "error": type(exc).__name__, "message": str(exc)}
        record["config"] = cfg.to_dict()
        text = _json_text(record)
        sys.stderr.write(text)
        try:
            write_atomic(Path(cfg.out) / "error.json", text)
        except OSError:
            pass
        return 2


if __name__ == "__main__":
    sys.exit(main())
