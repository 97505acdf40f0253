"""Training loop, metrics, and replicate experiments over fixed or random topologies."""

from __future__ import annotations

import itertools
import logging
import math
import multiprocessing
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from usn import _seeding
from usn.datasets import Dataset
from usn.network import (
    Model,
    ModelConfig,
    cross_entropy,
    forward,
    init_model,
    layer_topologies,
    loss_and_grad,
    nadam_step,
    predict,
)
from usn.topology import pattern_distance

log = logging.getLogger(__name__)

METRICS = ("train_loss", "train_acc", "val_loss", "val_acc")
HISTORY_HEADER = ("run", "epoch", "train_loss", "train_acc", "val_loss", "val_acc", "seconds")
PERCENTILES = (10, 50, 90)


@dataclass
class EpochRecord:
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    seconds: float


@dataclass
class TrainHistory:
    seed: int
    config: dict
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def metric(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=np.float64)

    def rows(self, run: int = 0):
        for epoch, r in enumerate(self.records, start=1):
            yield (run, epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc, r.seconds)


class TrainingDiverged(RuntimeError):
    """Raised when a minibatch loss is not finite; carries the partial history."""

    def __init__(self, message, history, epoch, step):
        super().__init__(message)
        self.history = history
        self.epoch = epoch
        self.step = step

    def record(self) -> dict:
        return {
            "error": "non-finite loss",
            "message": str(self),
            "epoch": self.epoch,
            "step": self.step,
            "seed": self.history.seed,
            "completed_epochs": len(self.history),
        }


def accuracy(probabilities: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of columns whose argmax matches; ties go to the lowest class index."""
    if probabilities.shape != labels.shape:
        raise ValueError(f"shape mismatch {probabilities.shape} vs {labels.shape}")
    if probabilities.shape[1] == 0:
        return float("nan")
    return float(np.mean(np.argmax(probabilities, axis=0) == np.argmax(labels, axis=0)))


def evaluate(model: Model, data: Dataset, batch_size: int = 2048) -> tuple[float, float]:
    probs = predict(model, data.features, batch_size)
    return cross_entropy(probs, data.labels), accuracy(probs, data.labels)


def fit(
    model: Model,
    train_data: Dataset,
    val_data: Dataset,
    epochs: int = 30,
    batch_size: int = 32,
    seed: int = 0,
) -> TrainHistory:
    """Train ``model`` in place with minibatch Nadam.

    Each epoch visits a seeded permutation of the training set once, then
    evaluates loss and accuracy on the full training and validation sets in
    evaluation mode.
    """
    if epochs < 1:
        raise ValueError("epochs must be at least 1")
    if train_data.n_features != model.config.input_size or train_data.n_classes != model.config.output_size:
        raise ValueError("training data does not match the model's input/output sizes")
    if val_data.n_features != train_data.n_features or val_data.n_classes != train_data.n_classes:
        raise ValueError("validation data does not match the training data")
    history = TrainHistory(seed=_seeding.as_u64(seed), config=model.config.to_dict())
    shuffle_rng = _seeding.make_rng(seed, _seeding.SHUFFLE)
    dropout_rng = _seeding.make_rng(seed, _seeding.DROPOUT)
    x, y = train_data.features, train_data.labels.astype(model.dtype, copy=False)
    n = train_data.n_samples
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(n)
        for step, start in enumerate(range(0, n, batch_size)):
            idx = order[start : start + batch_size]
            probs, cache = forward(model, x[:, idx], training=True, rng=dropout_rng)
            loss, grads = loss_and_grad(probs, y[:, idx], cache, model)
            if not math.isfinite(loss):
                raise TrainingDiverged(
                    f"loss became {loss} at epoch {epoch}, step {step}", history, epoch, step
                )
            nadam_step(model, grads)
        seconds = time.perf_counter() - t0
        tr_loss, tr_acc = evaluate(model, train_data)
        va_loss, va_acc = evaluate(model, val_data)
        history.records.append(EpochRecord(tr_loss, tr_acc, va_loss, va_acc, seconds))
        log.debug("epoch %d: train %.4f/%.4f val %.4f/%.4f", epoch, tr_loss, tr_acc, va_loss, va_acc)
    return history


def overfit_gap(history: TrainHistory) -> np.ndarray:
    """Per-epoch training minus validation loss; overfitting drives it negative."""
    return history.metric("train_loss") - history.metric("val_loss")


@dataclass
class ReplicateSummary:
    topology_mode: str
    n_runs: int
    epochs: int
    percentiles: dict  # metric -> {10: array, 50: array, 90: array}
    final_loss_variance: float
    converging_loss_variance: float
    converging_epoch: int
    mean_topology_distance: float
    n_parameters: int
    histories: list[TrainHistory] = field(repr=False, default_factory=list)

    def median(self, metric: str) -> np.ndarray:
        return self.percentiles[metric][50]

    def final(self, metric: str, q: int = 50) -> float:
        return float(self.percentiles[metric][q][-1])

    def to_dict(self) -> dict:
        return {
            "topology_mode": self.topology_mode,
            "n_runs": self.n_runs,
            "epochs": self.epochs,
            "percentiles": {
                m: {f"p{q}": [_num(v) for v in arr] for q, arr in qs.items()}
                for m, qs in self.percentiles.items()
            },
            "final_loss_variance": _num(self.final_loss_variance),
            "converging_loss_variance": _num(self.converging_loss_variance),
            "converging_epoch": self.converging_epoch,
            "mean_topology_distance": _num(self.mean_topology_distance),
            "n_parameters": self.n_parameters,
            "run_seeds": [h.seed for h in self.histories],
        }


def _num(v):
    v = float(v)
    return v if math.isfinite(v) else None


def converging_epoch(summary) -> int:
    """1-based epoch of the minimal median validation loss (first on ties).

    Accepts a :class:`ReplicateSummary` or a sequence of per-epoch medians.
    """
    medians = summary.median("val_loss") if isinstance(summary, ReplicateSummary) else summary
    medians = np.asarray(medians, dtype=np.float64)
    if medians.size == 0:
        raise ValueError("need at least one epoch")
    return int(np.argmin(medians)) + 1


def _summarize(histories, mode, epochs, topologies, n_parameters):
    percentiles = {}
    for m in METRICS:
        stack = np.stack([h.metric(m) for h in histories])
        percentiles[m] = {q: np.percentile(stack, q, axis=0) for q in PERCENTILES}
    ddof = 1 if len(histories) > 1 else 0
    val = np.stack([h.metric("val_loss") for h in histories])
    conv = converging_epoch(percentiles["val_loss"][50])
    return ReplicateSummary(
        topology_mode=mode,
        n_runs=len(histories),
        epochs=epochs,
        percentiles=percentiles,
        final_loss_variance=float(np.var(val[:, -1], ddof=ddof)),
        converging_loss_variance=float(np.var(val[:, conv - 1], ddof=ddof)),
        converging_epoch=conv,
        mean_topology_distance=mean_pairwise_distance(topologies),
        n_parameters=n_parameters,
        histories=list(histories),
    )


def mean_pairwise_distance(topologies) -> float:
    """Mean pattern distance over all run pairs, averaged across hidden layers."""
    if len(topologies) < 2 or not topologies[0]:
        return 0.0
    per_layer = []
    for layer in range(len(topologies[0])):
        pats = [t[layer] for t in topologies]
        if pats[0].n_edges == 0:
            continue
        per_layer.append(np.mean([pattern_distance(a, b) for a, b in itertools.combinations(pats, 2)]))
    return float(np.mean(per_layer)) if per_layer else float("nan")


def _run_one(args):
    config, topologies, train, val, epochs, batch_size = args
    model = init_model(config, topologies)
    history = fit(model, train, val, epochs=epochs, batch_size=batch_size, seed=config.seed)
    return history, model.topologies(), sum(p.size for p in model.parameters())


def replicate_configs(config: ModelConfig, n_runs: int, topology_mode: str, master_seed: int):
    """Per-run configs and topology overrides derived from ``master_seed``.

    Fixed mode draws one topology set from the master seed and reuses it;
    random mode lets every run derive its own from its run seed.
    """
    if topology_mode not in ("fixed", "random"):
        raise ValueError(f"topology_mode must be 'fixed' or 'random', got {topology_mode!r}")
    if n_runs < 1:
        raise ValueError("n_runs must be at least 1")
    shared = None
    if topology_mode == "fixed":
        shared = layer_topologies(
            replace(config, seed=_seeding.derive_seed(master_seed, _seeding.FIXED_TOPOLOGY))
        )
    return [
        (replace(config, seed=_seeding.derive_seed(master_seed, _seeding.REPLICATE, k)), shared)
        for k in range(n_runs)
    ]


def run_replicates(
    config: ModelConfig,
    train_data: Dataset,
    val_data: Dataset,
    n_runs: int,
    topology_mode: str = "random",
    master_seed: int = 0,
    epochs: int = 30,
    batch_size: int = 32,
    workers: int = 1,
) -> ReplicateSummary:
    """Train ``n_runs`` independently seeded models and aggregate their histories."""
    jobs = [
        (cfg, topo, train_data, val_data, epochs, batch_size)
        for cfg, topo in replicate_configs(config, n_runs, topology_mode, master_seed)
    ]
    if workers > 1 and n_runs > 1:
        # fork is unsafe once the OpenMP runtime behind the kernels has started
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    histories = [r[0] for r in results]
    return _summarize(histories, topology_mode, epochs, [r[1] for r in results], int(results[0][2]))
