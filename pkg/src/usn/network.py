"""Multilayer perceptron with uniform sparse hidden layers and a dense softmax head.

Activations are feature-major: an input batch has shape ``(input_size, batch)``.
Each hidden layer computes ``g(W @ x + b)`` with ``W`` restricted to a fixed
uniform pattern, optionally followed by inverted dropout; the output layer is
dense and feeds a softmax trained with categorical cross-entropy and Nadam.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from usn import _seeding
from usn.sparselinalg import SparseMatrix, sddmm, spmm, spmm_transpose
from usn.topology import (
    PatternFormatError,
    SparsityPattern,
    degree_spec,
    generate_uniform,
    read_pattern,
    serialize_pattern,
)

log = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "identity")
PROB_FLOOR = 1e-12

CHECKPOINT_MAGIC = b"USNM"
CHECKPOINT_VERSION = 1


@dataclass
class HiddenLayerConfig:
    size: int
    density: float = 1.0
    activation: str = "relu"
    dropout: float = 0.0

    def __post_init__(self):
        if self.size < 1:
            raise ValueError(f"hidden layer size must be positive, got {self.size}")
        if not 0.0 <= self.density <= 1.0:
            raise ValueError(f"density must lie in [0, 1], got {self.density}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {self.dropout}")


@dataclass
class OptimizerConfig:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7


@dataclass
class ModelConfig:
    input_size: int
    hidden_layers: list[HiddenLayerConfig]
    output_size: int
    seed: int = 0
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    dtype: str = "float32"

    def __post_init__(self):
        if self.input_size < 1 or self.output_size < 1:
            raise ValueError("input and output sizes must be positive")
        self.hidden_layers = [
            h if isinstance(h, HiddenLayerConfig) else HiddenLayerConfig(**h)
            for h in self.hidden_layers
        ]
        if isinstance(self.optimizer, dict):
            self.optimizer = OptimizerConfig(**self.optimizer)
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class SparseWeights:
    matrix: SparseMatrix
    bias: np.ndarray

    @property
    def pattern(self) -> SparsityPattern:
        return self.matrix.pattern

    @property
    def values(self) -> np.ndarray:
        return self.matrix.values


@dataclass
class NadamState:
    m: list
    v: list
    step: int = 0


class Model:
    """Parameters, fixed topologies and optimizer state of one network.

    ``hidden[k].matrix`` has shape ``(size_k, fan_in_k)``: its pattern rows are
    the layer's output neurons.
    """

    def __init__(self, config: ModelConfig, hidden, out_weights, out_bias):
        self.config = config
        self.hidden = list(hidden)
        self.out_weights = out_weights
        self.out_bias = out_bias
        self.state = NadamState([np.zeros_like(p) for p in self.parameters()],
                                [np.zeros_like(p) for p in self.parameters()])

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def parameters(self) -> list[np.ndarray]:
        """Trainable arrays in a fixed order; gradients use the same order."""
        params = []
        for layer in self.hidden:
            params += [layer.matrix.values, layer.bias]
        return params + [self.out_weights, self.out_bias]

    def topologies(self) -> list[SparsityPattern]:
        """Input-major topology (rows = layer inputs) of every hidden layer."""
        return [layer.pattern.transpose() for layer in self.hidden]

    def copy(self) -> "Model":
        hidden = [
            SparseWeights(SparseMatrix(h.pattern, h.values.copy()), h.bias.copy())
            for h in self.hidden
        ]
        m = Model(self.config, hidden, self.out_weights.copy(), self.out_bias.copy())
        m.state = NadamState([a.copy() for a in self.state.m],
                             [a.copy() for a in self.state.v], self.state.step)
        return m


def _layer_sizes(config):
    sizes = [config.input_size] + [h.size for h in config.hidden_layers]
    return list(zip(sizes[:-1], sizes[1:]))


def layer_topologies(config: ModelConfig) -> list[SparsityPattern]:
    """Seed-derived uniform topologies for every hidden layer of ``config``."""
    out = []
    for k, ((n_in, n_out), h) in enumerate(zip(_layer_sizes(config), config.hidden_layers)):
        seed = _seeding.derive_seed(config.seed, _seeding.PATTERN, k)
        out.append(generate_uniform(degree_spec(n_in, n_out, h.density), seed))
    return out


def _edge_init(rng, pattern, dtype):
    # Glorot-style limit from each edge's actual in-degree and out-degree
    rows = pattern.row_ids()
    fan_in = pattern.row_degrees()[rows]
    fan_out = pattern.col_degrees()[pattern.col_indices]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return (rng.uniform(-1.0, 1.0, size=pattern.n_edges) * limit).astype(dtype)


def init_model(config: ModelConfig, topologies=None) -> Model:
    """Build a model deterministically from ``config.seed``.

    ``topologies`` (input-major, one per hidden layer) overrides the
    seed-derived patterns, which is how fixed-topology replicates share one
    structure while re-drawing weights.
    """
    if topologies is None:
        topologies = layer_topologies(config)
    if len(topologies) != len(config.hidden_layers):
        raise ValueError("need one topology per hidden layer")
    dtype = np.dtype(config.dtype)
    rng = _seeding.make_rng(config.seed, _seeding.INIT)
    hidden = []
    for (n_in, n_out), topo in zip(_layer_sizes(config), topologies):
        if topo.shape != (n_in, n_out):
            raise ValueError(f"topology shape {topo.shape} does not match layer {n_in}x{n_out}")
        pattern = topo.transpose()
        values = _edge_init(rng, pattern, dtype)
        hidden.append(SparseWeights(SparseMatrix(pattern, values), np.zeros(n_out, dtype=dtype)))
    fan_in = config.hidden_layers[-1].size if config.hidden_layers else config.input_size
    limit = np.sqrt(6.0 / (fan_in + config.output_size))
    out_w = rng.uniform(-limit, limit, size=(config.output_size, fan_in)).astype(dtype)
    out_b = np.zeros(config.output_size, dtype=dtype)
    return Model(config, hidden, out_w, out_b)


def softmax(z: np.ndarray) -> np.ndarray:
    """Column-wise softmax with max subtraction."""
    e = np.exp(z - z.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


def forward(model: Model, x: np.ndarray, training: bool = False, rng=None):
    """Return ``(probabilities, cache)`` for a feature-major batch ``x``.

    Dropout is active only when ``training`` is true, in which case ``rng``
    supplies the masks.
    """
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[0] != model.config.input_size:
        raise ValueError(f"expected input of shape ({model.config.input_size}, batch), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite values in network input")
    x = x.astype(model.dtype, copy=False)
    inputs, pre, masks = [], [], []
    a = x
    for layer, cfg in zip(model.hidden, model.config.hidden_layers):
        inputs.append(a)
        y = spmm(layer.matrix, a)
        y += layer.bias[:, None]
        pre.append(y)
        a = np.maximum(y, 0) if cfg.activation == "relu" else y
        mask = None
        if training and cfg.dropout > 0.0:
            if rng is None:
                raise ValueError("training-mode dropout needs an rng")
            keep = rng.random(a.shape) >= cfg.dropout
            mask = keep.astype(a.dtype) / a.dtype.type(1.0 - cfg.dropout)
            a = a * mask
        masks.append(mask)
    logits = model.out_weights @ a + model.out_bias[:, None]
    probs = softmax(logits)
    cache = {"inputs": inputs, "pre": pre, "masks": masks, "last": a}
    return probs, cache


_clamp_reported = False


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-probability of the true class, floored at ``PROB_FLOOR``."""
    global _clamp_reported
    p = np.sum(probs * labels, axis=0, dtype=np.float64)
    clamped = int(np.count_nonzero(p < PROB_FLOOR))
    if clamped:
        level = logging.DEBUG if _clamp_reported else logging.WARNING
        log.log(level, "clamped %d probabilities to %g before log", clamped, PROB_FLOOR)
        _clamp_reported = True
    return float(-np.mean(np.log(np.maximum(p, PROB_FLOOR))))


def loss_and_grad(probs, labels, cache, model):
    """Cross-entropy loss and gradients ordered like ``model.parameters()``."""
    if probs.shape != labels.shape:
        raise ValueError(f"probabilities {probs.shape} and labels {labels.shape} differ")
    batch = probs.shape[1]
    loss = cross_entropy(probs, labels)
    dz = (probs - labels) / probs.dtype.type(batch)
    grads_out = [dz @ cache["last"].T, dz.sum(axis=1)]
    da = model.out_weights.T @ dz
    grads = []
    for k in range(len(model.hidden) - 1, -1, -1):
        layer, cfg = model.hidden[k], model.config.hidden_layers[k]
        if cache["masks"][k] is not None:
            da = da * cache["masks"][k]
        dy = da * (cache["pre"][k] > 0) if cfg.activation == "relu" else da
        grads = [sddmm(dy, cache["inputs"][k], layer.pattern), dy.sum(axis=1)] + grads
        if k > 0:
            da = spmm_transpose(layer.matrix, dy)
    return loss, grads + grads_out


def nadam_step(model: Model, grads) -> None:
    """One in-place Nadam update of every parameter."""
    params = model.parameters()
    if len(grads) != len(params):
        raise ValueError(f"expected {len(params)} gradient arrays, got {len(grads)}")
    for g, p in zip(grads, params):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient")
    opt = model.config.optimizer
    st = model.state
    st.step += 1
    t = st.step
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, st.m, st.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        direction = (b1 / c1) * m + ((1.0 - b1) / c1) * g
        p -= (opt.learning_rate * direction / (np.sqrt(v / c2) + opt.epsilon)).astype(p.dtype, copy=False)


def count_parameters(model: Model) -> int:
    return sum(int(p.size) for p in model.parameters())


def predict(model: Model, x: np.ndarray, batch_size: int = 2048) -> np.ndarray:
    """Evaluation-mode probabilities, computed in column chunks."""
    chunks = [
        forward(model, x[:, i : i + batch_size], training=False)[0]
        for i in range(0, x.shape[1], batch_size)
    ]
    return np.concatenate(chunks, axis=1)


def save_checkpoint(model: Model) -> bytes:
    """Serialize topology and parameters; optimizer state is not stored."""
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    dt = model.dtype.newbyteorder("<")
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(cfg)), cfg]
    for layer in model.hidden:
        parts += [
            serialize_pattern(layer.pattern),
            layer.values.astype(dt).tobytes(),
            layer.bias.astype(dt).tobytes(),
        ]
    parts += [model.out_weights.astype(dt).tobytes(), model.out_bias.astype(dt).tobytes()]
    return b"".join(parts)


class CheckpointError(ValueError):
    pass


def load_checkpoint(data: bytes) -> Model:
    buf = memoryview(data)
    if bytes(buf[:4]) != CHECKPOINT_MAGIC:
        raise CheckpointError("not a model checkpoint (bad magic)")
    if len(buf) < 12:
        raise CheckpointError("truncated checkpoint header")
    version, n_cfg = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12 + n_cfg
    try:
        config = ModelConfig.from_dict(json.loads(bytes(buf[12:pos])))
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"bad model config: {exc}") from None
    dt = np.dtype(config.dtype).newbyteorder("<")

    def take(n):
        nonlocal pos
        end = pos + n * dt.itemsize
        if end > len(buf):
            raise CheckpointError(f"truncated checkpoint at byte {len(buf)}")
        arr = np.frombuffer(buf, dtype=dt, count=n, offset=pos).astype(config.dtype)
        pos = end
        return arr

    hidden = []
    for (n_in, n_out) in _layer_sizes(config):
        try:
            pattern, pos = read_pattern(buf, pos)
        except PatternFormatError as exc:
            raise CheckpointError(f"bad layer pattern: {exc}") from None
        if pattern.shape != (n_out, n_in):
            raise CheckpointError(f"layer pattern {pattern.shape} does not match config")
        values = take(pattern.n_edges)
        bias = take(n_out)
        hidden.append(SparseWeights(SparseMatrix(pattern, values), bias))
    fan_in = config.hidden_layers[-1].size if config.hidden_layers else config.input_size
    out_w = take(config.output_size * fan_in).reshape(config.output_size, fan_in)
    out_b = take(config.output_size)
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes in checkpoint")
    return Model(config, hidden, out_w, out_b)
