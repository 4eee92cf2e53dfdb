"""Dense ReLU networks, the multi-positive softmax loss, momentum SGD and
the step learning-rate schedules used for trunks and experts."""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import MultiLabelDataset, PerClassSampler, TagIndex, sample_pairs
from .errors import ConfigError, FormatError, ShapeError, TrainingError

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"HMOM"
CHECKPOINT_VERSION = 1

# schedule name -> (divide-by factor, every n epochs)
SCHEDULES = {"trunk": (10.0, 60), "expert": (2.0, 5)}


class MlpModel:
    """Feed-forward net: ReLU on hidden layers, identity on the output.

    ``weights[l]`` has shape ``(layer_dims[l+1], layer_dims[l])``. Parameters
    are float64 in memory; checkpoints store float32.
    """

    def __init__(self, layer_dims, weights, biases):
        self.layer_dims = [int(d) for d in layer_dims]
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        self._check()

    def _check(self):
        if len(self.layer_dims) < 2:
            raise ShapeError("an MLP needs at least an input and an output dimension")
        if len(self.weights) != self.n_layers or len(self.biases) != self.n_layers:
            raise ShapeError("one weight matrix and one bias vector per layer")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.layer_dims[l + 1], self.layer_dims[l]):
                raise ShapeError(f"layer {l} weight shape {w.shape} != "
                                 f"{(self.layer_dims[l + 1], self.layer_dims[l])}")
            if b.shape != (self.layer_dims[l + 1],):
                raise ShapeError(f"layer {l} bias shape {b.shape} != {(self.layer_dims[l + 1],)}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def hidden_dim(self) -> int:
        return self.layer_dims[-2]

    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def macs(self) -> int:
        """Multiply-accumulates for one forward pass."""
        return sum(w.size for w in self.weights)

    def copy(self) -> "MlpModel":
        return MlpModel(self.layer_dims, [w.copy() for w in self.weights],
                        [b.copy() for b in self.biases])

    def is_finite(self) -> bool:
        return all(np.isfinite(w).all() and np.isfinite(b).all()
                   for w, b in zip(self.weights, self.biases))

    def same_params(self, other: "MlpModel") -> bool:
        """Bit-exact parameter equality."""
        return (self.layer_dims == other.layer_dims
                and all(np.array_equal(a, b) for a, b in zip(self.weights, other.weights))
                and all(np.array_equal(a, b) for a, b in zip(self.biases, other.biases)))

    def __repr__(self):
        return f"MlpModel(layer_dims={self.layer_dims})"


def init_mlp(layer_dims, rng) -> MlpModel:
    """Uniform ±sqrt(6/(fan_in+fan_out)) weights, zero biases."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpModel(layer_dims, weights, biases)


def compose(bottom: MlpModel, top: MlpModel) -> MlpModel:
    """Stack ``top`` on ``bottom``; bottom's output becomes a ReLU hidden layer."""
    if bottom.output_dim != top.input_dim:
        raise ShapeError(f"cannot stack {top.layer_dims} on {bottom.layer_dims}")
    return MlpModel(bottom.layer_dims + top.layer_dims[1:],
                    [w.copy() for w in bottom.weights + top.weights],
                    [b.copy() for b in bottom.biases + top.biases])


class OpCounter:
    """Accumulates multiply-accumulate counts of forward passes."""

    def __init__(self):
        self.macs = 0

    def add(self, n: int):
        self.macs += int(n)


# ---------------------------------------------------------------------------
# forward / backward

def _activations(model: MlpModel, X: np.ndarray):
    acts = [X]
    h = X
    for l, (w, b) in enumerate(zip(model.weights, model.biases)):
        h = h @ w.T + b
        if l < model.n_layers - 1:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return acts


def forward_batch(model: MlpModel, X, counter: OpCounter | None = None):
    """Row-wise forward; returns ``(logits, hidden)`` with hidden the output of
    the last hidden layer (the input itself for a single-layer model)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise ShapeError(f"expected (n, {model.input_dim}) input, got {X.shape}")
    acts = _activations(model, X)
    if counter is not None:
        counter.add(X.shape[0] * model.macs())
    return acts[-1], acts[-2]


def forward(model: MlpModel, x, counter: OpCounter | None = None):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.input_dim,):
        raise ShapeError(f"expected input of length {model.input_dim}, got shape {x.shape}")
    logits, hidden = forward_batch(model, x[None, :], counter)
    return logits[0], hidden[0]


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def pair_losses(logits: np.ndarray, tags: np.ndarray) -> np.ndarray:
    """Single-positive loss of each row at its tag."""
    return -log_softmax(logits)[np.arange(len(tags)), tags]


@dataclass
class Gradients:
    weights: list
    biases: list

    def is_finite(self) -> bool:
        return all(np.isfinite(g).all() for g in self.weights + self.biases)


@dataclass(frozen=True)
class LossTarget:
    positive_tags: frozenset

    def __init__(self, positive_tags):
        tags = frozenset(int(t) for t in positive_tags)
        if not tags:
            raise ConfigError("a loss target needs at least one positive tag")
        object.__setattr__(self, "positive_tags", tags)


def batch_loss_and_grad(model: MlpModel, X, Y):
    """Mean over rows of ``-sum_j Y[i, j] * log_softmax(logits_i)_j`` and its
    exact gradient. ``Y`` is a dense (n × M) nonnegative target matrix."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise ShapeError(f"expected (n, {model.input_dim}) input, got {X.shape}")
    if Y.shape != (X.shape[0], model.output_dim):
        raise ShapeError(f"target shape {Y.shape} != {(X.shape[0], model.output_dim)}")
    n = X.shape[0]
    acts = _activations(model, X)
    logp = log_softmax(acts[-1])
    loss = float(-(Y * logp).sum() / n)
    delta = (Y.sum(axis=1, keepdims=True) * np.exp(logp) - Y) / n
    gw = [None] * model.n_layers
    gb = [None] * model.n_layers
    for l in range(model.n_layers - 1, -1, -1):
        gw[l] = delta.T @ acts[l]
        gb[l] = delta.sum(axis=0)
        if l:
            delta = (delta @ model.weights[l]) * (acts[l] > 0)
    return loss, Gradients(gw, gb)


def onehot(tags, n_out: int) -> np.ndarray:
    Y = np.zeros((len(tags), n_out))
    Y[np.arange(len(tags)), tags] = 1.0
    return Y


def loss_and_grad(model: MlpModel, x, target: LossTarget):
    tags = sorted(target.positive_tags)
    if tags[-1] >= model.output_dim or tags[0] < 0:
        raise ShapeError(f"target tag outside [0, {model.output_dim})")
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.input_dim,):
        raise ShapeError(f"expected input of length {model.input_dim}, got shape {x.shape}")
    Y = np.zeros((1, model.output_dim))
    Y[0, tags] = 1.0
    return batch_loss_and_grad(model, x[None, :], Y)


# ---------------------------------------------------------------------------
# optimization

@dataclass
class SgdConfig:
    minibatch_size: int = 256
    base_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    schedule: str = "trunk"
    epoch_size: int | None = None         # None -> number of training examples
    max_epochs: int = 30
    early_stop_patience: int = 5
    lr_decay_every: int | None = None     # None -> schedule default (60 / 5)
    valid_samples: int = 10000

    def __post_init__(self):
        if self.minibatch_size < 1:
            raise ConfigError("minibatch_size must be >= 1")
        if not self.base_lr > 0:
            raise ConfigError("base_lr must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {sorted(SCHEDULES)}")
        if self.lr_decay_every is not None and self.lr_decay_every < 1:
            raise ConfigError("lr_decay_every must be >= 1")
        if self.max_epochs < 0 or self.early_stop_patience < 1:
            raise ConfigError("max_epochs must be >= 0 and early_stop_patience >= 1")
        if self.epoch_size is not None and self.epoch_size < 1:
            raise ConfigError("epoch_size must be >= 1")

    @classmethod
    def trunk(cls, **kw) -> "SgdConfig":
        return cls(**{"schedule": "trunk", "momentum": 0.9, **kw})

    @classmethod
    def expert(cls, **kw) -> "SgdConfig":
        return cls(**{"schedule": "expert", "momentum": 0.0, **kw})


def lr_at_epoch(cfg: SgdConfig, epoch: int) -> float:
    factor, every = SCHEDULES[cfg.schedule]
    if cfg.lr_decay_every is not None:
        every = cfg.lr_decay_every
    return cfg.base_lr / factor ** (epoch // every)


@dataclass
class OptState:
    """Momentum buffers for a list of layers."""

    velocity_w: list
    velocity_b: list

    @classmethod
    def zeros_like(cls, weights, biases) -> "OptState":
        return cls([np.zeros_like(w) for w in weights], [np.zeros_like(b) for b in biases])

    @classmethod
    def for_model(cls, model: MlpModel) -> "OptState":
        return cls.zeros_like(model.weights, model.biases)


def apply_sgd(weights, biases, gw, gb, state: OptState, cfg: SgdConfig, lr: float):
    """In-place update of parallel lists of layer parameters."""
    for params, grads, vel in ((weights, gw, state.velocity_w), (biases, gb, state.velocity_b)):
        for p, g, v in zip(params, grads, vel):
            v *= cfg.momentum
            v += g
            if cfg.weight_decay:
                v += cfg.weight_decay * p
            p -= lr * v


def sgd_step(model: MlpModel, grads: Gradients, opt_state: OptState, cfg: SgdConfig, epoch: int):
    """``v <- momentum*v + grad + weight_decay*param``; ``param <- param - lr(epoch)*v``."""
    if not grads.is_finite():
        raise TrainingError(f"non-finite gradient at epoch {epoch}")
    for p, g in zip(model.weights + model.biases, grads.weights + grads.biases):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
    apply_sgd(model.weights, model.biases, grads.weights, grads.biases, opt_state, cfg,
              lr_at_epoch(cfg, epoch))


# ---------------------------------------------------------------------------
# training loop

@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    valid_loss: float | None


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)
    best_epoch: int | None = None
    best_valid_loss: float | None = None
    stopped_early: bool = False

    def to_dict(self) -> dict:
        return {
            "epochs": [vars(e) for e in self.epochs],
            "best_epoch": self.best_epoch,
            "best_valid_loss": self.best_valid_loss,
            "stopped_early": self.stopped_early,
        }


def validation_pairs(valid_ds: MultiLabelDataset, n: int, seed=0):
    """Fixed per-class (example, tag) stream used for early stopping."""
    rng = np.random.default_rng([int(seed), 7])
    return sample_pairs(TagIndex.build(valid_ds), n, rng)


def pair_loss_vector(model: MlpModel, X, ex, tags, batch: int = 8192) -> np.ndarray:
    out = np.empty(len(ex))
    for s in range(0, len(ex), batch):
        logits, _ = forward_batch(model, X[ex[s:s + batch]])
        out[s:s + batch] = pair_losses(logits, tags[s:s + batch])
    return out


def chunked_mean(values: np.ndarray, batch: int = 8192) -> float:
    # fixed summation order so every caller reproduces the same bits
    total = 0.0
    for s in range(0, len(values), batch):
        total += values[s:s + batch].sum()
    return float(total / len(values))


def mean_pair_loss(model: MlpModel, X, ex, tags) -> float:
    return chunked_mean(pair_loss_vector(model, X, ex, tags))


def steps_per_epoch(cfg: SgdConfig, n_examples: int) -> int:
    epoch_size = cfg.epoch_size or n_examples
    return max(1, math.ceil(epoch_size / cfg.minibatch_size))


def train(model: MlpModel, ds: MultiLabelDataset, cfg: SgdConfig, sampler: PerClassSampler,
          valid_ds: MultiLabelDataset | None = None, valid_seed=0) -> TrainLog:
    """Per-class minibatch SGD with early stopping on a sampled validation loss.

    ``model`` is updated in place and left holding the best-validation snapshot
    (or the final parameters when no validation set is given).
    """
    if model.input_dim != ds.feature_dim:
        raise ShapeError(f"model input dim {model.input_dim} != feature dim {ds.feature_dim}")
    trainlog = TrainLog()
    if cfg.max_epochs == 0 or ds.n_examples == 0:
        return trainlog
    X = ds.features
    state = OptState.for_model(model)
    n_steps = steps_per_epoch(cfg, ds.n_examples)
    valid = None
    if valid_ds is not None and valid_ds.n_examples:
        vex, vtags = validation_pairs(valid_ds, min(cfg.valid_samples, 50 * valid_ds.n_examples),
                                      valid_seed)
        valid = (valid_ds.features, vex, vtags)
    best = None
    since_best = 0
    for epoch in range(cfg.max_epochs):
        lr = lr_at_epoch(cfg, epoch)
        total = 0.0
        for _ in range(n_steps):
            ex, tags = sampler.draw(cfg.minibatch_size)
            loss, grads = batch_loss_and_grad(model, X[ex], onehot(tags, model.output_dim))
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            sgd_step(model, grads, state, cfg, epoch)
            total += loss
        vloss = mean_pair_loss(model, *valid) if valid else None
        trainlog.epochs.append(EpochRecord(epoch, lr, total / n_steps, vloss))
        log.debug("epoch %d lr %.4g train %.4f valid %s", epoch, lr, total / n_steps, vloss)
        if valid is None:
            continue
        if trainlog.best_valid_loss is None or vloss < trainlog.best_valid_loss:
            trainlog.best_valid_loss = vloss
            trainlog.best_epoch = epoch
            best = model.copy()
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.early_stop_patience:
                trainlog.stopped_early = True
                break
    if best is not None:
        model.weights, model.biases = best.weights, best.biases
    else:
        trainlog.best_epoch = trainlog.epochs[-1].epoch
    return trainlog


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(model: MlpModel, path) -> None:
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, model.n_layers),
             np.asarray(model.layer_dims, dtype="<u4").tobytes()]
    for w, b in zip(model.weights, model.biases):
        parts.append(w.astype("<f4").tobytes())
        parts.append(b.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> MlpModel:
    buf = Path(path).read_bytes()
    if len(buf) < 12:
        raise FormatError("truncated checkpoint header", offset=len(buf))
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {buf[:4]!r}", offset=0)
    version, n_layers = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    pos = 12
    if pos + 4 * (n_layers + 1) > len(buf):
        raise FormatError("truncated layer_dims", offset=pos)
    dims = np.frombuffer(buf, dtype="<u4", count=n_layers + 1, offset=pos).astype(int).tolist()
    pos += 4 * (n_layers + 1)
    weights, biases = [], []
    for l in range(n_layers):
        nw, nb = dims[l + 1] * dims[l], dims[l + 1]
        if pos + 4 * (nw + nb) > len(buf):
            raise FormatError(f"truncated parameters of layer {l}", offset=pos)
        weights.append(np.frombuffer(buf, "<f4", nw, pos).reshape(dims[l + 1], dims[l]).astype(np.float64))
        pos += 4 * nw
        biases.append(np.frombuffer(buf, "<f4", nb, pos).astype(np.float64))
        pos += 4 * nb
    if pos != len(buf):
        raise FormatError("trailing bytes after checkpoint", offset=pos)
    return MlpModel(dims, weights, biases)


def round_to_f32(model: MlpModel) -> MlpModel:
    """Model with parameters rounded the way a checkpoint stores them."""
    return MlpModel(model.layer_dims, [w.astype(np.float32).astype(np.float64) for w in model.weights],
                    [b.astype(np.float32).astype(np.float64) for b in model.biases])
