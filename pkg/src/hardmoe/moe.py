"""Training and inference for hard mixtures of experts.

Two decoder layouts are supported:

* ``independent_decoders``: expert ``i`` is a full network trained only on
  the examples routed to cluster ``i``;
* ``shared_decoder``: experts emit a feature vector consumed by one shared
  linear decoder, which lives on a :class:`DecoderServer` that workers
  pull from and push decoder gradients to.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import logging
import math
import queue
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import MultiLabelDataset, PerClassSampler
from .errors import ConfigError, FormatError, ShapeError, TrainingError, UnsupportedModeError
from .gater import (AssignmentManifest, Gater, assign_dataset, load_gater, load_manifest,
                    save_gater, save_manifest)
from .neuralcore import (EpochRecord, MlpModel, OpCounter, OptState, SgdConfig, TrainLog,
                         apply_sgd, batch_loss_and_grad, chunked_mean, forward_batch,
                         init_mlp, load_checkpoint, lr_at_epoch, onehot, pair_loss_vector,
                         save_checkpoint, steps_per_epoch, train, validation_pairs)

log = logging.getLogger(__name__)

INDEPENDENT = "independent_decoders"
SHARED = "shared_decoder"
MODES = (INDEPENDENT, SHARED)


def derive_seed(seed: int, *keys: int) -> int:
    """Independent child seed; stable across platforms and processes."""
    return int(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
               .generate_state(1)[0])


def expert_seed(seed: int, i: int) -> int:
    return derive_seed(seed, 1, i)


def member_seed(seed: int, i: int) -> int:
    return derive_seed(seed, 2, i)


def decoder_seed(seed: int) -> int:
    return derive_seed(seed, 3)


def train_base(layer_dims, ds, cfg: SgdConfig, seed: int, valid_ds=None):
    """Fresh model trained on ``ds``; init, sampler and validation stream are
    all derived from ``seed``."""
    model = init_mlp(layer_dims, derive_seed(seed, 0))
    sampler = PerClassSampler(ds, derive_seed(seed, 1))
    trainlog = train(model, ds, cfg, sampler, valid_ds, valid_seed=derive_seed(seed, 2))
    return model, trainlog


@dataclass
class ExpertBundle:
    gater: Gater
    trunk: MlpModel
    experts: list
    mode: str
    manifest: AssignmentManifest
    shared_decoder: MlpModel | None = None
    empty_shards: list = field(default_factory=list)
    seed: int | None = None
    logs: list = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if len(self.experts) != self.gater.K:
            raise ShapeError(f"{len(self.experts)} experts for a K={self.gater.K} gater")
        dims = {tuple(e.layer_dims) for e in self.experts}
        if len(dims) != 1:
            raise ShapeError("all experts must share identical layer_dims")
        if self.mode == SHARED:
            if self.shared_decoder is None or self.shared_decoder.n_layers != 1:
                raise ShapeError("shared mode needs a single-layer decoder")
            if self.experts[0].output_dim != self.shared_decoder.input_dim:
                raise ShapeError("expert output dim must equal decoder input dim")

    @property
    def K(self) -> int:
        return self.gater.K

    @property
    def n_outputs(self) -> int:
        head = self.shared_decoder if self.mode == SHARED else self.experts[0]
        return head.output_dim

    def expert_network(self, i: int) -> MlpModel:
        """Complete x -> logits network behind expert ``i``."""
        if self.mode == SHARED:
            return stack(self.experts[i], self.shared_decoder)
        return self.experts[i]

    def n_params(self) -> int:
        total = self.trunk.n_params() + sum(e.n_params() for e in self.experts)
        if self.shared_decoder is not None:
            total += self.shared_decoder.n_params()
        return total


def stack(bottom: MlpModel, top: MlpModel) -> MlpModel:
    """Zero-copy composition (``bottom``'s output passes through a ReLU)."""
    if bottom.output_dim != top.input_dim:
        raise ShapeError(f"cannot stack {top.layer_dims} on {bottom.layer_dims}")
    return MlpModel(bottom.layer_dims + top.layer_dims[1:], bottom.weights + top.weights,
                    bottom.biases + top.biases)


def _fixed_epoch(cfg: SgdConfig, ds: MultiLabelDataset) -> SgdConfig:
    """An expert epoch counts the same number of images as a pass over the
    full training set, whatever the shard size."""
    if cfg.epoch_size is not None:
        return cfg
    return dataclasses.replace(cfg, epoch_size=max(1, ds.n_examples))


def _shards(manifest: AssignmentManifest, ds: MultiLabelDataset):
    return [ds.subset(manifest.members(k)) for k in range(manifest.K)]


# ---------------------------------------------------------------------------
# independent decoders

def train_independent(trunk: MlpModel, gater: Gater, ds: MultiLabelDataset, cfg: SgdConfig,
                      seed: int, valid_ds: MultiLabelDataset | None = None,
                      expert_dims=None, workers: int = 1) -> ExpertBundle:
    """Train expert ``i`` on exactly the examples routed to cluster ``i``.

    Experts run concurrently on up to ``workers`` threads; because shards are
    disjoint and every expert owns its RNG streams, the result does not
    depend on ``workers``.
    """
    expert_dims = list(expert_dims or trunk.layer_dims)
    if expert_dims[0] != ds.feature_dim or expert_dims[-1] != ds.n_tags:
        raise ShapeError(f"independent experts need dims [{ds.feature_dim}, ..., {ds.n_tags}]")
    cfg = _fixed_epoch(cfg, ds)
    manifest = assign_dataset(gater, trunk, ds)
    shards = _shards(manifest, ds)
    vshards = _shards(assign_dataset(gater, trunk, valid_ds), valid_ds) if valid_ds is not None else None

    def run(i):
        if shards[i].n_examples == 0:
            return init_mlp(expert_dims, derive_seed(expert_seed(seed, i), 0)), TrainLog()
        vs = vshards[i] if vshards is not None and vshards[i].n_examples else None
        try:
            return train_base(expert_dims, shards[i], cfg, expert_seed(seed, i), vs)
        except TrainingError as exc:
            raise TrainingError(str(exc), expert_id=i) from exc

    if workers <= 1:
        results = [run(i) for i in range(gater.K)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, range(gater.K)))
    empty = [i for i in range(gater.K) if shards[i].n_examples == 0]
    if empty:
        log.warning("experts with empty shards left at initialization: %s", empty)
    return ExpertBundle(gater, trunk, [m for m, _ in results], INDEPENDENT, manifest,
                        empty_shards=empty, seed=seed, logs=[t for _, t in results])


# ---------------------------------------------------------------------------
# shared decoder: server/worker protocol

class MessageKind(enum.Enum):
    GRAD_PUSH = "grad_push"
    PARAM_PULL = "param_pull"
    PARAM_REPLY = "param_reply"
    SHUTDOWN = "shutdown"


@dataclass
class DecoderServerMessage:
    kind: MessageKind
    expert_id: int
    step_counter: int
    payload: tuple | None = None    # (weight, bias) gradients or parameters
    epoch: int = 0


class DecoderServer:
    """Sole owner of the shared decoder. Messages are handled one at a time;
    ``version`` counts applied gradient pushes."""

    def __init__(self, decoder: MlpModel, cfg: SgdConfig):
        if decoder.n_layers != 1:
            raise ShapeError("the shared decoder is a single linear layer")
        self.decoder = decoder
        self.cfg = cfg
        self.state = OptState.for_model(decoder)
        self.version = 0
        self.applied = []      # (expert_id, step_counter) in application order
        self._lock = threading.Lock()

    def handle(self, msg: DecoderServerMessage):
        with self._lock:
            if msg.kind is MessageKind.PARAM_PULL:
                return DecoderServerMessage(
                    MessageKind.PARAM_REPLY, msg.expert_id, self.version,
                    (self.decoder.weights[0].copy(), self.decoder.biases[0].copy()))
            if msg.kind is MessageKind.GRAD_PUSH:
                gw, gb = msg.payload
                if gw.shape != self.decoder.weights[0].shape or gb.shape != self.decoder.biases[0].shape:
                    raise ShapeError("grad_push payload does not match decoder shape")
                if not (np.isfinite(gw).all() and np.isfinite(gb).all()):
                    raise TrainingError("non-finite decoder gradient", expert_id=msg.expert_id)
                apply_sgd(self.decoder.weights, self.decoder.biases, [gw], [gb], self.state,
                          self.cfg, lr_at_epoch(self.cfg, msg.epoch))
                self.version += 1
                self.applied.append((msg.expert_id, msg.step_counter))
                return None
            if msg.kind is MessageKind.SHUTDOWN:
                return None
            raise ConfigError(f"server cannot handle {msg.kind}")


class SyncTransport:
    """Direct calls into the server from the calling thread."""

    def __init__(self, server: DecoderServer):
        self.server = server

    def request(self, msg):
        return self.server.handle(msg)

    def send(self, msg):
        self.server.handle(msg)

    def close(self):
        pass


class ThreadTransport:
    """Server loop on its own thread; one FIFO inbox keeps per-worker order."""

    def __init__(self, server: DecoderServer):
        self.server = server
        self.inbox = queue.Queue()
        self.error = None
        self.thread = threading.Thread(target=self._loop, name="decoder-server", daemon=True)
        self.thread.start()

    def _loop(self):
        while True:
            msg, reply_box = self.inbox.get()
            if msg.kind is MessageKind.SHUTDOWN:
                return
            try:
                reply = self.server.handle(msg)
            except Exception as exc:   # surfaced to the caller
                self.error = exc
                reply = exc
            if reply_box is not None:
                reply_box.put(reply)

    def request(self, msg):
        box = queue.Queue(maxsize=1)
        self.inbox.put((msg, box))
        reply = box.get()
        if isinstance(reply, Exception):
            raise reply
        return reply

    def send(self, msg):
        if self.error is not None:
            raise self.error
        self.inbox.put((msg, None))

    def close(self):
        self.inbox.put((DecoderServerMessage(MessageKind.SHUTDOWN, -1, 0), None))
        self.thread.join()


class ExpertWorker:
    """Trains one expert against the remote decoder."""

    def __init__(self, expert_id, expert: MlpModel, shard: MultiLabelDataset, cfg: SgdConfig,
                 sampler_seed):
        self.expert_id = expert_id
        self.expert = expert
        self.shard = shard
        self.cfg = cfg
        self.state = OptState.for_model(expert)
        self.sampler = PerClassSampler(shard, sampler_seed) if shard.n_examples else None
        self.n_steps = steps_per_epoch(cfg, shard.n_examples) if shard.n_examples else 0
        self.step_counter = 0
        self.pulled_versions = []

    def step(self, epoch: int, transport) -> float:
        reply = transport.request(DecoderServerMessage(
            MessageKind.PARAM_PULL, self.expert_id, self.step_counter, epoch=epoch))
        self.pulled_versions.append(reply.step_counter)
        wd, bd = reply.payload
        net = MlpModel(self.expert.layer_dims + [wd.shape[0]], self.expert.weights + [wd],
                       self.expert.biases + [bd])
        ex, tags = self.sampler.draw(self.cfg.minibatch_size)
        loss, grads = batch_loss_and_grad(net, self.shard.features[ex], onehot(tags, net.output_dim))
        if not math.isfinite(loss) or not grads.is_finite():
            raise TrainingError(f"non-finite loss or gradient at epoch {epoch}", expert_id=self.expert_id)
        n = self.expert.n_layers
        apply_sgd(self.expert.weights, self.expert.biases, grads.weights[:n], grads.biases[:n],
                  self.state, self.cfg, lr_at_epoch(self.cfg, epoch))
        transport.send(DecoderServerMessage(
            MessageKind.GRAD_PUSH, self.expert_id, self.step_counter,
            (grads.weights[n], grads.biases[n]), epoch=epoch))
        self.step_counter += 1
        return loss

    def run_epoch(self, epoch, transport, abort: threading.Event | None = None) -> list:
        losses = []
        for _ in range(self.n_steps):
            if abort is not None and abort.is_set():
                break
            losses.append(self.step(epoch, transport))
        return losses


def _aggregate_valid_loss(bundle_nets, vX, vex, vtags, vroutes) -> float:
    losses = np.empty(len(vex))
    for k, net in enumerate(bundle_nets):
        sel = np.flatnonzero(vroutes[vex] == k)
        if sel.size:
            losses[sel] = pair_loss_vector(net, vX, vex[sel], vtags[sel])
    return chunked_mean(losses)


@dataclass
class SharedRun:
    """Extra diagnostics of a shared-decoder run."""

    server: DecoderServer
    workers: list
    trainlog: TrainLog


def train_shared_decoder(trunk: MlpModel, gater: Gater, ds: MultiLabelDataset, cfg: SgdConfig,
                         seed: int, valid_ds: MultiLabelDataset | None = None,
                         expert_dims=None, workers: int = 1, return_run: bool = False):
    """Experts plus one decoder server. ``workers == 1`` interleaves the
    experts round-robin on the calling thread (fully deterministic);
    otherwise each expert runs on its own thread and the server applies
    pushes in arrival order. Early stopping is global, on the aggregated
    routed validation loss."""
    expert_dims = list(expert_dims or trunk.layer_dims[:-1])
    if expert_dims[0] != ds.feature_dim:
        raise ShapeError("expert input dim must equal the dataset feature dim")
    cfg = _fixed_epoch(cfg, ds)
    manifest = assign_dataset(gater, trunk, ds)
    shards = _shards(manifest, ds)
    decoder = init_mlp([expert_dims[-1], ds.n_tags], decoder_seed(seed))
    server = DecoderServer(decoder, cfg)
    pool = []
    for i in range(gater.K):
        s = expert_seed(seed, i)
        pool.append(ExpertWorker(i, init_mlp(expert_dims, derive_seed(s, 0)), shards[i], cfg,
                                 derive_seed(s, 1)))
    valid = None
    if valid_ds is not None and valid_ds.n_examples:
        vex, vtags = validation_pairs(valid_ds, min(cfg.valid_samples, 50 * valid_ds.n_examples),
                                      derive_seed(seed, 4))
        valid = (valid_ds.features, vex, vtags, assign_dataset(gater, trunk, valid_ds).expert_ids)

    transport = SyncTransport(server) if workers <= 1 else ThreadTransport(server)
    trainlog = TrainLog()
    best = None
    since_best = 0
    try:
        for epoch in range(cfg.max_epochs):
            if workers <= 1:
                losses = _round_robin_epoch(pool, epoch, transport)
            else:
                losses = _threaded_epoch(pool, epoch, transport)
            if not losses:
                break
            vloss = None
            if valid is not None:
                nets = [stack(w.expert, server.decoder) for w in pool]
                vloss = _aggregate_valid_loss(nets, *valid)
            trainlog.epochs.append(EpochRecord(epoch, lr_at_epoch(cfg, epoch),
                                               sum(losses) / len(losses), vloss))
            if valid is None:
                continue
            if trainlog.best_valid_loss is None or vloss < trainlog.best_valid_loss:
                trainlog.best_valid_loss, trainlog.best_epoch = vloss, epoch
                best = ([w.expert.copy() for w in pool], server.decoder.copy())
                since_best = 0
            else:
                since_best += 1
                if since_best >= cfg.early_stop_patience:
                    trainlog.stopped_early = True
                    break
    finally:
        transport.close()

    if best is not None:
        experts, dec = best
    else:
        experts, dec = [w.expert for w in pool], server.decoder
        trainlog.best_epoch = trainlog.epochs[-1].epoch if trainlog.epochs else None
    empty = [i for i in range(gater.K) if shards[i].n_examples == 0]
    bundle = ExpertBundle(gater, trunk, experts, SHARED, manifest, shared_decoder=dec,
                          empty_shards=empty, seed=seed, logs=[trainlog])
    if return_run:
        return bundle, SharedRun(server, pool, trainlog)
    return bundle


def _round_robin_epoch(pool, epoch, transport) -> list:
    losses = []
    for s in range(max((w.n_steps for w in pool), default=0)):
        for w in pool:
            if s < w.n_steps:
                try:
                    losses.append(w.step(epoch, transport))
                except TrainingError:
                    raise
                except Exception as exc:
                    raise TrainingError(repr(exc), expert_id=w.expert_id) from exc
    return losses


def _threaded_epoch(pool, epoch, transport) -> list:
    abort = threading.Event()
    results = {}
    failures = {}

    def body(w):
        try:
            results[w.expert_id] = w.run_epoch(epoch, transport, abort)
        except Exception as exc:
            failures[w.expert_id] = exc
            abort.set()

    threads = [threading.Thread(target=body, args=(w,), name=f"expert-{w.expert_id}")
               for w in pool if w.n_steps]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if failures:
        eid = min(failures)
        raise TrainingError(f"worker failed: {failures[eid]!r}", expert_id=eid) from failures[eid]
    return [loss for i in sorted(results) for loss in results[i]]


# ---------------------------------------------------------------------------
# ensemble baseline

def train_ensemble(layer_dims, ds, cfg: SgdConfig, n_members: int, seed: int, valid_ds=None,
                   workers: int = 1) -> list:
    if n_members < 1:
        raise ConfigError("n_members must be >= 1")

    def run(i):
        return train_base(layer_dims, ds, cfg, member_seed(seed, i), valid_ds)[0]

    if workers <= 1:
        return [run(i) for i in range(n_members)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, range(n_members)))


# ---------------------------------------------------------------------------
# inference

def predict_batch(bundle: ExpertBundle, X, counter: OpCounter | None = None,
                  routes=None) -> np.ndarray:
    """Logits for each row: one trunk pass to route, one pass through the
    selected expert (and the shared decoder)."""
    X = np.atleast_2d(np.asarray(X))
    if routes is None:
        routes = bundle.gater.route(bundle.trunk, X, counter)
    out = np.empty((X.shape[0], bundle.n_outputs))
    for k in np.unique(routes):
        rows = np.flatnonzero(routes == k)
        out[rows] = forward_batch(bundle.expert_network(int(k)), X[rows], counter)[0]
    return out


def predict(bundle: ExpertBundle, x, counter: OpCounter | None = None) -> np.ndarray:
    x = np.asarray(x)
    if x.shape != (bundle.trunk.input_dim,):
        raise ShapeError(f"expected input of length {bundle.trunk.input_dim}, got {x.shape}")
    return predict_batch(bundle, x[None, :], counter)[0]


def bundle_features(bundle: ExpertBundle, X) -> np.ndarray:
    """Shared-embedding features: the routed expert's output after the ReLU
    that feeds the shared decoder."""
    if bundle.mode != SHARED:
        raise UnsupportedModeError("independent experts have no shared feature space")
    X = np.atleast_2d(np.asarray(X))
    routes = bundle.gater.route(bundle.trunk, X)
    out = np.empty((X.shape[0], bundle.shared_decoder.input_dim))
    for k in np.unique(routes):
        rows = np.flatnonzero(routes == k)
        out[rows] = forward_batch(bundle.expert_network(int(k)), X[rows])[1]
    return out


# ---------------------------------------------------------------------------
# bundle directory

def save_bundle(bundle: ExpertBundle, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_gater(bundle.gater, d / "gater.bin")
    save_manifest(bundle.manifest, d / "manifest.bin")
    save_checkpoint(bundle.trunk, d / "trunk.ckpt")
    for i, e in enumerate(bundle.experts):
        save_checkpoint(e, d / f"expert_{i}.ckpt")
    if bundle.shared_decoder is not None:
        save_checkpoint(bundle.shared_decoder, d / "decoder.ckpt")
    meta = {
        "mode": bundle.mode,
        "K": bundle.K,
        "expert_layer_dims": bundle.experts[0].layer_dims,
        "trunk_layer_dims": bundle.trunk.layer_dims,
        "decoder_layer_dims": bundle.shared_decoder.layer_dims if bundle.shared_decoder else None,
        "seed": bundle.seed,
        "empty_shards": list(bundle.empty_shards),
        "shard_sizes": bundle.manifest.counts.tolist(),
    }
    (d / "bundle.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_bundle(directory) -> ExpertBundle:
    d = Path(directory)
    try:
        meta = json.loads((d / "bundle.json").read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"bad bundle.json: {exc}") from exc
    K = int(meta["K"])
    gater = load_gater(d / "gater.bin")
    experts = [load_checkpoint(d / f"expert_{i}.ckpt") for i in range(K)]
    decoder = load_checkpoint(d / "decoder.ckpt") if meta["mode"] == SHARED else None
    return ExpertBundle(gater, load_checkpoint(d / "trunk.ckpt"), experts, meta["mode"],
                        load_manifest(d / "manifest.bin", K), shared_decoder=decoder,
                        empty_shards=list(meta.get("empty_shards", [])), seed=meta.get("seed"))
