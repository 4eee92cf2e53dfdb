"""Tag-prediction metrics (p@m, q@m, sampled loss), the oracle-expert bound,
ensemble combination and the frozen-feature linear probe.

Every ranking uses the same rule: higher score first, equal scores ordered
by lower tag index.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp

from .data import MultiLabelDataset, TagIndex, sample_pairs
from .errors import ConfigError, DatasetValidationError, ShapeError, UnsupportedModeError
from .moe import SHARED, ExpertBundle, bundle_features, predict_batch
from .neuralcore import MlpModel, OpCounter, forward_batch, log_softmax, pair_losses

log = logging.getLogger(__name__)

DEFAULT_MS = (1, 5, 10)
MAX_SAMPLES = 100_000
_CHUNK = 4096


class Ensemble:
    """Members' softmax outputs averaged; scored as log-probabilities."""

    def __init__(self, members):
        self.members = list(members)
        if not self.members:
            raise ConfigError("an ensemble needs at least one member")
        if len({m.output_dim for m in self.members}) != 1:
            raise ShapeError("ensemble members disagree on output dimension")

    def n_params(self) -> int:
        return sum(m.n_params() for m in self.members)

    def logits(self, X, counter: OpCounter | None = None) -> np.ndarray:
        logps = np.stack([log_softmax(forward_batch(m, X, counter)[0]) for m in self.members])
        return logsumexp(logps, axis=0) - np.log(len(self.members))


def ensemble_predict(members, x, counter: OpCounter | None = None) -> np.ndarray:
    """Log of the averaged member probabilities for one input."""
    return Ensemble(members).logits(np.asarray(x, dtype=np.float64)[None, :], counter)[0]


def as_scorer(model):
    """Batch scoring function ``X -> logits`` for any supported model kind."""
    if isinstance(model, MlpModel):
        return lambda X: forward_batch(model, X)[0]
    if isinstance(model, ExpertBundle):
        return lambda X: predict_batch(model, X)
    if isinstance(model, Ensemble):
        return model.logits
    if isinstance(model, (list, tuple)):
        return Ensemble(model).logits
    if callable(model):
        return model
    raise TypeError(f"cannot score with {type(model).__name__}")


def score_rows(model, X, rows=None) -> np.ndarray:
    fn = as_scorer(model)
    X = np.asarray(X)
    rows = np.arange(X.shape[0]) if rows is None else np.asarray(rows)
    out = None
    for s in range(0, len(rows), _CHUNK):
        part = fn(X[rows[s:s + _CHUNK]])
        if out is None:
            out = np.empty((len(rows), part.shape[1]))
        out[s:s + _CHUNK] = part
    return out if out is not None else np.zeros((0, 0))


# ---------------------------------------------------------------------------
# ranking primitives

def top_m(y_hat, m: int) -> np.ndarray:
    """0/1 vector selecting the ``m`` largest entries (ties -> lower index)."""
    y_hat = np.asarray(y_hat)
    if not 0 <= m <= len(y_hat):
        raise ConfigError(f"m={m} outside [0, {len(y_hat)}]")
    order = np.lexsort((np.arange(len(y_hat)), -y_hat))
    out = np.zeros(len(y_hat))
    out[order[:m]] = 1.0
    return out


def tag_ranks(logits: np.ndarray, tags: np.ndarray) -> np.ndarray:
    """0-based rank of ``tags[i]`` within row ``i``; ``t_m(row)[tag] == 1``
    exactly when the rank is below ``m``."""
    logits = np.asarray(logits)
    tags = np.asarray(tags)
    idx = np.arange(len(tags))
    own = logits[idx, tags][:, None]
    cols = np.arange(logits.shape[1])[None, :]
    return ((logits > own) | ((logits == own) & (cols < tags[:, None]))).sum(axis=1)


def eval_pairs(test_ds: MultiLabelDataset, S: int, seed=0):
    """The per-class (example, tag) stream shared by q@m and the sampled loss."""
    if S < 1:
        raise ConfigError("number of samples S must be >= 1")
    return sample_pairs(TagIndex.build(test_ds), S, np.random.default_rng([int(seed), 11]))


def default_samples(test_ds: MultiLabelDataset) -> int:
    return min(MAX_SAMPLES, 50 * test_ds.n_examples)


def _pair_scores(model, ds, ex):
    uniq, inv = np.unique(ex, return_inverse=True)
    return score_rows(model, ds.features, uniq)[inv]


# ---------------------------------------------------------------------------
# metrics

def slot_ranks(model, test_ds: MultiLabelDataset) -> np.ndarray:
    """Rank of every ground-truth (example, tag) slot, in CSR order."""
    owner = test_ds.example_of_tag_slot()
    out = np.empty(len(test_ds.tag_ids), dtype=np.int64)
    for s in range(0, test_ds.n_examples, _CHUNK):
        rows = np.arange(s, min(s + _CHUNK, test_ds.n_examples))
        logits = score_rows(model, test_ds.features, rows)
        lo, hi = test_ds.tag_offsets[rows[0]], test_ds.tag_offsets[rows[-1] + 1]
        out[lo:hi] = tag_ranks(logits[owner[lo:hi] - s], test_ds.tag_ids[lo:hi])
    return out


def p_at_m(model, test_ds: MultiLabelDataset, m: int, ranks=None) -> float:
    """Recovered ground-truth tags in each image's top-m over all ground-truth
    (image, tag) pairs; exhaustive, no sampling."""
    if test_ds.n_examples == 0:
        raise ConfigError("p@m needs a non-empty test set")
    ranks = slot_ranks(model, test_ds) if ranks is None else ranks
    return float(np.count_nonzero(ranks < m) / len(ranks))


def q_at_m(model, test_ds: MultiLabelDataset, m: int, S: int, seed=0) -> float:
    ex, tags = eval_pairs(test_ds, S, seed)
    return float(np.mean(tag_ranks(_pair_scores(model, test_ds, ex), tags) < m))


def sampled_test_loss(model, test_ds: MultiLabelDataset, S: int, seed=0) -> float:
    ex, tags = eval_pairs(test_ds, S, seed)
    return float(np.mean(pair_losses(_pair_scores(model, test_ds, ex), tags)))


def per_tag_q(ranks: np.ndarray, test_ds: MultiLabelDataset, m: int = 10) -> dict:
    """For each supported tag, the fraction of its images ranking it in the
    top-m (the expectation of q@m conditioned on that tag)."""
    hits = np.bincount(test_ds.tag_ids, weights=(ranks < m).astype(float), minlength=test_ds.n_tags)
    support = np.bincount(test_ds.tag_ids, minlength=test_ds.n_tags)
    return {int(t): float(hits[t] / support[t]) for t in np.flatnonzero(support)}


@dataclass
class OracleResult:
    q_at: dict
    test_loss: float
    gated_q_at: dict
    gated_test_loss: float
    S: int


def oracle_eval(bundle: ExpertBundle, test_ds: MultiLabelDataset, ms=DEFAULT_MS, S=None,
                seed=0) -> OracleResult:
    """Per-sample best expert chosen with the true tag: lowest rank of the
    sampled tag (ties -> lower expert id) for q@m, lowest loss for the loss.
    Gated metrics on the identical stream are returned alongside."""
    S = default_samples(test_ds) if S is None else S
    ms = [ms] if isinstance(ms, int) else list(ms)
    ex, tags = eval_pairs(test_ds, S, seed)
    uniq, inv = np.unique(ex, return_inverse=True)
    X = test_ds.features[uniq]
    routes = bundle.gater.route(bundle.trunk, X)[inv]
    best_rank = np.full(S, np.iinfo(np.int64).max)
    best_loss = np.full(S, np.inf)
    gated_rank = np.empty(S, dtype=np.int64)
    gated_loss = np.empty(S)
    for k in range(bundle.K):
        scores = score_rows(bundle.expert_network(k), X)[inv]
        r = tag_ranks(scores, tags)
        ll = pair_losses(scores, tags)
        best_rank = np.minimum(best_rank, r)
        best_loss = np.minimum(best_loss, ll)
        sel = routes == k
        gated_rank[sel] = r[sel]
        gated_loss[sel] = ll[sel]
    return OracleResult(
        q_at={m: float(np.mean(best_rank < m)) for m in ms},
        test_loss=float(best_loss.mean()),
        gated_q_at={m: float(np.mean(gated_rank < m)) for m in ms},
        gated_test_loss=float(gated_loss.mean()),
        S=S,
    )


# ---------------------------------------------------------------------------
# reports

@dataclass
class EvalReport:
    test_loss: float
    train_loss: float | None
    q_at: dict
    p_at: dict
    per_tag_q10: dict
    S: int
    model: str = ""
    flags: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "test_loss": self.test_loss,
            "train_loss": self.train_loss,
            "q_at": {str(m): v for m, v in sorted(self.q_at.items())},
            "p_at": {str(m): v for m, v in sorted(self.p_at.items())},
            "per_tag_q10": {str(t): v for t, v in sorted(self.per_tag_q10.items())},
            "S": self.S,
            "model": self.model,
            "flags": self.flags,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(d["test_loss"], d["train_loss"], {int(k): v for k, v in d["q_at"].items()},
                   {int(k): v for k, v in d["p_at"].items()},
                   {int(k): v for k, v in d["per_tag_q10"].items()}, d["S"], d.get("model", ""),
                   d.get("flags", {}))

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n",
                              encoding="utf-8")

    @classmethod
    def load_json(cls, path) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def save_per_tag_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["tag_id", "q10"])
            for t, v in sorted(self.per_tag_q10.items()):
                w.writerow([t, repr(v)])


def evaluate(model, test_ds: MultiLabelDataset, train_ds: MultiLabelDataset | None = None,
             S: int | None = None, seed=0, ms=DEFAULT_MS, descriptor: str = "") -> EvalReport:
    S = default_samples(test_ds) if S is None else S
    ex, tags = eval_pairs(test_ds, S, seed)
    scores = _pair_scores(model, test_ds, ex)
    ranks = tag_ranks(scores, tags)
    test_loss = float(np.mean(pair_losses(scores, tags)))
    train_loss = None
    if train_ds is not None:
        S_train = min(S, default_samples(train_ds))
        tex, ttags = eval_pairs(train_ds, S_train, seed)
        train_loss = float(np.mean(pair_losses(_pair_scores(model, train_ds, tex), ttags)))
    sranks = slot_ranks(model, test_ds)
    flags = {}
    if isinstance(model, ExpertBundle) and model.empty_shards:
        flags["empty_shards"] = list(model.empty_shards)
    return EvalReport(
        test_loss=test_loss,
        train_loss=train_loss,
        q_at={m: float(np.mean(ranks < m)) for m in ms},
        p_at={m: p_at_m(model, test_ds, m, sranks) for m in ms},
        per_tag_q10=per_tag_q(sranks, test_ds, 10),
        S=S,
        model=descriptor,
        flags=flags,
    )


# ---------------------------------------------------------------------------
# transfer probe

def frozen_features(feature_model, X) -> np.ndarray:
    """Pre-decoder features: an MLP's last hidden layer, or the routed
    expert's embedding for a shared-decoder bundle."""
    if isinstance(feature_model, ExpertBundle):
        if feature_model.mode != SHARED:
            raise UnsupportedModeError("transfer needs a shared-decoder bundle")
        return bundle_features(feature_model, X)
    if isinstance(feature_model, MlpModel):
        out = []
        for s in range(0, len(X), _CHUNK):
            out.append(forward_batch(feature_model, X[s:s + _CHUNK])[1])
        return np.concatenate(out) if out else np.zeros((0, feature_model.hidden_dim))
    if callable(feature_model):
        return np.asarray(feature_model(X), dtype=np.float64)
    raise TypeError(f"cannot extract features with {type(feature_model).__name__}")


def _single_labels(ds: MultiLabelDataset) -> np.ndarray:
    if np.any(ds.tag_counts() != 1):
        raise DatasetValidationError("transfer probe needs exactly one label per example")
    return ds.tag_ids.copy()


@dataclass
class ProbeConfig:
    l2: float = 1e-4
    max_iter: int = 500


@dataclass
class LinearProbe:
    mean: np.ndarray
    scale: np.ndarray
    weight: np.ndarray   # (n_classes, dim)
    bias: np.ndarray

    def logits(self, F) -> np.ndarray:
        return ((F - self.mean) / self.scale) @ self.weight.T + self.bias


def fit_linear_probe(F, labels, n_classes: int, cfg: ProbeConfig | None = None) -> LinearProbe:
    """Multinomial logistic regression (L-BFGS, L2 on weights only) on
    standardized features."""
    cfg = cfg or ProbeConfig()
    F = np.asarray(F, dtype=np.float64)
    n, d = F.shape
    mean = F.mean(axis=0)
    scale = F.std(axis=0)
    scale[scale < 1e-12] = 1.0
    Fs = (F - mean) / scale
    Y = np.zeros((n, n_classes))
    Y[np.arange(n), labels] = 1.0

    def objective(theta):
        W = theta[:n_classes * d].reshape(n_classes, d)
        b = theta[n_classes * d:]
        z = Fs @ W.T + b
        logp = log_softmax(z)
        loss = -(Y * logp).sum() / n + 0.5 * cfg.l2 * (W * W).sum()
        delta = (np.exp(logp) - Y) / n
        gW = delta.T @ Fs + cfg.l2 * W
        return loss, np.concatenate([gW.ravel(), delta.sum(axis=0)])

    res = minimize(objective, np.zeros(n_classes * (d + 1)), jac=True, method="L-BFGS-B",
                   options={"maxiter": cfg.max_iter})
    W = res.x[:n_classes * d].reshape(n_classes, d)
    return LinearProbe(mean, scale, W, res.x[n_classes * d:])


def transfer_probe(feature_model, train_ds: MultiLabelDataset, test_ds: MultiLabelDataset,
                   cfg: ProbeConfig | None = None) -> float:
    """Top-1 test accuracy of a fresh linear classifier on frozen features."""
    if isinstance(feature_model, ExpertBundle) and feature_model.mode != SHARED:
        raise UnsupportedModeError("transfer needs a shared-decoder bundle")
    y_train, y_test = _single_labels(train_ds), _single_labels(test_ds)
    n_classes = max(train_ds.n_tags, test_ds.n_tags)
    probe = fit_linear_probe(frozen_features(feature_model, train_ds.features), y_train,
                             n_classes, cfg)
    logits = probe.logits(frozen_features(feature_model, test_ds.features))
    # argmax returns the lowest index among ties, matching top_m
    return float(np.mean(np.argmax(logits, axis=1) == y_test))
