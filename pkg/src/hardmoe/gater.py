"""Hard gater: trunk features -> PCA projection -> nearest K-means centroid."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import MultiLabelDataset
from .errors import ConfigError, FormatError, ShapeError
from .neuralcore import MlpModel, OpCounter, forward_batch

GATER_MAGIC = b"HMOG"
MANIFEST_MAGIC = b"HMOA"
FORMAT_VERSION = 1
_CHUNK = 4096


def extract_features(trunk: MlpModel, ds_or_features, batch: int = _CHUNK) -> np.ndarray:
    """Last-hidden-layer activations of ``trunk`` for every example (N × hidden)."""
    X = ds_or_features.features if isinstance(ds_or_features, MultiLabelDataset) else ds_or_features
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[1] != trunk.input_dim:
        raise ShapeError(f"trunk expects {trunk.input_dim} input features, got {X.shape}")
    out = np.empty((X.shape[0], trunk.hidden_dim))
    for s in range(0, X.shape[0], batch):
        out[s:s + batch] = forward_batch(trunk, X[s:s + batch])[1]
    return out


@dataclass
class PcaProjection:
    mean: np.ndarray          # (feature_dim,)
    components: np.ndarray    # (pca_dim, feature_dim), orthonormal rows
    eigenvalues: np.ndarray | None = None

    @property
    def pca_dim(self) -> int:
        return self.components.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.components.shape[1]

    def project(self, Z) -> np.ndarray:
        return (np.asarray(Z, dtype=np.float64) - self.mean) @ self.components.T

    def reconstruct(self, P) -> np.ndarray:
        return np.asarray(P) @ self.components + self.mean


def fit_pca(Z, pca_dim: int, subsample: int | None = None, seed=0) -> PcaProjection:
    """Top-``pca_dim`` covariance eigenvectors of ``Z`` (no whitening).

    Each component's sign is fixed so its largest-magnitude entry is positive.
    ``subsample`` fits on a seeded random subset of rows.
    """
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2:
        raise ShapeError("feature matrix must be 2-D")
    if subsample is not None and subsample < Z.shape[0]:
        rows = np.sort(np.random.default_rng(seed).choice(Z.shape[0], subsample, replace=False))
        Z = Z[rows]
    n, d = Z.shape
    if n < 2:
        raise ConfigError("PCA needs at least two rows")
    if not 1 <= pca_dim <= min(n, d):
        raise ConfigError(f"pca_dim={pca_dim} must lie in [1, min(N={n}, dim={d})]")
    mean = Z.mean(axis=0)
    C = Z - mean
    cov = C.T @ C / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals, kind="stable")[::-1][:pca_dim]
    comps = evecs[:, order].T.copy()
    pivot = np.argmax(np.abs(comps), axis=1)
    signs = np.sign(comps[np.arange(pca_dim), pivot])
    signs[signs == 0] = 1.0
    comps *= signs[:, None]
    return PcaProjection(mean, comps, np.clip(evals[order], 0.0, None))


# ---------------------------------------------------------------------------
# K-means

def squared_distances(P: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Exact ``||p - c||^2`` for every row/centroid pair (chunked differences)."""
    out = np.empty((P.shape[0], centroids.shape[0]))
    step = max(1, _CHUNK * 16 // max(1, centroids.size))
    for s in range(0, P.shape[0], step):
        diff = P[s:s + step, None, :] - centroids[None, :, :]
        out[s:s + step] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def kmeans_plusplus(P: np.ndarray, K: int, rng: np.random.Generator,
                    n_local_trials: int | None = None) -> np.ndarray:
    """Greedy k-means++ seeding: each new center is the best (lowest
    potential) of ``n_local_trials`` D^2-sampled candidates."""
    n = P.shape[0]
    if n_local_trials is None:
        n_local_trials = 2 + int(np.log(K))
    centers = np.empty((K, P.shape[1]))
    centers[0] = P[int(rng.integers(n))]
    closest = squared_distances(P, centers[:1])[:, 0]
    for k in range(1, K):
        total = closest.sum()
        if total > 0:
            cand = np.searchsorted(np.cumsum(closest), rng.uniform(0.0, total, n_local_trials),
                                   side="right")
            cand = np.minimum(cand, n - 1)
        else:
            # every point already coincides with a center
            cand = rng.integers(n, size=1)
        d_cand = np.minimum(closest[None, :], squared_distances(P, P[cand]).T)
        best = int(np.argmin(d_cand.sum(axis=1)))
        centers[k] = P[cand[best]]
        closest = d_cand[best]
    return centers


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    objective: float
    history: list = field(default_factory=list)   # objective after each assignment step
    n_iter: int = 0
    converged: bool = False
    n_reseeded: int = 0


def fit_kmeans(P, K: int, seed=0, max_iter: int = 300, n_init: int = 1) -> KMeansResult:
    """Lloyd iterations from a seeded k-means++ start until the assignment
    stops changing (or ``max_iter``). An empty cluster takes the point that is
    currently farthest from its own centroid. Cluster sizes are not balanced.

    With ``n_init > 1`` the whole procedure is restarted from independent
    seedings and the run with the lowest objective is kept (earliest on ties).
    Restart 0 always uses ``seed`` itself, so ``n_init=1`` is a single run.
    """
    P = np.asarray(P, dtype=np.float64)
    n = P.shape[0]
    if K < 1:
        raise ConfigError("K must be >= 1")
    if n < K:
        raise ConfigError(f"K-means needs N >= K (N={n}, K={K})")
    if n_init < 1:
        raise ConfigError("n_init must be >= 1")
    if len(np.unique(P, axis=0)) < K:
        raise ConfigError(f"K-means needs at least K={K} distinct points")
    best = None
    for r in range(n_init):
        rng = np.random.default_rng(seed if r == 0 else [seed, r])
        res = _lloyd(P, K, rng, max_iter)
        if best is None or res.objective < best.objective:
            best = res
    return best


def _lloyd(P: np.ndarray, K: int, rng: np.random.Generator, max_iter: int) -> KMeansResult:
    n = P.shape[0]
    centroids = kmeans_plusplus(P, K, rng)
    labels = None
    history = []
    reseeded = 0
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        d2 = squared_distances(P, centroids)
        new_labels = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(n), new_labels].sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            converged = True
            break
        labels = new_labels
        counts = np.bincount(labels, minlength=K)
        for k in np.flatnonzero(counts == 0):
            own = d2[np.arange(n), labels].copy()
            # never strip the last member of another cluster
            own[counts[labels] <= 1] = -1.0
            far = int(np.argmax(own))
            counts[labels[far]] -= 1
            labels[far] = k
            counts[k] = 1
            d2[far] = np.inf
            d2[far, k] = 0.0
            reseeded += 1
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, P)
        centroids = sums / counts[:, None]
    d2 = squared_distances(P, centroids)
    labels = np.argmin(d2, axis=1)
    objective = float(d2[np.arange(n), labels].sum())
    return KMeansResult(centroids, labels, objective, history, it, converged, reseeded)


# ---------------------------------------------------------------------------
# gater

@dataclass
class Gater:
    projection: PcaProjection
    centroids: np.ndarray   # (K, pca_dim)

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 2 or self.centroids.shape[0] < 1:
            raise ConfigError("a gater needs at least one centroid")
        if self.centroids.shape[1] != self.projection.pca_dim:
            raise ShapeError("centroid dimension must equal pca_dim")
        if not np.isfinite(self.centroids).all():
            raise ConfigError("centroids must be finite")
        if len(np.unique(self.centroids, axis=0)) != self.K:
            raise ConfigError("centroids must be pairwise distinct")

    @property
    def K(self) -> int:
        return self.centroids.shape[0]

    def route_features(self, Z) -> np.ndarray:
        """Expert id for each hidden-feature row; ties go to the lowest index."""
        return np.argmin(squared_distances(self.projection.project(Z), self.centroids), axis=1)

    def route(self, trunk: MlpModel, X, counter: OpCounter | None = None) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X))
        _, Z = forward_batch(trunk, X, counter)
        if counter is not None:
            counter.add(X.shape[0] * (self.projection.components.size + self.centroids.size))
        return self.route_features(Z)


def build_gater(trunk: MlpModel, ds: MultiLabelDataset, K: int = 50, pca_dim: int = 256,
                seed=0, pca_subsample: int | None = None,
                n_init: int = 4) -> tuple[Gater, KMeansResult]:
    Z = extract_features(trunk, ds)
    proj = fit_pca(Z, pca_dim, subsample=pca_subsample, seed=seed)
    km = fit_kmeans(proj.project(Z), K, seed=seed, n_init=n_init)
    return Gater(proj, km.centroids), km


def assign(g: Gater, trunk: MlpModel, x) -> int:
    x = np.asarray(x)
    if x.shape != (trunk.input_dim,):
        raise ShapeError(f"expected input of length {trunk.input_dim}, got shape {x.shape}")
    return int(g.route(trunk, x[None, :])[0])


@dataclass
class AssignmentManifest:
    expert_ids: np.ndarray   # (N,) in [0, K)
    K: int

    def __post_init__(self):
        self.expert_ids = np.asarray(self.expert_ids, dtype=np.int64)
        if self.expert_ids.size and (self.expert_ids.min() < 0 or self.expert_ids.max() >= self.K):
            raise ConfigError("expert id outside [0, K)")

    @property
    def n_examples(self) -> int:
        return len(self.expert_ids)

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.expert_ids, minlength=self.K)

    def members(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.expert_ids == k)


def assign_dataset(g: Gater, trunk: MlpModel, ds: MultiLabelDataset) -> AssignmentManifest:
    return AssignmentManifest(g.route_features(extract_features(trunk, ds)), g.K)


# ---------------------------------------------------------------------------
# files

def save_gater(g: Gater, path) -> None:
    p = g.projection
    header = GATER_MAGIC + struct.pack("<IIII", FORMAT_VERSION, p.feature_dim, p.pca_dim, g.K)
    body = b"".join(a.astype("<f4").tobytes() for a in (p.mean, p.components, g.centroids))
    Path(path).write_bytes(header + body)


def load_gater(path) -> Gater:
    buf = Path(path).read_bytes()
    if len(buf) < 20:
        raise FormatError("truncated gater header", offset=len(buf))
    if buf[:4] != GATER_MAGIC:
        raise FormatError(f"bad gater magic {buf[:4]!r}", offset=0)
    version, fdim, pdim, K = struct.unpack_from("<IIII", buf, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported gater version {version}", offset=4)
    sizes = (fdim, pdim * fdim, K * pdim)
    if len(buf) != 20 + 4 * sum(sizes):
        raise FormatError("gater body size mismatch", offset=20)
    pos = 20
    arrays = []
    for s in sizes:
        arrays.append(np.frombuffer(buf, "<f4", s, pos).astype(np.float64))
        pos += 4 * s
    mean, comps, cents = arrays
    return Gater(PcaProjection(mean, comps.reshape(pdim, fdim)), cents.reshape(K, pdim))


def save_manifest(m: AssignmentManifest, path) -> None:
    # K is not part of the binary layout; it travels in the bundle JSON
    Path(path).write_bytes(MANIFEST_MAGIC + struct.pack("<IQ", FORMAT_VERSION, m.n_examples)
                           + m.expert_ids.astype("<u4").tobytes())


def load_manifest(path, K: int | None = None) -> AssignmentManifest:
    buf = Path(path).read_bytes()
    if len(buf) < 16:
        raise FormatError("truncated manifest header", offset=len(buf))
    if buf[:4] != MANIFEST_MAGIC:
        raise FormatError(f"bad manifest magic {buf[:4]!r}", offset=0)
    version, n = struct.unpack_from("<IQ", buf, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported manifest version {version}", offset=4)
    if len(buf) != 16 + 4 * n:
        raise FormatError("manifest length mismatch", offset=16)
    ids = np.frombuffer(buf, "<u4", n, 16).astype(np.int64)
    if K is None:
        K = int(ids.max()) + 1 if n else 1
    return AssignmentManifest(ids, K)
