"""Multi-label datasets: in-memory layout, binary file format, synthetic
generation and the per-class training sampler.

Tag sets are kept in CSR form (``tag_offsets``/``tag_ids``) so that a
dataset of any size is two flat arrays plus the feature matrix.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DatasetValidationError, FormatError, SamplerError

DATASET_MAGIC = b"HMOE"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sIIQI")
SPLITS = ("train", "valid", "test")


@dataclass(frozen=True)
class TagDictionary:
    """Ordered tag strings; the position of a string is its tag id."""

    entries: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.entries)) != len(self.entries):
            raise DatasetValidationError("tag strings must be unique")
        for s in self.entries:
            if "\n" in s or not s:
                raise DatasetValidationError(f"invalid tag string {s!r}")

    @property
    def size(self) -> int:
        return len(self.entries)

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, tag_id: int) -> str:
        return self.entries[tag_id]

    @classmethod
    def synthetic(cls, n_tags: int) -> "TagDictionary":
        width = max(4, len(str(n_tags - 1)))
        return cls(tuple(f"tag_{i:0{width}d}" for i in range(n_tags)))

    def save(self, path) -> None:
        Path(path).write_text("".join(s + "\n" for s in self.entries), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "TagDictionary":
        text = Path(path).read_text(encoding="utf-8")
        return cls(tuple(text.splitlines()))


class MultiLabelDataset:
    """Dense float32 features with a sorted, duplicate-free tag set per example.

    ``latent_modes`` is only populated by the synthetic generator; it is not
    part of the file format.
    """

    def __init__(self, features, tag_offsets, tag_ids, n_tags, split="train",
                 latent_modes=None, validate=True):
        self.features = np.ascontiguousarray(features, dtype=np.float32)
        if self.features.ndim != 2:
            raise DatasetValidationError("features must be a 2-D array")
        self.tag_offsets = np.asarray(tag_offsets, dtype=np.int64)
        self.tag_ids = np.asarray(tag_ids, dtype=np.int64)
        self.n_tags = int(n_tags)
        if split not in SPLITS:
            raise DatasetValidationError(f"unknown split {split!r}")
        self.split = split
        self.latent_modes = None if latent_modes is None else np.asarray(latent_modes, dtype=np.int64)
        if validate:
            self._validate()

    @classmethod
    def from_tag_lists(cls, features, tag_lists, n_tags, split="train", latent_modes=None):
        features = np.asarray(features, dtype=np.float32)
        if features.ndim == 1:
            features = features.reshape(len(tag_lists), -1)
        offsets = np.zeros(len(tag_lists) + 1, dtype=np.int64)
        flat = []
        for i, tags in enumerate(tag_lists):
            tags = sorted(int(t) for t in tags)
            flat.extend(tags)
            offsets[i + 1] = offsets[i] + len(tags)
        return cls(features, offsets, np.asarray(flat, dtype=np.int64), n_tags, split, latent_modes)

    def _validate(self):
        n = self.features.shape[0]
        if self.tag_offsets.shape != (n + 1,) or self.tag_offsets[0] != 0:
            raise DatasetValidationError("tag_offsets must have length n_examples + 1 and start at 0")
        if self.tag_offsets[-1] != len(self.tag_ids):
            raise DatasetValidationError("tag_offsets do not cover tag_ids")
        counts = np.diff(self.tag_offsets)
        empty = np.flatnonzero(counts <= 0)
        if empty.size:
            raise DatasetValidationError(f"example {int(empty[0])} has no tags")
        if self.tag_ids.size and (self.tag_ids.min() < 0 or self.tag_ids.max() >= self.n_tags):
            bad = int(np.flatnonzero((self.tag_ids < 0) | (self.tag_ids >= self.n_tags))[0])
            example = int(np.searchsorted(self.tag_offsets, bad, side="right") - 1)
            raise DatasetValidationError(
                f"example {example} has tag id {int(self.tag_ids[bad])} outside [0, {self.n_tags})")
        # strictly increasing inside each example <=> sorted and no duplicates
        if self.tag_ids.size > 1:
            owner = self.example_of_tag_slot()
            same = owner[1:] == owner[:-1]
            bad = np.flatnonzero(same & (np.diff(self.tag_ids) <= 0))
            if bad.size:
                example = int(owner[bad[0]])
                raise DatasetValidationError(f"example {example} has unsorted or duplicate tags")
        if self.latent_modes is not None and self.latent_modes.shape != (n,):
            raise DatasetValidationError("latent_modes must have one entry per example")

    @property
    def n_examples(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def __len__(self):
        return self.n_examples

    def tags_of(self, i: int) -> np.ndarray:
        return self.tag_ids[self.tag_offsets[i]:self.tag_offsets[i + 1]]

    def tag_lists(self) -> list[list[int]]:
        return [self.tags_of(i).tolist() for i in range(self.n_examples)]

    def tag_counts(self) -> np.ndarray:
        return np.diff(self.tag_offsets)

    def example_of_tag_slot(self) -> np.ndarray:
        """Example index for every entry of ``tag_ids``."""
        return np.repeat(np.arange(self.n_examples), self.tag_counts())

    def indicator(self, rows=None) -> np.ndarray:
        """Dense 0/1 target matrix (n × M); only for small subsets."""
        rows = np.arange(self.n_examples) if rows is None else np.asarray(rows)
        out = np.zeros((len(rows), self.n_tags))
        for r, i in enumerate(rows):
            out[r, self.tags_of(i)] = 1.0
        return out

    def subset(self, rows, split=None) -> "MultiLabelDataset":
        rows = np.asarray(rows, dtype=np.int64)
        counts = self.tag_counts()[rows]
        offsets = np.zeros(len(rows) + 1, dtype=np.int64)
        np.cumsum(counts, out=offsets[1:])
        if len(rows):
            ids = np.concatenate([self.tags_of(i) for i in rows])
        else:
            ids = np.zeros(0, dtype=np.int64)
        latent = None if self.latent_modes is None else self.latent_modes[rows]
        return MultiLabelDataset(self.features[rows], offsets, ids, self.n_tags,
                                 split or self.split, latent, validate=False)

    def __eq__(self, other):
        if not isinstance(other, MultiLabelDataset):
            return NotImplemented
        return (self.n_tags == other.n_tags
                and self.features.shape == other.features.shape
                and self.features.tobytes() == other.features.tobytes()
                and np.array_equal(self.tag_offsets, other.tag_offsets)
                and np.array_equal(self.tag_ids, other.tag_ids))

    __hash__ = None

    def __repr__(self):
        return (f"MultiLabelDataset(n_examples={self.n_examples}, feature_dim={self.feature_dim}, "
                f"n_tags={self.n_tags}, split={self.split!r})")


# ---------------------------------------------------------------------------
# binary file format

def save_dataset(ds: MultiLabelDataset, path) -> None:
    n, d = ds.features.shape
    if ds.n_tags >= 2**32 or d >= 2**32:
        raise DatasetValidationError("dictionary or feature dimension too large for the file format")
    counts = ds.tag_counts()
    if counts.size and counts.max() > 0xFFFF:
        raise DatasetValidationError("an example has more than 65535 tags")
    chunks = [_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, ds.n_tags, n, d)]
    feats = ds.features.astype("<f4", copy=False)
    ids = ds.tag_ids.astype("<u4")
    for i in range(n):
        chunks.append(feats[i].tobytes())
        chunks.append(struct.pack("<H", int(counts[i])))
        chunks.append(ids[ds.tag_offsets[i]:ds.tag_offsets[i + 1]].tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_dataset(path, split: str = "train") -> MultiLabelDataset:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise FormatError("truncated header", offset=len(buf))
    magic, version, n_tags, n, d = _HEADER.unpack_from(buf, 0)
    if magic != DATASET_MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}", offset=4)
    pos = _HEADER.size
    feat_bytes = 4 * d
    features = np.empty((n, d), dtype=np.float32)
    offsets = np.zeros(n + 1, dtype=np.int64)
    ids = []
    for i in range(n):
        if pos + feat_bytes + 2 > len(buf):
            raise FormatError(f"truncated record {i}", offset=pos)
        features[i] = np.frombuffer(buf, dtype="<f4", count=d, offset=pos)
        pos += feat_bytes
        (k,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if pos + 4 * k > len(buf):
            raise FormatError(f"truncated tag list in record {i}", offset=pos)
        tags = np.frombuffer(buf, dtype="<u4", count=k, offset=pos).astype(np.int64)
        if k and tags.max() >= n_tags:
            j = int(np.argmax(tags >= n_tags))
            raise FormatError(f"record {i} has tag id {int(tags[j])} >= M={n_tags}", offset=pos + 4 * j)
        if k == 0:
            raise DatasetValidationError(f"example {i} has no tags")
        if k > 1 and np.any(np.diff(tags) <= 0):
            raise FormatError(f"record {i} tag ids not strictly ascending", offset=pos)
        pos += 4 * k
        ids.append(tags)
        offsets[i + 1] = offsets[i] + k
    if pos != len(buf):
        raise FormatError("trailing bytes after last record", offset=pos)
    flat = np.concatenate(ids) if ids else np.zeros(0, dtype=np.int64)
    return MultiLabelDataset(features, offsets, flat, n_tags, split)


# ---------------------------------------------------------------------------
# tag index and per-class sampling

@dataclass(frozen=True)
class TagIndex:
    """For every tag, the sorted example indices carrying it (CSR layout)."""

    offsets: np.ndarray
    examples: np.ndarray

    @classmethod
    def build(cls, ds: MultiLabelDataset) -> "TagIndex":
        owner = ds.example_of_tag_slot()
        order = np.argsort(ds.tag_ids, kind="stable")
        counts = np.bincount(ds.tag_ids, minlength=ds.n_tags)
        offsets = np.zeros(ds.n_tags + 1, dtype=np.int64)
        np.cumsum(counts, out=offsets[1:])
        return cls(offsets, owner[order])

    @property
    def n_tags(self) -> int:
        return len(self.offsets) - 1

    def support(self) -> np.ndarray:
        return np.diff(self.offsets)

    def supported_tags(self) -> np.ndarray:
        return np.flatnonzero(self.support() > 0)

    def examples_of(self, tag: int) -> np.ndarray:
        return self.examples[self.offsets[tag]:self.offsets[tag + 1]]


def sample_pairs(index: TagIndex, n: int, rng: np.random.Generator):
    """Draw ``n`` (example, tag) pairs: tag uniform over supported tags, then
    an example uniform among those carrying it."""
    supported = index.supported_tags()
    if supported.size == 0:
        raise SamplerError("no tag has any supporting example")
    tags = supported[rng.integers(len(supported), size=n)]
    support = index.support()[tags]
    pos = rng.integers(0, support)
    return index.examples[index.offsets[tags] + pos], tags


def sample_per_class(ds: MultiLabelDataset, index: TagIndex, rng: np.random.Generator):
    """Single per-class draw; returns ``(example_index, sampled_tag_id)``."""
    ex, tags = sample_pairs(index, 1, rng)
    return int(ex[0]), int(tags[0])


class PerClassSampler:
    """Private-RNG per-class sampler over one dataset. Not thread-safe; use
    one instance per worker."""

    def __init__(self, ds: MultiLabelDataset, seed=0, index: TagIndex | None = None):
        self.ds = ds
        self.index = index if index is not None else TagIndex.build(ds)
        self.rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    def draw(self, n: int):
        return sample_pairs(self.index, n, self.rng)


# ---------------------------------------------------------------------------
# synthetic data

@dataclass(frozen=True)
class SyntheticSpec:
    """Gaussian-mode generator parameters.

    Each mode owns ``tags_per_mode`` preferred tags (tag ``m`` is always in
    mode ``m``'s set, which keeps the sets distinct). Within a mode the
    preferred tags compete through random linear scores of the offset from
    the mode center (restricted to a per-mode ``affinity_rank``-dim subspace
    when set), sharpened by ``concentration``; a ``noise`` fraction of
    the tag distribution is spread uniformly over the whole dictionary, or
    over ``n_generic`` fixed feature-independent tags when that is set.
    """

    n_modes: int = 8
    examples_per_mode: int = 2500
    feature_dim: int = 32
    n_tags: int = 100
    tags_per_mode: int = 10
    mean_tags: float = 2.0
    max_tags: int = 6
    concentration: float = 3.0
    noise: float = 0.1
    mode_scale: float = 2.0
    within_scale: float = 1.0
    affinity_rank: int | None = None
    n_generic: int | None = None

    def validate(self):
        if self.n_modes < 1:
            raise ConfigError("n_modes must be >= 1")
        if self.n_modes > self.n_tags:
            raise ConfigError(f"n_modes={self.n_modes} exceeds dictionary size M={self.n_tags}")
        if not 1 <= self.tags_per_mode <= self.n_tags:
            raise ConfigError("tags_per_mode must lie in [1, n_tags]")
        if self.examples_per_mode < 0 or self.feature_dim < 1:
            raise ConfigError("examples_per_mode must be >= 0 and feature_dim >= 1")
        if not 0.0 <= self.noise <= 1.0:
            raise ConfigError("noise must lie in [0, 1]")
        if self.mean_tags < 1 or self.max_tags < 1:
            raise ConfigError("mean_tags and max_tags must be >= 1")
        if self.affinity_rank is not None and not 1 <= self.affinity_rank <= self.feature_dim:
            raise ConfigError("affinity_rank must lie in [1, feature_dim]")
        if self.n_generic is not None and not 1 <= self.n_generic <= self.n_tags - self.n_modes:
            raise ConfigError("n_generic must lie in [1, n_tags - n_modes]")


@dataclass
class _Geometry:
    centers: np.ndarray
    preferred: np.ndarray   # n_modes × tags_per_mode
    directions: np.ndarray  # n_modes × tags_per_mode × feature_dim
    basis: np.ndarray | None  # n_modes × feature_dim × affinity_rank
    noise_tags: np.ndarray


_SPLIT_STREAM = {"train": 1, "valid": 2, "test": 3}


def _geometry(spec: SyntheticSpec, seed: int) -> _Geometry:
    rng = np.random.default_rng([seed, 0])
    centers = rng.normal(0.0, spec.mode_scale, size=(spec.n_modes, spec.feature_dim))
    preferred = np.empty((spec.n_modes, spec.tags_per_mode), dtype=np.int64)
    for m in range(spec.n_modes):
        others = np.setdiff1d(np.arange(spec.n_tags), [m])
        extra = rng.choice(others, size=spec.tags_per_mode - 1, replace=False)
        preferred[m] = np.concatenate([[m], extra])
    basis = None
    if spec.affinity_rank is None:
        directions = rng.normal(size=(spec.n_modes, spec.tags_per_mode, spec.feature_dim))
        directions /= np.sqrt(spec.feature_dim)
    else:
        # scores depend on the offset only through a per-mode orthonormal subspace
        r = spec.affinity_rank
        mix = rng.normal(size=(spec.n_modes, spec.tags_per_mode, r)) / np.sqrt(r)
        basis = np.linalg.qr(rng.normal(size=(spec.n_modes, spec.feature_dim, r)))[0]
        directions = np.einsum("mtr,mdr->mtd", mix, basis)
    if spec.n_generic is None:
        noise_tags = np.arange(spec.n_tags)
    else:
        noise_tags = np.sort(rng.choice(np.arange(spec.n_modes, spec.n_tags), spec.n_generic,
                                        replace=False))
    return _Geometry(centers, preferred, directions, basis, noise_tags)


def generic_tags(spec: SyntheticSpec, seed: int) -> np.ndarray:
    """Tags that receive the noise mass (the whole dictionary by default)."""
    spec.validate()
    return _geometry(spec, seed).noise_tags.copy()


def preferred_tags(spec: SyntheticSpec, seed: int) -> np.ndarray:
    """Per-mode preferred tag sets of the generator (rows = modes)."""
    spec.validate()
    return _geometry(spec, seed).preferred.copy()


def _draw_points(spec, geom, rng, n_per_mode):
    n = spec.n_modes * n_per_mode
    modes = rng.permutation(np.repeat(np.arange(spec.n_modes), n_per_mode))
    offsets = rng.normal(size=(n, spec.feature_dim))
    x = geom.centers[modes] + spec.within_scale * offsets
    return modes, offsets, x


def generate_synthetic(spec: SyntheticSpec, seed: int, split: str = "train",
                       n_per_mode: int | None = None) -> MultiLabelDataset:
    """Deterministic multi-label dataset drawn from ``spec.n_modes`` Gaussian modes.

    All splits generated from the same ``seed`` share mode centers and tag
    preferences; only the sampled examples differ.
    """
    spec.validate()
    if split not in _SPLIT_STREAM:
        raise ConfigError(f"unknown split {split!r}")
    n_per_mode = spec.examples_per_mode if n_per_mode is None else n_per_mode
    geom = _geometry(spec, seed)
    rng = np.random.default_rng([seed, _SPLIT_STREAM[split]])
    modes, offsets, x = _draw_points(spec, geom, rng, n_per_mode)
    n = len(modes)

    # within-mode affinity over the preferred set
    scores = np.einsum("ntd,nd->nt", geom.directions[modes], offsets) * spec.concentration
    scores -= scores.max(axis=1, keepdims=True)
    pref_p = np.exp(scores)
    pref_p /= pref_p.sum(axis=1, keepdims=True)

    n_tags_each = np.minimum(1 + rng.poisson(spec.mean_tags - 1.0, size=n), spec.max_tags)
    uniform = np.zeros(spec.n_tags)
    uniform[geom.noise_tags] = spec.noise / len(geom.noise_tags)
    tag_lists = []
    for i in range(n):
        p = uniform.copy()
        p[geom.preferred[modes[i]]] += (1.0 - spec.noise) * pref_p[i]
        p /= p.sum()
        k = min(int(n_tags_each[i]), int(np.count_nonzero(p)))
        tag_lists.append(rng.choice(spec.n_tags, size=k, replace=False, p=p))
    return MultiLabelDataset.from_tag_lists(x, tag_lists, spec.n_tags, split, latent_modes=modes)


def generate_single_label_task(spec: SyntheticSpec, seed: int, task_seed: int,
                               classes_per_mode: int = 4, split: str = "train",
                               n_per_mode: int | None = None) -> MultiLabelDataset:
    """Held-out fine-grained task living in the same feature geometry.

    Mode centers come from ``seed`` (as in :func:`generate_synthetic`); a new
    set of ``classes_per_mode`` linear scores per mode, drawn from
    ``task_seed``, picks one label per example. Labels are
    ``mode * classes_per_mode + argmax(score)``. With ``affinity_rank`` set
    the scores live in the same per-mode subspace as the tag affinities.
    """
    spec.validate()
    if classes_per_mode < 1:
        raise ConfigError("classes_per_mode must be >= 1")
    n_per_mode = spec.examples_per_mode if n_per_mode is None else n_per_mode
    geom = _geometry(spec, seed)
    task_rng = np.random.default_rng([seed, 100 + task_seed, 0])
    if geom.basis is None:
        dirs = task_rng.normal(size=(spec.n_modes, classes_per_mode, spec.feature_dim))
    else:
        mix = task_rng.normal(size=(spec.n_modes, classes_per_mode, geom.basis.shape[2]))
        dirs = np.einsum("mcr,mdr->mcd", mix, geom.basis)
    rng = np.random.default_rng([seed, 100 + task_seed, _SPLIT_STREAM[split]])
    modes, offsets, x = _draw_points(spec, geom, rng, n_per_mode)
    sub = np.argmax(np.einsum("ncd,nd->nc", dirs[modes], offsets), axis=1)
    labels = modes * classes_per_mode + sub
    n_classes = spec.n_modes * classes_per_mode
    return MultiLabelDataset(x, np.arange(len(labels) + 1), labels, n_classes, split, latent_modes=modes)
