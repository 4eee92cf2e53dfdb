"""Cluster analytics: utilization, per-tag cluster histograms and how the
L1/L2 spread of a tag over clusters relates to its accuracy."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from .data import MultiLabelDataset
from .errors import ShapeError
from .gater import AssignmentManifest

log = logging.getLogger(__name__)


def cluster_utilization(manifest: AssignmentManifest) -> np.ndarray:
    return manifest.counts


def tag_cluster_distribution(ds: MultiLabelDataset, manifest: AssignmentManifest) -> np.ndarray:
    """``hist[t, k]`` = number of examples in cluster ``k`` carrying tag ``t``."""
    if manifest.n_examples != ds.n_examples:
        raise ShapeError(f"manifest covers {manifest.n_examples} examples, dataset has {ds.n_examples}")
    clusters = manifest.expert_ids[ds.example_of_tag_slot()]
    flat = ds.tag_ids * manifest.K + clusters
    return np.bincount(flat, minlength=ds.n_tags * manifest.K).reshape(ds.n_tags, manifest.K)


def norm_ratio(counts) -> float:
    """||c||_1 / ||c||_2; 1 for a one-hot vector, sqrt(K) for a uniform one."""
    c = np.asarray(counts, dtype=np.float64)
    l2 = np.sqrt((c * c).sum())
    return float(np.abs(c).sum() / l2) if l2 > 0 else float("nan")


@dataclass
class ClusterStats:
    sizes: np.ndarray
    tag_histograms: np.ndarray   # (M, K)

    @classmethod
    def compute(cls, ds: MultiLabelDataset, manifest: AssignmentManifest) -> "ClusterStats":
        return cls(cluster_utilization(manifest), tag_cluster_distribution(ds, manifest))

    @property
    def sparsity(self) -> np.ndarray:
        """Per-tag L1/L2 ratio; NaN for tags absent from every cluster."""
        h = self.tag_histograms.astype(np.float64)
        l2 = np.sqrt((h * h).sum(axis=1))
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(l2 > 0, h.sum(axis=1) / l2, np.nan)

    def support(self) -> np.ndarray:
        return self.tag_histograms.sum(axis=1)


@dataclass
class SparsityTable:
    rows: list            # (tag_id, sparsity, q10), sorted by sparsity then tag
    spearman: float
    excluded: list


def sparsity_accuracy_table(stats: ClusterStats, per_tag_q10: dict, min_support: int = 1) -> SparsityTable:
    """Join tag sparsity with per-tag q@10 and report their rank correlation.

    ``per_tag_q10`` may be an :class:`~hardmoe.evaluation.EvalReport` or a
    plain ``{tag_id: q10}`` mapping. Tags without histogram support below
    ``min_support`` are skipped silently; tags absent from the report are
    skipped with a warning.
    """
    q10 = getattr(per_tag_q10, "per_tag_q10", per_tag_q10)
    sp = stats.sparsity
    support = stats.support()
    rows, excluded = [], []
    for t in range(len(sp)):
        if support[t] < max(1, min_support):
            continue
        if t not in q10:
            excluded.append(t)
            continue
        rows.append((t, float(sp[t]), float(q10[t])))
    if excluded:
        log.warning("%d tags missing from the evaluation report were excluded", len(excluded))
    rows.sort(key=lambda r: (r[1], r[0]))
    sx, qx = np.array([r[1] for r in rows]), np.array([r[2] for r in rows])
    rho = float("nan")
    # undefined for fewer than two rows or a constant column
    if len(rows) >= 2 and np.ptp(sx) > 0 and np.ptp(qx) > 0:
        rho = float(spearmanr(sx, qx).statistic)
    return SparsityTable(rows, rho, excluded)


# ---------------------------------------------------------------------------
# CSV output

def _write(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_utilization_csv(sizes, path) -> None:
    _write(path, ["cluster_id", "count"], [(k, int(c)) for k, c in enumerate(sizes)])


def write_tag_hist_csv(hist, path) -> None:
    t_idx, k_idx = np.nonzero(hist)
    _write(path, ["tag_id", "cluster_id", "count"],
           [(int(t), int(k), int(hist[t, k])) for t, k in zip(t_idx, k_idx)])


def write_sparsity_csv(table: SparsityTable, path) -> None:
    _write(path, ["tag_id", "sparsity", "q10"], [(t, repr(s), repr(q)) for t, s, q in table.rows])


def write_plot_data(table: SparsityTable, path) -> None:
    """Whitespace-separated columns for gnuplot: sparsity q10 tag_id."""
    lines = ["# sparsity q10 tag_id"] + [f"{s!r} {q!r} {t}" for t, s, q in table.rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
