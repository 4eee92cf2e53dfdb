import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hardmoe.data import MultiLabelDataset, SyntheticSpec, generate_single_label_task
from hardmoe.errors import ConfigError, DatasetValidationError, ShapeError, UnsupportedModeError
from hardmoe.evaluation import (Ensemble, EvalReport, ensemble_predict, eval_pairs, evaluate,
                                fit_linear_probe, oracle_eval, p_at_m, q_at_m, sampled_test_loss,
                                tag_ranks, top_m, transfer_probe)
from hardmoe.gater import AssignmentManifest, Gater, PcaProjection
from hardmoe.moe import INDEPENDENT, ExpertBundle
from hardmoe.neuralcore import LossTarget, forward, init_mlp, log_softmax, loss_and_grad

from conftest import tiny_dataset
from oracles import brute_p_at_m, brute_q_at_m, brute_top_m


def table_scorer(table):
    """Scorer returning fixed logits per example, keyed by feature[0]."""
    table = np.asarray(table, dtype=np.float64)
    return lambda X: table[np.asarray(X)[:, 0].astype(int)]


def indexed_dataset(tag_lists, m):
    feats = np.arange(len(tag_lists), dtype=np.float32)[:, None]
    return MultiLabelDataset.from_tag_lists(feats, tag_lists, m, split="test")


# ---------------------------------------------------------------------------
# top_m

def test_top_m_examples():
    np.testing.assert_array_equal(top_m([0.1, 0.9, 0.5], 1), [0, 1, 0])
    np.testing.assert_array_equal(top_m([0.1, 0.9, 0.5], 3), [1, 1, 1])
    np.testing.assert_array_equal(top_m([0.5, 0.5, 0.1], 1), [1, 0, 0])
    with pytest.raises(ConfigError):
        top_m([1.0, 2.0], 3)


@given(st.lists(st.integers(-3, 3), min_size=1, max_size=8), st.data())
def test_ranks_agree_with_top_m(scores, data):
    scores = np.array(scores, dtype=float)
    m = data.draw(st.integers(0, len(scores)))
    sel = top_m(scores, m)
    assert set(np.flatnonzero(sel)) == brute_top_m(list(scores), m)
    ranks = tag_ranks(np.tile(scores, (len(scores), 1)), np.arange(len(scores)))
    np.testing.assert_array_equal(ranks < m, sel.astype(bool))


# ---------------------------------------------------------------------------
# p@m and q@m

def test_p_at_1_hand_example():
    ds = indexed_dataset([[0], [0, 1]], 3)
    scorer = table_scorer([[5, 1, 0], [4, 3, 0]])
    assert p_at_m(scorer, ds, 1) == pytest.approx(2 / 3)
    assert p_at_m(scorer, ds, 3) == 1.0
    assert p_at_m(table_scorer([[0, 1, 5], [0, 1, 5]]), ds, 1) == 0.0


def test_p_at_m_needs_examples():
    empty = MultiLabelDataset.from_tag_lists(np.zeros((0, 1)), [], 3)
    with pytest.raises(ConfigError):
        p_at_m(table_scorer([[0, 0, 0]]), empty, 1)


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("m", [1, 2, 5])
def test_p_at_m_matches_brute_force(seed, m):
    rng = np.random.default_rng(seed)
    ds = tiny_dataset(n=int(rng.integers(1, 21)), m=10, seed=seed)
    ds = indexed_dataset(ds.tag_lists(), 10)
    table = rng.integers(0, 4, size=(ds.n_examples, 10)).astype(float)  # many ties
    assert p_at_m(table_scorer(table), ds, m) == brute_p_at_m(table, ds.tag_lists(), m)


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("m", [1, 2, 5])
def test_q_at_m_matches_exact_expectation(seed, m):
    rng = np.random.default_rng(100 + seed)
    ds = indexed_dataset(tiny_dataset(n=15, m=8, seed=seed).tag_lists(), 8)
    table = rng.integers(0, 3, size=(15, 8)).astype(float)
    S = 40000
    exact = brute_q_at_m(table, ds.tag_lists(), m, 8)
    got = q_at_m(table_scorer(table), ds, m, S, seed=seed)
    se = np.sqrt(max(exact * (1 - exact), 1e-12) / S)
    assert abs(got - exact) <= 4 * se + 1e-12


def test_q_at_m_on_sample_stream_is_exact_count():
    """On the literal sampled stream q@m is a count; check it against a loop."""
    rng = np.random.default_rng(3)
    ds = indexed_dataset(tiny_dataset(n=18, m=6, seed=3).tag_lists(), 6)
    table = rng.normal(size=(18, 6))
    ex, tags = eval_pairs(ds, 500, seed=9)
    for m in (1, 2, 5):
        ref = np.mean([t in brute_top_m(list(table[i]), m) for i, t in zip(ex, tags)])
        assert q_at_m(table_scorer(table), ds, m, 500, seed=9) == ref


def test_perfect_model_q1():
    tags = [[i % 4] for i in range(12)]
    ds = indexed_dataset(tags, 4)
    table = np.eye(4)[[t[0] for t in tags]]
    assert q_at_m(table_scorer(table), ds, 1, 1000) == 1.0


def test_uniform_scorer_q_at_m():
    M, S = 40, 100_000
    # one random score row per image; enough images that repeats in the
    # sample stream are rare and the draws are effectively independent
    ds = indexed_dataset([[i % M] for i in range(1_000_000)], M)
    rng = np.random.default_rng(0)
    scorer = lambda X: rng.random((len(X), M))
    for m in (1, 5, 10):
        p = m / M
        got = q_at_m(scorer, ds, m, S, seed=m)
        assert abs(got - p) <= 3 * np.sqrt(p * (1 - p) / S)


def test_zero_samples_rejected():
    ds = tiny_dataset(split="test")
    model = init_mlp([3, 4, 5], 0)
    with pytest.raises(ConfigError):
        q_at_m(model, ds, 1, 0)
    with pytest.raises(ConfigError):
        sampled_test_loss(model, ds, 0)


def test_sampling_deterministic():
    ds = tiny_dataset(n=30, split="test")
    model = init_mlp([3, 4, 5], 0)
    assert q_at_m(model, ds, 2, 300, seed=4) == q_at_m(model, ds, 2, 300, seed=4)
    assert sampled_test_loss(model, ds, 300, 4) == sampled_test_loss(model, ds, 300, 4)


def test_metrics_monotone_in_m():
    ds = tiny_dataset(n=30, m=7, split="test")
    model = init_mlp([3, 6, 7], 1)
    r = evaluate(model, ds, S=2000, ms=range(8))
    for m in range(7):
        assert r.q_at[m] <= r.q_at[m + 1] and r.p_at[m] <= r.p_at[m + 1]


# ---------------------------------------------------------------------------
# sampled loss

def test_constant_logits_loss_is_log_m():
    ds = tiny_dataset(n=20, m=7, split="test")
    assert sampled_test_loss(lambda X: np.full((len(X), 7), 2.5), ds, 1000) == pytest.approx(np.log(7),
                                                                                            abs=1e-12)


def test_single_sample_matches_loss_and_grad():
    ds = tiny_dataset(n=20, m=5, split="test")
    model = init_mlp([3, 4, 5], 2)
    [i], [t] = eval_pairs(ds, 1, seed=7)
    ref, _ = loss_and_grad(model, ds.features[i], LossTarget([t]))
    assert sampled_test_loss(model, ds, 1, seed=7) == pytest.approx(ref, rel=1e-12)


def test_sampled_loss_matches_exhaustive_average():
    ds = tiny_dataset(n=16, m=6, seed=5, split="test")
    model = init_mlp([3, 5, 6], 3)
    logp = log_softmax(np.stack([forward(model, x)[0] for x in ds.features.astype(np.float64)]))
    per_tag = []
    for t in range(6):
        imgs = [i for i, tags in enumerate(ds.tag_lists()) if t in tags]
        if imgs:
            per_tag.append(-logp[imgs, t])
    exact = np.mean([v.mean() for v in per_tag])
    var = np.mean([np.mean((v - exact) ** 2) for v in per_tag])
    S = 20000
    assert abs(sampled_test_loss(model, ds, S, 1) - exact) <= 3 * np.sqrt(var / S)


# ---------------------------------------------------------------------------
# oracle

def _bundle(K, seed=0, n_in=3, n_out=6):
    rng = np.random.default_rng(seed)
    trunk = init_mlp([n_in, 4, n_out], rng)
    g = Gater(PcaProjection(np.zeros(4), np.eye(4)[:2]), rng.normal(size=(K, 2)))
    experts = [init_mlp([n_in, 5, n_out], rng) for _ in range(K)]
    return ExpertBundle(g, trunk, experts, INDEPENDENT, AssignmentManifest(np.zeros(0, int), K))


def test_oracle_single_expert_equals_gated():
    ds = tiny_dataset(n=20, m=6, split="test")
    o = oracle_eval(_bundle(1), ds, S=500)
    assert o.q_at == o.gated_q_at and o.test_loss == o.gated_test_loss


@pytest.mark.parametrize("seed", range(5))
def test_oracle_dominates_gated(seed):
    ds = tiny_dataset(n=25, m=6, seed=seed, split="test")
    b = _bundle(4, seed)
    o = oracle_eval(b, ds, S=800, seed=seed)
    for m in o.q_at:
        assert o.q_at[m] >= o.gated_q_at[m]
    assert o.test_loss <= o.gated_test_loss
    # gated numbers are the ordinary metrics on the same stream
    assert o.gated_q_at[1] == q_at_m(b, ds, 1, 800, seed)
    assert o.gated_test_loss == pytest.approx(sampled_test_loss(b, ds, 800, seed), rel=1e-12)


def test_oracle_matches_per_sample_scan():
    ds = tiny_dataset(n=10, m=6, seed=8, split="test")
    b = _bundle(3, 8)
    S = 200
    ex, tags = eval_pairs(ds, S, seed=2)
    hits, losses = {1: [], 5: []}, []
    for i, t in zip(ex, tags):
        x = ds.features[i].astype(np.float64)
        outs = [forward(e, x)[0] for e in b.experts]
        ranks = [sorted(range(6), key=lambda j: (-o[j], j)).index(t) for o in outs]
        best = int(np.argmin(ranks))
        for m in hits:
            hits[m].append(ranks[best] < m)
        losses.append(min(-log_softmax(o)[t] for o in outs))
    o = oracle_eval(b, ds, ms=(1, 5), S=S, seed=2)
    assert o.q_at == {m: float(np.mean(v)) for m, v in hits.items()}
    assert o.test_loss == pytest.approx(np.mean(losses), rel=1e-10)


# ---------------------------------------------------------------------------
# ensembles

def test_ensemble_single_and_duplicate_members():
    a = init_mlp([3, 4, 5], 0)
    X = np.random.default_rng(0).normal(size=(10, 3))
    for members in ([a], [a, a.copy()]):
        out = Ensemble(members).logits(X)
        raw = np.stack([forward(a, x)[0] for x in X])
        for m in (1, 3):
            np.testing.assert_array_equal([top_m(r, m) for r in out], [top_m(r, m) for r in raw])
        ref = np.stack([log_softmax(r) for r in raw])
        np.testing.assert_allclose(out, ref, atol=1e-12)


def test_probability_average_differs_from_logit_average():
    # member 1 is confident in class 0, member 2 mildly prefers class 1
    z1, z2 = np.array([10.0, 0.0, 0.0]), np.array([0.0, 2.0, 1.9])
    m1 = init_mlp([1, 1, 3], 0)
    m2 = init_mlp([1, 1, 3], 0)
    for m, z in ((m1, z1), (m2, z2)):
        m.weights[-1][:] = 0
        m.biases[-1][:] = z
    prob = ensemble_predict([m1, m2], [0.0])
    logit_avg = (z1 + z2) / 2
    assert np.argmax(prob) == 0
    np.testing.assert_allclose(np.exp(prob).sum(), 1.0)
    probs_from_logits = np.exp(log_softmax(logit_avg))
    assert not np.allclose(np.exp(prob), probs_from_logits, atol=1e-3)


def test_ensemble_rejects_mismatch():
    with pytest.raises(ShapeError):
        Ensemble([init_mlp([3, 4, 5], 0), init_mlp([3, 4, 6], 0)])
    with pytest.raises(ConfigError):
        Ensemble([])


# ---------------------------------------------------------------------------
# transfer probe

def _single_label(labels, n_classes, d=4, seed=0):
    feats = np.random.default_rng(seed).normal(size=(len(labels), d))
    return MultiLabelDataset.from_tag_lists(feats, [[int(l)] for l in labels], n_classes)


def test_probe_single_class_is_perfect():
    tr, te = _single_label([2] * 30, 4), _single_label([2] * 10, 4, seed=1)
    assert transfer_probe(init_mlp([4, 3, 4], 0), tr, te) == 1.0


def test_probe_zero_features_gives_majority_frequency():
    tr = _single_label([0] * 10 + [1] * 25 + [2] * 5, 3)
    te = _single_label([0] * 6 + [1] * 9 + [2] * 5, 3, seed=1)
    zero = lambda X: np.zeros((len(X), 5))
    assert transfer_probe(zero, tr, te) == pytest.approx(9 / 20)


def test_probe_learns_linear_labels():
    F = np.random.default_rng(0).normal(size=(300, 3))
    y = (F[:, 0] > 0).astype(int) + 2 * (F[:, 1] > 0)
    probe = fit_linear_probe(F, y, 4)
    assert np.mean(np.argmax(probe.logits(F), axis=1) == y) > 0.95


def test_probe_errors():
    tr = _single_label([0, 1] * 5, 2)
    with pytest.raises(UnsupportedModeError):
        transfer_probe(_bundle(2, n_in=4, n_out=2), tr, tr)
    multi = MultiLabelDataset.from_tag_lists(np.zeros((2, 4)), [[0, 1], [1]], 2)
    with pytest.raises(DatasetValidationError):
        transfer_probe(init_mlp([4, 3, 2], 0), multi, tr)


def test_shared_features_beat_nothing_on_synthetic_task():
    spec = SyntheticSpec(n_modes=2, examples_per_mode=50, feature_dim=6, n_tags=10, tags_per_mode=4,
                         affinity_rank=3, n_generic=2)
    tr = generate_single_label_task(spec, 0, 1, 3, "train", 200)
    te = generate_single_label_task(spec, 0, 1, 3, "test", 200)
    assert tr.n_tags == 6 and np.all(tr.tag_counts() == 1)
    identity = lambda X: X
    majority = np.bincount(te.tag_ids).max() / te.n_examples
    assert transfer_probe(identity, tr, te) > majority + 0.2


# ---------------------------------------------------------------------------
# reports

def test_report_json_keys_and_roundtrip(tmp_path):
    ds = tiny_dataset(n=20, m=5, split="test")
    r = evaluate(init_mlp([3, 4, 5], 0), ds, train_ds=tiny_dataset(n=15, m=5, seed=1), S=300,
                 descriptor="base")
    r.save_json(tmp_path / "r.json")
    d = json.loads((tmp_path / "r.json").read_text())
    assert set(d) == {"test_loss", "train_loss", "q_at", "p_at", "per_tag_q10", "S", "model", "flags"}
    assert set(d["q_at"]) == set(d["p_at"]) == {"1", "5", "10"}
    assert EvalReport.load_json(tmp_path / "r.json") == r
    r.save_per_tag_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "tag_id,q10" and len(lines) == 1 + len(r.per_tag_q10)


def test_per_tag_q10_exhaustive():
    ds = indexed_dataset([[0], [0, 1], [1], [2]], 12)
    table = np.zeros((4, 12))
    table[:, 0] = 1  # tag 0 always ranks first
    table[2, 1] = -1  # tag 1 drops below ten zeros on example 2
    table[3, 2] = -1
    r = evaluate(table_scorer(table), ds, S=100)
    assert r.per_tag_q10 == {0: 1.0, 1: 0.5, 2: 0.0}
