import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.optimize import linprog

from hardmoe.data import PerClassSampler, SyntheticSpec, generate_synthetic
from hardmoe.errors import ConfigError, FormatError, ShapeError, TrainingError
from hardmoe.evaluation import q_at_m
from hardmoe.neuralcore import (Gradients, LossTarget, MlpModel, OptState, SgdConfig,
                                batch_loss_and_grad, compose, forward, forward_batch, init_mlp,
                                load_checkpoint, loss_and_grad, lr_at_epoch, onehot,
                                round_to_f32, save_checkpoint, sgd_step, train)

from oracles import finite_difference_grads, grads_close, straight_line_forward


def zero_model(dims):
    return MlpModel(dims, [np.zeros((o, i)) for i, o in zip(dims[:-1], dims[1:])],
                    [np.zeros(o) for o in dims[1:]])


# ---------------------------------------------------------------------------
# forward

def test_zero_model_gives_zero_logits_and_hidden():
    logits, hidden = forward(zero_model([3, 4, 5]), np.ones(3))
    assert np.all(logits == 0) and np.all(hidden == 0) and hidden.shape == (4,)


def test_single_layer_identity():
    m = MlpModel([3, 3], [np.eye(3)], [np.zeros(3)])
    x = np.array([0.5, -2.0, 3.0])
    logits, hidden = forward(m, x)
    assert np.array_equal(logits, x) and np.array_equal(hidden, x)


@given(seed=st.integers(0, 2**31), depth=st.integers(1, 4))
def test_forward_matches_straight_line_oracle(seed, depth):
    rng = np.random.default_rng(seed)
    dims = rng.integers(1, 6, size=depth + 1).tolist()
    m = init_mlp(dims, rng)
    for b in m.biases:
        b[:] = rng.normal(size=b.shape)
    x = rng.normal(size=dims[0])
    logits, hidden = forward(m, x)
    ref_logits, ref_hidden = straight_line_forward(m.weights, m.biases, x)
    np.testing.assert_allclose(logits, ref_logits, rtol=1e-6, atol=1e-12)
    np.testing.assert_allclose(hidden, ref_hidden, rtol=1e-6, atol=1e-12)


def test_forward_shape_error():
    with pytest.raises(ShapeError):
        forward(init_mlp([3, 2], 0), np.zeros(4))


def test_batch_forward_equals_rowwise():
    m = init_mlp([4, 6, 3], 1)
    X = np.random.default_rng(2).normal(size=(7, 4))
    logits, hidden = forward_batch(m, X)
    for i in range(7):
        l, h = forward(m, X[i])
        np.testing.assert_allclose(logits[i], l, rtol=1e-12)
        np.testing.assert_allclose(hidden[i], h, rtol=1e-12)


# ---------------------------------------------------------------------------
# loss

def test_uniform_logits_single_positive_is_ln_M():
    loss, _ = loss_and_grad(zero_model([2, 10]), np.ones(2), LossTarget({4}))
    assert loss == pytest.approx(math.log(10), abs=1e-12)
    assert loss == pytest.approx(2.302585, abs=1e-6)


def test_two_positives_double_the_loss():
    loss, _ = loss_and_grad(zero_model([2, 10]), np.ones(2), LossTarget({1, 7}))
    assert loss == pytest.approx(2 * math.log(10), abs=1e-12)


def test_empty_target_rejected():
    with pytest.raises(ConfigError):
        LossTarget(set())


def test_target_outside_output_rejected():
    with pytest.raises(ShapeError):
        loss_and_grad(zero_model([2, 3]), np.ones(2), LossTarget({3}))


@given(seed=st.integers(0, 2**31))
def test_loss_is_nonnegative(seed):
    rng = np.random.default_rng(seed)
    m = init_mlp([3, 5, 4], rng)
    loss, _ = loss_and_grad(m, rng.normal(size=3) * 5, LossTarget({int(rng.integers(4))}))
    assert loss >= 0


@pytest.mark.parametrize("case", range(25))
def test_gradients_match_finite_differences(case):
    rng = np.random.default_rng(case)
    depth = 2 + case % 3
    dims = rng.integers(2, 6, size=depth + 1).tolist()
    m = init_mlp(dims, rng)
    for b in m.biases:
        b[:] = rng.normal(size=b.shape) * 0.1
    n = int(rng.integers(1, 4))
    X = rng.normal(size=(n, dims[0]))
    Y = np.zeros((n, dims[-1]))
    for i in range(n):
        Y[i, rng.choice(dims[-1], size=rng.integers(1, dims[-1] + 1), replace=False)] = 1.0
    _, g = batch_loss_and_grad(m, X, Y)
    fw, fb = finite_difference_grads(m, X, Y)
    for a, f in zip(g.weights + g.biases, fw + fb):
        assert grads_close(a, f)


def test_one_hot_bias_gradient_sums_to_zero():
    rng = np.random.default_rng(0)
    m = init_mlp([4, 5, 7], rng)
    X = rng.normal(size=(9, 4))
    _, g = batch_loss_and_grad(m, X, onehot(rng.integers(7, size=9), 7))
    assert abs(g.biases[-1].sum()) < 1e-12


# ---------------------------------------------------------------------------
# sgd

def test_plain_step_subtracts_gradient():
    m = MlpModel([2, 1], [np.array([[1.0, 2.0]])], [np.array([0.5])])
    g = Gradients([np.array([[0.25, -1.0]])], [np.array([2.0])])
    cfg = SgdConfig(base_lr=1.0, momentum=0.0, weight_decay=0.0)
    sgd_step(m, g, OptState.for_model(m), cfg, 0)
    assert m.weights[0].tolist() == [[0.75, 3.0]] and m.biases[0].tolist() == [-1.5]


def test_momentum_and_weight_decay_rule():
    m = MlpModel([1, 1], [np.array([[2.0]])], [np.array([0.0])])
    cfg = SgdConfig(base_lr=0.5, momentum=0.9, weight_decay=0.1)
    st_ = OptState.for_model(m)
    g = Gradients([np.array([[1.0]])], [np.array([0.0])])
    sgd_step(m, g, st_, cfg, 0)      # v = 1 + 0.2 = 1.2 ; p = 2 - 0.6 = 1.4
    sgd_step(m, g, st_, cfg, 0)      # v = 1.08 + 1 + 0.14 = 2.22 ; p = 1.4 - 1.11 = 0.29
    assert m.weights[0][0, 0] == pytest.approx(0.29, abs=1e-12)


def test_zero_gradient_zero_decay_is_identity():
    m = init_mlp([3, 4, 2], 0)
    before = m.copy()
    zero = Gradients([np.zeros_like(w) for w in m.weights], [np.zeros_like(b) for b in m.biases])
    sgd_step(m, zero, OptState.for_model(m), SgdConfig(momentum=0.5, weight_decay=0.0), 3)
    assert m.same_params(before)


def test_non_finite_gradient_raises():
    m = init_mlp([2, 2], 0)
    bad = Gradients([np.full((2, 2), np.nan)], [np.zeros(2)])
    with pytest.raises(TrainingError):
        sgd_step(m, bad, OptState.for_model(m), SgdConfig(), 0)


def test_trunk_schedule_values():
    cfg = SgdConfig.trunk(base_lr=0.1)
    assert lr_at_epoch(cfg, 59) == pytest.approx(0.1)
    assert lr_at_epoch(cfg, 60) == pytest.approx(0.01)
    assert lr_at_epoch(cfg, 120) == pytest.approx(0.001)


def test_expert_schedule_values():
    cfg = SgdConfig.expert(base_lr=0.1)
    assert cfg.momentum == 0.0
    assert lr_at_epoch(cfg, 4) == pytest.approx(0.1)
    assert lr_at_epoch(cfg, 5) == pytest.approx(0.05)


@given(base=st.floats(1e-4, 10), every=st.one_of(st.none(), st.integers(1, 20)),
       sched=st.sampled_from(["trunk", "expert"]))
def test_schedule_is_nonincreasing_step_function(base, every, sched):
    cfg = SgdConfig(base_lr=base, schedule=sched, lr_decay_every=every)
    lrs = [lr_at_epoch(cfg, e) for e in range(200)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    period = every or {"trunk": 60, "expert": 5}[sched]
    assert lrs[period - 1] == lrs[0] and lrs[period] < lrs[0]


@pytest.mark.parametrize("kw", [dict(minibatch_size=0), dict(base_lr=0), dict(momentum=1.0),
                                dict(weight_decay=-1), dict(schedule="cosine")])
def test_invalid_sgd_config(kw):
    with pytest.raises(ConfigError):
        SgdConfig(**kw)


# ---------------------------------------------------------------------------
# training

def _separable():
    spec = SyntheticSpec(n_modes=2, examples_per_mode=300, feature_dim=4, n_tags=2, tags_per_mode=1,
                         mean_tags=1.0, max_tags=1, noise=0.0, mode_scale=6.0)
    return generate_synthetic(spec, 0), generate_synthetic(spec, 0, "valid", 100)


def _linearly_separable(ds) -> bool:
    # feasibility LP: exists (w, b) with y_i (w.x_i + b) >= 1
    y = np.where(ds.tag_ids == 0, 1.0, -1.0)
    A = -y[:, None] * np.hstack([ds.features.astype(float), np.ones((ds.n_examples, 1))])
    res = linprog(np.zeros(A.shape[1]), A_ub=A, b_ub=-np.ones(len(y)), bounds=(None, None))
    return res.status == 0


def test_separable_two_modes_reach_high_q1():
    tr, va = _separable()
    assert _linearly_separable(tr)
    m = init_mlp([4, 8, 2], 0)
    train(m, tr, SgdConfig.trunk(max_epochs=10), PerClassSampler(tr, 1), va)
    assert q_at_m(m, tr, 1, S=5000, seed=0) >= 0.95


def test_zero_epochs_leaves_model_untouched():
    tr, _ = _separable()
    m = init_mlp([4, 3, 2], 0)
    before = m.copy()
    log = train(m, tr, SgdConfig(max_epochs=0), PerClassSampler(tr, 0))
    assert log.epochs == [] and m.same_params(before)


def test_training_is_deterministic():
    tr, va = _separable()
    runs = []
    for _ in range(2):
        m = init_mlp([4, 5, 2], 3)
        log = train(m, tr, SgdConfig(max_epochs=4), PerClassSampler(tr, 9), va, valid_seed=2)
        runs.append((m, log))
    assert runs[0][0].same_params(runs[1][0])
    assert runs[0][1].to_dict() == runs[1][1].to_dict()


def test_early_stopping_keeps_best_snapshot():
    tr, va = _separable()
    m = init_mlp([4, 8, 2], 0)
    log = train(m, tr, SgdConfig(base_lr=0.5, max_epochs=40, early_stop_patience=2),
                PerClassSampler(tr, 0), va)
    assert log.best_valid_loss == min(e.valid_loss for e in log.epochs)
    assert len(log.epochs) <= 40
    if log.stopped_early:
        assert len(log.epochs) - 1 - log.best_epoch == 2


# ---------------------------------------------------------------------------
# checkpoints

def test_checkpoint_roundtrip_is_bit_exact(tmp_path):
    m = round_to_f32(init_mlp([5, 4, 3], 0))
    save_checkpoint(m, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert back.same_params(m)
    save_checkpoint(back, tmp_path / "m2.ckpt")
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "m2.ckpt").read_bytes()


def test_checkpoint_bad_magic(tmp_path):
    save_checkpoint(init_mlp([2, 2], 0), tmp_path / "m.ckpt")
    raw = bytearray((tmp_path / "m.ckpt").read_bytes())
    raw[:4] = b"NOPE"
    (tmp_path / "m.ckpt").write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "m.ckpt")


def test_checkpoint_truncated(tmp_path):
    save_checkpoint(init_mlp([2, 2], 0), tmp_path / "m.ckpt")
    (tmp_path / "m.ckpt").write_bytes((tmp_path / "m.ckpt").read_bytes()[:-1])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "m.ckpt")


def test_compose_stacks_layers():
    a, b = init_mlp([3, 4], 0), init_mlp([4, 2], 1)
    c = compose(a, b)
    x = np.array([1.0, -1.0, 0.5])
    h = np.maximum(a.weights[0] @ x + a.biases[0], 0)
    np.testing.assert_allclose(forward(c, x)[0], b.weights[0] @ h + b.biases[0])
    with pytest.raises(ShapeError):
        compose(b, b)
