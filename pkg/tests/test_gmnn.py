import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fairgmnn.core_math import CSR, rng_stream, softmax_rows
from fairgmnn.gmnn import (
    GmnnConfig, annealed_sample, e_step_targets, em_train, label_channel, m_step_targets, objective_phi,
    objective_theta, phi_inputs,
)
from fairgmnn.graph_data import SparseGraph, generate_sbm
from fairgmnn.models import HyperConfig, ModelInputs, Task, fit, predict_probs

from conftest import random_graph, random_sparse

CFG = HyperConfig(8, 0.2, 0.2, 0.05, 1e-4)


def make_task(graph, features, labels, k, train, valid):
    n = graph.num_nodes
    targets = np.zeros((n, k))
    for rows in (train, valid):
        targets[rows, labels[rows]] = 1.0
    test = np.setdiff1d(np.arange(n), np.concatenate([train, valid]))

    def score(probs):
        return float(np.mean(np.argmax(probs[test], axis=1) == labels[test]))

    return Task(ModelInputs.build(graph.adj, features), k, np.asarray(train), np.asarray(valid), targets, score)


def tiny_task(seed, n=10, k=3):
    rng = rng_stream(seed)
    g = random_graph(n, 0.4, rng)
    x = random_sparse(n, 4, 0.5, rng, positive=True)
    labels = rng.integers(0, k, n)
    perm = rng.permutation(n)
    return make_task(g, x, labels, k, np.sort(perm[:4]), np.sort(perm[4:6])), rng


def sbm_task(seed=0, per_class=8, signal=0.05):
    g, d = generate_sbm([60] * 3, 0.15, 0.005, signal, rng_stream(seed))
    rng = rng_stream(seed, 1)
    train, valid = [], []
    for c in range(3):
        members = rng.permutation(np.flatnonzero(d.labels == c))
        train.extend(members[:per_class])
        valid.extend(members[per_class:2 * per_class])
    return make_task(g, d.features, d.labels, 3, np.sort(train), np.sort(valid)), d.labels


# --- annealed sampling -----------------------------------------------------

def test_annealing_limits_and_example():
    q = np.array([[0.6, 0.4], [0.3, 0.7]])
    targets = np.array([[0.0, 1.0], [0.0, 0.0]])
    np.testing.assert_allclose(annealed_sample(q, targets, [], 0.0), [[1, 0], [0, 1]])
    np.testing.assert_allclose(annealed_sample(q, targets, [], 1.0), q)
    np.testing.assert_allclose(annealed_sample(q, targets, [], 0.1)[0], [0.96, 0.04], rtol=1e-12)
    np.testing.assert_array_equal(annealed_sample(q, targets, [0], 0.1)[0], [0.0, 1.0])
    with pytest.raises(ValueError):
        annealed_sample(q, targets, [], 1.5)


@given(st.integers(0, 2**32 - 1), st.floats(0, 1), st.sampled_from(["sharpen", "temperature", "sample"]))
@settings(max_examples=60, deadline=None)
def test_pseudo_labels_are_distributions(seed, tau, method):
    rng = rng_stream(seed)
    q = softmax_rows(3 * rng.normal(size=(12, 4)))
    labeled = rng.choice(12, 5, replace=False)
    targets = np.eye(4)[rng.integers(0, 4, 12)]
    y = annealed_sample(q, targets, labeled, tau, rng, method)
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_array_equal(y[labeled], targets[labeled])


# --- label channel ---------------------------------------------------------

def test_label_channel_excludes_own_label(rng):
    g = random_graph(9, 0.4, rng)
    y = softmax_rows(rng.normal(size=(9, 3)))
    base = label_channel(g.adj, y)
    for n in range(9):
        y2 = y.copy()
        y2[n] = [1.0, 0.0, 0.0] if y[n, 0] < 0.5 else [0.0, 1.0, 0.0]
        np.testing.assert_array_equal(label_channel(g.adj, y2)[n], base[n])
    dense = g.adj.to_dense()
    deg = dense.sum(axis=1, keepdims=True)
    expected = np.divide(dense @ y, deg, out=np.zeros_like(y), where=deg > 0)
    np.testing.assert_allclose(base, expected, rtol=1e-12)


def test_label_channel_self_loop_switch(rng):
    g = SparseGraph.from_edges(2, [0], [1])
    y = np.array([[1.0, 0.0], [0.0, 1.0]])
    np.testing.assert_allclose(label_channel(g.adj, y), [[0, 1], [1, 0]])
    np.testing.assert_allclose(label_channel(g.adj, y, self_loop=True), [[0.5, 0.5], [0.5, 0.5]])


def test_phi_inputs_concatenate_features(rng):
    task, _ = tiny_task(1)
    y = softmax_rows(rng.normal(size=(10, 3)))
    pin = phi_inputs(task, y)
    x = pin.features.to_dense()
    np.testing.assert_array_equal(x[:, :4], task.inputs.features.to_dense())
    np.testing.assert_allclose(x[:, 4:], label_channel(task.inputs.prop, y), rtol=1e-15)


# --- objectives against brute force ----------------------------------------

def log_softmax_row(row):
    m = max(row)
    s = sum(math.exp(v - m) for v in row)
    return [v - m - math.log(s) for v in row]


@pytest.mark.parametrize("seed", range(10))
def test_theta_objective_brute_force(seed):
    task, rng = tiny_task(seed)
    n, k = 10, 3
    q_logits = rng.normal(size=(n, k))
    p = softmax_rows(rng.normal(size=(n, k)))
    train, valid = set(task.train_idx.tolist()), set(task.valid_idx.tolist())
    total = 0.0
    for i in range(n):
        if i in valid:
            continue
        lq = log_softmax_row(q_logits[i].tolist())
        if i in train:
            total += lq[int(np.argmax(task.targets[i]))]
        else:
            total += sum(p[i, c] * lq[c] for c in range(k))
    assert objective_theta(q_logits, p, task) == pytest.approx(total, abs=1e-9)


@pytest.mark.parametrize("seed", range(10))
def test_phi_objective_brute_force(seed):
    rng = rng_stream(seed)
    n, k = int(rng.integers(3, 11)), int(rng.integers(2, 4))
    logits = rng.normal(size=(n, k))
    yhat = softmax_rows(rng.normal(size=(n, k)))
    rows = np.sort(rng.choice(n, int(rng.integers(1, n + 1)), replace=False))
    total = 0.0
    for i in rows:
        lp = log_softmax_row(logits[i].tolist())
        total += sum(yhat[i, c] * lp[c] for c in range(k))
    assert objective_phi(logits, yhat, rows) == pytest.approx(total, abs=1e-9)


def test_step_targets():
    task, rng = tiny_task(3)
    p = softmax_rows(rng.normal(size=(10, 3)))
    targets, rows = e_step_targets(task, p)
    assert set(rows.tolist()).isdisjoint(task.valid_idx.tolist())
    lab = targets[task.train_idx]
    assert np.all(np.sort(lab, axis=1)[:, -1] == 1.0) and np.all(lab.sum(axis=1) == 1.0)
    unl = np.setdiff1d(rows, task.train_idx)
    np.testing.assert_array_equal(targets[unl], p[unl])
    yhat = annealed_sample(p, task.targets, task.train_idx, 0.1)
    t2, rows2 = m_step_targets(task, yhat)
    np.testing.assert_array_equal(rows2, rows)
    np.testing.assert_array_equal(t2[rows2], yhat[rows2])


# --- EM --------------------------------------------------------------------

def test_zero_loops_is_bitwise_base_run():
    task, _ = sbm_task()
    for kind in ("gcn", "fagcn"):
        cfg_a = HyperConfig(8, 0.2, 0.2, 0.05, 1e-4, 0.3 if kind == "fagcn" else None)
        state = em_train(task, GmnnConfig(cfg_a, cfg_a, kind, em_loops=0, init_epochs=60, patience=20),
                         rng_stream(4))
        base = fit(kind, task, cfg_a, rng_stream(4), 60, 20)
        for k in base.params:
            np.testing.assert_array_equal(state.theta[k], base.params[k])
        assert len(state.history) == 1
        assert state.best is state.baseline
        assert state.baseline.test_acc == task.score(predict_probs(kind, base.params, task.inputs, cfg_a))


def test_em_history_and_best():
    task, _ = sbm_task()
    cfg = GmnnConfig(CFG, CFG, "gcn", em_loops=3, epochs_per_phase=20, init_epochs=60, patience=20)
    state = em_train(task, cfg, rng_stream(1))
    assert len(state.history) == 1 + 2 * 3
    assert [(r.phase, r.network) for r in state.history[:3]] == [("init", "q_theta"), ("M", "p_phi"),
                                                                   ("E", "q_theta")]
    best = state.best
    assert best.phase != "init"
    assert best.val_acc >= state.last("q_theta").val_acc
    assert best.val_acc >= state.last("p_phi").val_acc
    assert state.summary()["best"] == best.test_acc
    lines = state.history_jsonl(split=0, run=1).splitlines()
    assert len(lines) == 7
    rec = json.loads(lines[1])
    assert set(rec) == {"loop", "phase", "network", "val_acc", "test_acc", "split", "run"}
    assert state.yhat is not None
    np.testing.assert_array_equal(state.yhat[task.train_idx], task.targets[task.train_idx])


def test_em_deterministic():
    task, _ = sbm_task()
    cfg = GmnnConfig(CFG, CFG, "gcn", em_loops=2, epochs_per_phase=15, init_epochs=40, patience=10)
    a = em_train(task, cfg, rng_stream(2))
    b = em_train(task, cfg, rng_stream(2))
    assert [r.to_dict() for r in a.history] == [r.to_dict() for r in b.history]
    for k in a.theta:
        np.testing.assert_array_equal(a.theta[k], b.theta[k])


def test_phi_uses_neighbor_labels():
    # features carry no signal; labels follow the blocks
    task, labels = sbm_task(seed=5, signal=0.0)
    n = task.inputs.num_nodes
    yhat = np.eye(3)[labels]
    yhat[task.valid_idx] = 1 / 3
    from fairgmnn.gmnn import GmnnState, m_step
    cfg = GmnnConfig(CFG, CFG, "gcn", epochs_per_phase=100, patience=100)
    state = GmnnState(theta={}, yhat=yhat)
    m_step(state, task, cfg, rng_stream(0))
    p = predict_probs("gcn", state.phi, phi_inputs(task, yhat), CFG)
    mlp = fit("mlp", task, CFG, rng_stream(0), 200, 100)
    acc_phi = task.valid_accuracy(p)
    acc_mlp = task.valid_accuracy(predict_probs("mlp", mlp.params, task.inputs, CFG))
    assert acc_phi > acc_mlp + 0.2


def test_config_validation():
    with pytest.raises(ValueError):
        GmnnConfig(CFG, CFG, em_loops=-1)
    with pytest.raises(ValueError):
        GmnnConfig(CFG, CFG, annealing=2.0)
    with pytest.raises(ValueError):
        GmnnConfig(CFG, CFG, base_kind="mlp")
    with pytest.raises(ValueError):
        GmnnConfig(CFG, CFG, sampling="gumbel")
