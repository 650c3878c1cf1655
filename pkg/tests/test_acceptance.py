"""Acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line, printed in the "acceptance criteria"
section of the pytest summary. Criteria 5 and 6 are desk-scale experiments
that take several minutes each on one core. Criterion 9 runs only when
``FAIRGMNN_CORA`` points at a Cora dataset directory.
"""

import math
import os
import time
import warnings

import numpy as np
import pytest

from fairgmnn import fair_eval as fe
from fairgmnn.core_math import CSR, rng_stream, softmax_rows
from fairgmnn.evo_search import evolve, grid_size
from fairgmnn.gmnn import GmnnConfig, em_train, objective_phi, objective_theta
from fairgmnn.graph_data import NodeData, generate_sbm, load_dataset
from fairgmnn.models import HyperConfig, ModelInputs, Task, fit, search_space

from conftest import random_graph, random_sparse, record_criterion
import gradcheck


def check(number, name, ok, detail):
    record_criterion(number, name, ok, detail)
    assert ok, detail


# 1 -------------------------------------------------------------------------

def test_criterion_1_gradients():
    start = time.perf_counter()
    worst = {}
    for kind in ("mlp", "gcn", "fagcn"):
        worst[kind] = max(gradcheck.check(kind, seed) for seed in range(20))
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) < 1e-4 and elapsed < 60
    check(1, "analytic gradients match finite differences", ok,
          "max rel err " + ", ".join("%s %.1e" % kv for kv in worst.items()) + "; %.1fs" % elapsed)


# 2 -------------------------------------------------------------------------

def _log_softmax(row):
    m = max(row)
    s = sum(math.exp(v - m) for v in row)
    return [v - m - math.log(s) for v in row]


def test_criterion_2_objective_oracles():
    worst = 0.0
    for seed in range(20):
        rng = rng_stream(seed)
        n, k = int(rng.integers(3, 11)), int(rng.integers(2, 4))
        labels = rng.integers(0, k, n)
        perm = rng.permutation(n)
        n_train = int(rng.integers(1, n - 1))
        train, valid = np.sort(perm[:n_train]), np.sort(perm[n_train:n_train + 1])
        targets = np.zeros((n, k))
        targets[np.concatenate([train, valid]), labels[np.concatenate([train, valid])]] = 1
        g = random_graph(n, 0.4, rng)
        task = Task(ModelInputs.build(g.adj, CSR.identity(n)), k, train, valid, targets)
        q_logits = rng.normal(size=(n, k))
        p = softmax_rows(rng.normal(size=(n, k)))
        yhat = softmax_rows(rng.normal(size=(n, k)))
        yhat[train] = targets[train]

        theta_ref = 0.0
        phi_ref = 0.0
        rows = [i for i in range(n) if i not in set(valid.tolist())]
        for i in rows:
            lq = _log_softmax(q_logits[i].tolist())
            if i in set(train.tolist()):
                theta_ref += lq[labels[i]]
            else:
                theta_ref += sum(p[i, c] * lq[c] for c in range(k))
            phi_ref += sum(yhat[i, c] * lq[c] for c in range(k))
        worst = max(worst, abs(objective_theta(q_logits, p, task) - theta_ref),
                    abs(objective_phi(q_logits, yhat, rows) - phi_ref))
    check(2, "EM objectives equal brute-force sums", worst < 1e-9, "max abs diff %.1e" % worst)


# 3 -------------------------------------------------------------------------

def _random_dataset(i, rng):
    if i % 10 == 0:
        # class counts that make the 81/9/10 ratios exact
        k = int(rng.integers(2, 6))
        counts = [100] * k
    else:
        n = int(rng.integers(50, 501))
        k = int(rng.integers(2, 9))
        floor = min(10, n // k)
        counts = np.bincount(np.concatenate([np.repeat(np.arange(k), floor), rng.integers(0, k, n - floor * k)]),
                             minlength=k)
        counts = [int(c) for c in counts]
    labels = rng.permutation(np.repeat(np.arange(len(counts)), counts))
    n = labels.size
    x = CSR.from_dense((rng.random((n, 6)) < 0.4).astype(float) + np.eye(n, 6))
    return NodeData.from_binary(x, labels, len(counts), "rand%d" % i), counts


def test_criterion_3_protocol_invariants():
    start = time.perf_counter()
    problems = []
    exact = 0
    for i in range(100):
        rng = rng_stream(3, i)
        data, counts = _random_dataset(i, rng)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            # stratification needs every class to fill every fold
            ss = fe.make_splitset(data, min(10, min(counts)), i)
        problems += ["dataset %d: %s" % (i, p) for p in fe.check_splitset(ss, data)]
        if all(c % 100 == 0 for c in counts):
            n = sum(counts)
            sizes = {(s.in_train.size, s.valid.size, s.test.size) for s in ss.splits}
            if sizes != {(81 * n // 100, 9 * n // 100, n // 10)}:
                problems.append("dataset %d: ratios %r" % (i, sizes))
            exact += 1
        for s in ss.splits:
            for variant in ("sparse-balanced", "sparse-stratified"):
                sub = getattr(s, variant.replace("-", "_"))
                if sub is not None and np.intersect1d(sub, s.test).size:
                    problems.append("dataset %d: %s touches test" % (i, variant))

    # guard: selection and training results must not depend on test labels
    leaks = 0
    for i in range(10):
        rng = rng_stream(30, i)
        g, d = generate_sbm([30, 30, 30], 0.2, 0.02, 0.1, rng)
        ss = fe.make_splitset(d, 3, i)
        scrambled_labels = d.labels.copy()
        split = ss.splits[0]
        scrambled_labels[split.test] = (scrambled_labels[split.test] + 1) % 3
        scrambled = NodeData(d.features, scrambled_labels, 3, d.name)
        small = fe.SearchSettings(pop_size=3, generations=2, max_epochs=30, patience=10, reduced=True)
        inputs = ModelInputs.build(g.adj, d.features)
        a = fe.model_select("gcn", inputs, d, split, 0, "dense", small, i)
        b = fe.model_select("gcn", inputs, scrambled, split, 0, "dense", small, i)
        task, guard = fe.build_task(inputs, d, split, "dense")
        fit("gcn", task, a.alpha, rng_stream(i), 30, 10)
        if a.to_dict() != b.to_dict() or guard.trips:
            leaks += 1
    elapsed = time.perf_counter() - start
    ok = not problems and leaks == 0 and elapsed < 60
    check(3, "split invariants and test-label isolation", ok,
          "%d violations, %d leaks, %d exact-ratio datasets, %.1fs" % (len(problems), leaks, exact, elapsed)
          + ("; first: " + problems[0] if problems else ""))


# 4 -------------------------------------------------------------------------

def _t_pdf(x, df):
    c = math.lgamma((df + 1) / 2) - math.lgamma(df / 2) - 0.5 * math.log(df * math.pi)
    return math.exp(c - (df + 1) / 2 * math.log1p(x * x / df))


def _t_cdf_simpson(t, df, intervals=4000):
    if t == 0:
        return 0.5
    a, b = 0.0, abs(t)
    h = (b - a) / intervals
    s = _t_pdf(a, df) + _t_pdf(b, df)
    s += 4 * sum(_t_pdf(a + (2 * j - 1) * h, df) for j in range(1, intervals // 2 + 1))
    s += 2 * sum(_t_pdf(a + 2 * j * h, df) for j in range(1, intervals // 2))
    return 0.5 + math.copysign(s * h / 3, t)


def test_criterion_4_statistics():
    res = fe.paired_t_test([2, 1, 3, 2, 2], [1, 1, 2, 1, 1])
    example_ok = abs(res.t - 4.0) < 1e-12 and res.df == 4 and abs(res.p - 0.0081) < 1e-4 and res.stars == "**"
    worst = 0.0
    for df in range(1, 51):
        for t in np.linspace(-10, 10, 41):
            worst = max(worst, abs(fe.t_cdf(float(t), df) - _t_cdf_simpson(float(t), df)))
    stars = [fe.significance_stars(p) for p in (0.0009, 0.001, 0.009, 0.01, 0.049, 0.05)]
    stars_ok = stars == ["***", "**", "**", "*", "*", ""]
    ok = example_ok and worst < 1e-6 and stars_ok
    check(4, "paired t-test, t CDF and stars", ok,
          "t=%.4f df=%d p=%.5f %s; max CDF diff %.1e; stars %s" % (res.t, res.df, res.p, res.stars, worst, stars))


# 5 -------------------------------------------------------------------------

DESK = fe.SearchSettings(pop_size=6, generations=2, reduced=True, max_epochs=1000, patience=200)


def test_criterion_5_structure_beats_features():
    start = time.perf_counter()
    g, d = generate_sbm([400] * 5, 0.02, 0.002, 0.05, rng_stream(5))
    ss = fe.make_splitset(d, 5, 5)
    reports = {}
    for model in ("mlp", "gcn"):
        sels = fe.select_all(model, g, d, ss, "dense", DESK, 5)
        reports[model] = fe.assess(model, g, d, ss, sels, "dense", 5, DESK, 5)
    t = fe.compare_reports(reports["gcn"], reports["mlp"])
    elapsed = time.perf_counter() - start
    ok = t.p < 0.05 and elapsed < 15 * 60
    check(5, "GCN beats MLP on an assortative SBM", ok,
          "GCN %s vs MLP %s, t=%.2f p=%.2g %s, %.0fs" % (
              fe.report_rows(reports["gcn"])[0][1], fe.report_rows(reports["mlp"])[0][1], t.t, t.p, t.stars,
              elapsed))


# 6 -------------------------------------------------------------------------

def test_criterion_6_gmnn_beats_base_on_sparse_sets():
    start = time.perf_counter()
    g, d = generate_sbm([400] * 5, 0.02, 0.001, 0.03, rng_stream(6))
    ss = fe.make_splitset(d, 5, 6)
    settings = fe.SearchSettings(pop_size=6, generations=2, reduced=True, em_loops=10, epochs_per_phase=100)
    sels = fe.select_all("gmnn-gcn", g, d, ss, "sparse-balanced", settings, 6)
    rep = fe.assess("gmnn-gcn", g, d, ss, sels, "sparse-balanced", 5, settings, 6)
    t = rep.significance()
    elapsed = time.perf_counter() - start
    rows = dict(fe.report_rows(rep))
    ok = t.p < 0.05 and t.t > 0 and elapsed < 30 * 60
    check(6, "GMNN best beats base GCN on sparse-balanced sets", ok,
          "baseline %s, best %s, t=%.2f p=%.2g %s, %.0fs" % (rows["GCN"], rows["GMNN-GCN best"], t.t, t.p,
                                                            t.stars, elapsed))


# 7 -------------------------------------------------------------------------

def test_criterion_7_zero_loops_equivalence():
    g, d = generate_sbm([40, 40, 40], 0.2, 0.01, 0.05, rng_stream(7))
    ss = fe.make_splitset(d, 3, 7)
    inputs = ModelInputs.build(g.adj, d.features)
    task, _ = fe.build_task(inputs, d, ss.splits[0], "dense", with_test=True)
    same = True
    for kind, eps in (("gcn", None), ("fagcn", 0.4)):
        cfg = HyperConfig(16, 0.4, 0.4, 0.05, 1e-4, eps)
        state = em_train(task, GmnnConfig(cfg, cfg, kind, em_loops=0, init_epochs=200, patience=50),
                         rng_stream(70))
        base = fit(kind, task, cfg, rng_stream(70), 200, 50)
        same &= all(state.theta[k].tobytes() == base.params[k].tobytes() for k in base.params)
        same &= set(state.theta) == set(base.params)
    check(7, "GMNN with 0 EM loops is bitwise the base run", same, "gcn and fagcn")


# 8 -------------------------------------------------------------------------

def test_criterion_8_evolutionary_search():
    grid = search_space("gcn")
    size = grid_size(grid)

    def rigged(cfg):
        return sum(grid[k].index(v) / (len(grid[k]) - 1) for k, v in cfg.items())

    optimum = tuple(v[-1] for v in grid.values())
    hits, max_evals = 0, 0
    for seed in range(100):
        res = evolve(grid, rigged, rng_stream(8, seed))
        hits += res.best == optimum
        max_evals = max(max_evals, res.evaluations)
    ok = size == 4032 and hits >= 95 and max_evals <= 1000
    check(8, "evolutionary search finds the rigged optimum", ok,
          "|grid|=%d, %d/100 hits, max %d evaluations (%.1f%% of grid)" % (size, hits, max_evals,
                                                                           100 * max_evals / size))


# 9 -------------------------------------------------------------------------

CORA = os.environ.get("FAIRGMNN_CORA")


@pytest.mark.skipif(not CORA, reason="set FAIRGMNN_CORA to a Cora dataset directory (overnight run)")
def test_criterion_9_cora_gcn_dense():
    g, d = load_dataset(CORA)
    ss = fe.make_splitset(d, 10, 0)
    settings = fe.SearchSettings()
    sels = fe.select_all("gcn", g, d, ss, "dense", settings, 0)
    rep = fe.assess("gcn", g, d, ss, sels, "dense", 20, settings, 0)
    mean = 100 * rep.summary("acc")["mean"]
    check(9, "Cora GCN dense within 3 points of 88.84", abs(mean - 88.84) <= 3.0, "mean %.2f" % mean)
