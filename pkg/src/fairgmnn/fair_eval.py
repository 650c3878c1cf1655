"""Fair evaluation: stratified k-fold assessment with per-split model selection.

For every fold ``F_i`` the train part (all other folds) is split 90/10 into
``in_train`` / ``valid``, giving 81/9/10 overall. Hyperparameters are chosen
per split on ``valid`` only; assessment retrains ``r`` times per split and
averages test accuracy. Test labels live behind :class:`LabelGuard` and are
only revealed to the scoring closure used during assessment.

Randomness is keyed by ``(master_seed, stage, split, run)`` so serial and
parallel execution produce the same numbers.
"""

from __future__ import annotations

import json
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import special

from .core_math import rng_stream
from .evo_search import SearchResult, evolve
from .gmnn import GmnnConfig, em_train
from .graph_data import MISSING_LABEL, NodeData, SparseGraph
from .models import HyperConfig, ModelInputs, NonFiniteLossError, Task, fit, predict_probs, search_space

MODEL_CHOICES = ("mlp", "gcn", "fagcn", "gmnn-gcn", "gmnn-fagcn")
VARIANTS = ("dense", "sparse-balanced", "sparse-stratified")
SPARSE_PER_CLASS = 20

STAGE_SPLITS, STAGE_SELECT, STAGE_BETA, STAGE_ASSESS = 1, 2, 3, 4

STRATEGY2_BETA = dict(hidden_dim=16, input_dropout=0.5, dropout=0.5, learning_rate=0.05, l2=5e-4)


class SplitError(ValueError):
    pass


class TestAccessError(RuntimeError):
    """Raised when test labels are read outside assessment scoring."""


def base_kind(model: str) -> str:
    return model.split("-", 1)[1] if model.startswith("gmnn-") else model


def is_gmnn(model: str) -> bool:
    return model.startswith("gmnn-")


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

@dataclass
class Split:
    in_train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    sparse_balanced: np.ndarray | None = None
    sparse_stratified: np.ndarray | None = None

    @property
    def train(self) -> np.ndarray:
        return np.sort(np.concatenate([self.in_train, self.valid]))

    def train_set(self, variant: str) -> np.ndarray:
        if variant not in VARIANTS:
            raise ValueError("unknown train variant %r" % variant)
        if variant == "dense":
            return self.in_train
        sub = self.sparse_balanced if variant == "sparse-balanced" else self.sparse_stratified
        if sub is None:
            raise SplitError("this split has no %s train set" % variant)
        return sub

    def to_dict(self) -> dict:
        def enc(a):
            return None if a is None else [int(x) for x in a]
        return {"in_train": enc(self.in_train), "valid": enc(self.valid), "test": enc(self.test),
                "sparse_balanced": enc(self.sparse_balanced), "sparse_stratified": enc(self.sparse_stratified)}

    @classmethod
    def from_dict(cls, d: dict) -> "Split":
        def dec(a):
            return None if a is None else np.asarray(a, dtype=np.int64)
        return cls(dec(d["in_train"]), dec(d["valid"]), dec(d["test"]),
                   dec(d.get("sparse_balanced")), dec(d.get("sparse_stratified")))


@dataclass
class SplitSet:
    seed: int
    k: int
    folds: list[np.ndarray]
    splits: list[Split]

    def to_json(self) -> str:
        d = {"seed": self.seed, "k": self.k, "folds": [[int(x) for x in f] for f in self.folds],
             "splits": [s.to_dict() for s in self.splits]}
        return json.dumps(d, sort_keys=True, separators=(",", ":")) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SplitSet":
        d = json.loads(text)
        return cls(int(d["seed"]), int(d["k"]), [np.asarray(f, dtype=np.int64) for f in d["folds"]],
                   [Split.from_dict(s) for s in d["splits"]])


def largest_remainder(total: int, weights) -> np.ndarray:
    """Integer apportionment of ``total`` proportional to ``weights``."""
    w = np.asarray(weights, dtype=np.float64)
    if total == 0 or w.sum() == 0:
        return np.zeros(w.size, dtype=np.int64)
    quota = total * w / w.sum()
    base = np.floor(quota).astype(np.int64)
    rest = total - int(base.sum())
    # stable sort: equal remainders go to the lower class index
    order = np.argsort(-(quota - base), kind="stable")
    base[order[:rest]] += 1
    return base


def _by_class(labels, idx, num_classes):
    return [idx[labels[idx] == c] for c in range(num_classes)]


def make_folds(data: NodeData, k: int, rng: np.random.Generator, nodes=None) -> list[np.ndarray]:
    """Stratified k-fold partition of the labeled nodes.

    Members of each class are shuffled and dealt round-robin; the dealing
    position carries over between classes, so per-class fold counts differ
    by at most one and fold sizes differ by at most one.
    """
    labels = data.labels
    nodes = data.labeled_index if nodes is None else np.asarray(nodes, dtype=np.int64)
    if np.unique(nodes).size != nodes.size:
        raise SplitError("duplicate node ids")
    counts = np.bincount(labels[nodes], minlength=data.num_classes)
    small = [c for c in range(data.num_classes) if 0 < counts[c] < k]
    if small:
        raise SplitError("classes %r have fewer than k=%d members" % (small, k))
    folds = [[] for _ in range(k)]
    pos = 0
    for members in _by_class(labels, nodes, data.num_classes):
        for node in rng.permutation(members):
            folds[pos % k].append(int(node))
            pos += 1
    return [np.sort(np.asarray(f, dtype=np.int64)) for f in folds]


def split_train_valid(data: NodeData, train: np.ndarray, rng: np.random.Generator,
                      valid_fraction: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    labels = data.labels
    n_valid = int(math.floor(valid_fraction * train.size + 0.5))
    groups = _by_class(labels, train, data.num_classes)
    per_class = largest_remainder(n_valid, [g.size for g in groups])
    valid, in_train = [], []
    for g, m in zip(groups, per_class):
        perm = rng.permutation(g)
        valid.append(perm[:m])
        in_train.append(perm[m:])
    return np.sort(np.concatenate(in_train)), np.sort(np.concatenate(valid))


def make_sparse_sets(split: Split, data: NodeData, rng: np.random.Generator,
                     per_class: int = SPARSE_PER_CLASS) -> Split:
    """Attach the balanced and stratified ``per_class * K``-node subsets of ``in_train``.

    Either subset is left as ``None`` (with a warning) when ``in_train``
    cannot supply it.
    """
    k = data.num_classes
    groups = _by_class(data.labels, split.in_train, k)
    sizes = np.array([g.size for g in groups])
    total = per_class * k

    if sizes.min() >= per_class:
        split.sparse_balanced = np.sort(np.concatenate([rng.choice(g, per_class, replace=False) for g in groups]))
    else:
        warnings.warn("in_train has a class with < %d members; no sparse-balanced set" % per_class, stacklevel=2)
        split.sparse_balanced = None

    if split.in_train.size >= total:
        counts = largest_remainder(total, sizes)
        split.sparse_stratified = np.sort(np.concatenate(
            [rng.choice(g, m, replace=False) for g, m in zip(groups, counts)]))
    else:
        warnings.warn("in_train has < %d nodes; no sparse-stratified set" % total, stacklevel=2)
        split.sparse_stratified = None
    return split


def make_splitset(data: NodeData, k: int, seed: int, valid_fraction: float = 0.1) -> SplitSet:
    rng = rng_stream(seed, STAGE_SPLITS)
    folds = make_folds(data, k, rng)
    splits = []
    for i in range(k):
        test = folds[i]
        train = np.sort(np.concatenate([folds[j] for j in range(k) if j != i]))
        in_train, valid = split_train_valid(data, train, rng, valid_fraction)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            splits.append(make_sparse_sets(Split(in_train, valid, test), data, rng))
    return SplitSet(seed, k, folds, splits)


def check_splitset(ss: SplitSet, data: NodeData, valid_fraction: float = 0.1) -> list[str]:
    """Every violated SplitSet invariant, as human-readable strings."""
    problems = []
    labels = data.labels
    K = data.num_classes
    nodes = data.labeled_index
    allf = np.concatenate(ss.folds) if ss.folds else np.array([], dtype=np.int64)
    if allf.size != np.unique(allf).size:
        problems.append("folds overlap")
    if not np.array_equal(np.sort(allf), np.sort(nodes)):
        problems.append("folds do not cover the labeled nodes")
    per_fold = np.array([np.bincount(labels[f], minlength=K) for f in ss.folds])
    if per_fold.size and np.any(per_fold.max(axis=0) - per_fold.min(axis=0) > 1):
        problems.append("per-class fold counts differ by more than one")
    for i, s in enumerate(ss.splits):
        tag = "split %d" % i
        if not np.array_equal(np.sort(s.test), ss.folds[i]):
            problems.append(tag + ": test is not fold %d" % i)
        if np.intersect1d(s.in_train, s.valid).size or np.intersect1d(s.train, s.test).size:
            problems.append(tag + ": in_train/valid/test overlap")
        rest = np.sort(np.concatenate([ss.folds[j] for j in range(ss.k) if j != i]))
        if not np.array_equal(s.train, rest):
            problems.append(tag + ": in_train + valid is not the union of the other folds")
        expected_valid = int(math.floor(valid_fraction * rest.size + 0.5))
        if s.valid.size != expected_valid:
            problems.append(tag + ": valid has %d nodes, expected %d" % (s.valid.size, expected_valid))
        want = largest_remainder(expected_valid, np.bincount(labels[rest], minlength=K))
        if not np.array_equal(np.bincount(labels[s.valid], minlength=K), want):
            problems.append(tag + ": valid is not stratified")
        in_counts = np.bincount(labels[s.in_train], minlength=K)
        if s.sparse_balanced is not None:
            if not set(s.sparse_balanced.tolist()) <= set(s.in_train.tolist()):
                problems.append(tag + ": sparse_balanced not inside in_train")
            if not np.all(np.bincount(labels[s.sparse_balanced], minlength=K) == SPARSE_PER_CLASS):
                problems.append(tag + ": sparse_balanced is not %d per class" % SPARSE_PER_CLASS)
        elif in_counts.min() >= SPARSE_PER_CLASS:
            problems.append(tag + ": sparse_balanced missing although feasible")
        if s.sparse_stratified is not None:
            if not set(s.sparse_stratified.tolist()) <= set(s.in_train.tolist()):
                problems.append(tag + ": sparse_stratified not inside in_train")
            got = np.bincount(labels[s.sparse_stratified], minlength=K)
            if not np.array_equal(got, largest_remainder(SPARSE_PER_CLASS * K, in_counts)):
                problems.append(tag + ": sparse_stratified counts are not largest-remainder")
        elif s.in_train.size >= SPARSE_PER_CLASS * K:
            problems.append(tag + ": sparse_stratified missing although feasible")
    return problems


# ---------------------------------------------------------------------------
# label access
# ---------------------------------------------------------------------------

class LabelGuard:
    """Hands out labels except for the forbidden (test) nodes."""

    def __init__(self, labels: np.ndarray, forbidden):
        self._labels = labels
        self._forbidden = np.zeros(labels.size, dtype=bool)
        self._forbidden[np.asarray(forbidden, dtype=np.int64)] = True
        self.trips = 0

    def get(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.int64)
        if self._forbidden[idx].any():
            self.trips += 1
            raise TestAccessError("attempt to read %d test label(s) during training"
                                  % int(self._forbidden[idx].sum()))
        return self._labels[idx]

    def test_scorer(self, test_idx) -> "TestScorer":
        test_idx = np.asarray(test_idx, dtype=np.int64)
        return TestScorer(test_idx, self._labels[test_idx])


@dataclass(frozen=True, eq=False)
class TestScorer:
    test_idx: np.ndarray
    test_labels: np.ndarray

    def __call__(self, probs: np.ndarray) -> float:
        return float(np.mean(np.argmax(probs[self.test_idx], axis=1) == self.test_labels))


def build_task(inputs: ModelInputs, data: NodeData, split: Split, variant: str,
               with_test: bool = False) -> tuple[Task, LabelGuard]:
    guard = LabelGuard(data.labels, split.test)
    train = split.train_set(variant)
    targets = np.zeros((inputs.num_nodes, data.num_classes))
    for rows in (train, split.valid):
        y = guard.get(rows)
        if np.any(y == MISSING_LABEL):
            raise SplitError("split contains unlabeled nodes")
        targets[rows, y] = 1.0
    scorer = guard.test_scorer(split.test) if with_test else None
    return Task(inputs, data.num_classes, train, split.valid, targets, scorer), guard


# ---------------------------------------------------------------------------
# model selection
# ---------------------------------------------------------------------------

@dataclass
class SearchSettings:
    pop_size: int = 100
    generations: int = 10
    mutation_p: float = 0.05
    reduced: bool = False
    runs_per_config: int = 1
    max_epochs: int = 1000
    patience: int = 200
    em_loops: int = 10
    epochs_per_phase: int = 100
    annealing: float = 0.1
    beta_pop_size: int = 40
    beta_generations: int = 3
    beta_em_loops: int = 3

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SelectionResult:
    split: int
    model: str
    variant: str
    alpha: HyperConfig
    beta: HyperConfig | None
    strategy: int | None
    val_acc: float
    evaluations: int
    grid_size: int
    search: SearchResult | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {"split": self.split, "model": self.model, "variant": self.variant,
                "alpha": self.alpha.to_dict(), "beta": None if self.beta is None else self.beta.to_dict(),
                "strategy": self.strategy, "val_acc": self.val_acc, "evaluations": self.evaluations,
                "grid_size": self.grid_size}

    @classmethod
    def from_dict(cls, d: dict) -> "SelectionResult":
        beta = d.get("beta")
        return cls(d["split"], d["model"], d["variant"], HyperConfig.from_dict(d["alpha"]),
                   None if beta is None else HyperConfig.from_dict(beta), d.get("strategy"),
                   d["val_acc"], d["evaluations"], d["grid_size"])


def config_key(grid: dict[str, list], values: dict) -> int:
    """Mixed-radix index of a configuration in ``grid`` (seeds its fitness run)."""
    key = 0
    for name, options in grid.items():
        key = key * len(options) + options.index(values[name])
    return key


def _to_config(values: dict) -> HyperConfig:
    d = dict(values)
    return HyperConfig(hidden_dim=int(d["hidden_dim"]), input_dropout=d["input_dropout"], dropout=d["dropout"],
                       learning_rate=d["learning_rate"], l2=d["l2"], epsilon=d.get("epsilon"))


def model_select(model: str, inputs: ModelInputs, data: NodeData, split: Split, split_index: int,
                 variant: str, settings: SearchSettings, seed: int, grid: dict | None = None,
                 strategy: int = 1) -> SelectionResult:
    """Per-split hyperparameter search on the validation holdout.

    For GMNN models alpha is searched with the base GNN and beta follows
    ``strategy``.
    """
    kind = base_kind(model)
    task, guard = build_task(inputs, data, split, variant)
    if grid is None:
        grid = search_space(kind, reduced=settings.reduced)

    def fitness(values):
        cfg = _to_config(values)
        key = config_key(grid, values)
        accs = []
        for rep in range(settings.runs_per_config):
            rng = rng_stream(seed, STAGE_SELECT, split_index, key, rep)
            out = fit(kind, task, cfg, rng, settings.max_epochs, settings.patience)
            accs.append(task.valid_accuracy(predict_probs(kind, out.params, task.inputs, cfg)))
        return float(np.mean(accs))

    result = evolve(grid, fitness, rng_stream(seed, STAGE_SELECT, split_index), pop_size=settings.pop_size,
                    generations=settings.generations, mutation_p=settings.mutation_p)
    alpha = _to_config(result.best_dict())
    beta = None
    if is_gmnn(model):
        beta = select_beta(alpha, strategy, task=task, kind=kind, settings=settings,
                           seed=seed, split_index=split_index)
    return SelectionResult(split_index, model, variant, alpha, beta, strategy if is_gmnn(model) else None,
                           result.best_fitness, result.evaluations, result.grid_size, result)


def select_beta(alpha: HyperConfig, strategy: int, task: Task | None = None, kind: str = "gcn",
                settings: SearchSettings | None = None, seed: int = 0, split_index: int = 0) -> HyperConfig:
    """Hyperparameters for p_phi given the selected alpha.

    1: beta = alpha.  2: a fixed configuration.  3: evolutionary search on
    p_phi's validation accuracy after a few EM loops, alpha fixed.
    """
    if strategy == 1:
        return alpha
    if strategy == 2:
        return HyperConfig(**STRATEGY2_BETA, epsilon=alpha.epsilon)
    if strategy != 3:
        raise ValueError("strategy must be 1, 2 or 3")
    if task is None or settings is None:
        raise ValueError("strategy 3 needs the task and search settings")
    grid = search_space(kind, reduced=settings.reduced, hidden_dims=[8, 16])
    base_cfg = GmnnConfig(alpha, alpha, kind, em_loops=settings.beta_em_loops,
                          epochs_per_phase=settings.epochs_per_phase, annealing=settings.annealing,
                          init_epochs=settings.max_epochs, patience=settings.patience)
    theta0 = fit(kind, task, alpha, rng_stream(seed, STAGE_BETA, split_index), settings.max_epochs,
                 settings.patience)

    def fitness(values):
        beta = _to_config(values)
        cfg = GmnnConfig(alpha, beta, kind, em_loops=base_cfg.em_loops, epochs_per_phase=base_cfg.epochs_per_phase,
                         annealing=base_cfg.annealing, init_epochs=base_cfg.init_epochs, patience=base_cfg.patience)
        rng = rng_stream(seed, STAGE_BETA, split_index, config_key(grid, values))
        state = em_train(task, cfg, rng, theta_init=theta0)
        return state.last("p_phi").val_acc

    result = evolve(grid, fitness, rng_stream(seed, STAGE_BETA, split_index, 1 << 40),
                    pop_size=settings.beta_pop_size, generations=settings.beta_generations,
                    mutation_p=settings.mutation_p)
    return _to_config(result.best_dict())


# ---------------------------------------------------------------------------
# assessment
# ---------------------------------------------------------------------------

@dataclass
class TTestResult:
    t: float
    df: int
    p: float
    stars: str
    degenerate: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def significance_stars(p: float) -> str:
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return ""


def t_cdf(t: float, df: int) -> float:
    """Student t cumulative distribution function."""
    return float(special.stdtr(df, t))


def paired_t_test(after, before) -> TTestResult:
    """One-sided paired t-test of H1: mean(after - before) > 0."""
    a = np.asarray(after, dtype=np.float64)
    b = np.asarray(before, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("need two equal-length samples of size >= 2")
    d = a - b
    n = d.size
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean > 0:
            t, p = math.inf, 0.0
        elif mean < 0:
            t, p = -math.inf, 1.0
        else:
            t, p = 0.0, 0.5
        return TTestResult(t, n - 1, p, significance_stars(p), degenerate=True)
    t = mean / (sd / math.sqrt(n))
    p = 1.0 - t_cdf(t, n - 1) if t < 0 else t_cdf(-t, n - 1)
    return TTestResult(t, n - 1, p, significance_stars(p))


GMNN_METRICS = ("baseline", "p_phi", "q_theta", "best")


@dataclass
class RunRecord:
    split: int
    run: int
    ok: bool
    metrics: dict[str, float]
    error: str | None = None


@dataclass
class AssessmentReport:
    model: str
    variant: str
    k: int
    r: int
    seed: int
    runs: list[RunRecord]
    dataset: str = "dataset"

    @property
    def metric_names(self) -> tuple[str, ...]:
        return GMNN_METRICS if is_gmnn(self.model) else ("acc",)

    def values(self, metric: str) -> np.ndarray:
        """split x run matrix of accuracies; NaN for failed runs."""
        out = np.full((self.k, self.r), np.nan)
        for rec in self.runs:
            if rec.ok:
                out[rec.split, rec.run] = rec.metrics[metric]
        return out

    def split_means(self, metric: str) -> np.ndarray:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return np.nanmean(self.values(metric), axis=1)

    def summary(self, metric: str) -> dict:
        """Mean over all runs; ``std`` over per-split means, ``std_runs`` over all runs (both ddof=1)."""
        means = self.split_means(metric)
        v = self.values(metric)
        flat = v[np.isfinite(v)]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            split_stds = np.nanstd(v, axis=1, ddof=1) if self.r > 1 else np.zeros(self.k)
        return {
            "mean": float(np.mean(flat)) if flat.size else float("nan"),
            "std": float(np.std(means, ddof=1)) if means.size > 1 else 0.0,
            "std_runs": float(np.std(flat, ddof=1)) if flat.size > 1 else 0.0,
            "split_means": [float(x) for x in means],
            "split_stds": [float(x) for x in split_stds],
        }

    def significance(self) -> TTestResult | None:
        if not is_gmnn(self.model):
            return None
        return paired_t_test(self.split_means("best"), self.split_means("baseline"))

    @property
    def failures(self) -> int:
        return sum(not rec.ok for rec in self.runs)

    def to_dict(self) -> dict:
        sig = self.significance()
        return {
            "model": self.model, "variant": self.variant, "k": self.k, "r": self.r, "seed": self.seed,
            "dataset": self.dataset,
            "runs": [asdict(rec) for rec in self.runs],
            "summary": {m: self.summary(m) for m in self.metric_names},
            "significance": None if sig is None else sig.to_dict(),
            "failures": self.failures,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AssessmentReport":
        runs = [RunRecord(**rec) for rec in d["runs"]]
        return cls(d["model"], d["variant"], d["k"], d["r"], d["seed"], runs, d.get("dataset", "dataset"))


def compare_reports(after: AssessmentReport, before: AssessmentReport, after_metric: str | None = None,
                    before_metric: str | None = None) -> TTestResult:
    """Paired t-test between two assessments over the same splits."""
    if after.k != before.k:
        raise ValueError("reports cover different numbers of splits")
    am = after_metric or ("best" if is_gmnn(after.model) else "acc")
    bm = before_metric or ("best" if is_gmnn(before.model) else "acc")
    return paired_t_test(after.split_means(am), before.split_means(bm))


def _gmnn_config(sel: SelectionResult, settings: SearchSettings) -> GmnnConfig:
    return GmnnConfig(sel.alpha, sel.beta or sel.alpha, base_kind(sel.model), em_loops=settings.em_loops,
                      epochs_per_phase=settings.epochs_per_phase, annealing=settings.annealing,
                      init_epochs=settings.max_epochs, patience=settings.patience)


def run_one(model: str, inputs: ModelInputs, data: NodeData, split: Split, split_index: int, run: int,
            variant: str, sel: SelectionResult, settings: SearchSettings, seed: int,
            history: bool = False) -> RunRecord:
    """One assessment training run; failures are recorded, not raised."""
    task, _ = build_task(inputs, data, split, variant, with_test=True)
    rng = rng_stream(seed, STAGE_ASSESS, split_index, run)
    try:
        if is_gmnn(model):
            state = em_train(task, _gmnn_config(sel, settings), rng)
            metrics = state.summary()
            if history:
                metrics["history"] = [rec.to_dict() for rec in state.history]
        else:
            kind = base_kind(model)
            out = fit(kind, task, sel.alpha, rng, settings.max_epochs, settings.patience)
            metrics = {"acc": task.score(predict_probs(kind, out.params, task.inputs, sel.alpha))}
    except (NonFiniteLossError, FloatingPointError) as exc:
        return RunRecord(split_index, run, False, {}, str(exc))
    return RunRecord(split_index, run, True, metrics)


def _run_job(args):
    return run_one(*args)


def _select_job(args):
    model, inputs, data, split, j, variant, settings, seed, strategy = args
    return model_select(model, inputs, data, split, j, variant, settings, seed, strategy=strategy)


def default_workers() -> int:
    return os.cpu_count() or 1


def parallel_map(fn, jobs, workers: int | None = None):
    workers = default_workers() if workers is None else workers
    jobs = list(jobs)
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(fn, jobs))


def select_all(model: str, graph: SparseGraph, data: NodeData, splitset: SplitSet, variant: str,
               settings: SearchSettings, seed: int, strategy: int = 1,
               workers: int | None = None) -> list[SelectionResult]:
    inputs = ModelInputs.build(graph.adj, data.features)
    jobs = [(model, inputs, data, s, j, variant, settings, seed, strategy) for j, s in enumerate(splitset.splits)]
    return parallel_map(_select_job, jobs, workers)


def assess(model: str, graph: SparseGraph, data: NodeData, splitset: SplitSet,
           selections: list[SelectionResult], variant: str, r: int, settings: SearchSettings, seed: int,
           workers: int | None = None, history: bool = False) -> AssessmentReport:
    """``r`` runs per split with the split's selected hyperparameters."""
    if len(selections) != splitset.k:
        raise ValueError("need one selection per split (%d), got %d" % (splitset.k, len(selections)))
    inputs = ModelInputs.build(graph.adj, data.features)
    by_split = {s.split: s for s in selections}
    jobs = [(model, inputs, data, splitset.splits[j], j, run, variant, by_split[j], settings, seed, history)
            for j in range(splitset.k) for run in range(r)]
    runs = parallel_map(_run_job, jobs, workers)
    runs.sort(key=lambda rec: (rec.split, rec.run))
    report = AssessmentReport(model, variant, splitset.k, r, seed, runs, data.name)
    if report.failures:
        warnings.warn("%d of %d runs failed and are excluded" % (report.failures, len(runs)), stacklevel=2)
    return report


# ---------------------------------------------------------------------------
# tables
# ---------------------------------------------------------------------------

def format_cell(mean: float, std: float) -> str:
    """Accuracy cell in percent, ``NN.NN (N.NN)``."""
    if not (math.isfinite(mean) and math.isfinite(std)):
        return "n/a"
    return "%.2f (%.2f)" % (100.0 * mean, 100.0 * std)


def report_rows(report: AssessmentReport) -> list[tuple[str, str]]:
    """(row label, cell) pairs for one assessment."""
    if not is_gmnn(report.model):
        s = report.summary("acc")
        return [(report.model.upper(), format_cell(s["mean"], s["std"]))]
    base = base_kind(report.model).upper()
    rows = []
    for metric, label in (("baseline", base), ("p_phi", "GMNN-%s p_phi" % base),
                          ("q_theta", "GMNN-%s q_theta" % base), ("best", "GMNN-%s best" % base)):
        s = report.summary(metric)
        rows.append((label, format_cell(s["mean"], s["std"])))
    return rows


def render_table(reports: list[AssessmentReport]) -> list[list[str]]:
    """Model rows, one column per (dataset, train variant), then a significance row.

    The significance row lists, per column, the stars of each GMNN model's
    best-over-baseline paired test.
    """
    columns: list[str] = []
    cells: dict[tuple[str, str], str] = {}
    row_order: list[str] = []
    sig: dict[str, list[str]] = {}
    for rep in reports:
        col = "%s %s" % (rep.dataset, rep.variant)
        if col not in columns:
            columns.append(col)
        for label, cell in report_rows(rep):
            if label not in row_order:
                row_order.append(label)
            cells[(label, col)] = cell
        t = rep.significance()
        if t is not None:
            stars = t.stars or "ns"
            sig.setdefault(col, []).append("%s %s (p=%.4f)" % (rep.model, stars, t.p))
    table = [["model"] + columns]
    for label in row_order:
        table.append([label] + [cells.get((label, c), "") for c in columns])
    table.append(["significance"] + ["; ".join(sig.get(c, [])) for c in columns])
    return table
