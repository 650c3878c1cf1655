"""Two-layer node classifiers with hand-derived gradients.

Three architectures share one parameter layout (``W0, b0, W1, b1``; FAGCN
adds one gate vector per propagation, ``g1`` and ``g2``):

* ``mlp``:   Z = drop(relu(drop(X) W0 + b0)) W1 + b1
* ``gcn``:   Z = Â drop(relu(Â drop(X) W0 + b0)) W1 + b1
* ``fagcn``: h0 = drop(relu(drop(X) W0 + b0)), two gated propagations
  h_l[i] = eps * h0[i] + sum_j tanh(g_l . [h_{l-1}[i] | h_{l-1}[j]]) / sqrt(d_i d_j) * h_{l-1}[j]
  over the neighbors j of i (d = degree + 1), with dropout on h1, then
  Z = h2 W1 + b1.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .core_math import (
    CSR,
    AdamState,
    adam_step,
    dropout_mask,
    edge_gate,
    glorot_init,
    renormalize_adjacency,
    sddmm,
    soft_ce_with_logits,
    softmax_rows,
    spmm,
    spmm_t,
)

MODEL_KINDS = ("mlp", "gcn", "fagcn")

HIDDEN_DIMS = [8, 16, 32, 64]
DROPOUTS = [0.2, 0.4, 0.6, 0.8]
LEARNING_RATES = [1e-1, 5e-2, 1e-2, 5e-3, 1e-3, 5e-4, 1e-4]
L2_STRENGTHS = [1e-1, 5e-2, 1e-2, 5e-3, 1e-3, 5e-4, 1e-4, 5e-5, 1e-5]
EPSILONS = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class HyperConfig:
    hidden_dim: int = 16
    input_dropout: float = 0.5
    dropout: float = 0.5
    learning_rate: float = 0.01
    l2: float = 5e-4
    epsilon: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "HyperConfig":
        return cls(**{k: d[k] for k in ("hidden_dim", "input_dropout", "dropout", "learning_rate", "l2")},
                   epsilon=d.get("epsilon"))


def search_space(kind: str, reduced: bool = False, hidden_dims=None) -> dict[str, list]:
    """Hyperparameter grid, in the field order used for crossover."""
    grid = {
        "hidden_dim": list(hidden_dims or HIDDEN_DIMS),
        "input_dropout": list(DROPOUTS),
        "dropout": list(DROPOUTS),
        "learning_rate": list(LEARNING_RATES),
        "l2": list(L2_STRENGTHS),
    }
    if reduced:
        grid.update(hidden_dim=[64], l2=[1e-5], learning_rate=[1e-1, 5e-2])
    if kind == "fagcn":
        grid["epsilon"] = [0.7, 0.8, 0.9] if reduced else list(EPSILONS)
    return grid


def on_grid(cfg: HyperConfig, grid: dict[str, list]) -> bool:
    d = cfg.to_dict()
    if "epsilon" not in grid and d["epsilon"] is not None:
        return False
    return all(d[k] in values for k, values in grid.items())


# ---------------------------------------------------------------------------
# inputs and parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ModelInputs:
    """Features plus the two propagation operators derived from one graph.

    ``adj_hat`` is the renormalized adjacency used by GCN; ``prop`` holds the
    raw neighbor pattern (no self-loops) with values 1/sqrt(d_i d_j),
    d = degree + 1, used by FAGCN.
    """

    features: CSR
    adj_hat: CSR
    prop: CSR

    @classmethod
    def build(cls, adj: CSR, features: CSR) -> "ModelInputs":
        if features.shape[0] != adj.shape[0]:
            raise ValueError("features have %d rows for %d nodes" % (features.shape[0], adj.shape[0]))
        d = np.diff(adj.indptr) + 1.0
        inv = 1.0 / np.sqrt(d)
        prop = adj.with_data(inv[adj.row_ids] * inv[adj.indices])
        return cls(features, renormalize_adjacency(adj), prop)

    def with_features(self, features: CSR) -> "ModelInputs":
        return ModelInputs(features, self.adj_hat, self.prop)

    @property
    def num_nodes(self) -> int:
        return self.features.shape[0]


def init_params(kind: str, in_dim: int, hidden_dim: int, num_classes: int,
                rng: np.random.Generator) -> dict[str, np.ndarray]:
    if kind not in MODEL_KINDS:
        raise ValueError("unknown model kind %r" % kind)
    params = {
        "W0": glorot_init(in_dim, hidden_dim, rng),
        "b0": np.zeros(hidden_dim),
        "W1": glorot_init(hidden_dim, num_classes, rng),
        "b1": np.zeros(num_classes),
    }
    if kind == "fagcn":
        params["g1"] = glorot_init(2 * hidden_dim, 1, rng).ravel()
        params["g2"] = glorot_init(2 * hidden_dim, 1, rng).ravel()
    return params


def _check_shapes(params, inputs: ModelInputs):
    if params["W0"].shape[0] != inputs.features.shape[1]:
        raise ValueError("W0 expects %d input features, got %d"
                         % (params["W0"].shape[0], inputs.features.shape[1]))


def _mask(shape, rate, train, rng):
    if not train or rate == 0.0:
        return None
    return dropout_mask(shape, rate, rng)


def _apply(h, m):
    return h if m is None else h * m


def _drop_features(x: CSR, rate, train, rng) -> CSR:
    m = _mask(x.nnz, rate, train, rng)
    return x if m is None else x.with_data(x.data * m)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def mlp_forward(params, inputs: ModelInputs, cfg: HyperConfig, train=False, rng=None):
    _check_shapes(params, inputs)
    x = _drop_features(inputs.features, cfg.input_dropout, train, rng)
    a0 = spmm(x, params["W0"]) + params["b0"]
    h = np.maximum(a0, 0.0)
    m1 = _mask(h.shape, cfg.dropout, train, rng)
    hd = _apply(h, m1)
    z = hd @ params["W1"] + params["b1"]
    return z, {"x": x, "a0": a0, "hd": hd, "m1": m1}


def mlp_backward(params, inputs, cfg, cache, dz):
    g = {"W1": cache["hd"].T @ dz, "b1": dz.sum(axis=0)}
    dh = _apply(dz @ params["W1"].T, cache["m1"])
    da0 = dh * (cache["a0"] > 0)
    g["W0"] = spmm_t(cache["x"], da0)
    g["b0"] = da0.sum(axis=0)
    return g


def gcn_forward(params, inputs: ModelInputs, cfg: HyperConfig, train=False, rng=None):
    _check_shapes(params, inputs)
    adj = inputs.adj_hat
    x = _drop_features(inputs.features, cfg.input_dropout, train, rng)
    a0 = spmm(adj, spmm(x, params["W0"])) + params["b0"]
    h = np.maximum(a0, 0.0)
    m1 = _mask(h.shape, cfg.dropout, train, rng)
    hd = _apply(h, m1)
    z = spmm(adj, hd @ params["W1"]) + params["b1"]
    return z, {"x": x, "a0": a0, "hd": hd, "m1": m1}


def gcn_backward(params, inputs, cfg, cache, dz):
    adj = inputs.adj_hat
    db = spmm_t(adj, dz)
    g = {"W1": cache["hd"].T @ db, "b1": dz.sum(axis=0)}
    dh = _apply(db @ params["W1"].T, cache["m1"])
    da0 = dh * (cache["a0"] > 0)
    g["W0"] = spmm_t(cache["x"], spmm_t(adj, da0))
    g["b0"] = da0.sum(axis=0)
    return g


def fagcn_forward(params, inputs: ModelInputs, cfg: HyperConfig, train=False, rng=None):
    if cfg.epsilon is None:
        raise ValueError("FAGCN requires cfg.epsilon")
    _check_shapes(params, inputs)
    prop = inputs.prop
    eps = cfg.epsilon
    hid = params["W0"].shape[1]
    x = _drop_features(inputs.features, cfg.input_dropout, train, rng)
    a0 = spmm(x, params["W0"]) + params["b0"]
    h0 = np.maximum(a0, 0.0)
    m0 = _mask(h0.shape, cfg.dropout, train, rng)
    h0d = _apply(h0, m0)

    layers = []
    p = h0d
    m1 = None
    for name in ("g1", "g2"):
        gate = params[name]
        alpha = edge_gate(prop, p @ gate[:hid], p @ gate[hid:])
        coef = alpha * prop.data
        out = eps * h0d + spmm(prop.with_data(coef), p)
        layers.append((p, alpha, coef))
        if name == "g1":
            m1 = _mask(out.shape, cfg.dropout, train, rng)
            p = _apply(out, m1)
        else:
            h2 = out
    z = h2 @ params["W1"] + params["b1"]
    return z, {"x": x, "a0": a0, "m0": m0, "m1": m1, "h2": h2, "layers": layers}


def fagcn_backward(params, inputs, cfg, cache, dz):
    prop = inputs.prop
    eps = cfg.epsilon
    n = inputs.num_nodes
    hid = params["W0"].shape[1]
    g = {"W1": cache["h2"].T @ dz, "b1": dz.sum(axis=0)}
    dh = dz @ params["W1"].T
    dh0d = np.zeros_like(dh)
    for li in (1, 0):
        p, alpha, coef = cache["layers"][li]
        gate = params["g%d" % (li + 1)]
        dh0d += eps * dh
        dp = spmm_t(prop.with_data(coef), dh)
        de = sddmm(prop, dh, p) * prop.data * (1.0 - alpha * alpha)
        ds = np.bincount(prop.row_ids, weights=de, minlength=n)
        dt = np.bincount(prop.indices, weights=de, minlength=n)
        g["g%d" % (li + 1)] = np.concatenate([p.T @ ds, p.T @ dt])
        dp += np.outer(ds, gate[:hid]) + np.outer(dt, gate[hid:])
        if li == 1:
            dh = _apply(dp, cache["m1"])
        else:
            dh0d += dp
    da0 = _apply(dh0d, cache["m0"]) * (cache["a0"] > 0)
    g["W0"] = spmm_t(cache["x"], da0)
    g["b0"] = da0.sum(axis=0)
    return g


_FORWARD = {"mlp": mlp_forward, "gcn": gcn_forward, "fagcn": fagcn_forward}
_BACKWARD = {"mlp": mlp_backward, "gcn": gcn_backward, "fagcn": fagcn_backward}


def forward(kind, params, inputs, cfg, train=False, rng=None):
    return _FORWARD[kind](params, inputs, cfg, train, rng)


def backward(kind, params, inputs, cfg, cache, dz):
    return _BACKWARD[kind](params, inputs, cfg, cache, dz)


def loss_and_grad(kind, params, inputs, cfg, targets, rows, train=False, rng=None):
    """Mean soft cross-entropy over ``rows`` and its parameter gradients."""
    z, cache = forward(kind, params, inputs, cfg, train, rng)
    loss, dz = soft_ce_with_logits(z, targets, rows)
    return loss, backward(kind, params, inputs, cfg, cache, dz)


def predict_probs(kind, params, inputs, cfg) -> np.ndarray:
    z, _ = forward(kind, params, inputs, cfg, train=False)
    return softmax_rows(z)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

class EarlyStopper:
    """Patience bookkeeping over validation loss (and optionally accuracy).

    Improvement means strictly better than the best value seen so far. The
    restore point is always the epoch with the lowest validation loss; with
    ``track_accuracy`` the patience counter also resets when validation
    accuracy improves.
    """

    def __init__(self, patience: int, track_accuracy: bool = False):
        self.patience = patience
        self.track_accuracy = track_accuracy
        self.best_loss = math.inf
        self.best_acc = -math.inf
        self.best_loss_epoch = 0
        self.acc_at_best_loss = float("nan")
        self.stale = 0

    def update(self, epoch: int, loss: float, acc: float) -> bool:
        """Record one epoch; return True if it is the new restore point."""
        loss_better = loss < self.best_loss
        acc_better = acc > self.best_acc
        if loss_better:
            self.best_loss = loss
            self.best_loss_epoch = epoch
            self.acc_at_best_loss = acc
        if acc_better:
            self.best_acc = acc
        if loss_better or (self.track_accuracy and acc_better):
            self.stale = 0
        else:
            self.stale += 1
        return loss_better

    @property
    def should_stop(self) -> bool:
        return self.stale >= self.patience


@dataclass
class TrainOutcome:
    params: dict[str, np.ndarray]
    best_val_loss: float
    best_val_acc: float
    best_epoch: int
    epochs_run: int
    stop_reason: str
    val_loss_trace: list[float] = field(default_factory=list, repr=False)


def train_model(kind: str, params: dict[str, np.ndarray], inputs: ModelInputs, train_idx, valid_idx,
                targets: np.ndarray, cfg: HyperConfig, rng: np.random.Generator,
                max_epochs: int = 1000, patience: int = 200) -> TrainOutcome:
    """Full-batch Adam training with early stopping on ``valid_idx``.

    ``targets`` is an N x K matrix of per-node target distributions; only the
    rows in ``train_idx`` and ``valid_idx`` are read. ``params`` is trained
    in place; the returned outcome holds a copy of the best-validation-loss
    state.
    """
    train_idx = np.asarray(train_idx, dtype=np.int64)
    valid_idx = np.asarray(valid_idx, dtype=np.int64)
    if train_idx.size == 0:
        raise ValueError("empty training set")
    if np.intersect1d(train_idx, valid_idx).size:
        raise ValueError("train and validation sets overlap")
    valid_labels = np.argmax(targets[valid_idx], axis=1)

    # copy.deepcopy keeps the best state independent of in-place Adam updates
    state = AdamState.zeros_like(params)
    stopper = EarlyStopper(patience, track_accuracy=(kind == "fagcn"))
    best = copy.deepcopy(params)
    trace = []
    stop_reason = "max_epochs"
    epoch = 0
    for epoch in range(1, max_epochs + 1):
        loss, grads = loss_and_grad(kind, params, inputs, cfg, targets, train_idx, train=True, rng=rng)
        if not np.isfinite(loss):
            raise NonFiniteLossError("non-finite training loss %r at epoch %d (%s, %r)"
                                     % (loss, epoch, kind, cfg))
        adam_step(params, grads, state, cfg.learning_rate, cfg.l2)

        z, _ = forward(kind, params, inputs, cfg, train=False)
        if valid_idx.size:
            val_loss, _ = soft_ce_with_logits(z, targets, valid_idx)
            val_acc = float(np.mean(np.argmax(z[valid_idx], axis=1) == valid_labels))
        else:
            val_loss, val_acc = loss, float("nan")
        if not np.isfinite(val_loss):
            raise NonFiniteLossError("non-finite validation loss at epoch %d (%s, %r)" % (epoch, kind, cfg))
        trace.append(val_loss)
        if stopper.update(epoch, val_loss, val_acc):
            best = copy.deepcopy(params)
        if stopper.should_stop:
            stop_reason = "patience"
            break
    return TrainOutcome(best, stopper.best_loss, stopper.acc_at_best_loss, stopper.best_loss_epoch,
                        epoch, stop_reason, trace)


@dataclass(frozen=True, eq=False)
class Task:
    """Everything a training run may see for one split.

    ``targets`` holds ground-truth one-hot rows for ``train_idx`` and
    ``valid_idx`` only; test labels never enter it. ``test_score`` maps a
    prediction matrix to held-out test accuracy and is owned by the caller.
    """

    inputs: ModelInputs
    num_classes: int
    train_idx: np.ndarray
    valid_idx: np.ndarray
    targets: np.ndarray
    test_score: Callable[[np.ndarray], float] | None = None

    def score(self, probs: np.ndarray) -> float | None:
        return None if self.test_score is None else float(self.test_score(probs))

    def valid_accuracy(self, probs: np.ndarray) -> float:
        v = self.valid_idx
        return float(np.mean(np.argmax(probs[v], axis=1) == np.argmax(self.targets[v], axis=1)))


def fit(kind: str, task: Task, cfg: HyperConfig, rng: np.random.Generator,
        max_epochs: int = 1000, patience: int = 200) -> TrainOutcome:
    """Fresh Glorot init followed by :func:`train_model` on hard labels."""
    params = init_params(kind, task.inputs.features.shape[1], cfg.hidden_dim, task.num_classes, rng)
    return train_model(kind, params, task.inputs, task.train_idx, task.valid_idx, task.targets, cfg, rng,
                       max_epochs=max_epochs, patience=patience)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, kind: str, params: dict[str, np.ndarray], cfg: HyperConfig) -> None:
    """``.npz`` bundle: one array per parameter plus a JSON header."""
    meta = json.dumps({"kind": kind, "config": cfg.to_dict(), "names": sorted(params)}, sort_keys=True)
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(meta), **params)


def load_checkpoint(path) -> tuple[str, dict[str, np.ndarray], HyperConfig]:
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        params = {k: z[k].copy() for k in meta["names"]}
    return meta["kind"], params, HyperConfig.from_dict(meta["config"])
