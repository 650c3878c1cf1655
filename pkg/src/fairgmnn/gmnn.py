"""EM training of a pair of GNNs that together model label dependencies.

``q_theta`` is an ordinary node classifier on the features. ``p_phi`` sees the
features concatenated with a *label channel*: the mean pseudo-label of each
node's neighbors, computed with a zero-diagonal row-normalized adjacency so a
node's own pseudo-label never enters its own input row.

One EM loop is

1. pseudo-labels ``yhat``: ground truth on the labeled set, annealed
   ``q_theta`` predictions elsewhere;
2. M-step: fit ``p_phi`` to ``yhat`` on every node outside the validation set;
3. E-step: fit ``q_theta`` to ``p_phi``'s predictions on unlabeled nodes plus
   the ground truth on labeled ones.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .core_math import CSR, hstack, log_softmax_rows, row_normalize_dense, spmm
from .models import HyperConfig, ModelInputs, Task, TrainOutcome, fit, forward, init_params, predict_probs, \
    train_model

SAMPLING_METHODS = ("sharpen", "temperature", "sample")


@dataclass(frozen=True)
class GmnnConfig:
    alpha: HyperConfig
    beta: HyperConfig
    base_kind: str = "gcn"
    em_loops: int = 10
    epochs_per_phase: int = 100
    annealing: float = 0.1
    sampling: str = "sharpen"
    label_self_loop: bool = False
    init_epochs: int = 1000
    patience: int = 200

    def __post_init__(self):
        if self.em_loops < 0:
            raise ValueError("em_loops must be >= 0")
        if not 0.0 <= self.annealing <= 1.0:
            raise ValueError("annealing factor must lie in [0, 1]")
        if self.sampling not in SAMPLING_METHODS:
            raise ValueError("sampling must be one of %r" % (SAMPLING_METHODS,))
        if self.base_kind not in ("gcn", "fagcn"):
            raise ValueError("GMNN base must be gcn or fagcn, got %r" % self.base_kind)


@dataclass
class PhaseRecord:
    loop: int
    phase: str
    network: str
    val_acc: float
    test_acc: float | None

    def to_dict(self) -> dict:
        return {"loop": self.loop, "phase": self.phase, "network": self.network,
                "val_acc": self.val_acc, "test_acc": self.test_acc}


@dataclass
class GmnnState:
    theta: dict[str, np.ndarray]
    phi: dict[str, np.ndarray] | None = None
    yhat: np.ndarray | None = None
    history: list[PhaseRecord] = field(default_factory=list)

    @property
    def baseline(self) -> PhaseRecord:
        return self.history[0]

    def last(self, network: str) -> PhaseRecord | None:
        recs = [r for r in self.history[1:] if r.network == network]
        return recs[-1] if recs else None

    @property
    def best(self) -> PhaseRecord:
        """EM phase with the highest validation accuracy (earliest on ties).

        Falls back to the initial classifier when no EM loop was run.
        """
        em = self.history[1:]
        if not em:
            return self.history[0]
        return max(em, key=lambda r: r.val_acc)  # max keeps the first maximum

    def summary(self) -> dict:
        out = {"baseline": self.baseline.test_acc, "best": self.best.test_acc}
        for net in ("p_phi", "q_theta"):
            rec = self.last(net)
            out[net] = None if rec is None else rec.test_acc
        return out

    def history_jsonl(self, **extra) -> str:
        return "".join(json.dumps({**extra, **r.to_dict()}, sort_keys=True) + "\n" for r in self.history)


# ---------------------------------------------------------------------------
# pseudo-labels and the label channel
# ---------------------------------------------------------------------------

def annealed_sample(q_probs: np.ndarray, targets: np.ndarray, labeled_idx, tau: float,
                    rng: np.random.Generator | None = None, method: str = "sharpen") -> np.ndarray:
    """Pseudo-labels: ``targets`` rows on ``labeled_idx``, annealed ``q`` elsewhere.

    ``sharpen``:     tau * q + (1 - tau) * onehot(argmax q)
    ``temperature``: q ** (1 / tau), renormalized (argmax one-hot at tau = 0)
    ``sample``:      one-hot draw from the ``temperature`` distribution
    """
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    n, k = q_probs.shape
    hard = np.zeros_like(q_probs)
    hard[np.arange(n), np.argmax(q_probs, axis=1)] = 1.0
    if method == "sharpen":
        yhat = tau * q_probs + (1.0 - tau) * hard
    elif method in ("temperature", "sample"):
        if tau == 0.0:
            yhat = hard
        else:
            logq = np.log(np.maximum(q_probs, 1e-300))
            logq -= logq.max(axis=1, keepdims=True)
            with np.errstate(over="ignore"):
                yhat = np.exp(logq / tau)
            yhat /= yhat.sum(axis=1, keepdims=True)
        if method == "sample":
            if rng is None:
                raise ValueError("sampling needs an rng")
            u = rng.random((n, 1))
            draws = np.minimum((np.cumsum(yhat, axis=1) < u).sum(axis=1), k - 1)
            yhat = np.zeros_like(q_probs)
            yhat[np.arange(n), draws] = 1.0
    else:
        raise ValueError("unknown sampling method %r" % method)
    labeled_idx = np.asarray(labeled_idx, dtype=np.int64)
    yhat[labeled_idx] = targets[labeled_idx]
    return yhat


def label_channel(adj: CSR, yhat: np.ndarray, self_loop: bool = False) -> np.ndarray:
    """Mean of the neighbors' pseudo-labels for every node.

    Row ``n`` reads only neighbors of ``n``; with ``self_loop`` the node's own
    row joins the average.
    """
    agg = spmm(adj.with_data(np.ones(adj.nnz)), yhat)
    if self_loop:
        agg = agg + yhat
    return row_normalize_dense(agg)


def phi_inputs(task: Task, yhat: np.ndarray, self_loop: bool = False, adj: CSR | None = None) -> ModelInputs:
    """Base inputs with ``[x | label channel]`` as features."""
    base = task.inputs
    if adj is None:
        adj = base.prop
    channel = label_channel(adj, yhat, self_loop)
    return base.with_features(hstack(base.features, CSR.from_dense(channel)))


# ---------------------------------------------------------------------------
# objectives
# ---------------------------------------------------------------------------

def e_step_targets(task: Task, p_probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Targets and training rows for the q_theta update.

    Unlabeled rows outside the validation set take ``p_probs``; labeled rows
    keep their one-hot ground truth. Validation rows keep ground truth for
    early stopping but are not trained on.
    """
    n = task.inputs.num_nodes
    targets = p_probs.copy()
    targets[task.train_idx] = task.targets[task.train_idx]
    targets[task.valid_idx] = task.targets[task.valid_idx]
    excluded = np.zeros(n, dtype=bool)
    excluded[task.valid_idx] = True
    rows = np.flatnonzero(~excluded)
    return targets, rows


def m_step_targets(task: Task, yhat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Targets and training rows for the p_phi update (all non-validation nodes)."""
    n = task.inputs.num_nodes
    targets = yhat.copy()
    targets[task.valid_idx] = task.targets[task.valid_idx]
    excluded = np.zeros(n, dtype=bool)
    excluded[task.valid_idx] = True
    return targets, np.flatnonzero(~excluded)


def objective_theta(q_logits: np.ndarray, p_probs: np.ndarray, task: Task) -> float:
    """O_theta: expected log q under p_phi on unlabeled rows plus log q of the truth on labeled rows."""
    targets, rows = e_step_targets(task, p_probs)
    return float((targets[rows] * log_softmax_rows(q_logits)[rows]).sum())


def objective_phi(p_logits: np.ndarray, yhat: np.ndarray, rows) -> float:
    """O_phi: sum over ``rows`` of log p_phi(yhat_n | label channel, x)."""
    rows = np.asarray(rows, dtype=np.int64)
    return float((yhat[rows] * log_softmax_rows(p_logits)[rows]).sum())


# ---------------------------------------------------------------------------
# EM
# ---------------------------------------------------------------------------

def init_q_theta(task: Task, cfg: GmnnConfig, rng: np.random.Generator) -> TrainOutcome:
    """Plain supervised base GNN; its accuracy is the GMNN baseline."""
    return fit(cfg.base_kind, task, cfg.alpha, rng, max_epochs=cfg.init_epochs, patience=cfg.patience)


def m_step(state: GmnnState, task: Task, cfg: GmnnConfig, rng: np.random.Generator,
           inputs: ModelInputs | None = None) -> TrainOutcome:
    if inputs is None:
        inputs = phi_inputs(task, state.yhat, cfg.label_self_loop)
    if state.phi is None:
        state.phi = init_params(cfg.base_kind, inputs.features.shape[1], cfg.beta.hidden_dim,
                                task.num_classes, rng)
    targets, rows = m_step_targets(task, state.yhat)
    out = train_model(cfg.base_kind, state.phi, inputs, rows, task.valid_idx, targets, cfg.beta, rng,
                      max_epochs=cfg.epochs_per_phase, patience=cfg.patience)
    state.phi = out.params
    return out


def e_step(state: GmnnState, task: Task, cfg: GmnnConfig, rng: np.random.Generator,
           inputs: ModelInputs | None = None) -> TrainOutcome:
    if inputs is None:
        inputs = phi_inputs(task, state.yhat, cfg.label_self_loop)
    p_probs = predict_probs(cfg.base_kind, state.phi, inputs, cfg.beta)
    targets, rows = e_step_targets(task, p_probs)
    out = train_model(cfg.base_kind, state.theta, task.inputs, rows, task.valid_idx, targets, cfg.alpha, rng,
                      max_epochs=cfg.epochs_per_phase, patience=cfg.patience)
    state.theta = out.params
    return out


def _record(task: Task, probs: np.ndarray, loop: int, phase: str, network: str) -> PhaseRecord:
    return PhaseRecord(loop, phase, network, task.valid_accuracy(probs), task.score(probs))


def em_train(task: Task, cfg: GmnnConfig, rng: np.random.Generator,
             theta_init: TrainOutcome | None = None) -> GmnnState:
    """Initial q_theta followed by ``cfg.em_loops`` M/E rounds.

    ``theta_init`` reuses an already trained initial classifier (its params
    are copied, not mutated).
    """
    kind = cfg.base_kind
    if theta_init is None:
        theta_init = init_q_theta(task, cfg, rng)
    state = GmnnState(theta={k: v.copy() for k, v in theta_init.params.items()})
    q = predict_probs(kind, state.theta, task.inputs, cfg.alpha)
    state.history.append(_record(task, q, 0, "init", "q_theta"))

    for loop in range(1, cfg.em_loops + 1):
        state.yhat = annealed_sample(q, task.targets, task.train_idx, cfg.annealing, rng, cfg.sampling)
        pin = phi_inputs(task, state.yhat, cfg.label_self_loop)
        m_step(state, task, cfg, rng, pin)
        p = predict_probs(kind, state.phi, pin, cfg.beta)
        state.history.append(_record(task, p, loop, "M", "p_phi"))

        e_step(state, task, cfg, rng, pin)
        q = predict_probs(kind, state.theta, task.inputs, cfg.alpha)
        state.history.append(_record(task, q, loop, "E", "q_theta"))
    return state


def q_logits(state: GmnnState, task: Task, cfg: GmnnConfig) -> np.ndarray:
    return forward(cfg.base_kind, state.theta, task.inputs, cfg.alpha)[0]
