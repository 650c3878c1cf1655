"""Numerical building blocks shared by every model.

Dense matrices are plain ``float64`` numpy arrays. Sparse matrices use the
small :class:`CSR` container below, whose products dispatch to the kernels in
:mod:`fairgmnn._kernels`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels

LOG_FLOOR = 1e-12

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


# ---------------------------------------------------------------------------
# random streams
# ---------------------------------------------------------------------------

def rng_stream(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based generator for ``(seed, *keys)``.

    Philox streams are platform independent, and distinct key paths give
    statistically independent streams, so ``rng_stream(s, split, run)`` can be
    handed to a worker without coordination.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


def child_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**63 - 1))


# ---------------------------------------------------------------------------
# sparse matrices
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CSR:
    """Compressed sparse row matrix.

    Column indices are strictly increasing inside each row and no explicit
    zeros are stored; :meth:`from_coo` establishes both.
    """

    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    shape: tuple[int, int]
    _row_ids: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "indptr", np.ascontiguousarray(self.indptr, dtype=np.int64))
        object.__setattr__(self, "indices", np.ascontiguousarray(self.indices, dtype=np.int64))
        object.__setattr__(self, "data", np.ascontiguousarray(self.data, dtype=np.float64))
        object.__setattr__(self, "shape", (int(self.shape[0]), int(self.shape[1])))

    @classmethod
    def from_coo(cls, rows, cols, vals, shape, sum_duplicates=True) -> "CSR":
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.broadcast_to(np.asarray(vals, dtype=np.float64), rows.shape)
        n, m = int(shape[0]), int(shape[1])
        if rows.size and (rows.min() < 0 or rows.max() >= n or cols.min() < 0 or cols.max() >= m):
            raise IndexError("COO index out of range for shape %r" % ((n, m),))
        order = np.lexsort((cols, rows))
        rows, cols, vals = rows[order], cols[order], vals[order]
        if rows.size:
            first = np.ones(rows.size, dtype=bool)
            first[1:] = (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1])
            starts = np.flatnonzero(first)
            if sum_duplicates:
                vals = np.add.reduceat(vals, starts)
            else:
                vals = vals[starts]
            rows, cols = rows[starts], cols[starts]
            keep = vals != 0
            rows, cols, vals = rows[keep], cols[keep], vals[keep]
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=n), out=indptr[1:])
        return cls(indptr, cols, vals, (n, m))

    @classmethod
    def from_dense(cls, a) -> "CSR":
        a = np.asarray(a, dtype=np.float64)
        r, c = np.nonzero(a)
        return cls.from_coo(r, c, a[r, c], a.shape)

    @classmethod
    def identity(cls, n: int) -> "CSR":
        idx = np.arange(n)
        return cls(np.arange(n + 1), idx, np.ones(n), (n, n))

    @property
    def nnz(self) -> int:
        return int(self.data.shape[0])

    @property
    def row_ids(self) -> np.ndarray:
        """Row index of every stored entry (cached)."""
        if self._row_ids is None:
            object.__setattr__(self, "_row_ids", np.repeat(np.arange(self.shape[0]), np.diff(self.indptr)))
        return self._row_ids

    def with_data(self, data) -> "CSR":
        """Same sparsity pattern, new stored values (explicit zeros allowed)."""
        out = CSR(self.indptr, self.indices, data, self.shape)
        object.__setattr__(out, "_row_ids", self._row_ids)
        return out

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        out[self.row_ids, self.indices] = self.data
        return out

    def transpose(self) -> "CSR":
        return CSR.from_coo(self.indices, self.row_ids, self.data, (self.shape[1], self.shape[0]))

    def row_sums(self) -> np.ndarray:
        return np.bincount(self.row_ids, weights=self.data, minlength=self.shape[0])

    def check(self) -> None:
        """Raise ``ValueError`` if the CSR layout invariants are violated."""
        n, m = self.shape
        if self.indptr.shape != (n + 1,) or self.indptr[0] != 0 or self.indptr[-1] != self.nnz:
            raise ValueError("bad row offsets")
        if np.any(np.diff(self.indptr) < 0):
            raise ValueError("row offsets must be nondecreasing")
        if self.nnz and (self.indices.min() < 0 or self.indices.max() >= m):
            raise ValueError("column index out of range")
        same_row = self.row_ids[1:] == self.row_ids[:-1]
        if np.any(same_row & (np.diff(self.indices) <= 0)):
            raise ValueError("column indices must be strictly increasing within a row")
        if np.any(self.data == 0):
            raise ValueError("explicit zero stored")


def hstack(a: CSR, b: CSR) -> CSR:
    """[a | b] for two CSR matrices with the same row count."""
    if a.shape[0] != b.shape[0]:
        raise ValueError("row counts differ: %d vs %d" % (a.shape[0], b.shape[0]))
    rows = np.concatenate([a.row_ids, b.row_ids])
    cols = np.concatenate([a.indices, b.indices + a.shape[1]])
    vals = np.concatenate([a.data, b.data])
    return CSR.from_coo(rows, cols, vals, (a.shape[0], a.shape[1] + b.shape[1]))


def spmm(a: CSR, b: np.ndarray) -> np.ndarray:
    """Exact sparse-dense product ``a @ b``."""
    b = np.ascontiguousarray(b, dtype=np.float64)
    if b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError("spmm dimension mismatch: %r @ %r" % (a.shape, b.shape))
    return _kernels.spmm(a.indptr, a.indices, a.data, b)


def spmm_t(a: CSR, b: np.ndarray) -> np.ndarray:
    """``a.T @ b`` without materializing the transpose."""
    b = np.ascontiguousarray(b, dtype=np.float64)
    if b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ValueError("spmm_t dimension mismatch: %r.T @ %r" % (a.shape, b.shape))
    return _kernels.spmm_t(a.indptr, a.indices, a.data, b, a.shape[1])


def sddmm(pattern: CSR, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``dot(a[i], b[j])`` for every stored entry ``(i, j)`` of ``pattern``."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    return _kernels.sddmm(pattern.indptr, pattern.indices, a, b)


def edge_gate(pattern: CSR, left: np.ndarray, right: np.ndarray) -> np.ndarray:
    """``tanh(left[i] + right[j])`` for every stored entry ``(i, j)``."""
    left = np.ascontiguousarray(left, dtype=np.float64)
    right = np.ascontiguousarray(right, dtype=np.float64)
    return _kernels.edge_gate(pattern.indptr, pattern.indices, left, right)


def renormalize_adjacency(adj: CSR) -> CSR:
    """D^-1/2 (A + I) D^-1/2 with D the degree matrix of A + I."""
    n = adj.shape[0]
    rows = np.concatenate([adj.row_ids, np.arange(n)])
    cols = np.concatenate([adj.indices, np.arange(n)])
    vals = np.concatenate([adj.data, np.ones(n)])
    a_tilde = CSR.from_coo(rows, cols, vals, (n, n))
    d_inv_sqrt = 1.0 / np.sqrt(a_tilde.row_sums())
    return a_tilde.with_data(a_tilde.data * d_inv_sqrt[a_tilde.row_ids] * d_inv_sqrt[a_tilde.indices])


def l1_row_normalize(m: CSR) -> CSR:
    if m.nnz and m.data.min() < 0:
        raise ValueError("l1_row_normalize expects nonnegative entries")
    sums = m.row_sums()
    return m.with_data(m.data / sums[m.row_ids])


def row_normalize_dense(m: np.ndarray) -> np.ndarray:
    sums = m.sum(axis=1, keepdims=True)
    return np.divide(m, sums, out=np.zeros_like(m, dtype=np.float64), where=sums > 0)


# ---------------------------------------------------------------------------
# activations and losses
# ---------------------------------------------------------------------------

def softmax_rows(m: np.ndarray) -> np.ndarray:
    z = m - m.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax_rows(m: np.ndarray) -> np.ndarray:
    z = m - m.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy_soft(pred_probs: np.ndarray, target_probs: np.ndarray, row_set) -> float:
    """-sum_{n in row_set} sum_k target[n, k] * log(pred[n, k] + 1e-12)."""
    rows = np.asarray(row_set, dtype=np.int64)
    n = pred_probs.shape[0]
    if rows.size and (rows.min() < 0 or rows.max() >= n):
        raise IndexError("row_set index out of range")
    return float(-(target_probs[rows] * np.log(pred_probs[rows] + LOG_FLOOR)).sum())


def soft_ce_with_logits(logits: np.ndarray, targets: np.ndarray, rows: np.ndarray):
    """Mean soft cross-entropy over ``rows`` and its gradient w.r.t. logits.

    The log-softmax form keeps the gradient exact (no log floor), which is
    what the finite-difference checks compare against.
    """
    count = max(len(rows), 1)
    logp = log_softmax_rows(logits[rows])
    t = targets[rows]
    loss = float(-(t * logp).sum() / count)
    grad = np.zeros_like(logits)
    grad[rows] = (np.exp(logp) * t.sum(axis=1, keepdims=True) - t) / count
    return loss, grad


def accuracy(logits_or_probs: np.ndarray, labels: np.ndarray, rows) -> float:
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size == 0:
        return float("nan")
    # np.argmax returns the first maximum: ties resolve to the lowest class
    pred = np.argmax(logits_or_probs[rows], axis=1)
    return float(np.mean(pred == labels[rows]))


# ---------------------------------------------------------------------------
# stochastic layers and init
# ---------------------------------------------------------------------------

def dropout_mask(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout mask: 0 with probability ``rate``, else 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1), got %r" % rate)
    if rate == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def glorot_init(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    if rows <= 0 or cols <= 0:
        raise ValueError("glorot_init needs positive dimensions")
    s = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-s, s, size=(rows, cols))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, l2: float = 0.0) -> tuple[dict[str, np.ndarray], AdamState]:
    """One Adam update, in place, with L2 folded into the gradient as 2*l2*p.

    The penalty applies to every parameter, biases included.
    """
    if params.keys() != grads.keys() or params.keys() != state.m.keys():
        raise ValueError("parameter / gradient / state keys differ")
    state.t += 1
    bc1 = 1.0 - ADAM_BETA1 ** state.t
    bc2 = 1.0 - ADAM_BETA2 ** state.t
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError("shape mismatch for %r: %r vs %r" % (k, g.shape, p.shape))
        if l2:
            g = g + 2.0 * l2 * p
        m = state.m[k]
        v = state.v[k]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
    return params, state


# ---------------------------------------------------------------------------
# gradient oracle
# ---------------------------------------------------------------------------

def finite_diff_grad(loss_fn, params, h: float = 1e-5):
    """Central differences of ``loss_fn`` w.r.t. every entry of ``params``.

    ``params`` is either an array or a dict of arrays; it is perturbed in
    place and restored. The return value mirrors its structure.
    """
    if isinstance(params, dict):
        return {k: _fd_single(lambda: loss_fn(params), p, h) for k, p in params.items()}
    params = np.asarray(params, dtype=np.float64)
    return _fd_single(lambda: loss_fn(params), params, h)


def _fd_single(f, p: np.ndarray, h: float) -> np.ndarray:
    grad = np.zeros_like(p)
    flat = p.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def max_relative_error(a, b, floor: float = 1e-8) -> float:
    if isinstance(a, dict):
        return max((max_relative_error(a[k], b[k], floor) for k in a), default=0.0)
    a = np.asarray(a)
    b = np.asarray(b)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))
