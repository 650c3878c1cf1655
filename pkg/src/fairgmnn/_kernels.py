"""Hot sparse kernels.

Every kernel has a numba implementation and a pure-numpy one with identical
semantics. The numba path is used unless ``FAIRGMNN_DISABLE_NUMBA`` is set to a
truthy value (or numba is not importable). Both paths are always importable
as ``numba_<name>`` / ``numpy_<name>`` so they can be compared directly.

All kernels work on raw CSR triples ``(indptr, indices, data)``.
"""

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

_DISABLE = os.environ.get("FAIRGMNN_DISABLE_NUMBA", "").strip().lower() not in ("", "0", "false", "no")
HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and not _DISABLE


# ---------------------------------------------------------------------------
# pure numpy
# ---------------------------------------------------------------------------

def _row_ids(indptr):
    return np.repeat(np.arange(indptr.shape[0] - 1), np.diff(indptr))


def numpy_spmm(indptr, indices, data, b):
    """out = A @ b for CSR A."""
    n_rows = indptr.shape[0] - 1
    out = np.zeros((n_rows, b.shape[1]))
    if data.shape[0] == 0:
        return out
    rows = _row_ids(indptr)
    contrib = data[:, None] * b[indices]
    # bincount sums sequentially in nnz order, same as the numba loop
    for c in range(b.shape[1]):
        out[:, c] = np.bincount(rows, weights=contrib[:, c], minlength=n_rows)
    return out


def numpy_spmm_t(indptr, indices, data, b, n_cols):
    """out = A.T @ b for CSR A with ``n_cols`` columns."""
    out = np.zeros((n_cols, b.shape[1]))
    if data.shape[0] == 0:
        return out
    rows = _row_ids(indptr)
    contrib = data[:, None] * b[rows]
    for c in range(b.shape[1]):
        out[:, c] = np.bincount(indices, weights=contrib[:, c], minlength=n_cols)
    return out


def numpy_sddmm(indptr, indices, a, b):
    """Per stored entry (i, j): dot(a[i], b[j])."""
    rows = _row_ids(indptr)
    return np.einsum("ij,ij->i", a[rows], b[indices])


def numpy_edge_gate(indptr, indices, left, right):
    """Per stored entry (i, j): tanh(left[i] + right[j])."""
    rows = _row_ids(indptr)
    return np.tanh(left[rows] + right[indices])


# ---------------------------------------------------------------------------
# numba
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @numba.njit(cache=True)
    def numba_spmm(indptr, indices, data, b):
        n_rows = indptr.shape[0] - 1
        d = b.shape[1]
        out = np.zeros((n_rows, d))
        for i in range(n_rows):
            for p in range(indptr[i], indptr[i + 1]):
                j = indices[p]
                v = data[p]
                for c in range(d):
                    out[i, c] += v * b[j, c]
        return out

    @numba.njit(cache=True)
    def numba_spmm_t(indptr, indices, data, b, n_cols):
        n_rows = indptr.shape[0] - 1
        d = b.shape[1]
        out = np.zeros((n_cols, d))
        for i in range(n_rows):
            for p in range(indptr[i], indptr[i + 1]):
                j = indices[p]
                v = data[p]
                for c in range(d):
                    out[j, c] += v * b[i, c]
        return out

    @numba.njit(cache=True)
    def numba_sddmm(indptr, indices, a, b):
        n_rows = indptr.shape[0] - 1
        d = a.shape[1]
        out = np.empty(indices.shape[0])
        for i in range(n_rows):
            for p in range(indptr[i], indptr[i + 1]):
                j = indices[p]
                s = 0.0
                for c in range(d):
                    s += a[i, c] * b[j, c]
                out[p] = s
        return out

    @numba.njit(cache=True)
    def numba_edge_gate(indptr, indices, left, right):
        n_rows = indptr.shape[0] - 1
        out = np.empty(indices.shape[0])
        for i in range(n_rows):
            for p in range(indptr[i], indptr[i + 1]):
                out[p] = np.tanh(left[i] + right[indices[p]])
        return out

else:  # pragma: no cover
    numba_spmm = numpy_spmm
    numba_spmm_t = numpy_spmm_t
    numba_sddmm = numpy_sddmm
    numba_edge_gate = numpy_edge_gate


def _pick(fast, slow):
    return fast if USE_NUMBA else slow


spmm = _pick(numba_spmm, numpy_spmm)
spmm_t = _pick(numba_spmm_t, numpy_spmm_t)
sddmm = _pick(numba_sddmm, numpy_sddmm)
edge_gate = _pick(numba_edge_gate, numpy_edge_gate)

BACKEND = "numba" if USE_NUMBA else "numpy"
