"""Time the numba kernels against the pure-numpy fallback.

    python3 benchmarks/bench_kernels.py [--nodes 2000] [--hidden 64] [--repeat 20]

Part 1 calls both kernel variants directly on the same CSR operands. Part 2
trains a GCN and a FAGCN for a fixed number of epochs in two subprocesses,
one per value of FAIRGMNN_DISABLE_NUMBA.
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from fairgmnn import _kernels as K
from fairgmnn.core_math import rng_stream
from fairgmnn.graph_data import generate_sbm

EPOCH_SCRIPT = r"""
import json, sys, time
from fairgmnn import BACKEND
from fairgmnn.core_math import rng_stream
from fairgmnn.graph_data import generate_sbm
from fairgmnn.models import HyperConfig, ModelInputs, init_params, train_model
import numpy as np
n, hidden, epochs = map(int, sys.argv[1:4])
g, d = generate_sbm([n // 5] * 5, 0.02, 0.002, 0.1, rng_stream(0))
inputs = ModelInputs.build(g.adj, d.features)
targets = np.eye(5)[d.labels]
train, valid = np.arange(0, n, 2), np.arange(1, n, 4)
out = {"backend": BACKEND}
for kind, eps in (("gcn", None), ("fagcn", 0.5)):
    cfg = HyperConfig(hidden, 0.5, 0.5, 0.01, 5e-4, eps)
    warm = init_params(kind, d.num_features, hidden, 5, rng_stream(1))
    train_model(kind, warm, inputs, train, valid, targets, cfg, rng_stream(2), max_epochs=2, patience=10)
    params = init_params(kind, d.num_features, hidden, 5, rng_stream(1))
    t = time.perf_counter()
    train_model(kind, params, inputs, train, valid, targets, cfg, rng_stream(2), max_epochs=epochs, patience=epochs)
    out[kind] = (time.perf_counter() - t) / epochs * 1e3
print(json.dumps(out))
"""


def bench(fn, args, repeat):
    fn(*args)  # compile / warm caches
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat)) * 1e3


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--nodes", type=int, default=2000)
    ap.add_argument("--hidden", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--epochs", type=int, default=50)
    args = ap.parse_args()

    rng = rng_stream(0)
    g, d = generate_sbm([args.nodes // 5] * 5, 0.02, 0.002, 0.1, rng)
    a = g.adj.with_data(rng.random(g.adj.nnz))
    x = d.features
    b = rng.normal(size=(a.shape[1], args.hidden))
    w = rng.normal(size=(x.shape[1], args.hidden))
    v1, v2 = rng.normal(size=a.shape[0]), rng.normal(size=a.shape[0])

    cases = [
        ("spmm adj @ H", "spmm", (a.indptr, a.indices, a.data, b)),
        ("spmm X @ W", "spmm", (x.indptr, x.indices, x.data, w)),
        ("spmm_t adj.T @ H", "spmm_t", (a.indptr, a.indices, a.data, b, a.shape[1])),
        ("sddmm", "sddmm", (a.indptr, a.indices, b, b)),
        ("edge_gate", "edge_gate", (a.indptr, a.indices, v1, v2)),
    ]
    print("nodes=%d edges=%d feature nnz=%d hidden=%d" % (g.num_nodes, g.num_edges, x.nnz, args.hidden))
    print("%-18s %10s %10s %8s" % ("kernel", "numba ms", "numpy ms", "speedup"))
    for label, name, call in cases:
        fast = bench(getattr(K, "numba_" + name), call, args.repeat)
        slow = bench(getattr(K, "numpy_" + name), call, args.repeat)
        assert np.allclose(getattr(K, "numba_" + name)(*call), getattr(K, "numpy_" + name)(*call))
        print("%-18s %10.3f %10.3f %7.2fx" % (label, fast, slow, slow / fast))

    print("\nper-epoch training time (ms), one subprocess per backend:")
    for flag in ("0", "1"):
        env = dict(os.environ, FAIRGMNN_DISABLE_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", EPOCH_SCRIPT, str(args.nodes), str(args.hidden),
                              str(args.epochs)], env=env, capture_output=True, text=True, check=True)
        r = json.loads(out.stdout)
        print("  %-6s gcn %8.2f   fagcn %8.2f" % (r["backend"], r["gcn"], r["fagcn"]))


if __name__ == "__main__":
    main()
