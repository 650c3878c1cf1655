"""Graph datasets: on-disk format, synthetic generator and summary statistics.

A dataset directory holds five UTF-8, whitespace-separated files::

    nodes.tsv      node_id                  (contiguous 0..N-1)
    features.tsv   node_id feature_id [value]
    edges.tsv      src dst
    labels.tsv     node_id label_id         (-1 = unlabeled)
    meta.json      {"num_nodes", "num_features", "num_classes", "name"}

Lines that are empty or start with ``#`` are ignored.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core_math import CSR, l1_row_normalize

MISSING_LABEL = -1
DATASET_FILES = ("nodes.tsv", "features.tsv", "edges.tsv", "labels.tsv", "meta.json")


class DatasetFormatError(ValueError):
    """Malformed or inconsistent dataset files."""


@dataclass(frozen=True, eq=False)
class SparseGraph:
    """Undirected simple graph stored as a symmetric binary CSR adjacency."""

    adj: CSR
    raw_edge_count: int | None = None

    @property
    def num_nodes(self) -> int:
        return self.adj.shape[0]

    @property
    def num_edges(self) -> int:
        return self.adj.nnz // 2

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.adj.indptr)

    def edge_list(self) -> np.ndarray:
        """(E, 2) array of undirected edges with src < dst."""
        r, c = self.adj.row_ids, self.adj.indices
        keep = r < c
        return np.stack([r[keep], c[keep]], axis=1)

    @classmethod
    def from_edges(cls, num_nodes: int, src, dst, raw_edge_count: int | None = None) -> "SparseGraph":
        """Symmetrize, drop self-loops and duplicates."""
        src = np.asarray(src, dtype=np.int64)
        dst = np.asarray(dst, dtype=np.int64)
        keep = src != dst
        src, dst = src[keep], dst[keep]
        rows = np.concatenate([src, dst])
        cols = np.concatenate([dst, src])
        adj = CSR.from_coo(rows, cols, 1.0, (num_nodes, num_nodes), sum_duplicates=False)
        return cls(adj, raw_edge_count)


@dataclass(frozen=True, eq=False)
class NodeData:
    """Binarized, L1-normalized features plus labels in [0, K) or -1."""

    features: CSR
    labels: np.ndarray
    num_classes: int
    name: str = "dataset"

    @property
    def labeled_index(self) -> np.ndarray:
        return np.flatnonzero(self.labels != MISSING_LABEL)

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @classmethod
    def from_binary(cls, features: CSR, labels, num_classes: int, name: str = "dataset") -> "NodeData":
        binary = features.with_data(np.ones(features.nnz))
        return cls(l1_row_normalize(binary), np.asarray(labels, dtype=np.int64), int(num_classes), name)


# ---------------------------------------------------------------------------
# loading / saving
# ---------------------------------------------------------------------------

def _read_int_rows(path: Path, min_cols: int, max_cols: int):
    if not path.exists():
        raise DatasetFormatError("missing dataset file: %s" % path)
    out = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            if not min_cols <= len(parts) <= max_cols:
                raise DatasetFormatError("%s:%d: expected %d-%d fields, got %d"
                                         % (path.name, lineno, min_cols, max_cols, len(parts)))
            try:
                ints = [int(p) for p in parts[:min_cols]]
                extra = [float(p) for p in parts[min_cols:]]
            except ValueError:
                raise DatasetFormatError("%s:%d: non-numeric field in %r" % (path.name, lineno, s)) from None
            out.append((lineno, ints, extra))
    return out


def load_dataset(path) -> tuple[SparseGraph, NodeData]:
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.exists():
        raise DatasetFormatError("missing dataset file: %s" % meta_path)
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        n = int(meta["num_nodes"])
        n_feat = int(meta["num_features"])
        k = int(meta["num_classes"])
    except (ValueError, KeyError, TypeError) as exc:
        raise DatasetFormatError("meta.json: %s" % exc) from None
    name = str(meta.get("name", path.name))

    nodes = [ints[0] for _, ints, _ in _read_int_rows(path / "nodes.tsv", 1, 1)]
    if sorted(nodes) != list(range(n)):
        raise DatasetFormatError("nodes.tsv: node ids must be exactly 0..%d" % (n - 1))

    def node_id(v, fname, lineno):
        if not 0 <= v < n:
            raise DatasetFormatError("%s:%d: node id %d out of range [0, %d)" % (fname, lineno, v, n))
        return v

    frows, fcols = [], []
    for lineno, (u, f), extra in _read_int_rows(path / "features.tsv", 2, 3):
        node_id(u, "features.tsv", lineno)
        if not 0 <= f < n_feat:
            raise DatasetFormatError("features.tsv:%d: feature id %d out of range [0, %d)" % (lineno, f, n_feat))
        if extra and extra[0] == 0:
            continue
        frows.append(u)
        fcols.append(f)
    features = CSR.from_coo(frows, fcols, 1.0, (n, n_feat), sum_duplicates=False)

    src, dst = [], []
    self_loops = 0
    edge_lines = _read_int_rows(path / "edges.tsv", 2, 2)
    for lineno, (u, v), _ in edge_lines:
        node_id(u, "edges.tsv", lineno)
        node_id(v, "edges.tsv", lineno)
        if u == v:
            self_loops += 1
            continue
        src.append(u)
        dst.append(v)
    if self_loops:
        warnings.warn("edges.tsv: dropped %d self-loop(s)" % self_loops, stacklevel=2)
    graph = SparseGraph.from_edges(n, src, dst, raw_edge_count=len(edge_lines))

    labels = np.full(n, MISSING_LABEL, dtype=np.int64)
    seen = np.zeros(n, dtype=bool)
    for lineno, (u, y), _ in _read_int_rows(path / "labels.tsv", 2, 2):
        node_id(u, "labels.tsv", lineno)
        if y != MISSING_LABEL and not 0 <= y < k:
            raise DatasetFormatError("labels.tsv:%d: label %d not in [0, %d)" % (lineno, y, k))
        if seen[u]:
            raise DatasetFormatError("labels.tsv:%d: duplicate label for node %d" % (lineno, u))
        seen[u] = True
        labels[u] = y

    return graph, NodeData.from_binary(features, labels, k, name)


def save_dataset(path, graph: SparseGraph, data: NodeData) -> None:
    """Write a dataset directory that :func:`load_dataset` reads back identically."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    n = graph.num_nodes
    (path / "nodes.tsv").write_text("".join("%d\n" % i for i in range(n)), encoding="utf-8")
    f = data.features
    (path / "features.tsv").write_text(
        "".join("%d %d\n" % (r, c) for r, c in zip(f.row_ids.tolist(), f.indices.tolist())), encoding="utf-8")
    (path / "edges.tsv").write_text(
        "".join("%d %d\n" % (u, v) for u, v in graph.edge_list().tolist()), encoding="utf-8")
    (path / "labels.tsv").write_text(
        "".join("%d %d\n" % (i, y) for i, y in enumerate(data.labels.tolist())), encoding="utf-8")
    meta = {"num_nodes": n, "num_features": data.num_features, "num_classes": data.num_classes,
            "name": data.name}
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------

def label_mixing_counts(graph: SparseGraph, data: NodeData) -> np.ndarray:
    """K x K counts of directed edge ends (i-labeled node -> j-labeled neighbor)."""
    k = data.num_classes
    a = data.labels[graph.adj.row_ids]
    b = data.labels[graph.adj.indices]
    keep = (a != MISSING_LABEL) & (b != MISSING_LABEL)
    return np.bincount(a[keep] * k + b[keep], minlength=k * k).reshape(k, k).astype(np.float64)


def label_assortativity(graph: SparseGraph, data: NodeData) -> float:
    """Newman's discrete assortativity coefficient of the label attribute."""
    counts = label_mixing_counts(graph, data)
    total = counts.sum()
    if total == 0:
        raise ValueError("label assortativity is undefined without labeled edges")
    e = counts / total
    ab = float(e.sum(axis=1) @ e.sum(axis=0))
    if np.isclose(ab, 1.0):
        warnings.warn("single effective class: assortativity defined as 0", stacklevel=2)
        return 0.0
    return float((np.trace(e) - ab) / (1.0 - ab))


def label_adjacency_matrix(graph: SparseGraph, data: NodeData) -> np.ndarray:
    """Row i: share of label-j nodes among the neighbors of label-i nodes."""
    k = data.num_classes
    counts = label_mixing_counts(graph, data)
    labels = data.labels
    deg = graph.degrees.astype(np.float64)
    ok = labels != MISSING_LABEL
    total_deg = np.bincount(labels[ok], weights=deg[ok], minlength=k)
    return np.divide(counts, total_deg[:, None], out=np.zeros((k, k)), where=total_deg[:, None] > 0)


@dataclass
class DatasetStats:
    name: str
    assortativity: float
    node_count: int
    edge_count: int
    category_count: int
    feature_count: int
    raw_edge_count: int | None = None
    label_adjacency: np.ndarray = field(default=None, repr=False)

    def to_json_dict(self) -> dict:
        d = asdict(self)
        d["label_adjacency"] = self.label_adjacency.tolist()
        return d

    def write(self, json_path, csv_path) -> None:
        Path(json_path).write_text(json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n",
                                   encoding="utf-8")
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            k = self.category_count
            w.writerow(["label"] + [str(j) for j in range(k)])
            for i, row in enumerate(self.label_adjacency):
                w.writerow([str(i)] + [repr(float(x)) for x in row])


def dataset_stats(graph: SparseGraph, data: NodeData) -> DatasetStats:
    return DatasetStats(
        name=data.name,
        assortativity=label_assortativity(graph, data),
        node_count=graph.num_nodes,
        edge_count=graph.num_edges,
        category_count=data.num_classes,
        feature_count=data.num_features,
        raw_edge_count=graph.raw_edge_count,
        label_adjacency=label_adjacency_matrix(graph, data),
    )


# ---------------------------------------------------------------------------
# synthetic benchmark
# ---------------------------------------------------------------------------

def generate_sbm(block_sizes, intra_p: float, inter_p: float, feature_signal: float,
                 rng: np.random.Generator, num_features: int | None = None,
                 p_noise: float = 0.05, name: str = "sbm") -> tuple[SparseGraph, NodeData]:
    """Stochastic block model with label-indicative binary features.

    Node ``n`` in block ``c`` carries label ``c``. The feature space is cut
    into ``K`` equal slices; features in slice ``c`` are on with probability
    ``p_noise + feature_signal * (1 - p_noise)`` for members of block ``c``,
    every other feature with probability ``p_noise``.
    """
    for p in (intra_p, inter_p, feature_signal, p_noise):
        if not 0.0 <= p <= 1.0:
            raise ValueError("probabilities must lie in [0, 1], got %r" % p)
    sizes = np.asarray(block_sizes, dtype=np.int64)
    k = sizes.size
    n = int(sizes.sum())
    labels = np.repeat(np.arange(k), sizes)

    # upper triangle, one Bernoulli draw per pair
    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(labels[iu] == labels[ju], intra_p, inter_p)
    hit = rng.random(iu.size) < prob
    graph = SparseGraph.from_edges(n, iu[hit], ju[hit])

    if num_features is None:
        num_features = 20 * k
    slice_of = np.arange(num_features) * k // num_features
    p_sig = p_noise + feature_signal * (1.0 - p_noise)
    fprob = np.where(slice_of[None, :] == labels[:, None], p_sig, p_noise)
    on = rng.random((n, num_features)) < fprob
    r, c = np.nonzero(on)
    features = CSR.from_coo(r, c, 1.0, (n, num_features))
    return graph, NodeData.from_binary(features, labels, k, name)
