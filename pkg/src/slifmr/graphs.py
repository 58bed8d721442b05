"""Sparse graph structures: interaction adjacency, modality kNN graphs,
normalisation, weighted modality combination and degree-sensitive pruning."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from slifmr import autodiff as ad
from slifmr.errors import ConfigError
from slifmr.kernels import CSRPattern

SIM_BLOCK_ROWS = 1024


@dataclass
class SparseGraph:
    """Weighted row-compressed graph.

    ``weight_node`` is set when the weights are tape values (so gradients can
    reach whatever produced them); ``weights`` always holds the plain values.
    """

    pattern: CSRPattern
    weights: np.ndarray
    symmetric: bool = False
    weight_node: ad.Node | None = None

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float32)
        if self.weights.shape != (self.pattern.nnz,):
            raise ValueError("one weight per stored entry required")

    @property
    def num_rows(self):
        return self.pattern.num_rows

    @property
    def num_cols(self):
        return self.pattern.num_cols

    @property
    def shape(self):
        return (self.num_rows, self.num_cols)

    @property
    def nnz(self):
        return self.pattern.nnz

    @property
    def row_offsets(self):
        return self.pattern.row_offsets

    @property
    def col_indices(self):
        return self.pattern.col_indices

    def rows(self):
        return self.pattern.row_ids()

    def tape_weights(self):
        return self.weight_node if self.weight_node is not None else self.weights

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=np.float64)
        np.add.at(out, (self.rows(), self.col_indices), self.weights)
        return out

    def edge_set(self):
        return set(zip(self.rows().tolist(), self.col_indices.tolist()))

    def row_counts(self):
        return np.diff(self.row_offsets)

    @classmethod
    def from_coo(cls, num_rows, num_cols, rows, cols, weights, symmetric=False):
        """Build from coordinates; duplicate coordinates are summed."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        weights = np.asarray(weights, dtype=np.float64)
        if len(rows):
            key = rows * num_cols + cols
            uniq, inv = np.unique(key, return_inverse=True)
            summed = np.bincount(inv, weights=weights, minlength=len(uniq))
            rows, cols, weights = uniq // num_cols, uniq % num_cols, summed
        pattern, order = CSRPattern.from_coo(num_rows, num_cols, rows, cols)
        return cls(pattern, weights[order], symmetric)

    @classmethod
    def from_dense(cls, dense, symmetric=False):
        dense = np.asarray(dense)
        r, c = np.nonzero(dense)
        return cls.from_coo(dense.shape[0], dense.shape[1], r, c, dense[r, c], symmetric)

    @classmethod
    def empty(cls, num_rows, num_cols, symmetric=False):
        return cls(CSRPattern(num_rows, num_cols, np.zeros(num_rows + 1, np.int64), np.zeros(0, np.int64)),
                   np.zeros(0), symmetric)

    def transpose(self) -> "SparseGraph":
        t, perm = self.pattern.transpose_plan()
        return SparseGraph(t, self.weights[perm], self.symmetric)

    def same_as(self, other: "SparseGraph") -> bool:
        return (
            self.shape == other.shape
            and np.array_equal(self.row_offsets, other.row_offsets)
            and np.array_equal(self.col_indices, other.col_indices)
            and np.array_equal(self.weights, other.weights)
        )


# interaction graph -----------------------------------------------------------

def build_interaction_adjacency(train_pairs, num_users: int, num_items: int) -> SparseGraph:
    """Block adjacency [[0, R], [R^T, 0]] over users then items, unit weights."""
    pairs = np.asarray(train_pairs, dtype=np.int64).reshape(-1, 2)
    u, i = pairs[:, 0], pairs[:, 1] + num_users
    n = num_users + num_items
    rows = np.concatenate([u, i])
    cols = np.concatenate([i, u])
    return SparseGraph.from_coo(n, n, rows, cols, np.ones(len(rows)), symmetric=True)


# modality similarity graphs -----------------------------------------------------

def modality_similarity(features, rows=None) -> np.ndarray:
    """Cosine similarities of feature rows (optionally only for ``rows``) to all rows.

    Zero feature vectors have similarity 0 to everything.
    """
    x = np.asarray(features, dtype=np.float64)
    norm = np.linalg.norm(x, axis=1, keepdims=True)
    xn = np.divide(x, norm, out=np.zeros_like(x), where=norm > 0)
    left = xn if rows is None else xn[rows]
    return left @ xn.T


def topk_sparsify(sim, k: int, row_offset: int = 0, exclude_self: bool = True) -> SparseGraph:
    """Keep each row's ``k`` largest entries with their values.

    Ties break towards the lower column index. Row ``r`` of ``sim`` is treated
    as global row ``row_offset + r`` when excluding the self entry.
    """
    if k < 1:
        raise ConfigError("top-K needs K >= 1")
    sim = np.asarray(sim, dtype=np.float64)
    n_rows, n_cols = sim.shape
    keyed = sim.copy()
    if exclude_self:
        r = np.arange(n_rows)
        c = r + row_offset
        ok = c < n_cols
        keyed[r[ok], c[ok]] = -np.inf
    keep = max(min(k, n_cols - (1 if exclude_self else 0)), 0)
    order = np.argsort(-keyed, axis=1, kind="stable")[:, :keep]
    cols = np.sort(order, axis=1)
    rows = np.repeat(np.arange(n_rows), cols.shape[1])
    cols = cols.reshape(-1)
    vals = sim[rows, cols]
    offsets = np.arange(n_rows + 1, dtype=np.int64) * keep
    return SparseGraph(CSRPattern(n_rows, n_cols, offsets, cols), vals)


def knn_graph(features, k: int, block_rows: int = SIM_BLOCK_ROWS, binarize: bool = False) -> SparseGraph:
    """Top-K cosine graph over feature rows, built in row blocks.

    Negative similarities are clamped to 0 so the graph can be normalised.
    """
    x = np.asarray(features)
    n = x.shape[0]
    offsets, cols, vals = [np.zeros(1, np.int64)], [], []
    for lo in range(0, n, block_rows):
        hi = min(lo + block_rows, n)
        block = topk_sparsify(modality_similarity(x, np.arange(lo, hi)), k, row_offset=lo)
        offsets.append(block.row_offsets[1:] + offsets[-1][-1])
        cols.append(block.col_indices)
        vals.append(block.weights)
    w = np.maximum(np.concatenate(vals), 0.0) if vals else np.zeros(0)
    if binarize:
        w = (w > 0).astype(np.float64)
    pattern = CSRPattern(n, n, np.concatenate(offsets), np.concatenate(cols) if cols else np.zeros(0, np.int64))
    return SparseGraph(pattern, w)


def laplacian_normalize(g: SparseGraph) -> SparseGraph:
    """D^-1/2 G D^-1/2 with D the row-sum degrees; zero-degree rows become 0."""
    if np.any(g.weights < 0):
        raise ValueError("laplacian_normalize needs non-negative weights")
    w = g.weights.astype(np.float64)
    deg = np.bincount(g.rows(), weights=w, minlength=g.num_rows)
    if g.num_cols != g.num_rows:
        raise ValueError("laplacian_normalize needs a square graph")
    inv = np.zeros_like(deg)
    np.divide(1.0, np.sqrt(deg), out=inv, where=deg > 0)
    return SparseGraph(g.pattern, w * inv[g.rows()] * inv[g.col_indices], g.symmetric)


def symmetrize_max(g: SparseGraph) -> SparseGraph:
    """Elementwise max(G, G^T)."""
    t = g.transpose()
    rows = np.concatenate([g.rows(), t.rows()])
    cols = np.concatenate([g.col_indices, t.col_indices])
    w = np.concatenate([g.weights, t.weights]).astype(np.float64)
    return _coo_max(g.num_rows, g.num_cols, rows, cols, w, symmetric=True)


def merge_max(a: SparseGraph, b: SparseGraph) -> SparseGraph:
    """Edge-set union keeping the larger weight on shared edges (constants only)."""
    if a.shape != b.shape:
        raise ValueError(f"merge_max: shapes {a.shape} and {b.shape}")
    rows = np.concatenate([a.rows(), b.rows()])
    cols = np.concatenate([a.col_indices, b.col_indices])
    w = np.concatenate([a.weights, b.weights]).astype(np.float64)
    return _coo_max(a.num_rows, a.num_cols, rows, cols, w, symmetric=a.symmetric and b.symmetric)


def _coo_max(n_rows, n_cols, rows, cols, w, symmetric):
    if len(rows) == 0:
        return SparseGraph.empty(n_rows, n_cols, symmetric)
    key = rows * n_cols + cols
    order = np.lexsort((-w, key))
    key, w = key[order], w[order]
    first = np.ones(len(key), bool)
    first[1:] = key[1:] != key[:-1]
    key, w = key[first], w[first]
    pattern, perm = CSRPattern.from_coo(n_rows, n_cols, key // n_cols, key % n_cols)
    return SparseGraph(pattern, w[perm], symmetric)


def union_pattern(graphs) -> tuple[CSRPattern, list[np.ndarray]]:
    """Union of several same-shaped patterns plus, per graph, the position of
    each of its entries inside the union."""
    shape = graphs[0].shape
    if any(g.shape != shape for g in graphs):
        raise ValueError("graphs must share a shape")
    keys = [g.rows() * shape[1] + g.col_indices for g in graphs]
    all_keys = np.unique(np.concatenate(keys)) if keys else np.zeros(0, np.int64)
    pattern = CSRPattern.from_coo(shape[0], shape[1], all_keys // shape[1], all_keys % shape[1])[0]
    positions = [np.searchsorted(all_keys, k) for k in keys]
    return pattern, positions


def scatter_to(positions, values, size) -> np.ndarray:
    out = np.zeros(size, dtype=np.float64)
    out[positions] = values
    return out


class ModalityWeights:
    """Learnable per-modality logits; realised weights are their softmax."""

    def __init__(self, num_modalities: int, logits=None):
        v = np.zeros(num_modalities, np.float32) if logits is None else np.asarray(logits, np.float32)
        self.logits = ad.parameter(v, name="modality_logits")

    def alphas(self) -> ad.Node:
        return ad.softmax(self.logits)


def combine_modality_graphs(graphs, alphas) -> SparseGraph:
    """S = sum_m alpha_m S^m over the union of edges.

    ``alphas`` may be a node (typically ``ModalityWeights.alphas()``) or plain
    numbers; the returned graph's ``weight_node`` carries the gradient path.
    """
    graphs = list(graphs)
    alphas = ad.constant(alphas)
    if alphas.shape != (len(graphs),):
        raise ValueError(f"expected {len(graphs)} modality weights, got shape {alphas.shape}")
    pattern, positions = union_pattern(graphs)
    total = None
    for m, (g, pos) in enumerate(zip(graphs, positions)):
        dense_w = scatter_to(pos, g.weights, pattern.nnz).astype(np.float32)
        term = ad.take(alphas, [m]) * ad.Node(dense_w.astype(alphas.dtype))
        total = term if total is None else total + term
    return SparseGraph(pattern, total.value, graphs[0].symmetric and all(g.symmetric for g in graphs),
                       weight_node=total)


# degree-sensitive pruning ------------------------------------------------------

def keep_probabilities(deg_a, deg_b) -> np.ndarray:
    """Per-edge p_e = 1 / (sqrt(d_a) sqrt(d_b))."""
    return 1.0 / (np.sqrt(np.asarray(deg_a, np.float64)) * np.sqrt(np.asarray(deg_b, np.float64)))


def inclusion_probabilities(weights, k: int) -> np.ndarray:
    """First-order inclusion probabilities proportional to ``weights`` summing to
    ``k``, capped at 1. Zero-weight edges only fill in when fewer than ``k``
    edges have positive weight."""
    w = np.asarray(weights, dtype=np.float64)
    pi = np.zeros_like(w)
    if k == 0:
        return pi
    positive = w > 0
    if positive.sum() <= k:
        pi[positive] = 1.0
        rest = ~positive
        if rest.any():
            pi[rest] = (k - positive.sum()) / rest.sum()
        return pi
    capped = np.zeros_like(positive)
    while True:
        budget = k - capped.sum()
        free = positive & ~capped
        pi[free] = budget * w[free] / w[free].sum()
        over = free & (pi >= 1.0)
        if not over.any():
            break
        capped |= over
        pi[capped] = 1.0
    return pi


def sample_edges_to_drop(weights, k: int, rng: np.random.Generator) -> np.ndarray:
    """Exactly ``k`` distinct edge ids, edge e included with probability
    ``inclusion_probabilities(weights, k)[e]`` (systematic sampling over a
    random edge order)."""
    n = len(weights)
    if k == 0 or n == 0:
        return np.zeros(0, np.int64)
    pi = inclusion_probabilities(weights, k)
    order = rng.permutation(n)
    cum = np.cumsum(pi[order])
    cum *= k / cum[-1]
    points = rng.random() + np.arange(k)
    picked = np.searchsorted(cum, points, side="right")
    return np.sort(order[np.minimum(picked, n - 1)])


def degree_sensitive_prune_edges(ends_a, ends_b, num_nodes: int, prune_ratio: float, seed) -> np.ndarray:
    """Boolean keep-mask over undirected edges (ends_a[e], ends_b[e]).

    Degrees come from the unpruned edge list. ``floor(ratio * |E|)`` edges are
    removed; removal favours edges whose keep probability p_e is small.
    """
    if not 0.0 <= prune_ratio < 1.0:
        raise ConfigError(f"prune_ratio must lie in [0, 1), got {prune_ratio}")
    ends_a = np.asarray(ends_a, np.int64)
    ends_b = np.asarray(ends_b, np.int64)
    n_edges = len(ends_a)
    keep = np.ones(n_edges, bool)
    k = math.floor(prune_ratio * n_edges)
    if k == 0:
        return keep
    deg = np.bincount(ends_a, minlength=num_nodes) + np.bincount(ends_b, minlength=num_nodes)
    p = keep_probabilities(deg[ends_a], deg[ends_b])
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    keep[sample_edges_to_drop(1.0 - p, k, rng)] = False
    return keep


def prune_interactions(train_pairs, num_users, num_items, prune_ratio, seed) -> np.ndarray:
    """Surviving train pairs after degree-sensitive pruning of the bipartite graph."""
    pairs = np.asarray(train_pairs, np.int64).reshape(-1, 2)
    keep = degree_sensitive_prune_edges(pairs[:, 0], pairs[:, 1] + num_users,
                                        num_users + num_items, prune_ratio, seed)
    return pairs[keep]


def prune_triples(triples, num_entities, prune_ratio, seed) -> np.ndarray:
    t = np.asarray(triples, np.int64).reshape(-1, 3)
    keep = degree_sensitive_prune_edges(t[:, 0], t[:, 2], num_entities, prune_ratio, seed)
    return t[keep]


def degree_sensitive_prune(g: SparseGraph, prune_ratio: float, seed) -> SparseGraph:
    """Prune a symmetric graph; both directions of a removed edge go."""
    rows, cols = g.rows(), g.col_indices
    upper = rows < cols
    if not g.symmetric:
        raise ValueError("degree_sensitive_prune expects a symmetric graph")
    a, b = rows[upper], cols[upper]
    w = g.weights[upper]
    keep = degree_sensitive_prune_edges(a, b, g.num_rows, prune_ratio, seed)
    a, b, w = a[keep], b[keep], w[keep]
    diag = rows == cols
    r = np.concatenate([a, b, rows[diag]])
    c = np.concatenate([b, a, cols[diag]])
    ww = np.concatenate([w, w, g.weights[diag]])
    return SparseGraph.from_coo(g.num_rows, g.num_cols, r, c, ww, symmetric=True)
