"""Self-loop graph enhancement: an item-item correlation graph built from the
previous epoch's unified item representations, injected back into the
interaction, feature and knowledge graphs."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from slifmr import autodiff as ad
from slifmr.errors import ConfigError
from slifmr.graphs import (
    SparseGraph,
    knn_graph,
    laplacian_normalize,
    merge_max,
    symmetrize_max,
    union_pattern,
)

MERGE_MODES = ("replace", "accumulate")


def build_correlation_graph(x, top_n: int) -> SparseGraph:
    """Cosine top-N graph over unified item representations, symmetrised by max
    and Laplacian-normalised. ``x`` is detached first."""
    if top_n < 1:
        raise ConfigError("top_n must be >= 1")
    values = x.value if isinstance(x, ad.Node) else np.asarray(x)
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise ValueError("item representations must be finite")
    g = symmetrize_max(knn_graph(values, top_n))
    return laplacian_normalize(g)


def inject_item_block(adj: SparseGraph, g: SparseGraph, num_users: int) -> SparseGraph:
    """Block adjacency with its item-item block replaced by ``g``."""
    rows, cols = adj.rows(), adj.col_indices
    keep = ~((rows >= num_users) & (cols >= num_users))
    n = adj.num_rows
    r = np.concatenate([rows[keep], g.rows() + num_users])
    c = np.concatenate([cols[keep], g.col_indices + num_users])
    w = np.concatenate([adj.weights[keep], g.weights])
    return SparseGraph.from_coo(n, n, r, c, w, symmetric=adj.symmetric and g.symmetric)


def merge_feature_graph(s: SparseGraph, g: SparseGraph) -> SparseGraph:
    """max(S, G) over the edge union. Gradients still reach S's weight node."""
    if g.nnz == 0:
        return s
    pattern, (pos_s, pos_g) = union_pattern([s, g])
    # gather S's weights into union order, with a trailing zero for missing entries
    src = np.full(pattern.nnz, s.nnz, dtype=np.int64)
    src[pos_s] = np.arange(s.nnz)
    sw = ad.constant(s.tape_weights())
    padded = ad.concat([ad.reshape(sw, (-1, 1)), ad.constant(np.zeros((1, 1), sw.dtype))], axis=0)
    s_union = ad.reshape(ad.take(padded, src), (-1,))
    g_union = np.zeros(pattern.nnz, dtype=sw.dtype)
    g_union[pos_g] = g.weights
    merged = ad.maximum(s_union, g_union)
    return SparseGraph(pattern, merged.value, s.symmetric and g.symmetric, weight_node=merged)


def correlation_triples(g: SparseGraph, relation: int) -> np.ndarray:
    """(i, relation, j) for each nonzero entry of ``g``."""
    nz = g.weights != 0
    return np.stack([g.rows()[nz], np.full(nz.sum(), relation), g.col_indices[nz]], axis=1).astype(np.int64)


def enhance_graphs(g: SparseGraph, adj: SparseGraph, s: SparseGraph, triples, num_users: int,
                   corr_relation: int):
    """Inject ``g`` into the block adjacency, the feature graph and the KG triples.

    Callers pass the base (un-enhanced) graphs for replacement semantics, or the
    previous round's outputs for accumulation.
    """
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    adj_n = inject_item_block(adj, g, num_users)
    s_n = merge_feature_graph(s, g)
    extra = correlation_triples(g, corr_relation)
    kg_n = np.unique(np.concatenate([triples, extra]), axis=0) if len(extra) else triples
    return adj_n, s_n, kg_n


def schedule_update(interval: int, epoch: int, warmup: int = 1) -> bool:
    """Whether to rebuild the correlation graph before ``epoch``."""
    if interval < 1:
        raise ConfigError("sge_interval must be >= 1")
    return epoch >= warmup and epoch % interval == 0


@dataclass
class EnhancementState:
    interval: int = 1
    top_n: int = 10
    merge: str = "replace"
    warmup: int = 1
    graph: SparseGraph | None = None
    epoch: int = 0
    rebuilds: list = field(default_factory=list)

    def __post_init__(self):
        if self.merge not in MERGE_MODES:
            raise ConfigError(f"sge_merge must be one of {MERGE_MODES}")
        if self.interval < 1:
            raise ConfigError("sge_interval must be >= 1")
        if self.top_n < 1:
            raise ConfigError("sge_topn must be >= 1")

    def due(self, epoch: int) -> bool:
        return schedule_update(self.interval, epoch, self.warmup)

    def advance(self, epoch: int, item_reps=None) -> bool:
        """Move to ``epoch``; rebuild from ``item_reps`` when scheduled."""
        if epoch < self.epoch:
            raise ValueError("epoch counter must not go backwards")
        self.epoch = epoch
        if item_reps is None or not self.due(epoch):
            return False
        new = build_correlation_graph(item_reps, self.top_n)
        if self.merge == "accumulate" and self.graph is not None:
            new = laplacian_normalize(merge_max(self.graph, new))
        self.graph = new
        self.rebuilds.append(epoch)
        return True

