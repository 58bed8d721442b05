"""Propagation encoders over the interaction graph, the item feature graph and
the knowledge graph."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from slifmr import autodiff as ad
from slifmr.graphs import SparseGraph, build_interaction_adjacency, laplacian_normalize
from slifmr.kernels import CSRPattern


@dataclass
class EmbeddingTable:
    """Layer-0 parameters. Entity rows ``[0, num_items)`` are the items."""

    user_emb: ad.Node
    entity_emb: ad.Node
    relation_emb: ad.Node
    relation_W: ad.Node

    @property
    def dim(self):
        return self.user_emb.shape[1]

    def item_emb(self, num_items) -> ad.Node:
        return ad.take(self.entity_emb, np.arange(num_items))

    def parameters(self):
        return {
            "user_emb": self.user_emb,
            "entity_emb": self.entity_emb,
            "relation_emb": self.relation_emb,
            "relation_W": self.relation_W,
        }


# interaction graph -------------------------------------------------------------

def interaction_operator(train_pairs, num_users, num_items, item_graph: SparseGraph | None = None) -> SparseGraph:
    """Propagation matrix for the interaction encoder.

    User-item edges carry 1/sqrt(|N_u| |N_i|). When ``item_graph`` is given it
    fills the item-item block with its own (already normalised) weights.
    """
    a = laplacian_normalize(build_interaction_adjacency(train_pairs, num_users, num_items))
    if item_graph is None or item_graph.nnz == 0:
        return a
    n = num_users + num_items
    rows = np.concatenate([a.rows(), item_graph.rows() + num_users])
    cols = np.concatenate([a.col_indices, item_graph.col_indices + num_users])
    w = np.concatenate([a.weights, item_graph.weights])
    return SparseGraph.from_coo(n, n, rows, cols, w, symmetric=a.symmetric and item_graph.symmetric)


def _mean_plus_residual(layers, x0):
    stacked = layers[0]
    for layer in layers[1:]:
        stacked = stacked + layer
    return stacked * (1.0 / len(layers)) + x0


def propagate_interaction(adj: SparseGraph, user_emb, item_emb, num_layers: int):
    """(user, item) representations: mean of layers 1..L plus the layer-0 input."""
    if num_layers < 1:
        raise ValueError("num_layers must be >= 1")
    n_users = user_emb.shape[0]
    x0 = ad.concat([user_emb, item_emb], axis=0)
    h, layers = x0, []
    for _ in range(num_layers):
        h = ad.spmm(adj.pattern, adj.tape_weights(), h)
        layers.append(h)
    out = _mean_plus_residual(layers, x0)
    total = out.shape[0]
    return ad.take(out, np.arange(n_users)), ad.take(out, np.arange(n_users, total))


def propagate_feature_graph(graph: SparseGraph, item_emb, num_layers: int):
    """Item representations from the feature graph; self edges are ignored."""
    if num_layers < 1:
        raise ValueError("num_layers must be >= 1")
    rows = graph.rows()
    off_diag = rows != graph.col_indices
    weights = graph.tape_weights()
    if not off_diag.all():
        weights = ad.mul(weights, off_diag.astype(np.float32))
    h, layers = item_emb, []
    for _ in range(num_layers):
        h = ad.spmm(graph.pattern, weights, h)
        layers.append(h)
    return _mean_plus_residual(layers, item_emb)


# knowledge graph ---------------------------------------------------------------

@dataclass
class KGIndex:
    """Triples grouped by head (the N_h lists) for attention and aggregation."""

    num_entities: int
    pattern: CSRPattern  # rows = heads, columns = tails, in head order
    relations: np.ndarray  # relation id per stored triple
    heads: np.ndarray
    groups: list  # (relation, positions, entities, local head ids, local tail ids)

    @classmethod
    def build(cls, num_entities: int, triples) -> "KGIndex":
        t = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        order = np.lexsort((t[:, 1], t[:, 2], t[:, 0]))
        t = t[order]
        pattern, _ = CSRPattern.from_coo(num_entities, num_entities, t[:, 0], t[:, 2])
        groups = []
        for r in np.unique(t[:, 1]):
            pos = np.flatnonzero(t[:, 1] == r)
            ents, inv = np.unique(np.concatenate([t[pos, 0], t[pos, 2]]), return_inverse=True)
            groups.append((int(r), pos, ents, inv[: len(pos)], inv[len(pos):]))
        return cls(num_entities, pattern, t[:, 1].copy(), t[:, 0].copy(), groups)

    @property
    def num_triples(self):
        return self.pattern.nnz

    @property
    def tails(self):
        return self.pattern.col_indices


def with_inverse_relations(triples, num_relations):
    """Append (t, r + R, h) for every (h, r, t)."""
    t = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    inv = np.stack([t[:, 2], t[:, 1] + num_relations, t[:, 0]], axis=1)
    return np.concatenate([t, inv])


def kg_attention_scores(index: KGIndex, x, relation_emb, relation_W) -> ad.Node:
    """Softmax-normalised attention per triple (stored in head order).

    Raw score: (W_r x_t) . tanh(W_r x_h + e_r), normalised over each head's triples.
    """
    if index.num_triples == 0:
        return ad.Node(np.zeros(0, dtype=x.dtype))
    d = x.shape[1]
    pieces, positions = [], []
    for r, pos, ents, local_h, local_t in index.groups:
        w_r = ad.reshape(ad.take(relation_W, [r]), (d, d))
        proj = ad.matmul(ad.take(x, ents), ad.transpose(w_r))
        h = ad.take(proj, local_h)
        t = ad.take(proj, local_t)
        e_r = ad.take(relation_emb, [r])
        pieces.append(ad.sum(t * ad.tanh(h + e_r), axis=1))
        positions.append(pos)
    scores = ad.concat(pieces, axis=0)
    back = np.empty(index.num_triples, dtype=np.int64)
    back[np.concatenate(positions)] = np.arange(index.num_triples)
    scores = ad.take(scores, back)
    return ad.segment_softmax(index.pattern.row_offsets, scores)


def propagate_kg(index: KGIndex, entity_emb, relation_emb, relation_W, num_layers: int,
                 static_attention: bool = False):
    """Entity representations averaged over layers 0..L (layer 0 included)."""
    if num_layers < 1:
        raise ValueError("num_layers must be >= 1")
    h, layers = entity_emb, [entity_emb]
    alpha = None
    for _ in range(num_layers):
        if alpha is None or not static_attention:
            alpha = kg_attention_scores(index, h, relation_emb, relation_W)
        h = ad.spmm(index.pattern, alpha, h)
        layers.append(h)
    total = layers[0]
    for layer in layers[1:]:
        total = total + layer
    return total * (1.0 / len(layers))
