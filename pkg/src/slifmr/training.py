"""Initialisation, optimisation, the epoch loop and full-ranking evaluation."""

from __future__ import annotations

import json
import math
import os
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from slifmr import autodiff as ad
from slifmr import datasets as D
from slifmr import encoders as E
from slifmr import enhancement as H
from slifmr import fusion as F
from slifmr import graphs as G
from slifmr import objectives as O
from slifmr.config import TrainConfig
from slifmr.errors import ConfigError, TrainingError, ValidationError


def derive_seed(master: int, tag: str) -> int:
    """Independent stream per purpose, stable across runs."""
    ss = np.random.SeedSequence([int(master), zlib.crc32(tag.encode())])
    return int(ss.generate_state(1)[0])


# data bundle ---------------------------------------------------------------

@dataclass
class DataBundle:
    ds: D.InteractionDataset
    kg: D.KnowledgeGraph
    features: list  # ModalityFeatures per modality

    def checksums(self):
        out = {"interactions": self.ds.checksum(), "kg": self.kg.checksum()}
        out.update({f.modality: f.checksum() for f in self.features})
        return out


def _find(data_dir, stem, required=True):
    for ext in (".txt", ".bin"):
        path = os.path.join(data_dir, stem + ext)
        if os.path.exists(path):
            return path
    if required:
        raise ConfigError(f"data_dir: missing {stem}.txt (or .bin) in {data_dir!r}")
    return None


DATA_KEYS = ("data_dir", "synthetic", "synth_users", "synth_items", "synth_clusters",
             "synth_interactions", "synth_seed", "kcore", "split_valid", "split_test")


def load_bundle(cfg: TrainConfig) -> DataBundle:
    """Synthetic data or files from ``data_dir``, filtered and split per ``cfg``."""
    ratios = (1.0 - cfg.split_valid - cfg.split_test, cfg.split_valid, cfg.split_test)
    if cfg.synthetic:
        spec = D.SyntheticSpec(num_users=cfg.synth_users, num_items=cfg.synth_items,
                               num_clusters=cfg.synth_clusters, num_interactions=cfg.synth_interactions)
        ds, kg, vis, txt = D.gen_synthetic(spec, cfg.synth_seed)
        feats = [vis, txt]
    else:
        if not os.path.isdir(cfg.data_dir):
            raise ConfigError(f"data_dir: {cfg.data_dir!r} is not a directory")
        ds = D.load_interactions(_find(cfg.data_dir, "interactions"))
        kg_path = _find(cfg.data_dir, "kg", required=False)
        kg = D.load_kg(kg_path) if kg_path else D.KnowledgeGraph(ds.num_items, 1, np.zeros((0, 3)))
        feats = []
        for m in D.MODALITIES:
            path = _find(cfg.data_dir, m, required=False)
            if path:
                feats.append(D.load_features(path, m))
        if kg.num_entities < ds.num_items:
            raise ValidationError("the KG entity set must contain every item id")
    if cfg.kcore > 0:
        before = ds.num_items
        ds = D.kcore_filter(ds, cfg.kcore)
        kg = D.align_kg(kg, before, ds.item_index)
        feats = [D.ModalityFeatures(f.modality, f.matrix[ds.item_index], f.present[ds.item_index])
                 for f in feats]
    ds = D.split_dataset(ds, ratios, seed=cfg.synth_seed)
    return DataBundle(ds, kg, feats)


def add_noise(bundle: DataBundle, kind: str, ratio: float, seed: int) -> DataBundle:
    if kind == "interaction":
        return DataBundle(D.inject_noise(bundle.ds, kind, ratio, seed), bundle.kg, bundle.features)
    if kind == "kg_tail":
        return DataBundle(bundle.ds, D.inject_noise(bundle.kg, kind, ratio, seed), bundle.features)
    if kind == "modality_absence":
        feats = [D.inject_noise(f, kind, ratio, derive_seed(seed, f.modality)) for f in bundle.features]
        return DataBundle(bundle.ds, bundle.kg, feats)
    raise ConfigError(f"unknown noise kind {kind!r}; expected one of {D.NOISE_KINDS}")


# parameters ----------------------------------------------------------------

def xavier(rng, shape):
    """Uniform Xavier; for stacked square matrices the bound uses one matrix."""
    fan_in, fan_out = shape[-2], shape[-1]
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, shape).astype(ad.DTYPE)


@dataclass
class Params:
    table: E.EmbeddingTable
    fusion: F.FusionParams
    modality: G.ModalityWeights

    def named(self) -> dict:
        out = dict(self.table.parameters())
        out.update(self.fusion.parameters())
        out["modality_logits"] = self.modality.logits
        return out


def init_params(num_users, num_entities, num_relations, d, seed, num_modalities=2, with_projection=False) -> Params:
    rng = np.random.default_rng(seed)
    table = E.EmbeddingTable(
        user_emb=ad.parameter(xavier(rng, (num_users, d)), "user_emb"),
        entity_emb=ad.parameter(xavier(rng, (num_entities, d)), "entity_emb"),
        relation_emb=ad.parameter(xavier(rng, (num_relations, d)), "relation_emb"),
        relation_W=ad.parameter(xavier(rng, (num_relations, d, d)), "relation_W"),
    )
    lim = math.sqrt(6.0 / (3 * d + 3))
    fusion = F.FusionParams(ad.parameter(rng.uniform(-lim, lim, (3 * d, 3)).astype(ad.DTYPE), "fusion_W"),
                            ad.parameter(np.zeros(3, ad.DTYPE), "fusion_b"))
    if with_projection:
        fusion.proj = ad.parameter(xavier(rng, (3 * d, d)), "fusion_proj")
    return Params(table, fusion, G.ModalityWeights(max(num_modalities, 1)))


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict):
        """Update every parameter that received a gradient, then clear gradients."""
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m.setdefault(name, np.zeros_like(p.value))
            v = self.v.setdefault(name, np.zeros_like(p.value))
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.value = (p.value - update).astype(p.value.dtype)
            p.grad = None


# negative sampling -----------------------------------------------------------

class NegativeSampler:
    """Uniform negatives over items the user has not interacted with in train."""

    def __init__(self, train_pairs, num_users, num_items):
        pairs = np.asarray(train_pairs, np.int64).reshape(-1, 2)
        self.num_items = num_items
        self.keys = np.unique(pairs[:, 0] * num_items + pairs[:, 1])
        self.counts = np.bincount(pairs[:, 0], minlength=num_users)

    def observed(self, users, items):
        keys = users * self.num_items + items
        pos = np.searchsorted(self.keys, keys)
        pos = np.minimum(pos, len(self.keys) - 1)
        return self.keys[pos] == keys if len(self.keys) else np.zeros(len(keys), bool)

    def sample(self, users, rng: np.random.Generator) -> np.ndarray:
        users = np.asarray(users, np.int64)
        full = self.counts[users] >= self.num_items
        if full.any():
            u = int(users[np.argmax(full)])
            raise ValidationError(f"user {u} has interacted with every item; no negative exists")
        out = rng.integers(self.num_items, size=len(users))
        bad = self.observed(users, out)
        while bad.any():
            out[bad] = rng.integers(self.num_items, size=int(bad.sum()))
            bad[bad] = self.observed(users[bad], out[bad])
        return out


def sample_negatives(train_pairs, num_users, num_items, users, seed) -> np.ndarray:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return NegativeSampler(train_pairs, num_users, num_items).sample(users, rng)


# model -----------------------------------------------------------------------

@dataclass
class EpochGraphs:
    adj: G.SparseGraph
    kg_index: E.KGIndex | None


@dataclass
class Forward:
    users: ad.Node
    x_b: ad.Node
    x_m: ad.Node | None
    x_k: ad.Node | None
    items: ad.Node
    alpha: ad.Node | None


SGE_KEY = "sge_graph"


class Model:
    def __init__(self, cfg: TrainConfig, bundle: DataBundle):
        self.cfg = cfg
        self.bundle = bundle
        ds = bundle.ds
        self.num_users, self.num_items = ds.num_users, ds.num_items
        self.use_kg = cfg.kg_enabled and len(bundle.kg.triples) > 0
        self.use_mm = cfg.mm_enabled and len(bundle.features) > 0
        kg = bundle.kg
        self.base_triples = kg.triples
        n_rel = kg.num_relations * (2 if cfg.kg_inverse_edges else 1)
        self.corr_relation = n_rel
        self.num_entities = max(kg.num_entities, ds.num_items)
        self.params = init_params(ds.num_users, self.num_entities, n_rel + 1, cfg.d,
                                  derive_seed(cfg.seed, "init"), len(bundle.features),
                                  with_projection=cfg.fusion_mode == "concat")
        self.modality_graphs = [
            G.laplacian_normalize(G.knn_graph(f.matrix, cfg.topk_per_modality)) for f in bundle.features
        ]
        self.enhancement = H.EnhancementState(cfg.sge_interval, cfg.sge_topn, cfg.sge_merge)
        self.loss_cfg = O.LossConfig(cfg.tau, cfg.t_uniform, cfg.beta, cfg.gamma, cfg.eta,
                                     cfg.intra_form, cfg.intra_map, cfg.cl_enabled)

    # graphs
    def correlation_graph(self):
        if not self.cfg.sge_enabled or self.enhancement.graph is None:
            return None
        return self.enhancement.graph

    def epoch_graphs(self, prune_seed=None) -> EpochGraphs:
        """Graphs for one epoch. ``prune_seed=None`` gives the unpruned graphs."""
        cfg = self.cfg
        pairs = self.bundle.ds.train
        triples = self.base_triples
        if prune_seed is not None and cfg.prune_ratio > 0:
            pairs = G.prune_interactions(pairs, self.num_users, self.num_items, cfg.prune_ratio,
                                         derive_seed(prune_seed, "interactions"))
            if self.use_kg and len(triples):
                triples = G.prune_triples(triples, self.num_entities, cfg.prune_ratio,
                                          derive_seed(prune_seed, "kg"))
        corr = self.correlation_graph()
        adj = E.interaction_operator(pairs, self.num_users, self.num_items, item_graph=corr)
        index = None
        if self.use_kg:
            if cfg.kg_inverse_edges:
                triples = E.with_inverse_relations(triples, self.bundle.kg.num_relations)
            if corr is not None:
                triples = np.concatenate([triples, H.correlation_triples(corr, self.corr_relation)])
            index = E.KGIndex.build(self.num_entities, triples)
        return EpochGraphs(adj, index)

    def feature_graph(self):
        s = G.combine_modality_graphs(self.modality_graphs, self.params.modality.alphas())
        corr = self.correlation_graph()
        return H.merge_feature_graph(s, corr) if corr is not None else s

    def forward(self, graphs: EpochGraphs) -> Forward:
        cfg, t = self.cfg, self.params.table
        item0 = t.item_emb(self.num_items)
        users, x_b = E.propagate_interaction(graphs.adj, t.user_emb, item0, cfg.L_b)
        x_m = E.propagate_feature_graph(self.feature_graph(), item0, cfg.L_m) if self.use_mm else None
        x_k = None
        if self.use_kg:
            ent = E.propagate_kg(graphs.kg_index, t.entity_emb, t.relation_emb, t.relation_W, cfg.L_k,
                                 static_attention=cfg.static_attention)
            x_k = ad.take(ent, np.arange(self.num_items))
        items, alpha = F.aggregate(cfg.fusion_mode, x_b, x_m, x_k, self.params.fusion)
        return Forward(users, x_b, x_m, x_k, items, alpha)

    def representations(self):
        """(user, unified item) values from a no-tape pass on the unpruned graphs."""
        with ad.no_grad():
            out = self.forward(self.epoch_graphs())
        return out.users.value, out.items.value

    # losses
    def batch_loss(self, fw: Forward, users, pos, neg):
        cfg = self.loss_cfg
        u = ad.take(fw.users, users)
        y_pos = ad.sum(u * ad.take(fw.items, pos), axis=1)
        y_neg = ad.sum(u * ad.take(fw.items, neg), axis=1)
        parts = {"bpr": O.bpr_loss(y_pos, y_neg)}
        batch_items = np.unique(pos)
        branches = [fw.x_m, fw.x_k]
        if cfg.cl_enabled and len(batch_items) >= 2 and any(b is not None for b in branches):
            if cfg.beta:
                parts["inter"] = O.inter_modal_loss(fw.x_b, fw.x_k, fw.x_m, fw.items, batch_items, cfg)
            if cfg.gamma:
                parts["intra"] = O.intra_modal_loss(fw.x_b, fw.x_k, fw.x_m, batch_items, cfg)
        t = self.params.table
        reg = [ad.take(t.user_emb, np.unique(users)), ad.take(t.entity_emb, np.unique(np.r_[pos, neg])),
               t.relation_emb, t.relation_W, self.params.fusion.W, self.params.fusion.b,
               self.params.modality.logits]
        if self.params.fusion.proj is not None:
            reg.append(self.params.fusion.proj)
        return O.total_loss(parts, reg, cfg), parts

    def snapshot(self) -> dict:
        """Parameter values plus the current correlation graph as (row, col, weight) rows."""
        snap = {k: v.value.copy() for k, v in self.params.named().items()}
        g = self.enhancement.graph
        if g is not None:
            snap[SGE_KEY] = np.stack([g.rows(), g.col_indices, g.weights], axis=1).astype(np.float64)
        return snap

    def restore(self, snap: dict):
        for k, p in self.params.named().items():
            if k in snap:
                p.value = np.asarray(snap[k], dtype=p.value.dtype).reshape(p.value.shape).copy()
        coo = snap.get(SGE_KEY)
        if coo is None:
            self.enhancement.graph = None
        else:
            coo = np.asarray(coo).reshape(-1, 3)
            n = self.num_items
            self.enhancement.graph = G.SparseGraph.from_coo(
                n, n, coo[:, 0].astype(np.int64), coo[:, 1].astype(np.int64), coo[:, 2], symmetric=True)


# evaluation ------------------------------------------------------------------

METRICS = ("recall", "ndcg", "precision")


def rank_metrics(scores, exclude, relevant, k_list):
    """Recall/NDCG/Precision@K averaged over users with a nonempty relevant set.

    ``exclude[u]`` items are removed from the ranking; ties are broken by
    ascending item id.
    """
    scores = np.array(scores, dtype=np.float64, copy=True)
    n_users, n_items = scores.shape
    masked = np.zeros((n_users, n_items), bool)
    rel = np.zeros((n_users, n_items), bool)
    for u in range(n_users):
        masked[u, exclude[u]] = True
        rel[u, relevant[u]] = True
    scores[masked] = -np.inf
    kmax = min(max(k_list), n_items)
    top = np.argsort(-scores, axis=1, kind="stable")[:, :kmax]
    rows = np.arange(n_users)[:, None]
    alive = ~masked[rows, top]  # users with few candidates rank masked items last
    hits = (rel[rows, top] & alive).astype(np.float64)
    n_rel = rel.sum(axis=1)
    users = n_rel > 0
    if not users.any():
        return {f"{m}@{k}": 0.0 for k in k_list for m in METRICS}
    discounts = 1.0 / np.log2(np.arange(2, kmax + 2))
    ideal = np.cumsum(discounts)
    out = {}
    for k in k_list:
        kk = min(k, kmax)
        n_hit = hits[:, :kk].sum(axis=1)
        idcg = ideal[np.minimum(n_rel, kk) - 1]
        dcg = hits[:, :kk] @ discounts[:kk]
        out[f"recall@{k}"] = float(np.mean(n_hit[users] / n_rel[users]))
        out[f"ndcg@{k}"] = float(np.mean(dcg[users] / idcg[users]))
        out[f"precision@{k}"] = float(np.mean(n_hit[users] / k))
    return out


def evaluate(model: Model, split: str = "test", k_list=None) -> dict:
    k_list = tuple(k_list or model.cfg.K_list)
    ds = model.bundle.ds
    if split == "test":
        masked = ("train", "valid")
    elif split == "valid":
        masked = ("train",)
    else:
        raise ConfigError(f"split must be 'valid' or 'test', got {split!r}")
    users, items = model.representations()
    scores = users.astype(np.float64) @ items.astype(np.float64).T
    return rank_metrics(scores, ds.user_items(masked), ds.user_items(split), k_list)


def random_ranker_recall(ds: D.InteractionDataset, k: int, split="test") -> float:
    """Expected Recall@K of a uniformly random full ranking."""
    masked = ds.user_items(("train", "valid") if split == "test" else ("train",))
    rel = ds.user_items(split)
    vals = [min(k, ds.num_items - len(m)) / (ds.num_items - len(m))
            for m, r in zip(masked, rel) if len(r)]
    return float(np.mean(vals)) if vals else 0.0


def early_stop(history, patience: int) -> bool:
    """True once the last ``patience`` evaluations failed to beat the best before them."""
    if patience < 1:
        raise ConfigError("patience must be >= 1")
    best, since = -np.inf, 0
    for value in history:
        if value > best:
            best, since = value, 0
        else:
            since += 1
    return since >= patience


# training loop ---------------------------------------------------------------

@dataclass
class RunResult:
    records: list
    best_epoch: int
    best_valid: dict
    test: dict
    model: Model

    def metric_lines(self):
        return [json.dumps(r, sort_keys=True) for r in self.records if r["type"] in ("epoch", "best")]


def _finite_parts(parts):
    return {k: float(v.value) for k, v in parts.items()}


def train_epoch(model: Model, optimizer: Adam, epoch: int, batch_rng, neg_rng, sampler: NegativeSampler):
    """One pass over the shuffled train pairs. Returns (mean loss, mean parts)."""
    cfg = model.cfg
    graphs = model.epoch_graphs(prune_seed=derive_seed(cfg.seed, f"prune-{epoch}"))
    pairs = model.bundle.ds.train
    order = batch_rng.permutation(len(pairs))
    params = model.params.named()
    total, part_sums, n_batches = 0.0, {}, 0
    for b, lo in enumerate(range(0, len(order), cfg.batch_size)):
        idx = order[lo:lo + cfg.batch_size]
        users, pos = pairs[idx, 0], pairs[idx, 1]
        neg = sampler.sample(users, neg_rng)
        parts = {}
        try:
            fw = model.forward(graphs)
            loss, parts = model.batch_loss(fw, users, pos, neg)
            if not np.isfinite(loss.value):
                raise ad.NumericError("total_loss")
            loss.backward()
        except ad.NumericError as exc:
            raise TrainingError(f"epoch {epoch} batch {b}: {exc}; terms={_finite_parts(parts)}") from exc
        optimizer.step(params)
        total += float(loss.value)
        for k, v in parts.items():
            part_sums[k] = part_sums.get(k, 0.0) + float(v.value)
        n_batches += 1
    n = max(n_batches, 1)
    return total / n, {k: v / n for k, v in part_sums.items()}


def _metric_key(cfg: TrainConfig):
    k = 20 if 20 in cfg.K_list else cfg.K_list[0]
    return f"recall@{k}"


def train(cfg: TrainConfig, bundle: DataBundle | None = None, run_dir=None, log=None) -> RunResult:
    """Full run: train with validation-based model selection, then test the best snapshot."""
    bundle = bundle if bundle is not None else load_bundle(cfg)
    model = Model(cfg, bundle)
    optimizer = Adam(lr=cfg.lr)
    sampler = NegativeSampler(bundle.ds.train, model.num_users, model.num_items)
    batch_rng = np.random.default_rng(derive_seed(cfg.seed, "batches"))
    neg_rng = np.random.default_rng(derive_seed(cfg.seed, "negatives"))
    seeds = {tag: derive_seed(cfg.seed, tag) for tag in ("init", "batches", "negatives")}
    records = [{"type": "config", "config": cfg.to_dict(), "seeds": seeds,
                "checksums": bundle.checksums()}]
    timings = []
    key = _metric_key(cfg)
    history, best_epoch, best_valid, best_snap = [], -1, None, model.snapshot()

    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        loss, parts = train_epoch(model, optimizer, epoch, batch_rng, neg_rng, sampler)
        rebuilt = False
        if cfg.sge_enabled and model.enhancement.due(epoch + 1):
            _, items = model.representations()
            rebuilt = model.enhancement.advance(epoch + 1, items)
        rec = {"type": "epoch", "epoch": epoch, "loss": loss, "parts": parts, "sge_rebuilt": rebuilt}
        if (epoch + 1) % cfg.eval_interval == 0 or epoch == cfg.epochs - 1:
            valid = evaluate(model, "valid")
            rec["valid"] = valid
            history.append(valid[key])
            if best_valid is None or valid[key] > best_valid[key]:
                best_epoch, best_valid, best_snap = epoch, valid, model.snapshot()
        records.append(rec)
        timings.append({"type": "timing", "epoch": epoch, "seconds": time.perf_counter() - start})
        if log:
            log(rec)
        if history and early_stop(history, cfg.patience):
            break

    final = model.snapshot()
    model.restore(best_snap)
    test = evaluate(model, "test")
    records.append({"type": "best", "epoch": best_epoch, "valid": best_valid, "test": test})
    result = RunResult(records + timings, best_epoch, best_valid, test, model)
    if run_dir is not None:
        save_run(run_dir, result, best_snap)
    model.final_snapshot = final
    return result


# run directory -----------------------------------------------------------------

MANIFEST = "manifest.jsonl"


def save_run(run_dir, result: RunResult, snapshot: dict):
    os.makedirs(os.path.join(run_dir, "best"), exist_ok=True)
    shapes = {}
    for name, value in snapshot.items():
        D.write_tensor(os.path.join(run_dir, "best", f"{name}.bin"), value)
        shapes[name] = list(value.shape)
    with open(os.path.join(run_dir, MANIFEST), "w", encoding="utf-8") as fh:
        for rec in result.records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        fh.write(json.dumps({"type": "snapshot", "dir": "best", "shapes": shapes}, sort_keys=True) + "\n")


def read_manifest(run_dir) -> list:
    path = os.path.join(run_dir, MANIFEST)
    if not os.path.exists(path):
        raise ConfigError(f"no {MANIFEST} in {run_dir!r}")
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_run(run_dir):
    """Rebuild the model of a saved run with its best parameters."""
    records = read_manifest(run_dir)
    cfg_rec = next(r for r in records if r["type"] == "config")
    snap_rec = next((r for r in records if r["type"] == "snapshot"), None)
    if snap_rec is None:
        raise ConfigError(f"{run_dir}: manifest has no snapshot record")
    cfg = TrainConfig(**cfg_rec["config"])
    model = Model(cfg, load_bundle(cfg))
    snap = {}
    for name, shape in snap_rec["shapes"].items():
        path = os.path.join(run_dir, snap_rec["dir"], f"{name}.bin")
        if not os.path.exists(path):
            raise ConfigError(f"missing snapshot file {path}")
        snap[name] = D.read_tensor(path).reshape(shape)
    model.restore(snap)
    return model, records
