"""Interaction, knowledge-graph and modality-feature data.

File formats
------------
interactions.tsv
    ``user_id<TAB>item_id`` per line, 0-based ids, ``#`` lines are comments.
kg.tsv
    header ``entities=<n> relations=<m>`` then ``head<TAB>relation<TAB>tail``.
features.txt
    header ``num_items dim`` then one whitespace-separated row per item. An
    all-zero row marks a missing feature.
binary tensors
    ``b"SLIF"``, uint32 rows, uint32 cols (little endian), then row-major
    float32 values. Used for feature twins and saved parameters.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from slifmr.errors import ConfigError, EmptyDatasetError, FormatError, ParseError, ValidationError
from slifmr.kernels import CSRPattern

MAGIC = b"SLIF"
MODALITIES = ("visual", "textual")
NOISE_KINDS = ("interaction", "kg_tail", "modality_absence")

_EMPTY_PAIRS = np.zeros((0, 2), dtype=np.int64)


def _pairs(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.int64)
    return a.reshape(-1, 2) if a.size else _EMPTY_PAIRS.copy()


@dataclass(frozen=True)
class InteractionDataset:
    num_users: int
    num_items: int
    train: np.ndarray
    valid: np.ndarray = field(default_factory=lambda: _EMPTY_PAIRS.copy())
    test: np.ndarray = field(default_factory=lambda: _EMPTY_PAIRS.copy())
    # original item ids of the dense ids after filtering, if any
    item_index: np.ndarray | None = None

    def __post_init__(self):
        for name in ("train", "valid", "test"):
            object.__setattr__(self, name, _pairs(getattr(self, name)))
            arr = getattr(self, name)
            arr.setflags(write=False)
            if len(arr) and (
                arr[:, 0].min() < 0 or arr[:, 0].max() >= self.num_users
                or arr[:, 1].min() < 0 or arr[:, 1].max() >= self.num_items
            ):
                raise ValidationError(f"{name} split has ids outside [0,{self.num_users})x[0,{self.num_items})")

    def all_pairs(self) -> np.ndarray:
        return np.concatenate([self.train, self.valid, self.test])

    def user_items(self, split="train") -> list[np.ndarray]:
        """Sorted item ids per user for one split (or a tuple of splits)."""
        splits = (split,) if isinstance(split, str) else split
        pairs = np.concatenate([getattr(self, s) for s in splits])
        order = np.lexsort((pairs[:, 1], pairs[:, 0]))
        pairs = pairs[order]
        bounds = np.searchsorted(pairs[:, 0], np.arange(self.num_users + 1))
        return [pairs[bounds[u]:bounds[u + 1], 1] for u in range(self.num_users)]

    def checksum(self) -> str:
        h = hashlib.sha256(f"{self.num_users},{self.num_items}".encode())
        for arr in (self.train, self.valid, self.test):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class KnowledgeGraph:
    num_entities: int
    num_relations: int
    triples: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.triples, dtype=np.int64).reshape(-1, 3)
        if len(t):
            if t[:, [0, 2]].min() < 0 or t[:, [0, 2]].max() >= self.num_entities:
                raise ValidationError(f"entity id outside [0,{self.num_entities})")
            if t[:, 1].min() < 0 or t[:, 1].max() >= self.num_relations:
                raise ValidationError(f"relation id outside [0,{self.num_relations})")
            t = np.unique(t, axis=0)
        t.setflags(write=False)
        object.__setattr__(self, "triples", t)

    @property
    def heads(self):
        return self.triples[:, 0]

    @property
    def relations(self):
        return self.triples[:, 1]

    @property
    def tails(self):
        return self.triples[:, 2]

    def head_index(self) -> tuple[CSRPattern, np.ndarray]:
        """Row-compressed index over heads (the N_h neighbour lists).

        Returns the pattern (rows = heads, columns = tails) and the permutation
        from pattern order to ``triples`` order.
        """
        return CSRPattern.from_coo(self.num_entities, self.num_entities, self.heads, self.tails)

    def checksum(self) -> str:
        h = hashlib.sha256(f"{self.num_entities},{self.num_relations}".encode())
        h.update(np.ascontiguousarray(self.triples).tobytes())
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class ModalityFeatures:
    modality: str
    matrix: np.ndarray
    present: np.ndarray | None = None

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float32, copy=True)
        if m.ndim != 2:
            raise ValidationError("feature matrix must be 2-D")
        present = np.any(m != 0, axis=1) if self.present is None else np.asarray(self.present, bool).copy()
        if present.shape != (m.shape[0],):
            raise ValidationError("presence mask length must equal the number of items")
        m[~present] = 0.0
        m.setflags(write=False)
        present.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "present", present)

    @property
    def num_items(self):
        return self.matrix.shape[0]

    @property
    def dim(self):
        return self.matrix.shape[1]

    def checksum(self) -> str:
        return hashlib.sha256(self.matrix.tobytes()).hexdigest()[:16]


# loading -----------------------------------------------------------------

def _data_lines(path):
    with open(path, encoding="utf-8") as fh:
        for no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if line and not line.startswith("#"):
                yield no, line


def load_interactions(path, num_users: int | None = None, num_items: int | None = None) -> InteractionDataset:
    """Read ``user<TAB>item`` lines into an unsplit dataset (all pairs in train)."""
    pairs = []
    for no, line in _data_lines(path):
        parts = line.split("\t") if "\t" in line else line.split()
        if len(parts) != 2:
            raise ParseError(path, no, f"expected 'user<TAB>item', got {line!r}")
        try:
            u, i = int(parts[0]), int(parts[1])
        except ValueError:
            raise ParseError(path, no, f"non-integer id in {line!r}") from None
        if u < 0 or i < 0:
            raise ParseError(path, no, "ids must be non-negative")
        if (num_users is not None and u >= num_users) or (num_items is not None and i >= num_items):
            raise ValidationError(f"{path}:{no}: id out of declared range")
        pairs.append((u, i))
    arr = _pairs(pairs)
    arr = np.unique(arr, axis=0) if len(arr) else arr
    n_u = num_users if num_users is not None else (int(arr[:, 0].max()) + 1 if len(arr) else 0)
    n_i = num_items if num_items is not None else (int(arr[:, 1].max()) + 1 if len(arr) else 0)
    return InteractionDataset(n_u, n_i, arr)


def load_kg(path) -> KnowledgeGraph:
    lines = _data_lines(path)
    try:
        no, header = next(lines)
    except StopIteration:
        raise ParseError(path, 1, "missing 'entities=<n> relations=<m>' header") from None
    try:
        fields = dict(tok.split("=", 1) for tok in header.split())
        n_e, n_r = int(fields["entities"]), int(fields["relations"])
    except (ValueError, KeyError):
        raise ParseError(path, no, f"bad header {header!r}") from None
    triples = []
    for no, line in lines:
        parts = line.split("\t") if "\t" in line else line.split()
        if len(parts) != 3:
            raise ParseError(path, no, f"expected 'head<TAB>relation<TAB>tail', got {line!r}")
        try:
            h, r, t = (int(p) for p in parts)
        except ValueError:
            raise ParseError(path, no, f"non-integer id in {line!r}") from None
        if not (0 <= h < n_e and 0 <= t < n_e):
            raise ValidationError(f"{path}:{no}: entity id out of declared range {n_e}")
        if not 0 <= r < n_r:
            raise ValidationError(f"{path}:{no}: relation id {r} >= declared {n_r}")
        triples.append((h, r, t))
    return KnowledgeGraph(n_e, n_r, np.array(triples, dtype=np.int64).reshape(-1, 3))


def load_features(path, modality: str) -> ModalityFeatures:
    """Text features, or the binary twin when the file starts with the magic bytes."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == MAGIC:
        return ModalityFeatures(modality, read_tensor(path))
    lines = _data_lines(path)
    try:
        no, header = next(lines)
        n, dim = (int(x) for x in header.split())
    except StopIteration:
        raise ParseError(path, 1, "missing 'num_items dim' header") from None
    except ValueError:
        raise ParseError(path, no, f"bad header {header!r}") from None
    rows = []
    for no, line in lines:
        try:
            row = [float(x) for x in line.split()]
        except ValueError:
            raise ParseError(path, no, "non-numeric feature value") from None
        if len(row) != dim:
            raise ParseError(path, no, f"expected {dim} values, got {len(row)}")
        rows.append(row)
    if len(rows) != n:
        raise ValidationError(f"{path}: header declares {n} rows, found {len(rows)}")
    return ModalityFeatures(modality, np.array(rows, dtype=np.float32).reshape(n, dim))


def write_interactions(path, pairs):
    with open(path, "w", encoding="utf-8") as fh:
        for u, i in np.asarray(pairs).reshape(-1, 2):
            fh.write(f"{u}\t{i}\n")


def write_kg(path, kg: KnowledgeGraph):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"entities={kg.num_entities} relations={kg.num_relations}\n")
        for h, r, t in kg.triples:
            fh.write(f"{h}\t{r}\t{t}\n")


def write_features(path, feats: ModalityFeatures):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{feats.num_items} {feats.dim}\n")
        for row in feats.matrix:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def write_tensor(path, array):
    a = np.ascontiguousarray(array, dtype="<f4")
    a2 = a.reshape(a.shape[0], -1) if a.ndim != 2 else a
    if a.ndim == 0:
        a2 = a.reshape(1, 1)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", a2.shape[0], a2.shape[1]))
        fh.write(a2.tobytes())


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic bytes {blob[:4]!r}")
    if len(blob) < 12:
        raise FormatError(f"{path}: truncated header")
    rows, cols = struct.unpack("<II", blob[4:12])
    if len(blob) != 12 + 4 * rows * cols:
        raise FormatError(f"{path}: expected {rows}x{cols} float32 values")
    return np.frombuffer(blob, dtype="<f4", offset=12).reshape(rows, cols).astype(np.float32)


# filtering and splitting ---------------------------------------------------

def kcore_filter(ds: InteractionDataset, k: int) -> InteractionDataset:
    """Drop users/items below ``k`` interactions until nothing changes; re-densify ids."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    pairs = ds.all_pairs()
    while True:
        du = np.bincount(pairs[:, 0], minlength=ds.num_users)
        di = np.bincount(pairs[:, 1], minlength=ds.num_items)
        keep = (du[pairs[:, 0]] >= k) & (di[pairs[:, 1]] >= k)
        if keep.all():
            break
        pairs = pairs[keep]
    if len(pairs) == 0:
        raise EmptyDatasetError(f"{k}-core filtering removed every interaction")
    users = np.unique(pairs[:, 0])
    items = np.unique(pairs[:, 1])
    u_map = np.full(ds.num_users, -1, np.int64)
    u_map[users] = np.arange(len(users))
    i_map = np.full(ds.num_items, -1, np.int64)
    i_map[items] = np.arange(len(items))
    dense = np.stack([u_map[pairs[:, 0]], i_map[pairs[:, 1]]], axis=1)
    original = items if ds.item_index is None else ds.item_index[items]
    return InteractionDataset(len(users), len(items), dense, item_index=original)


def align_kg(kg: KnowledgeGraph, num_items_before: int, kept_items: np.ndarray) -> KnowledgeGraph:
    """Re-index a KG after item filtering.

    Triples touching a removed item are dropped; kept items take ids
    ``[0, len(kept_items))`` and the remaining entities follow in order.
    """
    keep = np.ones(kg.num_entities, bool)
    keep[:num_items_before] = False
    keep[kept_items] = True
    mapping = np.full(kg.num_entities, -1, np.int64)
    mapping[kept_items] = np.arange(len(kept_items))
    others = np.flatnonzero(keep[num_items_before:]) + num_items_before
    mapping[others] = len(kept_items) + np.arange(len(others))
    t = kg.triples
    ok = keep[t[:, 0]] & keep[t[:, 2]]
    t = t[ok]
    return KnowledgeGraph(len(kept_items) + len(others), kg.num_relations,
                          np.stack([mapping[t[:, 0]], t[:, 1], mapping[t[:, 2]]], axis=1))


def split_dataset(ds: InteractionDataset, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> InteractionDataset:
    """Per-user random split. Valid/test sizes are floored, train takes the rest.

    Users with fewer than three interactions keep everything in train.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    train, valid, test = [], [], []
    for u, items in enumerate(ds.user_items(("train", "valid", "test"))):
        n = len(items)
        if n == 0:
            continue
        items = rng.permutation(items)
        if n < 3:
            n_valid = n_test = 0
        else:
            n_valid = math.floor(ratios[1] * n + 1e-9)
            n_test = math.floor(ratios[2] * n + 1e-9)
        n_train = n - n_valid - n_test
        train.extend((u, i) for i in items[:n_train])
        valid.extend((u, i) for i in items[n_train:n_train + n_valid])
        test.extend((u, i) for i in items[n_train + n_valid:])
    return InteractionDataset(ds.num_users, ds.num_items, train, valid, test, item_index=ds.item_index)


# noise -----------------------------------------------------------------------

def _check_ratio(ratio):
    if not 0.0 <= ratio <= 0.5:
        raise ConfigError(f"noise ratio must lie in [0, 0.5], got {ratio}")


def inject_interaction_noise(ds: InteractionDataset, ratio: float, seed: int) -> InteractionDataset:
    """Replace a fraction of train+valid pairs by unobserved pairs of the same user.

    The test split is left untouched and no replacement duplicates any pair.
    """
    _check_ratio(ratio)
    if ratio == 0:
        return replace(ds)
    rng = np.random.default_rng(seed)
    pool = np.concatenate([ds.train, ds.valid]).copy()
    n_corrupt = math.floor(ratio * len(pool))
    taken = {(int(u), int(i)) for u, i in ds.all_pairs()}
    per_user = np.bincount(ds.all_pairs()[:, 0], minlength=ds.num_users)
    for pos in np.sort(rng.choice(len(pool), size=n_corrupt, replace=False)):
        u = int(pool[pos, 0])
        if per_user[u] >= ds.num_items:
            raise ValidationError(f"user {u} has interacted with every item; cannot inject noise")
        while True:
            j = int(rng.integers(ds.num_items))
            if (u, j) not in taken:
                break
        taken.add((u, j))
        per_user[u] += 1
        pool[pos, 1] = j
    n_train = len(ds.train)
    return replace(ds, train=pool[:n_train], valid=pool[n_train:])


def inject_kg_noise(kg: KnowledgeGraph, ratio: float, seed: int) -> KnowledgeGraph:
    """Replace the tail of a fraction of triples by a different uniform entity."""
    _check_ratio(ratio)
    if ratio == 0:
        return replace(kg)
    rng = np.random.default_rng(seed)
    t = kg.triples.copy()
    existing = {tuple(x) for x in t.tolist()}
    for pos in np.sort(rng.choice(len(t), size=math.floor(ratio * len(t)), replace=False)):
        h, r, old = (int(v) for v in t[pos])
        for _ in range(1000):
            new = int(rng.integers(kg.num_entities - 1))
            new += new >= old  # uniform over entities != old
            if (h, r, new) not in existing:
                break
        else:
            raise ValidationError(f"no replacement tail available for triple {(h, r, old)}")
        existing.discard((h, r, old))
        existing.add((h, r, new))
        t[pos, 2] = new
    return KnowledgeGraph(kg.num_entities, kg.num_relations, t)


def inject_modality_absence(feats: ModalityFeatures, ratio: float, seed: int) -> ModalityFeatures:
    """Zero out a fraction of the item rows and clear their presence bits."""
    _check_ratio(ratio)
    if ratio == 0:
        return replace(feats)
    rng = np.random.default_rng(seed)
    n_drop = math.floor(ratio * feats.num_items)
    candidates = np.flatnonzero(feats.present)
    drop = rng.choice(candidates, size=min(n_drop, len(candidates)), replace=False)
    m = feats.matrix.copy()
    present = feats.present.copy()
    m[drop] = 0.0
    present[drop] = False
    return ModalityFeatures(feats.modality, m, present)


def inject_noise(obj, kind: str, ratio: float, seed: int):
    if kind == "interaction":
        return inject_interaction_noise(obj, ratio, seed)
    if kind == "kg_tail":
        return inject_kg_noise(obj, ratio, seed)
    if kind == "modality_absence":
        return inject_modality_absence(obj, ratio, seed)
    raise ConfigError(f"unknown noise kind {kind!r}; expected one of {NOISE_KINDS}")


# synthetic data ------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Clustered users/items with a matching KG and two feature modalities.

    Each cluster is split into ``subclusters`` item groups; users favour one
    group of their cluster. ``noise`` is the probability that an interaction
    goes to a different cluster. Relation 0 links an item to its cluster's
    attribute; the other relations link to attributes of its subcluster.
    """

    num_users: int = 1000
    num_items: int = 1000
    num_clusters: int = 5
    num_interactions: int = 20000
    kg_relations: int = 3
    feature_dim: int = 32
    noise: float = 0.1
    feature_noise: float = 1.0
    kg_noise: float = 0.1
    subclusters: int = 4
    subcluster_affinity: float = 0.6
    popularity_exponent: float = 0.8


def gen_synthetic(spec: SyntheticSpec, seed: int):
    """Return ``(interactions, kg, visual, textual)``; interactions are unsplit."""
    if spec.num_clusters < 2:
        raise ConfigError("synthetic data needs at least 2 clusters")
    if spec.num_items < spec.num_clusters * spec.subclusters:
        raise ConfigError("fewer items than cluster/subcluster groups")
    if spec.kg_relations < 1 or not 0 <= spec.noise <= 1 or not 0 <= spec.kg_noise <= 1:
        raise ConfigError("invalid synthetic spec")
    rng = np.random.default_rng(seed)
    n_u, n_i, C, S = spec.num_users, spec.num_items, spec.num_clusters, spec.subclusters

    item_group = rng.permutation(np.arange(n_i) % (C * S))
    item_cluster = item_group // S
    user_cluster = rng.integers(C, size=n_u)
    user_group = user_cluster * S + rng.integers(S, size=n_u)
    popularity = rng.permutation(n_i).astype(np.float64)
    popularity = (1.0 + popularity) ** -spec.popularity_exponent

    members_c = [np.flatnonzero(item_cluster == c) for c in range(C)]
    members_g = [np.flatnonzero(item_group == g) for g in range(C * S)]
    not_c = [np.flatnonzero(item_cluster != c) for c in range(C)]

    def pick(pool):
        p = popularity[pool]
        return pool[rng.choice(len(pool), p=p / p.sum())]

    base, extra = divmod(spec.num_interactions, n_u)
    pairs = []
    for u in range(n_u):
        want = min(base + (u < extra), n_i)
        chosen = set()
        c, g = user_cluster[u], user_group[u]
        # the source pool is fixed per slot so duplicate rejection keeps the mix
        for _ in range(want):
            if rng.random() < spec.noise:
                pool = not_c[c]
            elif rng.random() < spec.subcluster_affinity:
                pool = members_g[g]
            else:
                pool = members_c[c]
            for fallback in (members_c[c], np.arange(n_i)):
                if not np.isin(pool, list(chosen)).all():
                    break
                pool = fallback
            while True:
                j = int(pick(pool))
                if j not in chosen:
                    break
            chosen.add(j)
        pairs.extend((u, j) for j in sorted(chosen))
    interactions = InteractionDataset(n_u, n_i, np.array(pairs, dtype=np.int64))

    # attribute entities: one per cluster for relation 0, one per subcluster otherwise
    triples = []
    next_entity = n_i
    attr_ids = []
    for r in range(spec.kg_relations):
        n_vals = C if r == 0 else C * S
        attr_ids.append(np.arange(next_entity, next_entity + n_vals))
        next_entity += n_vals
    for i in range(n_i):
        for r in range(spec.kg_relations):
            vals = attr_ids[r]
            true_val = item_cluster[i] if r == 0 else item_group[i]
            v = rng.integers(len(vals)) if rng.random() < spec.kg_noise else true_val
            triples.append((i, r, int(vals[v])))
    kg = KnowledgeGraph(next_entity, spec.kg_relations, np.array(triples, dtype=np.int64))

    feats = []
    for m in MODALITIES:
        centroids = rng.normal(size=(C, spec.feature_dim))
        x = centroids[item_cluster] + spec.feature_noise * rng.normal(size=(n_i, spec.feature_dim))
        feats.append(ModalityFeatures(m, x.astype(np.float32)))
    return interactions, kg, feats[0], feats[1]


def synthetic_cluster_labels(spec: SyntheticSpec, seed: int):
    """Recompute (user_cluster, item_cluster) for a generated dataset (test helper)."""
    rng = np.random.default_rng(seed)
    C, S = spec.num_clusters, spec.subclusters
    item_group = rng.permutation(np.arange(spec.num_items) % (C * S))
    user_cluster = rng.integers(C, size=spec.num_users)
    return user_cluster, item_group // S
