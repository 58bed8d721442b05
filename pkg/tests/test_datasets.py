import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slifmr import datasets as D
from slifmr.errors import ConfigError, EmptyDatasetError, FormatError, ParseError, ValidationError


def test_load_interactions_three_lines(tmp_path):
    p = tmp_path / "interactions.tsv"
    p.write_text("# comment\n0\t0\n0\t1\n1\t1\n")
    ds = D.load_interactions(p)
    assert (ds.num_users, ds.num_items, len(ds.train)) == (2, 2, 3)


def test_load_interactions_reports_line_number(tmp_path):
    p = tmp_path / "bad.tsv"
    p.write_text("0\t0\n0\tx\n")
    with pytest.raises(ParseError) as err:
        D.load_interactions(p)
    assert err.value.line_no == 2


def test_load_interactions_declared_range(tmp_path):
    p = tmp_path / "i.tsv"
    p.write_text("0\t5\n")
    with pytest.raises(ValidationError):
        D.load_interactions(p, num_items=3)


def test_kg_relation_out_of_range(tmp_path):
    p = tmp_path / "kg.tsv"
    p.write_text("entities=4 relations=2\n0\t1\t3\n1\t2\t3\n")
    with pytest.raises(ValidationError):
        D.load_kg(p)


def test_kg_roundtrip(tmp_path):
    kg = D.KnowledgeGraph(5, 2, [[0, 0, 3], [1, 1, 4], [0, 1, 4]])
    D.write_kg(tmp_path / "kg.tsv", kg)
    back = D.load_kg(tmp_path / "kg.tsv")
    np.testing.assert_array_equal(back.triples, kg.triples)


def test_feature_text_file(tmp_path):
    p = tmp_path / "f.txt"
    p.write_text("4 3\n1 2 3\n0 0 0\n0.5 0.25 1\n-1 0 1\n")
    f = D.load_features(p, "visual")
    assert f.matrix.shape == (4, 3)
    assert f.present.tolist() == [True, False, True, True]


def test_feature_binary_twin(tmp_path):
    m = np.random.default_rng(0).normal(size=(6, 4)).astype(np.float32)
    D.write_tensor(tmp_path / "f.bin", m)
    blob = (tmp_path / "f.bin").read_bytes()
    assert blob[:4] == b"SLIF" and len(blob) == 12 + 6 * 4 * 4
    f = D.load_features(tmp_path / "f.bin", "textual")
    np.testing.assert_array_equal(f.matrix, m)


def test_bad_magic(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"NOPE" + b"\0" * 8)
    with pytest.raises(FormatError, match="x.bin"):
        D.read_tensor(p)


def test_kcore_k1_is_identity():
    ds = D.InteractionDataset(3, 3, [[0, 0], [1, 1], [2, 2], [0, 2]])
    out = D.kcore_filter(ds, 1)
    np.testing.assert_array_equal(np.sort(out.train, axis=0), np.sort(ds.train, axis=0))


def test_kcore_star_collapses():
    ds = D.InteractionDataset(1, 5, [[0, i] for i in range(5)])
    with pytest.raises(EmptyDatasetError):
        D.kcore_filter(ds, 2)


def _naive_kcore(pairs, k):
    pairs = {tuple(p) for p in pairs}
    changed = True
    while changed:
        changed = False
        du, di = {}, {}
        for u, i in pairs:
            du[u] = du.get(u, 0) + 1
            di[i] = di.get(i, 0) + 1
        for p in list(pairs):
            if du[p[0]] < k or di[p[1]] < k:
                pairs.discard(p)
                changed = True
    return pairs


@pytest.mark.parametrize("seed", range(5))
def test_kcore_matches_naive_fixpoint(seed):
    rng = np.random.default_rng(seed)
    mask = rng.random((50, 50)) < 0.08
    pairs = np.argwhere(mask)
    ds = D.InteractionDataset(50, 50, pairs)
    expected = _naive_kcore(pairs.tolist(), 3)
    out = D.kcore_filter(ds, 3)
    users = np.unique(np.array(sorted(expected))[:, 0])
    got = {(int(users[u]), int(out.item_index[i])) for u, i in out.train}
    assert got == expected
    again = D.kcore_filter(out, 3)
    np.testing.assert_array_equal(again.train, out.train)


def test_align_kg_drops_removed_items():
    kg = D.KnowledgeGraph(6, 1, [[0, 0, 4], [1, 0, 4], [2, 0, 5], [3, 0, 5]])
    out = D.align_kg(kg, 4, np.array([1, 3]))
    # items 1,3 -> 0,1; entities 4,5 -> 2,3
    assert out.num_entities == 4
    assert sorted(map(tuple, out.triples.tolist())) == [(0, 0, 2), (1, 0, 3)]


def test_split_ten_items_is_8_1_1():
    ds = D.InteractionDataset(1, 10, [[0, i] for i in range(10)])
    s = D.split_dataset(ds, (0.8, 0.1, 0.1), seed=3)
    assert (len(s.train), len(s.valid), len(s.test)) == (8, 1, 1)


def test_split_single_item_stays_in_train():
    ds = D.InteractionDataset(1, 4, [[0, 2]])
    s = D.split_dataset(ds, seed=0)
    assert (len(s.train), len(s.valid), len(s.test)) == (1, 0, 0)


def test_split_is_deterministic_and_a_partition():
    rng = np.random.default_rng(0)
    ds = D.InteractionDataset(20, 40, np.argwhere(rng.random((20, 40)) < 0.3))
    a = D.split_dataset(ds, seed=7)
    b = D.split_dataset(ds, seed=7)
    np.testing.assert_array_equal(a.train, b.train)
    np.testing.assert_array_equal(a.test, b.test)
    joined = sorted(map(tuple, a.all_pairs().tolist()))
    assert joined == sorted(map(tuple, ds.train.tolist()))
    assert len(set(joined)) == len(joined)


def test_split_rejects_bad_ratios():
    ds = D.InteractionDataset(1, 2, [[0, 0]])
    with pytest.raises(ConfigError):
        D.split_dataset(ds, (0.5, 0.1, 0.1))


def _toy_split(seed=0):
    rng = np.random.default_rng(seed)
    ds = D.InteractionDataset(30, 60, np.argwhere(rng.random((30, 60)) < 0.2))
    return D.split_dataset(ds, seed=seed)


def test_interaction_noise_zero_is_identical():
    ds = _toy_split()
    out = D.inject_interaction_noise(ds, 0.0, 1)
    assert out.train.tobytes() == ds.train.tobytes() and out.valid.tobytes() == ds.valid.tobytes()


def test_interaction_noise_contract():
    ds = _toy_split()
    out = D.inject_interaction_noise(ds, 0.2, 1)
    assert len(out.train) == len(ds.train) and len(out.valid) == len(ds.valid)
    np.testing.assert_array_equal(out.test, ds.test)
    before = np.concatenate([ds.train, ds.valid])
    after = np.concatenate([out.train, out.valid])
    changed = np.any(before != after, axis=1)
    assert changed.sum() == int(0.2 * len(before))
    original = {tuple(p) for p in ds.all_pairs().tolist()}
    new_pairs = {tuple(p) for p in after[changed].tolist()}
    assert not (new_pairs & original)
    assert len({tuple(p) for p in after.tolist()}) == len(after)
    np.testing.assert_array_equal(before[:, 0], after[:, 0])


def test_kg_noise_changes_exact_count():
    rng = np.random.default_rng(0)
    triples = np.stack([np.arange(100), rng.integers(3, size=100), 100 + rng.integers(20, size=100)], 1)
    kg = D.KnowledgeGraph(120, 3, triples)
    out = D.inject_kg_noise(kg, 0.2, seed=5)
    assert len(out.triples) == 100
    # heads are unique so rows can be matched by head
    a = kg.triples[np.argsort(kg.triples[:, 0])]
    b = out.triples[np.argsort(out.triples[:, 0])]
    assert np.sum(a[:, 2] != b[:, 2]) == 20


def test_modality_absence():
    f = D.ModalityFeatures("visual", np.ones((10, 3)))
    out = D.inject_modality_absence(f, 0.3, seed=2)
    assert (~out.present).sum() == 3
    assert np.all(out.matrix[~out.present] == 0)


def test_noise_ratio_out_of_range():
    with pytest.raises(ConfigError):
        D.inject_noise(_toy_split(), "interaction", 0.6, 0)
    with pytest.raises(ConfigError):
        D.inject_noise(_toy_split(), "bogus", 0.1, 0)


def test_synthetic_without_noise_is_intra_cluster():
    spec = D.SyntheticSpec(num_users=100, num_items=100, num_interactions=1500, noise=0.0)
    ds, kg, vis, txt = D.gen_synthetic(spec, seed=4)
    uc, ic = D.synthetic_cluster_labels(spec, seed=4)
    assert np.all(uc[ds.train[:, 0]] == ic[ds.train[:, 1]])
    assert len(ds.train) == 1500
    assert kg.num_entities > ds.num_items
    assert vis.matrix.shape == (100, spec.feature_dim)


def test_synthetic_noise_free_features_identical_within_cluster():
    spec = D.SyntheticSpec(num_users=20, num_items=40, num_clusters=2, num_interactions=200, feature_noise=0.0)
    _, _, vis, _ = D.gen_synthetic(spec, seed=1)
    _, ic = D.synthetic_cluster_labels(spec, seed=1)
    x = vis.matrix[ic == 0]
    cos = (x @ x.T) / np.outer(np.linalg.norm(x, axis=1), np.linalg.norm(x, axis=1))
    np.testing.assert_allclose(cos, 1.0, atol=1e-6)


def test_synthetic_intra_fraction_matches_mix():
    spec = D.SyntheticSpec(num_users=500, num_items=500, num_interactions=10_000, noise=0.25)
    ds, *_ = D.gen_synthetic(spec, seed=11)
    uc, ic = D.synthetic_cluster_labels(spec, seed=11)
    frac = np.mean(uc[ds.train[:, 0]] == ic[ds.train[:, 1]])
    assert abs(frac - 0.75) <= 0.03


def test_synthetic_is_deterministic():
    spec = D.SyntheticSpec(num_users=50, num_items=60, num_interactions=500)
    a = D.gen_synthetic(spec, seed=3)
    b = D.gen_synthetic(spec, seed=3)
    assert a[0].checksum() == b[0].checksum() and a[1].checksum() == b[1].checksum()
    assert a[2].checksum() == b[2].checksum()


def test_synthetic_rejects_single_cluster():
    with pytest.raises(ConfigError):
        D.gen_synthetic(D.SyntheticSpec(num_clusters=1), seed=0)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(1, 4))
def test_kcore_is_a_fixed_point(seed, k):
    rng = np.random.default_rng(seed)
    ds = D.InteractionDataset(25, 25, np.argwhere(rng.random((25, 25)) < 0.25))
    try:
        out = D.kcore_filter(ds, k)
    except EmptyDatasetError:
        return
    again = D.kcore_filter(out, k)
    np.testing.assert_array_equal(again.train, out.train)
    assert np.bincount(out.train[:, 0]).min() >= k
    assert np.bincount(out.train[:, 1]).min() >= k
