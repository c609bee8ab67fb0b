import numpy as np
import pytest

from kgtn import data as dt
from kgtn import graphs
from kgtn.errors import DataError, FormatError


def _small_cfg(**kw):
    base = dict(n_super=3, leaves_per_super=4, d=6, train_per_base=12,
                test_per_class=5, seed=1)
    base.update(kw)
    return dt.SyntheticTaxonomyConfig(**base)


def test_generation_is_deterministic():
    a, emb_a, hier_a = dt.generate_synthetic(_small_cfg())
    b, emb_b, hier_b = dt.generate_synthetic(_small_cfg())
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_array_equal(a.labels, b.labels)
    np.testing.assert_array_equal(a.is_novel, b.is_novel)
    np.testing.assert_array_equal(emb_a.vectors, emb_b.vectors)
    assert hier_a.edges == hier_b.edges


def test_nearly_noiseless_data_is_separable_by_centers():
    ds, emb, _ = dt.generate_synthetic(_small_cfg(noise_sigma=1e-12))
    test_idx = np.concatenate(ds.test_ids)
    x = ds.features[test_idx]
    dists = ((x[:, None, :] - emb.vectors[None, :, :]) ** 2).sum(axis=2)
    pred = np.array(emb.ids)[dists.argmin(axis=1)]
    assert (pred == ds.labels[test_idx]).all()


def test_train_test_disjoint_and_counted():
    cfg = _small_cfg()
    ds, _, _ = dt.generate_synthetic(cfg)
    for pos in range(ds.k):
        tr, te = ds.train_ids[pos], ds.test_ids[pos]
        assert tr.size == cfg.train_per_base
        assert te.size == cfg.test_per_class
        assert np.intersect1d(tr, te).size == 0


def test_every_superclass_keeps_a_base_leaf():
    for seed in range(10):
        cfg = _small_cfg(seed=seed, novel_fraction=0.75)
        ds, _, _ = dt.generate_synthetic(cfg)
        flags = ds.is_novel.reshape(cfg.n_super, cfg.leaves_per_super)
        assert (~flags).sum(axis=1).min() >= 1


def test_sibling_correlation_beats_cross_superclass():
    # With center spread 5.0 and leaf spread 1.0, the semantic graph built
    # from the emitted embeddings must rank siblings above non-siblings.
    for seed in range(5):
        cfg = dt.SyntheticTaxonomyConfig(
            n_super=4, leaves_per_super=4, d=16, within_super_spread=5.0,
            cluster_spread=1.0, train_per_base=2, test_per_class=1, seed=seed,
        )
        ds, emb, _ = dt.generate_synthetic(cfg)
        g = graphs.build_semantic_graph(emb, 0.4).adjacency
        for i in range(ds.k):
            super_i = i // cfg.leaves_per_super
            sib = [j for j in range(ds.k)
                   if j != i and j // cfg.leaves_per_super == super_i]
            cross = [j for j in range(ds.k) if j // cfg.leaves_per_super != super_i]
            assert min(g[i, j] for j in sib) > max(g[i, j] for j in cross)


def test_too_few_categories_rejected():
    with pytest.raises(DataError, match="at least 2"):
        dt.generate_synthetic(_small_cfg(n_super=1, leaves_per_super=2))


def test_hierarchy_edges_cover_all_leaves():
    cfg = _small_cfg()
    ds, _, hier = dt.generate_synthetic(cfg)
    dist = graphs.shortest_path_lengths(hier)
    # siblings are 2 apart, cross-superclass leaves 4 apart
    assert dist[0, 1] == 2.0
    assert dist[0, cfg.leaves_per_super] == 4.0


def test_split_uses_whole_pool_when_k_equals_pool():
    ds, _, _ = dt.generate_synthetic(_small_cfg())
    pool = ds.train_ids[int(ds.positions(True)[0])].size
    split = dt.make_kshot_split(ds, k=pool, trial_index=3)
    for pos, chosen in split.chosen.items():
        np.testing.assert_array_equal(chosen, np.sort(ds.train_ids[pos]))


def test_split_one_shot_picks_single_ids():
    ds, _, _ = dt.generate_synthetic(_small_cfg())
    split = dt.make_kshot_split(ds, k=1, trial_index=0)
    assert set(split.chosen) == set(int(p) for p in ds.positions(True))
    for pos, chosen in split.chosen.items():
        assert chosen.shape == (1,)
        assert chosen[0] in ds.train_ids[pos]


def test_split_determinism_and_trial_variation():
    ds, _, _ = dt.generate_synthetic(_small_cfg())
    a = dt.make_kshot_split(ds, 1, 2)
    b = dt.make_kshot_split(ds, 1, 2)
    for pos in a.chosen:
        np.testing.assert_array_equal(a.chosen[pos], b.chosen[pos])
    trials = [dt.make_kshot_split(ds, 1, t) for t in range(5)]
    distinct = any(
        len({int(t.chosen[pos][0]) for t in trials}) >= 2 for pos in a.chosen
    )
    assert distinct


def test_split_k_too_large():
    ds, _, _ = dt.generate_synthetic(_small_cfg(train_per_base=3))
    with pytest.raises(DataError, match="exceeds pool"):
        dt.make_kshot_split(ds, k=4, trial_index=0)


def test_feature_file_round_trip(tmp_path):
    ds, _, _ = dt.generate_synthetic(_small_cfg())
    path = tmp_path / "data.kgfs"
    dt.save_features(path, ds)
    back = dt.load_features(path)
    np.testing.assert_array_equal(back.features, ds.features)
    np.testing.assert_array_equal(back.labels, ds.labels)
    np.testing.assert_array_equal(back.category_ids, ds.category_ids)
    np.testing.assert_array_equal(back.is_novel, ds.is_novel)
    for pos in range(ds.k):
        np.testing.assert_array_equal(back.train_ids[pos], ds.train_ids[pos])
        np.testing.assert_array_equal(back.test_ids[pos], ds.test_ids[pos])


def test_feature_file_write_is_deterministic(tmp_path):
    ds, _, _ = dt.generate_synthetic(_small_cfg())
    dt.save_features(tmp_path / "a", ds)
    dt.save_features(tmp_path / "b", ds)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_feature_file_bad_magic(tmp_path):
    path = tmp_path / "bad.kgfs"
    path.write_bytes(b"WHAT" + bytes(64))
    with pytest.raises(FormatError, match="magic"):
        dt.load_features(path)


def test_feature_file_truncated(tmp_path):
    ds, _, _ = dt.generate_synthetic(_small_cfg())
    path = tmp_path / "data.kgfs"
    dt.save_features(path, ds)
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(FormatError, match="truncated"):
        dt.load_features(path)


def test_feature_file_label_out_of_range(tmp_path):
    import struct

    path = tmp_path / "bad.kgfs"
    with open(path, "wb") as fh:
        fh.write(dt.FEATURE_MAGIC + bytes([dt.FEATURE_VERSION]))
        fh.write(struct.pack("<III", 1, 1, 2))
        fh.write(struct.pack("<I", 7) + np.zeros(2).astype("<f8").tobytes())
        fh.write(struct.pack("<I", 1) + struct.pack("<IB", 0, 0))
    with pytest.raises(FormatError, match="label 7 out of range"):
        dt.load_features(path)


def test_feature_file_empty_needs_empty_table(tmp_path):
    import struct

    ok = tmp_path / "empty.kgfs"
    with open(ok, "wb") as fh:
        fh.write(dt.FEATURE_MAGIC + bytes([dt.FEATURE_VERSION]))
        fh.write(struct.pack("<III", 0, 0, 4))
        fh.write(struct.pack("<I", 0))
    loaded = dt.load_features(ok)
    assert loaded.n == 0 and loaded.k == 0

    bad = tmp_path / "inconsistent.kgfs"
    with open(bad, "wb") as fh:
        fh.write(dt.FEATURE_MAGIC + bytes([dt.FEATURE_VERSION]))
        fh.write(struct.pack("<III", 0, 1, 4))
        fh.write(struct.pack("<I", 1) + struct.pack("<IB", 0, 1))
    with pytest.raises(FormatError, match="non-empty category table"):
        dt.load_features(bad)


def test_feature_file_without_split_section_loads_as_train_only(tmp_path):
    import struct

    path = tmp_path / "external.kgfs"
    rng = np.random.default_rng(0)
    with open(path, "wb") as fh:
        fh.write(dt.FEATURE_MAGIC + bytes([dt.FEATURE_VERSION]))
        fh.write(struct.pack("<III", 4, 2, 3))
        for label in (0, 0, 5, 5):
            fh.write(struct.pack("<I", label))
            fh.write(rng.normal(size=3).astype("<f8").tobytes())
        fh.write(struct.pack("<I", 2))
        fh.write(struct.pack("<IB", 0, 0) + struct.pack("<IB", 5, 1))
    ds = dt.load_features(path)
    assert ds.k == 2
    np.testing.assert_array_equal(ds.train_ids[0], [0, 1])
    np.testing.assert_array_equal(ds.train_ids[1], [2, 3])
    assert all(t.size == 0 for t in ds.test_ids)


def test_text_export(tmp_path):
    ds, _, _ = dt.generate_synthetic(_small_cfg(train_per_base=2, test_per_class=1))
    path = tmp_path / "data.txt"
    dt.save_features_text(path, ds)
    lines = path.read_text().strip().split("\n")
    assert len(lines) == ds.n
    first = lines[0].split()
    assert int(first[0]) == ds.labels[0]
    np.testing.assert_allclose([float(v) for v in first[1:]], ds.features[0])
