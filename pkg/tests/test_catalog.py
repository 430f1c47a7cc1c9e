import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sidforge.catalog import (CatalogSpec, build_positive_sets,
                              generate_catalog, leaf_prototypes,
                              load_catalog, save_catalog)
from sidforge.errors import ConfigurationError, InputError


def test_determinism_bit_identical():
    spec = CatalogSpec(branching=(4, 4, 4), n_items=2048, seed=7)
    a = generate_catalog(spec)
    b = generate_catalog(spec)
    assert spec.n_leaves == 64
    for ia, ib in zip(a.items, b.items):
        assert np.array_equal(ia.visual, ib.visual)
        assert np.array_equal(ia.text, ib.text)
        assert ia.labels == ib.labels
    assert a.train_ids == b.train_ids and a.test_ids == b.test_ids
    # 2048 items over 64 leaves: 32 per leaf
    leaves = [it.labels[2] for it in a.items]
    assert all(leaves.count(l) == 32 for l in set(leaves))


def test_zero_noise_identical_blocks():
    spec = CatalogSpec(branching=(2, 2, 2), n_items=32, dv=4, dt=4,
                       noise_std=0.0, ambiguity=False, seed=1)
    cat = generate_catalog(spec)
    by_leaf = {}
    for it in cat.items:
        by_leaf.setdefault(it.labels[2], []).append(it)
    for group in by_leaf.values():
        for it in group[1:]:
            assert np.array_equal(it.visual, group[0].visual)
            assert np.array_equal(it.text, group[0].text)


def test_ambiguity_shares_prototypes_attr_differs():
    spec = CatalogSpec(branching=(2, 2, 2), n_items=16, dv=4, dt=4,
                       noise_std=0.3, ambiguity=True, seed=9)
    cat = generate_catalog(spec)
    pv, pt = leaf_prototypes(spec)
    # sibling leaves 0 and 1 share a level-2 parent: prototype distance 0
    assert np.linalg.norm(pv[0] - pv[1]) == 0.0
    assert np.linalg.norm(pt[0] - pt[1]) == 0.0
    # attr blocks of items in sibling leaves differ in exactly 2 positions
    a = next(it for it in cat.items if it.labels[2] == 0)
    b = next(it for it in cat.items if it.labels[2] == 1)
    assert int(np.sum(a.attr != b.attr)) == 2


def test_item_invariants(small_catalog):
    spec = small_catalog.spec
    for it in small_catalog.items:
        assert int(it.attr.sum()) == 3
        c1, c2, c3 = it.labels
        assert small_catalog.tree.parent_l2(c3) == c2
        assert small_catalog.tree.parent_l1(c2) == c1
        assert np.all(np.isfinite(it.features()))
    assert not set(small_catalog.train_ids) & set(small_catalog.test_ids)
    assert sorted(small_catalog.train_ids + small_catalog.test_ids) == list(
        range(spec.n_items))


def test_config_errors():
    with pytest.raises(ConfigurationError):
        generate_catalog(CatalogSpec(branching=(4, 4, 4), n_items=10))
    with pytest.raises(ConfigurationError):
        generate_catalog(CatalogSpec(branching=(0, 4, 4), n_items=100))
    with pytest.raises(ConfigurationError):
        generate_catalog(CatalogSpec(noise_std=-1.0))


def test_positive_sets_full_agreement(small_catalog):
    # two items in the same leaf agree at every level
    a, b = [it.id for it in small_catalog.items if it.labels[2] == 0][:2]
    gp = build_positive_sets(small_catalog, [a, b])
    for lvl in range(3):
        assert gp.positives[lvl][0].tolist() == [1]
        assert gp.positives[lvl][1].tolist() == [0]


def test_positive_sets_nesting_cut(small_catalog):
    # same level-1 ancestor, different level-2: positives only at level 1
    items = small_catalog.items
    i = next(it for it in items if it.labels[:2] == (0, 0))
    j = next(it for it in items if it.labels[0] == 0 and it.labels[1] != 0)
    gp = build_positive_sets(small_catalog, [i.id, j.id])
    assert gp.positives[0][0].tolist() == [1]
    assert gp.positives[1][0].tolist() == []
    assert gp.positives[2][0].tolist() == []


def test_positive_sets_match_bruteforce(medium_catalog, rng):
    batch = sorted(rng.choice(len(medium_catalog.items), size=64,
                              replace=False).tolist())
    gp = build_positive_sets(medium_catalog, batch)
    labels = [medium_catalog.items[i].labels for i in batch]
    for lvl in range(3):
        for i in range(len(batch)):
            expected = sorted(
                j for j in range(len(batch))
                if j != i and labels[j][:lvl + 1] == labels[i][:lvl + 1])
            assert gp.positives[lvl][i].tolist() == expected


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(min_value=0, max_value=63), min_size=2,
                max_size=16, unique=True))
def test_positive_sets_nesting_and_symmetry(small_catalog, batch):
    gp = build_positive_sets(small_catalog, batch)
    n = len(batch)
    for lvl in range(3):
        sets = [set(p.tolist()) for p in gp.positives[lvl]]
        for i in range(n):
            for j in sets[i]:
                assert i in sets[j]
            if lvl:
                assert sets[i] <= set(gp.positives[lvl - 1][i].tolist())


def test_duplicate_batch_rejected(small_catalog):
    with pytest.raises(InputError):
        build_positive_sets(small_catalog, [1, 1, 2])
    with pytest.raises(InputError):
        build_positive_sets(small_catalog, [0, 99999])


def test_json_roundtrip(tmp_path, small_catalog):
    path = tmp_path / "cat.json"
    save_catalog(small_catalog, str(path), digest="abc")
    loaded = load_catalog(str(path))
    assert loaded.spec == small_catalog.spec
    assert loaded.train_ids == small_catalog.train_ids
    for a, b in zip(loaded.items, small_catalog.items):
        assert a.labels == b.labels
        assert np.allclose(a.visual, b.visual, atol=1e-8)
    doc = json.loads(path.read_text())
    assert doc["config_digest"] == "abc"


def test_json_byte_identical(tmp_path):
    spec = CatalogSpec(branching=(2, 2, 2), n_items=32, dv=4, dt=4, seed=5)
    p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
    save_catalog(generate_catalog(spec), str(p1))
    save_catalog(generate_catalog(spec), str(p2))
    assert p1.read_bytes() == p2.read_bytes()
