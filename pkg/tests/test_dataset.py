import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crossmodal_attack.dataset import (DataFormatError, InteractionGraph, load_interactions, observe_users,
                                       read_split_manifest, save_interactions, select_cold_items,
                                       split_leave_one_out, synth_dataset, write_split_manifest, save_png)

from conftest import random_graph


def _write_images(d, items, size=4):
    d.mkdir(exist_ok=True)
    for k, i in enumerate(items):
        save_png(d / f"{i}.png", np.full((size, size, 3), k / 10, np.float32))


def test_load_dedups_edges(tmp_path):
    (tmp_path / "x.tsv").write_text("u1\ti1\nu1\ti1\n")
    _write_images(tmp_path / "img", ["i1"])
    ds = load_interactions(tmp_path / "x.tsv", tmp_path / "img")
    assert ds.graph.n_edges == 1


def test_load_degree_sums_to_edge_count(tmp_path):
    (tmp_path / "x.tsv").write_text("u1\ti1\nu2\ti1\nu3\ti2\nu1\ti2\n")
    _write_images(tmp_path / "img", ["i1", "i2"])
    ds = load_interactions(tmp_path / "x.tsv", tmp_path / "img")
    assert (ds.graph.n_users, ds.graph.n_items) == (3, 2)
    assert ds.graph.item_degree().sum() == 4
    assert ds.images.pixels.min() >= 0 and ds.images.pixels.max() <= 1


def test_load_empty_file(tmp_path):
    (tmp_path / "x.tsv").write_text("")
    ds = load_interactions(tmp_path / "x.tsv", tmp_path)
    assert ds.graph.n_edges == 0 and ds.graph.n_users == 0


def test_load_missing_image_names_item(tmp_path):
    (tmp_path / "x.tsv").write_text("u1\tshoe7\n")
    (tmp_path / "img").mkdir()
    with pytest.raises(FileNotFoundError, match="shoe7"):
        load_interactions(tmp_path / "x.tsv", tmp_path / "img")


def test_load_malformed_line_number(tmp_path):
    (tmp_path / "x.tsv").write_text("u1\ti1\nbroken line\n")
    _write_images(tmp_path / "img", ["i1"])
    with pytest.raises(DataFormatError, match=":2:"):
        load_interactions(tmp_path / "x.tsv", tmp_path / "img")


def test_save_load_roundtrip(tmp_path):
    ds = synth_dataset(12, 16, 0.3, 1.0, 3, image_size=8)
    save_interactions(ds, tmp_path / "x.tsv", tmp_path / "img")
    back = load_interactions(tmp_path / "x.tsv", tmp_path / "img")
    assert set(back.graph.edge_pairs()) == set(ds.graph.edge_pairs())
    # the edge file only knows items with at least one interaction
    items = back.graph.items
    assert set(items) == {i for _, i in ds.graph.edge_pairs()}
    assert np.abs(back.images.stack(items) - ds.images.stack(items)).max() <= 0.5 / 255 + 1e-6


def test_synth_is_seed_deterministic():
    a = synth_dataset(10, 20, 0.1, 1.0, 42)
    b = synth_dataset(10, 20, 0.1, 1.0, 42)
    assert np.array_equal(a.graph.edges, b.graph.edges)
    assert np.array_equal(a.images.pixels, b.images.pixels)


def test_synth_zero_strength_images_ignore_clusters():
    ds = synth_dataset(200, 400, 0.05, 0.0, 1, image_size=16)
    group = ds.meta["item_group"]
    centre = ds.images.pixels[:, 8, 8, :]
    # between-group spread of mean colour is what chance predicts for equal-size groups
    means = np.stack([centre[group == g].mean(0) for g in range(4)])
    se = centre.std(0) / np.sqrt(len(centre) / 4)
    assert np.all(np.abs(means - centre.mean(0)) < 4 * se)


def test_synth_density_close_to_target():
    ds = synth_dataset(200, 300, 0.05, 1.0, 0, image_size=8)
    assert abs(ds.graph.n_edges / (200 * 300) - 0.05) < 0.01


@pytest.mark.parametrize("args", [(0, 10, 0.1, 1.0, 0), (10, -1, 0.1, 1.0, 0), (10, 10, 0.0, 1.0, 0)])
def test_synth_rejects_bad_counts(args):
    with pytest.raises(ValueError):
        synth_dataset(*args)


def _degree_graph(degrees):
    pairs = [(f"u{k}", item) for item, d in degrees.items() for k in range(d)]
    return InteractionGraph.from_pairs(pairs, items=sorted(degrees))


def test_cold_items_fixture():
    g = _degree_graph({"i1": 5, "i2": 1, "i3": 3})
    assert select_cold_items(g, 1) == ["i2"]


def test_cold_items_ties_by_id():
    g = _degree_graph({"i3": 2, "i1": 2, "i2": 2})
    assert select_cold_items(g, 2) == ["i1", "i2"]


def test_cold_items_exhaustive_and_too_many():
    g = _degree_graph({"i1": 5, "i2": 1, "i3": 3, "i4": 1})
    assert select_cold_items(g, 4) == ["i2", "i4", "i3", "i1"]
    with pytest.raises(ValueError):
        select_cold_items(g, 5)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(0, 12))
def test_cold_items_property(seed, k):
    g = random_graph(np.random.default_rng(seed), 8, 12, 0.3)
    cold = select_cold_items(g, k)
    deg = {i: g.degree(i) for i in g.items}
    seq = [deg[i] for i in cold]
    assert seq == sorted(seq)
    if cold:
        assert all(deg[i] >= seq[-1] for i in g.items if i not in cold)


def test_observe_full_and_blind():
    g = random_graph(np.random.default_rng(0), 34, 10)
    assert len(observe_users(g, 1.0, [], 0).users) == 34
    blind = observe_users(g, 0.0, [], 0)
    assert len(blind.users) == 0 and len(blind.edges) == 0
    assert len(observe_users(g, 0.1, [], 0).users) == 3


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), p=st.floats(0, 1), k=st.integers(0, 6))
def test_observed_view_never_touches_cold_items(seed, p, k):
    g = random_graph(np.random.default_rng(seed), 20, 10, 0.3)
    cold = select_cold_items(g, k)
    view = observe_users(g, p, cold, seed)
    assert len(view.users) == math.floor(p * g.n_users + 1e-9)
    cold_idx = {g.item_index(c) for c in cold}
    assert not any(int(i) in cold_idx for i in view.edges[:, 1])
    assert set(view.edges[:, 0].tolist()) <= set(view.users.tolist())


def test_split_single_edge_users_is_empty():
    g = InteractionGraph.from_pairs([("u1", "i1"), ("u2", "i2")])
    with pytest.warns(RuntimeWarning):
        split = split_leave_one_out(g, 0.5, 0)
    assert split.test.n_edges == 0


def test_split_exact_ten_percent():
    pairs = [(f"u{u}", f"i{i}") for u in range(10) for i in range(10)]
    split = split_leave_one_out(InteractionGraph.from_pairs(pairs), 0.1, 0)
    assert split.test.n_edges == 10
    assert sorted(u for u, _ in split.test.edge_pairs()) == sorted(f"u{u}" for u in range(10))
    # last by record order
    assert all(i == "i9" for _, i in split.test.edge_pairs())


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), frac=st.floats(0.01, 0.5))
def test_split_partitions_edges(seed, frac):
    g = random_graph(np.random.default_rng(seed), 15, 12, 0.3)
    split = split_leave_one_out(g, frac, seed)
    train, test = set(split.train.edge_pairs()), set(split.test.edge_pairs())
    assert not train & test
    assert train | test == set(g.edge_pairs())
    assert split.test.n_edges <= frac * g.n_edges + 1e-9
    users = [u for u, _ in split.test.edge_pairs()]
    assert len(users) == len(set(users))
    assert split_leave_one_out(g, frac, seed).test.edge_pairs() == split.test.edge_pairs()


def test_split_manifest_roundtrip(tmp_path):
    g = random_graph(np.random.default_rng(1), 15, 12, 0.4)
    split = split_leave_one_out(g, 0.1, 0)
    write_split_manifest(split, tmp_path / "m.tsv")
    back = read_split_manifest(g, tmp_path / "m.tsv")
    assert back.test.edge_pairs() == split.test.edge_pairs()
    assert back.train.edge_pairs() == split.train.edge_pairs()
