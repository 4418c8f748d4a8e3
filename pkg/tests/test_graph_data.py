import json
import math
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cgrl.errors import FormatError, ParameterError, ValidationError
from cgrl.graph_data import (
    Graph,
    dataset_stats,
    inject_edge_noise,
    load_dataset,
    make_synthetic,
    normalize_features,
    relabel_nodes,
    save_dataset,
    symmetrize,
)

from conftest import path_graph

CORA = Path(__file__).resolve().parents[1] / "data" / "cora"


def write_toy(d: Path, edges="0\t1\n1\t2\n", labels="0\t0\n1\t1\n2\t1\n", n=3):
    d.mkdir(parents=True, exist_ok=True)
    (d / "meta.json").write_text(json.dumps(
        {"num_nodes": n, "feat_dim": 2, "num_classes": 2, "num_relations": 1, "features_file": "features.tsv"}))
    (d / "edges.tsv").write_text(edges)
    (d / "labels.tsv").write_text(labels)
    (d / "features.tsv").write_text("".join(f"{i}\t{i}.0\t1.5\n" for i in range(n)))
    (d / "splits.json").write_text(json.dumps({"train": [0], "val": [1], "test": [2]}))
    return d


def random_graph(rng, n=7, e=10, d=3, c=3):
    pairs = set()
    while len(pairs) < e:
        s, t = rng.integers(0, n, size=2)
        if s != t:
            pairs.add((int(s), int(t)))
    ei = np.array(sorted(pairs)).T
    perm = rng.permutation(n)
    return Graph(
        num_nodes=n,
        features=rng.normal(size=(n, d)).astype(np.float32),
        edge_index=ei,
        edge_relation=rng.integers(0, 2, size=e),
        edge_weight=rng.random(e),
        labels=rng.integers(0, c, size=n),
        splits={"train": perm[:2], "val": perm[2:4], "test": perm[4:]},
        num_classes=c,
        num_relations=2,
    )


class TestLoad:
    def test_toy_directory(self, tmp_path):
        g = load_dataset(write_toy(tmp_path / "toy"))
        assert g.num_nodes == 3 and g.num_classes == 2 and g.num_edges == 2
        np.testing.assert_array_equal(g.edge_relation, [0, 0])
        np.testing.assert_array_equal(g.edge_weight, [1.0, 1.0])
        np.testing.assert_array_equal(g.features[:, 0], [0.0, 1.0, 2.0])

    def test_out_of_range_endpoint_names_line(self, tmp_path):
        d = write_toy(tmp_path / "bad", edges="0\t1\n1\t99\n")
        with pytest.raises(ValidationError, match=r"edges\.tsv:2"):
            load_dataset(d)

    def test_missing_file(self, tmp_path):
        d = write_toy(tmp_path / "missing")
        (d / "splits.json").unlink()
        with pytest.raises(FormatError, match="splits.json"):
            load_dataset(d)

    def test_malformed_meta(self, tmp_path):
        d = write_toy(tmp_path / "meta")
        (d / "meta.json").write_text('{"num_nodes": 3,\n  "feat_dim": }')
        with pytest.raises(FormatError, match="line 2"):
            load_dataset(d)

    def test_bad_label(self, tmp_path):
        d = write_toy(tmp_path / "lab", labels="0\t0\n1\t5\n2\t1\n")
        with pytest.raises(ValidationError, match=r"labels\.tsv:2"):
            load_dataset(d)

    @pytest.mark.parametrize("features_file", ["features.bin", "features.tsv"])
    def test_round_trip(self, tmp_path, features_file):
        g = random_graph(np.random.default_rng(3))
        back = load_dataset(save_dataset(g, tmp_path / "rt", features_file))
        assert back == g

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_round_trip_property(self, tmp_path_factory, seed):
        g = random_graph(np.random.default_rng(seed))
        d = tmp_path_factory.mktemp("prop")
        assert load_dataset(save_dataset(g, d, "features.tsv")) == g

    def test_graph_rejects_overlapping_splits(self):
        g = path_graph(3)
        with pytest.raises(ValidationError):
            g.replace(splits={"train": [0], "val": [0], "test": [2]})

    def test_graph_rejects_self_loop(self):
        with pytest.raises(ValidationError):
            path_graph(3).replace(edge_index=np.array([[0], [0]]), edge_relation=[0], edge_weight=[1.0])

    @pytest.mark.skipif(not CORA.is_dir(), reason="Cora conversion not present")
    def test_cora_class_histogram_matches_label_file(self):
        counts = Counter()
        for line in (CORA / "labels.tsv").read_text().splitlines():
            if line.strip():
                counts[int(line.split("\t")[1])] += 1
        g = load_dataset(CORA)
        st_ = dataset_stats(g)
        assert len(st_.class_histogram) == 7
        assert st_.class_histogram == dict(counts)
        assert sum(st_.degree_histogram.values()) == g.num_nodes == 2708


class TestSynthetic:
    def test_two_cliques(self):
        g = make_synthetic(8, 2, 1.0, 0.0, 4, seed=7)
        assert g.num_edges == 2 * math.comb(4, 2)
        src, dst = g.edge_index
        assert np.all(g.labels[src] == g.labels[dst])

    def test_deterministic(self):
        assert make_synthetic(50, 3, 0.3, 0.05, 6, seed=7) == make_synthetic(50, 3, 0.3, 0.05, 6, seed=7)

    def test_edge_count_within_three_sigma(self):
        n, c, p_in, p_out = 200, 4, 0.1, 0.01
        g = make_synthetic(n, c, p_in, p_out, 16, seed=1)
        sizes = np.bincount(g.labels, minlength=c)
        within = sum(math.comb(int(s), 2) for s in sizes)
        cross = math.comb(n, 2) - within
        mean = within * p_in + cross * p_out
        sd = math.sqrt(within * p_in * (1 - p_in) + cross * p_out * (1 - p_out))
        assert abs(g.num_edges - mean) <= 3 * sd

    def test_rejects_inverted_probabilities(self):
        with pytest.raises(ParameterError):
            make_synthetic(10, 2, 0.1, 0.2, 4, seed=0)


class TestNoise:
    def test_zero_rate_identity(self, six_nodes):
        assert inject_edge_noise(six_nodes, 0.0, seed=1) == six_nodes

    def test_counts_and_preservation(self):
        rng = np.random.default_rng(0)
        g = random_graph(rng, n=12, e=10)
        out = inject_edge_noise(g, 0.5, seed=4)
        assert out.num_edges == 15
        np.testing.assert_array_equal(out.edge_index[:, :10], g.edge_index)
        np.testing.assert_array_equal(out.edge_weight[:10], g.edge_weight)
        np.testing.assert_array_equal(out.edge_relation[:10], g.edge_relation)
        np.testing.assert_array_equal(out.edge_weight[10:], 1.0)
        np.testing.assert_array_equal(out.edge_relation[10:], 0)
        old = {tuple(p) for p in g.edge_index.T.tolist()}
        for s, t in out.edge_index[:, 10:].T.tolist():
            assert s != t and (s, t) not in old and (t, s) not in old

    @settings(max_examples=30, deadline=None)
    @given(rate=st.floats(0, 1), seed=st.integers(0, 1000))
    def test_count_property(self, rate, seed):
        g = random_graph(np.random.default_rng(seed), n=20, e=15)
        out = inject_edge_noise(g, rate, seed)
        assert out.num_edges == 15 + math.floor(rate * 15)

    def test_cross_class_fraction_increases(self):
        g = make_synthetic(300, 4, 0.1, 0.005, 8, seed=2)

        def cross(h):
            s, t = h.edge_index
            return np.mean(h.labels[s] != h.labels[t])

        assert cross(inject_edge_noise(g, 0.3, seed=0)) > cross(g)

    def test_rejects_bad_rate(self, six_nodes):
        with pytest.raises(ParameterError):
            inject_edge_noise(six_nodes, 1.5, seed=0)


class TestStats:
    def test_path_graph(self):
        assert dataset_stats(path_graph(3)).degree_histogram == {1: 2, 2: 1}

    def test_constant_labels(self):
        assert dataset_stats(path_graph(5)).class_histogram == {0: 5}

    def test_json_keys_are_strings(self):
        assert dataset_stats(path_graph(3)).to_json()["degree_histogram"] == {"1": 2, "2": 1}

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        g = random_graph(rng)
        h = relabel_nodes(g, rng.permutation(g.num_nodes))
        assert dataset_stats(g) == dataset_stats(h)

    def test_symmetrize_adds_reverse_edges_once(self, path3):
        s = symmetrize(symmetrize(path3))
        assert sorted(map(tuple, s.edge_index.T.tolist())) == [(0, 1), (1, 0), (1, 2), (2, 1)]


class TestNormalize:
    def test_row_arithmetic_and_zero_row(self, path3):
        g = path3.replace(features=np.array([[2.0, 2.0], [0.0, 0.0], [1.0, 3.0]]))
        x = normalize_features(g).features
        np.testing.assert_array_equal(x, [[0.5, 0.5], [0.0, 0.0], [0.25, 0.75]])

    def test_random_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        g = path_graph(5).replace(features=rng.random((5, 4)))
        np.testing.assert_allclose(normalize_features(g).features.sum(axis=1), 1.0, atol=1e-9)
