import json
import logging
import shutil

import numpy as np
import pytest
from pydantic import ValidationError

from spikinghan.data_io import (
    UNLABELED,
    Splits,
    SyntheticSpec,
    generate_synthetic,
    load_dataset,
    make_splits,
    same_class_neighbor_fraction,
    write_dataset,
)
from spikinghan.errors import (
    ConfigError,
    DatasetValidationError,
    DimensionError,
    MetaPathError,
    MissingFileError,
    StratificationError,
)


@pytest.fixture
def toy_copy(acm_toy_dir, tmp_path):
    target = tmp_path / "acm_toy"
    shutil.copytree(acm_toy_dir, target)
    return target


def edit_json(path, **changes):
    data = json.loads(path.read_text())
    data.update(changes)
    path.write_text(json.dumps(data))


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestLoadFixture:
    def test_shapes(self, acm_toy):
        assert acm_toy.n == 30
        assert acm_toy.d_in == 4
        assert acm_toy.num_classes == 3
        assert acm_toy.metapath_names == ("PAP", "PSP")
        assert acm_toy.splits is None
        assert len(acm_toy.adjacencies) == 2

    def test_unlabeled_tail(self, acm_toy):
        np.testing.assert_array_equal(acm_toy.labels[:27], np.arange(27) % 3)
        np.testing.assert_array_equal(acm_toy.labels[27:], [UNLABELED] * 3)
        np.testing.assert_array_equal(acm_toy.labeled_ids, np.arange(27))

    def test_splits_on_demand(self, acm_toy):
        with pytest.raises(ConfigError):
            acm_toy.require_splits()
        bundle = acm_toy.with_splits(make_splits(acm_toy.labels, (0.6, 0.1, 0.3), seed=0))
        assert sum(bundle.require_splits().sizes()) == 27


class TestLoadErrors:
    def test_metapath_that_does_not_start_at_the_target(self, toy_copy):
        edit_json(toy_copy / "meta.json", metapaths=["APA"])
        with pytest.raises(MetaPathError):
            load_dataset(toy_copy)

    def test_label_out_of_range_names_the_line(self, toy_copy):
        lines = (toy_copy / "labels.tsv").read_text().splitlines()
        lines[4] = "4\t7"
        (toy_copy / "labels.tsv").write_text("\n".join(lines) + "\n")
        with pytest.raises(DatasetValidationError, match="line 5") as info:
            load_dataset(toy_copy)
        assert info.value.line == 5
        assert info.value.exit_code == 2

    def test_duplicate_label(self, toy_copy):
        with open(toy_copy / "labels.tsv", "a") as f:
            f.write("0\t1\n")
        with pytest.raises(DatasetValidationError, match="twice"):
            load_dataset(toy_copy)

    def test_edge_out_of_range(self, toy_copy):
        with open(toy_copy / "edges" / "P__about__S.tsv", "a") as f:
            f.write("0\t3\n")
        with pytest.raises(DatasetValidationError, match="out of range"):
            load_dataset(toy_copy)

    def test_missing_features(self, toy_copy):
        (toy_copy / "features" / "P.csv").unlink()
        with pytest.raises(MissingFileError):
            load_dataset(toy_copy)

    def test_feature_rows_must_match_nodes(self, toy_copy):
        path = toy_copy / "features" / "P.csv"
        path.write_text("".join(path.read_text().splitlines(keepends=True)[:-1]))
        with pytest.raises(DimensionError):
            load_dataset(toy_copy)

    def test_ragged_features(self, toy_copy):
        with open(toy_copy / "features" / "P.csv", "a") as f:
            f.write("1.0,2.0\n")
        with pytest.raises(DatasetValidationError, match="line 31"):
            load_dataset(toy_copy)

    def test_splits_with_unlabeled_node(self, toy_copy):
        (toy_copy / "splits.json").write_text(json.dumps({"train": [0, 28], "val": [1], "test": [2]}))
        with pytest.raises(DatasetValidationError, match="unlabeled"):
            load_dataset(toy_copy)

    def test_overlapping_splits(self, toy_copy):
        (toy_copy / "splits.json").write_text(json.dumps({"train": [0, 1], "val": [1], "test": [2]}))
        with pytest.raises(DatasetValidationError, match="both"):
            load_dataset(toy_copy)

    def test_missing_meta(self, tmp_path):
        with pytest.raises(MissingFileError):
            load_dataset(tmp_path)


class TestSplits:
    def test_two_balanced_classes(self):
        labels = np.repeat([0, 1], 50)
        splits = make_splits(labels, (0.2, 0.1, 0.7), seed=0)
        assert splits.sizes() == (20, 10, 70)
        for ids in (splits.train, splits.val, splits.test):
            assert np.count_nonzero(labels[ids] == 0) == np.count_nonzero(labels[ids] == 1)

    def test_ten_nodes(self):
        assert make_splits(np.zeros(10, dtype=int), (0.6, 0.1, 0.3), seed=0).sizes() == (6, 1, 3)

    def test_partition_of_labeled_nodes(self, acm_toy):
        splits = make_splits(acm_toy.labels, (0.2, 0.1, 0.7), seed=3)
        ids = np.concatenate([splits.train, splits.val, splits.test])
        np.testing.assert_array_equal(np.sort(ids), acm_toy.labeled_ids)
        for part in (splits.train, splits.val, splits.test):
            np.testing.assert_array_equal(part, np.sort(part))
            assert len(part) > 0

    def test_seeded(self):
        labels = np.arange(60) % 3
        first = make_splits(labels, (0.4, 0.1, 0.5), seed=8)
        assert first.as_dict() == make_splits(labels, (0.4, 0.1, 0.5), seed=8).as_dict()
        assert first.as_dict() != make_splits(labels, (0.4, 0.1, 0.5), seed=9).as_dict()

    def test_small_class(self):
        with pytest.raises(StratificationError):
            make_splits(np.array([0, 0, 1, 1, 1, 1]), (0.2, 0.1, 0.7), seed=0)

    def test_absent_class_when_counted(self):
        with pytest.raises(StratificationError):
            make_splits(np.zeros(9, dtype=int), (0.2, 0.1, 0.7), seed=0, num_classes=2)

    @pytest.mark.parametrize("ratios", [(0.5, 0.5, 0.5), (0.0, 0.5, 0.5), (0.2, 0.1)])
    def test_bad_ratios(self, ratios):
        with pytest.raises(ConfigError):
            make_splits(np.zeros(9, dtype=int), ratios, seed=0)


class TestWrite:
    def test_round_trip(self, synthetic_bundle, tmp_path):
        write_dataset(synthetic_bundle, tmp_path / "data")
        loaded = load_dataset(tmp_path / "data")

        assert loaded.metapaths == synthetic_bundle.metapaths
        assert loaded.graph.schema == synthetic_bundle.graph.schema
        for name, pairs in synthetic_bundle.graph.edges.items():
            np.testing.assert_array_equal(loaded.graph.edges[name], pairs)
        np.testing.assert_array_equal(loaded.features, synthetic_bundle.features)
        np.testing.assert_array_equal(loaded.labels, synthetic_bundle.labels)
        assert loaded.splits.as_dict() == synthetic_bundle.splits.as_dict()

    def test_fixture_rewrites_to_the_same_bundle(self, acm_toy, tmp_path):
        write_dataset(acm_toy, tmp_path / "copy")
        loaded = load_dataset(tmp_path / "copy")
        np.testing.assert_array_equal(loaded.features, acm_toy.features)
        np.testing.assert_array_equal(loaded.labels, acm_toy.labels)
        for original, again in zip(acm_toy.adjacencies, loaded.adjacencies):
            np.testing.assert_array_equal(again.to_dense(), original.to_dense())

    def test_binary_sidecar(self, synthetic_bundle, tmp_path):
        root = tmp_path / "data"
        write_dataset(synthetic_bundle, root, binary_sidecar=True)
        assert (root / "features" / "P.npy").is_file()
        np.testing.assert_array_equal(load_dataset(root).features, synthetic_bundle.features)

    def test_stale_sidecar_falls_back_to_csv(self, synthetic_bundle, tmp_path, caplog):
        root = tmp_path / "data"
        write_dataset(synthetic_bundle, root, binary_sidecar=True)
        zeros = np.zeros_like(synthetic_bundle.features)
        np.save(root / "features" / "P.npy", zeros)
        (root / "features" / "P.sha256").write_text("0" * 64 + "\n")

        with caplog.at_level(logging.WARNING, logger="spikinghan.data_io"):
            loaded = load_dataset(root)
        np.testing.assert_array_equal(loaded.features, synthetic_bundle.features)
        assert "do not cover" in caplog.text

    def test_replaced_binary_falls_back_to_csv(self, synthetic_bundle, tmp_path, caplog):
        root = tmp_path / "data"
        write_dataset(synthetic_bundle, root, binary_sidecar=True)
        np.save(root / "features" / "P.npy", synthetic_bundle.features[:, :3])

        with caplog.at_level(logging.WARNING, logger="spikinghan.data_io"):
            loaded = load_dataset(root)
        assert loaded.d_in == synthetic_bundle.d_in
        np.testing.assert_array_equal(loaded.features, synthetic_bundle.features)
        assert "P.npy" in caplog.text

    def test_same_bundle_same_bytes(self, tmp_path):
        spec = SyntheticSpec(num_target=30, seed=5)
        write_dataset(generate_synthetic(spec), tmp_path / "a")
        write_dataset(generate_synthetic(spec), tmp_path / "b")
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


class TestSynthetic:
    def test_default_shape(self, synthetic_bundle):
        assert synthetic_bundle.n == 120
        assert synthetic_bundle.d_in == 16
        assert synthetic_bundle.metapath_names == ("PAP", "PSP")
        assert np.bincount(synthetic_bundle.labels).tolist() == [40, 40, 40]
        assert synthetic_bundle.graph.is_heterogeneous
        assert synthetic_bundle.require_splits().sizes() == (24, 12, 84)

    def test_neighbourhoods_follow_labels(self, synthetic_bundle):
        assert same_class_neighbor_fraction(synthetic_bundle.adjacencies, synthetic_bundle.labels) >= 0.75

    def test_uninformative_graph_is_near_chance(self):
        bundle = generate_synthetic(SyntheticSpec(p_intra=0.3, p_inter=0.3, seed=1))
        fraction = same_class_neighbor_fraction(bundle.adjacencies, bundle.labels)
        assert 0.2 < fraction < 0.5

    def test_seeded(self):
        spec = SyntheticSpec(num_target=30, seed=2)
        first, second = generate_synthetic(spec), generate_synthetic(spec)
        np.testing.assert_array_equal(first.features, second.features)
        np.testing.assert_array_equal(first.labels, second.labels)
        for name in first.graph.edges:
            np.testing.assert_array_equal(first.graph.edges[name], second.graph.edges[name])

    def test_more_communities(self):
        bundle = generate_synthetic(SyntheticSpec(num_target=30, communities_per_class=2, aux_types=["A"]))
        assert bundle.graph.node_count["A"] == 6
        assert bundle.metapath_names == ("PAP",)

    @pytest.mark.parametrize(
        "overrides",
        [
            {"p_intra": 1.5},
            {"d_in": 2},
            {"num_target": 8},
            {"aux_types": ["P"]},
            {"unknown": 1},
        ],
    )
    def test_invalid_spec(self, overrides):
        with pytest.raises(ValidationError):
            SyntheticSpec(**overrides)

    def test_isolated_pairs_are_skipped(self):
        assert same_class_neighbor_fraction([], np.array([0, 1])) == 0.0


def test_splits_from_lists():
    splits = Splits.from_lists([0, 1], [2], [3, 4])
    assert splits.sizes() == (2, 1, 2)
    assert splits.problems(np.array([0, 1, 0, 1, UNLABELED])) == ["test id 4 is unlabeled"]
