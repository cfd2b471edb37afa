import numpy as np
import pandas as pd
import pytest

from core.errors import ConfigError, DataError
from core.state_store import generate_dataset, load_dataset, synthetic_dataset


def test_generate_layout(tmp_path):
    frame = generate_dataset(tmp_path, classes=2, per_class=5, points=32, seed=4)
    assert (tmp_path / "classes.txt").read_text() == "sphere\ncube\n"
    assert sorted(p.name for p in tmp_path.iterdir() if p.is_dir()) == ["cube", "sphere"]
    assert (tmp_path / "sphere" / "0004.xyz").exists()
    split = pd.read_csv(tmp_path / "split.csv")
    assert list(split.columns) == ["path", "label", "split"]
    assert len(split) == len(frame) == 10
    # stratified: one test cloud per class
    assert split[split["split"] == "test"]["label"].value_counts().to_dict() == {0: 1, 1: 1}


def test_generate_is_reproducible(tmp_path):
    generate_dataset(tmp_path / "a", classes=2, per_class=5, points=32, seed=4)
    generate_dataset(tmp_path / "b", classes=2, per_class=5, points=32, seed=4)
    for rel in ("split.csv", "cube/0002.xyz", "classes.txt"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_load_splits(tmp_path):
    generate_dataset(tmp_path, classes=2, per_class=5, points=32, seed=4)
    train, test = load_dataset(tmp_path, "train"), load_dataset(tmp_path, "test")
    assert len(train) == 8 and len(test) == 2
    assert train.class_names == ["sphere", "cube"]
    assert set(train.labels) == {0, 1}
    assert train.clouds[0].points.shape == (32, 3)
    assert len(load_dataset(tmp_path)) == 10


def test_load_errors(tmp_path):
    with pytest.raises(DataError):
        load_dataset(tmp_path)
    generate_dataset(tmp_path, classes=2, per_class=5, points=32, seed=4)
    with pytest.raises(ConfigError):
        load_dataset(tmp_path, "validation")


def test_synthetic_dataset_per_cloud_seeds():
    ds = synthetic_dataset(classes=3, per_class=2, points=16, seed=9)
    assert len(ds) == 6 and ds.n_classes == 3
    np.testing.assert_array_equal(ds.labels, [0, 0, 1, 1, 2, 2])
    assert ds.ids[2] == "cube/0000"
    assert not np.array_equal(ds.clouds[0].points, ds.clouds[1].points)
    with pytest.raises(ConfigError):
        synthetic_dataset(classes=9)
