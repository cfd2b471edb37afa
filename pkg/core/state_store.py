"""
Synthetic shape datasets, in memory and on disk.

On-disk layout under a root directory:
    classes.txt            one class name per line, line index = label
    <class>/<id>.xyz       one cloud per file, `x y z` per line
    split.csv              columns path,label,split with split in {train, test}
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from sklearn.model_selection import train_test_split

from core.errors import ConfigError, DataError
from core.geometry import CLASS_NAMES, PointCloud, SyntheticSpec, load_points, sample_synthetic, save_points

logger = logging.getLogger(__name__)

TEST_SIZE = 0.2


@dataclass
class Dataset:
    clouds: list[PointCloud]
    class_names: list[str]
    ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.ids:
            self.ids = [f"{i:04d}" for i in range(len(self.clouds))]

    def __len__(self) -> int:
        return len(self.clouds)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def labels(self) -> np.ndarray:
        return np.array([c.label for c in self.clouds], dtype=np.intp)

    def subset(self, indices) -> "Dataset":
        indices = list(indices)
        return Dataset([self.clouds[i] for i in indices], self.class_names, [self.ids[i] for i in indices])


def synthetic_dataset(classes: int = len(CLASS_NAMES), per_class: int = 125, points: int = 512,
                      seed: int = 1) -> Dataset:
    """Class-major list of labelled clouds; every cloud gets its own seed from the master seed."""
    if not 1 <= classes <= len(CLASS_NAMES):
        raise ConfigError(f"classes must be in [1, {len(CLASS_NAMES)}], got {classes}")
    if per_class < 1:
        raise ConfigError(f"per_class must be >= 1, got {per_class}")
    seeds = np.random.default_rng(seed).integers(0, 2**31 - 1, size=classes * per_class)
    clouds, ids = [], []
    for label in range(classes):
        for i in range(per_class):
            spec = SyntheticSpec(class_id=label, n_points=points, seed=int(seeds[label * per_class + i]))
            clouds.append(sample_synthetic(spec))
            ids.append(f"{CLASS_NAMES[label]}/{i:04d}")
    return Dataset(clouds, list(CLASS_NAMES[:classes]), ids)


def split_frame(dataset: Dataset, seed: int = 1) -> pd.DataFrame:
    paths = [f"{i}.xyz" for i in dataset.ids]
    labels = dataset.labels
    try:
        _, test_idx = train_test_split(np.arange(len(paths)), test_size=TEST_SIZE,
                                       stratify=labels, random_state=seed)
    except ValueError as exc:
        raise ConfigError(f"cannot stratify {len(paths)} clouds: {exc}") from None
    split = np.full(len(paths), "train", dtype=object)
    split[test_idx] = "test"
    return pd.DataFrame({"path": paths, "label": labels, "split": split})


def generate_dataset(root, classes: int = len(CLASS_NAMES), per_class: int = 125, points: int = 512,
                     seed: int = 1) -> pd.DataFrame:
    root = Path(root)
    dataset = synthetic_dataset(classes, per_class, points, seed)
    frame = split_frame(dataset, seed)
    try:
        root.mkdir(parents=True, exist_ok=True)
        for name in dataset.class_names:
            (root / name).mkdir(exist_ok=True)
        for cloud, rel in zip(dataset.clouds, frame["path"]):
            save_points(cloud, root / rel)
        (root / "classes.txt").write_text("".join(f"{n}\n" for n in dataset.class_names))
        frame.to_csv(root / "split.csv", index=False)
    except OSError as exc:
        raise DataError(f"cannot write dataset under {root}: {exc}") from None
    logger.info("wrote %d clouds (%d classes, %d points) to %s", len(dataset), classes, points, root)
    return frame


def load_dataset(root, split: str | None = None) -> Dataset:
    """Labelled clouds in split.csv order, optionally restricted to one split."""
    root = Path(root)
    try:
        class_names = (root / "classes.txt").read_text().split()
        frame = pd.read_csv(root / "split.csv")
    except FileNotFoundError as exc:
        raise DataError(f"{root} is not a dataset directory: {exc}") from None
    if split is not None:
        if split not in ("train", "test"):
            raise ConfigError(f"split must be 'train' or 'test', got {split!r}")
        frame = frame[frame["split"] == split]
    clouds, ids = [], []
    for rel, label in zip(frame["path"], frame["label"]):
        if not 0 <= label < len(class_names):
            raise DataError(f"{rel}: label {label} outside classes.txt")
        cloud = load_points(root / rel)
        cloud.label = int(label)
        clouds.append(cloud)
        ids.append(rel.removesuffix(".xyz"))
    if not clouds:
        raise DataError(f"no clouds in {root} for split {split!r}")
    return Dataset(clouds, class_names, ids)
