"""Synthetic three-class image set standing in for a real benchmark."""
import logging
from dataclasses import dataclass

import numpy as np

from .exceptions import CalibrationError, ShapeError, UsageError

logger = logging.getLogger(__name__)

SPLITS = ("train", "calib", "eval")
CLASS_NAMES = ("stripes", "blob", "checker")
# per-split offsets keep the splits disjoint for a shared run seed
_SPLIT_STREAMS = {"train": 0, "calib": 1, "eval": 2}


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    images: np.ndarray
    labels: np.ndarray
    split: str = "train"

    def __post_init__(self):
        images = np.array(self.images, dtype=np.float64)
        labels = np.array(self.labels, dtype=np.int64)
        if images.ndim != 4 or len(images) != len(labels):
            raise ShapeError("dataset needs (N, H, W, C) images and N labels", images=images.shape, labels=labels.shape)
        if self.split not in SPLITS:
            raise UsageError(f"unknown split '{self.split}'", choices=",".join(SPLITS))
        images.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.labels)

    @property
    def classes(self):
        return int(self.labels.max()) + 1 if len(self) else 0

    def class_counts(self):
        return np.bincount(self.labels, minlength=len(CLASS_NAMES))

    def subset(self, indices, split=None):
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.images[indices], self.labels[indices], split or self.split)

    def check_against(self, config):
        if self.images.shape[1:] != config.image_shape:
            raise ShapeError("dataset images do not match the config", expected=config.image_shape, got=self.images.shape[1:])
        if len(self) and (self.labels.min() < 0 or self.labels.max() >= config.classes):
            raise ShapeError("dataset labels fall outside the config's classes", classes=config.classes)

    def equals(self, other):
        return (
            self.split == other.split
            and np.array_equal(self.images, other.images)
            and np.array_equal(self.labels, other.labels)
        )


def _stripes(rng, grid):
    yy, xx = grid
    angle = rng.uniform(0, np.pi)
    frequency = rng.uniform(0.35, 0.6)
    phase = rng.uniform(0, 2 * np.pi)
    wave = 0.5 + 0.5 * np.sin(frequency * (np.cos(angle) * xx + np.sin(angle) * yy) + phase)
    colour = np.array([0.9, 0.3, 0.2]) + rng.normal(0, 0.05, 3)
    return wave[..., None] * colour


def _blob(rng, grid):
    yy, xx = grid
    size = yy.shape[0]
    cy, cx = rng.uniform(0.3 * size, 0.7 * size, 2)
    radius = rng.uniform(0.15 * size, 0.3 * size)
    blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius**2))
    colour = np.array([0.2, 0.8, 0.3]) + rng.normal(0, 0.05, 3)
    return blob[..., None] * colour


def _checker(rng, grid):
    yy, xx = grid
    cell = rng.integers(3, 7)
    oy, ox = rng.integers(0, cell, 2)
    board = (((yy + oy) // cell + (xx + ox) // cell) % 2).astype(np.float64)
    colour = np.array([0.25, 0.35, 0.9]) + rng.normal(0, 0.05, 3)
    return board[..., None] * colour


_PAINTERS = (_stripes, _blob, _checker)


def generate_toy_dataset(seed, n_per_class, image_size=32, split="train", classes=3, noise=0.05):
    """Class-balanced, deterministic images: class k uses the k-th texture family."""
    if n_per_class < 1:
        raise UsageError("n_per_class must be >= 1", n_per_class=n_per_class)
    if not 1 <= classes <= len(_PAINTERS):
        raise UsageError(f"the toy dataset has at most {len(_PAINTERS)} classes", classes=classes)
    rng = np.random.default_rng([int(seed), _SPLIT_STREAMS.get(split, 0)])
    grid = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    images, labels = [], []
    for label, painter in enumerate(_PAINTERS[:classes]):
        for _ in range(n_per_class):
            image = painter(rng, grid) + rng.normal(0, noise, (image_size, image_size, 3))
            images.append(np.clip(image, 0.0, 1.0))
            labels.append(label)
    order = rng.permutation(len(labels))
    logger.info(f"Generated {len(labels)} {split} images ({n_per_class} per class, seed={seed})")
    return LabeledDataset(np.stack(images)[order], np.asarray(labels)[order], split)


def sample_calibration(dataset, size, seed):
    """Random calibration subset drawn without replacement."""
    if len(dataset) == 0 or size < 1:
        raise CalibrationError("calibration set is empty", images=len(dataset), size=size)
    if size > len(dataset):
        raise CalibrationError("calibration set larger than its source", size=size, images=len(dataset))
    rng = np.random.default_rng([int(seed), _SPLIT_STREAMS["calib"]])
    indices = np.sort(rng.choice(len(dataset), size=size, replace=False))
    return dataset.subset(indices, split="calib")
