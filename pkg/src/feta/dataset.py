from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError

__all__ = ["LabeledDataset"]


@dataclass
class LabeledDataset:
    """Flat images in [0, 1] with integer labels.

    ``images`` is ``(N, d)`` with ``d = height * width * channels``, stored
    channel-major. ``n_star`` is the public dataset-size estimate; it defaults
    to ``N``.
    """

    images: np.ndarray
    labels: np.ndarray
    shape: tuple[int, int, int] = (0, 0, 1)
    n_classes: int | None = None
    n_star: int | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 2:
            raise DataError(f"images must be (N, d), got shape {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise DataError(f"{self.labels.shape[0]} labels for {self.images.shape[0]} images")
        if self.shape == (0, 0, 1):
            side = int(round(np.sqrt(self.images.shape[1])))
            self.shape = (side, side, 1) if side * side == self.images.shape[1] else (1, self.images.shape[1], 1)
        self.shape = tuple(int(s) for s in self.shape)
        if int(np.prod(self.shape)) != self.images.shape[1]:
            raise DataError(f"image shape {self.shape} does not match d={self.images.shape[1]}")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1 or not np.isfinite(self.images).all()):
            raise DataError("pixel values must lie in [0, 1]")
        if self.n_classes is None:
            self.n_classes = int(self.labels.max()) + 1 if self.labels.size else 0
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DataError(f"labels must lie in 0..{self.n_classes - 1}")
        if self.n_star is None:
            self.n_star = len(self.labels)

    def __len__(self):
        return self.images.shape[0]

    @property
    def d(self) -> int:
        return self.images.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)

    def class_images(self, c: int) -> np.ndarray:
        return self.images[self.labels == c]

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.images[idx], self.labels[idx], self.shape, self.n_classes)

    def require_coverage(self):
        empty = np.flatnonzero(self.class_counts() == 0)
        if empty.size:
            raise DataError(f"classes {empty.tolist()} have no images")
