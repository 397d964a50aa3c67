"""Distance-aware label smoothing driven by inter-class centroid geometry.

A pixel of class c keeps mass 1 - alpha; the remaining alpha is split among
the k spatially nearest foreground classes with weights proportional to
exp(-d / tau), where d is the distance between dataset-level class centroids.
Smoothing therefore encodes which structures tend to sit next to each other.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from dts.errors import ConfigError, DataError


@dataclass
class ClassGeometry:
    """Per-class centroids in normalized [0,1]^2 plus the pairwise distances."""

    centroids: np.ndarray  # (C, 2) rows of (row, col); undefined where absent
    present: np.ndarray    # (C,) bool
    dist: np.ndarray       # (C, C) Euclidean, in normalized units

    @property
    def num_classes(self) -> int:
        return len(self.present)


@dataclass
class SmoothingConfig:
    k: int = 3
    alpha: float = 0.1
    tau: float = 0.2

    def validate(self):
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if not (0.0 <= self.alpha < 0.5):
            raise ConfigError(f"alpha must be in [0, 0.5), got {self.alpha}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")


def _distances(centroids: np.ndarray, present: np.ndarray) -> np.ndarray:
    d = np.linalg.norm(centroids[:, None, :] - centroids[None, :, :], axis=-1)
    d[~present, :] = np.inf
    d[:, ~present] = np.inf
    np.fill_diagonal(d, 0.0)
    return d


def class_centroids(label_map: np.ndarray, num_classes: int) -> ClassGeometry:
    """Mean pixel coordinate per class, normalized by (H-1, W-1)."""
    label_map = np.asarray(label_map)
    if label_map.max(initial=0) >= num_classes:
        raise DataError(
            f"label id {int(label_map.max())} out of range for C={num_classes}")
    H, W = label_map.shape
    centroids = np.zeros((num_classes, 2))
    present = np.zeros(num_classes, dtype=bool)
    for c in range(num_classes):
        ys, xs = np.nonzero(label_map == c)
        if len(ys):
            present[c] = True
            centroids[c] = (ys.mean() / max(H - 1, 1), xs.mean() / max(W - 1, 1))
    return ClassGeometry(centroids, present, _distances(centroids, present))


def dataset_geometry(geometries: Sequence[ClassGeometry]) -> ClassGeometry:
    """Average per-class centroids over the images where each class appears."""
    if not geometries:
        raise DataError("no geometries given")
    C = geometries[0].num_classes
    total = np.zeros((C, 2))
    count = np.zeros(C)
    for g in geometries:
        total[g.present] += g.centroids[g.present]
        count[g.present] += 1
    present = count > 0
    centroids = np.zeros((C, 2))
    centroids[present] = total[present] / count[present, None]
    return ClassGeometry(centroids, present, _distances(centroids, present))


def merge_geometry(prior: ClassGeometry, local: ClassGeometry) -> ClassGeometry:
    """Fill classes missing from the dataset prior with per-image centroids."""
    centroids = prior.centroids.copy()
    present = prior.present.copy()
    fill = ~prior.present & local.present
    centroids[fill] = local.centroids[fill]
    present |= local.present
    return ClassGeometry(centroids, present, _distances(centroids, present))


def smoothing_table(geometry: ClassGeometry, cfg: SmoothingConfig,
                    background: int = 0) -> np.ndarray:
    """Row c = the smoothed target distribution for a pixel labeled c.

    Neighbors are the k nearest *present foreground* classes (background is
    never a recipient); when none exist the alpha mass is spread uniformly
    over all other classes.
    """
    cfg.validate()
    C = geometry.num_classes
    table = np.zeros((C, C))
    recipients = geometry.present.copy()
    recipients[background] = False
    for c in range(C):
        table[c, c] = 1.0 - cfg.alpha
        mask = recipients.copy()
        mask[c] = False
        candidates = np.nonzero(mask)[0]
        candidates = candidates[np.isfinite(geometry.dist[c, candidates])]
        if len(candidates) == 0:
            others = [j for j in range(C) if j != c]
            table[c, others] = cfg.alpha / len(others)
            continue
        order = np.argsort(geometry.dist[c, candidates], kind="stable")
        chosen = candidates[order[:cfg.k]]
        w = np.exp(-geometry.dist[c, chosen] / cfg.tau)
        table[c, chosen] = cfg.alpha * w / w.sum()
    return table


def smooth_labels(label_map: np.ndarray, geometry: ClassGeometry,
                  cfg: SmoothingConfig, background: int = 0) -> np.ndarray:
    """Per-pixel soft labels (C, H, W) float32; argmax always equals the input."""
    label_map = np.asarray(label_map)
    used = np.unique(label_map)
    if used.max(initial=0) >= geometry.num_classes:
        raise DataError("label id out of range for the given geometry")
    if not np.all(geometry.present[used]):
        missing = [int(c) for c in used if not geometry.present[c]]
        raise DataError(f"geometry lacks centroids for classes {missing}")
    table = smoothing_table(geometry, cfg, background=background)
    soft = table[label_map.astype(np.int64)]          # (H, W, C)
    return np.ascontiguousarray(soft.transpose(2, 0, 1)).astype(np.float32)


def one_hot(label_map: np.ndarray, num_classes: int) -> np.ndarray:
    """Hard one-hot encoding (C, H, W) float32."""
    eye = np.eye(num_classes, dtype=np.float32)
    return np.ascontiguousarray(eye[np.asarray(label_map, dtype=np.int64)]
                                .transpose(2, 0, 1))
