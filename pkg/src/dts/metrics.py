"""Segmentation quality metrics with degenerate-mask handling.

Dice of two empty masks is defined as 1.0.  Hausdorff distance is undefined
when either mask is empty; `evaluate` records such classes as skipped instead
of folding them into the mean.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from dts.errors import ContractError


class UndefinedMetricError(ContractError):
    """Raised when a metric is requested for an empty mask."""


def dice(y: np.ndarray, p: np.ndarray) -> float:
    y = np.asarray(y, dtype=bool)
    p = np.asarray(p, dtype=bool)
    if y.shape != p.shape:
        raise ContractError(f"shape mismatch {y.shape} vs {p.shape}")
    denom = int(y.sum()) + int(p.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(y, p).sum()) / denom


def surface(mask: np.ndarray) -> np.ndarray:
    """(N, 2) coordinates of foreground pixels with a 4-neighbor background
    or out-of-bounds neighbor."""
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        return np.zeros((0, 2), dtype=np.int64)
    padded = np.pad(m, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] &
                padded[1:-1, :-2] & padded[1:-1, 2:])
    return np.argwhere(m & ~interior)


def hausdorff(y: np.ndarray, p: np.ndarray) -> float:
    """Symmetric Hausdorff distance between mask surfaces, in pixel units."""
    sy = surface(y)
    sp = surface(p)
    if len(sy) == 0 or len(sp) == 0:
        raise UndefinedMetricError("hausdorff undefined for an empty mask")
    d2 = ((sy[:, None, :] - sp[None, :, :]) ** 2).sum(axis=-1)
    directed_yp = np.sqrt(d2.min(axis=1)).max()
    directed_py = np.sqrt(d2.min(axis=0)).max()
    return float(max(directed_yp, directed_py))


@dataclass
class MetricsReport:
    num_classes: int
    dice_per_class: list          # mean over images, indexed by class
    hd_per_class: list            # mean over images where defined; None if never
    mean_dice: float              # mean over foreground classes
    mean_hd: float | None
    skipped_hd: dict = field(default_factory=dict)  # class -> count of undefined
    per_image: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @staticmethod
    def from_json(text: str) -> "MetricsReport":
        return MetricsReport(**json.loads(text))


def score_pair(true_label: np.ndarray, pred_label: np.ndarray,
               num_classes: int) -> tuple[list, list]:
    """Per-class (dice, hd) for one image; hd entries may be None (skipped)."""
    dices, hds = [], []
    for c in range(num_classes):
        y = true_label == c
        p = pred_label == c
        dices.append(dice(y, p))
        try:
            hds.append(hausdorff(y, p))
        except UndefinedMetricError:
            hds.append(None)
    return dices, hds


def evaluate(predict_fn, samples, num_classes: int,
             keep_per_image: bool = False) -> MetricsReport:
    """Score predict_fn (image -> class-probability map) over a dataset.

    Aggregates per-class Dice and Hausdorff means; foreground means skip
    classes whose HD was undefined in every image.
    """
    dice_acc = np.zeros(num_classes)
    hd_acc = np.zeros(num_classes)
    hd_count = np.zeros(num_classes, dtype=int)
    skipped: dict[int, int] = {}
    per_image = []
    n = 0
    for sample in samples:
        prob = np.asarray(predict_fn(sample.image))
        pred = prob.argmax(axis=0)
        dices, hds = score_pair(sample.label, pred, num_classes)
        dice_acc += dices
        for c, h in enumerate(hds):
            if h is None:
                skipped[c] = skipped.get(c, 0) + 1
            else:
                hd_acc[c] += h
                hd_count[c] += 1
        if keep_per_image:
            per_image.append({"dice": dices, "hd": hds})
        n += 1
    if n == 0:
        raise ContractError("empty dataset")
    dice_mean_pc = (dice_acc / n).tolist()
    hd_mean_pc = [hd_acc[c] / hd_count[c] if hd_count[c] else None
                  for c in range(num_classes)]
    fg = range(1, num_classes)
    fg_hd = [hd_mean_pc[c] for c in fg if hd_mean_pc[c] is not None]
    return MetricsReport(
        num_classes=num_classes,
        dice_per_class=dice_mean_pc,
        hd_per_class=hd_mean_pc,
        mean_dice=float(np.mean([dice_mean_pc[c] for c in fg])),
        mean_hd=float(np.mean(fg_hd)) if fg_hd else None,
        skipped_hd={str(c): v for c, v in skipped.items()},
        per_image=per_image,
    )
