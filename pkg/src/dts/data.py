"""Synthetic phantom dataset, binary tensor I/O, augmentations, tiled inference.

The phantom stands in for anatomy with stable relative positions: each
foreground class is an ellipse near a canonical center, intensity-coded so the
image alone suffices for segmentation.  All generation is driven by explicit
seeds and is bit-reproducible.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from dts.errors import ConfigError, ContractError, FormatError

MAGIC = b"DTEN"
VERSION = 1
_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("uint8")}
_CODE_FOR_KIND = {"f": 1, "u": 2}


@dataclass
class SegSample:
    """One image/label pair: image (1, H, W) float32 and label (H, W) uint8."""

    image: np.ndarray
    label: np.ndarray


@dataclass
class PhantomConfig:
    size: int = 64
    num_classes: int = 4  # including background class 0
    # normalized (row, col) canonical centers for classes 1..C-1;
    # class 2 sits near class 1, class 3 far, so centroid geometry is non-trivial
    canonical_centers: tuple = ((0.30, 0.32), (0.42, 0.58), (0.74, 0.68))
    jitter_sigma: float = 0.03
    radius_ranges: tuple = ((0.10, 0.16), (0.08, 0.13), (0.09, 0.14))
    intensity_means: tuple = (0.10, 0.40, 0.65, 0.90)  # background first
    intensity_stds: tuple = (0.01, 0.02, 0.02, 0.02)
    noise_sigma: float = 0.04

    def validate(self):
        C = self.num_classes
        if C < 2:
            raise ConfigError("need at least one foreground class")
        if not (len(self.canonical_centers) == len(self.radius_ranges) == C - 1):
            raise ConfigError("centers/radius ranges must cover classes 1..C-1")
        if not (len(self.intensity_means) == len(self.intensity_stds) == C):
            raise ConfigError("intensity stats must cover all classes")
        for r, c in self.canonical_centers:
            if not (0.0 < r < 1.0 and 0.0 < c < 1.0):
                raise ConfigError(f"canonical center ({r}, {c}) outside (0,1)^2")
        for i in range(C - 1):
            for j in range(i + 1, C - 1):
                d = float(np.hypot(
                    self.canonical_centers[i][0] - self.canonical_centers[j][0],
                    self.canonical_centers[i][1] - self.canonical_centers[j][1]))
                min_r = max(self.radius_ranges[i][0], self.radius_ranges[j][0])
                if d < min_r:
                    raise ConfigError(
                        f"canonical centers of classes {i + 1} and {j + 1} are "
                        f"{d:.3f} apart, closer than the minimum radius {min_r:.3f}")


def gen_phantom(cfg: PhantomConfig, n: int, seed: int) -> list[SegSample]:
    """Generate n ellipse-phantom samples; earlier-indexed class keeps contested pixels."""
    cfg.validate()
    samples = []
    for idx in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([seed, idx]))
        samples.append(_one_phantom(cfg, rng))
    return samples


def _one_phantom(cfg: PhantomConfig, rng: np.random.Generator) -> SegSample:
    H = W = cfg.size
    rows = np.arange(H)[:, None]
    cols = np.arange(W)[None, :]
    label = np.zeros((H, W), dtype=np.uint8)
    for c in range(1, cfg.num_classes):
        cy, cx = cfg.canonical_centers[c - 1]
        cy = (cy + rng.normal(0, cfg.jitter_sigma)) * (H - 1)
        cx = (cx + rng.normal(0, cfg.jitter_sigma)) * (W - 1)
        r_lo, r_hi = cfg.radius_ranges[c - 1]
        ry = rng.uniform(r_lo, r_hi) * H
        rx = rng.uniform(r_lo, r_hi) * W
        inside = ((rows - cy) / ry) ** 2 + ((cols - cx) / rx) ** 2 <= 1.0
        label[inside & (label == 0)] = c

    image = np.empty((H, W), dtype=np.float64)
    for c in range(cfg.num_classes):
        level = rng.normal(cfg.intensity_means[c], cfg.intensity_stds[c])
        image[label == c] = level
    image += rng.normal(0, cfg.noise_sigma, size=(H, W))
    return SegSample(image=image.astype(np.float32)[None], label=label)


# ---------------------------------------------------------------------------
# tensor file format


def write_tensor(path, tensor: np.ndarray) -> None:
    """Serialize a float32 or uint8 array: magic, version, dtype, dims, payload."""
    arr = np.ascontiguousarray(tensor)
    if arr.dtype.kind not in _CODE_FOR_KIND:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    code = _CODE_FOR_KIND[arr.dtype.kind]
    arr = arr.astype(_DTYPE_CODES[code], copy=False)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<BB B", VERSION, code, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes())


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    version, code, ndim = struct.unpack_from("<BBB", raw, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if code not in _DTYPE_CODES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    dims = struct.unpack_from(f"<{ndim}I", raw, 7)
    dtype = _DTYPE_CODES[code]
    payload = raw[7 + 4 * ndim:]
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()


def write_pgm(path, gray: np.ndarray) -> None:
    """8-bit binary PGM preview; input values are clipped to [0, 1]."""
    img = np.clip(np.asarray(gray, dtype=np.float64), 0.0, 1.0)
    data = (img * 255).round().astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode())
        f.write(data.tobytes())


# ---------------------------------------------------------------------------
# dataset directory layout


def save_dataset(root, samples: Sequence[SegSample], cfg: PhantomConfig, seed: int,
                 train_frac: float = 0.8, previews: int = 4) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(exist_ok=True)
    (root / "previews").mkdir(exist_ok=True)
    for i, s in enumerate(samples):
        write_tensor(root / "images" / f"{i:04d}.dten", s.image)
        write_tensor(root / "labels" / f"{i:04d}.dten", s.label)
        if i < previews:
            write_pgm(root / "previews" / f"{i:04d}_image.pgm", s.image[0])
            write_pgm(root / "previews" / f"{i:04d}_label.pgm",
                      s.label / max(cfg.num_classes - 1, 1))
    n_train = int(round(train_frac * len(samples)))
    meta = {
        "phantom": asdict(cfg),
        "seed": seed,
        "splits": {
            "train": list(range(n_train)),
            "test": list(range(n_train, len(samples))),
        },
    }
    with open(root / "meta.json", "w") as f:
        json.dump(meta, f, indent=2)


def load_dataset(root) -> tuple[list[SegSample], dict]:
    root = Path(root)
    with open(root / "meta.json") as f:
        meta = json.load(f)
    n = len(meta["splits"]["train"]) + len(meta["splits"]["test"])
    samples = []
    for i in range(n):
        image = read_tensor(root / "images" / f"{i:04d}.dten")
        label = read_tensor(root / "labels" / f"{i:04d}.dten")
        samples.append(SegSample(image=image, label=label))
    return samples, meta


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentConfig:
    p_flip: float = 0.5
    intensity_scale: tuple = (0.9, 1.1)
    intensity_shift: tuple = (-0.1, 0.1)


def augment(sample: SegSample, rng: np.random.Generator,
            cfg: AugmentConfig = AugmentConfig()) -> SegSample:
    """Random flips / 90-degree rotations on image+label, intensity jitter on image.

    Draw order is fixed (flip_h, flip_v, quarter turns, scale, shift) so a given
    rng state always yields the same transform.
    """
    image, label = sample.image, sample.label
    if rng.random() < cfg.p_flip:
        image, label = image[..., ::-1], label[..., ::-1]
    if rng.random() < cfg.p_flip:
        image, label = image[..., ::-1, :], label[..., ::-1, :]
    k = int(rng.integers(0, 4))
    if k:
        image = np.rot90(image, k, axes=(-2, -1))
        label = np.rot90(label, k, axes=(-2, -1))
    scale = rng.uniform(*cfg.intensity_scale)
    shift = rng.uniform(*cfg.intensity_shift)
    image = (image * scale + shift).astype(np.float32)
    return SegSample(image=np.ascontiguousarray(image),
                     label=np.ascontiguousarray(label))


# ---------------------------------------------------------------------------
# sliding-window inference


def tile_starts(size: int, window: int, overlap: float) -> list[int]:
    stride = int(round(window * (1.0 - overlap)))
    stride = max(stride, 1)
    starts = list(range(0, size - window + 1, stride))
    if starts[-1] != size - window:
        starts.append(size - window)
    return starts


def sliding_window_predict(predict_fn: Callable[[np.ndarray], np.ndarray],
                           image: np.ndarray, window: int,
                           overlap: float) -> np.ndarray:
    """Tile the image, average per-pixel class probabilities, renormalize.

    predict_fn maps an image tile (ch, window, window) to class probabilities
    (C, window, window).  The final tile on each axis is snapped to the border.
    """
    H, W = image.shape[-2], image.shape[-1]
    if not (0.0 <= overlap < 1.0):
        raise ConfigError(f"overlap must be in [0, 1), got {overlap}")
    if window > min(H, W):
        raise ConfigError(f"window {window} exceeds image side {min(H, W)}")
    acc = None
    count = np.zeros((H, W), dtype=np.float64)
    for r0 in tile_starts(H, window, overlap):
        for c0 in tile_starts(W, window, overlap):
            tile = image[..., r0:r0 + window, c0:c0 + window]
            prob = np.asarray(predict_fn(tile), dtype=np.float64)
            if prob.shape[-2:] != (window, window):
                raise ContractError("predict_fn returned a wrong spatial shape")
            if acc is None:
                acc = np.zeros((prob.shape[0], H, W), dtype=np.float64)
            acc[:, r0:r0 + window, c0:c0 + window] += prob
            count[r0:r0 + window, c0:c0 + window] += 1.0
    if np.any(count == 0):
        raise ContractError("tiling left uncovered pixels")
    mean = acc / count
    return (mean / mean.sum(axis=0, keepdims=True)).astype(np.float32)
