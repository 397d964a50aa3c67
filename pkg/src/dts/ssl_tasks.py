"""Self-supervised pretraining tasks for the conditional encoder.

Three pretext losses over a pair of masked views of each image:

* contrastive (NT-Xent) between pooled embeddings of the two views,
* 9-way prediction of which 3x3 grid cell was blanked in the first view,
* reconstruction of the second view's masked pixels (L2 on masked pixels only).

Masked patches are replaced by zeros rather than a learned token so the loss
values are exactly reproducible.  When the image side is not divisible by 3
the location-task grid uses near-equal integer cells.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from dts.errors import ConfigError, ContractError
from dts.network import ModelConfig, WindowedEncoder

Tensor = torch.Tensor


@dataclass
class SSLLossWeights:
    contrastive: float = 1.0
    location: float = 1.0
    reconstruction: float = 1.0

    def validate(self):
        vals = (self.contrastive, self.location, self.reconstruction)
        if any(v < 0 for v in vals):
            raise ConfigError(f"loss weights must be non-negative, got {vals}")
        if all(v == 0 for v in vals):
            raise ConfigError("at least one loss weight must be positive")


@dataclass
class ViewPair:
    view_i: Tensor            # masked + one grid cell blanked
    view_j: Tensor            # masked only (reconstruction target view)
    mask_i: Tensor            # (B, H, W) bool, True where patches were zeroed
    mask_j: Tensor
    loc_target: Tensor        # (B,) long, blanked cell index per sample
    h_i: Optional[Tensor] = None
    h_j: Optional[Tensor] = None


# ---------------------------------------------------------------------------
# masking


def mask_patches(image: Tensor, patch_size: int, ratio: float,
                 rng: torch.Generator):
    """Zero out round(ratio * N) randomly chosen patches of a (C, H, W) image.

    Returns the masked image and a (H, W) bool mask marking exactly the
    replaced pixels.  Rounding is half-up so the count is platform-stable.
    """
    if image.ndim != 3:
        raise ContractError(f"expected (C, H, W) image, got {tuple(image.shape)}")
    C, H, W = image.shape
    if H % patch_size or W % patch_size:
        raise ConfigError(f"image side {H}x{W} not divisible by patch {patch_size}")
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"mask ratio must be in [0, 1], got {ratio}")
    n_h, n_w = H // patch_size, W // patch_size
    total = n_h * n_w
    m = int(math.floor(ratio * total + 0.5))
    chosen = torch.randperm(total, generator=rng)[:m]
    patch_mask = torch.zeros(total, dtype=torch.bool)
    patch_mask[chosen] = True
    pixel_mask = patch_mask.view(n_h, n_w) \
        .repeat_interleave(patch_size, 0).repeat_interleave(patch_size, 1)
    masked = image.clone()
    masked[:, pixel_mask] = 0.0
    return masked, pixel_mask


def grid_cell_bounds(side: int, cells: int = 3):
    """Near-equal integer split of [0, side) into `cells` intervals."""
    edges = [side * i // cells for i in range(cells + 1)]
    return [(edges[i], edges[i + 1]) for i in range(cells)]


def mask_grid_cell(image: Tensor, cell: int) -> Tensor:
    """Zero one cell of the 3x3 grid (row-major cell index in [0, 8])."""
    if not 0 <= cell <= 8:
        raise ContractError(f"cell index must be in [0, 8], got {cell}")
    H, W = image.shape[-2:]
    rows = grid_cell_bounds(H)
    cols = grid_cell_bounds(W)
    r, c = divmod(cell, 3)
    out = image.clone()
    out[..., rows[r][0]:rows[r][1], cols[c][0]:cols[c][1]] = 0.0
    return out


def draw_cell_indices(n: int, rng: torch.Generator) -> Tensor:
    return torch.randint(0, 9, (n,), generator=rng)


def make_view_pair(images: Tensor, patch_size: int, ratio: float,
                   rng: torch.Generator) -> ViewPair:
    """Two independently masked views per image; the first also loses one
    3x3 grid cell (the location-task target)."""
    if images.ndim != 4:
        raise ContractError(f"expected (B, C, H, W) batch, got {tuple(images.shape)}")
    targets = draw_cell_indices(images.shape[0], rng)
    vi, vj, mi, mj = [], [], [], []
    for b in range(images.shape[0]):
        masked_i, mask_i = mask_patches(images[b], patch_size, ratio, rng)
        masked_j, mask_j = mask_patches(images[b], patch_size, ratio, rng)
        vi.append(mask_grid_cell(masked_i, int(targets[b])))
        vj.append(masked_j)
        mi.append(mask_i)
        mj.append(mask_j)
    return ViewPair(view_i=torch.stack(vi), view_j=torch.stack(vj),
                    mask_i=torch.stack(mi), mask_j=torch.stack(mj),
                    loc_target=targets)


# ---------------------------------------------------------------------------
# losses


def contrastive_loss(z_i: Tensor, z_j: Tensor,
                     temperature: float = 0.5) -> Tensor:
    """NT-Xent over the 2B embeddings; positives are the (i, j) view pairs,
    negatives every other row.  Rows are L2-normalized internally."""
    if z_i.shape != z_j.shape or z_i.ndim != 2:
        raise ContractError(
            f"expected matching (B, D) embeddings, got {tuple(z_i.shape)} "
            f"and {tuple(z_j.shape)}")
    B = z_i.shape[0]
    if B < 2:
        raise ConfigError(f"contrastive loss needs batch >= 2, got {B}")
    z = F.normalize(torch.cat([z_i, z_j], dim=0), dim=1)
    sim = z @ z.T / temperature
    sim.fill_diagonal_(float("-inf"))  # a row is never its own positive
    targets = torch.cat([torch.arange(B, 2 * B), torch.arange(0, B)])
    return F.cross_entropy(sim, targets)


def location_logits(encoder: WindowedEncoder, head: nn.Module,
                    view: Tensor) -> Tensor:
    return head(pooled_embedding(encoder(view)))


def location_task(view: Tensor, encoder: WindowedEncoder, head: nn.Module,
                  rng: torch.Generator):
    """Blank one 3x3 cell per sample and predict which one (9-way logits)."""
    targets = draw_cell_indices(view.shape[0], rng)
    blanked = torch.stack([mask_grid_cell(view[b], int(targets[b]))
                           for b in range(view.shape[0])])
    return location_logits(encoder, head, blanked), targets


def location_loss(logits: Tensor, target: Tensor) -> Tensor:
    return F.cross_entropy(logits, target)


def reconstruction_loss(pred: Tensor, original: Tensor,
                        mask: Tensor) -> Tensor:
    """Mean squared error over masked pixels only."""
    if pred.shape != original.shape:
        raise ContractError(
            f"shape mismatch {tuple(pred.shape)} vs {tuple(original.shape)}")
    if not bool(mask.any()):
        raise ContractError("reconstruction loss needs a non-empty mask")
    m = mask.to(pred.dtype)
    while m.ndim < pred.ndim - 1:  # add batch dims as needed
        m = m.unsqueeze(0)
    m = m.unsqueeze(-3)  # broadcast over channels
    sq = (pred - original) ** 2 * m
    channels = pred.shape[-3]
    return sq.sum() / (m.sum() * channels)


# ---------------------------------------------------------------------------
# heads + step


def pooled_embedding(levels) -> Tensor:
    """Global average pool of the deepest pyramid level -> (B, D)."""
    return levels[-1].mean(dim=(-2, -1))


class SSLHeads(nn.Module):
    """Projection, location, and reconstruction heads over encoder features."""

    def __init__(self, cfg: ModelConfig, proj_dim: int = 64):
        super().__init__()
        deep = cfg.stage_dims[-1]
        self.project = nn.Sequential(nn.Linear(deep, deep), nn.SiLU(),
                                     nn.Linear(deep, proj_dim))
        self.locate = nn.Linear(deep, 9)
        self.reconstruct = nn.Sequential(
            nn.Conv2d(cfg.stage_dims[0],
                      cfg.patch_size ** 2 * cfg.image_channels, 1),
            nn.PixelShuffle(cfg.patch_size))


def ssl_step(batch: Tensor, encoder: WindowedEncoder, heads: SSLHeads,
             weights: SSLLossWeights, rng: torch.Generator, *,
             temperature: float = 0.5, mask_ratio: float = 0.4,
             patch_size: Optional[int] = None):
    """One forward pass of all three pretext losses on an image batch.

    Returns (total, breakdown) where total = w_cl*L_cl + w_loc*L_loc +
    w_rec*L_rec accumulated in that fixed order (so the total is exactly
    linear in the weights) and breakdown maps each loss name to its detached
    unweighted value.
    """
    weights.validate()
    if patch_size is None:
        patch_size = encoder.cfg.patch_size
    pair = make_view_pair(batch, patch_size, mask_ratio, rng)
    levels_i = encoder(pair.view_i)
    levels_j = encoder(pair.view_j)
    pair.h_i = pooled_embedding(levels_i)
    pair.h_j = pooled_embedding(levels_j)

    l_cl = contrastive_loss(heads.project(pair.h_i), heads.project(pair.h_j),
                            temperature)
    l_loc = location_loss(heads.locate(pair.h_i), pair.loc_target)
    l_rec = reconstruction_loss(heads.reconstruct(levels_j[0]), batch,
                                pair.mask_j)
    total = weights.contrastive * l_cl
    total = total + weights.location * l_loc
    total = total + weights.reconstruction * l_rec
    breakdown = {"contrastive": l_cl.detach(), "location": l_loc.detach(),
                 "reconstruction": l_rec.detach()}
    return total, breakdown
