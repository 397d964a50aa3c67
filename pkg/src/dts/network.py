"""Noise-prediction network: two windowed-attention encoders and a UNet-style
decoder with boundary-aware refinement.

The diffusion encoder sees the noisy label stacked with the image and is
conditioned on the step index through per-block scale-and-shift; the
conditional encoder sees the image alone (and is the transfer target for
self-supervised pretraining).  Their pyramids are fused by addition and
decoded into per-scale logits that the refinement cascade sharpens into the
final noise estimate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from dts.errors import ConfigError, ContractError
from dts.rba import RBACascade

Tensor = torch.Tensor


@dataclass
class ModelConfig:
    image_size: int = 64
    image_channels: int = 1
    num_classes: int = 4
    patch_size: int = 4
    stage_dims: tuple = (32, 64, 128, 256)
    stage_depths: tuple = (2, 2, 2, 2)
    num_heads: tuple = (2, 4, 8, 8)
    window_size: int = 4
    time_dim: int = 128
    mlp_ratio: float = 4.0
    fullres_channels: int = 16

    @property
    def num_stages(self) -> int:
        return len(self.stage_dims)

    @property
    def in_channels(self) -> int:
        return self.image_channels + self.num_classes

    def grid_side(self, stage: int) -> int:
        return self.image_size // self.patch_size // (2 ** stage)

    def effective_window(self, stage: int) -> int:
        return min(self.window_size, self.grid_side(stage))

    def validate(self):
        S = self.num_stages
        if not (len(self.stage_depths) == len(self.num_heads) == S):
            raise ConfigError("stage_dims/stage_depths/num_heads lengths differ")
        down = self.patch_size * 2 ** (S - 1)
        if self.image_size % down != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by "
                f"patch_size*2^{S - 1} = {down}")
        for i in range(S):
            side = self.grid_side(i)
            w = self.effective_window(i)
            if side % w != 0:
                raise ConfigError(
                    f"stage {i}: grid side {side} not divisible by window {w}")
            if self.stage_dims[i] % self.num_heads[i] != 0:
                raise ConfigError(
                    f"stage {i}: width {self.stage_dims[i]} not divisible by "
                    f"{self.num_heads[i]} heads")
        if self.time_dim % 2 != 0:
            raise ConfigError(f"time_dim must be even, got {self.time_dim}")


# ---------------------------------------------------------------------------
# time embedding


def time_embed_raw(t, dim: int, base: float = 10000.0,
                   dtype=torch.float32) -> Tensor:
    """Sinusoidal step embedding: [sin(w_k t)..., cos(w_k t)...], w_k = base^(-k/half)."""
    if dim % 2 != 0:
        raise ConfigError(f"embedding dim must be even, got {dim}")
    t = torch.as_tensor(t, dtype=dtype)
    squeeze = t.ndim == 0
    t = t.reshape(-1, 1)
    half = dim // 2
    freqs = torch.exp(-math.log(base) * torch.arange(half, dtype=dtype) / half)
    ang = t * freqs
    emb = torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)
    return emb.squeeze(0) if squeeze else emb


class TimeEmbedding(nn.Module):
    """Sinusoid followed by a two-layer MLP."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t, dtype=torch.float32) -> Tensor:
        return self.mlp(time_embed_raw(t, self.dim, dtype=dtype))


# ---------------------------------------------------------------------------
# windowed attention


def window_partition(x: Tensor, window: int, shift: int = 0) -> Tensor:
    """(B, H, W, C) -> (B*nW, window*window, C) after a cyclic shift."""
    B, H, W, C = x.shape
    if H % window or W % window:
        raise ConfigError(f"grid {H}x{W} not divisible by window {window}")
    if shift:
        x = torch.roll(x, shifts=(-shift, -shift), dims=(1, 2))
    x = x.view(B, H // window, window, W // window, window, C)
    x = x.permute(0, 1, 3, 2, 4, 5).reshape(-1, window * window, C)
    return x


def window_unpartition(windows: Tensor, window: int, shift: int,
                       H: int, W: int) -> Tensor:
    """Inverse of window_partition."""
    C = windows.shape[-1]
    B = windows.shape[0] // ((H // window) * (W // window))
    x = windows.view(B, H // window, W // window, window, window, C)
    x = x.permute(0, 1, 3, 2, 4, 5).reshape(B, H, W, C)
    if shift:
        x = torch.roll(x, shifts=(shift, shift), dims=(1, 2))
    return x


class WindowAttention(nn.Module):
    """Multi-head self-attention inside a window, with relative position bias."""

    def __init__(self, dim: int, num_heads: int, window: int):
        super().__init__()
        if dim % num_heads:
            raise ConfigError(f"width {dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.window = window
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.bias_table = nn.Parameter(
            torch.zeros((2 * window - 1) ** 2, num_heads))
        nn.init.trunc_normal_(self.bias_table, std=0.02)
        coords = torch.stack(torch.meshgrid(
            torch.arange(window), torch.arange(window), indexing="ij"))
        flat = coords.flatten(1)  # (2, window^2)
        rel = flat[:, :, None] - flat[:, None, :] + window - 1
        self.register_buffer("bias_index",
                             rel[0] * (2 * window - 1) + rel[1],
                             persistent=False)
        self.keep_attn = False
        self.last_attn: Optional[Tensor] = None

    def forward(self, x: Tensor) -> Tensor:
        B_, N, C = x.shape
        qkv = self.qkv(x).reshape(B_, N, 3, self.num_heads, C // self.num_heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        bias = self.bias_table[self.bias_index.reshape(-1)]
        bias = bias.reshape(N, N, -1).permute(2, 0, 1)
        attn = torch.softmax(attn + bias.unsqueeze(0).to(attn.dtype), dim=-1)
        if self.keep_attn:
            self.last_attn = attn.detach()
        out = (attn @ v).transpose(1, 2).reshape(B_, N, C)
        return self.proj(out)


class SwinBlock(nn.Module):
    """Pre-norm windowed attention + MLP, both residual.

    The step embedding enters as a per-channel scale-and-shift of the
    normalized tokens ahead of attention, so zeroed output projections leave
    the block an exact identity.
    """

    def __init__(self, dim: int, num_heads: int, window: int, shift: int,
                 mlp_ratio: float, time_dim: Optional[int] = None):
        super().__init__()
        self.window = window
        self.shift = shift
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, num_heads, window)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.SiLU(),
                                 nn.Linear(hidden, dim))
        self.time_proj = nn.Linear(time_dim, 2 * dim) if time_dim else None
        if self.time_proj is not None:
            nn.init.trunc_normal_(self.time_proj.weight, std=0.02)
            nn.init.zeros_(self.time_proj.bias)

    def forward(self, x: Tensor, temb: Optional[Tensor] = None) -> Tensor:
        B, H, W, C = x.shape
        h = self.norm1(x)
        if self.time_proj is not None:
            if temb is None:
                raise ContractError("block is time-conditioned but got no embedding")
            scale, shift = self.time_proj(temb).view(B, 1, 1, 2 * C).chunk(2, dim=-1)
            h = h * (1.0 + scale) + shift
        windows = window_partition(h, self.window, self.shift)
        attended = self.attn(windows)
        x = x + window_unpartition(attended, self.window, self.shift, H, W)
        return x + self.mlp(self.norm2(x))


class PatchEmbed(nn.Module):
    def __init__(self, in_channels: int, dim: int, patch: int):
        super().__init__()
        self.proj = nn.Conv2d(in_channels, dim, kernel_size=patch, stride=patch)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x: Tensor) -> Tensor:
        x = self.proj(x).permute(0, 2, 3, 1)  # channel-last token grid
        return self.norm(x)


class PatchMerging(nn.Module):
    """2x2 neighborhood concat -> norm -> linear projection to the next width."""

    def __init__(self, dim_in: int, dim_out: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim_in)
        self.reduce = nn.Linear(4 * dim_in, dim_out, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        B, H, W, C = x.shape
        x = torch.cat([x[:, 0::2, 0::2], x[:, 1::2, 0::2],
                       x[:, 0::2, 1::2], x[:, 1::2, 1::2]], dim=-1)
        return self.reduce(self.norm(x))


class WindowedEncoder(nn.Module):
    """Hierarchical encoder producing a 4-level pyramid (channel-first maps)."""

    def __init__(self, cfg: ModelConfig, in_channels: int, with_time: bool):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.with_time = with_time
        self.patch_embed = PatchEmbed(in_channels, cfg.stage_dims[0], cfg.patch_size)
        self.stages = nn.ModuleList()
        self.merges = nn.ModuleList()
        tdim = cfg.time_dim if with_time else None
        for i in range(cfg.num_stages):
            w = cfg.effective_window(i)
            side = cfg.grid_side(i)
            blocks = nn.ModuleList()
            for b in range(cfg.stage_depths[i]):
                shift = w // 2 if (b % 2 == 1 and w < side) else 0
                blocks.append(SwinBlock(cfg.stage_dims[i], cfg.num_heads[i], w,
                                        shift, cfg.mlp_ratio, tdim))
            self.stages.append(blocks)
            if i + 1 < cfg.num_stages:
                self.merges.append(PatchMerging(cfg.stage_dims[i],
                                                cfg.stage_dims[i + 1]))

    def forward(self, x: Tensor, temb: Optional[Tensor] = None) -> list[Tensor]:
        if self.with_time and temb is None:
            raise ContractError("time-conditioned encoder needs a step embedding")
        x = self.patch_embed(x)
        levels = []
        for i, blocks in enumerate(self.stages):
            for block in blocks:
                x = block(x, temb if self.with_time else None)
            levels.append(x.permute(0, 3, 1, 2))
            if i + 1 < len(self.stages):
                x = self.merges[i](x)
        return levels


def fuse(diff: Sequence[Tensor], cond: Sequence[Tensor]) -> list[Tensor]:
    """Per-level elementwise addition of two pyramids."""
    if len(diff) != len(cond):
        raise ContractError(f"pyramid depth mismatch {len(diff)} vs {len(cond)}")
    out = []
    for i, (a, b) in enumerate(zip(diff, cond)):
        if a.shape != b.shape:
            raise ContractError(
                f"level {i} shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
        out.append(a + b)
    return out


# ---------------------------------------------------------------------------
# decoder


def _norm(ch: int) -> nn.Module:
    return nn.GroupNorm(8 if ch % 8 == 0 else 1, ch)


class ConvBlock(nn.Module):
    def __init__(self, ch_in: int, ch_out: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(ch_in, ch_out, 3, padding=1), _norm(ch_out), nn.SiLU(),
            nn.Conv2d(ch_out, ch_out, 3, padding=1), _norm(ch_out), nn.SiLU())

    def forward(self, x: Tensor) -> Tensor:
        return self.body(x)


@dataclass
class DecoderOut:
    logits: list         # per decoder scale, finest first: sides H/p .. H/(p*8)
    features: list       # decoder feature maps matching logits scales
    full_res: Tensor     # full-resolution feature map from the fusion neck


class Decoder(nn.Module):
    """Upsample the deepest level with skip connections; emit logits per scale
    plus a full-resolution feature head for the refinement cascade."""

    def __init__(self, cfg: ModelConfig, hint_channels: int = 0):
        super().__init__()
        self.cfg = cfg
        dims = cfg.stage_dims
        self.blocks = nn.ModuleList(
            ConvBlock(dims[i + 1] + dims[i], dims[i])
            for i in range(cfg.num_stages - 1))
        self.heads = nn.ModuleList(
            nn.Conv2d(dims[i], cfg.num_classes, 1) for i in range(cfg.num_stages))
        self.fullres_neck = nn.Sequential(
            nn.Conv2d(dims[0] + hint_channels, cfg.fullres_channels, 3, padding=1),
            _norm(cfg.fullres_channels), nn.SiLU(),
            nn.Conv2d(cfg.fullres_channels, cfg.fullres_channels, 3, padding=1),
            nn.SiLU())

    def forward(self, pyramid: Sequence[Tensor],
                hint: Optional[Tensor] = None) -> DecoderOut:
        S = self.cfg.num_stages
        if len(pyramid) != S:
            raise ContractError(f"expected {S} pyramid levels, got {len(pyramid)}")
        feats = [None] * S
        feats[S - 1] = pyramid[S - 1]
        for i in range(S - 2, -1, -1):
            up = F.interpolate(feats[i + 1], scale_factor=2, mode="nearest")
            feats[i] = self.blocks[i](torch.cat([up, pyramid[i]], dim=1))
        logits = [self.heads[i](feats[i]) for i in range(S)]
        fr_in = F.interpolate(feats[0], scale_factor=self.cfg.patch_size,
                              mode="nearest")
        if hint is not None:
            fr_in = torch.cat([fr_in, hint], dim=1)
        return DecoderOut(logits=logits, features=feats,
                          full_res=self.fullres_neck(fr_in))


# ---------------------------------------------------------------------------
# full model


class DTSNet(nn.Module):
    """Predicts the injected noise from (x_t, image, t)."""

    def __init__(self, cfg: ModelConfig, use_rba: bool = True):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.time_embedding = TimeEmbedding(cfg.time_dim)
        self.diffusion_encoder = WindowedEncoder(cfg, cfg.in_channels,
                                                 with_time=True)
        self.conditional_encoder = WindowedEncoder(cfg, cfg.image_channels,
                                                   with_time=False)
        self.decoder = Decoder(cfg, hint_channels=cfg.in_channels)
        self.rba = RBACascade(
            feature_channels=list(cfg.stage_dims[:cfg.num_stages - 1])
            + [cfg.fullres_channels],
            num_classes=cfg.num_classes,
            final_factor=cfg.patch_size,
            use_attention=use_rba)

    def forward(self, x_t: Tensor, image: Tensor, t) -> Tensor:
        if x_t.ndim == 3:
            return self.forward(x_t[None], image[None], t)[0]
        if x_t.shape[-2:] != image.shape[-2:]:
            raise ContractError(
                f"label state {tuple(x_t.shape)} and image {tuple(image.shape)} "
                "are not spatially aligned")
        if isinstance(t, int) or (torch.is_tensor(t) and t.ndim == 0):
            t = torch.full((x_t.shape[0],), int(t), dtype=torch.long)
        temb = self.time_embedding(t, dtype=x_t.dtype)
        stacked = torch.cat([x_t, image], dim=1)
        diff = self.diffusion_encoder(stacked, temb)
        cond = self.conditional_encoder(image)
        dec = self.decoder(fuse(diff, cond), hint=stacked)
        # cascade consumes decoder features above the deepest level, plus the
        # full-resolution neck output for the last refinement
        features = dec.features[:self.cfg.num_stages - 1] + [dec.full_res]
        return self.rba(dec.logits, features)
