"""Training harness: SSL pretraining, diffusion fine-tuning with the combined
MSE + soft-Dice + cross-entropy loss, deterministic loaders, and JSONL run
logs.

All randomness flows through torch.Generator objects derived from the config
seed, so identical config + seed reproduces the loss sequence bit-for-bit on
one machine.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from dts.checkpoint import load_into, save_checkpoint
from dts.data import SegSample
from dts.diffusion import (NoiseSchedule, build_schedule, decode_soft_label,
                           predict_x0, q_sample, sample_segmentation)
from dts.errors import ConfigError, ContractError
from dts.knls import (ClassGeometry, SmoothingConfig, class_centroids,
                      dataset_geometry, one_hot, smooth_labels)
from dts.metrics import MetricsReport, evaluate
from dts.network import DTSNet, ModelConfig, WindowedEncoder
from dts.ssl_tasks import SSLHeads, SSLLossWeights, ssl_step

Tensor = torch.Tensor

# stream codes for deriving independent generators from one seed
_STREAM_INIT = 1
_STREAM_SHUFFLE = 2
_STREAM_STEP = 3
_STREAM_EVAL = 4
_STREAM_PRETRAIN = 5
_STREAM_AUGMENT = 6


def derive_generator(seed: int, stream: int, *indices: int) -> torch.Generator:
    ss = np.random.SeedSequence([int(seed), int(stream), *map(int, indices)])
    return torch.Generator().manual_seed(int(ss.generate_state(1)[0]))


def num_workers() -> int:
    return max(1, int(os.environ.get("DTS_NUM_WORKERS", "1")))


# ---------------------------------------------------------------------------
# configs


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 8
    lr: float = 2e-3
    weight_decay: float = 1e-3
    warmup_frac: float = 0.1
    lambda_mse: float = 1.0
    lambda_dice: float = 1.0
    lambda_bce: float = 1.0
    diffusion_steps: int = 1000
    use_knls: bool = True
    smoothing: SmoothingConfig = field(default_factory=SmoothingConfig)
    use_rba: bool = True
    cond_mode: str = "scratch"  # scratch | frozen | trainable
    pretrained: Optional[str] = None
    augment: bool = False
    eval_every: int = 0  # epochs between quick held-out probes (0 = off)
    seed: int = 0

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigError(f"warmup_frac must be in [0, 1), got {self.warmup_frac}")
        lams = (self.lambda_mse, self.lambda_dice, self.lambda_bce)
        if any(l < 0 for l in lams):
            raise ConfigError(f"loss weights must be non-negative, got {lams}")
        if all(l == 0 for l in lams):
            raise ConfigError("at least one loss weight must be positive")
        if self.lr <= 0:
            raise ConfigError(f"peak lr must be positive, got {self.lr}")
        if self.diffusion_steps < 1:
            raise ConfigError("diffusion_steps must be >= 1")
        if self.cond_mode not in ("scratch", "frozen", "trainable"):
            raise ConfigError(f"unknown cond_mode '{self.cond_mode}'")
        if self.cond_mode != "scratch" and not self.pretrained:
            raise ConfigError(f"cond_mode '{self.cond_mode}' needs a "
                              "pretrained checkpoint path")
        if self.use_knls:
            self.smoothing.validate()


@dataclass
class PretrainConfig:
    steps: int = 300
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 1e-3
    warmup_frac: float = 0.1
    temperature: float = 0.5
    mask_ratio: float = 0.4
    w_contrastive: float = 1.0
    w_location: float = 1.0
    w_reconstruction: float = 1.0
    seed: int = 0

    @property
    def loss_weights(self) -> SSLLossWeights:
        return SSLLossWeights(self.w_contrastive, self.w_location,
                              self.w_reconstruction)

    def validate(self):
        if self.steps < 1 or self.batch_size < 2:
            raise ConfigError("need steps >= 1 and batch_size >= 2")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigError(f"warmup_frac must be in [0, 1), got {self.warmup_frac}")
        if self.lr <= 0 or self.temperature <= 0:
            raise ConfigError("lr and temperature must be positive")
        self.loss_weights.validate()


# ---------------------------------------------------------------------------
# schedule + losses


def lr_at(step: int, total_steps: int, cfg) -> float:
    """Linear warmup to cfg.lr over warmup_frac of the run, then cosine to 0."""
    if step > total_steps:
        raise ContractError(f"step {step} beyond total {total_steps}")
    warm = cfg.warmup_frac * total_steps
    if warm > 0 and step <= warm:
        return cfg.lr * step / warm
    progress = (step - warm) / (total_steps - warm)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def soft_dice_loss(p: Tensor, y: Tensor, eps: float = 1e-5) -> Tensor:
    """1 - (2*sum(p*y)+eps)/(sum(p)+sum(y)+eps), averaged over foreground
    classes and batch.  p and y are (B, C, H, W) probability maps."""
    inter = (p * y).sum(dim=(-2, -1))
    denom = p.sum(dim=(-2, -1)) + y.sum(dim=(-2, -1))
    dice = (2.0 * inter + eps) / (denom + eps)
    return (1.0 - dice[:, 1:]).mean()


def soft_cross_entropy(p: Tensor, y: Tensor) -> Tensor:
    """Per-pixel cross-entropy of probability map p against soft targets y."""
    return -(y * torch.log(p.clamp_min(1e-8))).sum(dim=-3).mean()


def finetune_losses(model, images: Tensor, soft: Tensor,
                    schedule: NoiseSchedule, cfg: TrainConfig,
                    rng: torch.Generator) -> dict:
    """Combined loss on one batch.  Draw order from `rng`: the per-sample
    steps t first, then the noise tensor."""
    x0 = 2.0 * soft - 1.0
    t = torch.randint(0, schedule.T, (x0.shape[0],), generator=rng)
    eps = torch.randn(x0.shape, generator=rng, dtype=x0.dtype)
    x_t = q_sample(x0, t, eps, schedule)
    eps_hat = model(x_t, images, t)
    l_mse = F.mse_loss(eps_hat, eps)
    x0_hat = predict_x0(x_t, t, eps_hat, schedule, clamp=True)
    p = decode_soft_label(x0_hat)
    l_dice = soft_dice_loss(p, soft)
    l_bce = soft_cross_entropy(p, soft)
    total = cfg.lambda_mse * l_mse
    total = total + cfg.lambda_dice * l_dice
    total = total + cfg.lambda_bce * l_bce
    return {"total": total, "mse": l_mse, "dice": l_dice, "bce": l_bce}


def finetune_step(model, images: Tensor, soft: Tensor,
                  schedule: NoiseSchedule, cfg: TrainConfig,
                  rng: torch.Generator, optimizer: torch.optim.Optimizer,
                  lr: float) -> dict:
    """One AdamW update at the given learning rate; returns float losses."""
    losses = finetune_losses(model, images, soft, schedule, cfg, rng)
    optimizer.zero_grad(set_to_none=True)
    losses["total"].backward()
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.step()
    return {k: float(v.detach()) for k, v in losses.items()}


def make_optimizer(params, cfg) -> torch.optim.AdamW:
    return torch.optim.AdamW(params, lr=cfg.lr,
                             weight_decay=cfg.weight_decay)


# ---------------------------------------------------------------------------
# run log


class RunLog:
    """Append-only line-delimited JSON log."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text("")
        self.records: list[dict] = []

    def append(self, record: dict):
        clean = {k: (float(v) if isinstance(v, (torch.Tensor, np.floating))
                     else v) for k, v in record.items()}
        self.records.append(clean)
        with self.path.open("a") as f:
            f.write(json.dumps(clean) + "\n")


def read_runlog(path) -> list[dict]:
    records = [json.loads(line) for line in Path(path).read_text().splitlines()
               if line.strip()]
    steps = [r["step"] for r in records if r.get("kind") == "step"]
    if steps != sorted(steps):
        raise ContractError("run log step indices are not monotone")
    return records


# ---------------------------------------------------------------------------
# data plumbing


def stack_images(samples: Sequence[SegSample]) -> np.ndarray:
    return np.stack([s.image for s in samples]).astype(np.float32)


def prepare_soft_labels(samples: Sequence[SegSample], num_classes: int,
                        cfg: TrainConfig):
    """Soft (or hard one-hot) targets for every sample, plus the dataset
    geometry when smoothing is enabled."""
    if not cfg.use_knls:
        soft = np.stack([one_hot(s.label, num_classes) for s in samples])
        return soft, None
    geoms = [class_centroids(s.label, num_classes) for s in samples]
    geometry = dataset_geometry(geoms)
    soft = np.stack([smooth_labels(s.label, geometry, cfg.smoothing)
                     for s in samples])
    return soft, geometry


def _augment_batch(images: Tensor, soft: Tensor, rng: np.random.Generator):
    """Flips/90-degree rotations on image+target, intensity jitter on the
    image only.  Same draw order as the dataset-level augmenter."""
    out_i, out_s = [], []
    for b in range(images.shape[0]):
        img, tgt = images[b], soft[b]
        if rng.random() < 0.5:
            img, tgt = torch.flip(img, (-1,)), torch.flip(tgt, (-1,))
        if rng.random() < 0.5:
            img, tgt = torch.flip(img, (-2,)), torch.flip(tgt, (-2,))
        k = int(rng.integers(0, 4))
        if k:
            img = torch.rot90(img, k, (-2, -1))
            tgt = torch.rot90(tgt, k, (-2, -1))
        scale = float(rng.uniform(0.9, 1.1))
        shift = float(rng.uniform(-0.1, 0.1))
        out_i.append(img * scale + shift)
        out_s.append(tgt)
    return torch.stack(out_i), torch.stack(out_s)


def _index_batches(n: int, batch_size: int, g: torch.Generator) -> list:
    perm = torch.randperm(n, generator=g)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def _batch_iter(images: np.ndarray, soft: np.ndarray, batches: list,
                workers: int):
    if workers <= 1:
        for idx in batches:
            sel = idx.numpy()
            yield torch.from_numpy(images[sel]), torch.from_numpy(soft[sel])
        return
    dataset = torch.utils.data.TensorDataset(
        torch.from_numpy(images), torch.from_numpy(soft))
    loader = torch.utils.data.DataLoader(
        dataset, batch_sampler=[idx.tolist() for idx in batches],
        num_workers=workers)
    yield from loader


# ---------------------------------------------------------------------------
# loops


def pretrain(samples: Sequence[SegSample], model_cfg: ModelConfig,
             cfg: PretrainConfig, out_dir) -> Path:
    """Self-supervised pretraining of the conditional encoder; returns the
    checkpoint directory."""
    cfg.validate()
    model_cfg.validate()
    out_dir = Path(out_dir)
    torch.manual_seed(int(np.random.SeedSequence(
        [cfg.seed, _STREAM_INIT]).generate_state(1)[0]))
    encoder = WindowedEncoder(model_cfg, model_cfg.image_channels,
                              with_time=False)
    heads = SSLHeads(model_cfg)
    optimizer = make_optimizer(
        list(encoder.parameters()) + list(heads.parameters()), cfg)
    images = stack_images(samples)
    log = RunLog(out_dir / "pretrain_log.jsonl")
    start = time.perf_counter()
    for step in range(cfg.steps):
        g = derive_generator(cfg.seed, _STREAM_PRETRAIN, step)
        idx = torch.randint(0, len(images), (cfg.batch_size,), generator=g)
        batch = torch.from_numpy(images[idx.numpy()])
        total, parts = ssl_step(batch, encoder, heads, cfg.loss_weights, g,
                                temperature=cfg.temperature,
                                mask_ratio=cfg.mask_ratio)
        lr = lr_at(step, cfg.steps, cfg)
        optimizer.zero_grad(set_to_none=True)
        total.backward()
        for group in optimizer.param_groups:
            group["lr"] = lr
        optimizer.step()
        log.append({"kind": "step", "step": step, "lr": lr,
                    "total": float(total.detach()),
                    "contrastive": float(parts["contrastive"]),
                    "location": float(parts["location"]),
                    "reconstruction": float(parts["reconstruction"]),
                    "wall": time.perf_counter() - start})
    enabled = {"contrastive": cfg.w_contrastive > 0,
               "location": cfg.w_location > 0,
               "reconstruction": cfg.w_reconstruction > 0}
    ckpt = save_checkpoint(out_dir / "encoder", encoder,
                           config={"model": asdict(model_cfg),
                                   "pretrain": asdict(cfg)},
                           extra={"losses_enabled": enabled})
    save_checkpoint(out_dir / "heads", heads,
                    config={"model": asdict(model_cfg)},
                    extra={"losses_enabled": enabled})
    return ckpt


def build_model(model_cfg: ModelConfig, cfg: TrainConfig) -> DTSNet:
    torch.manual_seed(int(np.random.SeedSequence(
        [cfg.seed, _STREAM_INIT]).generate_state(1)[0]))
    model = DTSNet(model_cfg, use_rba=cfg.use_rba)
    if cfg.cond_mode != "scratch":
        load_into(model.conditional_encoder, cfg.pretrained)
        if cfg.cond_mode == "frozen":
            for p in model.conditional_encoder.parameters():
                p.requires_grad_(False)
    return model


def train(train_samples: Sequence[SegSample], model_cfg: ModelConfig,
          cfg: TrainConfig, out_dir,
          eval_samples: Optional[Sequence[SegSample]] = None):
    """Fine-tune the diffusion segmenter; returns (model, runlog path,
    checkpoint dir)."""
    cfg.validate()
    model_cfg.validate()
    out_dir = Path(out_dir)
    model = build_model(model_cfg, cfg)
    schedule = build_schedule(cfg.diffusion_steps)
    images = stack_images(train_samples)
    soft, _ = prepare_soft_labels(train_samples, model_cfg.num_classes, cfg)
    optimizer = make_optimizer(
        [p for p in model.parameters() if p.requires_grad], cfg)
    steps_per_epoch = math.ceil(len(images) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    workers = num_workers()
    log = RunLog(out_dir / "train_log.jsonl")
    start = time.perf_counter()
    step = 0
    for epoch in range(cfg.epochs):
        batches = _index_batches(len(images), cfg.batch_size,
                                 derive_generator(cfg.seed, _STREAM_SHUFFLE,
                                                  epoch))
        epoch_total = 0.0
        for imgs, tgt in _batch_iter(images, soft, batches, workers):
            if cfg.augment:
                aug_rng = np.random.default_rng(np.random.SeedSequence(
                    [cfg.seed, _STREAM_AUGMENT, step]))
                imgs, tgt = _augment_batch(imgs, tgt, aug_rng)
            lr = lr_at(step, total_steps, cfg)
            rec = finetune_step(model, imgs, tgt, schedule, cfg,
                                derive_generator(cfg.seed, _STREAM_STEP, step),
                                optimizer, lr)
            log.append({"kind": "step", "step": step, "lr": lr, **rec,
                        "wall": time.perf_counter() - start})
            epoch_total += rec["total"]
            step += 1
        record = {"kind": "epoch", "epoch": epoch,
                  "mean_total": epoch_total / len(batches)}
        if cfg.eval_every and eval_samples and (epoch + 1) % cfg.eval_every == 0:
            probe = evaluate_model(model, eval_samples[:4], schedule,
                                   model_cfg.num_classes, steps=5,
                                   seed=cfg.seed)
            record["probe_mean_dice"] = probe.mean_dice
        log.append(record)
    ckpt = save_checkpoint(out_dir / "checkpoint", model,
                           config={"model": asdict(model_cfg),
                                   "train": asdict(cfg)})
    return model, log.path, ckpt


def evaluate_model(model: DTSNet, samples: Sequence[SegSample],
                   schedule: NoiseSchedule, num_classes: int,
                   steps: int = 50, seed: int = 0, ensemble: int = 1,
                   keep_per_image: bool = False) -> MetricsReport:
    """Sample a segmentation for every image and score it; per-image noise
    streams are derived from `seed` and the image position."""
    was_training = model.training
    model.eval()
    counter = {"i": 0}

    def predict(image_np: np.ndarray) -> np.ndarray:
        img = torch.from_numpy(np.asarray(image_np, dtype=np.float32))
        member_seed = int(np.random.SeedSequence(
            [seed, _STREAM_EVAL, counter["i"]]).generate_state(1)[0])
        counter["i"] += 1
        with torch.no_grad():
            prob = sample_segmentation(
                model, img, schedule, num_classes, steps=steps,
                ensemble=ensemble,
                member_seeds=[member_seed + m for m in range(ensemble)])
        return prob.numpy()

    report = evaluate(predict, samples, num_classes,
                      keep_per_image=keep_per_image)
    if was_training:
        model.train()
    return report
