"""Ablation harness: scratch baseline vs. the full model.

Shared by the `run_ablation.py` script and the acceptance suite so both run
the identical protocol: same phantoms, same two arms (scratch vs. smoothing +
boundary refinement + pretrained conditional encoder), same scoring.

The comparison runs at the same data and model scale as the headline training
run.  That is deliberate: the component effects are scale-dependent.  Label
smoothing spreads target mass across class channels, and under the linear-
denominator overlap loss that pressure costs contested boundary pixels; with
few training images or tiny phantoms (where boundary pixels dominate each
object) that drag outweighs everything else and the ordering inverts.  With
the full 200-image training set the pretrained conditional encoder's gain is
large and robust, and the smoothing/refinement components ride along at their
defaults.
"""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from dts.checkpoint import load_into
from dts.data import PhantomConfig, gen_phantom
from dts.diffusion import build_schedule
from dts.network import ModelConfig, WindowedEncoder
from dts.ssl_tasks import SSLHeads, ssl_step
from dts.train import (_STREAM_INIT, _STREAM_PRETRAIN, PretrainConfig,
                       TrainConfig, derive_generator, evaluate_model,
                       pretrain, stack_images, train)

# 15 ancestral steps is the cheapest sampler setting whose arm ordering and
# margins match the 50-step evaluation on saved checkpoints.
ABLATION_EVAL_STEPS = 15
PRETRAIN_STEPS = 300


def make_ablation_dataset(n: int = 250, seed: int = 7):
    """Fixed phantom set split 80/20 — the headline run's distribution."""
    samples = gen_phantom(PhantomConfig(), n, seed)
    n_train = int(round(0.8 * n))
    return samples[:n_train], samples[n_train:]


def ablation_arm(arm: str, train_s, test_s, seed: int, out_dir,
                 model_cfg: ModelConfig | None = None) -> float:
    """Train one arm and return its mean foreground test Dice.

    ``scratch`` disables label smoothing and boundary refinement and trains
    the conditional encoder from random init.  ``full`` keeps both at their
    training defaults and warm-starts the conditional encoder from
    self-supervised pretraining on the same training images, leaving it
    trainable.
    """
    if arm not in ("scratch", "full"):
        raise ValueError(f"unknown arm {arm!r}")
    model_cfg = ModelConfig() if model_cfg is None else model_cfg
    out_dir = Path(out_dir)
    base = TrainConfig(seed=seed)
    if arm == "scratch":
        cfg = replace(base, use_knls=False, use_rba=False, cond_mode="scratch")
    else:
        ckpt = pretrain(train_s, model_cfg,
                        PretrainConfig(steps=PRETRAIN_STEPS, seed=seed),
                        out_dir / "pretrain")
        cfg = replace(base, cond_mode="trainable", pretrained=str(ckpt))
    model, _, _ = train(train_s, model_cfg, cfg, out_dir)
    report = evaluate_model(model, test_s, build_schedule(cfg.diffusion_steps),
                            model_cfg.num_classes,
                            steps=ABLATION_EVAL_STEPS, seed=seed)
    (out_dir / "report.json").write_text(report.to_json())
    return report.mean_dice


def _ssl_probe(encoder, heads, images, cfg: PretrainConfig, seed: int):
    """Evaluate the three pretext losses on a fixed probe batch.

    The probe generator is re-derived from (seed, stream, index) each call, so
    the masks and view pairing are identical before and after training — a
    paired comparison that is not at the mercy of whichever random minibatch
    the last optimization step happened to draw.
    """
    g = derive_generator(seed, _STREAM_PRETRAIN, 10 ** 6)
    with torch.no_grad():
        _, parts = ssl_step(images, encoder, heads, cfg.loss_weights, g,
                            temperature=cfg.temperature,
                            mask_ratio=cfg.mask_ratio)
    return {k: float(v) for k, v in parts.items()}


def ssl_trajectory(train_s, seed: int, steps: int = 200, out_dir=None,
                   model_cfg: ModelConfig | None = None):
    """Pretrain with all three pretext losses enabled; return the per-loss
    probe values at step 0 (untrained) and after the final step."""
    import tempfile
    if out_dir is None:
        out_dir = tempfile.mkdtemp(prefix="ssl_traj_")
    out_dir = Path(out_dir)
    model_cfg = ModelConfig() if model_cfg is None else model_cfg
    cfg = PretrainConfig(steps=steps, seed=seed)
    probe = torch.from_numpy(stack_images(train_s)[:16])

    # reconstruct the exact untrained state pretrain() starts from
    torch.manual_seed(int(np.random.SeedSequence(
        [seed, _STREAM_INIT]).generate_state(1)[0]))
    encoder = WindowedEncoder(model_cfg, model_cfg.image_channels,
                              with_time=False)
    heads = SSLHeads(model_cfg)
    first = _ssl_probe(encoder, heads, probe, cfg, seed)

    ckpt = pretrain(train_s, model_cfg, cfg, out_dir)
    load_into(encoder, ckpt)
    load_into(heads, out_dir / "heads")
    last = _ssl_probe(encoder, heads, probe, cfg, seed)
    return first, last
