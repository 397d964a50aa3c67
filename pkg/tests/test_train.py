"""Tests for the training harness: schedule, losses, loops, logging."""

import math

import numpy as np
import pytest
import torch
import torch.nn as nn

from dts.checkpoint import load_checkpoint
from dts.data import PhantomConfig, gen_phantom
from dts.diffusion import build_schedule
from dts.errors import ConfigError, ContractError
from dts.knls import SmoothingConfig
from dts.network import ModelConfig
from dts.train import (PretrainConfig, RunLog, TrainConfig, build_model,
                       derive_generator, evaluate_model, finetune_losses,
                       finetune_step, lr_at, make_optimizer,
                       prepare_soft_labels, pretrain, read_runlog,
                       soft_cross_entropy, soft_dice_loss, train,
                       _augment_batch)


def micro_model_cfg(num_classes=4):
    return ModelConfig(image_size=16, patch_size=2, num_classes=num_classes,
                       stage_dims=(8, 8, 16, 16), stage_depths=(1, 1, 1, 1),
                       num_heads=(2, 2, 2, 2), window_size=4, time_dim=8,
                       fullres_channels=8)


def micro_samples(n=4, seed=11):
    return gen_phantom(PhantomConfig(size=16), n, seed)


# ---------------------------------------------------------------------------
# lr schedule


def test_lr_warmup_and_cosine_values():
    cfg = TrainConfig(lr=0.1, warmup_frac=0.1)
    total = 100
    assert lr_at(0, total, cfg) == 0.0
    assert lr_at(10, total, cfg) == pytest.approx(0.1)      # warmup end
    assert lr_at(55, total, cfg) == pytest.approx(0.05)     # cosine midpoint
    assert lr_at(100, total, cfg) == pytest.approx(0.0, abs=1e-12)


def test_lr_continuous_at_junction():
    cfg = TrainConfig(lr=0.3, warmup_frac=0.2)
    total = 50  # warmup boundary exactly at step 10
    left = cfg.lr * 10 / (cfg.warmup_frac * total)
    right = cfg.lr * 0.5 * (1 + math.cos(0.0))
    assert left == right == lr_at(10, total, cfg)


def test_lr_no_warmup_starts_at_peak():
    cfg = TrainConfig(lr=0.2, warmup_frac=0.0)
    assert lr_at(0, 10, cfg) == pytest.approx(0.2)


def test_lr_step_beyond_total_rejected():
    with pytest.raises(ContractError):
        lr_at(101, 100, TrainConfig())


# ---------------------------------------------------------------------------
# optimizer decoupling


def test_adamw_zero_grad_shrinks_weights_exactly():
    torch.manual_seed(0)
    lin = nn.Linear(5, 5)
    cfg = TrainConfig(lr=0.01, weight_decay=1e-3)
    opt = make_optimizer(lin.parameters(), cfg)
    before = {n: p.detach().clone() for n, p in lin.named_parameters()}
    for p in lin.parameters():
        p.grad = torch.zeros_like(p)
    opt.step()
    factor = 1.0 - cfg.lr * cfg.weight_decay
    for n, p in lin.named_parameters():
        assert torch.equal(p.detach(), before[n] * factor)


# ---------------------------------------------------------------------------
# loss pieces


def test_soft_dice_perfect_prediction_near_zero():
    y = torch.zeros(1, 3, 4, 4)
    y[0, 0, :2] = 1.0
    y[0, 1, 2:3] = 1.0
    y[0, 2, 3:] = 1.0
    assert soft_dice_loss(y, y).item() < 1e-5


def test_soft_cross_entropy_matches_hand_value():
    p = torch.tensor([[[[0.25]], [[0.75]]]])  # one pixel, two classes
    y = torch.tensor([[[[0.0]], [[1.0]]]])
    assert soft_cross_entropy(p, y).item() == pytest.approx(-math.log(0.75),
                                                            rel=1e-6)


class _OracleEps(nn.Module):
    """Stands in for the network and returns a fixed noise tensor."""

    def __init__(self, eps):
        super().__init__()
        self.eps = eps

    def forward(self, x_t, image, t):
        return self.eps


def test_finetune_mse_zero_with_oracle_noise():
    schedule = build_schedule(50)
    cfg = TrainConfig(diffusion_steps=50)
    soft = torch.rand(2, 3, 8, 8, generator=torch.Generator().manual_seed(1))
    soft = soft / soft.sum(dim=1, keepdim=True)
    images = torch.randn(2, 1, 8, 8, generator=torch.Generator().manual_seed(2))
    # replay the harness's own draw order to know eps in advance
    probe = derive_generator(9, 3, 0)
    torch.randint(0, 50, (2,), generator=probe)
    eps = torch.randn(2, 3, 8, 8, generator=probe)
    losses = finetune_losses(_OracleEps(eps), images, soft, schedule, cfg,
                             derive_generator(9, 3, 0))
    assert losses["mse"].item() == 0.0
    assert torch.isfinite(losses["total"])


def test_finetune_total_linear_in_weights():
    schedule = build_schedule(20)
    g = torch.Generator().manual_seed(3)
    soft = torch.rand(2, 3, 8, 8, generator=g)
    soft = soft / soft.sum(dim=1, keepdim=True)
    images = torch.randn(2, 1, 8, 8, generator=g)
    eps_net = _OracleEps(torch.randn(2, 3, 8, 8, generator=g))
    only_mse = TrainConfig(lambda_mse=2.0, lambda_dice=0.0, lambda_bce=0.0)
    losses = finetune_losses(eps_net, images, soft, schedule, only_mse,
                             derive_generator(4, 3, 0))
    assert torch.equal(losses["total"], 2.0 * losses["mse"])


# ---------------------------------------------------------------------------
# config validation


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(warmup_frac=1.0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(lambda_mse=0, lambda_dice=0, lambda_bce=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(cond_mode="other").validate()
    with pytest.raises(ConfigError):
        TrainConfig(cond_mode="frozen").validate()  # no checkpoint given
    TrainConfig().validate()


def test_pretrain_config_validation():
    with pytest.raises(ConfigError):
        PretrainConfig(batch_size=1).validate()
    with pytest.raises(ConfigError):
        PretrainConfig(w_contrastive=0, w_location=0,
                       w_reconstruction=0).validate()
    PretrainConfig().validate()


# ---------------------------------------------------------------------------
# run log


def test_runlog_roundtrip(tmp_path):
    log = RunLog(tmp_path / "log.jsonl")
    log.append({"kind": "step", "step": 0, "total": torch.tensor(1.5)})
    log.append({"kind": "step", "step": 1, "total": 1.25})
    log.append({"kind": "epoch", "epoch": 0, "mean_total": 1.375})
    records = read_runlog(tmp_path / "log.jsonl")
    assert [r["step"] for r in records if r["kind"] == "step"] == [0, 1]
    assert records[0]["total"] == 1.5


def test_runlog_rejects_non_monotone_steps(tmp_path):
    p = tmp_path / "log.jsonl"
    p.write_text('{"kind": "step", "step": 1}\n{"kind": "step", "step": 0}\n')
    with pytest.raises(ContractError):
        read_runlog(p)


# ---------------------------------------------------------------------------
# label preparation + augmentation


def test_prepare_soft_labels_smoothing_and_onehot():
    samples = micro_samples()
    cfg_on = TrainConfig(use_knls=True, smoothing=SmoothingConfig(alpha=0.1))
    soft, geometry = prepare_soft_labels(samples, 4, cfg_on)
    assert soft.shape == (len(samples), 4, 16, 16)
    assert np.allclose(soft.sum(axis=1), 1.0, atol=1e-6)
    assert geometry is not None
    for s, sample in zip(soft, samples):
        assert np.array_equal(s.argmax(axis=0), sample.label)
        assert np.allclose(s.max(axis=0), 0.9)

    hard, geo = prepare_soft_labels(samples, 4, TrainConfig(use_knls=False))
    assert geo is None
    assert set(np.unique(hard)) == {0.0, 1.0}


class _IdentityDraws:
    """np.random.Generator stand-in producing the identity augmentation."""

    def random(self):
        return 1.0  # never below the 0.5 flip threshold

    def integers(self, lo, hi):
        return 0

    def uniform(self, lo, hi):
        return (lo + hi) / 2.0  # scale 1.0, shift 0.0


def test_augment_batch_identity_draw():
    g = torch.Generator().manual_seed(5)
    images = torch.randn(2, 1, 8, 8, generator=g)
    soft = torch.rand(2, 3, 8, 8, generator=g)
    out_i, out_s = _augment_batch(images, soft, _IdentityDraws())
    assert torch.equal(out_i, images)
    assert torch.equal(out_s, soft)


def test_augment_batch_preserves_target_mass():
    g = torch.Generator().manual_seed(6)
    images = torch.randn(3, 1, 8, 8, generator=g)
    soft = torch.rand(3, 2, 8, 8, generator=g)
    rng = np.random.default_rng(7)
    _, out_s = _augment_batch(images, soft, rng)
    assert torch.allclose(out_s.sum(dim=(-2, -1)), soft.sum(dim=(-2, -1)))


# ---------------------------------------------------------------------------
# generators


def test_derive_generator_deterministic_and_stream_separated():
    a = torch.randn(4, generator=derive_generator(1, 2, 3))
    b = torch.randn(4, generator=derive_generator(1, 2, 3))
    c = torch.randn(4, generator=derive_generator(1, 4, 3))
    assert torch.equal(a, b)
    assert not torch.equal(a, c)


# ---------------------------------------------------------------------------
# loops (micro scale)


def test_train_loop_runs_logs_and_checkpoints(tmp_path):
    samples = micro_samples(4)
    cfg = TrainConfig(epochs=2, batch_size=2, lr=1e-3, diffusion_steps=50,
                      seed=3)
    model, log_path, ckpt = train(samples, micro_model_cfg(), cfg,
                                  tmp_path / "run")
    records = read_runlog(log_path)
    steps = [r for r in records if r["kind"] == "step"]
    epochs = [r for r in records if r["kind"] == "epoch"]
    assert len(steps) == 4 and len(epochs) == 2
    assert all({"lr", "total", "mse", "dice", "bce", "wall"} <= set(r)
               for r in steps)
    manifest, state = load_checkpoint(ckpt)
    assert manifest["config"]["train"]["seed"] == 3
    assert set(state) == set(model.state_dict())


def test_train_deterministic_loss_sequence(tmp_path):
    samples = micro_samples(4)
    cfg = TrainConfig(epochs=1, batch_size=2, lr=1e-3, diffusion_steps=20,
                      seed=5)
    _, log_a, _ = train(samples, micro_model_cfg(), cfg, tmp_path / "a")
    _, log_b, _ = train(samples, micro_model_cfg(), cfg, tmp_path / "b")
    totals_a = [r["total"] for r in read_runlog(log_a) if r["kind"] == "step"]
    totals_b = [r["total"] for r in read_runlog(log_b) if r["kind"] == "step"]
    assert totals_a == totals_b


def test_loss_decreases_memorizing_small_set(tmp_path):
    samples = micro_samples(2, seed=21)
    cfg = TrainConfig(epochs=30, batch_size=2, lr=2e-3, diffusion_steps=50,
                      seed=1)
    _, log_path, _ = train(samples, micro_model_cfg(), cfg, tmp_path / "run")
    totals = [r["total"] for r in read_runlog(log_path) if r["kind"] == "step"]
    assert np.mean(totals[-5:]) < totals[0]


def test_checkpoint_reload_reproduces_eval_exactly(tmp_path):
    samples = micro_samples(3, seed=13)
    cfg = TrainConfig(epochs=1, batch_size=3, lr=1e-3, diffusion_steps=20,
                      seed=7)
    model_cfg = micro_model_cfg()
    model, _, ckpt = train(samples, model_cfg, cfg, tmp_path / "run")
    schedule = build_schedule(cfg.diffusion_steps)
    report_a = evaluate_model(model, samples, schedule, 4, steps=3, seed=2)

    from dts.checkpoint import load_into
    from dts.network import DTSNet
    fresh = DTSNet(model_cfg, use_rba=cfg.use_rba)
    load_into(fresh, ckpt)
    report_b = evaluate_model(fresh, samples, schedule, 4, steps=3, seed=2)
    assert report_a.to_json() == report_b.to_json()


def test_pretrain_logs_and_transfers(tmp_path):
    samples = micro_samples(4, seed=17)
    pcfg = PretrainConfig(steps=3, batch_size=4, lr=1e-3, seed=9)
    model_cfg = micro_model_cfg()
    ckpt = pretrain(samples, model_cfg, pcfg, tmp_path / "ssl")
    records = read_runlog(tmp_path / "ssl" / "pretrain_log.jsonl")
    steps = [r for r in records if r["kind"] == "step"]
    assert len(steps) == 3
    assert all({"contrastive", "location", "reconstruction"} <= set(r)
               for r in steps)
    manifest, state = load_checkpoint(ckpt)
    assert manifest["extra"]["losses_enabled"] == {
        "contrastive": True, "location": True, "reconstruction": True}

    # trainable mode loads the weights; frozen additionally stops gradients
    cfg = TrainConfig(cond_mode="trainable", pretrained=str(ckpt))
    model = build_model(model_cfg, cfg)
    own = model.conditional_encoder.state_dict()
    assert all(torch.equal(own[k], state[k]) for k in state)
    assert all(p.requires_grad for p in model.conditional_encoder.parameters())

    frozen = build_model(model_cfg,
                         TrainConfig(cond_mode="frozen", pretrained=str(ckpt)))
    assert not any(p.requires_grad
                   for p in frozen.conditional_encoder.parameters())


def test_evaluate_model_deterministic(tmp_path):
    samples = micro_samples(2, seed=23)
    model_cfg = micro_model_cfg()
    cfg = TrainConfig(epochs=1, batch_size=2, diffusion_steps=20, seed=4)
    model, _, _ = train(samples, model_cfg, cfg, tmp_path / "run")
    schedule = build_schedule(20)
    a = evaluate_model(model, samples, schedule, 4, steps=3, seed=6)
    b = evaluate_model(model, samples, schedule, 4, steps=3, seed=6)
    assert a.to_json() == b.to_json()
