"""Tests for the noise-prediction network: time embedding, windowed attention,
encoders, fusion, decoder, and the composed model."""

import math

import pytest
import torch

from dts.errors import ConfigError, ContractError
from dts.network import (Decoder, DTSNet, ModelConfig, SwinBlock,
                         TimeEmbedding, WindowAttention, WindowedEncoder,
                         fuse, time_embed_raw, window_partition,
                         window_unpartition)


def micro_config(**kw):
    base = dict(image_size=16, patch_size=2, num_classes=2,
                stage_dims=(8, 8, 16, 16), stage_depths=(1, 1, 1, 1),
                num_heads=(2, 2, 2, 2), window_size=4, time_dim=8,
                fullres_channels=8)
    base.update(kw)
    return ModelConfig(**base)


# ---------------------------------------------------------------------------
# time embedding


def test_time_embed_t0_is_zeros_then_ones():
    emb = time_embed_raw(0, 10)
    assert torch.equal(emb[:5], torch.zeros(5))
    assert torch.equal(emb[5:], torch.ones(5))


def test_time_embed_worked_values():
    emb = time_embed_raw(1, 4)
    expected = torch.tensor([math.sin(1.0), math.sin(1e-2),
                             math.cos(1.0), math.cos(1e-2)])
    assert torch.allclose(emb, expected, atol=1e-6)


def test_time_embed_odd_dim_rejected():
    with pytest.raises(ConfigError):
        time_embed_raw(3, 5)


def test_time_embed_deterministic_and_batched():
    assert torch.equal(time_embed_raw(5, 16), time_embed_raw(5, 16))
    batched = time_embed_raw(torch.tensor([0, 1, 5]), 16)
    assert batched.shape == (3, 16)
    assert torch.equal(batched[2], time_embed_raw(5, 16))


def test_time_embedding_module_shapes():
    torch.manual_seed(0)
    te = TimeEmbedding(12)
    out = te(torch.tensor([3, 9]))
    assert out.shape == (2, 12)
    assert torch.isfinite(out).all()


# ---------------------------------------------------------------------------
# window partition


def test_window_partition_counts():
    x = torch.arange(64, dtype=torch.float32).reshape(1, 8, 8, 1)
    win = window_partition(x, 4, shift=0)
    assert win.shape == (4, 16, 1)


@pytest.mark.parametrize("shift", [0, 1, 2, 3])
def test_window_partition_roundtrip(shift):
    g = torch.Generator().manual_seed(shift)
    x = torch.randn(2, 8, 8, 5, generator=g)
    win = window_partition(x, 4, shift)
    back = window_unpartition(win, 4, shift, 8, 8)
    assert torch.equal(back, x)


def test_window_partition_shift_wraps_cyclically():
    # with window 4 and shift 2 on an 8x8 grid, token (0,0) wraps into the
    # window that holds original token (6,6)'s neighborhood
    idx = torch.arange(64, dtype=torch.float32).reshape(1, 8, 8, 1)
    win = window_partition(idx, 4, shift=2).squeeze(-1)
    holding = [w for w in win if 0.0 in w]
    assert len(holding) == 1
    assert 6 * 8 + 6 in holding[0].tolist()


def test_window_partition_indivisible_grid():
    with pytest.raises(ConfigError):
        window_partition(torch.zeros(1, 6, 6, 3), 4)


# ---------------------------------------------------------------------------
# attention block


def test_swin_block_preserves_shape():
    torch.manual_seed(1)
    block = SwinBlock(dim=8, num_heads=2, window=4, shift=2, mlp_ratio=2.0,
                      time_dim=6)
    x = torch.randn(2, 8, 8, 8)
    temb = torch.randn(2, 6)
    assert block(x, temb).shape == x.shape


def test_swin_block_zeroed_projections_identity():
    torch.manual_seed(2)
    block = SwinBlock(dim=8, num_heads=2, window=4, shift=0, mlp_ratio=2.0,
                      time_dim=6)
    torch.nn.init.zeros_(block.attn.proj.weight)
    torch.nn.init.zeros_(block.attn.proj.bias)
    torch.nn.init.zeros_(block.mlp[2].weight)
    torch.nn.init.zeros_(block.mlp[2].bias)
    x = torch.randn(1, 8, 8, 8)
    assert torch.equal(block(x, torch.randn(1, 6)), x)


def test_attention_rows_sum_to_one():
    torch.manual_seed(3)
    attn = WindowAttention(dim=16, num_heads=4, window=4)
    attn.keep_attn = True
    attn(torch.randn(6, 16, 16))
    sums = attn.last_attn.sum(dim=-1)
    assert (sums - 1.0).abs().max() < 1e-6


def test_attention_head_divisibility():
    with pytest.raises(ConfigError):
        WindowAttention(dim=8, num_heads=3, window=2)


def test_swin_block_requires_time_embedding_when_conditioned():
    block = SwinBlock(dim=8, num_heads=2, window=4, shift=0, mlp_ratio=2.0,
                      time_dim=6)
    with pytest.raises(ContractError):
        block(torch.zeros(1, 8, 8, 8), None)


# ---------------------------------------------------------------------------
# config validation


def test_config_rejects_indivisible_image():
    with pytest.raises(ConfigError):
        micro_config(image_size=30).validate()


def test_config_rejects_bad_heads():
    with pytest.raises(ConfigError):
        micro_config(num_heads=(3, 2, 2, 2)).validate()


def test_config_rejects_window_not_dividing_grid():
    with pytest.raises(ConfigError):
        micro_config(image_size=48, window_size=7).validate()


def test_config_caps_window_at_deep_stages():
    cfg = micro_config()  # grid sides 8,4,2,1 with window 4
    assert [cfg.effective_window(i) for i in range(4)] == [4, 4, 2, 1]
    cfg.validate()  # capping makes the deep stages legal


# ---------------------------------------------------------------------------
# encoders


SHAPE_TABLE = [
    # (image, patch, dims) -> expected (side, channels) per level
    (64, 4, (32, 64, 128, 256), [(16, 32), (8, 64), (4, 128), (2, 256)]),
    (64, 2, (8, 8, 8, 8), [(32, 8), (16, 8), (8, 8), (4, 8)]),
    (32, 4, (8, 8, 16, 16), [(8, 8), (4, 8), (2, 16), (1, 16)]),
    (32, 2, (8, 16, 32, 64), [(16, 8), (8, 16), (4, 32), (2, 64)]),
]


@pytest.mark.parametrize("image,patch,dims,expected", SHAPE_TABLE)
def test_encoder_shape_table(image, patch, dims, expected):
    torch.manual_seed(4)
    heads = tuple(2 if d % 2 == 0 else 1 for d in dims)
    cfg = ModelConfig(image_size=image, patch_size=patch, stage_dims=dims,
                      stage_depths=(2, 1, 1, 1), num_heads=heads,
                      window_size=4, time_dim=8, num_classes=3,
                      fullres_channels=8)
    enc = WindowedEncoder(cfg, in_channels=cfg.in_channels, with_time=True)
    x = torch.randn(2, cfg.in_channels, image, image)
    temb = torch.randn(2, 8)
    levels = enc(x, temb)
    assert [(lv.shape[-1], lv.shape[1]) for lv in levels] == expected
    assert all(lv.shape[0] == 2 for lv in levels)


def test_encoder_deterministic():
    torch.manual_seed(5)
    cfg = micro_config()
    enc = WindowedEncoder(cfg, cfg.in_channels, with_time=True).eval()
    x = torch.randn(1, cfg.in_channels, 16, 16)
    temb = torch.randn(1, 8)
    a = enc(x, temb)
    b = enc(x, temb)
    assert all(torch.equal(u, v) for u, v in zip(a, b))


def test_encoder_time_sensitivity():
    torch.manual_seed(6)
    cfg = micro_config()
    net = DTSNet(cfg).eval()
    x = torch.randn(1, cfg.in_channels, 16, 16)
    e0 = net.diffusion_encoder(x, net.time_embedding(torch.tensor([0])))
    e1 = net.diffusion_encoder(x, net.time_embedding(torch.tensor([500])))
    assert max((a - b).abs().max().item() for a, b in zip(e0, e1)) > 0


def test_conditional_encoder_takes_image_only():
    torch.manual_seed(7)
    cfg = micro_config()
    enc = WindowedEncoder(cfg, cfg.image_channels, with_time=False)
    levels = enc(torch.randn(2, 1, 16, 16))
    assert [lv.shape[1] for lv in levels] == list(cfg.stage_dims)


def test_time_conditioned_encoder_requires_embedding():
    cfg = micro_config()
    enc = WindowedEncoder(cfg, cfg.in_channels, with_time=True)
    with pytest.raises(ContractError):
        enc(torch.zeros(1, cfg.in_channels, 16, 16))


def test_encoder_identity_up_to_merging_with_zeroed_projections():
    torch.manual_seed(8)
    cfg = micro_config(stage_depths=(2, 2, 1, 1))
    enc = WindowedEncoder(cfg, cfg.image_channels, with_time=False).eval()
    for m in enc.modules():
        if isinstance(m, SwinBlock):
            torch.nn.init.zeros_(m.attn.proj.weight)
            torch.nn.init.zeros_(m.attn.proj.bias)
            torch.nn.init.zeros_(m.mlp[2].weight)
            torch.nn.init.zeros_(m.mlp[2].bias)
    img = torch.randn(1, 1, 16, 16)
    levels = enc(img)
    x = enc.patch_embed(img)
    for i in range(4):
        assert torch.equal(levels[i], x.permute(0, 3, 1, 2))
        if i < 3:
            x = enc.merges[i](x)


# ---------------------------------------------------------------------------
# fusion


def test_fuse_additive_identity_commutative():
    g = torch.Generator().manual_seed(9)
    a = [torch.randn(1, c, s, s, generator=g) for c, s in ((4, 8), (8, 4))]
    zeros = [torch.zeros_like(t) for t in a]
    b = [torch.randn_like(t) for t in a]
    assert all(torch.equal(u, v) for u, v in zip(fuse(a, zeros), a))
    assert all(torch.equal(u, v) for u, v in zip(fuse(a, b), fuse(b, a)))
    assert all(torch.equal(u, 2 * v) for u, v in zip(fuse(a, a), a))


def test_fuse_shape_mismatch():
    a = [torch.zeros(1, 4, 8, 8)]
    b = [torch.zeros(1, 4, 4, 4)]
    with pytest.raises(ContractError):
        fuse(a, b)
    with pytest.raises(ContractError):
        fuse(a, [])


# ---------------------------------------------------------------------------
# decoder


def test_decoder_logit_scales_and_fullres():
    torch.manual_seed(10)
    cfg = ModelConfig()  # 64, patch 4
    dec = Decoder(cfg, hint_channels=cfg.in_channels)
    pyramid = [torch.randn(1, c, s, s)
               for c, s in zip(cfg.stage_dims, (16, 8, 4, 2))]
    out = dec(pyramid, hint=torch.randn(1, cfg.in_channels, 64, 64))
    assert [l.shape for l in out.logits] == [
        (1, 4, 16, 16), (1, 4, 8, 8), (1, 4, 4, 4), (1, 4, 2, 2)]
    assert out.full_res.shape == (1, cfg.fullres_channels, 64, 64)


def test_decoder_gradient_reaches_every_level():
    torch.manual_seed(11)
    cfg = micro_config()
    net = DTSNet(cfg)
    pyramid = [torch.randn(1, c, s, s).requires_grad_(True)
               for c, s in zip(cfg.stage_dims, (8, 4, 2, 1))]
    hint = torch.randn(1, cfg.in_channels, 16, 16)
    dec = net.decoder(pyramid, hint=hint)
    feats = dec.features[:3] + [dec.full_res]
    net.rba(dec.logits, feats).sum().backward()
    for lv in pyramid:
        assert lv.grad is not None and lv.grad.abs().max() > 0

    # explicit perturbation of the deepest level moves the output
    with torch.no_grad():
        base = net.decoder([p.detach() for p in pyramid], hint=hint)
        bumped = net.decoder([p.detach() for p in pyramid[:3]]
                             + [pyramid[3].detach() + 1e-3], hint=hint)
    assert not torch.equal(base.logits[0], bumped.logits[0])


def test_decoder_wrong_pyramid_length():
    cfg = micro_config()
    dec = Decoder(cfg, hint_channels=0)
    with pytest.raises(ContractError):
        dec([torch.zeros(1, 8, 8, 8)])


# ---------------------------------------------------------------------------
# composed model


def test_model_output_matches_input_shape():
    torch.manual_seed(12)
    cfg = micro_config()
    net = DTSNet(cfg).eval()
    x_t = torch.randn(3, 2, 16, 16)
    img = torch.randn(3, 1, 16, 16)
    out = net(x_t, img, 7)
    assert out.shape == x_t.shape
    single = net(x_t[0], img[0], 7)
    assert single.shape == (2, 16, 16)
    assert torch.allclose(single, out[0], atol=1e-5)


def test_model_deterministic():
    torch.manual_seed(13)
    cfg = micro_config()
    net = DTSNet(cfg).eval()
    x_t = torch.randn(1, 2, 16, 16)
    img = torch.randn(1, 1, 16, 16)
    assert torch.equal(net(x_t, img, 3), net(x_t, img, 3))


def test_model_rejects_misaligned_inputs():
    cfg = micro_config()
    net = DTSNet(cfg)
    with pytest.raises(ContractError):
        net(torch.zeros(1, 2, 16, 16), torch.zeros(1, 1, 8, 8), 0)


def test_model_per_sample_time_vector():
    torch.manual_seed(14)
    cfg = micro_config()
    net = DTSNet(cfg).eval()
    x_t = torch.randn(2, 2, 16, 16)
    img = torch.randn(2, 1, 16, 16)
    mixed = net(x_t, img, torch.tensor([3, 900]))
    t3 = net(x_t, img, 3)
    assert torch.allclose(mixed[0], t3[0], atol=1e-6)
    assert (mixed[1] - t3[1]).abs().max() > 0


def test_model_gradcheck_micro_config():
    """Central finite differences vs autograd on sampled weights, float64."""
    torch.manual_seed(15)
    cfg = micro_config()
    net = DTSNet(cfg).double().eval()
    g = torch.Generator().manual_seed(16)
    x_t = torch.randn(1, 2, 16, 16, generator=g, dtype=torch.float64)
    img = torch.randn(1, 1, 16, 16, generator=g, dtype=torch.float64)
    probe = torch.randn(1, 2, 16, 16, generator=g, dtype=torch.float64)

    def loss():
        return (net(x_t, img, 7) * probe).sum()

    net.zero_grad()
    loss().backward()
    params = dict(net.named_parameters())
    picks = [
        "diffusion_encoder.patch_embed.proj.weight",
        "diffusion_encoder.stages.0.0.attn.qkv.weight",
        "diffusion_encoder.stages.0.0.attn.bias_table",
        "conditional_encoder.stages.1.0.mlp.0.weight",
        "time_embedding.mlp.0.weight",
        "decoder.blocks.0.body.0.weight",
        "decoder.fullres_neck.0.weight",
        "rba.stages.3.head.2.weight",
    ]
    h = 1e-6
    for name in picks:
        p = params[name]
        idx = int(p.grad.abs().reshape(-1).argmax())
        analytic = p.grad.reshape(-1)[idx].item()
        flat = p.data.view(-1)
        with torch.no_grad():
            orig = flat[idx].item()
            flat[idx] = orig + h
            up = loss().item()
            flat[idx] = orig - h
            down = loss().item()
            flat[idx] = orig
        fd = (up - down) / (2 * h)
        rel = abs(fd - analytic) / max(abs(fd), abs(analytic), 1e-8)
        assert rel < 1e-3, f"{name}: fd={fd} analytic={analytic} rel={rel}"


def test_model_rba_off_variant_runs():
    torch.manual_seed(17)
    cfg = micro_config()
    net = DTSNet(cfg, use_rba=False).eval()
    out = net(torch.randn(1, 2, 16, 16), torch.randn(1, 1, 16, 16), 5)
    assert out.shape == (1, 2, 16, 16)
    assert torch.isfinite(out).all()
