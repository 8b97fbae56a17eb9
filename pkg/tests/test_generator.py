import numpy as np
import pytest
import torch
from torch import nn

from scmis.data import LabelMap, one_hot_labels, sample_noise
from scmis.generator import (DOWNSAMPLE_FACTOR, GeneratorConfig, RgbdGenerator, SharedEncoder,
                             SpadeNorm, SpadeResBlock)

from conftest import tiny_gen_cfg


def conv3x3_numpy(x, weight, bias):
    """Plain float64 3x3 same-padding convolution, one value at a time."""
    cout, cin, _, _ = weight.shape
    _, h, w = x.shape
    padded = np.zeros((cin, h + 2, w + 2))
    padded[:, 1:-1, 1:-1] = x
    out = np.zeros((cout, h, w))
    for o in range(cout):
        for i in range(h):
            for j in range(w):
                acc = bias[o]
                for c in range(cin):
                    for di in range(3):
                        for dj in range(3):
                            acc += weight[o, c, di, dj] * padded[c, i + di, j + dj]
                out[o, i, j] = acc
    return out


def spade_numpy(h, cond, module: SpadeNorm, eps: float):
    """Scalar evaluation: gamma(e) * (h - mu) / sqrt(var + eps) + beta(e),
    batch statistics over (n, x, y), biased variance."""
    w_s = module.shared[0].weight.detach().numpy().astype(np.float64)
    b_s = module.shared[0].bias.detach().numpy().astype(np.float64)
    w_g = module.gamma.weight.detach().numpy().astype(np.float64)
    b_g = module.gamma.bias.detach().numpy().astype(np.float64)
    w_b = module.beta.weight.detach().numpy().astype(np.float64)
    b_b = module.beta.bias.detach().numpy().astype(np.float64)
    out = np.zeros_like(h)
    mu = h.mean(axis=(0, 2, 3))
    var = h.var(axis=(0, 2, 3))  # biased, matching batch normalization
    for n in range(h.shape[0]):
        emb = np.maximum(conv3x3_numpy(cond[n], w_s, b_s), 0.0)
        gamma = conv3x3_numpy(emb, w_g, b_g)
        beta = conv3x3_numpy(emb, w_b, b_b)
        for c in range(h.shape[1]):
            out[n, c] = gamma[c] * (h[n, c] - mu[c]) / np.sqrt(var[c] + eps) + beta[c]
    return out


def spade_scalar_oracle_case(seed: int = 0):
    """The 2x1x2x2 hand-oracle comparison; returns (module output, oracle output)."""
    rng = torch.Generator().manual_seed(seed)
    module = SpadeNorm(channels=1, cond_channels=2, hidden=3, eps=1e-5).double()
    module.train()
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=rng, dtype=torch.float64) * 0.5)
    h = torch.randn(2, 1, 2, 2, generator=rng, dtype=torch.float64)
    cond = torch.randn(2, 2, 2, 2, generator=rng, dtype=torch.float64)
    got = module(h, cond).detach().numpy()
    want = spade_numpy(h.numpy(), cond.numpy(), module, eps=1e-5)
    return got, want


# ------------------------------------------------------------------ spade norm

def test_spade_norm_scalar_oracle():
    got, want = spade_scalar_oracle_case()
    assert np.abs(got - want).max() < 1e-6


def test_spade_norm_reduces_to_batch_norm():
    module = SpadeNorm(channels=3, cond_channels=2, hidden=4, eps=1e-5).train()
    with torch.no_grad():
        module.gamma.weight.zero_()
        module.gamma.bias.fill_(1.0)
        module.beta.weight.zero_()
        module.beta.bias.zero_()
    h = torch.randn(4, 3, 6, 6)
    cond = torch.randn(4, 2, 6, 6)
    reference = nn.BatchNorm2d(3, eps=1e-5, affine=False).train()
    assert torch.allclose(module(h, cond), reference(h), atol=1e-6)


def test_spade_norm_constant_input_yields_beta():
    torch.manual_seed(0)
    module = SpadeNorm(channels=2, cond_channels=1, hidden=3, eps=1e-5).train()
    h = torch.full((2, 2, 4, 4), 3.7)
    cond = torch.randn(2, 1, 4, 4)
    with torch.no_grad():
        emb = module.shared(cond)
        beta = module.beta(emb)
    # the batch mean of a constant carries float32 rounding (~1e-7), and the
    # normalizer floor sqrt(0 + eps) amplifies it by ~316x
    assert torch.allclose(module(h, cond), beta, atol=1e-4)


def test_spade_norm_output_statistics():
    module = SpadeNorm(channels=3, cond_channels=2, hidden=4).train()
    with torch.no_grad():
        module.gamma.weight.zero_()
        module.gamma.bias.fill_(1.0)
        module.beta.weight.zero_()
        module.beta.bias.zero_()
    h = torch.randn(8, 3, 16, 16) * 5.0 + 2.0
    out = module(h, torch.randn(8, 2, 16, 16))
    assert out.mean(dim=(0, 2, 3)).abs().max() < 1e-5
    assert (out.var(dim=(0, 2, 3), unbiased=False) - 1).abs().max() < 1e-3


def test_spade_norm_interpolates_coarse_conditioning():
    module = SpadeNorm(channels=2, cond_channels=3, hidden=4)
    out = module(torch.randn(1, 2, 8, 8), torch.randn(1, 3, 4, 4))
    assert out.shape == (1, 2, 8, 8)


def test_spade_resblock_skip_projection_presence():
    changed = SpadeResBlock(8, 4, cond_channels=3, hidden=4)
    same = SpadeResBlock(8, 8, cond_channels=3, hidden=4)
    assert changed.conv_s is not None and changed.conv_s.bias is None
    assert same.conv_s is None
    out = changed(torch.randn(2, 8, 4, 4), torch.randn(2, 3, 4, 4))
    assert out.shape == (2, 4, 4, 4)


# -------------------------------------------------------------------- encoder

def test_encoder_pyramid_shapes_small():
    cfg = tiny_gen_cfg(num_classes=5, size=(64, 128))
    enc = SharedEncoder(cfg)
    z_y = torch.randn(2, 64 + 5, 64, 128)
    feats = enc(z_y)
    assert feats.s.shape == (2, 12, 64, 128)
    assert feats.s5.shape == (2, 24, 64, 128)
    assert feats.s4.shape == (2, 24, 32, 64)
    assert feats.s3.shape == (2, 24, 16, 32)
    assert feats.s2.shape == (2, 24, 8, 16)
    assert feats.s1.shape == (2, 24, 4, 8)
    assert feats.s0.shape == (2, 24, 2, 4)
    assert [t.shape[-2:] for t in feats.conditioning()] == \
        [torch.Size(s) for s in ((2, 4), (4, 8), (8, 16), (16, 32), (32, 64))]


def test_encoder_eval_mode_deterministic():
    cfg = tiny_gen_cfg()
    enc = SharedEncoder(cfg).eval()
    z_y = torch.randn(1, 64 + 5, 64, 128)
    with torch.no_grad():
        a, b = enc(z_y), enc(z_y)
    for ta, tb in zip([a.s, a.s5, a.s4, a.s3, a.s2, a.s1, a.s0],
                      [b.s, b.s5, b.s4, b.s3, b.s2, b.s1, b.s0]):
        assert torch.equal(ta, tb)


# -------------------------------------------------------------------- decoder

def test_decoder_zero_weights_gives_tanh_of_bias():
    cfg = tiny_gen_cfg()
    gen = RgbdGenerator(cfg)
    with torch.no_grad():
        for p in gen.parameters():
            p.zero_()
        gen.appearance.out_conv.bias.fill_(0.3)
        gen.geometry.out_conv.bias.fill_(-0.2)
    gen.eval()
    onehot = one_hot_labels(torch.randint(0, 5, (1, 64, 128)), 5)
    with torch.no_grad():
        rgb, depth = gen(onehot, torch.randn(1, 64, 64, 128))
    assert torch.allclose(rgb, torch.tanh(torch.tensor(0.3)).expand_as(rgb), atol=1e-6)
    assert torch.allclose(depth, torch.tanh(torch.tensor(-0.2)).expand_as(depth), atol=1e-6)


def test_decoder_stage_shapes_small():
    cfg = tiny_gen_cfg(num_classes=5, size=(64, 128))
    gen = RgbdGenerator(cfg)
    onehot = one_hot_labels(torch.randint(0, 5, (1, 64, 128)), 5)
    noise = torch.randn(1, 64, 64, 128)
    feats = gen.encode(onehot, noise)
    out, stages = gen.appearance(feats, torch.cat([noise, onehot], dim=1), collect_stages=True)
    assert stages[0].shape == (1, 48, 2, 4)          # stem at 1/32 scale
    expect = [(48, 4, 8), (32, 8, 16), (24, 16, 32), (16, 32, 64), (12, 64, 128)]
    for stage, (c, h, w) in zip(stages[1:], expect):
        assert stage.shape == (1, c, h, w)
    assert out.shape == (1, 3, 64, 128)


def test_generate_deterministic_and_noise_sensitive():
    cfg = tiny_gen_cfg()
    gen = RgbdGenerator(cfg).eval()
    label = LabelMap(torch.randint(0, 5, (64, 128)), num_classes=5)
    noise = sample_noise(torch.Generator().manual_seed(0), 64, 128)
    with torch.no_grad():
        first = gen.generate(label, noise)
        second = gen.generate(label, noise)
    assert torch.equal(first.rgb, second.rgb)
    assert torch.equal(first.depth.values, second.depth.values)
    outputs = []
    for seed in (1, 2, 3):
        with torch.no_grad():
            pair = gen.generate(label, sample_noise(torch.Generator().manual_seed(seed), 64, 128))
        outputs.append(pair.rgb)
    assert not torch.equal(outputs[0], outputs[1])
    assert not torch.equal(outputs[1], outputs[2])


def test_generate_output_ranges_and_validity():
    gen = RgbdGenerator(tiny_gen_cfg()).eval()
    label = LabelMap(torch.randint(0, 5, (64, 128)), num_classes=5)
    with torch.no_grad():
        pair = gen.generate(label, sample_noise(torch.Generator().manual_seed(7), 64, 128))
    assert pair.rgb.shape == (3, 64, 128) and pair.rgb.abs().max() <= 1.0
    assert pair.depth.values.shape == (1, 64, 128) and pair.depth.values.abs().max() <= 1.0
    assert pair.depth.validity.all()


def test_forward_matches_encode_decode_composition():
    gen = RgbdGenerator(tiny_gen_cfg()).eval()
    onehot = one_hot_labels(torch.randint(0, 5, (2, 64, 128)), 5)
    noise = torch.randn(2, 64, 64, 128)
    with torch.no_grad():
        rgb, depth = gen(onehot, noise)
        feats = gen.encode(onehot, noise)
        rgb2 = gen.decode(feats, onehot, noise, head="appearance")
        depth2 = gen.decode(feats, onehot, noise, head="geometry")
    assert torch.equal(rgb, rgb2)
    assert torch.equal(depth, depth2)


def test_gradient_reaches_encoder_from_both_decoders():
    gen = RgbdGenerator(tiny_gen_cfg())
    onehot = one_hot_labels(torch.randint(0, 5, (2, 64, 128)), 5)
    stem_weight = gen.encoder.stem[0].weight
    for head_index in (0, 1):
        gen.zero_grad(set_to_none=True)
        out = gen(onehot, torch.randn(2, 64, 64, 128))[head_index]
        out.sum().backward()
        assert stem_weight.grad is not None
        assert stem_weight.grad.abs().sum() > 0


def test_batched_forward_matches_per_sample():
    gen = RgbdGenerator(tiny_gen_cfg()).eval()
    onehot = one_hot_labels(torch.randint(0, 5, (2, 64, 128)), 5)
    noise = torch.randn(2, 64, 64, 128)
    with torch.no_grad():
        rgb, depth = gen(onehot, noise)
        singles = [gen(onehot[i:i + 1], noise[i:i + 1]) for i in range(2)]
    assert torch.allclose(rgb, torch.cat([s[0] for s in singles]), atol=1e-5)
    assert torch.allclose(depth, torch.cat([s[1] for s in singles]), atol=1e-5)


def test_input_contract_violations():
    gen = RgbdGenerator(tiny_gen_cfg())
    good_onehot = one_hot_labels(torch.randint(0, 5, (1, 64, 128)), 5)
    with pytest.raises(ValueError, match="label channels"):
        gen(torch.randn(1, 4, 64, 128), torch.randn(1, 64, 64, 128))
    with pytest.raises(ValueError, match="noise channels"):
        gen(good_onehot, torch.randn(1, 32, 64, 128))
    with pytest.raises(ValueError, match="spatial size"):
        gen(one_hot_labels(torch.randint(0, 5, (1, 32, 64)), 5), torch.randn(1, 64, 32, 64))
    with pytest.raises(ValueError, match="decoder head"):
        feats = gen.encode(good_onehot, torch.randn(1, 64, 64, 128))
        gen.decode(feats, good_onehot, torch.randn(1, 64, 64, 128), head="bogus")


def test_config_validation():
    with pytest.raises(ValueError, match="six"):
        GeneratorConfig(num_classes=3, decoder_channels=(8, 8), image_size=(64, 128))
    with pytest.raises(ValueError, match=str(DOWNSAMPLE_FACTOR)):
        GeneratorConfig(num_classes=3, image_size=(50, 100))


def test_default_config_matches_reference_architecture():
    cfg = GeneratorConfig(num_classes=40)
    assert cfg.noise_channels == 64
    assert cfg.decoder_channels == (1024, 1024, 512, 256, 128, 64)
    assert cfg.image_size == (256, 512)
    assert cfg.eps == 1e-5
