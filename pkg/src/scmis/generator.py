"""Label-conditional RGB-D generator.

One shared encoder turns (noise ⊕ one-hot label) into a feature pyramid; two
decoders with spatially-adaptive normalization turn that pyramid into an RGB
image and a depth map that share the same scene layout.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .data import NOISE_CHANNELS, DepthMap, LabelMap, one_hot_labels

# five halvings between full resolution and the decoder stem
DOWNSAMPLE_FACTOR = 32


@dataclass
class GeneratorConfig:
    num_classes: int
    noise_channels: int = NOISE_CHANNELS
    encoder_stem_width: int = 32
    encoder_width: int = 64
    decoder_channels: tuple[int, ...] = (1024, 1024, 512, 256, 128, 64)
    spade_hidden: int = 128
    out_channels_appearance: int = 3
    out_channels_geometry: int = 1
    image_size: tuple[int, int] = (256, 512)
    eps: float = 1e-5

    def __post_init__(self) -> None:
        self.decoder_channels = tuple(self.decoder_channels)
        self.image_size = tuple(self.image_size)
        if self.num_classes < 1:
            raise ValueError("num_classes must be at least 1")
        if len(self.decoder_channels) != 6:
            raise ValueError("decoder needs six channel widths (stem + five blocks)")
        h, w = self.image_size
        if h % DOWNSAMPLE_FACTOR or w % DOWNSAMPLE_FACTOR:
            raise ValueError(f"image size must be divisible by {DOWNSAMPLE_FACTOR}, got {h}x{w}")
        if self.eps <= 0:
            raise ValueError("eps must be positive")


@dataclass
class EncoderFeatures:
    """Feature pyramid from full resolution (s, s5) down to 1/32 (s0)."""

    s: torch.Tensor
    s5: torch.Tensor
    s4: torch.Tensor
    s3: torch.Tensor
    s2: torch.Tensor
    s1: torch.Tensor
    s0: torch.Tensor

    def conditioning(self) -> list[torch.Tensor]:
        """Per-decoder-block conditioning, coarsest first."""
        return [self.s0, self.s1, self.s2, self.s3, self.s4]


@dataclass
class GeneratedPair:
    """One synthesized sample; generated depth is dense, so validity is all-true."""

    rgb: torch.Tensor  # (3, H, W) in [-1, 1]
    depth: DepthMap


def init_gan_weights(module: nn.Module) -> None:
    """Convolutions start at N(0, 0.02) with zero bias."""
    if isinstance(module, nn.Conv2d):
        weight = getattr(module, "weight_orig", module.weight)
        nn.init.normal_(weight, 0.0, 0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)


class SpadeNorm(nn.Module):
    """Parameter-free batch norm whose scale and shift are convolved from a conditioning map.

    output = gamma(e) * (h - mu) / sqrt(var + eps) + beta(e), with per-channel
    batch statistics in training mode and running averages in eval mode.
    """

    def __init__(self, channels: int, cond_channels: int, hidden: int, eps: float = 1e-5):
        super().__init__()
        self.norm = nn.BatchNorm2d(channels, eps=eps, affine=False)
        self.shared = nn.Sequential(nn.Conv2d(cond_channels, hidden, 3, padding=1), nn.ReLU())
        self.gamma = nn.Conv2d(hidden, channels, 3, padding=1)
        self.beta = nn.Conv2d(hidden, channels, 3, padding=1)

    def forward(self, h: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        if cond.shape[-2:] != h.shape[-2:]:
            cond = F.interpolate(cond, size=h.shape[-2:], mode="nearest")
        emb = self.shared(cond)
        return self.gamma(emb) * self.norm(h) + self.beta(emb)


class SpadeResBlock(nn.Module):
    """Residual block with conditional normalization ahead of each convolution.

    The skip path gets its own normalization + 1x1 projection when the channel
    count changes.
    """

    def __init__(self, fin: int, fout: int, cond_channels: int, hidden: int, eps: float = 1e-5):
        super().__init__()
        fmid = min(fin, fout)
        self.norm0 = SpadeNorm(fin, cond_channels, hidden, eps)
        self.conv0 = nn.Conv2d(fin, fmid, 3, padding=1)
        self.norm1 = SpadeNorm(fmid, cond_channels, hidden, eps)
        self.conv1 = nn.Conv2d(fmid, fout, 3, padding=1)
        if fin != fout:
            self.norm_s = SpadeNorm(fin, cond_channels, hidden, eps)
            self.conv_s = nn.Conv2d(fin, fout, 1, bias=False)
        else:
            self.norm_s = None
            self.conv_s = None

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        res = x if self.conv_s is None else self.conv_s(self.norm_s(x, cond))
        dx = self.conv0(F.leaky_relu(self.norm0(x, cond), 0.2))
        dx = self.conv1(F.leaky_relu(self.norm1(dx, cond), 0.2))
        return res + dx


def _conv_block(cin: int, cout: int, stride: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
        nn.BatchNorm2d(cout),
        nn.ReLU(),
    )


class SharedEncoder(nn.Module):
    """Feature pyramid over (noise ⊕ one-hot label), shared by both decoders.

    Two stride-1 blocks produce s and s5 at full resolution, then five stride-2
    blocks halve down to s0 at 1/32.
    """

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        cin = cfg.noise_channels + cfg.num_classes
        w = cfg.encoder_width
        self.stem = _conv_block(cin, cfg.encoder_stem_width, 1)
        self.block5 = _conv_block(cfg.encoder_stem_width, w, 1)
        self.down = nn.ModuleList([_conv_block(w, w, 2) for _ in range(5)])

    def forward(self, z_y: torch.Tensor) -> EncoderFeatures:
        s = self.stem(z_y)
        x = self.block5(s)
        levels = [x]
        for blk in self.down:
            x = blk(x)
            levels.append(x)
        s5, s4, s3, s2, s1, s0 = levels
        return EncoderFeatures(s=s, s5=s5, s4=s4, s3=s3, s2=s2, s1=s1, s0=s0)


class SpadeDecoder(nn.Module):
    """Ladder of conditional residual blocks from 1/32 back to full resolution.

    The (noise ⊕ label) input is nearest-downsampled to the stem size; each
    block is conditioned on the encoder level matching its input resolution and
    followed by a 2x nearest upsample.
    """

    def __init__(self, cfg: GeneratorConfig, out_channels: int):
        super().__init__()
        ch = cfg.decoder_channels
        cin = cfg.noise_channels + cfg.num_classes
        self.stem = nn.Conv2d(cin, ch[0], 3, padding=1)
        self.blocks = nn.ModuleList([
            SpadeResBlock(ch[i], ch[i + 1], cfg.encoder_width, cfg.spade_hidden, cfg.eps)
            for i in range(5)
        ])
        self.out_conv = nn.Conv2d(ch[5], out_channels, 3, padding=1)

    def forward(self, feats: EncoderFeatures, z_y: torch.Tensor, collect_stages: bool = False):
        h, w = z_y.shape[-2:]
        stem_in = F.interpolate(z_y, size=(h // DOWNSAMPLE_FACTOR, w // DOWNSAMPLE_FACTOR),
                                mode="nearest")
        x = self.stem(stem_in)
        stages = [x]
        for block, cond in zip(self.blocks, feats.conditioning()):
            x = block(x, cond)
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            stages.append(x)
        out = torch.tanh(self.out_conv(F.leaky_relu(x, 0.2)))
        if collect_stages:
            return out, stages
        return out


class RgbdGenerator(nn.Module):
    """Shared encoder plus appearance (RGB) and geometry (depth) decoders."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = SharedEncoder(cfg)
        self.appearance = SpadeDecoder(cfg, cfg.out_channels_appearance)
        self.geometry = SpadeDecoder(cfg, cfg.out_channels_geometry)
        self.apply(init_gan_weights)

    def _check_inputs(self, label_onehot: torch.Tensor, noise: torch.Tensor) -> None:
        if label_onehot.shape[1] != self.cfg.num_classes:
            raise ValueError(f"expected {self.cfg.num_classes} label channels, "
                             f"got {label_onehot.shape[1]}")
        if noise.shape[1] != self.cfg.noise_channels:
            raise ValueError(f"expected {self.cfg.noise_channels} noise channels, "
                             f"got {noise.shape[1]}")
        if tuple(label_onehot.shape[-2:]) != self.cfg.image_size or label_onehot.shape[-2:] != noise.shape[-2:]:
            raise ValueError(f"label/noise spatial size must be {self.cfg.image_size}, "
                             f"got {tuple(label_onehot.shape[-2:])} / {tuple(noise.shape[-2:])}")

    def encode(self, label_onehot: torch.Tensor, noise: torch.Tensor) -> EncoderFeatures:
        self._check_inputs(label_onehot, noise)
        return self.encoder(torch.cat([noise, label_onehot], dim=1))

    def decode(self, feats: EncoderFeatures, label_onehot: torch.Tensor, noise: torch.Tensor,
               head: str = "appearance") -> torch.Tensor:
        if head not in ("appearance", "geometry"):
            raise ValueError(f"unknown decoder head '{head}'")
        decoder = self.appearance if head == "appearance" else self.geometry
        return decoder(feats, torch.cat([noise, label_onehot], dim=1))

    def forward(self, label_onehot: torch.Tensor, noise: torch.Tensor):
        self._check_inputs(label_onehot, noise)
        z_y = torch.cat([noise, label_onehot], dim=1)
        feats = self.encoder(z_y)
        return self.appearance(feats, z_y), self.geometry(feats, z_y)

    def generate(self, label: LabelMap, noise: torch.Tensor, max_depth_m: float = 10.0) -> GeneratedPair:
        """Single-sample convenience wrapper around forward()."""
        onehot = one_hot_labels(label.classes.unsqueeze(0), self.cfg.num_classes)
        rgb, depth = self.forward(onehot, noise.unsqueeze(0))
        validity = torch.ones_like(label.classes, dtype=torch.bool)
        return GeneratedPair(rgb=rgb[0], depth=DepthMap(depth[0], validity, max_depth_m))
