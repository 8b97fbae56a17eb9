"""Per-pixel (N+1)-way discriminator on a trainable VGG-style backbone.

Every pixel of a real image should be classified as its semantic class and
every generated pixel as the extra "fake" class. The backbone doubles as the
feature extractor for the feature-alignment loss, so each stage output is
exposed as a tap: one after the stem, one before each max-pool, and one at the
end.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .generator import init_gan_weights

LAYOUTS = {
    "lite": (64, "M", 128, "M", 256, "M", 512),
    "shallow": (64, 64, "M", 128, 128, "M", 256, 256, "M", 512),
    "middle": (64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M", 512),
    "deep": (64, 64, 64, 64, 64, "M", 128, 128, 128, "M", 256, 256, 256, 256, "M", 512),
}
POOL_GRIDS = (1, 2, 3, 6)
HEADS = ("upsample", "pp", "unet")


def _kernel_for(in_channels: int) -> int:
    # wide layers use 1x1 kernels to keep the discriminator compact
    return 3 if in_channels < 256 else 1


def _scaled(channels: int, scale: float) -> int:
    return max(8, int(round(channels * scale)))


def _sn_conv(cin: int, cout: int, kernel: int) -> nn.Conv2d:
    return nn.utils.spectral_norm(nn.Conv2d(cin, cout, kernel, padding=kernel // 2))


class ConvBlock(nn.Module):
    """Spectrally normalized convolution followed by ReLU."""

    def __init__(self, cin: int, cout: int, kernel: int):
        super().__init__()
        self.conv = _sn_conv(cin, cout, kernel)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(self.conv(x))


class VggBackbone(nn.Module):
    """Stack of ConvBlocks with interleaved 2x2 max pooling.

    Taps sit after the stem, after the last ConvBlock before each pool, and
    after the final ConvBlock (duplicates collapsed), so the middle layout
    yields five taps at strides 1, 1, 2, 4, 8.
    """

    def __init__(self, depth: str = "middle", in_channels: int = 3, channel_scale: float = 1.0):
        super().__init__()
        if depth not in LAYOUTS:
            raise ValueError(f"unknown backbone depth '{depth}' (choose from {sorted(LAYOUTS)})")
        layout = LAYOUTS[depth]
        self.depth = depth

        tap_idx = {0}
        for i, item in enumerate(layout):
            if item == "M":
                tap_idx.add(i - 1)
        tap_idx.add(len(layout) - 1)

        self.layers = nn.ModuleList()
        self._tap_after: set[int] = set()
        self.tap_channels: list[int] = []
        stride = 1
        self.tap_strides: list[int] = []
        cin = in_channels
        for i, item in enumerate(layout):
            if item == "M":
                self.layers.append(nn.MaxPool2d(2))
                stride *= 2
            else:
                cout = _scaled(item, channel_scale)
                self.layers.append(ConvBlock(cin, cout, _kernel_for(cin)))
                if i in tap_idx:
                    self._tap_after.add(i)
                    self.tap_channels.append(cout)
                    self.tap_strides.append(stride)
                cin = cout
        self.out_channels = cin

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        taps = []
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i in self._tap_after:
                taps.append(x)
        return taps

    def layer_manifest(self) -> list[str]:
        """One descriptor per layer, e.g. 'conv3x3-64' or 'maxpool'."""
        out = []
        for layer in self.layers:
            if isinstance(layer, nn.MaxPool2d):
                out.append("maxpool")
            else:
                conv = layer.conv
                kh, kw = conv.kernel_size
                out.append(f"conv{kh}x{kw}-{conv.out_channels}")
        return out


class UpsampleHead(nn.Module):
    """1x1 classifier on the deepest tap, bilinearly upsampled to the input size."""

    def __init__(self, in_channels: int, num_logits: int):
        super().__init__()
        self.classifier = nn.Conv2d(in_channels, num_logits, 1)

    def forward(self, taps: list[torch.Tensor], out_size) -> torch.Tensor:
        return F.interpolate(self.classifier(taps[-1]), size=out_size,
                             mode="bilinear", align_corners=False)


class PyramidPoolingHead(nn.Module):
    """Multi-grid average-pooled context fused with the deepest tap."""

    def __init__(self, in_channels: int, num_logits: int, grids=POOL_GRIDS):
        super().__init__()
        self.grids = tuple(grids)
        branch_ch = max(1, in_channels // len(self.grids))
        self.branches = nn.ModuleList([
            nn.Sequential(nn.AdaptiveAvgPool2d(g), _sn_conv(in_channels, branch_ch, 1), nn.ReLU())
            for g in self.grids
        ])
        fused = in_channels + branch_ch * len(self.grids)
        self.fuse = nn.Sequential(_sn_conv(fused, in_channels, 1), nn.ReLU())
        self.classifier = nn.Conv2d(in_channels, num_logits, 1)

    def forward(self, taps: list[torch.Tensor], out_size) -> torch.Tensor:
        deep = taps[-1]
        size = deep.shape[-2:]
        ctx = [deep] + [F.interpolate(branch(deep), size=size, mode="bilinear", align_corners=False)
                        for branch in self.branches]
        fused = self.fuse(torch.cat(ctx, dim=1))
        return F.interpolate(self.classifier(fused), size=out_size,
                             mode="bilinear", align_corners=False)


class UnetHead(nn.Module):
    """Decoder folding every tap back in at its own scale (nearest upsample + conv)."""

    def __init__(self, tap_channels: list[int], num_logits: int):
        super().__init__()
        merges = []
        ch = tap_channels[-1]
        for skip_ch in reversed(tap_channels[:-1]):
            cin = ch + skip_ch
            k = _kernel_for(cin)
            merges.append(nn.Sequential(_sn_conv(cin, skip_ch, k), nn.ReLU()))
            ch = skip_ch
        self.merges = nn.ModuleList(merges)
        self.classifier = nn.Conv2d(ch, num_logits, 1)

    def forward(self, taps: list[torch.Tensor], out_size) -> torch.Tensor:
        x = taps[-1]
        for merge, skip in zip(self.merges, reversed(taps[:-1])):
            if x.shape[-2:] != skip.shape[-2:]:
                x = F.interpolate(x, size=skip.shape[-2:], mode="nearest")
            x = merge(torch.cat([x, skip], dim=1))
        logits = self.classifier(x)
        if logits.shape[-2:] != tuple(out_size):
            logits = F.interpolate(logits, size=out_size, mode="bilinear", align_corners=False)
        return logits


@dataclass
class DiscriminatorOutput:
    logits: torch.Tensor      # (B, N+1, H, W); channel N is the fake class
    taps: list[torch.Tensor]  # backbone stage outputs, shallow to deep


class SegmentationDiscriminator(nn.Module):
    """Labels every pixel as one of N semantic classes or as generated."""

    def __init__(self, num_classes: int, depth: str = "middle", head: str = "pp",
                 in_channels: int = 3, channel_scale: float = 1.0):
        super().__init__()
        if head not in HEADS:
            raise ValueError(f"unknown head '{head}' (choose from {HEADS})")
        if num_classes < 1:
            raise ValueError("num_classes must be at least 1")
        self.num_classes = num_classes
        self.in_channels = in_channels
        self.head_kind = head
        self.backbone = VggBackbone(depth, in_channels, channel_scale)
        num_logits = num_classes + 1
        if head == "upsample":
            self.head = UpsampleHead(self.backbone.out_channels, num_logits)
        elif head == "pp":
            self.head = PyramidPoolingHead(self.backbone.out_channels, num_logits)
        else:
            self.head = UnetHead(self.backbone.tap_channels, num_logits)
        self.apply(init_gan_weights)

    def forward(self, image: torch.Tensor) -> DiscriminatorOutput:
        if image.ndim != 4 or image.shape[1] != self.in_channels:
            raise ValueError(f"expected (B, {self.in_channels}, H, W) input, "
                             f"got {tuple(image.shape)}")
        taps = self.backbone(image)
        logits = self.head(taps, image.shape[-2:])
        return DiscriminatorOutput(logits=logits, taps=taps)

    def discriminate(self, image: torch.Tensor) -> DiscriminatorOutput:
        return self(image)
