"""Shared fixtures: tiny model configurations and synthetic datasets."""
from __future__ import annotations

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from PIL import Image

from scmis import GeneratorConfig, RgbdGenerator, SegmentationDiscriminator


def tiny_gen_cfg(num_classes: int = 5, size=(64, 128), **overrides) -> GeneratorConfig:
    """A generator small enough for CPU test loops but structurally complete."""
    kwargs = dict(num_classes=num_classes, noise_channels=64, encoder_stem_width=12,
                  encoder_width=24, decoder_channels=(48, 48, 32, 24, 16, 12),
                  spade_hidden=24, image_size=size)
    kwargs.update(overrides)
    return GeneratorConfig(**kwargs)


def tiny_models(num_classes: int = 5, size=(64, 128), disc_depth: str = "lite",
                disc_head: str = "pp"):
    torch.manual_seed(0)
    gen = RgbdGenerator(tiny_gen_cfg(num_classes, size))
    disc = SegmentationDiscriminator(num_classes, depth=disc_depth, head=disc_head,
                                     channel_scale=0.25)
    return gen, disc


def class_coded_samples(num_classes: int = 5, size=(64, 128), seed: int = 5, count: int = 2):
    """Synthetic overfit samples whose color and depth are functions of the
    class map (blocky regions), so a label-conditioned model can fit them."""
    rng = torch.Generator().manual_seed(seed)
    colors = torch.rand(num_classes, 3, generator=rng) * 1.6 - 0.8
    depths = torch.rand(num_classes, 1, generator=rng) * 1.4 - 0.7
    samples = []
    for _ in range(count):
        coarse = torch.randint(0, num_classes, (size[0] // 8, size[1] // 8), generator=rng)
        label = F.interpolate(coarse[None, None].float(), size=size, mode="nearest")[0, 0].long()
        samples.append({"rgb": colors[label].permute(2, 0, 1).contiguous(),
                        "depth": depths[label].permute(2, 0, 1).contiguous(),
                        "valid": torch.ones(size, dtype=torch.bool),
                        "label": label})
    return samples


def write_dataset(root, count: int = 2, size=(32, 64), num_classes: int = 4, seed: int = 0):
    """A small on-disk dataset in the rgb/depth/label PNG layout."""
    rng = np.random.default_rng(seed)
    for kind in ("rgb", "depth", "label"):
        (root / kind).mkdir(parents=True, exist_ok=True)
    names = [f"{i:03d}.png" for i in range(count)]
    for name in names:
        Image.fromarray(rng.integers(0, 256, (*size, 3), dtype=np.uint8)).save(root / "rgb" / name)
        Image.fromarray(rng.integers(500, 9500, size).astype(np.uint16)).save(
            root / "depth" / name)
        Image.fromarray(rng.integers(0, num_classes, size).astype(np.uint8),
                        mode="L").save(root / "label" / name)
    return names


@pytest.fixture
def dataset_root(tmp_path):
    root = tmp_path / "data"
    write_dataset(root)
    return root
