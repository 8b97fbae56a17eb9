"""Class-wise data augmentation: regenerate a random subset of each image's
semantic classes with the generator and splice the synthetic pixels into the
real sample. Labels are never altered; only appearance and/or geometry are.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .data import (VOID_LABEL, DepthMap, LabelMap, load_depth, load_label, load_rgb,
                   sample_noise, save_depth, save_label, save_rgb)

MODALITIES = ("depth", "rgb", "rgbd")
_SEED_STRIDE = 1_000_003


@dataclass
class MixSpec:
    """How much to replace (fraction of present classes) and in which modality."""

    ratio: float
    modality: str
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError(f"ratio must be in [0, 1], got {self.ratio}")
        if self.modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}, got '{self.modality}'")


@dataclass
class MixedSample:
    rgb: torch.Tensor
    depth: DepthMap
    label: LabelMap
    chosen_classes: list[int] = field(default_factory=list)


def choose_classes(classes: torch.Tensor, ratio: float, rng: torch.Generator) -> list[int]:
    """Pick round(ratio * C) of the C non-void classes present in the map,
    uniformly without replacement; at least one whenever ratio > 0."""
    present = sorted(int(c) for c in torch.unique(classes) if int(c) != VOID_LABEL)
    if not present or ratio <= 0.0:
        return []
    k = min(len(present), max(1, round(ratio * len(present))))
    order = torch.randperm(len(present), generator=rng)[:k]
    return sorted(present[int(i)] for i in order)


def _replacement_mask(classes: torch.Tensor, chosen: list[int]) -> torch.Tensor:
    mask = torch.zeros_like(classes, dtype=torch.bool)
    for c in chosen:
        mask |= classes == c
    return mask


def mix_sample(rgb: torch.Tensor, depth: DepthMap, label: LabelMap, generated,
               chosen: list[int], modality: str) -> MixedSample:
    """Replace the pixels of the chosen classes with the generated pair's.

    Synthetic depth is always valid, so replaced pixels gain validity; nothing
    outside the chosen classes changes, and the label map never does.
    """
    if modality not in MODALITIES:
        raise ValueError(f"modality must be one of {MODALITIES}, got '{modality}'")
    hw = tuple(label.classes.shape)
    for name, got in (("rgb", tuple(rgb.shape[-2:])),
                      ("depth", tuple(depth.values.shape[-2:])),
                      ("generated rgb", tuple(generated.rgb.shape[-2:])),
                      ("generated depth", tuple(generated.depth.values.shape[-2:]))):
        if got != hw:
            raise ValueError(f"{name} spatial size {got} does not match label {hw}")
    replace = _replacement_mask(label.classes, chosen)
    out_rgb = rgb
    out_depth = depth
    if modality in ("rgb", "rgbd"):
        out_rgb = torch.where(replace.unsqueeze(0), generated.rgb, rgb)
    if modality in ("depth", "rgbd"):
        values = torch.where(replace.unsqueeze(0), generated.depth.values, depth.values)
        out_depth = DepthMap(values, depth.validity | replace, depth.max_depth_m)
    return MixedSample(rgb=out_rgb, depth=out_depth, label=label, chosen_classes=list(chosen))


def mix_dataset(generator, index, spec: MixSpec, out_dir, size=None,
                max_depth_m: float = 10.0) -> dict:
    """Mix every sample in the index and write the results as a dataset with
    the same rgb/depth/label layout. Returns the manifest (also written to
    out_dir/manifest.json)."""
    out = Path(out_dir)
    for kind in ("rgb", "depth", "label"):
        (out / kind).mkdir(parents=True, exist_ok=True)
    if size is None:
        size = generator.cfg.image_size
    h, w = size
    generator.eval()
    entries = []
    failures = []
    for i, (rgb_path, depth_path, label_path) in enumerate(index.samples):
        name = rgb_path.name
        try:
            rgb = load_rgb(rgb_path, size)
            depth = load_depth(depth_path, max_depth_m, size)
            label = load_label(label_path, index.num_classes, size)
            rng = torch.Generator().manual_seed((spec.seed * _SEED_STRIDE + i) % (2 ** 63))
            chosen = choose_classes(label.classes, spec.ratio, rng)
            with torch.no_grad():
                pair = generator.generate(label, sample_noise(rng, h, w), max_depth_m)
            mixed = mix_sample(rgb, depth, label, pair, chosen, spec.modality)
            save_rgb(out / "rgb" / name, mixed.rgb)
            save_depth(out / "depth" / name, mixed.depth)
            save_label(out / "label" / name, mixed.label)
            entries.append({"name": name, "classes": mixed.chosen_classes})
        except OSError as exc:
            failures.append({"name": name, "error": str(exc)})
    manifest = {"ratio": spec.ratio, "modality": spec.modality, "seed": spec.seed,
                "samples": entries, "failures": failures}
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return manifest
