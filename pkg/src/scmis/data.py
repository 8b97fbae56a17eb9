"""Dataset ingestion and image I/O for NYU-style RGB-D segmentation data.

Expected directory layout:

    root/
      rgb/<name>.png    8-bit RGB
      depth/<name>.png  16-bit grayscale, millimeters, 0 = no sensor reading
      label/<name>.png  8-bit single channel, class index, 255 = void

All three folders must contain the same file names. Decoding is pure and the
dataset object is immutable, so it is safe to read from worker threads.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch.utils.data import Dataset

VOID_LABEL = 255
NOISE_CHANNELS = 64


class IngestionError(RuntimeError):
    """Broken dataset layout: missing folder, orphan file, or empty split."""


@dataclass
class LabelMap:
    """Per-pixel semantic class indices with 255 marking unlabeled pixels."""

    classes: torch.Tensor  # (H, W), integer
    num_classes: int

    def __post_init__(self) -> None:
        if self.classes.ndim != 2 or self.classes.numel() == 0:
            raise ValueError(f"label map must be 2D and non-empty, got shape {tuple(self.classes.shape)}")
        self.classes = self.classes.long()
        labelled = self.classes[self.classes != VOID_LABEL]
        if labelled.numel():
            lo, hi = int(labelled.min()), int(labelled.max())
            if lo < 0 or hi >= self.num_classes:
                raise ValueError(f"class index {min(lo, hi) if lo < 0 else hi} out of range "
                                 f"for {self.num_classes} classes")


@dataclass
class DepthMap:
    """Depth normalized to [-1, 1] plus a validity mask; invalid pixels hold -1."""

    values: torch.Tensor    # (1, H, W), float
    validity: torch.Tensor  # (H, W), bool
    max_depth_m: float

    def __post_init__(self) -> None:
        if self.values.ndim != 3 or self.values.shape[0] != 1:
            raise ValueError(f"depth values must be (1, H, W), got {tuple(self.values.shape)}")
        if self.validity.shape != self.values.shape[1:]:
            raise ValueError("validity mask does not match depth shape")
        if self.max_depth_m <= 0:
            raise ValueError("max_depth_m must be positive")
        self.validity = self.validity.bool()


@dataclass
class DatasetIndex:
    """Filename-sorted aligned (rgb, depth, label) triples for one split."""

    samples: list[tuple[Path, Path, Path]]
    split: str
    num_classes: int


def load_dataset(root, split: str, num_classes: int) -> DatasetIndex:
    """Index an on-disk split, failing loudly on layout problems."""
    root = Path(root)
    kinds = ("rgb", "depth", "label")
    files: dict[str, dict[str, Path]] = {}
    for kind in kinds:
        d = root / kind
        if not d.is_dir():
            raise IngestionError(f"missing directory: {d}")
        files[kind] = {p.name: p for p in d.iterdir() if p.is_file()}
    names = sorted(set().union(*(set(v) for v in files.values())))
    if not names:
        raise IngestionError(f"empty split '{split}' under {root}")
    samples = []
    for name in names:
        missing = [kind for kind in kinds if name not in files[kind]]
        if missing:
            raise IngestionError(f"orphan file '{name}': missing from {', '.join(missing)}/")
        samples.append(tuple(files[kind][name] for kind in kinds))
    return DatasetIndex(samples=samples, split=split, num_classes=num_classes)


def one_hot_labels(classes: torch.Tensor, num_classes: int) -> torch.Tensor:
    """(B, H, W) integer labels -> (B, N, H, W) float one-hot; void pixels all-zero."""
    classes = classes.long()
    valid = classes != VOID_LABEL
    safe = torch.where(valid, classes, torch.zeros_like(classes))
    onehot = F.one_hot(safe, num_classes).permute(0, 3, 1, 2).float()
    return onehot * valid.unsqueeze(1)


def encode_label(label: LabelMap) -> torch.Tensor:
    """One-hot encode a single map to (N, H, W); exactly one 1 per labelled pixel."""
    return one_hot_labels(label.classes.unsqueeze(0), label.num_classes)[0]


def sample_noise(rng: torch.Generator, height: int, width: int) -> torch.Tensor:
    """(64, H, W) i.i.d. standard normal draw, deterministic for a seeded generator."""
    if height <= 0 or width <= 0:
        raise ValueError("noise size must be positive")
    return torch.randn(NOISE_CHANNELS, height, width, generator=rng)


def normalize_depth(raw_mm, max_depth_m: float) -> DepthMap:
    """Map raw millimeter readings onto [-1, 1].

    Valid pixels: value = 2 * min(raw/1000, max_depth_m) / max_depth_m - 1, so a
    reading of max_depth_m meters or beyond saturates at +1. Zero readings mean
    "no data" and come out as -1 with validity False.
    """
    if max_depth_m <= 0:
        raise ValueError("max_depth_m must be positive")
    raw = torch.as_tensor(np.asarray(raw_mm), dtype=torch.float64)
    if raw.ndim != 2:
        raise ValueError(f"raw depth must be 2D, got shape {tuple(raw.shape)}")
    valid = raw > 0
    meters = (raw / 1000.0).clamp(max=float(max_depth_m))
    values = 2.0 * meters / max_depth_m - 1.0
    values = torch.where(valid, values, torch.full_like(values, -1.0))
    return DepthMap(values=values.unsqueeze(0).float(), validity=valid, max_depth_m=float(max_depth_m))


def depth_to_millimeters(depth: DepthMap) -> np.ndarray:
    """Invert normalize_depth to a 16-bit millimeter grid; invalid pixels write 0."""
    meters = (depth.values[0].detach().double() + 1.0) * 0.5 * depth.max_depth_m
    mm = torch.round(meters * 1000.0).clamp(0, 65535)
    mm = torch.where(depth.validity, mm, torch.zeros_like(mm))
    return mm.numpy().astype(np.uint16)


def load_rgb(path, size=None) -> torch.Tensor:
    """8-bit RGB PNG -> (3, H, W) float in [-1, 1], bilinear-resized if asked."""
    img = Image.open(path).convert("RGB")
    if size is not None:
        img = img.resize((size[1], size[0]), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float32)
    return torch.from_numpy(arr).permute(2, 0, 1) / 127.5 - 1.0


def save_rgb(path, rgb: torch.Tensor) -> None:
    arr = ((rgb.detach().clamp(-1, 1) + 1.0) * 127.5).round().byte()
    Image.fromarray(arr.permute(1, 2, 0).numpy(), mode="RGB").save(path)


def load_label(path, num_classes: int, size=None) -> LabelMap:
    """8-bit single-channel PNG -> LabelMap, nearest-resized if asked."""
    img = Image.open(path)
    if img.mode != "L":
        img = img.convert("L")
    if size is not None:
        img = img.resize((size[1], size[0]), Image.NEAREST)
    classes = torch.from_numpy(np.asarray(img, dtype=np.int64))
    return LabelMap(classes=classes, num_classes=num_classes)


def save_label(path, label: LabelMap) -> None:
    Image.fromarray(label.classes.numpy().astype(np.uint8), mode="L").save(path)


def load_depth(path, max_depth_m: float, size=None) -> DepthMap:
    """16-bit millimeter PNG -> DepthMap, nearest-resized if asked."""
    img = Image.open(path)
    if size is not None:
        img = img.resize((size[1], size[0]), Image.NEAREST)
    raw = np.asarray(img).astype(np.int64)
    return normalize_depth(raw, max_depth_m)


def save_depth(path, depth: DepthMap) -> None:
    Image.fromarray(depth_to_millimeters(depth)).save(path)  # uint16 -> 16-bit gray PNG


class RgbdDataset(Dataset):
    """Decodes aligned (rgb, depth, label) triples at a fixed training size."""

    def __init__(self, index: DatasetIndex, size=(256, 512), max_depth_m: float = 10.0):
        self.index = index
        self.size = tuple(size)
        self.max_depth_m = float(max_depth_m)

    def __len__(self) -> int:
        return len(self.index.samples)

    def __getitem__(self, i: int) -> dict[str, torch.Tensor]:
        rgb_path, depth_path, label_path = self.index.samples[i]
        rgb = load_rgb(rgb_path, self.size)
        depth = load_depth(depth_path, self.max_depth_m, self.size)
        label = load_label(label_path, self.index.num_classes, self.size)
        return {"rgb": rgb, "depth": depth.values, "valid": depth.validity, "label": label.classes}
