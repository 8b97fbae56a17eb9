"""Evaluation metrics: Fréchet distance between feature distributions,
depth-reconstruction errors in metric units, and mean intersection-over-union.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data import DepthMap


# --------------------------------------------------------------------- frechet

@dataclass
class FeatureStats:
    """First and second moments of a feature set."""

    mu: np.ndarray   # (D,)
    cov: np.ndarray  # (D, D)

    def __post_init__(self) -> None:
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        if self.mu.ndim != 1 or self.cov.shape != (self.mu.size, self.mu.size):
            raise ValueError(f"inconsistent moments: mu {self.mu.shape}, cov {self.cov.shape}")
        if not np.allclose(self.cov, self.cov.T, atol=1e-8):
            raise ValueError("covariance must be symmetric")

    @classmethod
    def from_features(cls, features: np.ndarray) -> "FeatureStats":
        features = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if features.shape[0] < 2:
            raise ValueError("need at least 2 feature rows to estimate a covariance")
        return cls(mu=features.mean(axis=0), cov=np.cov(features, rowvar=False).reshape(
            features.shape[1], features.shape[1]))


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """Squared Wasserstein-2 gap between two Gaussians, computed from the
    eigenvalues of the covariance product (avoids an explicit matrix sqrt)."""
    if a.mu.shape != b.mu.shape:
        raise ValueError("feature dimensions disagree")
    c1 = (a.cov + a.cov.T) / 2.0
    c2 = (b.cov + b.cov.T) / 2.0
    diff = a.mu - b.mu
    eigs = np.linalg.eigvals(c1 @ c2)
    trace_sqrt = np.sqrt(np.clip(eigs.real, 0.0, None)).sum()
    value = diff @ diff + np.trace(c1) + np.trace(c2) - 2.0 * trace_sqrt
    return float(max(value, 0.0))


def channel_mean_extractor(images: torch.Tensor) -> np.ndarray:
    """Cheap stand-in feature map: per-channel spatial means. Useful for tests
    and smoke runs where the convolutional extractor's weights are overkill."""
    if images.ndim != 4:
        raise ValueError(f"expected (B, C, H, W) images, got {tuple(images.shape)}")
    return images.mean(dim=(2, 3)).detach().cpu().numpy().astype(np.float64)


class InceptionExtractor:
    """2048-d pool features from a pretrained Inception v3 with the classifier
    removed. Weights are read from a local file (no downloads): either pass a
    path or drop inception_v3_google-0cc3c7bd.pth into $SCMIS_CACHE.
    """

    IMAGENET_MEAN = (0.485, 0.456, 0.406)
    IMAGENET_STD = (0.229, 0.224, 0.225)

    def __init__(self, weights_path: str | os.PathLike | None = None):
        try:
            from torchvision.models import inception_v3
        except ImportError as exc:
            raise RuntimeError("torchvision is required for the inception extractor; "
                               "install the 'fid' extra") from exc
        if weights_path is None:
            cache = os.environ.get("SCMIS_CACHE", "")
            candidate = Path(cache) / "inception_v3_google-0cc3c7bd.pth" if cache else None
            if candidate is None or not candidate.is_file():
                raise RuntimeError("no inception weights: pass weights_path or set SCMIS_CACHE")
            weights_path = candidate
        model = inception_v3(weights=None, aux_logits=True, init_weights=False)
        state = torch.load(weights_path, map_location="cpu", weights_only=True)
        model.load_state_dict(state)
        model.fc = torch.nn.Identity()
        model.eval()
        self.model = model

    @torch.no_grad()
    def __call__(self, images: torch.Tensor) -> np.ndarray:
        """images in [-1, 1], (B, 3, H, W) -> (B, 2048) float64 features."""
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) images, got {tuple(images.shape)}")
        x = (images.float() + 1.0) / 2.0
        mean = torch.tensor(self.IMAGENET_MEAN).view(1, 3, 1, 1)
        std = torch.tensor(self.IMAGENET_STD).view(1, 3, 1, 1)
        x = (x - mean) / std
        x = torch.nn.functional.interpolate(x, size=(299, 299), mode="bilinear",
                                            align_corners=False)
        return self.model(x).cpu().numpy().astype(np.float64)


def fid(real_images: torch.Tensor, fake_images: torch.Tensor, extractor=None) -> float:
    """Fréchet distance between the feature distributions of two image sets."""
    if extractor is None:
        extractor = InceptionExtractor()
    real = FeatureStats.from_features(extractor(real_images))
    fake = FeatureStats.from_features(extractor(fake_images))
    return frechet_distance(real, fake)


# ----------------------------------------------------------------------- depth

@dataclass
class DepthMetrics:
    abs_rel: float
    rmse: float
    sq_rel: float

    def as_dict(self) -> dict:
        return {"abs_rel": self.abs_rel, "rmse": self.rmse, "sq_rel": self.sq_rel}


def _to_meters(d: DepthMap) -> np.ndarray:
    values = d.values.detach().cpu().numpy().astype(np.float64).squeeze(0)
    return (values + 1.0) / 2.0 * d.max_depth_m


def depth_metrics(pred: DepthMap, gt: DepthMap) -> DepthMetrics:
    """Absolute-relative error, RMSE, and squared-relative error in meters,
    over pixels valid in both maps with strictly positive ground truth."""
    p = _to_meters(pred)
    g = _to_meters(gt)
    if p.shape != g.shape:
        raise ValueError(f"depth shapes disagree: {p.shape} vs {g.shape}")
    mask = (pred.validity.cpu().numpy() & gt.validity.cpu().numpy()) & (g > 0)
    if not mask.any():
        raise ValueError("no valid pixels with positive ground-truth depth")
    p = p[mask]
    g = g[mask]
    diff = p - g
    return DepthMetrics(abs_rel=float(np.mean(np.abs(diff) / g)),
                        rmse=float(np.sqrt(np.mean(diff ** 2))),
                        sq_rel=float(np.mean(diff ** 2 / g)))


# ------------------------------------------------------------------------ miou

def confusion_matrix(gt: torch.Tensor, pred: torch.Tensor, num_classes: int) -> np.ndarray:
    """(N, N) counts with ground truth along rows; pixels whose ground truth or
    prediction falls outside [0, N) are ignored."""
    if gt.shape != pred.shape:
        raise ValueError(f"label shapes disagree: {tuple(gt.shape)} vs {tuple(pred.shape)}")
    g = gt.detach().cpu().numpy().astype(np.int64).ravel()
    p = pred.detach().cpu().numpy().astype(np.int64).ravel()
    keep = (g >= 0) & (g < num_classes) & (p >= 0) & (p < num_classes)
    g, p = g[keep], p[keep]
    return np.bincount(g * num_classes + p,
                       minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def miou(confusion: np.ndarray) -> float:
    """Mean of per-class intersection/union; classes never seen (zero union)
    are left out of the mean."""
    confusion = np.asarray(confusion, dtype=np.float64)
    if confusion.ndim != 2 or confusion.shape[0] != confusion.shape[1]:
        raise ValueError(f"confusion matrix must be square, got {confusion.shape}")
    inter = np.diag(confusion)
    union = confusion.sum(axis=0) + confusion.sum(axis=1) - inter
    present = union > 0
    if not present.any():
        raise ValueError("confusion matrix is empty: no class has any pixel")
    return float((inter[present] / union[present]).mean())
