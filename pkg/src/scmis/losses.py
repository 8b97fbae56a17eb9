"""Training objectives: class-balanced per-pixel adversarial terms, feature
alignment on discriminator taps, masked depth regression, and mixing
consistency.

Conventions shared by every term: label value 255 is void and never
contributes to a sum or a divisor; pixel means divide by the number of
contributing pixels; log arguments are floored at 1e-8.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .data import VOID_LABEL

LOG_FLOOR = math.log(1e-8)


class NonFiniteLossError(RuntimeError):
    """A loss component stopped being finite."""

    def __init__(self, component: str):
        self.component = component
        super().__init__(f"non-finite loss component '{component}'")


def class_weights(labels: torch.Tensor, num_classes: int) -> torch.Tensor:
    """Inverse pixel-frequency weight per class: mean over the maps where the
    class occurs of (H*W / its pixel count in that map).

    labels: (B, H, W) integer maps, 255 = void. Classes absent from every map
    get weight 0. Counting stays in exact integers and the mean is taken in
    double precision, one map at a time in batch order.
    """
    if labels.ndim != 3 or labels.numel() == 0:
        raise ValueError(f"expected a non-empty (B, H, W) label batch, got {tuple(labels.shape)}")
    area = labels.shape[1] * labels.shape[2]
    per_map = []
    for m in labels.reshape(labels.shape[0], -1):
        m = m[m != VOID_LABEL]
        per_map.append(torch.bincount(m, minlength=num_classes).tolist())
    alpha = []
    for c in range(num_classes):
        ratios = [area / counts[c] for counts in per_map if counts[c] > 0]
        alpha.append(sum(ratios) / len(ratios) if ratios else 0.0)
    return torch.tensor(alpha, dtype=torch.float64)


def dataset_class_weights(label_maps, num_classes: int) -> torch.Tensor:
    """class_weights over an arbitrarily large collection of (H, W) maps,
    consumed one at a time (so nothing needs to be stacked in memory); the
    arithmetic is identical to the batched form."""
    per_map = []
    for m in label_maps:
        if m.ndim != 2:
            raise ValueError(f"expected (H, W) maps, got {tuple(m.shape)}")
        area = m.shape[0] * m.shape[1]
        flat = m.reshape(-1)
        flat = flat[flat != VOID_LABEL]
        per_map.append((area, torch.bincount(flat, minlength=num_classes).tolist()))
    if not per_map:
        raise ValueError("no label maps given")
    alpha = []
    for c in range(num_classes):
        ratios = [area / counts[c] for area, counts in per_map if counts[c] > 0]
        alpha.append(sum(ratios) / len(ratios) if ratios else 0.0)
    return torch.tensor(alpha, dtype=torch.float64)


def _check_finite(name: str, value: torch.Tensor) -> None:
    if not torch.isfinite(value).all():
        raise NonFiniteLossError(name)


def _weighted_label_nll(logits: torch.Tensor, labels: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    """Per-image mean over labelled pixels of the class-weighted negative log
    probability of the ground-truth class, then mean over images."""
    logp = F.log_softmax(logits, dim=1).clamp_min(LOG_FLOOR)
    valid = labels != VOID_LABEL
    safe = torch.where(valid, labels, torch.zeros_like(labels))
    picked = logp.gather(1, safe.unsqueeze(1)).squeeze(1)
    weight = alpha.to(logits.dtype)[safe]
    terms = -(weight * picked) * valid
    per_image = []
    for b in range(labels.shape[0]):
        n = int(valid[b].sum())
        if n:
            per_image.append(terms[b].sum() / n)
    if not per_image:
        return logits.sum() * 0.0
    return torch.stack(per_image).mean()


def _fake_class_nll(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Per-image mean over labelled pixels of -log p(fake class)."""
    logp = F.log_softmax(logits, dim=1).clamp_min(LOG_FLOOR)
    fake_lp = logp[:, -1]
    valid = labels != VOID_LABEL
    per_image = []
    for b in range(labels.shape[0]):
        if bool(valid[b].any()):
            per_image.append(-fake_lp[b][valid[b]].mean())
    if not per_image:
        return logits.sum() * 0.0
    return torch.stack(per_image).mean()


def d_adversarial_loss(real_logits: torch.Tensor, labels: torch.Tensor,
                       fake_logits: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    """(N+1)-way discriminator cross-entropy: real pixels against their labels
    (weighted by alpha), generated pixels against the extra fake class."""
    _check_finite("real_logits", real_logits)
    _check_finite("fake_logits", fake_logits)
    if real_logits.shape[0] != labels.shape[0] or real_logits.shape[-2:] != labels.shape[-2:]:
        raise ValueError("logits and labels disagree on batch or spatial shape")
    return _weighted_label_nll(real_logits, labels, alpha) + _fake_class_nll(fake_logits, labels)


def g_adversarial_loss(fake_logits: torch.Tensor, labels: torch.Tensor,
                       alpha: torch.Tensor) -> torch.Tensor:
    """Generator side: generated pixels should be classified as their labels."""
    _check_finite("fake_logits", fake_logits)
    return _weighted_label_nll(fake_logits, labels, alpha)


def adaptive_perceptual_loss(real_taps, fake_taps) -> torch.Tensor:
    """Mean elementwise L1 between matching taps, averaged over layers.

    Real features are treated as constants, so the gradient flows only through
    the generated side.
    """
    if len(real_taps) != len(fake_taps):
        raise ValueError(f"tap count mismatch: {len(real_taps)} vs {len(fake_taps)}")
    if not real_taps:
        raise ValueError("no taps to compare")
    total = None
    for r, f in zip(real_taps, fake_taps):
        if r.shape != f.shape:
            raise ValueError(f"tap shape mismatch: {tuple(r.shape)} vs {tuple(f.shape)}")
        term = (r.detach() - f).abs().mean()
        total = term if total is None else total + term
    return total / len(real_taps)


def depth_l1_loss(pred: torch.Tensor, target: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """Mean absolute depth error over pixels with a real sensor reading.

    pred/target: (B, 1, H, W); valid: (B, H, W) bool. No valid pixels at all
    yields 0 with a warning.
    """
    if pred.shape != target.shape:
        raise ValueError(f"depth shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    mask = valid.unsqueeze(-3) if valid.ndim == pred.ndim - 1 else valid
    n = mask.sum()
    if n == 0:
        warnings.warn("depth loss saw no valid pixels; returning 0")
        return pred.sum() * 0.0
    return ((pred - target).abs() * mask).sum() / n


@dataclass
class MixMask:
    """Binary region mask whose boundaries follow the label map."""

    mask: torch.Tensor               # (H, W) bool
    class_assignment: dict[int, int]  # class id (255 = void) -> mask bit


def labelmix_mask(classes: torch.Tensor, rng: torch.Generator) -> MixMask:
    """Flip one fair coin per class present in the map (void gets its own) and
    paint each pixel with its class's coin."""
    if classes.ndim != 2:
        raise ValueError("labelmix_mask expects a single (H, W) map")
    present = sorted(int(c) for c in torch.unique(classes))
    bits = torch.randint(0, 2, (len(present),), generator=rng)
    assignment = {c: int(b) for c, b in zip(present, bits)}
    mask = torch.zeros_like(classes, dtype=torch.bool)
    for c, bit in assignment.items():
        if bit:
            mask |= classes == c
    return MixMask(mask=mask, class_assignment=assignment)


def labelmix(x: torch.Tensor, xhat: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Per-pixel selection: mask 1 keeps x, mask 0 takes xhat."""
    if x.shape != xhat.shape:
        raise ValueError(f"labelmix inputs disagree: {tuple(x.shape)} vs {tuple(xhat.shape)}")
    m = mask.to(x.dtype)
    if m.ndim == x.ndim - 1:
        m = m.unsqueeze(-3)  # broadcast over the channel axis
    return m * x + (1 - m) * xhat


def labelmix_consistency_loss(d_logits, x: torch.Tensor, xhat: torch.Tensor, mask: torch.Tensor,
                              logits_x: torch.Tensor | None = None,
                              logits_xhat: torch.Tensor | None = None) -> torch.Tensor:
    """Mean squared gap between logits-of-the-mix and mix-of-the-logits.

    d_logits maps an image batch to per-pixel logits; already-computed logits
    for x / xhat can be passed in to save the two extra forward passes.
    """
    mixed_logits = d_logits(labelmix(x, xhat, mask))
    if logits_x is None:
        logits_x = d_logits(x)
    if logits_xhat is None:
        logits_xhat = d_logits(xhat)
    return (mixed_logits - labelmix(logits_x, logits_xhat, mask)).pow(2).mean()


@dataclass
class LossParts:
    g_adv: torch.Tensor
    g_ap: torch.Tensor
    g_depth: torch.Tensor
    d_adv: torch.Tensor
    d_lm: torch.Tensor


@dataclass
class LossWeights:
    w_adv: float = 1.0
    w_ap: float = 1.0
    w_depth: float = 1.0
    w_lm: float = 1.0


def total_losses(parts: LossParts, weights: LossWeights | None = None):
    """Combine components into (generator total, discriminator total).

    Unit weights by default. Any non-finite component raises with its name.
    """
    w = weights or LossWeights()
    for name, value in vars(parts).items():
        if not torch.isfinite(torch.as_tensor(value)).all():
            raise NonFiniteLossError(name)
    l_g = w.w_adv * parts.g_adv + w.w_ap * parts.g_ap + w.w_depth * parts.g_depth
    l_d = w.w_adv * parts.d_adv + w.w_lm * parts.d_lm
    return l_g, l_d
