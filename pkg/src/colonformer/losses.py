"""Boundary-weighted compound loss with deep supervision.

All functions take probabilities ``p`` and binary targets ``g`` shaped
``(batch, 1, H, W)``. Per-image losses are reduced with a batch mean.
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F

EPS = 1e-6


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.25
    gamma: float = 2.0
    lam: float = 5.0
    neighborhood: int = 31
    include_center: bool = True

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.gamma < 0 or self.lam < 0:
            raise ValueError("gamma and lam must be non-negative")
        if self.neighborhood < 1 or self.neighborhood % 2 == 0:
            raise ValueError(f"neighborhood must be a positive odd int, got {self.neighborhood}")


def _box_sum(x, k):
    # Exact windowed sums via an integral image; windows are clipped at borders.
    r = k // 2
    h, w = x.shape[-2:]
    c = F.pad(x, (1, 0, 1, 0)).cumsum(-2).cumsum(-1)
    i = torch.arange(h, device=x.device)
    j = torch.arange(w, device=x.device)
    i0, i1 = (i - r).clamp(min=0), (i + r + 1).clamp(max=h)
    j0, j1 = (j - r).clamp(min=0), (j + r + 1).clamp(max=w)
    s = (
        c[..., i1[:, None], j1[None, :]]
        - c[..., i0[:, None], j1[None, :]]
        - c[..., i1[:, None], j0[None, :]]
        + c[..., i0[:, None], j0[None, :]]
    )
    count = (i1 - i0)[:, None] * (j1 - j0)[None, :]
    return s, count.to(x.dtype)


def boundary_weights(g, cfg=LossConfig()):
    """Per-pixel importance ``|mean(window) - g|`` over a clipped square window.

    With ``cfg.include_center=False`` the center pixel is dropped from both
    the window sum and its count.
    """
    g64 = g.detach().to(torch.float64)
    s, count = _box_sum(g64, cfg.neighborhood)
    if not cfg.include_center:
        s = s - g64
        count = count - 1
        count = torch.where(count > 0, count, torch.ones_like(count))
    return (s / count - g64).abs().to(g.dtype)


def _check(p, g):
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: prediction {tuple(p.shape)} vs target {tuple(g.shape)}")
    if torch.isnan(p).any() or torch.isnan(g).any():
        raise ValueError("NaN in loss inputs")


def weighted_focal(p, g, beta, cfg=LossConfig()):
    _check(p, g)
    p = p.clamp(EPS, 1 - EPS)
    q = torch.where(g > 0.5, p, 1 - p)
    w = 1 + cfg.lam * beta
    per_pixel = w * cfg.alpha * (1 - q).pow(cfg.gamma) * torch.log(q)
    loss = -per_pixel.sum(dim=(-2, -1)) / w.sum(dim=(-2, -1))
    return loss.mean()


def weighted_iou(p, g, beta, cfg=LossConfig()):
    """``1 - weighted intersection / weighted union``; an empty union scores 0."""
    _check(p, g)
    w = 1 + cfg.lam * beta
    inter = (g * p * w).sum(dim=(-2, -1))
    union = ((g + p - g * p) * w).sum(dim=(-2, -1))
    empty = union == 0
    ratio = torch.where(empty, torch.ones_like(inter), inter / torch.where(empty, torch.ones_like(union), union))
    return (1 - ratio).mean()


def total_loss(p, g, cfg=LossConfig(), beta=None):
    if beta is None:
        beta = boundary_weights(g, cfg)
    return (weighted_focal(p, g, beta, cfg) + weighted_iou(p, g, beta, cfg)) / 2


def upsample_logits(maps, size):
    """Bilinearly resize every logit map to ``size`` (H, W)."""
    return [m if tuple(m.shape[-2:]) == tuple(size) else
            F.interpolate(m, size=size, mode="bilinear", align_corners=False) for m in maps]


def deep_supervised_loss(preds, g, cfg=LossConfig()):
    """Sum of ``total_loss`` over every supervised logit map, each taken at the target's size."""
    preds = list(preds)
    if not preds:
        raise ValueError("empty prediction set")
    beta = boundary_weights(g, cfg)
    return sum(total_loss(torch.sigmoid(m), g, cfg, beta) for m in upsample_logits(preds, g.shape[-2:]))
