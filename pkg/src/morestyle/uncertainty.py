"""MC-dropout uncertainty and the more/less-attention reweighting."""
import math
import warnings
from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ValidationError

ENTROPY_EPS = 1e-12


@dataclass
class UncertaintyMap:
    u: torch.Tensor  # N x H x W
    passes: int = 0
    noise_std: float = 0.0


@dataclass
class AttentionRegions:
    more: torch.Tensor  # N x K x H x W, bool
    less: torch.Tensor


def _dropout_modules(model):
    return [m for m in model.modules() if isinstance(m, nn.modules.dropout._DropoutNd)]


@torch.no_grad()
def mc_uncertainty(model, image, T=8, noise_std=0.05, generator=None) -> UncertaintyMap:
    """Predictive entropy of the mean of ``T`` noisy, dropout-active passes.

    Only dropout layers are switched to training mode, so normalization
    statistics and weights are left untouched. Input noise is drawn from
    ``generator``; dropout masks come from the global torch RNG.
    """
    if T < 2:
        raise ValidationError(f"T must be at least 2, got {T}")
    if noise_std < 0:
        raise ValidationError("noise_std must be non-negative")
    drops = _dropout_modules(model)
    if not drops and noise_std == 0:
        warnings.warn("model has no dropout and noise_std is 0; uncertainty is deterministic entropy")

    was_training = model.training
    model.eval()
    for m in drops:
        m.train()
    try:
        n = image.shape[0]
        batch = image.repeat(T, 1, 1, 1)
        if noise_std > 0:
            noise = torch.randn(batch.shape, generator=generator, dtype=batch.dtype)
            batch = batch + noise_std * noise.to(batch.device)
        probs = model(batch)
        mean = probs.view(T, n, *probs.shape[1:]).mean(dim=0)
    finally:
        model.train(was_training)
    u = -(mean * torch.log(mean.clamp_min(ENTROPY_EPS))).sum(dim=1)
    u = u.clamp(0.0, math.log(mean.shape[1]))
    return UncertaintyMap(u, T, noise_std)


def normalize_mean(umap: UncertaintyMap) -> UncertaintyMap:
    """Rescale each image's map to mean 1; a flat-zero map becomes all ones."""
    u = umap.u
    mean = u.mean(dim=(-2, -1), keepdim=True)
    flat = mean <= 1e-12
    scaled = torch.where(flat, torch.ones_like(u), u / torch.where(flat, torch.ones_like(mean), mean))
    return UncertaintyMap(scaled, umap.passes, umap.noise_std)


def attention_regions(pred, pred_aug, label) -> AttentionRegions:
    """Per-class hard-mask set algebra.

    more = P & y & ~P_aug: right on the original, lost under the style shift.
    less = P & P_aug & ~y: wrong on both images.
    """
    if not (pred.shape == pred_aug.shape == label.shape):
        raise ValidationError("pred, pred_aug and label must share a shape")
    p, pa, y = pred.bool(), pred_aug.bool(), label.bool()
    return AttentionRegions(more=p & y & ~pa, less=p & pa & ~y)


def reweight(umap, regions: AttentionRegions, rho=1.2, sigma=0.8) -> UncertaintyMap:
    if not (rho >= 1.0 >= sigma > 0):
        raise ValidationError(f"need rho >= 1 >= sigma > 0, got rho={rho}, sigma={sigma}")
    u = umap.u if isinstance(umap, UncertaintyMap) else umap
    more, less = regions.more, regions.less
    if more.dim() == u.dim() + 1:
        more, less = more.any(dim=1), less.any(dim=1)
    if torch.any(more & less):
        raise ValidationError("more- and less-attention regions overlap")
    factor = torch.ones_like(u)
    factor = torch.where(more, torch.full_like(u, rho), factor)
    factor = torch.where(less, torch.full_like(u, sigma), factor)
    out = u * factor
    if isinstance(umap, UncertaintyMap):
        return UncertaintyMap(out, umap.passes, umap.noise_std)
    return UncertaintyMap(out)
