"""Reconstruction and segmentation losses.

Tensors are batched and channel-first: images ``N x C x H x W``, class
probabilities and one-hot labels ``N x K x H x W``.
"""
from dataclasses import dataclass, replace

import torch

from .errors import ValidationError
from .spectral import FrequencyMask, amplitude_phase

PROB_EPS = 1e-7
DICE_SMOOTH = 1e-5


@dataclass(frozen=True)
class FsdWeights:
    lambda1: float = 5e-3  # pixel MSE
    lambda2: float = 5e-5  # high-frequency amplitude MSE
    lambda3: float = 5e-6  # low-frequency amplitude MSE
    decay_rate: float = 0.99

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3, self.decay_rate) <= 0:
            raise ValidationError("FSD weights and decay rate must be positive")

    def as_dict(self):
        return {"lambda1": self.lambda1, "lambda2": self.lambda2, "lambda3": self.lambda3}


def decay_weights(base: FsdWeights, epoch: int) -> FsdWeights:
    if epoch < 0:
        raise ValidationError(f"epoch must be non-negative, got {epoch}")
    factor = base.decay_rate ** epoch
    return replace(
        base,
        lambda1=base.lambda1 * factor,
        lambda2=base.lambda2 * factor,
        lambda3=base.lambda3 * factor,
    )


def _mse(a, b):
    return ((a - b) ** 2).mean()


def _mask_tensor(mask, like):
    if isinstance(mask, FrequencyMask):
        mask = mask.mask
    mask = torch.as_tensor(mask, dtype=like.dtype, device=like.device)
    if mask.shape != like.shape[-2:]:
        raise ValidationError(f"mask shape {tuple(mask.shape)} does not match image {tuple(like.shape[-2:])}")
    return mask


def fsd_loss(x, x_hat, weights: FsdWeights, mask) -> torch.Tensor:
    """Phase MSE plus decayed pixel, high-band and low-band amplitude MSEs.

    Phase differences are taken on principal values without wrapping, so a
    coefficient sitting on the -pi/pi cut can contribute a spurious (2 pi)^2.
    """
    if x.shape != x_hat.shape:
        raise ValidationError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    m = _mask_tensor(mask, x_hat)
    amp, pha = amplitude_phase(x)
    amp_hat, pha_hat = amplitude_phase(x_hat)
    loss = _mse(pha, pha_hat)
    loss = loss + weights.lambda1 * _mse(x, x_hat)
    loss = loss + weights.lambda2 * _mse((1 - m) * amp, (1 - m) * amp_hat)
    loss = loss + weights.lambda3 * _mse(m * amp, m * amp_hat)
    return loss


def _check_pair(pred, label):
    if pred.shape != label.shape:
        raise ValidationError(f"prediction {tuple(pred.shape)} and label {tuple(label.shape)} differ")
    if pred.dim() != 4:
        raise ValidationError("expected N x K x H x W tensors")


def _weight_map(u, pred):
    if u is None:
        return torch.ones_like(pred)
    u = torch.as_tensor(getattr(u, "u", u), dtype=pred.dtype, device=pred.device)
    if not torch.all(torch.isfinite(u)) or torch.any(u < 0):
        raise ValidationError("uncertainty weights must be finite and non-negative")
    if u.dim() == 3:
        u = u.unsqueeze(1)
    if u.dim() == 2:
        u = u[None, None]
    try:
        return u.expand_as(pred)
    except RuntimeError as err:
        raise ValidationError(f"uncertainty map {tuple(u.shape)} does not broadcast to {tuple(pred.shape)}") from err


def uiu_loss(pred, label, u=None) -> torch.Tensor:
    """Uncertainty-weighted binary cross-entropy, averaged over pixels and classes.

    ``u`` may be an :class:`~morestyle.uncertainty.UncertaintyMap`, a tensor
    broadcastable to ``pred`` (``N x H x W`` is shared across classes), or
    ``None`` for unit weights.
    """
    _check_pair(pred, label)
    w = _weight_map(u, pred)
    p = pred.clamp(PROB_EPS, 1 - PROB_EPS)
    ce = label * torch.log(p) + (1 - label) * torch.log(1 - p)
    # per image and class: -(1/HW) sum_j u_j ce_j; then mean over classes and batch
    return -(w * ce).mean(dim=(-2, -1)).mean()


def dice_loss(pred, label) -> torch.Tensor:
    _check_pair(pred, label)
    inter = (pred * label).sum(dim=(-2, -1))
    denom = pred.sum(dim=(-2, -1)) + label.sum(dim=(-2, -1))
    dice = (2 * inter + DICE_SMOOTH) / (denom + DICE_SMOOTH)
    return (1 - dice).mean()


def seg_loss(pred, label, u=None) -> torch.Tensor:
    return uiu_loss(pred, label, u) + dice_loss(pred, label)
