"""Style dispersion: how far apart the low-frequency amplitudes of augmented variants land.

For every source image we draw ``n_variants`` augmentations, describe each by
its masked low-frequency amplitude (normalized by the pixel count) and average
the pairwise Euclidean distances. The per-image means are then averaged over
images. Identity augmentation scores exactly 0.
"""
from dataclasses import dataclass

import numpy as np
import torch

from . import spectral
from .errors import ValidationError
from .models import generate_styled

AUGMENTERS = ("identity", "fda", "fact", "asa", "asa_fsd", "morestyle")


@dataclass
class DispersionRow:
    method: str
    n_images: int
    n_variants: int
    dispersion: float
    std: float

    def as_dict(self):
        return {"method": self.method, "n_images": self.n_images, "n_variants": self.n_variants,
                "dispersion": self.dispersion, "std": self.std}


def style_descriptor(image, ratio=spectral.DEFAULT_MASK_RATIO):
    image = np.asarray(image, dtype=np.float64)
    return spectral.low_freq_amplitude(image, ratio) / (image.shape[0] * image.shape[1])


def mean_pairwise_distance(vectors):
    v = np.asarray(vectors, dtype=np.float64)
    if len(v) < 2:
        raise ValidationError("need at least two variants for a pairwise distance")
    d = np.sqrt(((v[:, None, :] - v[None, :, :]) ** 2).sum(-1))
    iu = np.triu_indices(len(v), k=1)
    return float(d[iu].mean())


def dispersion(variants_per_image, ratio=spectral.DEFAULT_MASK_RATIO):
    """Mean and std over images of the within-image mean pairwise descriptor distance."""
    per_image = [mean_pairwise_distance([style_descriptor(v, ratio) for v in variants])
                 for variants in variants_per_image]
    return float(np.mean(per_image)), float(np.std(per_image))


def spectral_variants(image, pool, method, n, ratio, rng):
    """FDA or FACT variants of one H x W x C image against random pool partners."""
    out = []
    for _ in range(n):
        partner = pool[rng.integers(len(pool))]
        if method == "fda":
            aug = spectral.fda_swap(image, partner, ratio)
        else:
            aug = spectral.fact_mixup(image, partner, ratio, float(rng.uniform()))
        out.append(np.clip(aug, 0.0, 1.0))
    return out


@torch.no_grad()
def styled_variants(nets, image, n, generator):
    """``n`` styled reconstructions of one image, one noise draw and mix pattern each."""
    nets.decoder.eval()
    nets.noise_enc.eval()
    x = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)))[None].float()
    out = []
    for _ in range(n):
        noise = torch.randn(1, nets.noise_enc.noise_dim, generator=generator)
        x_hat = generate_styled(nets.decoder, nets.noise_enc, x, noise, generator=generator)
        out.append(x_hat[0].permute(1, 2, 0).double().numpy())
    return out


def measure(method, images, pool=None, nets=None, n_variants=16, aug_ratio=0.1,
            mask_ratio=spectral.DEFAULT_MASK_RATIO, seed=0) -> DispersionRow:
    """Dispersion of one augmentation method over ``images`` (H x W x C arrays)."""
    if method not in AUGMENTERS:
        raise ValidationError(f"unknown augmenter {method!r}; choose from {AUGMENTERS}")
    if not len(images):
        raise ValidationError("no images to augment")
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    variants = []
    for image in images:
        image = np.asarray(image, dtype=np.float64)
        if method == "identity":
            variants.append([image] * n_variants)
        elif method in ("fda", "fact"):
            if pool is None or not len(pool):
                raise ValidationError(f"{method} needs a partner pool")
            variants.append(spectral_variants(image, pool, method, n_variants, aug_ratio, rng))
        else:
            if nets is None or nets.decoder is None:
                raise ValidationError(f"{method} needs a trained reconstruction decoder")
            variants.append(styled_variants(nets, image, n_variants, gen))
    mean, std = dispersion(variants, mask_ratio)
    return DispersionRow(method, len(images), n_variants, mean, std)
