"""Fourier-domain primitives on H x W x C images.

All spectra are kept in the centered layout: the zero-frequency coefficient
sits at index ``(H // 2, W // 2)`` after ``fftshift``. Masks are defined in
that same layout.
"""
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ValidationError

DEFAULT_MASK_RATIO = 0.1


@dataclass(frozen=True)
class SpectralImage:
    amplitude: np.ndarray
    phase: np.ndarray

    @property
    def shape(self):
        return self.amplitude.shape


@dataclass(frozen=True)
class FrequencyMask:
    mask: np.ndarray
    ratio: float

    @property
    def shape(self):
        return self.mask.shape

    def as_tensor(self, dtype=torch.float32):
        return torch.as_tensor(self.mask, dtype=dtype)


def validate_image(image):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ValidationError(f"expected an H x W x C array, got shape {image.shape}")
    h, w, c = image.shape
    if h < 2 or w < 2 or c < 1:
        raise ValidationError(f"image must be at least 2 x 2 x 1, got {image.shape}")
    if not np.all(np.isfinite(image)):
        raise ValidationError("image contains non-finite values")
    return image


def _principal(phase):
    # map -pi onto +pi so phases live in (-pi, pi]
    return np.where(phase <= -np.pi, phase + 2 * np.pi, phase)


def fft2(image) -> SpectralImage:
    """Channel-wise centered 2-D DFT, split into amplitude and phase."""
    image = validate_image(image)
    coeffs = np.fft.fftshift(np.fft.fft2(image, axes=(0, 1)), axes=(0, 1))
    return SpectralImage(np.abs(coeffs), _principal(np.angle(coeffs)))


def compose(amplitude, phase):
    return amplitude * np.exp(1j * phase)


def ifft2(spectral: SpectralImage, check_real=False, imag_tol=1e-5) -> np.ndarray:
    """Inverse of :func:`fft2`. Returns the real part of the reconstruction.

    With ``check_real`` the imaginary residue is required to stay below
    ``imag_tol``; that only holds for Hermitian-symmetric spectra such as
    unmodified ``fft2`` output.
    """
    amplitude = np.asarray(spectral.amplitude, dtype=np.float64)
    phase = np.asarray(spectral.phase, dtype=np.float64)
    if amplitude.shape != phase.shape or amplitude.ndim != 3:
        raise ValidationError("amplitude and phase must share an H x W x C shape")
    if not (np.all(np.isfinite(amplitude)) and np.all(np.isfinite(phase))):
        raise ValidationError("spectrum contains non-finite values")
    if np.any(amplitude < 0):
        raise ValidationError("amplitude must be non-negative")
    coeffs = np.fft.ifftshift(compose(amplitude, phase), axes=(0, 1))
    out = np.fft.ifft2(coeffs, axes=(0, 1))
    if check_real:
        residue = float(np.max(np.abs(out.imag)))
        if residue >= imag_tol:
            raise ValidationError(f"imaginary residue {residue:.3g} exceeds {imag_tol}")
    return out.real


def _centered_span(n, side):
    if side == 0:
        return 0, 0
    # odd n: the block must have odd side to stay symmetric about DC
    if n % 2 == 1 and side % 2 == 0:
        side = min(side + 1, n)
    start = n // 2 - side // 2
    return start, start + side


def make_low_freq_mask(h, w, ratio=DEFAULT_MASK_RATIO) -> FrequencyMask:
    """Centered square of ones with side ``floor(ratio * min(h, w))``.

    For odd sizes an even side is rounded up by one so the block stays
    centered on the zero-frequency coefficient. The block always contains
    index ``n // 2``.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValidationError(f"ratio must lie in [0, 1], got {ratio}")
    if h < 1 or w < 1:
        raise ValidationError("mask dimensions must be positive")
    side = int(np.floor(ratio * min(h, w)))
    mask = np.zeros((h, w), dtype=np.float64)
    r0, r1 = _centered_span(h, side)
    c0, c1 = _centered_span(w, side)
    if ratio == 1.0:
        r0, r1, c0, c1 = 0, h, 0, w
    mask[r0:r1, c0:c1] = 1.0
    return FrequencyMask(mask, float(ratio))


def _mask_array(mask, shape):
    m = mask.mask if isinstance(mask, FrequencyMask) else np.asarray(mask)
    if m.shape != tuple(shape[:2]):
        raise ValidationError(f"mask shape {m.shape} does not match spectrum {tuple(shape[:2])}")
    return m[..., None] if len(shape) == 3 else m


def split_amplitude(amplitude, mask):
    amplitude = np.asarray(amplitude, dtype=np.float64)
    m = _mask_array(mask, amplitude.shape)
    low = m * amplitude
    high = (1.0 - m) * amplitude
    return low, high


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch: {a.shape} vs {b.shape}")


def fda_swap(source, target, ratio=DEFAULT_MASK_RATIO):
    """Replace the source's low-frequency amplitude with the target's."""
    return fact_mixup(source, target, ratio, 1.0)


def fact_mixup(source, target, ratio=DEFAULT_MASK_RATIO, mix=0.5):
    """Interpolate low-frequency amplitudes; phase and high band stay with the source."""
    if not 0.0 <= mix <= 1.0:
        raise ValidationError(f"mix must lie in [0, 1], got {mix}")
    source = validate_image(source)
    target = validate_image(target)
    _same_shape(source, target)
    s, t = fft2(source), fft2(target)
    m = _mask_array(make_low_freq_mask(*source.shape[:2], ratio), source.shape)
    low = (1.0 - mix) * s.amplitude + mix * t.amplitude
    amplitude = m * low + (1.0 - m) * s.amplitude
    return ifft2(SpectralImage(amplitude, s.phase))


def low_freq_amplitude(image, ratio=DEFAULT_MASK_RATIO):
    """Flattened masked amplitude, the style descriptor used for dispersion."""
    image = validate_image(image)
    mask = make_low_freq_mask(*image.shape[:2], ratio).mask.astype(bool)
    return fft2(image).amplitude[mask].ravel()


# --- batched torch counterparts (N x C x H x W), differentiable ---------------

def amplitude_phase(x: torch.Tensor):
    coeffs = torch.fft.fftshift(torch.fft.fft2(x), dim=(-2, -1))
    phase = torch.angle(coeffs)
    phase = torch.where(phase <= -torch.pi, phase + 2 * torch.pi, phase)
    return coeffs.abs(), phase
