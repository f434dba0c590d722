"""Fourier amplitude-mix augmentation.

An image is split into a centred amplitude spectrum and a phase image.
The low-frequency block of the amplitude is blended with that of a partner
image, and the result is recombined with the *original* phase, which keeps
the anatomy in place while borrowing the partner's intensity statistics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CacpsError

MODES = ("convex-low-freq", "paper-literal")


@dataclass(frozen=True)
class Spectrum:
    amplitude: np.ndarray
    phase: np.ndarray


@dataclass(frozen=True)
class MixConfig:
    """Blend weight ``lam`` and the side ratio of the centred amplitude mask.

    ``convex-low-freq`` keeps the source amplitude outside the mask and blends
    inside it.  ``paper-literal`` evaluates
    ``(1 - lam) * S * (1 - M) + lam * S' * M`` as written, which also scales
    the unmasked band and empties the mask at ``lam == 0``.
    """

    lam: float = 0.0
    mask_ratio: float = 0.1
    mode: str = "convex-low-freq"

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise CacpsError("config", f"lambda must lie in [0, 1], got {self.lam}")
        if not 0.0 < self.mask_ratio <= 0.5:
            raise CacpsError("config", f"mask_ratio must lie in (0, 0.5], got {self.mask_ratio}")
        if self.mode not in MODES:
            raise CacpsError("config", f"mix mode must be one of {MODES}, got {self.mode!r}")


def dft2(image: np.ndarray) -> Spectrum:
    """Centred 2-D DFT split into modulus and argument (phase in (-pi, pi])."""
    f = np.fft.fftshift(np.fft.fft2(np.asarray(image, dtype=np.float64)))
    phase = np.angle(f)
    phase[phase <= -np.pi] = np.pi
    return Spectrum(np.abs(f), phase)


def idft2(spectrum: Spectrum, clip: bool = True) -> np.ndarray:
    """Real part of the inverse transform, clipped to [0, 1] unless ``clip`` is false."""
    f = spectrum.amplitude * np.exp(1j * spectrum.phase)
    img = np.fft.ifft2(np.fft.ifftshift(f)).real
    return np.clip(img, 0.0, 1.0) if clip else img


def low_freq_mask(h: int, w: int, mask_ratio: float) -> np.ndarray:
    """Binary mask of the centred rectangle ``round(ratio*h) x round(ratio*w)``.

    The rectangle always contains the DC bin, which sits at ``(h//2, w//2)``
    after centring.
    """
    if h < 2 or w < 2:
        raise CacpsError("shape", f"mask needs h, w >= 2, got {h}x{w}")
    if not 0.0 < mask_ratio <= 0.5:
        raise CacpsError("config", f"mask_ratio must lie in (0, 0.5], got {mask_ratio}")
    bh = max(1, int(np.floor(mask_ratio * h + 0.5)))
    bw = max(1, int(np.floor(mask_ratio * w + 0.5)))
    top = h // 2 - bh // 2
    left = w // 2 - bw // 2
    mask = np.zeros((h, w))
    mask[top : top + bh, left : left + bw] = 1.0
    return mask


def mix_amplitude(s: np.ndarray, s_prime: np.ndarray, cfg: MixConfig) -> np.ndarray:
    if s.shape != s_prime.shape or s.ndim != 2:
        raise CacpsError("shape", f"amplitude shapes {s.shape} and {s_prime.shape} differ")
    m = low_freq_mask(*s.shape, cfg.mask_ratio)
    lam = cfg.lam
    if cfg.mode == "convex-low-freq":
        return s * (1 - m) + ((1 - lam) * s + lam * s_prime) * m
    return (1 - lam) * s * (1 - m) + lam * s_prime * m


def fourier_augment(image: np.ndarray, partner: np.ndarray, cfg: MixConfig, clip: bool = True) -> np.ndarray:
    """Image with the partner's low-frequency amplitude mixed in, original phase kept."""
    image = np.asarray(image, dtype=np.float64)
    partner = np.asarray(partner, dtype=np.float64)
    if image.shape != partner.shape:
        raise CacpsError("shape", f"image {image.shape} and partner {partner.shape} differ")
    src = dft2(image)
    amp = mix_amplitude(src.amplitude, dft2(partner).amplitude, cfg)
    return idft2(Spectrum(amp, src.phase), clip=clip)


def augment_batch(
    images: np.ndarray,
    partners: np.ndarray,
    lams,
    mask_ratio: float = 0.1,
    mode: str = "convex-low-freq",
) -> np.ndarray:
    """Apply :func:`fourier_augment` per sample of an ``(N, H, W)`` stack."""
    out = np.empty_like(images, dtype=np.float64)
    for i, lam in enumerate(lams):
        out[i] = fourier_augment(images[i], partners[i], MixConfig(float(lam), mask_ratio, mode))
    return out
