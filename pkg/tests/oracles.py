"""Brute-force spectral references: DFT by explicit matrices, masks by pixel loops."""

import numpy as np


def dft_matrix(n):
    k = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(k, k) / n)


def brute_dft2(img):
    """Matrix-product DFT, centred by explicit index rotation."""
    h, w = img.shape
    f = dft_matrix(h) @ img @ dft_matrix(w).T
    return np.roll(np.roll(f, h // 2, axis=0), w // 2, axis=1)


def brute_idft2(centred):
    h, w = centred.shape
    f = np.roll(np.roll(centred, -(h // 2), axis=0), -(w // 2), axis=1)
    return (dft_matrix(h).conj() @ f @ dft_matrix(w).conj().T / (h * w)).real


def brute_mask(h, w, ratio):
    bh, bw = max(1, int(ratio * h + 0.5)), max(1, int(ratio * w + 0.5))
    m = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            if h // 2 - bh // 2 <= y < h // 2 - bh // 2 + bh and w // 2 - bw // 2 <= x < w // 2 - bw // 2 + bw:
                m[y, x] = 1
    return m


def brute_augment(img, partner, lam, ratio, mode):
    fi, fp = brute_dft2(img), brute_dft2(partner)
    a, a2, phase = np.abs(fi), np.abs(fp), np.angle(fi)
    m = brute_mask(*img.shape, ratio)
    if mode == "convex-low-freq":
        amp = a * (1 - m) + ((1 - lam) * a + lam * a2) * m
    else:
        amp = (1 - lam) * a * (1 - m) + lam * a2 * m
    return np.clip(brute_idft2(amp * np.exp(1j * phase)), 0, 1)


def brute_mix(a, a2, lam, ratio, mode):
    m = brute_mask(*a.shape, ratio)
    out = np.empty_like(a)
    for y in range(a.shape[0]):
        for x in range(a.shape[1]):
            if mode == "convex-low-freq":
                out[y, x] = (1 - lam) * a[y, x] + lam * a2[y, x] if m[y, x] else a[y, x]
            else:
                out[y, x] = lam * a2[y, x] if m[y, x] else (1 - lam) * a[y, x]
    return out
