"""Confidence-aware cross pseudo supervision and dice supervision.

For each of the two parallel networks of a model we predict on the original
batch (``P_O``) and on its Fourier-augmented copy (``P_F``), average them
(``P_E``) and measure their per-pixel disagreement

    V = sum_c P_F[c] * log(P_F[c] / P_O[c])

The hard pseudo label ``Y = onehot(argmax P_E)`` of one network supervises
the averaged map of the other through a cross-entropy weighted by
``exp(-V)``; ``V`` itself is added as a penalty.  Expectations are plain
means over batch and pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gridmath as gm
from . import segnet
from .errors import CacpsError

FOREGROUND = (1, 2, 3)
DICE_SMOOTH = 1.0


@dataclass
class PseudoBundle:
    """One network's predictions for a batch."""

    P_O: gm.Tensor
    P_F: gm.Tensor
    P_E: gm.Tensor
    V: gm.Tensor
    Y: np.ndarray


@dataclass
class LossReport:
    L_s: float
    L_cacps: float
    L_total: float
    dice_terms: tuple[float, ...]
    mean_V: float


def confidence_variance(p_f: gm.Tensor, p_o: gm.Tensor) -> gm.Tensor:
    """Per-pixel KL(P_F || P_O) over the channel axis, logs floored at EPS."""
    if p_f.shape != p_o.shape:
        raise CacpsError("shape", f"P_F {p_f.shape} vs P_O {p_o.shape}")
    return gm.reduce(p_f * (gm.log(p_f) - gm.log(p_o)), "sum", axes=1)


def one_hot_argmax(p: gm.Tensor | np.ndarray) -> np.ndarray:
    """Hard label per pixel; ties go to the lowest class index."""
    data = p.data if isinstance(p, gm.Tensor) else np.asarray(p)
    idx = np.argmax(data, axis=1)
    return (np.arange(data.shape[1]).reshape(1, -1, *([1] * (data.ndim - 2))) == idx[:, None]).astype(np.float64)


def bundle_from_probs(p_o: gm.Tensor, p_f: gm.Tensor) -> PseudoBundle:
    if p_o.shape != p_f.shape:
        raise CacpsError("shape", f"P_O {p_o.shape} vs P_F {p_f.shape}")
    p_e = (p_o + p_f) * 0.5
    return PseudoBundle(p_o, p_f, p_e, confidence_variance(p_f, p_o), one_hot_argmax(p_e))


def build_bundle(params: segnet.SegNetParams, images, augmented) -> PseudoBundle:
    """Run one network on the original and augmented batch in a single pass."""
    images = images.data if isinstance(images, gm.Tensor) else np.asarray(images, dtype=np.float64)
    augmented = augmented.data if isinstance(augmented, gm.Tensor) else np.asarray(augmented, dtype=np.float64)
    if images.shape != augmented.shape:
        raise CacpsError("shape", f"original {images.shape} vs augmented {augmented.shape}")
    n = images.shape[0]
    probs = segnet.predict_probs(params, np.concatenate([images, augmented], axis=0))
    return bundle_from_probs(gm.take(probs, np.arange(n)), gm.take(probs, np.arange(n, 2 * n)))


def cross_entropy(p: gm.Tensor, y: np.ndarray) -> gm.Tensor:
    """Per-pixel ``-sum_c y[c] log p[c]``."""
    if p.shape != y.shape:
        raise CacpsError("shape", f"prediction {p.shape} vs target {y.shape}")
    return -gm.reduce(gm.log(p) * y, "sum", axes=1)


def confidence_weighted_term(
    teacher: PseudoBundle, student: PseudoBundle, grad_through_variance: bool = False
) -> gm.Tensor:
    """``mean(exp(-V_t) * CE(P_E_s, Y_t) + V_t)``: teacher's label supervising the student."""
    if teacher.P_E.shape != student.P_E.shape:
        raise CacpsError("shape", f"bundles differ: {teacher.P_E.shape} vs {student.P_E.shape}")
    v = teacher.V if grad_through_variance else gm.stop_gradient(teacher.V)
    ce = cross_entropy(student.P_E, teacher.Y)
    return gm.reduce(gm.exp(-v) * ce + v, "mean")


def cacps_terms(a: PseudoBundle, b: PseudoBundle, grad_through_variance: bool = False):
    """``(L_a, L_b)``: network A's label supervising B, and the reverse."""
    return (
        confidence_weighted_term(a, b, grad_through_variance),
        confidence_weighted_term(b, a, grad_through_variance),
    )


def cacps_pair_loss(a: PseudoBundle, b: PseudoBundle, grad_through_variance: bool = False) -> gm.Tensor:
    l_a, l_b = cacps_terms(a, b, grad_through_variance)
    return l_a + l_b


def labels_to_onehot(mask: np.ndarray, num_classes: int = segnet.NUM_CLASSES) -> np.ndarray:
    """``(N, H, W)`` integer mask -> ``(N, C, H, W)`` one-hot."""
    mask = np.asarray(mask)
    if mask.min(initial=0) < 0 or mask.max(initial=0) >= num_classes:
        raise CacpsError("label", f"labels must lie in [0, {num_classes})")
    return (np.arange(num_classes).reshape(1, -1, 1, 1) == mask[:, None]).astype(np.float64)


def _check_onehot(g: np.ndarray) -> None:
    if not np.all((g == 0) | (g == 1)) or not np.all(g.sum(axis=1) == 1):
        raise CacpsError("label", "ground truth is not one-hot over the channel axis")


def dice_terms(p: gm.Tensor, g: np.ndarray) -> gm.Tensor:
    """Smoothed per-class dice loss ``(C,)``, sums taken over batch and pixels."""
    g = np.asarray(g, dtype=np.float64)
    if p.shape != g.shape:
        raise CacpsError("shape", f"prediction {p.shape} vs ground truth {g.shape}")
    _check_onehot(g)
    axes = (0,) + tuple(range(2, p.ndim))
    inter = gm.reduce(p * g, "sum", axes)
    denom = gm.reduce(p, "sum", axes) + g.sum(axis=axes)
    return 1.0 - (inter * 2.0 + DICE_SMOOTH) / (denom + DICE_SMOOTH)


def dice_loss(p: gm.Tensor, g: np.ndarray) -> gm.Tensor:
    """Mean smoothed dice loss over the foreground classes."""
    terms = dice_terms(p, g)
    weights = np.zeros(p.shape[1])
    weights[list(FOREGROUND)] = 1.0 / len(FOREGROUND)
    return gm.reduce(terms * weights, "sum")


def total_loss(l_s, l_cacps, beta: float) -> gm.Tensor:
    return gm.add(l_s, gm.mul(l_cacps, float(beta)))
