"""Objective terms and their composites.

Conventions: L2-type terms (perceptual, total variation) use the non-squared
Euclidean norm per image; L1-type terms (reconstruction, cycle) are per-element
means so their magnitude is resolution independent; log arguments are clamped
to [eps, 1 - eps] to stay finite.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from . import tensor as T
from .tensor import Tensor

LOG_EPS = 1e-7


@dataclass
class LossWeights:
    alpha: float = 1.0  # adversarial weight in the degradation objective
    beta: float = 0.5  # perceptual weight in the degradation objective
    eta: float = 1.0  # cycle weight in the reconstruction objective
    gamma: float = 0.01  # total-variation weight in the reconstruction objective


# Order also defines the training-log column order.
TERM_FIELDS = ("l_adv", "l_per", "l_cyc", "l_1", "l_tv")
COMPOSITE_FIELDS = ("l_deg", "l_rec", "l_total")
ALL_FIELDS = TERM_FIELDS + COMPOSITE_FIELDS


@dataclass
class LossBreakdown:
    """Named scalar loss values for one iteration; None marks a term that the
    active ablation mode removes entirely."""

    l_adv: Optional[float] = None
    l_per: Optional[float] = None
    l_cyc: Optional[float] = None
    l_1: Optional[float] = None
    l_tv: Optional[float] = None
    l_deg: Optional[float] = None
    l_rec: Optional[float] = None
    l_total: Optional[float] = None

    def present(self):
        return [f for f in ALL_FIELDS if getattr(self, f) is not None]

    def compose(self, w: LossWeights) -> "LossBreakdown":
        """Fill composite fields from whichever terms are present; an absent
        term contributes 0 and an all-absent composite stays absent."""
        def val(name):
            v = getattr(self, name)
            return 0.0 if v is None else v

        if any(getattr(self, f) is not None for f in ("l_adv", "l_per", "l_cyc")):
            self.l_deg = val("l_cyc") + w.alpha * val("l_adv") + w.beta * val("l_per")
        if any(getattr(self, f) is not None for f in ("l_1", "l_cyc", "l_tv")):
            self.l_rec = val("l_1") + w.eta * val("l_cyc") + w.gamma * val("l_tv")
        self.l_total = (self.l_deg or 0.0) + (self.l_rec or 0.0)
        return self


def _scalar(x) -> float:
    return float(x.data) if isinstance(x, Tensor) else float(x)


def _per_image_l2(diff: Tensor) -> Tensor:
    """Euclidean norm over each image's elements -> (N,1,1,1)."""
    return T.sqrt(T.sum_(T.square(diff), axis=(1, 2, 3), keepdims=True))


def adversarial_loss(disc, fake_batch: Tensor) -> Tensor:
    """Generator-side GAN loss: mean of -log D(fake)."""
    p = disc(fake_batch) if callable(disc) else disc
    p = T.clamp(p, LOG_EPS, 1.0 - LOG_EPS)
    return T.mean(-T.log(p))


def discriminator_loss(disc, real_batch: Tensor, fake_batch: Tensor) -> Tensor:
    """Binary cross-entropy for the discriminator itself."""
    pr = T.clamp(disc(real_batch), LOG_EPS, 1.0 - LOG_EPS)
    pf = T.clamp(disc(fake_batch), LOG_EPS, 1.0 - LOG_EPS)
    return T.mean(-T.log(pr)) + T.mean(-T.log(1.0 - pf))


def perceptual_loss(extractor, generated: Tensor, reference: Tensor, squared: bool = False) -> Tensor:
    """Mean per-image Euclidean distance between frozen feature maps.

    Inputs of any spatial size are bilinearly resized to the extractor's
    input size first, so gradients flow back through the resize.
    """
    size = extractor.input_size
    g = _ensure_size(generated, size)
    r = _ensure_size(reference, size)
    diff = extractor(g) - extractor(r)
    if squared:
        return T.mean(T.sum_(T.square(diff), axis=(1, 2, 3), keepdims=True))
    return T.mean(_per_image_l2(diff))


def _ensure_size(x: Tensor, size: int) -> Tensor:
    if x.shape[2] == size and x.shape[3] == size:
        return x
    return T.bilinear_resize(x, size, size)


def tv_loss(x: Tensor, squared: bool = False) -> Tensor:
    """Total variation: per-image L2 norms of horizontal and vertical forward
    differences, averaged over the batch."""
    n, c, h, w = x.shape
    if h < 2 and w < 2:
        raise ValueError(f"tv_loss needs at least 2 pixels in one direction, got {h}x{w}")
    terms = []
    if w >= 2:
        dh = T.slice_hw(x, 0, h, 1, w) - T.slice_hw(x, 0, h, 0, w - 1)
        terms.append(dh)
    if h >= 2:
        dv = T.slice_hw(x, 1, h, 0, w) - T.slice_hw(x, 0, h - 1, 0, w)
        terms.append(dv)
    total = None
    for d in terms:
        if squared:
            norm = T.sum_(T.square(d), axis=(1, 2, 3), keepdims=True)
        else:
            norm = _per_image_l2(d)
        total = norm if total is None else total + norm
    return T.mean(total)


def l1_loss(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference (per-element normalization)."""
    if a.shape != b.shape:
        raise ValueError(f"l1_loss shape mismatch: {a.shape} vs {b.shape}")
    return T.mean(T.absolute(a - b))


def cycle_loss(degrade, reconstruct, z: Tensor) -> Tensor:
    """L1 distance between z and its reconstruct-then-degrade round trip."""
    return l1_loss(degrade(reconstruct(z)), z)


def degradation_objective(l_cyc, l_adv, l_per, w: LossWeights):
    """Composite objective for the degradation network."""
    return l_cyc + w.alpha * l_adv + w.beta * l_per


def reconstruction_objective(l_1, l_cyc, l_tv, w: LossWeights):
    """Composite objective for the reconstruction network."""
    return l_1 + w.eta * l_cyc + w.gamma * l_tv


def total_objective(l_deg, l_rec):
    return l_deg + l_rec
