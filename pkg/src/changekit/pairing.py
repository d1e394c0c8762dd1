"""Supervision construction from unpaired labeled images.

Pseudo bitemporal pairs are built inside a mini-batch: a random
permutation provides the "next-time" image, the change target is the
element-wise inequality of the two semantic masks, and with probability
``self_contrast_p`` the partner is replaced by a color-jittered copy of
the image itself (a spatially aligned negative example).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Literal, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .core import (
    BinaryChangeMask,
    ImageTile,
    Provenance,
    PseudoPair,
    SemanticMask,
    derive_change,
)


class EmptyBatchError(ValueError):
    pass


JitterStrength = Literal["default_color_jitter", "strong"]


@dataclass(frozen=True)
class JitterBounds:
    """Magnitudes of the radiometric perturbation; all zero = identity."""

    brightness: float = 0.3   # multiplicative factor in [1-b, 1+b]
    contrast: float = 0.3     # contrast factor in [1-c, 1+c]
    saturation: float = 0.3   # blend toward per-pixel channel mean
    hue_shift: float = 0.05   # additive per-channel offset

    @staticmethod
    def zero() -> "JitterBounds":
        return JitterBounds(0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class PairingConfig:
    self_contrast_p: float = 0.9
    jitter_strength: JitterStrength = "default_color_jitter"
    seed: int = 0
    jitter_bounds: JitterBounds = field(default_factory=JitterBounds)

    def __post_init__(self):
        if not 0.0 <= self.self_contrast_p <= 1.0:
            raise ValueError(f"self_contrast_p must be in [0, 1], got {self.self_contrast_p}")


def permute_batch(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly sampled permutation of {0..n-1}; deterministic given rng state."""
    if n < 1:
        raise EmptyBatchError("cannot permute an empty batch")
    return rng.permutation(n)


def assign_change(mask_i: SemanticMask, mask_j: SemanticMask) -> BinaryChangeMask:
    """Change target from two semantic masks: 1 where labels differ.

    Cells where either input is ignore stay ignore. Symmetric in its
    arguments and all-zero (on annotated cells) when both masks agree,
    which the symmetry loss relies on. For binary masks this is exactly
    element-wise xor.
    """
    return BinaryChangeMask(derive_change(mask_i, mask_j), mask_i.ignore_value)


def assign_change_or(mask_i: SemanticMask, mask_j: SemanticMask) -> BinaryChangeMask:
    """Logical-or label assignment: 1 where either mask is foreground.

    Deliberately wrong on overlapping objects (it marks unchanged objects
    as change). Exists only so tests and ablations can demonstrate the
    accuracy drop versus the inequality assigner; never used in training
    by default.
    """
    change = derive_change(mask_i, mask_j)
    either_fg = (mask_i.labels != 0) | (mask_j.labels != 0)
    out = np.where(either_fg, 1, 0).astype(np.uint8)
    out[change == mask_i.ignore_value] = mask_i.ignore_value
    return BinaryChangeMask(out, mask_i.ignore_value)


def _apply_basic_jitter(data: np.ndarray, rng: np.random.Generator, bounds: JitterBounds) -> np.ndarray:
    c = data.shape[0]
    out = data.copy()
    brightness = 1.0 + rng.uniform(-bounds.brightness, bounds.brightness)
    contrast = 1.0 + rng.uniform(-bounds.contrast, bounds.contrast)
    saturation = rng.uniform(-bounds.saturation, bounds.saturation)
    hue = rng.uniform(-bounds.hue_shift, bounds.hue_shift, size=(c, 1, 1))

    out = out * brightness
    mean = out.mean(axis=(1, 2), keepdims=True)
    out = (out - mean) * contrast + mean
    gray = out.mean(axis=0, keepdims=True)
    out = out + saturation * (gray - out)
    out = out + hue
    return out


def _apply_strong_jitter(data: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Heavier perturbations: tone curve, shadow, haze, noise, blur, cutout."""
    c, h, w = data.shape
    out = data.copy()

    # tone curve (gamma)
    if rng.random() < 0.5:
        gamma = np.exp(rng.uniform(-0.4, 0.4))
        out = np.clip(out, 0.0, 1.0) ** gamma

    # shadow: darken a random half-plane
    if rng.random() < 0.5:
        yy, xx = np.mgrid[0:h, 0:w]
        a, b = rng.normal(size=2)
        t = rng.uniform(-0.5, 0.5) * (abs(a) * h + abs(b) * w)
        region = (a * (yy - h / 2) + b * (xx - w / 2)) > t
        out = np.where(region, out * rng.uniform(0.5, 0.9), out)

    # fog-like haze: blend toward a bright constant
    if rng.random() < 0.5:
        out = out + rng.uniform(0.05, 0.3) * (0.9 - out)

    # additive noise
    if rng.random() < 0.5:
        out = out + rng.normal(0.0, rng.uniform(0.01, 0.05), size=out.shape)

    # blur
    if rng.random() < 0.5:
        out = ndimage.uniform_filter(out, size=(1, 3, 3))

    # local gain: shift a few random boxes by per-channel offsets, a
    # proxy for illumination changes that hit compact regions only
    if rng.random() < 0.7:
        for _ in range(int(rng.integers(1, 4))):
            bh = max(2, int(h * rng.uniform(0.1, 0.5)))
            bw = max(2, int(w * rng.uniform(0.1, 0.5)))
            y0 = int(rng.integers(0, max(1, h - bh + 1)))
            x0 = int(rng.integers(0, max(1, w - bw + 1)))
            offset = rng.uniform(-0.25, 0.25, size=(c, 1, 1))
            out[:, y0:y0 + bh, x0:x0 + bw] += offset

    # cutout: fill a random box with the image mean
    if rng.random() < 0.5:
        ch = max(1, int(h * rng.uniform(0.05, 0.2)))
        cw = max(1, int(w * rng.uniform(0.05, 0.2)))
        y0 = int(rng.integers(0, max(1, h - ch + 1)))
        x0 = int(rng.integers(0, max(1, w - cw + 1)))
        out[:, y0:y0 + ch, x0:x0 + cw] = out.mean()

    return out


def color_jitter(
    image: ImageTile,
    rng: np.random.Generator,
    strength: JitterStrength = "default_color_jitter",
    bounds: JitterBounds | None = None,
) -> ImageTile:
    """Radiometric perturbation of a tile; geometry untouched, output clamped."""
    bounds = bounds if bounds is not None else JitterBounds()
    out = _apply_basic_jitter(np.asarray(image.data, dtype=np.float64), rng, bounds)
    if strength == "strong":
        out = _apply_strong_jitter(out, rng)
    elif strength != "default_color_jitter":
        raise ValueError(f"unknown jitter strength: {strength!r}")
    return ImageTile(np.clip(out, 0.0, 1.0).astype(np.float32))


def build_pseudo_pairs(
    batch: Sequence[Tuple[ImageTile, SemanticMask]],
    cfg: PairingConfig,
    rng: np.random.Generator,
) -> List[PseudoPair]:
    """Synthesize one pseudo bitemporal pair per batch element.

    For each index ``i``: with probability ``self_contrast_p`` the partner
    is a jittered copy of image ``i`` itself (masks identical, change all
    zero on annotated cells); otherwise the partner is image ``pi(i)`` for
    a permutation ``pi`` drawn fresh for this batch. The self-contrast
    decision is i.i.d. per sample.
    """
    n = len(batch)
    if n < 1:
        raise EmptyBatchError("cannot build pseudo pairs from an empty batch")
    pi = permute_batch(n, rng)
    pairs: List[PseudoPair] = []
    for i, (image_a, mask_a) in enumerate(batch):
        if rng.random() < cfg.self_contrast_p:
            image_b = color_jitter(image_a, rng, cfg.jitter_strength, cfg.jitter_bounds)
            mask_b = mask_a
            provenance = Provenance.SELF_CONTRAST
        else:
            image_b, mask_b = batch[pi[i]]
            provenance = Provenance.PERMUTATION
        pairs.append(
            PseudoPair(
                image_a=image_a,
                image_b=image_b,
                mask_a=mask_a,
                mask_b=mask_b,
                change=assign_change(mask_a, mask_b),
                provenance=provenance,
            )
        )
    return pairs
