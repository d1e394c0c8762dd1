"""Validated in-memory value types shared by every other module.

Rasters are channel-major float32 in memory. Label grids are integer
``(H, W)`` arrays whose cells are class ids or the ignore sentinel.
All values are frozen after construction: the backing arrays are marked
read-only, so instances can be shared across workers without locking.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

# Serialized-mask convention: 255 marks cells without annotation.
IGNORE_VALUE = 255


class ValidationError(ValueError):
    """Base class for invariant violations in core values."""


class ShapeMismatchError(ValidationError):
    pass


class NonFiniteValueError(ValidationError):
    pass


class OutOfRangeLabelError(ValidationError):
    pass


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ImageTile:
    """A ``(channels, height, width)`` real-valued raster."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise ShapeMismatchError(
                f"image data must be (channels, height, width), got shape {data.shape}"
            )
        c, h, w = data.shape
        if c < 1 or h < 1 or w < 1:
            raise ShapeMismatchError(f"image dimensions must be >= 1, got {data.shape}")
        if not np.isfinite(data).all():
            raise NonFiniteValueError("image contains NaN or Inf values")
        object.__setattr__(self, "data", _freeze(data))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def spatial_shape(self) -> tuple:
        return self.data.shape[1:]


@dataclass(frozen=True)
class SemanticMask:
    """An ``(H, W)`` integer class grid with an ignore sentinel."""

    labels: np.ndarray
    num_classes: int
    ignore_value: int = IGNORE_VALUE

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if not np.issubdtype(labels.dtype, np.integer):
            raise OutOfRangeLabelError(f"labels must be integers, got dtype {labels.dtype}")
        if labels.ndim != 2:
            raise ShapeMismatchError(f"labels must be (height, width), got shape {labels.shape}")
        if self.num_classes < 1:
            raise OutOfRangeLabelError(f"num_classes must be positive, got {self.num_classes}")
        if 0 <= self.ignore_value < self.num_classes:
            raise OutOfRangeLabelError(
                f"ignore_value {self.ignore_value} collides with class range [0, {self.num_classes})"
            )
        valid = (labels >= 0) & (labels < self.num_classes)
        valid |= labels == self.ignore_value
        if not valid.all():
            bad = np.unique(labels[~valid])
            raise OutOfRangeLabelError(
                f"labels contain values outside [0, {self.num_classes}) + ignore: {bad.tolist()}"
            )
        object.__setattr__(self, "labels", _freeze(labels))

    @property
    def spatial_shape(self) -> tuple:
        return self.labels.shape

    @property
    def valid_cells(self) -> np.ndarray:
        return self.labels != self.ignore_value


@dataclass(frozen=True)
class BinaryChangeMask:
    """An ``(H, W)`` grid over {0 = unchanged, 1 = changed, ignore}."""

    values: np.ndarray
    ignore_value: int = IGNORE_VALUE

    def __post_init__(self):
        values = np.asarray(self.values)
        if not np.issubdtype(values.dtype, np.integer):
            raise OutOfRangeLabelError(f"values must be integers, got dtype {values.dtype}")
        if values.ndim != 2:
            raise ShapeMismatchError(f"values must be (height, width), got shape {values.shape}")
        allowed = (values == 0) | (values == 1) | (values == self.ignore_value)
        if not allowed.all():
            bad = np.unique(values[~allowed])
            raise OutOfRangeLabelError(
                f"change mask cells must be 0, 1 or {self.ignore_value}: found {bad.tolist()}"
            )
        object.__setattr__(self, "values", _freeze(values))

    @property
    def spatial_shape(self) -> tuple:
        return self.values.shape

    @property
    def valid_cells(self) -> np.ndarray:
        return self.values != self.ignore_value


def derive_change(mask_a: SemanticMask, mask_b: SemanticMask) -> np.ndarray:
    """Element-wise change indicator of two semantic masks.

    Returns 1 where the labels differ, 0 where they agree, and the ignore
    sentinel where either side is unannotated.
    """
    if mask_a.spatial_shape != mask_b.spatial_shape:
        raise ShapeMismatchError(
            f"mask shapes differ: {mask_a.spatial_shape} vs {mask_b.spatial_shape}"
        )
    if mask_a.num_classes != mask_b.num_classes:
        raise ShapeMismatchError(
            f"class counts differ: {mask_a.num_classes} vs {mask_b.num_classes}"
        )
    ignore = mask_a.ignore_value
    out = (mask_a.labels != mask_b.labels).astype(np.uint8)
    invalid = (mask_a.labels == ignore) | (mask_b.labels == mask_b.ignore_value)
    out[invalid] = ignore
    return out


class Provenance(enum.Enum):
    PERMUTATION = "permutation"
    SELF_CONTRAST = "self_contrast"


@dataclass(frozen=True)
class PseudoPair:
    """A synthesized training pair: two tiles, two masks, derived change."""

    image_a: ImageTile
    image_b: ImageTile
    mask_a: SemanticMask
    mask_b: SemanticMask
    change: BinaryChangeMask
    provenance: Provenance

    def __post_init__(self):
        shapes = {
            self.image_a.spatial_shape,
            self.image_b.spatial_shape,
            self.mask_a.spatial_shape,
            self.mask_b.spatial_shape,
            self.change.spatial_shape,
        }
        if len(shapes) != 1:
            raise ShapeMismatchError(f"pseudo-pair rasters disagree in spatial shape: {shapes}")
        expected = derive_change(self.mask_a, self.mask_b)
        if not np.array_equal(expected, self.change.values):
            raise ValidationError("stored change mask does not match the mask-derived change")


@dataclass
class PredictionBundle:
    """Decoupled detector outputs: per-time semantic logits + change logits.

    ``change_logits_rev`` is present exactly when the forward pass ran in
    training mode (both temporal orders are classified for the symmetry
    loss). Tensors are ``(classes, H, W)`` / ``(1, H, W)`` or batched with a
    leading batch axis; all spatial shapes must agree.
    """

    semantic_logits_a: "object"
    semantic_logits_b: "object"
    change_logits_fwd: "object"
    change_logits_rev: Optional["object"] = None

    def __post_init__(self):
        sa = tuple(self.semantic_logits_a.shape)
        sb = tuple(self.semantic_logits_b.shape)
        cf = tuple(self.change_logits_fwd.shape)
        if sa != sb:
            raise ShapeMismatchError(f"semantic logits shapes differ: {sa} vs {sb}")
        if sa[-2:] != cf[-2:]:
            raise ShapeMismatchError(
                f"semantic/change spatial shapes differ: {sa[-2:]} vs {cf[-2:]}"
            )
        if self.change_logits_rev is not None and tuple(self.change_logits_rev.shape) != cf:
            raise ShapeMismatchError("forward and reverse change logits shapes differ")

    @property
    def training_mode(self) -> bool:
        return self.change_logits_rev is not None


def validate(value) -> None:
    """Re-run construction-time invariants on any core value.

    Construction already validates, but values whose backing arrays were
    swapped out (e.g. after deserialization tricks) can be re-checked here.
    """
    if isinstance(value, ImageTile):
        ImageTile(value.data)
    elif isinstance(value, SemanticMask):
        SemanticMask(value.labels, value.num_classes, value.ignore_value)
    elif isinstance(value, BinaryChangeMask):
        BinaryChangeMask(value.values, value.ignore_value)
    elif isinstance(value, PseudoPair):
        value.__post_init__()
    elif isinstance(value, PredictionBundle):
        value.__post_init__()
    else:
        raise TypeError(f"not a core value: {type(value).__name__}")
