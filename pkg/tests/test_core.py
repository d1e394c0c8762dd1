import numpy as np
import pytest

from changekit.core import (
    IGNORE_VALUE,
    BinaryChangeMask,
    ImageTile,
    NonFiniteValueError,
    OutOfRangeLabelError,
    PredictionBundle,
    Provenance,
    PseudoPair,
    SemanticMask,
    ShapeMismatchError,
    ValidationError,
    derive_change,
    validate,
)
from changekit.pairing import assign_change


def test_zero_tile_ok():
    tile = ImageTile(np.zeros((1, 4, 4), dtype=np.float32))
    validate(tile)
    assert tile.channels == 1
    assert tile.spatial_shape == (4, 4)


def test_tile_rejects_nan_and_inf():
    bad = np.zeros((1, 4, 4), dtype=np.float32)
    bad[0, 0, 0] = np.nan
    with pytest.raises(NonFiniteValueError):
        ImageTile(bad)
    bad[0, 0, 0] = np.inf
    with pytest.raises(NonFiniteValueError):
        ImageTile(bad)


def test_tile_rejects_bad_shapes():
    with pytest.raises(ShapeMismatchError):
        ImageTile(np.zeros((4, 4), dtype=np.float32))
    with pytest.raises(ShapeMismatchError):
        ImageTile(np.zeros((0, 4, 4), dtype=np.float32))


def test_mask_label_at_num_classes_is_out_of_range():
    labels = np.zeros((4, 4), dtype=np.uint8)
    labels[0, 0] = 3
    with pytest.raises(OutOfRangeLabelError):
        SemanticMask(labels, num_classes=3)


def test_mask_accepts_ignore_cells():
    labels = np.zeros((4, 4), dtype=np.uint8)
    labels[1, 1] = IGNORE_VALUE
    mask = SemanticMask(labels, num_classes=2)
    assert not mask.valid_cells[1, 1]
    assert mask.valid_cells.sum() == 15


def test_mask_rejects_ignore_inside_class_range():
    with pytest.raises(OutOfRangeLabelError):
        SemanticMask(np.zeros((2, 2), dtype=np.uint8), num_classes=2, ignore_value=1)


def test_derive_change_shape_mismatch():
    a = SemanticMask(np.zeros((8, 8), dtype=np.uint8), 3)
    b = SemanticMask(np.zeros((4, 4), dtype=np.uint8), 3)
    with pytest.raises(ShapeMismatchError):
        derive_change(a, b)


def test_binary_change_mask_rejects_other_values():
    with pytest.raises(OutOfRangeLabelError):
        BinaryChangeMask(np.full((2, 2), 7, dtype=np.uint8))


def test_core_values_are_immutable():
    tile = ImageTile(np.zeros((1, 4, 4), dtype=np.float32))
    with pytest.raises(ValueError):
        tile.data[0, 0, 0] = 1.0
    mask = SemanticMask(np.zeros((4, 4), dtype=np.uint8), 2)
    with pytest.raises(ValueError):
        mask.labels[0, 0] = 1


def make_pair(rng, same_mask=False):
    image_a = ImageTile(rng.random((3, 4, 4)).astype(np.float32))
    image_b = ImageTile(rng.random((3, 4, 4)).astype(np.float32))
    mask_a = SemanticMask(rng.integers(0, 3, (4, 4)).astype(np.uint8), 3)
    mask_b = mask_a if same_mask else SemanticMask(rng.integers(0, 3, (4, 4)).astype(np.uint8), 3)
    change = assign_change(mask_a, mask_b)
    return PseudoPair(image_a, image_b, mask_a, mask_b, change, Provenance.PERMUTATION)


def test_pseudo_pair_change_rederivable(rng):
    pair = make_pair(rng)
    rederived = derive_change(pair.mask_a, pair.mask_b)
    assert np.array_equal(rederived, pair.change.values)
    validate(pair)


def test_pseudo_pair_rejects_wrong_change(rng):
    pair = make_pair(rng)
    flipped = np.array(pair.change.values)
    flipped[0, 0] = 1 - flipped[0, 0]
    with pytest.raises(ValidationError):
        PseudoPair(pair.image_a, pair.image_b, pair.mask_a, pair.mask_b,
                   BinaryChangeMask(flipped), Provenance.PERMUTATION)


def test_pseudo_pair_rejects_shape_mismatch(rng):
    pair = make_pair(rng)
    small = ImageTile(np.zeros((3, 2, 2), dtype=np.float32))
    with pytest.raises(ShapeMismatchError):
        PseudoPair(small, pair.image_b, pair.mask_a, pair.mask_b,
                   pair.change, Provenance.PERMUTATION)


def test_prediction_bundle_shapes():
    import torch
    sem = torch.zeros(2, 3, 8, 8)
    ch = torch.zeros(2, 1, 8, 8)
    bundle = PredictionBundle(sem, sem.clone(), ch, ch.clone())
    assert bundle.training_mode
    infer = PredictionBundle(sem, sem.clone(), ch)
    assert not infer.training_mode
    with pytest.raises(ShapeMismatchError):
        PredictionBundle(sem, sem.clone(), torch.zeros(2, 1, 4, 4))


def test_validate_rejects_foreign_types():
    with pytest.raises(TypeError):
        validate(object())
