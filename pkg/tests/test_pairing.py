import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from changekit.core import IGNORE_VALUE, Provenance, SemanticMask
from changekit.pairing import (
    EmptyBatchError,
    JitterBounds,
    PairingConfig,
    assign_change,
    assign_change_or,
    build_pseudo_pairs,
    color_jitter,
    permute_batch,
)
from conftest import random_mask, random_tile


class TestPermuteBatch:
    def test_single_element(self, rng):
        assert permute_batch(1, rng).tolist() == [0]

    def test_empty_batch_rejected(self, rng):
        with pytest.raises(EmptyBatchError):
            permute_batch(0, rng)

    def test_deterministic_given_seed(self):
        a = permute_batch(10, np.random.default_rng(42))
        b = permute_batch(10, np.random.default_rng(42))
        assert a.tolist() == b.tolist()

    def test_uniform_over_s3(self):
        # 60k draws; each of the 6 permutations should hit 1/6 +- 0.01
        rng = np.random.default_rng(7)
        counts = {p: 0 for p in itertools.permutations(range(3))}
        draws = 60_000
        for _ in range(draws):
            counts[tuple(permute_batch(3, rng))] += 1
        for count in counts.values():
            assert abs(count / draws - 1 / 6) < 0.01


class TestAssignChange:
    def test_binary_masks_equal_xor(self):
        a = SemanticMask(np.array([[1, 0], [1, 0]], dtype=np.uint8), 2)
        b = SemanticMask(np.array([[1, 1], [0, 0]], dtype=np.uint8), 2)
        out = assign_change(a, b)
        expected = np.logical_xor(a.labels, b.labels).astype(np.uint8)
        assert np.array_equal(out.values, [[0, 1], [1, 0]])
        assert np.array_equal(out.values, expected)

    def test_identity_is_all_zero(self, rng):
        m = random_mask(rng, num_classes=5)
        assert not assign_change(m, m).values.any()

    def test_matches_per_cell_loop_oracle(self, rng):
        # brute-force reference: an explicit python loop over cells
        for _ in range(200):
            a = random_mask(rng, num_classes=6, ignore_frac=0.1)
            b = random_mask(rng, num_classes=6, ignore_frac=0.1)
            out = assign_change(a, b).values
            for y in range(8):
                for x in range(8):
                    la, lb = int(a.labels[y, x]), int(b.labels[y, x])
                    if la == IGNORE_VALUE or lb == IGNORE_VALUE:
                        expected = IGNORE_VALUE
                    else:
                        expected = int(la != lb)
                    assert out[y, x] == expected

    @given(seed=st.integers(0, 10_000))
    @settings(max_examples=50, deadline=None)
    def test_symmetry(self, seed):
        r = np.random.default_rng(seed)
        a = random_mask(r, num_classes=4, ignore_frac=0.1)
        b = random_mask(r, num_classes=4, ignore_frac=0.1)
        assert np.array_equal(assign_change(a, b).values, assign_change(b, a).values)

    def test_or_variant_marks_overlap_as_change(self):
        a = SemanticMask(np.array([[1, 1], [0, 0]], dtype=np.uint8), 2)
        b = SemanticMask(np.array([[1, 0], [1, 0]], dtype=np.uint8), 2)
        assert np.array_equal(assign_change_or(a, b).values, [[1, 1], [1, 0]])


class TestColorJitter:
    def test_zero_bounds_is_identity(self, rng):
        tile = random_tile(rng)
        out = color_jitter(tile, rng, bounds=JitterBounds.zero())
        assert np.array_equal(out.data, tile.data)

    def test_deterministic_given_seed(self, rng):
        tile = random_tile(rng)
        a = color_jitter(tile, np.random.default_rng(5))
        b = color_jitter(tile, np.random.default_rng(5))
        assert np.array_equal(a.data, b.data)

    def test_output_clamped_to_unit_range(self):
        tile = random_tile(np.random.default_rng(0), (3, 16, 16))
        constant = tile.data * 0 + 0.5
        from changekit.core import ImageTile
        constant_tile = ImageTile(constant)
        for seed in range(100):
            out = color_jitter(constant_tile, np.random.default_rng(seed))
            assert out.data.min() >= 0.0 and out.data.max() <= 1.0

    def test_strong_variant_output_valid(self, rng):
        tile = random_tile(rng, (3, 16, 16))
        for seed in range(20):
            out = color_jitter(tile, np.random.default_rng(seed), strength="strong")
            assert out.data.shape == tile.data.shape
            assert np.isfinite(out.data).all()
            assert out.data.min() >= 0.0 and out.data.max() <= 1.0


class TestBuildPseudoPairs:
    def make_batch(self, rng, n=6):
        return [(random_tile(rng, (3, 8, 8)), random_mask(rng, num_classes=3)) for _ in range(n)]

    def test_p0_all_permutation(self, rng):
        pairs = build_pseudo_pairs(self.make_batch(rng), PairingConfig(self_contrast_p=0.0), rng)
        assert all(p.provenance is Provenance.PERMUTATION for p in pairs)

    def test_p1_all_self_contrast_and_zero_change(self, rng):
        pairs = build_pseudo_pairs(self.make_batch(rng), PairingConfig(self_contrast_p=1.0), rng)
        for pair in pairs:
            assert pair.provenance is Provenance.SELF_CONTRAST
            valid = pair.change.valid_cells
            assert not pair.change.values[valid].any()

    def test_replacement_fraction_concentrates(self, rng):
        # 10k bernoulli draws at p=0.9 -> fraction within +-0.01
        batch = self.make_batch(rng, n=4)
        cfg = PairingConfig(self_contrast_p=0.9)
        total, replaced = 0, 0
        while total < 10_000:
            for pair in build_pseudo_pairs(batch, cfg, rng):
                total += 1
                replaced += pair.provenance is Provenance.SELF_CONTRAST
        assert abs(replaced / total - 0.9) < 0.01

    def test_self_contrast_pairs_spatially_aligned(self, rng):
        pairs = build_pseudo_pairs(self.make_batch(rng), PairingConfig(self_contrast_p=1.0), rng)
        for pair in pairs:
            assert pair.mask_a is pair.mask_b
            assert pair.image_a.spatial_shape == pair.image_b.spatial_shape

    def test_empty_batch_rejected(self, rng):
        with pytest.raises(EmptyBatchError):
            build_pseudo_pairs([], PairingConfig(), rng)

    def test_invalid_probability_rejected(self):
        with pytest.raises(ValueError):
            PairingConfig(self_contrast_p=1.5)
