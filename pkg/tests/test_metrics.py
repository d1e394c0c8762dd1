import math

import numpy as np
import pytest
from PIL import Image

from changekit.core import IGNORE_VALUE
from changekit.metrics import (
    ERROR_FN,
    ERROR_FP,
    ERROR_MAP_PALETTE,
    ERROR_TN,
    ERROR_TP,
    ConfusionMatrix,
    binary_scores,
    cohens_kappa,
    dynamicearthnet_scores,
    error_map,
    num_semantic_change_categories,
    save_error_map,
    second_scores,
    semantic_change_category,
    write_metric_record,
)


class TestConfusionMatrix:
    def test_matches_cell_count_oracle(self):
        # brute force: count each (ref, pred) pair with an explicit loop
        rng = np.random.default_rng(0)
        for _ in range(50):
            k = int(rng.integers(2, 6))
            ref = rng.integers(0, k, (16, 16)).astype(np.uint8)
            pred = rng.integers(0, k, (16, 16)).astype(np.uint8)
            ref[rng.random((16, 16)) < 0.1] = IGNORE_VALUE
            cm = ConfusionMatrix(k)
            cm.update(ref, pred)
            expected = np.zeros((k, k), dtype=np.int64)
            for y in range(16):
                for x in range(16):
                    if ref[y, x] != IGNORE_VALUE and pred[y, x] != IGNORE_VALUE:
                        expected[ref[y, x], pred[y, x]] += 1
            assert np.array_equal(cm.counts, expected)

    def test_streaming_equals_batch(self):
        rng = np.random.default_rng(1)
        ref = rng.integers(0, 3, (64, 64)).astype(np.uint8)
        pred = rng.integers(0, 3, (64, 64)).astype(np.uint8)
        whole = ConfusionMatrix(3)
        whole.update(ref, pred)
        streamed = ConfusionMatrix(3)
        for row in range(64):
            streamed.update(ref[row], pred[row])
        assert np.array_equal(whole.counts, streamed.counts)

    def test_merge_equals_joint_update(self):
        rng = np.random.default_rng(2)
        a_ref, a_pred = rng.integers(0, 2, (8, 8)), rng.integers(0, 2, (8, 8))
        b_ref, b_pred = rng.integers(0, 2, (8, 8)), rng.integers(0, 2, (8, 8))
        cm_a, cm_b, cm_all = ConfusionMatrix(2), ConfusionMatrix(2), ConfusionMatrix(2)
        cm_a.update(a_ref, a_pred)
        cm_b.update(b_ref, b_pred)
        cm_all.update(a_ref, a_pred)
        cm_all.update(b_ref, b_pred)
        assert np.array_equal(cm_a.merge(cm_b).counts, cm_all.counts)

    def test_validation(self):
        with pytest.raises(ValueError):
            ConfusionMatrix(2, np.zeros((3, 3), dtype=np.int64))
        with pytest.raises(ValueError):
            ConfusionMatrix(2, -np.ones((2, 2), dtype=np.int64))
        with pytest.raises(ValueError):
            ConfusionMatrix(2).update(np.zeros(4), np.zeros(5))


class TestBinaryScores:
    def test_hand_computed_counts(self):
        # tp=50 fp=25 fn=25: iou = 50/100, precision = recall = f1 = 2/3
        cm = ConfusionMatrix(2, np.array([[100, 25], [25, 50]]))
        s = binary_scores(cm)
        assert abs(s["iou"] - 0.5) < 1e-12
        assert abs(s["precision"] - 2 / 3) < 1e-12
        assert abs(s["recall"] - 2 / 3) < 1e-12
        assert abs(s["f1"] - 2 / 3) < 1e-12
        assert not s["degenerate"]

    def test_f1_iou_relation(self):
        # f1 = 2*iou / (1 + iou) for any non-degenerate matrix
        rng = np.random.default_rng(3)
        for _ in range(100):
            counts = rng.integers(1, 100, (2, 2))
            s = binary_scores(ConfusionMatrix(2, counts))
            assert abs(s["f1"] - 2 * s["iou"] / (1 + s["iou"])) < 1e-12

    def test_degenerate_all_negative(self):
        s = binary_scores(ConfusionMatrix(2, np.array([[100, 0], [0, 0]])))
        assert s["degenerate"]
        assert s["f1"] == 0.0 and s["iou"] == 0.0

    def test_requires_binary(self):
        with pytest.raises(ValueError):
            binary_scores(ConfusionMatrix(3))

    def test_scores_in_unit_range(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            s = binary_scores(ConfusionMatrix(2, rng.integers(0, 50, (2, 2))))
            for key in ("iou", "f1", "precision", "recall"):
                assert 0.0 <= s[key] <= 1.0


def kappa_oracle(counts):
    # independent implementation from the definition
    counts = np.asarray(counts, dtype=float)
    n = counts.sum()
    po = sum(counts[i, i] for i in range(len(counts))) / n
    pe = sum(counts[i, :].sum() * counts[:, i].sum() for i in range(len(counts))) / n ** 2
    return (po - pe) / (1 - pe)


class TestSecondScores:
    def test_kappa_against_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            counts = rng.integers(1, 30, (4, 4))
            assert abs(cohens_kappa(counts) - kappa_oracle(counts)) < 1e-12

    def test_kappa_perfect_agreement(self):
        assert abs(cohens_kappa(np.diag([5, 7, 9])) - 1.0) < 1e-12

    def test_sek_against_scalar_oracle(self):
        rng = np.random.default_rng(6)
        for _ in range(30):
            k = num_semantic_change_categories(2)
            sem = rng.integers(0, 20, (k, k))
            binary = rng.integers(1, 50, (2, 2))
            s = second_scores(ConfusionMatrix(k, sem), ConfusionMatrix(2, binary))
            zeroed = sem.astype(float).copy()
            zeroed[0, 0] = 0.0
            tn, fp, fn, tp = binary[0, 0], binary[0, 1], binary[1, 0], binary[1, 1]
            iou_changed = tp / (tp + fp + fn)
            expected_sek = kappa_oracle(zeroed) * math.exp(iou_changed - 1.0)
            assert abs(s["sek"] - expected_sek) < 1e-12
            assert abs(s["miou"] - 0.5 * (iou_changed + tn / (tn + fp + fn))) < 1e-12

    def test_overall_identity(self):
        rng = np.random.default_rng(7)
        k = num_semantic_change_categories(3)
        for _ in range(30):
            s = second_scores(
                ConfusionMatrix(k, rng.integers(0, 9, (k, k))),
                ConfusionMatrix(2, rng.integers(1, 50, (2, 2))),
            )
            assert abs(s["overall"] - (0.3 * s["miou"] + 0.7 * s["sek"])) < 1e-15

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            second_scores(ConfusionMatrix(5), ConfusionMatrix(2))

    def test_score_ranges(self):
        rng = np.random.default_rng(14)
        k = num_semantic_change_categories(2)
        for _ in range(100):
            s = second_scores(
                ConfusionMatrix(k, rng.integers(0, 9, (k, k))),
                ConfusionMatrix(2, rng.integers(0, 50, (2, 2))),
            )
            assert -1.0 <= s["kappa"] <= 1.0
            assert -1.0 <= s["sek"] <= 1.0
            assert 0.0 <= s["miou"] <= 1.0
            assert 0.0 <= s["iou_changed"] <= 1.0 and 0.0 <= s["iou_unchanged"] <= 1.0

    def test_category_encoding(self):
        frm = np.array([[0, 1], [2, IGNORE_VALUE]], dtype=np.uint8)
        to = np.array([[0, 2], [2, 1]], dtype=np.uint8)
        cat = semantic_change_category(frm, to, num_classes=3)
        assert cat[0, 0] == 0                     # unchanged
        assert cat[0, 1] == 1 + 1 * 3 + 2         # 1 -> 2
        assert cat[1, 0] == 0                     # unchanged
        assert cat[1, 1] == IGNORE_VALUE
        assert num_semantic_change_categories(3) == 10


class TestTimeSeriesScores:
    def test_perfect_predictions(self):
        rng = np.random.default_rng(8)
        series = [rng.integers(0, 3, (16, 16)) for _ in range(4)]
        out = dynamicearthnet_scores(series, [s.copy() for s in series], 3)
        assert abs(out["bc"] - 1.0) < 1e-12
        assert abs(out["sc"] - 1.0) < 1e-12
        assert abs(out["scs"] - 1.0) < 1e-12

    def test_scs_is_average_identity(self):
        rng = np.random.default_rng(9)
        ref = [rng.integers(0, 3, (16, 16)) for _ in range(3)]
        pred = [rng.integers(0, 3, (16, 16)) for _ in range(3)]
        out = dynamicearthnet_scores(ref, pred, 3)
        assert abs(out["scs"] - 0.5 * (out["bc"] + out["sc"])) < 1e-15

    def test_explicit_change_predictions_used(self):
        rng = np.random.default_rng(10)
        ref = [rng.integers(0, 2, (8, 8)) for _ in range(2)]
        pred = [r.copy() for r in ref]
        perfect_change = [(ref[0] != ref[1]).astype(np.uint8)]
        out = dynamicearthnet_scores(ref, pred, 2, pred_change_series=perfect_change)
        assert abs(out["bc"] - 1.0) < 1e-12
        wrong_change = [1 - perfect_change[0]]
        out2 = dynamicearthnet_scores(ref, pred, 2, pred_change_series=wrong_change)
        assert out2["bc"] < 0.5

    def test_pluggable_rules(self):
        rng = np.random.default_rng(11)
        ref = [rng.integers(0, 2, (8, 8)) for _ in range(2)]
        pred = [rng.integers(0, 2, (8, 8)) for _ in range(2)]
        out = dynamicearthnet_scores(ref, pred, 2, bc_rule=lambda cm, *a: 0.25)
        assert out["bc"] == 0.25
        assert abs(out["scs"] - 0.5 * (0.25 + out["sc"])) < 1e-15

    def test_series_validation(self):
        frame = np.zeros((4, 4), dtype=np.uint8)
        with pytest.raises(ValueError):
            dynamicearthnet_scores([frame], [frame], 2)
        with pytest.raises(ValueError):
            dynamicearthnet_scores([frame, frame], [frame], 2)
        with pytest.raises(ValueError):
            dynamicearthnet_scores([frame, frame], [frame, frame], 2,
                                   pred_change_series=[frame, frame])


class TestErrorMaps:
    def test_categories_partition_valid_cells(self):
        rng = np.random.default_rng(12)
        pred = rng.integers(0, 2, (16, 16)).astype(np.uint8)
        ref = rng.integers(0, 2, (16, 16)).astype(np.uint8)
        ref[0, :4] = IGNORE_VALUE
        out = error_map(pred, ref)
        assert np.array_equal(out == ERROR_TP, (ref == 1) & (pred == 1))
        assert np.array_equal(out == ERROR_FP, (ref == 0) & (pred == 1))
        assert np.array_equal(out == ERROR_FN, (ref == 1) & (pred == 0))
        assert np.array_equal(out == IGNORE_VALUE, ref == IGNORE_VALUE)
        valid = ref != IGNORE_VALUE
        assert set(np.unique(out[valid])) <= {ERROR_TN, ERROR_TP, ERROR_FP, ERROR_FN}

    def test_counts_match_binary_scores(self):
        rng = np.random.default_rng(13)
        pred = rng.integers(0, 2, (32, 32)).astype(np.uint8)
        ref = rng.integers(0, 2, (32, 32)).astype(np.uint8)
        cm = ConfusionMatrix(2)
        cm.update(ref, pred)
        s = binary_scores(cm)
        out = error_map(pred, ref)
        assert (out == ERROR_TP).sum() == s["tp"]
        assert (out == ERROR_FP).sum() == s["fp"]
        assert (out == ERROR_FN).sum() == s["fn"]
        assert (out == ERROR_TN).sum() == s["tn"]

    def test_png_round_trip_palette(self, tmp_path):
        cats = np.array([[ERROR_TN, ERROR_TP], [ERROR_FP, ERROR_FN]], dtype=np.uint8)
        path = tmp_path / "err.png"
        save_error_map(cats, path)
        img = Image.open(path)
        assert img.mode == "P"
        rgba = np.asarray(img.convert("RGBA"))
        assert tuple(rgba[0, 1]) == ERROR_MAP_PALETTE[ERROR_TP]   # green
        assert tuple(rgba[1, 0]) == ERROR_MAP_PALETTE[ERROR_FP]   # red
        assert tuple(rgba[1, 1]) == ERROR_MAP_PALETTE[ERROR_FN]   # blue
        assert rgba[0, 0, 3] == 0                                  # TN transparent

    def test_metric_record_jsonl(self, tmp_path):
        import json
        path = tmp_path / "records.jsonl"
        write_metric_record({"f1": 0.5}, path, extra={"split": "val"})
        write_metric_record({"f1": 0.75}, path)
        lines = path.read_text().splitlines()
        assert len(lines) == 2
        first = json.loads(lines[0])
        assert first == {"split": "val", "f1": 0.5}
