"""Confusion-matrix based evaluation scores and error-map rasters.

Confusion matrices accumulate integer counts, so tile-by-tile streaming,
parallel sharding with a final merge, and whole-set evaluation all give
identical results. Degenerate denominators produce a score of 0 with an
explicit flag instead of NaN.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .core import IGNORE_VALUE


@dataclass
class ConfusionMatrix:
    """K x K counts; rows = reference, columns = prediction."""

    num_classes: int
    counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        else:
            self.counts = np.asarray(self.counts, dtype=np.int64)
            if self.counts.shape != (self.num_classes, self.num_classes):
                raise ValueError(f"counts must be {self.num_classes}x{self.num_classes}")
            if (self.counts < 0).any():
                raise ValueError("counts must be non-negative")

    def update(self, reference: np.ndarray, prediction: np.ndarray,
               ignore_value: int = IGNORE_VALUE) -> None:
        ref = np.asarray(reference).ravel()
        pred = np.asarray(prediction).ravel()
        if ref.shape != pred.shape:
            raise ValueError("reference and prediction shapes differ")
        keep = (ref != ignore_value) & (pred != ignore_value)
        ref, pred = ref[keep], pred[keep]
        idx = ref.astype(np.int64) * self.num_classes + pred.astype(np.int64)
        binned = np.bincount(idx, minlength=self.num_classes ** 2)
        self.counts += binned.reshape(self.num_classes, self.num_classes)

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def binary_scores(cm: ConfusionMatrix) -> Dict[str, float]:
    """IoU / F1 / precision / recall of the foreground (changed) class."""
    if cm.num_classes != 2:
        raise ValueError("binary_scores requires a 2x2 confusion matrix")
    tn, fp = int(cm.counts[0, 0]), int(cm.counts[0, 1])
    fn, tp = int(cm.counts[1, 0]), int(cm.counts[1, 1])

    degenerate = False

    def _ratio(num: int, den: int) -> float:
        nonlocal degenerate
        if den == 0:
            degenerate = True
            return 0.0
        return num / den

    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    iou = _ratio(tp, tp + fp + fn)
    f1 = 0.0
    if precision + recall > 0:
        f1 = 2 * precision * recall / (precision + recall)
    elif tp + fp + fn == 0:
        degenerate = True
    return {
        "iou": iou,
        "f1": f1,
        "precision": precision,
        "recall": recall,
        "tp": tp, "fp": fp, "fn": fn, "tn": tn,
        "degenerate": degenerate,
    }


def cohens_kappa(counts: np.ndarray) -> float:
    """Cohen's kappa of a square contingency table; 0 for empty tables."""
    counts = np.asarray(counts, dtype=np.float64)
    n = counts.sum()
    if n == 0:
        return 0.0
    po = np.trace(counts) / n
    pe = float((counts.sum(axis=0) * counts.sum(axis=1)).sum()) / (n * n)
    if pe >= 1.0:
        return 0.0
    return (po - pe) / (1.0 - pe)


def second_scores(cm_semantic_change: ConfusionMatrix,
                  cm_binary: ConfusionMatrix) -> Dict[str, float]:
    """Semantic-change scores: kappa, SeK, mIoU, weighted overall.

    The semantic-change matrix is indexed by change categories with
    category 0 = no change. SeK is the kappa of that matrix with the
    (0, 0) entry zeroed, scaled by exp(IoU_changed - 1); mIoU is the mean
    of the changed and unchanged IoUs of the binary matrix; overall is
    0.3 * mIoU + 0.7 * SeK.
    """
    if cm_semantic_change.total == 0:
        raise ValueError("empty evaluation set")
    kappa = cohens_kappa(cm_semantic_change.counts)

    b = cm_binary.counts
    tn, fp, fn, tp = int(b[0, 0]), int(b[0, 1]), int(b[1, 0]), int(b[1, 1])
    degenerate = False
    iou_changed = tp / (tp + fp + fn) if (tp + fp + fn) > 0 else 0.0
    iou_unchanged = tn / (tn + fp + fn) if (tn + fp + fn) > 0 else 0.0
    if (tp + fp + fn) == 0 or (tn + fp + fn) == 0:
        degenerate = True
    miou = 0.5 * (iou_changed + iou_unchanged)

    sek_counts = cm_semantic_change.counts.astype(np.float64).copy()
    sek_counts[0, 0] = 0.0
    sek = cohens_kappa(sek_counts) * float(np.exp(iou_changed - 1.0))
    if sek_counts.sum() == 0:
        degenerate = True

    return {
        "kappa": kappa,
        "sek": sek,
        "miou": miou,
        "overall": 0.3 * miou + 0.7 * sek,
        "iou_changed": iou_changed,
        "iou_unchanged": iou_unchanged,
        "degenerate": degenerate,
    }


def semantic_change_category(from_labels: np.ndarray, to_labels: np.ndarray,
                             num_classes: int,
                             ignore_value: int = IGNORE_VALUE) -> np.ndarray:
    """Categorize cells for the semantic-change confusion matrix.

    0 = no change; 1 + from*K + to = an ordered (from, to) change pair.
    Ignore cells stay ignore.
    """
    from_labels = np.asarray(from_labels)
    to_labels = np.asarray(to_labels)
    cat = np.where(
        from_labels == to_labels,
        0,
        1 + from_labels.astype(np.int64) * num_classes + to_labels.astype(np.int64),
    )
    invalid = (from_labels == ignore_value) | (to_labels == ignore_value)
    cat[invalid] = ignore_value
    return cat


def num_semantic_change_categories(num_classes: int) -> int:
    return 1 + num_classes * num_classes


# ---------------------------------------------------------------------------
# Time-series (adjacent-frame) scoring with pluggable BC/SC rules.
# ---------------------------------------------------------------------------

def bc_from_f1(cm_binary: ConfusionMatrix, *_args) -> float:
    """Default binary-change rule: F1 of change over all adjacent pairs."""
    return binary_scores(cm_binary)["f1"]


def sc_from_changed_cell_iou(_cm_binary: ConfusionMatrix,
                             inter: np.ndarray, union: np.ndarray) -> float:
    """Default semantic-change rule: mean class IoU on change-involved cells."""
    present = union > 0
    if not present.any():
        return 0.0
    return float((inter[present] / union[present]).mean())


def dynamicearthnet_scores(
    ref_semantic_series: Sequence[np.ndarray],
    pred_semantic_series: Sequence[np.ndarray],
    num_classes: int,
    pred_change_series: Optional[Sequence[np.ndarray]] = None,
    ignore_value: int = IGNORE_VALUE,
    bc_rule: Callable = bc_from_f1,
    sc_rule: Callable = sc_from_changed_cell_iou,
) -> Dict[str, object]:
    """BC / SC / SCS over all adjacent frame pairs of a time series.

    ``pred_change_series`` optionally supplies the change head's binary
    predictions per adjacent pair; without it, change is read off the
    predicted semantic maps by inequality. SCS is exactly (BC + SC) / 2.
    The BC and SC rules are pluggable so alternative protocol definitions
    can be swapped in without touching accumulation.
    """
    n_frames = len(ref_semantic_series)
    if n_frames < 2:
        raise ValueError("time series must contain at least 2 frames")
    if len(pred_semantic_series) != n_frames:
        raise ValueError("prediction series length differs from reference series")
    if pred_change_series is not None and len(pred_change_series) != n_frames - 1:
        raise ValueError("need one change prediction per adjacent frame pair")

    cm_binary = ConfusionMatrix(2)
    inter = np.zeros(num_classes, dtype=np.int64)
    union = np.zeros(num_classes, dtype=np.int64)
    seg_inter = np.zeros(num_classes, dtype=np.int64)
    seg_union = np.zeros(num_classes, dtype=np.int64)

    for t in range(n_frames - 1):
        ref_a, ref_b = ref_semantic_series[t], ref_semantic_series[t + 1]
        pred_a, pred_b = pred_semantic_series[t], pred_semantic_series[t + 1]
        valid = (ref_a != ignore_value) & (ref_b != ignore_value)

        ref_change = np.where(valid, (ref_a != ref_b).astype(np.uint8), ignore_value)
        if pred_change_series is not None:
            pred_change = pred_change_series[t]
        else:
            pred_change = (pred_a != pred_b).astype(np.uint8)
        cm_binary.update(ref_change, pred_change, ignore_value)

        changed = valid & (ref_a != ref_b)
        for ref_map, pred_map in ((ref_a, pred_a), (ref_b, pred_b)):
            for k in range(num_classes):
                r = changed & (ref_map == k)
                p = changed & (pred_map == k)
                inter[k] += int((r & p).sum())
                union[k] += int((r | p).sum())

    for t in range(n_frames):
        ref_map, pred_map = ref_semantic_series[t], pred_semantic_series[t]
        valid = ref_map != ignore_value
        for k in range(num_classes):
            r = valid & (ref_map == k)
            p = valid & (pred_map == k)
            seg_inter[k] += int((r & p).sum())
            seg_union[k] += int((r | p).sum())

    bc = float(bc_rule(cm_binary, inter, union))
    sc = float(sc_rule(cm_binary, inter, union))
    per_class_sc = np.where(union > 0, inter / np.maximum(union, 1), 0.0)
    per_class_iou = np.where(seg_union > 0, seg_inter / np.maximum(seg_union, 1), 0.0)
    return {
        "bc": bc,
        "sc": sc,
        "scs": 0.5 * (bc + sc),
        "per_class_sc": per_class_sc.tolist(),
        "per_class_iou": per_class_iou.tolist(),
    }


# ---------------------------------------------------------------------------
# Error maps
# ---------------------------------------------------------------------------

ERROR_TN, ERROR_TP, ERROR_FP, ERROR_FN = 0, 1, 2, 3

# indexed-color palette: TN transparent, TP green, FP red, FN blue
ERROR_MAP_PALETTE: Dict[int, Tuple[int, int, int, int]] = {
    ERROR_TN: (0, 0, 0, 0),
    ERROR_TP: (0, 255, 0, 255),
    ERROR_FP: (255, 0, 0, 255),
    ERROR_FN: (0, 0, 255, 255),
}


def error_map(prediction, reference) -> np.ndarray:
    """Per-cell TP/FP/FN/TN categories; ignore cells stay ignore."""
    pred = np.asarray(prediction.values if hasattr(prediction, "values") else prediction)
    ref = np.asarray(reference.values if hasattr(reference, "values") else reference)
    if pred.shape != ref.shape:
        raise ValueError(f"shapes differ: {pred.shape} vs {ref.shape}")
    out = np.full(pred.shape, ERROR_TN, dtype=np.uint8)
    out[(ref == 1) & (pred == 1)] = ERROR_TP
    out[(ref == 0) & (pred == 1)] = ERROR_FP
    out[(ref == 1) & (pred == 0)] = ERROR_FN
    out[(ref == IGNORE_VALUE) | (pred == IGNORE_VALUE)] = IGNORE_VALUE
    return out


def save_error_map(categories: np.ndarray, path) -> None:
    """Serialize an error map as an indexed PNG with the documented palette."""
    img = Image.fromarray(categories, mode="P")
    palette = [0] * (256 * 3)
    alpha = [255] * 256
    for code, (r, g, b, a) in ERROR_MAP_PALETTE.items():
        palette[3 * code: 3 * code + 3] = [r, g, b]
        alpha[code] = a
    alpha[IGNORE_VALUE] = 0
    img.putpalette(palette)
    img.info["transparency"] = bytes(alpha)
    img.save(path, transparency=bytes(alpha))


def write_metric_record(scores: Dict[str, object], path, extra: Dict[str, object] | None = None) -> None:
    """Append one JSON object per evaluation to a JSON-lines file."""
    record = dict(extra or {})
    record.update(scores)
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, default=float) + "\n")
