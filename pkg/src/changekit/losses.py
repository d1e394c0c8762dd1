"""Multi-task objective: semantic supervision + symmetric change supervision.

All losses are computed from logits with the numerically stable
log-sum-exp form, ignore cells contribute exactly zero to values and
gradients, and every term is non-negative. The change term averages the
binary loss over both temporal orders, so the detector cannot profit from
fitting the temporal direction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Literal, Tuple

import torch
import torch.nn.functional as F

from .core import IGNORE_VALUE

DICE_SMOOTH = 1.0


@dataclass(frozen=True)
class LossConfig:
    binary_change_loss: Literal["bce", "bce_plus_soft_dice"] = "bce"
    semantic_loss: Literal["bce_plus_dice", "cross_entropy"] = "bce_plus_dice"
    ignore_value: int = IGNORE_VALUE


def dice_loss(probabilities: torch.Tensor, targets: torch.Tensor,
              valid: torch.Tensor | None = None) -> torch.Tensor:
    """Smooth dice: 1 - (2*sum(p*g) + s) / (sum(p^2) + sum(g^2) + s), s=1.

    ``valid`` masks out ignore cells; an all-ignore target yields 0 by the
    smoothing convention.
    """
    p = probabilities
    g = targets.to(p.dtype)
    if valid is not None:
        v = valid.to(p.dtype)
        p = p * v
        g = g * v
    inter = (p * g).sum()
    denom = (p * p).sum() + (g * g).sum()
    return 1.0 - (2.0 * inter + DICE_SMOOTH) / (denom + DICE_SMOOTH)


def masked_bce_with_logits(
    logits: torch.Tensor, targets: torch.Tensor, valid: torch.Tensor
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Mean BCE over valid cells, plus its positive/negative components.

    The components partition the total: pos + neg == bce exactly (both are
    sums over disjoint cell sets divided by the same valid-cell count).
    """
    t = targets.to(logits.dtype)
    per_cell = F.binary_cross_entropy_with_logits(logits, t, reduction="none")
    v = valid.to(logits.dtype)
    n = v.sum().clamp_min(1.0)
    pos = (per_cell * v * t).sum() / n
    neg = (per_cell * v * (1.0 - t)).sum() / n
    return pos + neg, pos, neg


def _binary_change_term(
    logits: torch.Tensor, targets: torch.Tensor, valid: torch.Tensor, cfg: LossConfig
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    bce, pos, neg = masked_bce_with_logits(logits, targets, valid)
    if cfg.binary_change_loss == "bce_plus_soft_dice":
        probs = torch.sigmoid(logits)
        return bce + dice_loss(probs, targets, valid), pos, neg
    if cfg.binary_change_loss != "bce":
        raise ValueError(f"unknown binary change loss: {cfg.binary_change_loss!r}")
    return bce, pos, neg


def symmetry_change_loss(
    logits_fwd: torch.Tensor,
    logits_rev: torch.Tensor,
    change_target: torch.Tensor,
    cfg: LossConfig = LossConfig(),
) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    """Average of the binary change loss over both temporal orders.

    The target is the assigner output, which is the same for both orders
    (the assigner is symmetric), so the value is invariant under
    exchanging the pair's temporal direction.
    """
    if logits_rev is None:
        raise ValueError("symmetry loss needs reverse-order logits (train mode only)")
    valid = change_target != cfg.ignore_value
    target01 = torch.where(valid, change_target, torch.zeros_like(change_target))
    loss_fwd, pos_f, neg_f = _binary_change_term(logits_fwd, target01, valid, cfg)
    loss_rev, pos_r, neg_r = _binary_change_term(logits_rev, target01, valid, cfg)
    loss = 0.5 * (loss_fwd + loss_rev)
    parts = {
        "change_bce_pos": 0.5 * (pos_f + pos_r),
        "change_bce_neg": 0.5 * (neg_f + neg_r),
    }
    return loss, parts


def semantic_loss(
    semantic_logits: torch.Tensor, mask: torch.Tensor, cfg: LossConfig = LossConfig()
) -> torch.Tensor:
    """Semantic supervision for one temporal branch.

    Binary mode (``bce_plus_dice``): 1-channel logits vs a {0,1} mask.
    Multi-class mode (``cross_entropy``): C-channel logits vs class ids.
    """
    valid = mask != cfg.ignore_value
    if cfg.semantic_loss == "bce_plus_dice":
        if semantic_logits.shape[-3] != 1:
            raise ValueError("bce_plus_dice expects 1-channel semantic logits")
        logits = semantic_logits.squeeze(-3)
        target01 = torch.where(valid, mask, torch.zeros_like(mask))
        bce, _, _ = masked_bce_with_logits(logits, target01, valid)
        return bce + dice_loss(torch.sigmoid(logits), target01, valid)
    if cfg.semantic_loss == "cross_entropy":
        if not valid.any():
            return semantic_logits.sum() * 0.0
        return F.cross_entropy(semantic_logits, mask.long(), ignore_index=cfg.ignore_value)
    raise ValueError(f"unknown semantic loss: {cfg.semantic_loss!r}")


def total_loss(
    bundle, mask_a: torch.Tensor, mask_b: torch.Tensor, change_target: torch.Tensor,
    cfg: LossConfig = LossConfig(),
) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    """Unweighted sum of the segmentation and change terms.

    The segmentation term is the mean over the two temporal branches; the
    change term is the symmetric binary change loss. The returned
    breakdown carries every component for convergence diagnostics.
    """
    seg_a = semantic_loss(bundle.semantic_logits_a, mask_a, cfg)
    seg_b = semantic_loss(bundle.semantic_logits_b, mask_b, cfg)
    seg = 0.5 * (seg_a + seg_b)
    change, parts = symmetry_change_loss(
        bundle.change_logits_fwd.squeeze(-3),
        bundle.change_logits_rev.squeeze(-3) if bundle.change_logits_rev is not None else None,
        change_target,
        cfg,
    )
    total = seg + change
    breakdown = {
        "total": total,
        "seg": seg,
        "seg_a": seg_a,
        "seg_b": seg_b,
        "change": change,
        **parts,
    }
    return total, breakdown
