"""Change-classification heads on top of Siamese feature pairs.

Two symmetry mechanisms are combined:

* swap branch (implicit): bitemporal features are channel-concatenated in
  both temporal orders and classified by one weight-shared small FCN, so
  the loss can penalize order-dependent predictions;
* difference branch (explicit): the parameter-free absolute difference of
  the features, projected by a small FCN, is added residually to the swap
  branch features, giving the classifier an order-invariant starting
  point.

In training mode the head emits logits for both temporal orders; in
inference mode only the first order is classified.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class HeadConfig:
    in_channels: int
    n_conv_layers: int = 4
    conv_channels: int = 16
    upsample_scale: int = 4
    difference_branch: bool = True
    aggregation: Literal["abs_diff", "product"] = "abs_diff"

    def __post_init__(self):
        if self.n_conv_layers < 1 or self.conv_channels < 1:
            raise ValueError("n_conv_layers and conv_channels must be positive")
        if self.upsample_scale < 1:
            raise ValueError("upsample_scale must be positive")


def temporal_swap(x_t: torch.Tensor, x_t1: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Concatenate a feature pair along channels in both temporal orders."""
    if x_t.shape != x_t1.shape:
        raise ValueError(f"feature shapes differ: {tuple(x_t.shape)} vs {tuple(x_t1.shape)}")
    return torch.cat([x_t, x_t1], dim=-3), torch.cat([x_t1, x_t], dim=-3)


def temporal_difference(
    x_t: torch.Tensor, x_t1: torch.Tensor, aggregation: str = "abs_diff"
) -> torch.Tensor:
    """Parameter-free symmetric aggregation; bit-exact under argument swap."""
    if x_t.shape != x_t1.shape:
        raise ValueError(f"feature shapes differ: {tuple(x_t.shape)} vs {tuple(x_t1.shape)}")
    if aggregation == "abs_diff":
        return (x_t - x_t1).abs()
    if aggregation == "product":
        return x_t * x_t1
    raise ValueError(f"unknown aggregation: {aggregation!r}")


def _conv_bn_relu(in_ch: int, out_ch: int, kernel: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel, padding=kernel // 2, bias=False),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


class ChangeHead(nn.Module):
    """Swap-branch change head with an optional residual difference branch.

    With ``difference_branch=False`` this is the plain swap head; enabling
    it adds the projected feature difference to the pre-classifier
    features of each temporal order (the difference term is identical for
    both orders, so swapping the inputs exchanges the two outputs
    bit-exactly).
    """

    def __init__(self, cfg: HeadConfig):
        super().__init__()
        self.cfg = cfg
        layers = [_conv_bn_relu(2 * cfg.in_channels, cfg.conv_channels, 3)]
        for _ in range(cfg.n_conv_layers - 1):
            layers.append(_conv_bn_relu(cfg.conv_channels, cfg.conv_channels, 3))
        self.fcn = nn.Sequential(*layers)
        self.projector = (
            _conv_bn_relu(cfg.in_channels, cfg.conv_channels, 1)
            if cfg.difference_branch
            else None
        )
        self.classifier = nn.Conv2d(cfg.conv_channels, 1, 1)

    def _classify(self, features: torch.Tensor) -> torch.Tensor:
        logits = self.classifier(features)
        if self.cfg.upsample_scale > 1:
            logits = F.interpolate(
                logits,
                scale_factor=self.cfg.upsample_scale,
                mode="bilinear",
                align_corners=False,
            )
        return logits

    def forward(
        self, x_t: torch.Tensor, x_t1: torch.Tensor, mode: str = "train"
    ) -> Tuple[torch.Tensor, ...]:
        """Change logits for a feature pair.

        Returns ``(fwd, rev)`` in train mode and ``(fwd,)`` in infer mode.
        Accepts ``(B, C, h, w)`` feature maps.
        """
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        if x_t.shape[-3] != self.cfg.in_channels:
            raise ValueError(
                f"expected {self.cfg.in_channels} feature channels, got {x_t.shape[-3]}"
            )
        cat_fwd, cat_rev = temporal_swap(x_t, x_t1)

        residual = None
        if self.projector is not None:
            diff = temporal_difference(x_t, x_t1, self.cfg.aggregation)
            residual = self.projector(diff)

        feats_fwd = self.fcn(cat_fwd)
        if residual is not None:
            feats_fwd = feats_fwd + residual
        out = [self._classify(feats_fwd)]

        if mode == "train":
            feats_rev = self.fcn(cat_rev)
            if residual is not None:
                feats_rev = feats_rev + residual
            out.append(self._classify(feats_rev))
        return tuple(out)
