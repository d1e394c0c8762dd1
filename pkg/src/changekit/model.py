"""Siamese change detector assembly and the post-classification baseline.

A weight-shared dense feature extractor is applied to both temporal
inputs, a per-pixel classifier produces per-time semantic logits, and the
change head classifies the feature pair. The same trained semantic path
also yields the deep post-classification comparison (DPCC) baseline:
predict both semantic maps independently and mark cells where they
disagree.
"""

from __future__ import annotations

from typing import Callable, Dict, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import IGNORE_VALUE, BinaryChangeMask, PredictionBundle
from .heads import ChangeHead, HeadConfig, _conv_bn_relu


class TinyBackbone(nn.Module):
    """Small built-in encoder-decoder: 3 down/up stages, output stride 4.

    Exists so the whole toolkit runs on CPU without pretrained weights;
    real segmentation backbones plug in through the registry.
    """

    def __init__(self, in_channels: int = 3, width: int = 16, out_channels: int = 32):
        super().__init__()
        w = width
        self.out_channels = out_channels
        self.output_stride = 4
        self.stem = _conv_bn_relu(in_channels, w, 3)
        self.down1 = nn.Sequential(nn.MaxPool2d(2), _conv_bn_relu(w, 2 * w, 3))
        self.down2 = nn.Sequential(nn.MaxPool2d(2), _conv_bn_relu(2 * w, 4 * w, 3))
        self.down3 = nn.Sequential(nn.MaxPool2d(2), _conv_bn_relu(4 * w, 8 * w, 3))
        self.up = _conv_bn_relu(8 * w, 4 * w, 3)
        self.fuse = _conv_bn_relu(8 * w, out_channels, 3)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.stem(x)
        d1 = self.down1(x)
        d2 = self.down2(d1)
        d3 = self.down3(d2)
        u = F.interpolate(self.up(d3), size=d2.shape[-2:], mode="bilinear", align_corners=False)
        return self.fuse(torch.cat([d2, u], dim=1))


BackboneFactory = Callable[..., nn.Module]
BACKBONES: Dict[str, BackboneFactory] = {}


def register_backbone(name: str, factory: BackboneFactory) -> None:
    BACKBONES[name] = factory


def build_backbone(name: str, **kwargs) -> nn.Module:
    if name not in BACKBONES:
        raise KeyError(f"unknown backbone {name!r}; registered: {sorted(BACKBONES)}")
    return BACKBONES[name](**kwargs)


register_backbone("tiny", TinyBackbone)


class ChangeDetector(nn.Module):
    """Shared-weight feature extractor + semantic classifier + change head.

    ``num_classes == 1`` selects binary object mode (sigmoid semantics);
    larger values select multi-class mode (softmax semantics).
    """

    def __init__(self, backbone: nn.Module, num_classes: int, head_cfg: HeadConfig | None = None):
        super().__init__()
        if num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        self.backbone = backbone
        self.num_classes = num_classes
        self.semantic_head = nn.Conv2d(backbone.out_channels, num_classes, 1)
        if head_cfg is None:
            head_cfg = HeadConfig(
                in_channels=backbone.out_channels,
                upsample_scale=backbone.output_stride,
            )
        self.change_head = ChangeHead(head_cfg)
        self.output_stride = backbone.output_stride

    def extract(self, image: torch.Tensor) -> torch.Tensor:
        return self.backbone(image)

    def _semantic_logits(self, features: torch.Tensor) -> torch.Tensor:
        logits = self.semantic_head(features)
        if self.output_stride > 1:
            logits = F.interpolate(
                logits, scale_factor=self.output_stride, mode="bilinear", align_corners=False
            )
        return logits

    def forward_pair(
        self, image_a: torch.Tensor, image_b: torch.Tensor, mode: str = "train"
    ) -> PredictionBundle:
        """Full bundle for a batched image pair ``(B, C, H, W)``."""
        if image_a.shape != image_b.shape:
            raise ValueError(
                f"image shapes differ: {tuple(image_a.shape)} vs {tuple(image_b.shape)}"
            )
        feats_a = self.extract(image_a)
        feats_b = self.extract(image_b)
        change = self.change_head(feats_a, feats_b, mode=mode)
        return PredictionBundle(
            semantic_logits_a=self._semantic_logits(feats_a),
            semantic_logits_b=self._semantic_logits(feats_b),
            change_logits_fwd=change[0],
            change_logits_rev=change[1] if mode == "train" else None,
        )

    forward = forward_pair

    def _class_map(self, semantic_logits: torch.Tensor, threshold: float) -> torch.Tensor:
        if self.num_classes == 1:
            return (torch.sigmoid(semantic_logits[:, 0]) > threshold).long()
        return semantic_logits.argmax(dim=1)

    @torch.no_grad()
    def dpcc_predict(
        self, image_a: torch.Tensor, image_b: torch.Tensor, threshold: float = 0.5
    ) -> BinaryChangeMask:
        """Post-classification comparison: inequality of the two class maps."""
        if self.num_classes == 1 and not 0.0 < threshold < 1.0:
            raise ValueError(f"threshold must be in (0, 1), got {threshold}")
        bundle = self.forward_pair(_batched(image_a), _batched(image_b), mode="infer")
        map_a = self._class_map(bundle.semantic_logits_a, threshold)
        map_b = self._class_map(bundle.semantic_logits_b, threshold)
        values = (map_a != map_b).to(torch.uint8)[0].cpu().numpy()
        return BinaryChangeMask(values, IGNORE_VALUE)

    @torch.no_grad()
    def predict_change(
        self, image_a: torch.Tensor, image_b: torch.Tensor, threshold: float = 0.5
    ) -> BinaryChangeMask:
        """Binary change map from the change head."""
        bundle = self.forward_pair(_batched(image_a), _batched(image_b), mode="infer")
        prob = torch.sigmoid(bundle.change_logits_fwd[:, 0])
        values = (prob > threshold).to(torch.uint8)[0].cpu().numpy()
        return BinaryChangeMask(values, IGNORE_VALUE)

    @torch.no_grad()
    def predict_semantic_change(
        self, image_a: torch.Tensor, image_b: torch.Tensor, threshold: float = 0.5
    ) -> Tuple[np.ndarray, np.ndarray, BinaryChangeMask]:
        """Decoupled "from-to" readout: per-time class maps + binary change.

        The heads are decoupled: a changed cell may carry an identical
        (from, to) class pair if the semantic maps happen to agree there;
        consistency is measured by the metrics, not forced here.
        """
        if self.num_classes == 1:
            raise ValueError("semantic-change readout requires a multi-class model")
        bundle = self.forward_pair(_batched(image_a), _batched(image_b), mode="infer")
        map_a = bundle.semantic_logits_a.argmax(dim=1)[0].cpu().numpy()
        map_b = bundle.semantic_logits_b.argmax(dim=1)[0].cpu().numpy()
        prob = torch.sigmoid(bundle.change_logits_fwd[:, 0])
        change = BinaryChangeMask(
            (prob > threshold).to(torch.uint8)[0].cpu().numpy(), IGNORE_VALUE
        )
        return map_a, map_b, change


def _batched(image: torch.Tensor) -> torch.Tensor:
    return image.unsqueeze(0) if image.dim() == 3 else image
