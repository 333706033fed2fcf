"""Channel feature prediction network and the pixel / detection losses.

The prediction head is a small fully convolutional network on the
aggregated activation map, upsampled to the raw image size. Pixel losses
are selected by the supervisor kind: class-balanced binary cross-entropy
for binary maps, per-pixel cross-entropy for integer-coded multi-class
maps, and MSE otherwise. The five-term total combines the pixel loss
with the four detection terms under non-negative weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import AggregatedActivationMap
from .channels import ChannelMap

PROB_EPS = 1e-7


@dataclass
class SupervisorMap:
    """Torch-side view of a channel map used as training supervision."""

    data: torch.Tensor  # (C, H, W)
    kind: str
    class_count: int | None = None

    @staticmethod
    def from_channel_map(cm: ChannelMap, dtype: torch.dtype = torch.float32) -> "SupervisorMap":
        return SupervisorMap(
            torch.from_numpy(np.ascontiguousarray(cm.data)).to(dtype),
            cm.kind,
            cm.class_count,
        )


@dataclass(frozen=True)
class LossWeights:
    """Weights for the four detection terms; the pixel term has weight 1."""

    rpn_cls: float = 1.0
    rpn_bbox: float = 1.0
    frcnn_cls: float = 1.0
    frcnn_bbox: float = 1.0

    def __post_init__(self):
        for name in ("rpn_cls", "rpn_bbox", "frcnn_cls", "frcnn_bbox"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {v}")


class ChannelFeatureNetwork(nn.Module):
    """Fully convolutional channel predictor: two 3x3 convolutions, bilinear
    upsampling to the raw image size, and a 1x1 per-pixel head. Binary
    outputs pass a logistic squash, multi-class a per-pixel softmax,
    regression stays raw."""

    def __init__(self, in_channels: int, kind: str, out_channels: int,
                 width: int = 32, generator: torch.Generator | None = None):
        super().__init__()
        if kind not in ("binary", "multiclass", "regression"):
            raise ValueError(f"unknown channel kind {kind!r}")
        if kind == "binary" and out_channels != 1:
            raise ValueError("binary channel prediction uses a single plane")
        self.kind = kind
        self.conv1 = nn.Conv2d(in_channels, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)
        self.head = nn.Conv2d(width, out_channels, 1)
        for conv in (self.conv1, self.conv2, self.head):
            fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
            with torch.no_grad():
                conv.weight.normal_(0.0, float(np.sqrt(2.0 / fan_in)), generator=generator)
                conv.bias.zero_()

    def forward(self, agg: AggregatedActivationMap | torch.Tensor,
                out_hw: tuple[int, int]) -> torch.Tensor:
        x = agg.data if isinstance(agg, AggregatedActivationMap) else agg
        x = x.unsqueeze(0)
        x = F.relu(self.conv1(x))
        x = F.relu(self.conv2(x))
        if x.shape[-2:] != tuple(out_hw):
            x = F.interpolate(x, size=tuple(out_hw), mode="bilinear", align_corners=False)
        x = self.head(x)[0]
        if self.kind == "binary":
            return torch.sigmoid(x)
        if self.kind == "multiclass":
            return F.softmax(x, dim=0)
        return x


def _check_same_shape(pred: torch.Tensor, target: torch.Tensor) -> None:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: prediction {tuple(pred.shape)} vs "
                         f"supervisor {tuple(target.shape)}")


def balanced_bce(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Class-balanced binary cross-entropy over a (C, H, W) probability map.

    Per channel, with n = H*W pixels and s = #{target > 0.5}: positive
    pixels weigh (1 - s/n) and negatives s/n; the channel loss is the
    mean over all pixels of the weighted cross-entropy, and channels are
    averaged. Predictions are clamped to [eps, 1-eps].
    """
    if pred.dim() == 2:
        pred = pred.unsqueeze(0)
    if target.dim() == 2:
        target = target.unsqueeze(0)
    _check_same_shape(pred, target)
    target = target.to(pred.dtype)
    n = target.shape[-2] * target.shape[-1]
    per_channel = []
    for c in range(target.shape[0]):
        t = target[c]
        q = torch.clamp(pred[c], PROB_EPS, 1.0 - PROB_EPS)
        pos = t > 0.5
        s_plus = pos.sum().to(pred.dtype)
        beta = torch.where(pos, 1.0 - s_plus / n, s_plus / n)
        ce = -(t * torch.log(q) + (1.0 - t) * torch.log(1.0 - q))
        per_channel.append((beta * ce).mean())
    return torch.stack(per_channel).mean()


def pixel_ce(pred: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean per-pixel -log p of the true class for a (K, H, W) distribution
    map against an (H, W) or (1, H, W) integer label map."""
    if labels.dim() == 3:
        if labels.shape[0] != 1:
            raise ValueError("label map must be a single plane of class codes")
        labels = labels[0]
    if pred.dim() != 3:
        raise ValueError("prediction must be (K, H, W)")
    if pred.shape[-2:] != labels.shape:
        raise ValueError(f"shape mismatch: prediction {tuple(pred.shape)} vs "
                         f"labels {tuple(labels.shape)}")
    codes = labels.long()
    k = pred.shape[0]
    if codes.min() < 0 or codes.max() >= k:
        raise ValueError(f"label codes must lie in [0, {k})")
    picked = pred.gather(0, codes.unsqueeze(0))[0]
    return -torch.log(torch.clamp(picked, min=PROB_EPS)).mean()


def pixel_mse(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared difference over all cells of same-shape maps."""
    _check_same_shape(pred, target)
    return ((pred - target.to(pred.dtype)) ** 2).mean()


def pixel_loss(pred: torch.Tensor, supervisor: SupervisorMap) -> torch.Tensor:
    """Dispatch the pixel loss on the supervisor kind."""
    if supervisor.kind == "binary":
        return balanced_bce(pred, supervisor.data)
    if supervisor.kind == "multiclass":
        return pixel_ce(pred, supervisor.data)
    return pixel_mse(pred, supervisor.data)


def total_loss(cfn, rpn_cls, rpn_bbox, frcnn_cls, frcnn_bbox,
               weights: LossWeights = LossWeights()):
    """cfn + w1*rpn_cls + w2*rpn_bbox + w3*frcnn_cls + w4*frcnn_bbox.

    Inactive terms are passed as 0; the result is affine in each term
    with coefficient exactly the matching weight.
    """
    return (
        cfn
        + weights.rpn_cls * rpn_cls
        + weights.rpn_bbox * rpn_bbox
        + weights.frcnn_cls * frcnn_cls
        + weights.frcnn_bbox * frcnn_bbox
    )


# ------------------------------------------------------- detection-side terms


def _zero_like_graph(t: torch.Tensor) -> torch.Tensor:
    # keeps the autograd graph alive when a term has no samples
    return t.sum() * 0.0


def rpn_class_loss(objectness_logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy over sampled anchors; labels are {1, 0, -1}
    with -1 ignored."""
    keep = labels >= 0
    if not torch.any(keep):
        return _zero_like_graph(objectness_logits)
    return F.binary_cross_entropy_with_logits(
        objectness_logits[keep], labels[keep].to(objectness_logits.dtype)
    )


def smooth_l1(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    diff = torch.abs(pred - target)
    return torch.where(diff < 1.0, 0.5 * diff**2, diff - 0.5)


def bbox_regression_loss(pred_deltas: torch.Tensor, target_deltas: torch.Tensor) -> torch.Tensor:
    """Smooth-L1 averaged over the coordinates of the given (positive) rows."""
    if pred_deltas.numel() == 0:
        return _zero_like_graph(pred_deltas)
    return smooth_l1(pred_deltas, target_deltas.to(pred_deltas.dtype)).mean()


def roi_class_loss(cls_logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Cross-entropy over sampled rois (labels 0 = background)."""
    if cls_logits.shape[0] == 0:
        return _zero_like_graph(cls_logits)
    return F.cross_entropy(cls_logits, labels.long())


def roi_bbox_loss(deltas: torch.Tensor, labels: torch.Tensor,
                  target_deltas: torch.Tensor) -> torch.Tensor:
    """Smooth-L1 on the true-class delta rows of positive rois.

    deltas: (M, K, 4); labels: (M,); target_deltas: (M, 4), meaningful on
    positives only.
    """
    pos = labels > 0
    if not torch.any(pos):
        return _zero_like_graph(deltas)
    idx = labels[pos].long()
    picked = deltas[pos, idx]
    return smooth_l1(picked, target_deltas[pos].to(deltas.dtype)).mean()
