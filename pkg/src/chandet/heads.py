"""Proposal and detection heads: anchors, box coding, target assignment,
NMS, RoI pooling, and the RPN / region-classification networks.

Box geometry uses the corner convention (x1, y1, x2, y2) with area
(x2-x1)*(y2-y1). Array-level helpers operate on (N, 4) float arrays in
that convention; anchor/proposal machinery is numpy, the two head
networks are torch modules.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

BACKGROUND = 0
PEDESTRIAN = 1
CYCLIST = 2
CLASS_NAMES = {PEDESTRIAN: "Pedestrian", CYCLIST: "Cyclist"}
CLASS_IDS = {name: cid for cid, name in CLASS_NAMES.items()}

DEFAULT_ANCHOR_SCALES = (16.0, 28.0, 48.0, 84.0, 144.0)
DEFAULT_ANCHOR_RATIOS = (0.25, 0.35, 0.41, 0.5, 0.7, 1.0, 1.4)


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError(f"box coordinates must be finite, got {vals}")
        if self.x2 <= self.x1 or self.y2 <= self.y1:
            raise ValueError(f"degenerate box {vals}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    @staticmethod
    def from_array(arr) -> "Box":
        x1, y1, x2, y2 = (float(v) for v in arr)
        return Box(x1, y1, x2, y2)


@dataclass(frozen=True)
class Detection:
    box: Box
    score: float
    class_id: int

    def __post_init__(self):
        if not np.isfinite(self.score) or not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score must be finite in [0,1], got {self.score}")


@dataclass(frozen=True)
class AnchorConfig:
    """Anchor lattice: `scales` are box heights in pixels, `ratios` are
    width/height ratios; defaults give 35 anchors per feature cell."""

    scales: tuple = DEFAULT_ANCHOR_SCALES
    ratios: tuple = DEFAULT_ANCHOR_RATIOS
    stride: int = 8

    def __post_init__(self):
        if not self.scales or not self.ratios:
            raise ValueError("scales and ratios must be non-empty")
        if any(s <= 0 for s in self.scales) or any(r <= 0 for r in self.ratios):
            raise ValueError("scales and ratios must be positive")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")

    @property
    def anchors_per_cell(self) -> int:
        return len(self.scales) * len(self.ratios)


def generate_anchors(cfg: AnchorConfig, map_h: int, map_w: int) -> np.ndarray:
    """All anchors for a map_h x map_w feature map as an (N, 4) array.

    Anchors are centered at ((j+0.5)*stride, (i+0.5)*stride); the anchor
    for (scale s, ratio r) is s*r wide and s tall. Ordering is cell-major
    (row-major cells), then scale-major, then ratio, matching the head
    networks' output layout.
    """
    if map_h < 1 or map_w < 1:
        raise ValueError("feature map dims must be >= 1")
    s = float(cfg.stride)
    cy = (np.arange(map_h) + 0.5) * s
    cx = (np.arange(map_w) + 0.5) * s
    scales = np.asarray(cfg.scales, dtype=np.float64)
    ratios = np.asarray(cfg.ratios, dtype=np.float64)
    heights = np.repeat(scales, len(ratios))
    widths = heights * np.tile(ratios, len(scales))

    cxg, cyg = np.meshgrid(cx, cy)  # (H, W)
    centers = np.stack([cxg.ravel(), cyg.ravel()], axis=1)  # cell-major
    n_cells = centers.shape[0]
    a = len(heights)
    out = np.empty((n_cells * a, 4), dtype=np.float64)
    ctr = np.repeat(centers, a, axis=0)
    hw = np.tile(np.stack([widths, heights], axis=1), (n_cells, 1))
    out[:, 0] = ctr[:, 0] - hw[:, 0] / 2
    out[:, 1] = ctr[:, 1] - hw[:, 1] / 2
    out[:, 2] = ctr[:, 0] + hw[:, 0] / 2
    out[:, 3] = ctr[:, 1] + hw[:, 1] / 2
    return out


def _centers_sizes(boxes: np.ndarray):
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    cx = boxes[:, 0] + w / 2
    cy = boxes[:, 1] + h / 2
    return cx, cy, w, h


def encode_boxes(gt: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Regression targets t = ((cx-cxa)/wa, (cy-cya)/ha, log(w/wa), log(h/ha))."""
    gt = np.asarray(gt, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    gx, gy, gw, gh = _centers_sizes(gt)
    ax, ay, aw, ah = _centers_sizes(anchors)
    if np.any(gw <= 0) or np.any(gh <= 0) or np.any(aw <= 0) or np.any(ah <= 0):
        raise ValueError("boxes must have positive width and height")
    return np.stack([(gx - ax) / aw, (gy - ay) / ah, np.log(gw / aw), np.log(gh / ah)], axis=1)


def decode_boxes(deltas: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Exact inverse of encode_boxes."""
    deltas = np.asarray(deltas, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    ax, ay, aw, ah = _centers_sizes(anchors)
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise ValueError("anchors must have positive width and height")
    cx = deltas[:, 0] * aw + ax
    cy = deltas[:, 1] * ah + ay
    w = np.exp(deltas[:, 2]) * aw
    h = np.exp(deltas[:, 3]) * ah
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


def encode_box(gt: Box, anchor: Box) -> np.ndarray:
    return encode_boxes(gt.as_array()[None], anchor.as_array()[None])[0]


def decode_box(delta: np.ndarray, anchor: Box) -> Box:
    return Box.from_array(decode_boxes(np.asarray(delta)[None], anchor.as_array()[None])[0])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of two (N,4) / (M,4) box arrays -> (N, M)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        return np.zeros((a.shape[0], b.shape[0]))
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    iw = np.clip(ix2 - ix1, 0.0, None)
    ih = np.clip(iy2 - iy1, 0.0, None)
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def assign_rpn_targets(
    anchors: np.ndarray,
    gt_boxes: np.ndarray,
    pos_iou: float = 0.7,
    neg_iou: float = 0.3,
    ignore_boxes: np.ndarray | None = None,
):
    """RPN anchor labels and regression targets.

    Label 1 for anchors with IoU >= pos_iou against some ground truth or
    that are the best anchor for a ground truth (so every GT receives at
    least one positive); 0 where max IoU < neg_iou; -1 (ignored)
    otherwise. Anchors overlapping an ignore box with IoU >= neg_iou are
    also -1 unless already positive. Callers pass inside-image anchors.

    Returns (labels (N,), targets (N,4)); targets are set on positives.
    """
    anchors = np.asarray(anchors, dtype=np.float64)
    n = anchors.shape[0]
    labels = np.full(n, -1, dtype=np.int8)
    targets = np.zeros((n, 4), dtype=np.float64)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if gt_boxes.shape[0] == 0:
        labels[:] = 0
        if ignore_boxes is not None and len(ignore_boxes):
            iou_ign = iou_matrix(anchors, np.asarray(ignore_boxes)).max(axis=1)
            labels[iou_ign >= neg_iou] = -1
        return labels, targets

    ious = iou_matrix(anchors, gt_boxes)
    anchor_max = ious.max(axis=1)
    anchor_arg = ious.argmax(axis=1)

    labels[anchor_max < neg_iou] = 0
    if ignore_boxes is not None and len(ignore_boxes):
        iou_ign = iou_matrix(anchors, np.asarray(ignore_boxes)).max(axis=1)
        labels[(iou_ign >= neg_iou) & (labels == 0)] = -1
    labels[anchor_max >= pos_iou] = 1
    # argmax rule: the best anchor(s) for each GT are positive regardless
    gt_max = ious.max(axis=0)
    best_mask = (ious >= gt_max[None, :] - 1e-9) & (gt_max[None, :] > 0)
    labels[best_mask.any(axis=1)] = 1

    pos = labels == 1
    if pos.any():
        targets[pos] = encode_boxes(gt_boxes[anchor_arg[pos]], anchors[pos])
    return labels, targets


def nms_arrays(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float) -> list[int]:
    """Greedy descending-score suppression; ties broken by lower index.
    Returns kept indices sorted by score descending."""
    boxes = np.asarray(boxes, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if boxes.shape[0] == 0:
        return []
    order = np.argsort(-scores, kind="stable")
    keep: list[int] = []
    suppressed = np.zeros(len(order), dtype=bool)
    for pos, idx in enumerate(order):
        if suppressed[pos]:
            continue
        keep.append(int(idx))
        rest = order[pos + 1 :]
        if rest.size == 0:
            break
        ious = iou_matrix(boxes[idx][None], boxes[rest])[0]
        suppressed[pos + 1 :] |= ious > iou_thresh
    return keep


def nms(dets, iou_thresh: float) -> list[int]:
    """NMS over a sequence of Detection objects; see nms_arrays."""
    if not dets:
        return []
    boxes = np.stack([d.box.as_array() for d in dets])
    scores = np.array([d.score for d in dets], dtype=np.float64)
    return nms_arrays(boxes, scores, iou_thresh)


def inside_image_mask(anchors: np.ndarray, image_hw: tuple[int, int]) -> np.ndarray:
    """Anchors lying fully inside the image; the training distribution, and
    therefore also the proposal-time anchor set."""
    h, w = image_hw
    a = np.asarray(anchors)
    return (a[:, 0] >= 0) & (a[:, 1] >= 0) & (a[:, 2] <= w) & (a[:, 3] <= h)


def clip_boxes(boxes: np.ndarray, image_hw: tuple[int, int]) -> np.ndarray:
    h, w = image_hw
    out = np.asarray(boxes, dtype=np.float64).copy()
    out[:, 0] = np.clip(out[:, 0], 0, w)
    out[:, 2] = np.clip(out[:, 2], 0, w)
    out[:, 1] = np.clip(out[:, 1], 0, h)
    out[:, 3] = np.clip(out[:, 3], 0, h)
    return out


def generate_proposals(
    objectness: np.ndarray,
    deltas: np.ndarray,
    anchors: np.ndarray,
    image_hw: tuple[int, int],
    pre_nms_top_n: int = 2000,
    post_nms_top_n: int = 300,
    nms_thresh: float = 0.7,
    min_size: float = 4.0,
):
    """Decode -> clip -> size filter -> top-k -> NMS -> top-k.

    Returns (boxes (M,4), scores (M,)) with M <= post_nms_top_n; no box
    leaves the image or falls below min_size in either dimension.
    """
    objectness = np.asarray(objectness, dtype=np.float64).ravel()
    if objectness.shape[0] != np.asarray(anchors).shape[0]:
        raise ValueError("objectness length must match anchor count")
    boxes = decode_boxes(deltas, anchors)
    boxes = clip_boxes(boxes, image_hw)
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    valid = (w >= min_size) & (h >= min_size)
    boxes = boxes[valid]
    scores = objectness[valid]
    if boxes.shape[0] == 0:
        return boxes, scores
    order = np.argsort(-scores, kind="stable")[:pre_nms_top_n]
    boxes, scores = boxes[order], scores[order]
    keep = nms_arrays(boxes, scores, nms_thresh)[:post_nms_top_n]
    return boxes[keep], scores[keep]


def roi_pool(
    features: torch.Tensor, rois: np.ndarray, stride: int, out_size: int = 7
) -> torch.Tensor:
    """Max RoI pooling of image-coordinate rois over a (C, h, w) feature map.

    Each roi is mapped to feature cells via floor/ceil of its corners,
    then partitioned into an out_size x out_size grid with a max in each
    bin; bins that would be empty take the nearest valid cell's value.
    Differentiable w.r.t. `features`. Returns (M, C, out_size, out_size).
    """
    if features.dim() != 3:
        raise ValueError("features must be (C, h, w)")
    _, fh, fw = features.shape
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    blocks = []
    for x1, y1, x2, y2 in rois:
        ix1 = min(max(int(np.floor(x1 / stride)), 0), fw - 1)
        iy1 = min(max(int(np.floor(y1 / stride)), 0), fh - 1)
        ix2 = min(max(int(np.ceil(x2 / stride)), ix1 + 1), fw)
        iy2 = min(max(int(np.ceil(y2 / stride)), iy1 + 1), fh)
        patch = features[:, iy1:iy2, ix1:ix2]
        blocks.append(F.adaptive_max_pool2d(patch.unsqueeze(0), out_size).squeeze(0))
    if not blocks:
        return features.new_zeros((0, features.shape[0], out_size, out_size))
    return torch.stack(blocks)


def _init_gaussian(module: nn.Module, std: float, generator: torch.Generator | None):
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            with torch.no_grad():
                m.weight.normal_(0.0, std, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()


class RPNHead(nn.Module):
    """3x3 conv trunk with 1x1 objectness and box-delta heads.

    forward() takes a (C, h, w) feature map and returns per-anchor
    objectness logits (N,) and deltas (N, 4) in the anchor ordering of
    generate_anchors (cell-major, then anchor index).
    """

    def __init__(
        self,
        in_channels: int,
        anchors_per_cell: int,
        mid_channels: int = 64,
        init_std: float = 0.01,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        self.anchors_per_cell = anchors_per_cell
        self.conv = nn.Conv2d(in_channels, mid_channels, 3, padding=1)
        self.objectness = nn.Conv2d(mid_channels, anchors_per_cell, 1)
        self.deltas = nn.Conv2d(mid_channels, anchors_per_cell * 4, 1)
        _init_gaussian(self, init_std, generator)

    def forward(self, x: torch.Tensor):
        h = F.relu(self.conv(x.unsqueeze(0)))
        obj = self.objectness(h)[0]
        del_ = self.deltas(h)[0]
        a = self.anchors_per_cell
        obj = obj.permute(1, 2, 0).reshape(-1)
        del_ = del_.reshape(a, 4, *del_.shape[-2:]).permute(2, 3, 0, 1).reshape(-1, 4)
        return obj, del_


class FRCNNHead(nn.Module):
    """Two fully connected layers over pooled RoI blocks with class and
    per-class box-delta outputs (background + pedestrian + cyclist)."""

    def __init__(
        self,
        in_channels: int,
        pooled_size: int = 7,
        fc_width: int = 256,
        class_count: int = 3,
        init_std: float = 0.01,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        self.class_count = class_count
        flat = in_channels * pooled_size * pooled_size
        self.fc1 = nn.Linear(flat, fc_width)
        self.fc2 = nn.Linear(fc_width, fc_width)
        self.cls = nn.Linear(fc_width, class_count)
        self.bbox = nn.Linear(fc_width, class_count * 4)
        _init_gaussian(self, init_std, generator)

    def forward(self, blocks: torch.Tensor):
        x = blocks.flatten(1)
        x = F.relu(self.fc1(x))
        x = F.relu(self.fc2(x))
        logits = self.cls(x)
        deltas = self.bbox(x).reshape(-1, self.class_count, 4)
        return logits, deltas

    @staticmethod
    def class_scores(logits: torch.Tensor) -> torch.Tensor:
        return F.softmax(logits, dim=1)
