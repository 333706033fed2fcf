"""Full detector assembly for the four experiment modes.

baseline:          body -> RPN/FRCNN on the final body map.
side_branch:       a channel feature is embedded by the side branch and
                   concatenated with the final body map (channel input is
                   required at inference).
hyperlearner:      body + aggregated activation map + channel prediction
                   head trained as auxiliary supervision; the heads
                   consume the body map fused with the (pooled)
                   aggregated map. No extra input at inference.
hypernet_control:  like hyperlearner but without the channel prediction
                   head (aggregation only, no extra supervision).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .backbone import (
    ActivationMap,
    AggregatedActivationMap,
    AggregationNetwork,
    BackboneConfig,
    BodyNetwork,
    SideBranch,
    fuse_for_heads,
)
from .cfn_losses import ChannelFeatureNetwork
from .channels import CHANNEL_CATALOG, ChannelMap, channel_to_network_input
from .heads import (
    AnchorConfig,
    Box,
    Detection,
    FRCNNHead,
    RPNHead,
    clip_boxes,
    decode_boxes,
    generate_anchors,
    generate_proposals,
    inside_image_mask,
    nms_arrays,
    roi_pool,
)

MODES = ("baseline", "side_branch", "hyperlearner", "hypernet_control")

PARAM_GROUPS = ("body-pretrained", "aggregation-branches", "cfn", "rpn", "frcnn", "side-branch")


@dataclass(frozen=True)
class DetectorConfig:
    mode: str = "baseline"
    channel_kind: str | None = None
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    anchors: AnchorConfig | None = None
    side_branch_convs: int = 2
    side_branch_channels: int = 128
    rpn_mid_channels: int = 64
    frcnn_fc_width: int = 256
    cfn_width: int = 32
    class_count: int = 3  # background, pedestrian, cyclist
    init_seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode in ("side_branch", "hyperlearner") and self.channel_kind is None:
            raise ValueError(f"mode {self.mode} requires a channel kind")
        if self.mode == "hypernet_control" and self.channel_kind is not None:
            raise ValueError("hypernet_control mode takes no channel kind")
        if self.channel_kind is not None and self.channel_kind not in CHANNEL_CATALOG:
            raise ValueError(f"unknown channel kind {self.channel_kind!r}")


@dataclass(frozen=True)
class DetectConfig:
    score_floor: float = 0.05
    nms_thresh: float = 0.5
    proposal_count: int = 100
    proposal_nms_thresh: float = 0.7
    pre_nms_top_n: int = 2000
    min_size: float = 4.0
    max_detections: int = 100


def _channel_input_planes(kind: str) -> int:
    k, channels, class_count = CHANNEL_CATALOG[kind]
    if k == "multiclass":
        return class_count
    return channels


class Detector(nn.Module):
    """Mode-dependent assembly of body, aggregation, side branch, channel
    prediction head, RPN and FRCNN, with named parameter groups for the
    staged trainer."""

    def __init__(self, config: DetectorConfig):
        super().__init__()
        self.config = config
        bb = config.backbone
        gen = torch.Generator().manual_seed(config.init_seed)
        self.body = BodyNetwork(bb, generator=gen)
        self.aggregation = None
        self.side_branch = None
        self.cfn = None

        head_in = bb.stage_channels[-1]
        if config.mode in ("hyperlearner", "hypernet_control"):
            self.aggregation = AggregationNetwork(bb, generator=gen)
            head_in += bb.aggregated_channels
        if config.mode == "side_branch":
            self.side_branch = SideBranch(
                _channel_input_planes(config.channel_kind),
                conv_count=config.side_branch_convs,
                out_channels=config.side_branch_channels,
                generator=gen,
            )
            head_in += config.side_branch_channels
        if config.mode == "hyperlearner":
            kind, channels, class_count = CHANNEL_CATALOG[config.channel_kind]
            out_ch = class_count if kind == "multiclass" else channels
            self.cfn = ChannelFeatureNetwork(
                bb.aggregated_channels, kind, out_ch, width=config.cfn_width, generator=gen
            )

        anchors = config.anchors or AnchorConfig(stride=bb.stage_strides[-1])
        if anchors.stride != bb.stage_strides[-1]:
            raise ValueError("anchor stride must equal the final body stride")
        self.anchor_config = anchors
        self.rpn = RPNHead(head_in, anchors.anchors_per_cell,
                           mid_channels=config.rpn_mid_channels, generator=gen)
        self.frcnn = FRCNNHead(head_in, fc_width=config.frcnn_fc_width,
                               class_count=config.class_count, generator=gen)

    # ------------------------------------------------------------- plumbing

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        groups = {name: [] for name in PARAM_GROUPS}
        groups["body-pretrained"] = list(self.body.parameters())
        if self.aggregation is not None:
            groups["aggregation-branches"] = list(self.aggregation.parameters())
        if self.cfn is not None:
            groups["cfn"] = list(self.cfn.parameters())
        if self.side_branch is not None:
            groups["side-branch"] = list(self.side_branch.parameters())
        groups["rpn"] = list(self.rpn.parameters())
        groups["frcnn"] = list(self.frcnn.parameters())
        return {name: params for name, params in groups.items() if params}

    def named_parameter_groups(self) -> dict[str, str]:
        """Map of parameter name -> group id."""
        prefix_group = {
            "body.": "body-pretrained",
            "aggregation.": "aggregation-branches",
            "cfn.": "cfn",
            "side_branch.": "side-branch",
            "rpn.": "rpn",
            "frcnn.": "frcnn",
        }
        out = {}
        for name, _ in self.named_parameters():
            for prefix, group in prefix_group.items():
                if name.startswith(prefix):
                    out[name] = group
                    break
        return out

    # ------------------------------------------------------------- forward

    def image_to_tensor(self, image: np.ndarray) -> torch.Tensor:
        return torch.from_numpy(np.ascontiguousarray(image)).float()

    def channel_input_tensor(self, channel: ChannelMap) -> torch.Tensor:
        return torch.from_numpy(channel_to_network_input(channel)).float()

    def forward_features(
        self,
        image: torch.Tensor,
        channel_input: torch.Tensor | None = None,
        body_grad: bool = True,
        extra_grad: bool = True,
    ):
        """Run the trunk: returns (fused map for the heads, aggregated map
        or None). Gradients through the body / extra paths can be cut for
        stages that freeze them."""
        with torch.set_grad_enabled(body_grad):
            maps = self.body(image)
        if not body_grad:
            maps = [ActivationMap(m.data.detach(), m.stride) for m in maps]
        body_last = maps[-1]

        extra = None
        agg = None
        if self.aggregation is not None:
            with torch.set_grad_enabled(extra_grad or body_grad):
                agg = self.aggregation(maps)
            if not (extra_grad or body_grad):
                agg = AggregatedActivationMap(agg.data.detach(), agg.stride)
            extra = agg
        elif self.side_branch is not None:
            if channel_input is None:
                raise ValueError("side_branch mode requires a channel input")
            with torch.set_grad_enabled(extra_grad):
                sb = self.side_branch(channel_input)
            if not extra_grad:
                sb = ActivationMap(sb.data.detach(), sb.stride)
            extra = sb
        fused = fuse_for_heads(body_last, extra)
        return fused, agg

    def predict_channel(self, agg: AggregatedActivationMap, out_hw) -> torch.Tensor:
        if self.cfn is None:
            raise ValueError("this mode has no channel prediction head")
        return self.cfn(agg, out_hw)

    # ------------------------------------------------------------ inference

    def detect(
        self,
        image: np.ndarray,
        channel: ChannelMap | None = None,
        det_cfg: DetectConfig = DetectConfig(),
    ) -> list[Detection]:
        """Full two-stage inference on a (3, H, W) image in [0, 1]."""
        h, w = image.shape[-2:]
        with torch.no_grad():
            image_t = self.image_to_tensor(image)
            channel_t = self.channel_input_tensor(channel) if channel is not None else None
            fused, _ = self.forward_features(image_t, channel_t)
            obj, deltas = self.rpn(fused.data)
            mh, mw = fused.data.shape[-2:]
            anchors = generate_anchors(self.anchor_config, mh, mw)
            inside = inside_image_mask(anchors, (h, w))
            proposals, _ = generate_proposals(
                torch.sigmoid(obj).numpy()[inside],
                deltas.numpy()[inside],
                anchors[inside],
                (h, w),
                pre_nms_top_n=det_cfg.pre_nms_top_n,
                post_nms_top_n=det_cfg.proposal_count,
                nms_thresh=det_cfg.proposal_nms_thresh,
                min_size=det_cfg.min_size,
            )
            if proposals.shape[0] == 0:
                return []
            blocks = roi_pool(fused.data, proposals, fused.stride)
            logits, roi_deltas = self.frcnn(blocks)
            scores = self.frcnn.class_scores(logits).numpy()
            roi_deltas = roi_deltas.numpy()

        detections: list[Detection] = []
        for cls in range(1, self.config.class_count):
            cls_scores = scores[:, cls]
            keep = cls_scores >= det_cfg.score_floor
            if not keep.any():
                continue
            boxes = decode_boxes(roi_deltas[keep, cls], proposals[keep])
            boxes = clip_boxes(boxes, (h, w))
            sizes_ok = (boxes[:, 2] - boxes[:, 0] > 1e-3) & (boxes[:, 3] - boxes[:, 1] > 1e-3)
            boxes, cls_kept = boxes[sizes_ok], cls_scores[keep][sizes_ok]
            if boxes.shape[0] == 0:
                continue
            for idx in nms_arrays(boxes, cls_kept, det_cfg.nms_thresh):
                detections.append(
                    Detection(Box.from_array(boxes[idx]), float(np.clip(cls_kept[idx], 0, 1)), cls)
                )
        detections.sort(key=lambda d: -d.score)
        return detections[: det_cfg.max_detections]
