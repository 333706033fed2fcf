"""Body network, multi-level activation-map aggregation, and the channel
side branch.

The body is a small VGG-style stack standing in for a pretrained trunk:
two 3x3 convolutions per stage with 2x2 max pools between stages. One
activation map is extracted per stage; the aggregation path projects
each to a common width with two 3x3 convolutions, bilinearly upsamples
everything to a target level's size, and concatenates. The side branch
embeds an input channel feature to a 128-channel stride-8 map for
concatenation with the final body map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .channels import ChannelMap, channel_to_network_input


@dataclass(frozen=True)
class BackboneConfig:
    stage_channels: tuple = (16, 32, 64, 64)
    stage_strides: tuple = (1, 2, 4, 8)
    branch_channels: int = 32
    aggregation_target_level: int = 0

    def __post_init__(self):
        if len(self.stage_channels) != len(self.stage_strides):
            raise ValueError("stage_channels and stage_strides must have equal length")
        if len(self.stage_strides) < 2:
            raise ValueError("need at least 2 stages")
        strides = self.stage_strides
        for s in strides:
            if s < 1 or (s & (s - 1)) != 0:
                raise ValueError("strides must be powers of 2")
        if any(b >= a for a, b in zip(strides[1:], strides[:-1])):
            raise ValueError("strides must be strictly increasing")
        if self.branch_channels < 1:
            raise ValueError("branch_channels must be >= 1")
        if not 0 <= self.aggregation_target_level < len(strides):
            raise ValueError("aggregation_target_level out of range")

    @property
    def levels(self) -> int:
        return len(self.stage_channels)

    @property
    def aggregated_channels(self) -> int:
        return self.levels * self.branch_channels


@dataclass
class ActivationMap:
    data: torch.Tensor  # (C, h, w)
    stride: int


@dataclass
class AggregatedActivationMap:
    data: torch.Tensor  # (levels * branch_channels, h, w)
    stride: int


def _conv_block(in_ch: int, out_ch: int, generator: torch.Generator | None) -> nn.Sequential:
    conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
    conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
    for conv in (conv1, conv2):
        fan_in = conv.in_channels * 9
        with torch.no_grad():
            conv.weight.normal_(0.0, float(np.sqrt(2.0 / fan_in)), generator=generator)
            conv.bias.zero_()
    return nn.Sequential(conv1, nn.ReLU(), conv2, nn.ReLU())


class BodyNetwork(nn.Module):
    """Stage-wise trunk; stands in for the pretrained body so stages use
    fan-in-scaled Gaussian init rather than the sigma=0.01 of new layers."""

    def __init__(self, config: BackboneConfig, in_channels: int = 3,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.config = config
        stages = []
        prev = in_channels
        for ch in config.stage_channels:
            stages.append(_conv_block(prev, ch, generator))
            prev = ch
        self.stages = nn.ModuleList(stages)

    def forward(self, image: torch.Tensor) -> list[ActivationMap]:
        """One activation map per stage for a (3, H, W) image in [0, 1]."""
        if image.dim() != 3:
            raise ValueError("image must be (C, H, W)")
        h, w = image.shape[-2:]
        largest = self.config.stage_strides[-1]
        if h % largest or w % largest:
            raise ValueError(f"image dims ({h}x{w}) must be divisible by stride {largest}")
        x = image.unsqueeze(0)
        maps = []
        strides = self.config.stage_strides
        for i, stage in enumerate(self.stages):
            ratio = strides[i] // (strides[i - 1] if i else 1)
            while ratio > 1:
                x = F.max_pool2d(x, 2)
                ratio //= 2
            x = stage(x)
            maps.append(ActivationMap(x[0], strides[i]))
        return maps


class AggregationNetwork(nn.Module):
    """Two 3x3 convolutions per level to a shared channel width, bilinear
    upsampling to the target level's size, concatenation in level order."""

    def __init__(self, config: BackboneConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.config = config
        self.branches = nn.ModuleList(
            _conv_block(ch, config.branch_channels, generator) for ch in config.stage_channels
        )

    def forward(self, maps: list[ActivationMap]) -> AggregatedActivationMap:
        if not maps:
            raise ValueError("aggregate_maps needs at least one activation map")
        if len({m.stride for m in maps}) != len(maps):
            raise ValueError("activation maps must have distinct strides")
        target = self.config.aggregation_target_level
        if target >= len(maps):
            raise ValueError("aggregation_target_level out of range for these maps")
        size = maps[target].data.shape[-2:]
        outs = []
        for branch, amap in zip(self.branches, maps):
            x = branch(amap.data.unsqueeze(0))
            if x.shape[-2:] != size:
                x = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
            outs.append(x[0])
        return AggregatedActivationMap(torch.cat(outs, dim=0), maps[target].stride)


class SideBranch(nn.Module):
    """Channel-feature embedding: 3x3 convolutions (padding 1, stride 1)
    interleaved with three 2x2/stride-2 max pools, producing a
    128-channel map at 1/8 input size. Two convolutions by default
    (layout conv-pool-conv-pool-pool); weights start from a zero-mean
    Gaussian (sigma 0.01) unless pretrained weights are loaded."""

    OUTPUT_STRIDE = 8

    def __init__(self, in_channels: int, conv_count: int = 2, out_channels: int = 128,
                 init_std: float = 0.01, generator: torch.Generator | None = None):
        super().__init__()
        if conv_count < 1:
            raise ValueError("side branch needs at least one convolution")
        self.out_channels = out_channels
        convs = []
        prev = in_channels
        for _ in range(conv_count):
            convs.append(nn.Conv2d(prev, out_channels, 3, padding=1))
            prev = out_channels
        self.convs = nn.ModuleList(convs)
        for conv in self.convs:
            with torch.no_grad():
                conv.weight.normal_(0.0, init_std, generator=generator)
                conv.bias.zero_()

    def forward(self, channel: ChannelMap | torch.Tensor) -> ActivationMap:
        if isinstance(channel, ChannelMap):
            x = torch.from_numpy(channel_to_network_input(channel))
        else:
            x = channel
        if x.dim() != 3:
            raise ValueError("side branch input must be (C, H, W)")
        h, w = x.shape[-2:]
        if h % self.OUTPUT_STRIDE or w % self.OUTPUT_STRIDE:
            raise ValueError(f"side branch input dims ({h}x{w}) must be divisible by 8")
        x = x.unsqueeze(0)
        pools_left = 3  # three 2x2 pools realize the fixed output stride of 8
        for conv in self.convs:
            x = F.relu(conv(x))
            if pools_left > 0:
                x = F.max_pool2d(x, 2)
                pools_left -= 1
        while pools_left > 0:
            x = F.max_pool2d(x, 2)
            pools_left -= 1
        return ActivationMap(x[0], self.OUTPUT_STRIDE)


def fuse_for_heads(
    body_last: ActivationMap,
    extra: ActivationMap | AggregatedActivationMap | None = None,
) -> ActivationMap:
    """Concatenate the final body map with an extra feature map, average
    pooling the extra map down to the body stride first. With no extra
    map this is the identity (the plain two-stage baseline)."""
    if extra is None:
        return body_last
    if body_last.stride % extra.stride:
        raise ValueError(
            f"extra stride {extra.stride} does not divide body stride {body_last.stride}"
        )
    x = extra.data
    ratio = body_last.stride // extra.stride
    if ratio > 1:
        x = F.avg_pool2d(x.unsqueeze(0), ratio)[0]
    if x.shape[-2:] != body_last.data.shape[-2:]:
        raise ValueError(
            f"incompatible spatial sizes after pooling: {tuple(x.shape[-2:])} vs "
            f"{tuple(body_last.data.shape[-2:])}"
        )
    return ActivationMap(torch.cat([body_last.data, x], dim=0), body_last.stride)
