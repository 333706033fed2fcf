"""Experiment configuration: a flat key-value file with dotted sections.

Lines are `key = value`; `#` starts a comment. Values are whitespace
separated tokens, each parsed as int, float, bool, or string; multiple
tokens form a list. Unknown keys are rejected. Every key has a default,
documented in DEFAULTS below and in the README.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import BackboneConfig
from .detector import DetectorConfig, MODES
from .heads import AnchorConfig, DEFAULT_ANCHOR_RATIOS, DEFAULT_ANCHOR_SCALES
from .synthworld import SceneConfig
from .trainer import StagePlanOptions, TrainOptions


class ConfigError(ValueError):
    """Invalid configuration file or values."""


DEFAULTS = {
    # experiment
    "mode": "baseline",  # baseline | side_branch | hyperlearner | hypernet_control
    "channel": None,  # icf | edge | segmentation | heatmap | disparity | flow | raw-image
    "seed": 0,
    # scene generator
    "scene.image_height": 128,
    "scene.image_width": 128,
    "scene.pedestrians": [1, 4],
    "scene.cyclists": [0, 2],
    "scene.hard_negatives": [0, 3],
    "scene.crowding_probability": 0.3,
    "scene.unannotated_fraction": 0.0,
    "scene.frame_pair": False,
    "scene.disparity_scale": 8.0,
    "scene.heatmap_sigma": None,
    "scene.object_heights": [0.18, 0.5],
    # dataset generation
    "dataset.count": 100,
    "dataset.channels": ["edge", "segmentation", "heatmap", "disparity", "icf"],
    "dataset.train_dir": None,
    # backbone
    "backbone.stage_channels": [16, 32, 64, 64],
    "backbone.stage_strides": [1, 2, 4, 8],
    "backbone.branch_channels": 32,
    "backbone.aggregation_target_level": 0,
    "side_branch.conv_count": 2,
    "side_branch.out_channels": 128,
    # heads
    "anchors.scales": list(DEFAULT_ANCHOR_SCALES),
    "anchors.ratios": list(DEFAULT_ANCHOR_RATIOS),
    "heads.rpn_mid_channels": 64,
    "heads.frcnn_fc_width": 256,
    # training
    "train.stage_iterations": [300, 250, 250, 400],
    "train.stage_learning_rates": [1e-2, 1e-2, 1e-2, 1e-3],
    "train.decay_iterations": 0,
    "train.decay_learning_rate": 1e-3,
    "train.rpn_batch": 128,
    "train.frcnn_batch": 64,
    "train.momentum": 0.9,
    "train.proposal_count": 300,
    # evaluation
    "eval.iou_thresh": 0.5,
    "eval.score_floor": 0.05,
    "eval.nms_thresh": 0.5,
    "eval.proposal_count": 100,
}


def _parse_token(tok: str):
    low = tok.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null"):
        return None
    try:
        return int(tok)
    except ValueError:
        pass
    try:
        return float(tok)
    except ValueError:
        pass
    return tok


def parse_config_text(text: str) -> dict:
    out = {}
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        tokens = value.split()
        if not tokens:
            raise ConfigError(f"line {ln}: no value for key {key!r}")
        parsed = [_parse_token(t) for t in tokens]
        out[key] = parsed[0] if len(parsed) == 1 else parsed
    return out


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=dict)

    def __post_init__(self):
        unknown = set(self.values) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        merged = dict(DEFAULTS)
        merged.update(self.values)
        for key, default in DEFAULTS.items():  # single tokens for list keys
            if isinstance(default, list) and not isinstance(merged[key], list):
                merged[key] = [merged[key]]
        self.values = merged
        mode = self.values["mode"]
        if mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
        channel = self.values["channel"]
        if mode in ("side_branch", "hyperlearner") and channel is None:
            raise ConfigError(f"mode {mode} requires a channel")
        if mode == "hypernet_control" and channel is not None:
            raise ConfigError("hypernet_control mode forbids a channel")
        # construct the sub-configs eagerly so bad values fail here
        self.scene_config()
        self.backbone_config()
        self.anchor_config()

    def __getitem__(self, key):
        return self.values[key]

    def with_overrides(self, **kv) -> "ExperimentConfig":
        vals = dict(self.values)
        vals.update(kv)
        return ExperimentConfig(vals)

    @staticmethod
    def from_file(path: str | Path) -> "ExperimentConfig":
        return ExperimentConfig(parse_config_text(Path(path).read_text()))

    # ------------------------------------------------------------- builders

    def scene_config(self, seed: int | None = None) -> SceneConfig:
        v = self.values
        try:
            return SceneConfig(
                image_height=v["scene.image_height"],
                image_width=v["scene.image_width"],
                pedestrian_count_range=tuple(v["scene.pedestrians"]),
                cyclist_count_range=tuple(v["scene.cyclists"]),
                hard_negative_count_range=tuple(v["scene.hard_negatives"]),
                crowding_probability=v["scene.crowding_probability"],
                unannotated_fraction=v["scene.unannotated_fraction"],
                frame_pair=v["scene.frame_pair"],
                seed=self.values["seed"] if seed is None else seed,
                disparity_scale=v["scene.disparity_scale"],
                heatmap_sigma=v["scene.heatmap_sigma"],
                object_height_range=tuple(v["scene.object_heights"]),
            )
        except (ValueError, TypeError) as e:
            raise ConfigError(f"bad scene config: {e}") from e

    def backbone_config(self) -> BackboneConfig:
        v = self.values
        try:
            return BackboneConfig(
                stage_channels=tuple(v["backbone.stage_channels"]),
                stage_strides=tuple(v["backbone.stage_strides"]),
                branch_channels=v["backbone.branch_channels"],
                aggregation_target_level=v["backbone.aggregation_target_level"],
            )
        except (ValueError, TypeError) as e:
            raise ConfigError(f"bad backbone config: {e}") from e

    def anchor_config(self) -> AnchorConfig:
        v = self.values
        try:
            return AnchorConfig(
                scales=tuple(v["anchors.scales"]),
                ratios=tuple(v["anchors.ratios"]),
                stride=tuple(v["backbone.stage_strides"])[-1],
            )
        except (ValueError, TypeError) as e:
            raise ConfigError(f"bad anchor config: {e}") from e

    def detector_config(self) -> DetectorConfig:
        v = self.values
        try:
            return DetectorConfig(
                mode=v["mode"],
                channel_kind=v["channel"],
                backbone=self.backbone_config(),
                anchors=self.anchor_config(),
                side_branch_convs=v["side_branch.conv_count"],
                side_branch_channels=v["side_branch.out_channels"],
                rpn_mid_channels=v["heads.rpn_mid_channels"],
                frcnn_fc_width=v["heads.frcnn_fc_width"],
                init_seed=v["seed"],
            )
        except ValueError as e:
            raise ConfigError(f"bad detector config: {e}") from e

    def stage_plan_options(self) -> StagePlanOptions:
        v = self.values
        try:
            return StagePlanOptions(
                iterations=tuple(v["train.stage_iterations"]),
                learning_rates=tuple(v["train.stage_learning_rates"]),
            )
        except ValueError as e:
            raise ConfigError(f"bad stage plan: {e}") from e

    def train_options(self) -> TrainOptions:
        v = self.values
        return TrainOptions(
            seed=v["seed"],
            momentum=v["train.momentum"],
            rpn_batch=v["train.rpn_batch"],
            frcnn_batch=v["train.frcnn_batch"],
            proposal_count=v["train.proposal_count"],
        )

    # ---------------------------------------------------------- fingerprint

    def canonical_json(self) -> str:
        return json.dumps(self.values, sort_keys=True, separators=(",", ":"))

    def fingerprint(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()
