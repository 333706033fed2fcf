import pytest
import torch

from chandet.backbone import BackboneConfig
from chandet.dataio import SceneDataset
from chandet.detector import DetectorConfig
from chandet.heads import AnchorConfig
from chandet.synthworld import SceneConfig

torch.set_num_threads(1)  # keep runs deterministic and comparable


TINY_BACKBONE = BackboneConfig(
    stage_channels=(8, 8, 16, 16),
    stage_strides=(1, 2, 4, 8),
    branch_channels=8,
    aggregation_target_level=2,
)

TINY_ANCHORS = AnchorConfig(scales=(12.0, 20.0, 32.0), ratios=(0.3, 0.5, 0.8), stride=8)


def tiny_detector_config(mode="hyperlearner", channel="segmentation", seed=0):
    return DetectorConfig(
        mode=mode,
        channel_kind=channel,
        backbone=TINY_BACKBONE,
        anchors=TINY_ANCHORS,
        rpn_mid_channels=16,
        frcnn_fc_width=32,
        init_seed=seed,
    )


def tiny_scene_config(seed=0, **kw):
    defaults = dict(
        image_height=64,
        image_width=64,
        pedestrian_count_range=(1, 2),
        cyclist_count_range=(0, 1),
        hard_negative_count_range=(0, 1),
        crowding_probability=0.2,
        seed=seed,
    )
    defaults.update(kw)
    return SceneConfig(**defaults)


@pytest.fixture(scope="session")
def tiny_seg_dataset():
    return SceneDataset(tiny_scene_config(seed=100), count=8,
                        supervisor_kind="segmentation")


@pytest.fixture(scope="session")
def tiny_input_dataset():
    return SceneDataset(tiny_scene_config(seed=200), count=8,
                        input_kind="segmentation")
