"""chandet: channel-feature-augmented pedestrian detection on a synthetic world.

The package bundles a deterministic scene generator with analytic ground
truth, the analytic channel-feature stack (LUV / gradient magnitude / HOG),
a small two-stage detector whose backbone aggregates multi-level activation
maps, a channel-feature prediction head trained as auxiliary supervision,
the staged training controller, and a full detection-evaluation toolkit
(AP, recall-by-height, false-positive taxonomy, log-average miss rate).
"""

__version__ = "0.1.0"

from .channels import ChannelMap
from .heads import AnchorConfig, Box, Detection
from .synthworld import Annotation, Scene, SceneConfig

__all__ = [
    "Annotation",
    "AnchorConfig",
    "Box",
    "ChannelMap",
    "Detection",
    "Scene",
    "SceneConfig",
    "__version__",
]
