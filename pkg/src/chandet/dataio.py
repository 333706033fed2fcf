"""Dataset directory layout and file formats.

    images/NNNNNN.png            first frame, 8-bit RGB
    images2/NNNNNN.png           optional second frame (frame_pair configs)
    labels/NNNNNN.txt            one object per line:
                                 class truncation occlusion x1 y1 x2 y2
                                 class in {Pedestrian, Cyclist, DontCare}
    channels/<kind>/NNNNNN.ten   ground-truth channels (tensor file format)
    manifest.json                seed, counts, config fingerprint

De facto ground truths withheld from the labels are emitted as DontCare
lines so evaluators can realize the annotation-error category. Detection
files carry one `class score x1 y1 x2 y2` line per detection.
"""

from __future__ import annotations

import dataclasses
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import tensorio
from .channels import CHANNEL_CATALOG, ChannelMap, compute_icf
from .heads import Box, CLASS_IDS, CLASS_NAMES, Detection, PEDESTRIAN
from .synthworld import Annotation, Scene, SceneConfig, generate_scene, render_ground_truth_channel

DONTCARE = "DontCare"


@dataclass
class TrainSample:
    image: np.ndarray  # 3 x H x W float32 in [0, 1]
    annotations: list[Annotation]
    supervisor: ChannelMap | None = None
    channel_input: ChannelMap | None = None


def scene_seed(base_seed: int, index: int) -> int:
    """Stable per-image seed derived from the dataset seed."""
    ss = np.random.SeedSequence([np.uint64(base_seed), np.uint64(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def image_to_png_bytes(image: np.ndarray) -> bytes:
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    pil = Image.fromarray(arr.transpose(1, 2, 0))
    buf = io.BytesIO()
    pil.save(buf, format="PNG")
    return buf.getvalue()


def load_image(path: str | Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def format_labels(annotations: list[Annotation]) -> str:
    lines = []
    for ann in annotations:
        name = CLASS_NAMES[ann.class_id] if ann.annotated else DONTCARE
        b = ann.box
        lines.append(
            f"{name} {ann.truncation:.3f} {ann.occlusion:d} "
            f"{b.x1:.2f} {b.y1:.2f} {b.x2:.2f} {b.y2:.2f}"
        )
    return "".join(line + "\n" for line in lines)


def parse_labels(text: str) -> list[Annotation]:
    out = []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 7:
            raise ValueError(f"bad label line: {line!r}")
        name, trunc, occ, x1, y1, x2, y2 = parts
        annotated = name != DONTCARE
        if annotated and name not in CLASS_IDS:
            raise ValueError(f"unknown class {name!r} in label line: {line!r}")
        class_id = CLASS_IDS[name] if annotated else PEDESTRIAN
        out.append(
            Annotation(
                box=Box(float(x1), float(y1), float(x2), float(y2)),
                class_id=class_id,
                truncation=float(trunc),
                occlusion=int(occ),
                annotated=annotated,
            )
        )
    return out


def format_detections(dets: list[Detection]) -> str:
    lines = []
    for d in dets:
        b = d.box
        lines.append(
            f"{CLASS_NAMES[d.class_id]} {d.score:.6f} {b.x1:.2f} {b.y1:.2f} {b.x2:.2f} {b.y2:.2f}"
        )
    return "".join(line + "\n" for line in lines)


def parse_detections(text: str) -> list[Detection]:
    out = []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        name, score, x1, y1, x2, y2 = line.split()
        out.append(
            Detection(
                Box(float(x1), float(y1), float(x2), float(y2)),
                float(score),
                CLASS_IDS[name],
            )
        )
    return out


def render_channel(scene: Scene, kind: str) -> ChannelMap:
    """Any catalog channel for a scene (analytic ICF / raw image included)."""
    if kind == "icf":
        return compute_icf(scene.image)
    if kind == "raw-image":
        return ChannelMap(scene.image.copy(), "regression", name="raw-image")
    return render_ground_truth_channel(scene, kind)


def channel_tensor_for_file(cm: ChannelMap) -> np.ndarray:
    if cm.kind == "multiclass" and cm.channels == 1:
        return cm.data.astype(np.int32)
    return cm.data.astype(np.float32)


def channel_from_file(arr: np.ndarray, kind_name: str) -> ChannelMap:
    kind, _, class_count = CHANNEL_CATALOG[kind_name]
    return ChannelMap(arr.astype(np.float32), kind, class_count=class_count, name=kind_name)


def write_dataset(
    out_dir: str | Path,
    scene_config: SceneConfig,
    count: int,
    channels: tuple[str, ...] = ("edge", "segmentation", "heatmap", "disparity", "icf"),
    fingerprint: str = "",
) -> dict:
    """Generate `count` scenes (seeds derived from the config seed) and
    write the full directory layout. Returns the manifest dict."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(exist_ok=True)
    channels = tuple(channels)
    if "flow" in channels and not scene_config.frame_pair:
        raise ValueError("flow channels require frame_pair scene configs")
    for kind in channels:
        if kind not in CHANNEL_CATALOG:
            raise ValueError(f"unknown channel kind {kind!r}")
        (out / "channels" / kind).mkdir(parents=True, exist_ok=True)
    if scene_config.frame_pair:
        (out / "images2").mkdir(exist_ok=True)

    class_counts = {"Pedestrian": 0, "Cyclist": 0, "DontCare": 0}
    for i in range(count):
        cfg = dataclasses.replace(scene_config, seed=scene_seed(scene_config.seed, i))
        scene = generate_scene(cfg)
        stem = f"{i:06d}"
        (out / "images" / f"{stem}.png").write_bytes(image_to_png_bytes(scene.image))
        if scene.second_image is not None:
            (out / "images2" / f"{stem}.png").write_bytes(image_to_png_bytes(scene.second_image))
        (out / "labels" / f"{stem}.txt").write_text(format_labels(scene.annotations))
        for ann in scene.annotations:
            key = CLASS_NAMES[ann.class_id] if ann.annotated else DONTCARE
            class_counts[key] += 1
        for kind in channels:
            cm = render_channel(scene, kind)
            tensorio.write_tensor(out / "channels" / kind / f"{stem}.ten",
                                  channel_tensor_for_file(cm))
    manifest = {
        "seed": scene_config.seed,
        "count": count,
        "channels": sorted(channels),
        "frame_pair": scene_config.frame_pair,
        "fingerprint": fingerprint,
        "class_counts": class_counts,
        "image_height": scene_config.image_height,
        "image_width": scene_config.image_width,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def dataset_ids(root: str | Path) -> list[str]:
    images = sorted((Path(root) / "images").glob("*.png"))
    return [p.stem for p in images]


class DirectoryDataset:
    """Random-access view over a generated dataset directory.

    supervisor_kind loads channels/<kind> as training supervision;
    input_kind loads the channel fed to a side branch.
    """

    def __init__(self, root: str | Path, supervisor_kind: str | None = None,
                 input_kind: str | None = None):
        self.root = Path(root)
        if not (self.root / "images").is_dir():
            raise FileNotFoundError(f"{root} is not a dataset directory (no images/)")
        self.ids = dataset_ids(self.root)
        if not self.ids:
            raise ValueError(f"dataset at {root} is empty")
        self.supervisor_kind = supervisor_kind
        self.input_kind = input_kind
        for kind in filter(None, {supervisor_kind, input_kind}):
            if not (self.root / "channels" / kind).is_dir():
                raise FileNotFoundError(f"dataset at {root} has no {kind!r} channels")

    def __len__(self) -> int:
        return len(self.ids)

    def _channel(self, kind: str, stem: str) -> ChannelMap:
        arr = tensorio.read_tensor(self.root / "channels" / kind / f"{stem}.ten")
        return channel_from_file(arr, kind)

    def annotations(self, index: int) -> list[Annotation]:
        stem = self.ids[index]
        return parse_labels((self.root / "labels" / f"{stem}.txt").read_text())

    def __getitem__(self, index: int) -> TrainSample:
        stem = self.ids[index]
        image = load_image(self.root / "images" / f"{stem}.png")
        sup = self._channel(self.supervisor_kind, stem) if self.supervisor_kind else None
        cin = self._channel(self.input_kind, stem) if self.input_kind else None
        return TrainSample(image, self.annotations(index), sup, cin)


class SceneDataset:
    """On-the-fly scenes for in-memory training and tests."""

    def __init__(self, scene_config: SceneConfig, count: int,
                 supervisor_kind: str | None = None, input_kind: str | None = None):
        self.config = scene_config
        self.count = count
        self.supervisor_kind = supervisor_kind
        self.input_kind = input_kind
        self._cache: dict[int, TrainSample] = {}

    def __len__(self) -> int:
        return self.count

    def scene(self, index: int) -> Scene:
        cfg = dataclasses.replace(self.config, seed=scene_seed(self.config.seed, index))
        return generate_scene(cfg)

    def __getitem__(self, index: int) -> TrainSample:
        if index in self._cache:
            return self._cache[index]
        scene = self.scene(index)
        sup = render_channel(scene, self.supervisor_kind) if self.supervisor_kind else None
        cin = render_channel(scene, self.input_kind) if self.input_kind else None
        sample = TrainSample(scene.image, [a for a in scene.annotations], sup, cin)
        self._cache[index] = sample
        return sample
