"""Deterministic synthetic street scenes with analytic ground truth.

Scenes contain articulated pedestrian silhouettes, cyclists, and
pole/sign-like distractors whose local appearance matches the
pedestrians (hard negatives). Every scene is a pure function of its
config, including the seed, and carries per-object masks, depths and
velocities from which all channel-feature ground truth (edge,
segmentation, heatmap, disparity, flow) is rendered analytically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channels import ChannelMap, blur_heatmap, default_heatmap_sigma
from .heads import Box, CYCLIST, PEDESTRIAN, iou_matrix

DISTRACTOR = 3

# occlusion fraction -> integer occlusion level {0,1,2}
OCCLUSION_LEVEL_THRESHOLDS = (0.2, 0.5)

GT_CHANNEL_KINDS = ("edge", "segmentation", "heatmap", "disparity", "flow")


@dataclass(frozen=True)
class SceneConfig:
    image_height: int = 128
    image_width: int = 128
    pedestrian_count_range: tuple[int, int] = (1, 4)
    cyclist_count_range: tuple[int, int] = (0, 2)
    hard_negative_count_range: tuple[int, int] = (0, 3)
    crowding_probability: float = 0.3
    unannotated_fraction: float = 0.0
    frame_pair: bool = False
    seed: int = 0
    disparity_scale: float = 8.0
    heatmap_sigma: float | None = None
    object_height_range: tuple[float, float] = (0.18, 0.50)  # fractions of H

    def __post_init__(self):
        if self.image_height < 32 or self.image_width < 32:
            raise ValueError("image dims must be >= 32")
        lo, hi = self.object_height_range
        if not 0.05 <= lo <= hi <= 0.95:
            raise ValueError("object_height_range must satisfy 0.05 <= lo <= hi <= 0.95")
        for name in ("pedestrian_count_range", "cyclist_count_range", "hard_negative_count_range"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"{name} must be a non-empty non-negative interval")
        for name in ("crowding_probability", "unannotated_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.disparity_scale <= 0:
            raise ValueError("disparity_scale must be positive")

    @property
    def sigma(self) -> float:
        if self.heatmap_sigma is not None:
            return self.heatmap_sigma
        return default_heatmap_sigma(self.image_height)


@dataclass(frozen=True)
class Annotation:
    """A labeled object: box, class, and the difficulty attributes.

    `annotated=False` marks a de facto ground truth withheld from label
    files (it exists only for the evaluator's annotation-error category).
    `object_index` points into the scene's object arrays.
    """

    box: Box
    class_id: int
    truncation: float = 0.0
    occlusion: int = 0
    annotated: bool = True
    object_index: int = -1

    @property
    def height(self) -> float:
        return self.box.height


@dataclass(eq=False)
class Scene:
    image: np.ndarray  # 3 x H x W float32 in [0, 1]
    annotations: list[Annotation]
    object_masks: list[np.ndarray]  # per-object (H, W) bool, within bounds
    object_classes: np.ndarray  # (K,) int
    object_depths: np.ndarray  # (K,) float, > 0
    object_velocities: np.ndarray  # (K, 2) int, (vx, vy) pixels/frame
    second_image: np.ndarray | None = None
    config: SceneConfig | None = None
    crowding_fired: bool = False

    @property
    def height(self) -> int:
        return self.image.shape[1]

    @property
    def width(self) -> int:
        return self.image.shape[2]


# ---------------------------------------------------------------- silhouettes


def _paint_ellipse(canvas: np.ndarray, cy: float, cx: float, ry: float, rx: float) -> None:
    h, w = canvas.shape
    ys = np.arange(h, dtype=np.float64)[:, None]
    xs = np.arange(w, dtype=np.float64)[None, :]
    canvas |= ((ys - cy) / max(ry, 0.5)) ** 2 + ((xs - cx) / max(rx, 0.5)) ** 2 <= 1.0


def _paint_capsule(canvas, p0, p1, radius: float) -> None:
    h, w = canvas.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    (y0, x0), (y1, x1) = p0, p1
    dy, dx = y1 - y0, x1 - x0
    norm2 = dy * dy + dx * dx
    if norm2 == 0:
        t = np.zeros_like(ys)
    else:
        t = np.clip(((ys - y0) * dy + (xs - x0) * dx) / norm2, 0.0, 1.0)
    py = y0 + t * dy
    px = x0 + t * dx
    canvas |= (ys - py) ** 2 + (xs - px) ** 2 <= max(radius, 0.5) ** 2


def _crop_to_content(mask: np.ndarray) -> np.ndarray:
    rows = np.any(mask, axis=1)
    cols = np.any(mask, axis=0)
    r = np.where(rows)[0]
    c = np.where(cols)[0]
    return mask[r[0] : r[-1] + 1, c[0] : c[-1] + 1]


def _pedestrian_mask(rng: np.random.Generator, h_px: float) -> np.ndarray:
    """2-5-part articulated silhouette: head + torso, optional legs/arm."""
    h = max(int(h_px), 12)
    w = max(int(0.7 * h), 8)
    m = np.zeros((h, w), dtype=bool)
    cx = w / 2 + rng.uniform(-0.02, 0.02) * h
    parts = int(rng.choice([2, 3, 4, 5], p=[0.15, 0.15, 0.40, 0.30]))
    head_r = rng.uniform(0.085, 0.115) * h
    torso_r = rng.uniform(0.10, 0.145) * h
    lean = rng.uniform(-0.05, 0.05) * h

    _paint_ellipse(m, 0.10 * h, cx + 0.5 * lean, head_r, head_r * rng.uniform(0.85, 1.0))
    if parts == 2:
        # long-coat figure: one capsule from shoulders to the ground
        _paint_capsule(m, (0.22 * h, cx), (0.97 * h - 1.1 * torso_r, cx + lean), 1.1 * torso_r)
        return _crop_to_content(m)

    hip_y, hip_x = 0.55 * h, cx + lean
    _paint_capsule(m, (0.22 * h, cx), (hip_y, hip_x), torso_r)
    leg_r = rng.uniform(0.045, 0.06) * h
    ankle_y = 0.97 * h - leg_r
    if parts == 3:
        sway = rng.uniform(-0.05, 0.05) * h
        _paint_capsule(m, (hip_y, hip_x), (ankle_y, hip_x + sway), 0.8 * torso_r)
    else:
        spread = rng.uniform(0.04, 0.16) * h
        phase = rng.uniform(-0.06, 0.06) * h
        _paint_capsule(m, (hip_y, hip_x - 0.02 * h), (ankle_y, hip_x - spread + phase), leg_r)
        _paint_capsule(m, (hip_y, hip_x + 0.02 * h), (ankle_y, hip_x + spread + phase), leg_r)
    if parts == 5:
        side = 1.0 if rng.random() < 0.5 else -1.0
        reach = rng.uniform(0.12, 0.22) * h * side
        _paint_capsule(m, (0.26 * h, cx), (0.50 * h, cx + reach), 0.04 * h)
    return _crop_to_content(m)


def _cyclist_mask(rng: np.random.Generator, h_px: float) -> np.ndarray:
    h = max(int(h_px), 14)
    w = max(int(1.25 * h), 14)
    m = np.zeros((h, w), dtype=bool)
    wheel_r = rng.uniform(0.19, 0.23) * h
    wy = h - wheel_r - 1
    wx1 = 0.22 * w + rng.uniform(-0.02, 0.02) * w
    wx2 = 0.78 * w + rng.uniform(-0.02, 0.02) * w
    _paint_ellipse(m, wy, wx1, wheel_r, wheel_r)
    _paint_ellipse(m, wy, wx2, wheel_r, wheel_r)
    _paint_capsule(m, (wy, wx1), (wy, wx2), 0.035 * h)
    hip = (0.52 * h, 0.60 * w)
    shoulder = (0.30 * h, 0.46 * w + rng.uniform(-0.03, 0.03) * w)
    _paint_capsule(m, hip, shoulder, rng.uniform(0.07, 0.09) * h)
    _paint_capsule(m, hip, (wy - wheel_r * 0.3, wx2), 0.03 * h)
    head_r = rng.uniform(0.075, 0.095) * h
    _paint_ellipse(m, shoulder[0] - head_r - 0.02 * h, shoulder[1], head_r, head_r)
    return _crop_to_content(m)


def _distractor_mask(rng: np.random.Generator, h_px: float) -> np.ndarray:
    """Pole/sign-like hard negative: a single rectangle or capsule whose
    height distribution matches the pedestrians'."""
    h = max(int(h_px), 12)
    if rng.random() < 0.5:
        w = max(int(rng.uniform(0.10, 0.45) * h), 3)
        return np.ones((h, w), dtype=bool)
    r = rng.uniform(0.06, 0.17) * h
    w = max(int(2 * r) + 3, 5)
    m = np.zeros((h, w), dtype=bool)
    _paint_capsule(m, (r + 0.5, w / 2), (h - r - 1, w / 2), r)
    return _crop_to_content(m)


# ------------------------------------------------------------------ assembly


def _paste(local: np.ndarray, H: int, W: int, y0: int, x0: int) -> np.ndarray:
    """Paste a local mask at (y0, x0), clipped to the image bounds."""
    out = np.zeros((H, W), dtype=bool)
    lh, lw = local.shape
    ys, ye = max(y0, 0), min(y0 + lh, H)
    xs, xe = max(x0, 0), min(x0 + lw, W)
    if ys < ye and xs < xe:
        out[ys:ye, xs:xe] = local[ys - y0 : ye - y0, xs - x0 : xe - x0]
    return out


def _tight_box(mask: np.ndarray) -> Box:
    rows = np.where(np.any(mask, axis=1))[0]
    cols = np.where(np.any(mask, axis=0))[0]
    return Box(float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))


def translate_mask(mask: np.ndarray, velocity) -> np.ndarray:
    """Shift a mask by integer (vx, vy) pixels, clipping at the borders."""
    vx, vy = int(velocity[0]), int(velocity[1])
    h, w = mask.shape
    out = np.zeros_like(mask)
    ys, ye = max(vy, 0), min(h + vy, h)
    xs, xe = max(vx, 0), min(w + vx, w)
    if ys < ye and xs < xe:
        out[ys:ye, xs:xe] = mask[ys - vy : ye - vy, xs - vx : xe - vx]
    return out


def instance_map(masks, depths) -> np.ndarray:
    """Nearest-object index per pixel (-1 on background), far-to-near paint."""
    if len(masks) == 0:
        raise ValueError("instance_map requires at least one mask")
    h, w = masks[0].shape
    out = np.full((h, w), -1, dtype=np.int32)
    for i in np.argsort(-np.asarray(depths), kind="stable"):
        out[masks[i]] = i
    return out


def _render_frame(rng, background, masks, depths, colors) -> np.ndarray:
    image = background.copy()
    order = np.argsort(-np.asarray(depths), kind="stable") if len(masks) else []
    for i in order:
        mask = masks[i]
        n = int(mask.sum())
        if n == 0:
            continue
        noise = rng.normal(0.0, 0.03, size=(3, n))
        image[:, mask] = colors[i][:, None] + noise
    return np.clip(image, 0.0, 1.0).astype(np.float32)


def _background(rng, H: int, W: int) -> np.ndarray:
    ramp = np.linspace(0.32, 0.58, H)[None, :, None]
    tint = rng.uniform(-0.03, 0.03, size=(3, 1, 1))
    cell = 16
    ch = -(-H // cell)
    cw = -(-W // cell)
    coarse = np.kron(rng.uniform(-0.06, 0.06, size=(3, ch, cw)), np.ones((cell, cell)))
    fine = rng.normal(0.0, 0.015, size=(3, H, W))
    return ramp + tint + coarse[:, :H, :W] + fine


def validate_packing(config: SceneConfig) -> None:
    """Reject configs whose worst-case object area demand exceeds the image."""
    max_total = (
        config.pedestrian_count_range[1]
        + config.cyclist_count_range[1]
        + config.hard_negative_count_range[1]
    )
    mean_h = sum(config.object_height_range) / 2.0
    demand = max_total * 0.5 * (mean_h * config.image_height) ** 2
    if demand > config.image_height * config.image_width:
        raise ValueError(
            f"object area demand ({demand:.0f} px^2 for up to {max_total} objects) "
            f"exceeds the {config.image_height}x{config.image_width} image"
        )


def generate_scene(config: SceneConfig) -> Scene:
    """Deterministically generate one scene from the config (seed included)."""
    validate_packing(config)
    rng = np.random.default_rng(config.seed)
    H, W = config.image_height, config.image_width

    n_ped = int(rng.integers(config.pedestrian_count_range[0], config.pedestrian_count_range[1] + 1))
    n_cyc = int(rng.integers(config.cyclist_count_range[0], config.cyclist_count_range[1] + 1))
    n_neg = int(rng.integers(config.hard_negative_count_range[0], config.hard_negative_count_range[1] + 1))

    classes = [PEDESTRIAN] * n_ped + [CYCLIST] * n_cyc + [DISTRACTOR] * n_neg
    builders = {PEDESTRIAN: _pedestrian_mask, CYCLIST: _cyclist_mask, DISTRACTOR: _distractor_mask}

    locals_, placements, depths, full_areas = [], [], [], []
    h_lo, h_hi = config.object_height_range
    for cls in classes:
        h_px = rng.uniform(h_lo, h_hi) * H
        local = builders[cls](rng, h_px)
        lh, lw = local.shape
        y_bottom = rng.uniform(0.55 * H, 0.98 * H)
        y0 = int(round(y_bottom)) - lh
        x0 = int(round(rng.uniform(-0.35 * lw, W - 0.65 * lw)))
        depth = 2.0 + 8.0 * (1.0 - (y_bottom / H - 0.55) / 0.43) + rng.uniform(-0.5, 0.5)
        locals_.append(local)
        placements.append((y0, x0))
        depths.append(max(depth, 1.0))
        full_areas.append(int(local.sum()))

    crowding_fired = False
    if n_ped >= 2 and rng.random() < config.crowding_probability:
        crowding_fired = True
        # rebuild pedestrian 1 at a height matched to pedestrian 0 and place
        # it closer and closer until the pasted tight boxes reach IoU >= 0.3
        lh0, lw0 = locals_[0].shape
        locals_[1] = _pedestrian_mask(rng, lh0 * rng.uniform(0.9, 1.1))
        full_areas[1] = int(locals_[1].sum())
        base = _paste(locals_[0], H, W, *placements[0])
        base_box = _tight_box(base)
        lh1, lw1 = locals_[1].shape
        for frac in (0.30, 0.22, 0.15, 0.08, 0.0):
            y0 = placements[0][0] + int(round(0.06 * lh0))
            x0 = placements[0][1] + int(round(frac * lw0))
            y0 = min(max(y0, 1 - lh1), H - 1 - lh1 // 2)
            x0 = min(max(x0, 1 - lw1), W - 1 - lw1 // 2)
            cand = _paste(locals_[1], H, W, y0, x0)
            if not cand.any():
                continue
            pair_iou = iou_matrix(base_box.as_array()[None], _tight_box(cand).as_array()[None])
            if pair_iou[0, 0] >= 0.3:
                placements[1] = (y0, x0)
                depths[1] = depths[0] + rng.uniform(0.3, 1.0)
                break
        else:
            raise RuntimeError("could not realize a crowded pedestrian pair")

    masks = [_paste(loc, H, W, y0, x0) for loc, (y0, x0) in zip(locals_, placements)]
    for i, m in enumerate(masks):
        if not m.any():  # fully clipped placements would break annotation invariants
            masks[i] = _paste(locals_[i], H, W, max(H - locals_[i].shape[0] - 1, 0), W // 4)

    depths_arr = np.asarray(depths, dtype=np.float64)
    velocities = rng.integers(-3, 4, size=(len(masks), 2)).astype(np.int64)
    colors = [np.clip(rng.uniform(0.25, 0.75) + rng.uniform(-0.06, 0.06, 3), 0.02, 0.98)
              for _ in masks]

    background = _background(rng, H, W)
    image = _render_frame(rng, background, masks, depths_arr, colors)
    second_image = None
    if config.frame_pair:
        masks2 = [translate_mask(m, v) for m, v in zip(masks, velocities)]
        second_image = _render_frame(rng, background, masks2, depths_arr, colors)

    annotations = []
    class_arr = np.asarray(classes, dtype=np.int64)
    for i, (mask, cls) in enumerate(zip(masks, classes)):
        if cls == DISTRACTOR:
            continue
        nearer = np.zeros((H, W), dtype=bool)
        for j in range(len(masks)):
            if depths_arr[j] < depths_arr[i]:
                nearer |= masks[j]
        area = int(mask.sum())
        occl_frac = float((mask & nearer).sum()) / area
        level = int(np.searchsorted(OCCLUSION_LEVEL_THRESHOLDS, occl_frac, side="right"))
        truncation = 1.0 - area / max(full_areas[i], 1)
        annotated = True
        if cls == PEDESTRIAN and config.unannotated_fraction > 0:
            annotated = bool(rng.random() >= config.unannotated_fraction)
        annotations.append(
            Annotation(
                box=_tight_box(mask),
                class_id=int(cls),
                truncation=float(truncation),
                occlusion=level,
                annotated=annotated,
                object_index=i,
            )
        )

    return Scene(
        image=image,
        annotations=annotations,
        object_masks=masks,
        object_classes=class_arr,
        object_depths=depths_arr,
        object_velocities=velocities,
        second_image=second_image,
        config=config,
        crowding_fired=crowding_fired,
    )


# ----------------------------------------------------------- channel renders


def render_segmentation(scene: Scene) -> np.ndarray:
    """Visible class label per pixel (0 background), nearest object wins."""
    seg = np.zeros((scene.height, scene.width), dtype=np.int64)
    if scene.object_masks:
        inst = instance_map(scene.object_masks, scene.object_depths)
        vis = inst >= 0
        seg[vis] = scene.object_classes[inst[vis]]
    return seg


def _segmentation_edges(seg: np.ndarray) -> np.ndarray:
    e = np.zeros(seg.shape, dtype=bool)
    e[:-1, :] |= seg[:-1, :] != seg[1:, :]
    e[1:, :] |= seg[1:, :] != seg[:-1, :]
    e[:, :-1] |= seg[:, :-1] != seg[:, 1:]
    e[:, 1:] |= seg[:, 1:] != seg[:, :-1]
    return e


def render_ground_truth_channel(scene: Scene, kind: str) -> ChannelMap:
    """Analytic ground-truth channel of the requested kind.

    edge: binary mask-boundary map; segmentation: integer class map;
    heatmap: Gaussian blur of the pedestrian-probability plane;
    disparity: scale/depth on visible object pixels over a floor
    gradient; flow: per-pixel (vx, vy) of the nearest object.
    """
    if kind not in GT_CHANNEL_KINDS:
        raise ValueError(f"unknown ground-truth channel kind {kind!r}")
    cfg = scene.config or SceneConfig(image_height=scene.height, image_width=scene.width)
    seg = render_segmentation(scene)
    if kind == "segmentation":
        return ChannelMap(seg[None].astype(np.float32), "multiclass", class_count=4,
                          name="segmentation")
    if kind == "edge":
        return ChannelMap(_segmentation_edges(seg)[None].astype(np.float32), "binary",
                          name="edge")
    if kind == "heatmap":
        person = (seg == PEDESTRIAN).astype(np.float64)
        return blur_heatmap(person[None], cfg.sigma)
    if kind == "disparity":
        k = cfg.disparity_scale
        ramp = np.linspace(k / 40.0, k / 12.0, scene.height)
        disp = np.tile(ramp[:, None], (1, scene.width))
        if scene.object_masks:
            inst = instance_map(scene.object_masks, scene.object_depths)
            vis = inst >= 0
            disp[vis] = k / scene.object_depths[inst[vis]]
        return ChannelMap(disp[None].astype(np.float32), "regression", name="disparity")
    # flow
    if scene.second_image is None:
        raise ValueError("flow channel requires a frame_pair scene")
    flow = np.zeros((2, scene.height, scene.width), dtype=np.float64)
    if scene.object_masks:
        inst = instance_map(scene.object_masks, scene.object_depths)
        vis = inst >= 0
        flow[0][vis] = scene.object_velocities[inst[vis], 0]
        flow[1][vis] = scene.object_velocities[inst[vis], 1]
    return ChannelMap(flow.astype(np.float32), "regression", name="flow")
