"""Staged training controller: parameter-group freezing, the four-stage
schedule for channel-supervised training, proposal-gradient stopping,
deterministic SGD, and bit-exact checkpointing.

Stages for the channel-supervised mode:
  1. cfn    - aggregation branches + prediction head on the pixel loss
              (the pretrained body stays fixed, detection heads idle)
  2. rpn    - proposal head only, body/aggregation/prediction frozen
  3. frcnn  - region classifier only
  4. joint  - everything, all five loss terms

Region-proposal coordinates are treated as fixed values in every stage:
no gradient flows back through them.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import tensorio
from .cfn_losses import (
    LossWeights,
    SupervisorMap,
    bbox_regression_loss,
    pixel_loss,
    roi_bbox_loss,
    roi_class_loss,
    rpn_class_loss,
    total_loss,
)
from .detector import Detector
from .heads import (
    PEDESTRIAN,
    assign_rpn_targets,
    encode_boxes,
    generate_anchors,
    generate_proposals,
    inside_image_mask,
    iou_matrix,
    roi_pool,
)

LOSS_TERMS = ("cfn", "rpn_cls", "rpn_bbox", "frcnn_cls", "frcnn_bbox")

_GROUP_LOSS_REQUIREMENTS = {
    "cfn": ("cfn",),
    "rpn": ("rpn_cls", "rpn_bbox"),
    "frcnn": ("frcnn_cls", "frcnn_bbox"),
}


class TrainingDiverged(RuntimeError):
    """Raised when a loss term becomes non-finite."""

    def __init__(self, term: str, iteration: int, value: float):
        super().__init__(f"loss term {term!r} became non-finite ({value}) at iteration {iteration}")
        self.term = term
        self.iteration = iteration


class CheckpointMismatch(ValueError):
    """Raised when a checkpoint's config fingerprint does not match."""


@dataclass(frozen=True)
class StageSpec:
    name: str
    trainable_groups: frozenset
    active_losses: frozenset
    iterations: int
    learning_rate: float

    def __post_init__(self):
        object.__setattr__(self, "trainable_groups", frozenset(self.trainable_groups))
        object.__setattr__(self, "active_losses", frozenset(self.active_losses))
        if not self.trainable_groups:
            raise ValueError("a stage must train at least one parameter group")
        unknown = self.active_losses - set(LOSS_TERMS)
        if unknown:
            raise ValueError(f"unknown loss terms {sorted(unknown)}")
        for group, required in _GROUP_LOSS_REQUIREMENTS.items():
            if group in self.trainable_groups and not any(
                term in self.active_losses for term in required
            ):
                raise ValueError(
                    f"group {group!r} is trainable but none of its losses {required} are active"
                )
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


@dataclass(frozen=True)
class StagePlanOptions:
    iterations: tuple = (300, 250, 250, 400)
    learning_rates: tuple = (1e-2, 1e-2, 1e-2, 1e-3)

    def __post_init__(self):
        if len(self.iterations) != 4 or len(self.learning_rates) != 4:
            raise ValueError("the stage plan has exactly four stages")


def build_stage_plan(opts: StagePlanOptions = StagePlanOptions()) -> list[StageSpec]:
    """The four-stage schedule for channel-supervised training."""
    it, lr = opts.iterations, opts.learning_rates
    return [
        StageSpec("cfn", {"aggregation-branches", "cfn"}, {"cfn"}, it[0], lr[0]),
        StageSpec("rpn", {"rpn"}, {"rpn_cls", "rpn_bbox"}, it[1], lr[1]),
        StageSpec("frcnn", {"frcnn"}, {"frcnn_cls", "frcnn_bbox"}, it[2], lr[2]),
        StageSpec(
            "joint",
            {"body-pretrained", "aggregation-branches", "cfn", "rpn", "frcnn"},
            set(LOSS_TERMS),
            it[3],
            lr[3],
        ),
    ]


def stage_plan_for_mode(mode: str, opts: StagePlanOptions = StagePlanOptions(),
                        decay_iterations: int = 0,
                        decay_learning_rate: float = 1e-3) -> list[StageSpec]:
    """Training schedules per experiment mode.

    The channel-supervised mode uses the four-stage schedule; a
    constant-rate joint decay tail can be appended (decay_iterations > 0),
    which matters when the toy body trains from scratch rather than from
    pretrained weights. Detector-only modes (baseline / side_branch) use a
    joint detection stage with the same decay tail; the aggregation-only
    control trains rpn / frcnn / joint without any pixel loss.
    """
    det_losses = {"rpn_cls", "rpn_bbox", "frcnn_cls", "frcnn_bbox"}
    it, lr = opts.iterations, opts.learning_rates
    if mode == "hyperlearner":
        plan = build_stage_plan(opts)
        if decay_iterations > 0:
            plan.append(
                StageSpec("joint", plan[3].trainable_groups, plan[3].active_losses,
                          decay_iterations, decay_learning_rate)
            )
        return plan
    if mode == "hypernet_control":
        groups = {"body-pretrained", "aggregation-branches", "rpn", "frcnn"}
        plan = [
            StageSpec("rpn", {"rpn"}, {"rpn_cls", "rpn_bbox"}, it[1], lr[1]),
            StageSpec("frcnn", {"frcnn"}, {"frcnn_cls", "frcnn_bbox"}, it[2], lr[2]),
            StageSpec("joint", groups, det_losses, it[3], lr[3]),
        ]
        if decay_iterations > 0:
            plan.append(StageSpec("joint", groups, det_losses,
                                  decay_iterations, decay_learning_rate))
        return plan
    groups = {"body-pretrained", "rpn", "frcnn"}
    if mode == "side_branch":
        groups.add("side-branch")
    plan = [StageSpec("joint", groups, det_losses, sum(it[1:]), lr[1])]
    if decay_iterations > 0:
        plan.append(StageSpec("joint", groups, det_losses,
                              decay_iterations, decay_learning_rate))
    return plan


@dataclass(frozen=True)
class TrainOptions:
    seed: int = 0
    momentum: float = 0.9
    weights: LossWeights = field(default_factory=LossWeights)
    rpn_batch: int = 128
    rpn_pos_fraction: float = 0.5
    rpn_strict_ratio: bool = True
    frcnn_batch: int = 64
    frcnn_pos_fraction: float = 0.25
    proposal_count: int = 300
    pre_nms_top_n: int = 2000
    proposal_nms_thresh: float = 0.7
    proposal_min_size: float = 4.0
    roi_pos_iou: float = 0.5
    log_every: int = 1


def stop_proposal_gradient(proposals):
    """Treat proposal coordinates as fixed values: identical numbers, no
    gradient path. Torch tensors are detached; numpy arrays are already
    gradient-opaque and pass through."""
    if isinstance(proposals, torch.Tensor):
        return proposals.detach()
    return proposals


def parameter_hash(params) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(p.detach().numpy().tobytes())
    return h.hexdigest()


def group_hashes(model: Detector) -> dict[str, str]:
    return {name: parameter_hash(params) for name, params in model.parameter_groups().items()}


def model_hash(model: Detector) -> str:
    return parameter_hash([p for _, p in sorted(model.named_parameters())])


def _sample_balanced(rng, pos_idx, neg_idx, batch, pos_fraction, strict_ratio: bool):
    """Quota sampling: positives up to batch*pos_fraction; negatives fill
    the remainder, or under strict_ratio match the positive count exactly
    (pos:neg 1:1) so a handful of positives is never drowned. Images
    without positives still contribute a few negatives."""
    pos_quota = int(round(batch * pos_fraction))
    n_pos = min(len(pos_idx), pos_quota)
    pos = rng.permutation(pos_idx)[:n_pos] if len(pos_idx) else np.array([], dtype=np.int64)
    if strict_ratio:
        neg_quota = n_pos if n_pos else max(batch // 8, 1)
    else:
        neg_quota = batch - n_pos
    n_neg = min(len(neg_idx), neg_quota)
    neg = rng.permutation(neg_idx)[:n_neg] if len(neg_idx) else np.array([], dtype=np.int64)
    return pos.astype(np.int64), neg.astype(np.int64)


def _gt_arrays(annotations):
    """(annotated target boxes+classes, ignore boxes) for training."""
    boxes, classes, ignore = [], [], []
    for ann in annotations:
        if ann.annotated:
            boxes.append(ann.box.as_array())
            classes.append(ann.class_id)
        else:
            ignore.append(ann.box.as_array())
    boxes = np.stack(boxes) if boxes else np.zeros((0, 4))
    ignore = np.stack(ignore) if ignore else np.zeros((0, 4))
    return boxes, np.asarray(classes, dtype=np.int64), ignore


class StageTrainer:
    """Runs one image-at-a-time SGD over a dataset for a single stage."""

    def __init__(self, model: Detector, spec: StageSpec, opts: TrainOptions,
                 rng: np.random.Generator):
        self.model = model
        self.spec = spec
        self.opts = opts
        self.rng = rng
        groups = model.parameter_groups()
        unknown = spec.trainable_groups - set(groups)
        if unknown:
            raise ValueError(f"stage trains unknown parameter groups {sorted(unknown)}")
        self.trainable = [p for g in sorted(spec.trainable_groups) for p in groups[g]]
        self.frozen_groups = {g: ps for g, ps in groups.items() if g not in spec.trainable_groups}
        self.optimizer = torch.optim.SGD(self.trainable, lr=spec.learning_rate,
                                         momentum=opts.momentum)

    def _check(self, term: str, value: torch.Tensor, iteration: int) -> torch.Tensor:
        if not torch.isfinite(value):
            raise TrainingDiverged(term, iteration, float(value.detach()))
        return value

    def _rpn_losses(self, fused, anchors, sample):
        boxes, _, ignore = _gt_arrays(sample.annotations)
        obj, deltas = self.model.rpn(fused.data)
        inside_idx = np.where(inside_image_mask(anchors, sample.image.shape[-2:]))[0]
        labels, targets = assign_rpn_targets(anchors[inside_idx], boxes, ignore_boxes=ignore)
        pos_idx, neg_idx = _sample_balanced(
            self.rng, np.where(labels == 1)[0], np.where(labels == 0)[0],
            self.opts.rpn_batch, self.opts.rpn_pos_fraction,
            strict_ratio=self.opts.rpn_strict_ratio,
        )
        sel = np.concatenate([pos_idx, neg_idx])
        sel_global = inside_idx[sel]
        sel_labels = torch.from_numpy(labels[sel].astype(np.float32))
        cls = rpn_class_loss(obj[sel_global], sel_labels)
        if len(pos_idx):
            pred = deltas[inside_idx[pos_idx]]
            tgt = torch.from_numpy(targets[pos_idx])
            bbox = bbox_regression_loss(pred, tgt)
        else:
            bbox = deltas.sum() * 0.0
        return cls, bbox, obj, deltas

    def _proposals(self, obj, deltas, anchors, image_hw):
        inside = inside_image_mask(anchors, image_hw)
        props, _ = generate_proposals(
            torch.sigmoid(obj).detach().numpy()[inside],
            stop_proposal_gradient(deltas).numpy()[inside],
            anchors[inside],
            image_hw,
            pre_nms_top_n=self.opts.pre_nms_top_n,
            post_nms_top_n=self.opts.proposal_count,
            nms_thresh=self.opts.proposal_nms_thresh,
            min_size=self.opts.proposal_min_size,
        )
        return props

    def _frcnn_losses(self, fused, proposals, sample):
        boxes, classes, ignore = _gt_arrays(sample.annotations)
        rois = proposals
        if boxes.shape[0]:
            rois = np.concatenate([rois, boxes]) if rois.shape[0] else boxes
        if rois.shape[0] == 0:
            zero = fused.data.sum() * 0.0
            return zero, zero.clone()
        labels = np.zeros(rois.shape[0], dtype=np.int64)
        target_deltas = np.zeros((rois.shape[0], 4))
        if boxes.shape[0]:
            ious = iou_matrix(rois, boxes)
            best = ious.argmax(axis=1)
            best_iou = ious.max(axis=1)
            pos_mask = best_iou >= self.opts.roi_pos_iou
            labels[pos_mask] = classes[best[pos_mask]]
            if pos_mask.any():
                target_deltas[pos_mask] = encode_boxes(boxes[best[pos_mask]], rois[pos_mask])
        usable = np.ones(rois.shape[0], dtype=bool)
        if ignore.shape[0]:
            bg_on_hidden = (labels == 0) & (iou_matrix(rois, ignore).max(axis=1) >= 0.5)
            usable &= ~bg_on_hidden  # never push unannotated people as background
        pos_idx, neg_idx = _sample_balanced(
            self.rng,
            np.where(usable & (labels > 0))[0],
            np.where(usable & (labels == 0))[0],
            self.opts.frcnn_batch,
            self.opts.frcnn_pos_fraction,
            strict_ratio=False,
        )
        sel = np.concatenate([pos_idx, neg_idx])
        if sel.size == 0:
            zero = fused.data.sum() * 0.0
            return zero, zero.clone()
        blocks = roi_pool(fused.data, rois[sel], fused.stride)
        logits, deltas = self.model.frcnn(blocks)
        sel_labels = torch.from_numpy(labels[sel])
        cls = roi_class_loss(logits, sel_labels)
        bbox = roi_bbox_loss(deltas, sel_labels, torch.from_numpy(target_deltas[sel]))
        return cls, bbox

    def run(self, dataset, start_iteration: int = 0, log: list | None = None) -> list[dict]:
        spec, opts = self.spec, self.opts
        before = {g: parameter_hash(ps) for g, ps in self.frozen_groups.items()}
        for p in self.model.parameters():
            p.requires_grad_(False)
        for p in self.trainable:
            p.requires_grad_(True)

        log = [] if log is None else log
        active = spec.active_losses
        need_rpn = bool(active & {"rpn_cls", "rpn_bbox"})
        need_frcnn = bool(active & {"frcnn_cls", "frcnn_bbox"})
        need_cfn = "cfn" in active
        body_grad = "body-pretrained" in spec.trainable_groups
        extra_grad = bool(
            spec.trainable_groups & {"aggregation-branches", "side-branch"}
        )

        for it in range(start_iteration, spec.iterations):
            sample = dataset[it % len(dataset)]
            image_t = self.model.image_to_tensor(sample.image)
            channel_t = (
                self.model.channel_input_tensor(sample.channel_input)
                if sample.channel_input is not None
                else None
            )
            fused, agg = self.model.forward_features(
                image_t, channel_t, body_grad=body_grad, extra_grad=extra_grad
            )
            terms = {name: torch.zeros(()) for name in LOSS_TERMS}
            if need_cfn:
                if sample.supervisor is None:
                    raise ValueError("channel-supervised stage needs supervisor maps")
                sup = SupervisorMap.from_channel_map(sample.supervisor)
                pred = self.model.predict_channel(agg, sample.image.shape[-2:])
                terms["cfn"] = self._check("cfn", pixel_loss(pred, sup), it)

            anchors = None
            obj = deltas = None
            if need_rpn or need_frcnn:
                mh, mw = fused.data.shape[-2:]
                anchors = generate_anchors(self.model.anchor_config, mh, mw)
            if need_rpn:
                cls, bbox, obj, deltas = self._rpn_losses(fused, anchors, sample)
                terms["rpn_cls"] = self._check("rpn_cls", cls, it)
                terms["rpn_bbox"] = self._check("rpn_bbox", bbox, it)
            if need_frcnn:
                if obj is None:
                    with torch.no_grad():
                        obj, deltas = self.model.rpn(fused.data)
                proposals = self._proposals(obj, deltas, anchors, sample.image.shape[-2:])
                cls, bbox = self._frcnn_losses(fused, proposals, sample)
                terms["frcnn_cls"] = self._check("frcnn_cls", cls, it)
                terms["frcnn_bbox"] = self._check("frcnn_bbox", bbox, it)

            loss = total_loss(
                terms["cfn"], terms["rpn_cls"], terms["rpn_bbox"],
                terms["frcnn_cls"], terms["frcnn_bbox"], opts.weights,
            )
            self._check("total", loss, it)
            self.optimizer.zero_grad()
            loss.backward()
            self.optimizer.step()
            if it % opts.log_every == 0:
                entry = {"stage": spec.name, "iteration": it,
                         "total": float(loss.detach())}
                entry.update(
                    {k: float(v.detach()) for k, v in terms.items() if k in active}
                )
                log.append(entry)

        after = {g: parameter_hash(ps) for g, ps in self.frozen_groups.items()}
        changed = [g for g in before if before[g] != after[g]]
        if changed:
            raise RuntimeError(f"frozen parameter groups changed during stage: {changed}")
        for p in self.model.parameters():
            p.requires_grad_(True)
        return log


def train_stage(model: Detector, dataset, spec: StageSpec,
                opts: TrainOptions = TrainOptions(),
                rng: np.random.Generator | None = None) -> list[dict]:
    """Train one stage; parameters outside the stage's groups are
    bit-identical afterwards. Returns the per-iteration metrics log."""
    if len(dataset) == 0:
        raise ValueError("dataset must be non-empty")
    rng = rng or np.random.default_rng(opts.seed)
    return StageTrainer(model, spec, opts, rng).run(dataset)


def run_training(
    model: Detector,
    dataset,
    plan: list[StageSpec],
    opts: TrainOptions = TrainOptions(),
    checkpoint_path: str | Path | None = None,
    fingerprint: str = "",
    resume: bool = False,
    config_values: dict | None = None,
) -> list[dict]:
    """Run a full stage plan with optional stage-boundary checkpointing.

    With resume=True and an existing checkpoint, training continues from
    the recorded stage cursor with restored parameters and RNG state,
    producing the same final parameters as an uninterrupted run.
    """
    if len(dataset) == 0:
        raise ValueError("dataset must be non-empty")
    rng = np.random.default_rng(opts.seed)
    start_stage = 0
    log: list[dict] = []
    if resume and checkpoint_path and Path(checkpoint_path).exists():
        cursor = load_checkpoint(checkpoint_path, model, fingerprint)
        rng.bit_generator.state = cursor["rng_state"]
        start_stage = cursor["stage_index"]
    torch.manual_seed(opts.seed)  # fixed point for any torch-side sampling
    for si in range(start_stage, len(plan)):
        StageTrainer(model, plan[si], opts, rng).run(dataset, log=log)
        if checkpoint_path:
            save_checkpoint(
                checkpoint_path, model, fingerprint=fingerprint,
                stage_index=si + 1, iteration=0, rng_state=rng.bit_generator.state,
                config_values=config_values,
            )
    return log


# -------------------------------------------------------------- checkpoints


def save_checkpoint(path, model: Detector, fingerprint: str = "",
                    stage_index: int = 0, iteration: int = 0,
                    rng_state: dict | None = None,
                    config_values: dict | None = None) -> None:
    """Checkpoint = zip of one tensor file per parameter plus a manifest
    (config fingerprint, stage cursor, RNG state). Roundtrips bit-exact."""
    names = []
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, param in sorted(model.named_parameters()):
            names.append(name)
            zf.writestr(f"params/{name}.ten",
                        tensorio.tensor_to_bytes(param.detach().numpy()))
        manifest = {
            "format": "chandet-checkpoint-v1",
            "fingerprint": fingerprint,
            "stage_index": stage_index,
            "iteration": iteration,
            "rng_state": _encode_rng_state(rng_state),
            "parameters": names,
            "config_values": config_values,
        }
        zf.writestr("manifest.json", json.dumps(manifest, indent=1, sort_keys=True))
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path, model: Detector, fingerprint: str = "") -> dict:
    """Restore parameters; returns the manifest cursor. A fingerprint
    mismatch (when both sides provide one) is an error."""
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if fingerprint and manifest["fingerprint"] and manifest["fingerprint"] != fingerprint:
            raise CheckpointMismatch(
                f"checkpoint fingerprint {manifest['fingerprint'][:12]}... does not match "
                f"config fingerprint {fingerprint[:12]}..."
            )
        params = dict(model.named_parameters())
        if set(manifest["parameters"]) != set(params):
            raise CheckpointMismatch("checkpoint parameter set does not match the model")
        with torch.no_grad():
            for name in manifest["parameters"]:
                arr = tensorio.tensor_from_bytes(zf.read(f"params/{name}.ten"))
                if tuple(arr.shape) != tuple(params[name].shape):
                    raise CheckpointMismatch(f"shape mismatch for parameter {name}")
                params[name].copy_(torch.from_numpy(arr))
    return {
        "stage_index": manifest["stage_index"],
        "iteration": manifest["iteration"],
        "rng_state": _decode_rng_state(manifest["rng_state"]),
        "fingerprint": manifest["fingerprint"],
        "config_values": manifest.get("config_values"),
    }


def read_checkpoint_manifest(path) -> dict:
    """Manifest only (no parameter loading)."""
    with zipfile.ZipFile(path) as zf:
        return json.loads(zf.read("manifest.json"))


def _encode_rng_state(state: dict | None):
    if state is None:
        return None
    return json.loads(json.dumps(state, default=int))


def _decode_rng_state(state):
    return state


# ------------------------------------------------- side-branch pretraining


def pretrain_side_branch(dataset, detector_config, opts: TrainOptions = TrainOptions(),
                         iterations: int = 200, learning_rate: float = 1e-2):
    """Train a detector that relies on the side branch alone and export
    the side-branch weights for initializing an integrated model.

    Returns (side-branch state dict, the trained side-branch-only model).
    """
    cfg = replace(detector_config, mode="side_branch")
    model = SideBranchOnlyDetector(cfg)
    spec = StageSpec(
        "joint",
        {"side-branch", "rpn", "frcnn"},
        {"rpn_cls", "rpn_bbox", "frcnn_cls", "frcnn_bbox"},
        iterations,
        learning_rate,
    )
    rng = np.random.default_rng(opts.seed)
    StageTrainer(model, spec, opts, rng).run(dataset)
    state = {k: v.detach().clone() for k, v in model.side_branch.state_dict().items()}
    return state, model


class SideBranchOnlyDetector(Detector):
    """A detector whose heads consume only the side-branch output."""

    def __init__(self, config):
        from .heads import FRCNNHead, RPNHead  # sibling heads with narrower input

        super().__init__(config)
        gen = torch.Generator().manual_seed(config.init_seed + 1)
        self.rpn = RPNHead(config.side_branch_channels, self.anchor_config.anchors_per_cell,
                           mid_channels=config.rpn_mid_channels, generator=gen)
        self.frcnn = FRCNNHead(config.side_branch_channels, fc_width=config.frcnn_fc_width,
                               class_count=config.class_count, generator=gen)

    def forward_features(self, image, channel_input=None, body_grad=True, extra_grad=True):
        if channel_input is None:
            raise ValueError("side-branch-only detector requires a channel input")
        with torch.set_grad_enabled(extra_grad):
            sb = self.side_branch(channel_input)
        if not extra_grad:
            sb = type(sb)(sb.data.detach(), sb.stride)
        return sb, None
