"""Multi-task loss, single-image SGD steps and the full training loop.

Each iteration processes one image: assign anchor targets, sample a balanced
RPN minibatch, generate proposals with the current weights (augmented by the
ground-truth boxes), sample a head minibatch, and minimize

    total = rpn_cls + w1 * rpn_reg + head_cls + w2 * head_reg

where both regression terms average over their foreground count only. The
whole loop is driven by one seed and reproduces its loss history bit for bit.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .boxes import AnchorConfig, AnchorGrid, Box
from .checkpoint import Checkpoint, save_checkpoint
from .data import DatasetManifest, prepare_input, rescale_box
from .errors import ConfigError, ContractError, NumericError
from .model import (BackboneConfig, DetectorConfig, DetectorModel,
                    backbone_forward, default_backbone, generate_proposals,
                    head_batch_forward, roi_pool, rpn_delta_rows, rpn_forward,
                    rpn_logit_rows)
from .optim import SgdConfig, sgd_step, zero_grads
from .ppm import load_ppm
from .targets import (FG, RpnTargets, assign_head_targets, assign_rpn_targets,
                      sample_balanced, sample_rpn_minibatch)


@dataclass(frozen=True)
class TrainConfig:
    """Training-loop knobs; defaults are the package-wide reference values."""

    iterations: int = 2000
    learning_rate: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 0.0
    lr_decay_factor: float = 0.1
    lr_decay_at: float = 0.75       # fraction of iterations before the decay
    seed: int = 0
    image_size: int = 128
    rpn_batch: int = 256
    rpn_fg_fraction: float = 0.5
    rpn_fg_iou: float = 0.7
    rpn_bg_iou: float = 0.3
    head_batch: int = 32
    head_fg_fraction: float = 0.25
    head_fg_iou: float = 0.5
    rpn_reg_weight: float = 1.0
    head_reg_weight: float = 1.0
    stop_loss: float = 0.0          # 0 disables the early-stop rule
    stop_window: int = 100
    checkpoint_every: int = 0       # 0 = only at termination
    head_hidden: int = 256
    roi_size: int = 7

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        # 0 is allowed here (a no-op step); SgdConfig itself demands > 0
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.image_size < 16:
            raise ConfigError("image_size must be >= 16")
        if not 0.0 < self.lr_decay_at <= 1.0:
            raise ConfigError("lr_decay_at must be in (0, 1]")


@dataclass
class LossBreakdown:
    """Per-term losses of one step; ``total`` is the optimized sum."""

    rpn_cls: float
    rpn_reg: float
    head_cls: float
    head_reg: float
    total: float
    tensor: Tensor | None = field(default=None, repr=False, compare=False)

    def as_row(self) -> list[float]:
        return [self.rpn_cls, self.rpn_reg, self.head_cls, self.head_reg, self.total]


@dataclass
class TrainingSample:
    """One prepared image with its scaled ground truth."""

    image: Tensor            # (3, S, S), normalized
    gt_boxes: np.ndarray     # (G, 4) in prepared-image pixels
    gt_labels: np.ndarray    # (G,) vocabulary indices


@dataclass
class StepPlan:
    """The non-differentiable decisions of one step (targets and samples),
    held fixed so the loss is a smooth function of the parameters."""

    anchors: AnchorGrid
    rpn_targets: RpnTargets
    rpn_sample: np.ndarray
    head_boxes: np.ndarray       # (M, 4) sampled proposal boxes
    head_labels: np.ndarray      # (M,) 0 = background
    head_deltas: np.ndarray      # (M, 4) regression targets, valid at labels > 0


def load_samples(manifest: DatasetManifest, records, cfg: TrainConfig,
                 stride: int) -> list[TrainingSample]:
    """Load, resize and normalize every record up front (desk-scale data)."""
    samples = []
    size = cfg.image_size
    for ann in records:
        raw = load_ppm(manifest.image_path(ann))
        _, h, w = raw.shape
        image = prepare_input(raw, size, size, stride=stride)
        sx, sy = size / w, size / h
        boxes = [rescale_box(b, sx, sy) for _, b in ann.boxes]
        labels = [manifest.classes.index(name) for name, _ in ann.boxes]
        samples.append(TrainingSample(
            image=image,
            gt_boxes=(np.stack([b.as_array() for b in boxes])
                      if boxes else np.zeros((0, 4))),
            gt_labels=np.asarray(labels, dtype=np.int64)))
    return samples


def _zero_scalar() -> Tensor:
    return Tensor(np.zeros(()))


def build_plan(model: DetectorModel, sample: TrainingSample, rpn_objectness,
               rpn_deltas, cfg: TrainConfig, det_cfg: DetectorConfig,
               rng: np.random.Generator) -> StepPlan:
    """Derive targets and minibatch samples from the current RPN outputs."""
    _, h, w = sample.image.shape
    anchors = model.anchors_for(w, h)
    rpn_targets = assign_rpn_targets(anchors, sample.gt_boxes,
                                     cfg.rpn_fg_iou, cfg.rpn_bg_iou)
    rpn_sample = sample_rpn_minibatch(rpn_targets, cfg.rpn_batch,
                                      cfg.rpn_fg_fraction, rng)
    proposals = generate_proposals(rpn_objectness, rpn_deltas, anchors, w, h, det_cfg)
    boxes = [p.box.as_array() for p in proposals]
    boxes.extend(sample.gt_boxes)  # every gt gets one perfect proposal
    prop_boxes = np.stack(boxes) if boxes else np.zeros((0, 4))
    head_targets = assign_head_targets(prop_boxes, sample.gt_boxes,
                                       sample.gt_labels, cfg.head_fg_iou)
    head_sample = sample_balanced(head_targets.fg_indices, head_targets.bg_indices,
                                  cfg.head_batch, cfg.head_fg_fraction, rng)
    return StepPlan(anchors=anchors, rpn_targets=rpn_targets, rpn_sample=rpn_sample,
                    head_boxes=head_targets.boxes[head_sample],
                    head_labels=head_targets.labels[head_sample],
                    head_deltas=head_targets.deltas[head_sample])


def forward_and_loss(model: DetectorModel, sample: TrainingSample,
                     cfg: TrainConfig, det_cfg: DetectorConfig | None = None,
                     rng: np.random.Generator | None = None,
                     plan: StepPlan | None = None) -> tuple[LossBreakdown, StepPlan]:
    """One full forward pass plus the four-term loss, on the tape.

    Without a ``plan`` the step derives targets and minibatches from its own
    RPN outputs (requires ``rng``); passing a fixed plan makes the loss a
    deterministic, differentiable function of the parameters, which the
    gradient checks rely on.
    """
    det_cfg = det_cfg if det_cfg is not None else DetectorConfig()
    fmap = backbone_forward(sample.image, model)
    rpn_out = rpn_forward(fmap, model)
    if plan is None:
        if rng is None:
            raise ContractError("forward_and_loss needs an rng when no plan is given")
        plan = build_plan(model, sample, rpn_out.objectness, rpn_out.deltas,
                          cfg, det_cfg, rng)

    if plan.rpn_sample.size == 0:
        raise ContractError("zero sampled anchors; cannot form an RPN minibatch")

    # RPN classification over the sampled anchors
    logit_rows = rpn_logit_rows(rpn_out)
    sampled_logits = ad.gather_rows(logit_rows, plan.rpn_sample)
    rpn_labels = plan.rpn_targets.labels[plan.rpn_sample]
    rpn_cls = ad.cross_entropy(ad.softmax(sampled_logits), rpn_labels)

    # RPN regression over the foreground part of the minibatch
    fg_anchor_idx = plan.rpn_sample[rpn_labels == FG]
    if fg_anchor_idx.size:
        delta_rows = rpn_delta_rows(rpn_out)
        pred = ad.gather_rows(delta_rows, fg_anchor_idx)
        target = Tensor(plan.rpn_targets.deltas[fg_anchor_idx])
        rpn_reg = ad.smooth_l1(pred, target)
    else:
        rpn_reg = _zero_scalar()

    # head losses over the sampled proposals
    m = plan.head_boxes.shape[0]
    k = model.n_classes
    if m:
        d = model.backbone_config.out_channels * model.roi_size ** 2
        pooled = [ad.reshape(roi_pool(fmap, Box.from_array(b), model.roi_size,
                                      model.roi_size, model.stride), (1, d))
                  for b in plan.head_boxes]
        probs, deltas = head_batch_forward(ad.concat_rows(pooled), model)
        head_cls = ad.cross_entropy(probs, plan.head_labels)
        fg_pos = np.flatnonzero(plan.head_labels > 0)
        if fg_pos.size:
            flat = ad.reshape(deltas, (m * k, 4))
            rows = fg_pos * k + (plan.head_labels[fg_pos] - 1)
            pred = ad.gather_rows(flat, rows)
            head_reg = ad.smooth_l1(pred, Tensor(plan.head_deltas[fg_pos]))
        else:
            head_reg = _zero_scalar()
    else:
        head_cls = _zero_scalar()
        head_reg = _zero_scalar()

    total = ad.add(ad.add(rpn_cls, ad.scale(rpn_reg, cfg.rpn_reg_weight)),
                   ad.add(head_cls, ad.scale(head_reg, cfg.head_reg_weight)))
    breakdown = LossBreakdown(rpn_cls=rpn_cls.item(), rpn_reg=rpn_reg.item(),
                              head_cls=head_cls.item(), head_reg=head_reg.item(),
                              total=total.item(), tensor=total)
    return breakdown, plan


def train_step(model: DetectorModel, sample: TrainingSample, opt_state: dict,
               cfg: TrainConfig, rng: np.random.Generator,
               det_cfg: DetectorConfig | None = None,
               learning_rate: float | None = None) -> LossBreakdown:
    """One SGD update on one image; mutates the model in place."""
    zero_grads(model.params)
    breakdown, _ = forward_and_loss(model, sample, cfg, det_cfg, rng)
    ad.backward(breakdown.tensor)
    lr = cfg.learning_rate if learning_rate is None else learning_rate
    if lr > 0:  # lr 0 is a sanctioned no-op (parameters stay bit-identical)
        sgd_step(model.params, opt_state,
                 SgdConfig(learning_rate=lr, momentum=cfg.momentum,
                           weight_decay=cfg.weight_decay))
    return breakdown


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: np.ndarray  # (n, 5): rpn_cls, rpn_reg, head_cls, head_reg, total


def train_on_samples(samples: list[TrainingSample], classes, cfg: TrainConfig,
                     backbone: BackboneConfig | None = None,
                     anchors: AnchorConfig | None = None,
                     det_cfg: DetectorConfig | None = None,
                     checkpoint_path: str | os.PathLike | None = None,
                     log=None) -> TrainResult:
    """Train a fresh model on in-memory samples.

    Stops at ``cfg.iterations`` or once the trailing ``stop_window`` mean
    total loss drops below ``cfg.stop_loss`` (if enabled). Writes a
    checkpoint every ``cfg.checkpoint_every`` steps and at termination when
    ``checkpoint_path`` is given. A non-finite loss aborts with a diagnostic
    checkpoint.
    """
    if not samples:
        raise ContractError("training split is empty")
    model = DetectorModel(n_classes=len(classes), backbone=backbone,
                          anchors=anchors, head_hidden=cfg.head_hidden,
                          roi_size=cfg.roi_size, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt_state: dict[str, np.ndarray] = {}
    history: list[list[float]] = []
    decay_after = cfg.lr_decay_at * cfg.iterations

    def snapshot(iteration):
        return Checkpoint.from_model(model, classes, momentum=opt_state,
                                     iteration=iteration, loss_history=history,
                                     image_size=cfg.image_size)

    for it in range(1, cfg.iterations + 1):
        idx = int(rng.integers(0, len(samples)))
        lr = cfg.learning_rate * (cfg.lr_decay_factor if it > decay_after else 1.0)
        try:
            breakdown = train_step(model, samples[idx], opt_state, cfg, rng,
                                   det_cfg, learning_rate=lr)
        except NumericError:
            if checkpoint_path is not None:
                save_checkpoint(snapshot(it - 1), str(checkpoint_path) + ".diag")
            raise
        history.append(breakdown.as_row())
        if log is not None:
            log(it, breakdown)
        if checkpoint_path is not None and cfg.checkpoint_every \
                and it % cfg.checkpoint_every == 0:
            save_checkpoint(snapshot(it), checkpoint_path)
        if cfg.stop_loss > 0 and len(history) >= cfg.stop_window:
            window = [row[4] for row in history[-cfg.stop_window:]]
            if float(np.mean(window)) < cfg.stop_loss:
                break

    final = snapshot(len(history))
    if checkpoint_path is not None:
        save_checkpoint(final, checkpoint_path)
    return TrainResult(checkpoint=final,
                       history=np.asarray(history, dtype=np.float64).reshape(-1, 5))


def train_loop(manifest: DatasetManifest, cfg: TrainConfig,
               backbone: BackboneConfig | None = None,
               anchors: AnchorConfig | None = None,
               det_cfg: DetectorConfig | None = None,
               checkpoint_path: str | os.PathLike | None = None,
               log=None) -> TrainResult:
    """Load the manifest's train split (or all records when unsplit) and
    train; see :func:`train_on_samples` for the loop semantics."""
    records = (manifest.train_records if manifest.split is not None
               else manifest.annotations)
    if not records:
        raise ContractError("training split is empty")
    stride = (backbone or default_backbone()).downsample
    samples = load_samples(manifest, records, cfg, stride)
    return train_on_samples(samples, manifest.classes, cfg, backbone=backbone,
                            anchors=anchors, det_cfg=det_cfg,
                            checkpoint_path=checkpoint_path, log=log)


def save_loss_csv(history: np.ndarray, path: str | os.PathLike) -> None:
    """Loss history as CSV: iteration, rpn_cls, rpn_reg, head_cls, head_reg, total."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "rpn_cls", "rpn_reg", "head_cls",
                         "head_reg", "total"])
        for i, row in enumerate(np.asarray(history).reshape(-1, 5), start=1):
            writer.writerow([i] + [repr(float(v)) for v in row])
