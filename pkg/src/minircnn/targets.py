"""IoU-based target assignment for the RPN and the classification head,
plus balanced foreground/background minibatch sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boxes import AnchorGrid, encode_array, iou_matrix
from .errors import ContractError

FG, BG, IGNORE = 1, 0, -1


@dataclass
class RpnTargets:
    """Per-anchor labels (1 fg / 0 bg / -1 ignore), the matched ground-truth
    index for foreground anchors and their encoded regression targets.

    Background anchors never contribute to the regression loss; anchors
    crossing the image border are ignored outright. ``no_gt`` flags the
    degenerate all-background case of an image without ground truth.
    """

    labels: np.ndarray       # (N,) int
    matched_gt: np.ndarray   # (N,) int, -1 where unmatched
    deltas: np.ndarray       # (N, 4), valid only where labels == FG
    no_gt: bool = False

    @property
    def fg_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels == FG)

    @property
    def bg_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels == BG)


def assign_rpn_targets(anchors: AnchorGrid, gt_boxes: np.ndarray,
                       fg_iou: float = 0.7, bg_iou: float = 0.3) -> RpnTargets:
    """Label anchors by IoU against ground truth.

    An inside anchor is foreground when its best IoU reaches ``fg_iou`` or
    when it is the best anchor of some ground-truth box (so every box gets
    at least one positive); background when its best IoU is below
    ``bg_iou``; ignored in between. Each foreground anchor regresses toward
    its own highest-IoU box.
    """
    if not fg_iou > bg_iou:
        raise ContractError(f"need fg_iou > bg_iou, got {fg_iou} <= {bg_iou}")
    n = len(anchors)
    labels = np.full(n, IGNORE, dtype=np.int64)
    matched = np.full(n, -1, dtype=np.int64)
    deltas = np.zeros((n, 4))

    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    inside = np.flatnonzero(anchors.inside)
    if gt.shape[0] == 0:
        labels[inside] = BG
        return RpnTargets(labels, matched, deltas, no_gt=True)

    ious = iou_matrix(anchors.boxes[inside], gt)  # (n_inside, G)
    best_iou = ious.max(axis=1)
    best_gt = ious.argmax(axis=1)  # ties -> lowest gt index

    labels[inside[best_iou < bg_iou]] = BG
    fg_mask = best_iou >= fg_iou
    # force-label the best anchor(s) of every ground-truth box
    per_gt_best = ious.max(axis=0)
    for g in range(gt.shape[0]):
        if per_gt_best[g] > 0:
            fg_mask |= ious[:, g] == per_gt_best[g]
    fg_local = np.flatnonzero(fg_mask)
    fg_global = inside[fg_local]
    labels[fg_global] = FG
    matched[fg_global] = best_gt[fg_local]
    deltas[fg_global] = encode_array(gt[best_gt[fg_local]], anchors.boxes[fg_global])
    return RpnTargets(labels, matched, deltas)


def sample_balanced(fg_pool: np.ndarray, bg_pool: np.ndarray, batch_size: int,
                    fg_fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Up to fg_fraction*batch_size foreground picks, backfilled with
    background; returns foreground indices first. Short pools give short
    batches."""
    if batch_size < 2:
        raise ContractError(f"batch_size must be >= 2, got {batch_size}")
    if not 0.0 <= fg_fraction <= 1.0:
        raise ContractError(f"fg_fraction must be in [0, 1], got {fg_fraction}")
    n_fg = min(len(fg_pool), int(round(fg_fraction * batch_size)))
    n_bg = min(len(bg_pool), batch_size - n_fg)
    fg = rng.choice(fg_pool, size=n_fg, replace=False) if n_fg else np.empty(0, np.int64)
    bg = rng.choice(bg_pool, size=n_bg, replace=False) if n_bg else np.empty(0, np.int64)
    return np.concatenate([fg, bg]).astype(np.int64)


def sample_rpn_minibatch(targets: RpnTargets, batch_size: int, fg_fraction: float,
                         seed: int | np.random.Generator) -> np.ndarray:
    """Seeded balanced sample of anchor indices for the RPN loss."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return sample_balanced(targets.fg_indices, targets.bg_indices, batch_size,
                           fg_fraction, rng)


@dataclass
class HeadTargets:
    """Per-proposal class labels (0 = background, c+1 for foreground class c)
    and encoded regression targets for the foreground proposals."""

    boxes: np.ndarray        # (P, 4) proposal boxes the targets refer to
    labels: np.ndarray       # (P,) int, 0 = background
    matched_gt: np.ndarray   # (P,) int, -1 where background
    deltas: np.ndarray       # (P, 4), valid only where labels > 0

    @property
    def fg_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels > 0)

    @property
    def bg_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels == 0)


def assign_head_targets(proposal_boxes: np.ndarray, gt_boxes: np.ndarray,
                        gt_labels: np.ndarray, fg_iou: float = 0.5) -> HeadTargets:
    """Match each proposal to its highest-IoU ground-truth box; proposals
    reaching ``fg_iou`` take that box's class, the rest become background.

    During training the caller appends the ground-truth boxes themselves to
    the proposal set so every box owns at least one perfect proposal.
    """
    boxes = np.asarray(proposal_boxes, dtype=np.float64).reshape(-1, 4)
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    cls = np.asarray(gt_labels, dtype=np.int64).reshape(-1)
    p = boxes.shape[0]
    labels = np.zeros(p, dtype=np.int64)
    matched = np.full(p, -1, dtype=np.int64)
    deltas = np.zeros((p, 4))
    if gt.shape[0] and p:
        ious = iou_matrix(boxes, gt)
        best_iou = ious.max(axis=1)
        best_gt = ious.argmax(axis=1)
        fg = np.flatnonzero(best_iou >= fg_iou)
        labels[fg] = cls[best_gt[fg]] + 1
        matched[fg] = best_gt[fg]
        deltas[fg] = encode_array(gt[best_gt[fg]], boxes[fg])
    return HeadTargets(boxes, labels, matched, deltas)
