"""Axis-aligned box arithmetic: IoU, anchor grids, delta coding, clipping, NMS.

Everything here is a pure function over immutable values. Single-box
operations work on :class:`Box` instances; the hot paths used by the
detector and the training loop have ``*_array`` twins operating on
``(N, 4)`` float arrays laid out as ``xmin, ymin, xmax, ymax``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, NumericError, ValidationError


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle in pixel coordinates with positive area."""

    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        vals = (self.xmin, self.ymin, self.xmax, self.ymax)
        if not all(math.isfinite(v) for v in vals):
            raise ValidationError(f"box coordinates must be finite, got {vals}")
        if not (self.xmax > self.xmin and self.ymax > self.ymin):
            raise ValidationError(f"box must have positive area, got {vals}")

    @property
    def width(self) -> float:
        return self.xmax - self.xmin

    @property
    def height(self) -> float:
        return self.ymax - self.ymin

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_array(self) -> np.ndarray:
        return np.array([self.xmin, self.ymin, self.xmax, self.ymax])

    @staticmethod
    def from_array(a) -> "Box":
        return Box(float(a[0]), float(a[1]), float(a[2]), float(a[3]))


@dataclass(frozen=True)
class ScoredBox:
    """A box plus a score in [0, 1] (e.g. RPN objectness)."""

    box: Box
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValidationError(f"score must be in [0, 1], got {self.score}")


@dataclass(frozen=True)
class BoxDelta:
    """Center offsets normalized by anchor size plus log-scale size ratios."""

    tx: float
    ty: float
    tw: float
    th: float

    def __post_init__(self):
        vals = (self.tx, self.ty, self.tw, self.th)
        if not all(math.isfinite(v) for v in vals):
            raise NumericError(f"box delta must be finite, got {vals}")

    def as_array(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tw, self.th])


@dataclass(frozen=True)
class AnchorConfig:
    """Anchor layout: one anchor per (scale, ratio) pair at every grid cell.

    A scale-s anchor covers area (base_size * s)^2 and a ratio-r anchor has
    height/width = r, so the defaults give 4 * 3 = 12 anchors per position.
    """

    stride: int = 16
    scales: tuple[float, ...] = (0.25, 0.5, 1.0, 2.0)
    ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    base_size: float = 64.0

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        if self.stride < 1:
            raise ConfigError(f"stride must be a positive integer, got {self.stride}")
        if not self.scales or any(s <= 0 for s in self.scales):
            raise ConfigError(f"scales must be positive, got {self.scales}")
        if not self.ratios or any(r <= 0 for r in self.ratios):
            raise ConfigError(f"ratios must be positive, got {self.ratios}")
        if self.base_size <= 0:
            raise ConfigError(f"base_size must be positive, got {self.base_size}")

    @property
    def anchors_per_position(self) -> int:
        return len(self.scales) * len(self.ratios)


@dataclass
class AnchorGrid:
    """Materialized anchors for one image size, in a fixed deterministic order.

    Anchor i sits at grid cell (pos_y[i], pos_x[i]) with scale scale_idx[i]
    and ratio ratio_idx[i]; the order is row-major over positions with the
    (scale, ratio) pairs minor, matching how the RPN's conv channels are
    unpacked. ``inside`` flags anchors fully contained in the image; anchors
    crossing the border are kept, not clipped.
    """

    config: AnchorConfig
    image_w: int
    image_h: int
    grid_w: int
    grid_h: int
    boxes: np.ndarray = field(repr=False)      # (N, 4)
    inside: np.ndarray = field(repr=False)     # (N,) bool
    pos_x: np.ndarray = field(repr=False)
    pos_y: np.ndarray = field(repr=False)
    scale_idx: np.ndarray = field(repr=False)
    ratio_idx: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return self.boxes.shape[0]

    def box(self, i: int) -> Box:
        return Box.from_array(self.boxes[i])


def generate_anchors(image_w: int, image_h: int, cfg: AnchorConfig) -> AnchorGrid:
    """Tile anchors over the image: floor(w/stride) * floor(h/stride) cells,
    anchors_per_position boxes per cell, centered on cell centers.
    """
    if image_w < cfg.stride or image_h < cfg.stride:
        raise ConfigError(
            f"image {image_w}x{image_h} is smaller than one stride ({cfg.stride})")
    gw = image_w // cfg.stride
    gh = image_h // cfg.stride
    a = cfg.anchors_per_position

    # per-position template, (scale, ratio) pairs scale-major
    sides = np.repeat(cfg.base_size * np.asarray(cfg.scales), len(cfg.ratios))
    roots = np.sqrt(np.tile(np.asarray(cfg.ratios), len(cfg.scales)))
    heights = sides * roots
    widths = sides / roots
    scale_idx = np.repeat(np.arange(len(cfg.scales)), len(cfg.ratios))
    ratio_idx = np.tile(np.arange(len(cfg.ratios)), len(cfg.scales))

    xs = (np.arange(gw) + 0.5) * cfg.stride
    ys = (np.arange(gh) + 0.5) * cfg.stride
    cx = np.repeat(np.tile(xs, gh), a)
    cy = np.repeat(np.repeat(ys, gw), a)
    hw = np.tile(widths, gw * gh) / 2.0
    hh = np.tile(heights, gw * gh) / 2.0

    boxes = np.stack([cx - hw, cy - hh, cx + hw, cy + hh], axis=1)
    inside = ((boxes[:, 0] >= 0) & (boxes[:, 1] >= 0)
              & (boxes[:, 2] <= image_w) & (boxes[:, 3] <= image_h))
    return AnchorGrid(
        config=cfg, image_w=image_w, image_h=image_h, grid_w=gw, grid_h=gh,
        boxes=boxes, inside=inside,
        pos_x=np.tile(np.repeat(np.tile(np.arange(gw), gh), a), 1),
        pos_y=np.repeat(np.arange(gh), gw * a),
        scale_idx=np.tile(scale_idx, gw * gh),
        ratio_idx=np.tile(ratio_idx, gw * gh),
    )


# ---------------------------------------------------------------------------
# IoU


def iou(a: Box, b: Box) -> float:
    """Intersection area over union area, in [0, 1]."""
    iw = min(a.xmax, b.xmax) - max(a.xmin, b.xmin)
    ih = min(a.ymax, b.ymax) - max(a.ymin, b.ymin)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of two (N, 4) / (M, 4) box arrays, shape (N, M)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.clip(np.minimum(a[:, None, 2], b[None, :, 2])
                 - np.maximum(a[:, None, 0], b[None, :, 0]), 0.0, None)
    ih = np.clip(np.minimum(a[:, None, 3], b[None, :, 3])
                 - np.maximum(a[:, None, 1], b[None, :, 1]), 0.0, None)
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


# ---------------------------------------------------------------------------
# delta coding


def encode_array(gt: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """(tx, ty, tw, th) of each ground-truth box relative to its anchor."""
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    wa = anchors[:, 2] - anchors[:, 0]
    ha = anchors[:, 3] - anchors[:, 1]
    xa = anchors[:, 0] + wa / 2
    ya = anchors[:, 1] + ha / 2
    w = gt[:, 2] - gt[:, 0]
    h = gt[:, 3] - gt[:, 1]
    xc = gt[:, 0] + w / 2
    yc = gt[:, 1] + h / 2
    return np.stack([(xc - xa) / wa, (yc - ya) / ha,
                     np.log(w / wa), np.log(h / ha)], axis=1)


def decode_array(deltas: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Exact inverse of :func:`encode_array`."""
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    wa = anchors[:, 2] - anchors[:, 0]
    ha = anchors[:, 3] - anchors[:, 1]
    xa = anchors[:, 0] + wa / 2
    ya = anchors[:, 1] + ha / 2
    with np.errstate(over="ignore"):
        xc = xa + deltas[:, 0] * wa
        yc = ya + deltas[:, 1] * ha
        w = wa * np.exp(deltas[:, 2])
        h = ha * np.exp(deltas[:, 3])
    return np.stack([xc - w / 2, yc - h / 2, xc + w / 2, yc + h / 2], axis=1)


def encode(gt: Box, anchor: Box) -> BoxDelta:
    t = encode_array(gt.as_array(), anchor.as_array())[0]
    return BoxDelta(float(t[0]), float(t[1]), float(t[2]), float(t[3]))


def decode(delta: BoxDelta, anchor: Box) -> Box:
    out = decode_array(delta.as_array(), anchor.as_array())[0]
    if not np.isfinite(out).all():
        raise NumericError(f"decoded box is not finite: {out}")
    return Box.from_array(out)


# ---------------------------------------------------------------------------
# clipping


def clip_array(boxes: np.ndarray, image_w: float, image_h: float) -> np.ndarray:
    """Clamp coordinates to the image; may produce zero-area rows, which the
    caller is expected to filter."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    out = boxes.copy()
    out[:, 0::2] = np.clip(out[:, 0::2], 0.0, image_w)
    out[:, 1::2] = np.clip(out[:, 1::2], 0.0, image_h)
    return out


def clip(b: Box, image_w: float, image_h: float) -> Box:
    """Clamp a box to [0, w] x [0, h]; the box must overlap the image."""
    out = clip_array(b.as_array(), image_w, image_h)[0]
    if out[2] <= out[0] or out[3] <= out[1]:
        raise ContractError(f"box {b} lies entirely outside a {image_w}x{image_h} image")
    return Box.from_array(out)


# ---------------------------------------------------------------------------
# non-maximum suppression


def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float,
                max_keep: int | None = None) -> list[int]:
    """Greedy NMS over array inputs; returns kept indices in descending-score
    order, ties broken by input position."""
    if not 0.0 <= iou_threshold <= 1.0:
        raise ContractError(f"iou_threshold must be in [0, 1], got {iou_threshold}")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    order = np.argsort(-scores, kind="stable")
    keep: list[int] = []
    while order.size:
        i = int(order[0])
        keep.append(i)
        if max_keep is not None and len(keep) >= max_keep:
            break
        rest = order[1:]
        ious = iou_matrix(boxes[i:i + 1], boxes[rest])[0]
        order = rest[ious <= iou_threshold]
    return keep


def nms(scored: list[ScoredBox], iou_threshold: float,
        max_keep: int | None = None) -> list[ScoredBox]:
    """Suppress lower-scored boxes overlapping a kept box above the threshold."""
    if not scored:
        return []
    arr = np.stack([sb.box.as_array() for sb in scored])
    scores = np.array([sb.score for sb in scored])
    return [scored[i] for i in nms_indices(arr, scores, iou_threshold, max_keep)]
