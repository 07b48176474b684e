"""The two-stage detector: backbone, RPN, proposals, RoI pooling and head.

The network is deliberately small and fully configurable: a stack of
conv/relu/maxpool layers whose cumulative stride must equal the anchor
stride, a region proposal network with twin 1x1 conv heads, and a
fully-connected classification head over RoI-pooled features. All forward
passes run on the autodiff tape so training can backpropagate end to end;
inference wraps them in ``no_grad``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .boxes import (AnchorConfig, AnchorGrid, Box, clip_array, decode_array,
                    generate_anchors, nms_indices)
from .errors import ConfigError, ContractError, ShapeError


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ConvLayer:
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class ReluLayer:
    pass


@dataclass(frozen=True)
class MaxPoolLayer:
    window: int
    stride: int


LayerSpec = Union[ConvLayer, ReluLayer, MaxPoolLayer]


@dataclass(frozen=True)
class BackboneConfig:
    """Ordered layer stack; the product of all strides must equal
    ``downsample``, which in turn must match the anchor stride."""

    layers: tuple[LayerSpec, ...]
    downsample: int

    def __post_init__(self):
        total = 1
        convs = 0
        for layer in self.layers:
            if isinstance(layer, ConvLayer):
                convs += 1
                if layer.out_channels < 1 or layer.kernel < 1 or layer.stride < 1 \
                        or layer.padding < 0:
                    raise ConfigError(f"bad conv layer {layer}")
                total *= layer.stride
            elif isinstance(layer, MaxPoolLayer):
                if layer.window < 1 or layer.stride < 1:
                    raise ConfigError(f"bad maxpool layer {layer}")
                total *= layer.stride
            elif not isinstance(layer, ReluLayer):
                raise ConfigError(f"unknown layer spec {layer!r}")
        if convs == 0:
            raise ConfigError("backbone needs at least one conv layer")
        if total != self.downsample:
            raise ConfigError(
                f"declared downsample {self.downsample} != stride product {total}")

    @property
    def out_channels(self) -> int:
        return [l for l in self.layers if isinstance(l, ConvLayer)][-1].out_channels

    def to_dict(self) -> dict:
        out = []
        for layer in self.layers:
            if isinstance(layer, ConvLayer):
                out.append(["conv", layer.out_channels, layer.kernel, layer.stride,
                            layer.padding])
            elif isinstance(layer, ReluLayer):
                out.append(["relu"])
            else:
                out.append(["maxpool", layer.window, layer.stride])
        return {"layers": out, "downsample": self.downsample}

    @staticmethod
    def from_dict(d: dict) -> "BackboneConfig":
        layers: list[LayerSpec] = []
        for item in d["layers"]:
            if item[0] == "conv":
                layers.append(ConvLayer(*item[1:]))
            elif item[0] == "relu":
                layers.append(ReluLayer())
            elif item[0] == "maxpool":
                layers.append(MaxPoolLayer(*item[1:]))
            else:
                raise ConfigError(f"unknown layer kind {item[0]!r}")
        return BackboneConfig(tuple(layers), d["downsample"])


def default_backbone() -> BackboneConfig:
    """Four conv+relu blocks, each followed by a 2x maxpool: stride 16."""
    layers: list[LayerSpec] = []
    for channels in (16, 32, 64, 64):
        layers += [ConvLayer(channels, 3, 1, 1), ReluLayer(), MaxPoolLayer(2, 2)]
    return BackboneConfig(tuple(layers), downsample=16)


@dataclass(frozen=True)
class DetectorConfig:
    """Proposal filtering and detection reporting knobs."""

    pre_nms_n: int = 600
    post_nms_n: int = 64
    proposal_nms_iou: float = 0.7
    min_proposal_size: float = 4.0
    detection_nms_iou: float = 0.3
    confidence_threshold: float = 0.5

    def __post_init__(self):
        if self.pre_nms_n < 1 or self.post_nms_n < 1:
            raise ConfigError("pre/post NMS keep counts must be >= 1")
        for name in ("proposal_nms_iou", "detection_nms_iou"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        if not 0.0 <= self.confidence_threshold <= 1.0:
            raise ConfigError("confidence_threshold must be in [0, 1]")
        if self.min_proposal_size < 0:
            raise ConfigError("min_proposal_size must be >= 0")


@dataclass(frozen=True)
class Proposal:
    """A clipped candidate region with its objectness probability."""

    box: Box
    objectness: float


@dataclass(frozen=True)
class Detection:
    """Final output: a box, a foreground class index and its confidence."""

    box: Box
    class_id: int
    confidence: float


# ---------------------------------------------------------------------------
# parameters


class DetectorModel:
    """Holds every parameter tensor plus the architecture configs.

    Parameters are He-initialized from a single seed (uniform in
    +-sqrt(6/fan_in), biases zero) and are bit-reproducible for a given
    (architecture, seed) pair.
    """

    def __init__(self, n_classes: int, backbone: BackboneConfig | None = None,
                 anchors: AnchorConfig | None = None, head_hidden: int = 256,
                 roi_size: int = 7, seed: int = 0):
        if n_classes < 1:
            raise ConfigError(f"need at least one foreground class, got {n_classes}")
        if head_hidden < 1 or roi_size < 1:
            raise ConfigError("head_hidden and roi_size must be >= 1")
        self.backbone_config = backbone if backbone is not None else default_backbone()
        self.anchor_config = anchors if anchors is not None else AnchorConfig()
        if self.backbone_config.downsample != self.anchor_config.stride:
            raise ConfigError(
                f"backbone downsample {self.backbone_config.downsample} != "
                f"anchor stride {self.anchor_config.stride}")
        self.n_classes = int(n_classes)
        self.head_hidden = int(head_hidden)
        self.roi_size = int(roi_size)
        self.seed = int(seed)
        self.params: dict[str, Tensor] = {}
        self._build()

    def _build(self) -> None:
        seeds = iter(int(s) for s in np.random.SeedSequence(self.seed).generate_state(64))

        def weight(name, shape, fan_in):
            bound = float(np.sqrt(6.0 / fan_in))
            self.params[name] = ad.uniform(shape, -bound, bound, next(seeds),
                                           requires_grad=True)

        def bias(name, n):
            self.params[name] = ad.zeros([n], requires_grad=True)

        in_c = 3
        for i, layer in enumerate(self.backbone_config.layers):
            if isinstance(layer, ConvLayer):
                fan = in_c * layer.kernel * layer.kernel
                weight(f"backbone.conv{i}.w",
                       [layer.out_channels, in_c, layer.kernel, layer.kernel], fan)
                bias(f"backbone.conv{i}.b", layer.out_channels)
                in_c = layer.out_channels

        c = self.backbone_config.out_channels
        a = self.anchor_config.anchors_per_position
        weight("rpn.conv.w", [c, c, 3, 3], c * 9)
        bias("rpn.conv.b", c)
        weight("rpn.cls.w", [2 * a, c, 1, 1], c)
        bias("rpn.cls.b", 2 * a)
        weight("rpn.reg.w", [4 * a, c, 1, 1], c)
        bias("rpn.reg.b", 4 * a)

        d = c * self.roi_size * self.roi_size
        k = self.n_classes
        weight("head.fc1.w", [d, self.head_hidden], d)
        bias("head.fc1.b", self.head_hidden)
        weight("head.cls.w", [self.head_hidden, k + 1], self.head_hidden)
        bias("head.cls.b", k + 1)
        weight("head.reg.w", [self.head_hidden, 4 * k], self.head_hidden)
        bias("head.reg.b", 4 * k)

    @property
    def stride(self) -> int:
        return self.anchor_config.stride

    def anchors_for(self, image_w: int, image_h: int) -> AnchorGrid:
        return generate_anchors(image_w, image_h, self.anchor_config)


# ---------------------------------------------------------------------------
# forward passes


def backbone_forward(image: Tensor, model: DetectorModel) -> Tensor:
    """Run the conv stack; output spatial dims are exactly input / stride."""
    if image.data.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"expected (3, H, W) image, got {image.shape}")
    s = model.backbone_config.downsample
    _, h, w = image.shape
    if h % s or w % s:
        raise ShapeError(f"input {w}x{h} not divisible by backbone stride {s}")
    x = image
    for i, layer in enumerate(model.backbone_config.layers):
        if isinstance(layer, ConvLayer):
            x = ad.conv2d(x, model.params[f"backbone.conv{i}.w"],
                          model.params[f"backbone.conv{i}.b"],
                          stride=layer.stride, padding=layer.padding)
        elif isinstance(layer, ReluLayer):
            x = ad.relu(x)
        else:
            x = ad.maxpool2d(x, layer.window, layer.stride)
    return x


@dataclass
class RpnOutput:
    """Raw RPN maps. ``cls_logits`` has 2A channels laid out (bg, fg) per
    anchor; ``deltas`` has 4A channels; anchors are minor to positions."""

    cls_logits: Tensor  # (2A, Hf, Wf)
    deltas: Tensor      # (4A, Hf, Wf)

    @property
    def anchors_per_position(self) -> int:
        return self.cls_logits.shape[0] // 2

    @property
    def objectness(self) -> Tensor:
        """Foreground probability per anchor, shape (A, Hf, Wf); detached."""
        a = self.anchors_per_position
        logits = self.cls_logits.data.reshape(a, 2, *self.cls_logits.shape[1:])
        m = logits.max(axis=1, keepdims=True)
        e = np.exp(logits - m)
        return Tensor(e[:, 1] / e.sum(axis=1))


def rpn_forward(fmap: Tensor, model: DetectorModel) -> RpnOutput:
    hidden = ad.relu(ad.conv2d(fmap, model.params["rpn.conv.w"],
                               model.params["rpn.conv.b"], stride=1, padding=1))
    logits = ad.conv2d(hidden, model.params["rpn.cls.w"],
                       model.params["rpn.cls.b"], stride=1, padding=0)
    deltas = ad.conv2d(hidden, model.params["rpn.reg.w"],
                       model.params["rpn.reg.b"], stride=1, padding=0)
    return RpnOutput(cls_logits=logits, deltas=deltas)


def rpn_logit_rows(rpn_out: RpnOutput) -> Tensor:
    """(N_anchors, 2) logit rows in anchor-grid order, still on the tape."""
    a = rpn_out.anchors_per_position
    _, hf, wf = rpn_out.cls_logits.shape
    x = ad.reshape(rpn_out.cls_logits, (a, 2, hf, wf))
    x = ad.transpose(x, (2, 3, 0, 1))
    return ad.reshape(x, (hf * wf * a, 2))


def rpn_delta_rows(rpn_out: RpnOutput) -> Tensor:
    """(N_anchors, 4) regression rows in anchor-grid order, on the tape."""
    a = rpn_out.anchors_per_position
    _, hf, wf = rpn_out.deltas.shape
    x = ad.reshape(rpn_out.deltas, (a, 4, hf, wf))
    x = ad.transpose(x, (2, 3, 0, 1))
    return ad.reshape(x, (hf * wf * a, 4))


def _flat_scores_and_deltas(objectness, deltas, a: int):
    obj = objectness.data if isinstance(objectness, Tensor) else np.asarray(objectness)
    dl = deltas.data if isinstance(deltas, Tensor) else np.asarray(deltas)
    scores = obj.transpose(1, 2, 0).reshape(-1)
    hf, wf = obj.shape[1], obj.shape[2]
    rows = dl.reshape(a, 4, hf, wf).transpose(2, 3, 0, 1).reshape(-1, 4)
    return scores, rows


def generate_proposals(objectness, deltas, anchors: AnchorGrid, image_w: int,
                       image_h: int, cfg: DetectorConfig) -> list[Proposal]:
    """Decode deltas onto anchors, clip, filter tiny boxes, take the top
    ``pre_nms_n`` by objectness, run NMS and keep ``post_nms_n``."""
    a = anchors.config.anchors_per_position
    scores, rows = _flat_scores_and_deltas(objectness, deltas, a)
    if scores.shape[0] != len(anchors):
        raise ShapeError(f"{scores.shape[0]} RPN slots vs {len(anchors)} anchors")
    boxes = clip_array(decode_array(rows, anchors.boxes), image_w, image_h)
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    keep = np.flatnonzero((w >= cfg.min_proposal_size) & (h >= cfg.min_proposal_size))
    if keep.size == 0:
        return []
    order = keep[np.argsort(-scores[keep], kind="stable")][:cfg.pre_nms_n]
    kept = nms_indices(boxes[order], scores[order], cfg.proposal_nms_iou,
                       max_keep=cfg.post_nms_n)
    return [Proposal(Box.from_array(boxes[order[i]]), float(scores[order[i]]))
            for i in kept]


# ---------------------------------------------------------------------------
# RoI pooling


def _roi_bins(box: Box, hf: int, wf: int, out_h: int, out_w: int, stride: int):
    """Feature-space bin boundaries: floor for starts, ceil for ends."""
    x0 = min(max(int(np.floor(box.xmin / stride)), 0), wf - 1)
    y0 = min(max(int(np.floor(box.ymin / stride)), 0), hf - 1)
    x1 = min(max(int(np.ceil(box.xmax / stride)), x0 + 1), wf)
    y1 = min(max(int(np.ceil(box.ymax / stride)), y0 + 1), hf)
    rh = y1 - y0
    rw = x1 - x0

    def edges(start, extent, n):
        spans = []
        for i in range(n):
            lo = start + (i * extent) // n
            hi = start + -((-(i + 1) * extent) // n)  # ceil division
            if hi <= lo:  # empty after rounding: fall back to nearest cell
                hi = lo + 1
            spans.append((lo, hi))
        return spans

    return edges(y0, rh, out_h), edges(x0, rw, out_w)


def roi_pool(fmap: Tensor, proposal: Proposal | Box, out_h: int, out_w: int,
             stride: int) -> Tensor:
    """Max-pool a proposal's feature region into a fixed (C, out_h, out_w).

    The output shape never depends on the proposal size. Gradients route to
    each bin's argmax cell.
    """
    box = proposal.box if isinstance(proposal, Proposal) else proposal
    c, hf, wf = fmap.shape
    if out_h < 1 or out_w < 1:
        raise ContractError("RoI output dims must be >= 1")
    if box.xmin >= wf * stride or box.ymin >= hf * stride:
        raise ContractError(f"proposal {box} lies outside the {wf * stride}x{hf * stride} image")
    row_bins, col_bins = _roi_bins(box, hf, wf, out_h, out_w, stride)

    # small regions make many bins share one span; compute each span once
    urows: dict[tuple, list[int]] = {}
    ucols: dict[tuple, list[int]] = {}
    for i, span in enumerate(row_bins):
        urows.setdefault(span, []).append(i)
    for j, span in enumerate(col_bins):
        ucols.setdefault(span, []).append(j)

    data = fmap.data
    out = np.empty((c, out_h, out_w))
    for (r0, r1), rows in urows.items():
        for (c0, c1), cols in ucols.items():
            val = data[:, r0:r1, c0:c1].max(axis=(1, 2))
            for i in rows:
                for j in cols:
                    out[:, i, j] = val

    def bwd(g):
        # argmax recomputed here (ties to the lowest linear index); within a
        # span each channel hits a distinct cell, so plain fancy += is safe
        if not fmap.requires_grad:
            return
        if fmap.grad is None:
            fmap.grad = np.zeros_like(fmap.data)
        ci = np.arange(c)
        for (r0, r1), rows in urows.items():
            for (c0, c1), cols in ucols.items():
                flat = data[:, r0:r1, c0:c1].reshape(c, -1).argmax(axis=1)
                dr, dc = np.divmod(flat, c1 - c0)
                contrib = g[:, rows][:, :, cols].sum(axis=(1, 2))
                fmap.grad[ci, r0 + dr, c0 + dc] += contrib

    return ad.custom_op("roi_pool", (fmap,), out, bwd)


# ---------------------------------------------------------------------------
# classification head


def head_batch_forward(pooled_rows: Tensor, model: DetectorModel) -> tuple[Tensor, Tensor]:
    """(N, D) pooled rows -> ((N, K+1) class probs, (N, 4K) deltas)."""
    hidden = ad.relu(ad.linear(pooled_rows, model.params["head.fc1.w"],
                               model.params["head.fc1.b"]))
    probs = ad.softmax(ad.linear(hidden, model.params["head.cls.w"],
                                 model.params["head.cls.b"]))
    deltas = ad.linear(hidden, model.params["head.reg.w"], model.params["head.reg.b"])
    return probs, deltas


def head_forward(pooled: Tensor, model: DetectorModel) -> tuple[Tensor, Tensor]:
    """Single-proposal head: (K+1,) class probabilities (index 0 is
    background) and (K, 4) per-class box deltas."""
    c = model.backbone_config.out_channels
    expect = (c, model.roi_size, model.roi_size)
    if pooled.shape != expect:
        raise ShapeError(f"pooled features {pooled.shape} != expected {expect}")
    rows = ad.reshape(pooled, (1, int(np.prod(expect))))
    probs, deltas = head_batch_forward(rows, model)
    return (ad.reshape(probs, (model.n_classes + 1,)),
            ad.reshape(deltas, (model.n_classes, 4)))


# ---------------------------------------------------------------------------
# end-to-end detection


def detect(image: Tensor, model: DetectorModel, cfg: DetectorConfig | None = None,
           timings: dict | None = None) -> list[Detection]:
    """Full pipeline on one prepared image; returns detections sorted by
    descending confidence. Deterministic for a fixed (image, model, cfg)."""
    cfg = cfg if cfg is not None else DetectorConfig()
    _, h, w = image.shape
    k = model.n_classes
    with ad.no_grad():
        t0 = time.perf_counter()
        fmap = backbone_forward(image, model)
        t1 = time.perf_counter()
        rpn_out = rpn_forward(fmap, model)
        anchors = model.anchors_for(w, h)
        proposals = generate_proposals(rpn_out.objectness, rpn_out.deltas,
                                       anchors, w, h, cfg)
        t2 = time.perf_counter()
        detections: list[Detection] = []
        if proposals:
            d = model.backbone_config.out_channels * model.roi_size ** 2
            pooled = [ad.reshape(roi_pool(fmap, p, model.roi_size, model.roi_size,
                                          model.stride), (1, d))
                      for p in proposals]
            probs, deltas = head_batch_forward(ad.concat_rows(pooled), model)
            probs = probs.data
            deltas = deltas.data
            for i, prop in enumerate(proposals):
                cls = int(np.argmax(probs[i]))
                if cls == 0:
                    continue
                conf = float(probs[i, cls])
                if conf < cfg.confidence_threshold:
                    continue
                refined = decode_array(deltas[i, 4 * (cls - 1):4 * cls],
                                       prop.box.as_array())
                refined = clip_array(refined, w, h)[0]
                if refined[2] <= refined[0] or refined[3] <= refined[1]:
                    continue
                detections.append(Detection(Box.from_array(refined), cls - 1, conf))
        # class-wise NMS, then a stable global sort by confidence
        final: list[Detection] = []
        for cls in range(k):
            group = [d for d in detections if d.class_id == cls]
            if not group:
                continue
            arr = np.stack([g.box.as_array() for g in group])
            scores = np.array([g.confidence for g in group])
            final.extend(group[i] for i in
                         nms_indices(arr, scores, cfg.detection_nms_iou))
        final.sort(key=lambda det: -det.confidence)
        t3 = time.perf_counter()
    if timings is not None:
        timings["backbone"] = (t1 - t0) * 1e3
        timings["rpn_proposals"] = (t2 - t1) * 1e3
        timings["roi_head"] = (t3 - t2) * 1e3
        timings["total"] = (t3 - t0) * 1e3
    return final
