"""Detection-vs-ground-truth matching, accuracy/confusion reporting and the
inference latency benchmark.

The headline metric is deliberately simple: the fraction of ground-truth
boxes matched by a same-class detection with IoU >= ``iou_min`` (0.5 by
default), using greedy confidence-ordered matching. The confusion matrix has
one extra row/column for background: wrong-class hits land in (true,
predicted), pure false positives in the background row, and misses in the
background column, so each foreground row sums to that class's ground-truth
count.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from .boxes import Box, iou
from .errors import ContractError, MiniRcnnError
from .model import Detection, DetectorConfig, DetectorModel, detect


@dataclass
class Matching:
    """Outcome of matching one image's detections against its ground truth."""

    matched: list[tuple[int, int]]       # (detection idx, gt idx), same class
    confused: list[tuple[int, int]]      # overlapping but wrong class
    false_positives: list[int]           # unmatched detection indices
    missed: list[int]                    # gt indices nothing claimed


def match(detections: list[Detection], gt: list[tuple[int, Box]],
          iou_min: float) -> Matching:
    """Greedy matching by descending confidence.

    A detection claims the unmatched same-class ground-truth box with the
    highest IoU >= ``iou_min``; each box is claimed at most once. A second
    pass attributes leftover detections to unmatched boxes of other classes
    (confusions); whatever remains is a false positive or a miss.
    """
    if not 0.0 < iou_min <= 1.0:
        raise ContractError(f"iou_min must be in (0, 1], got {iou_min}")
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].confidence, i))
    taken = [False] * len(gt)
    matched: list[tuple[int, int]] = []
    leftovers: list[int] = []
    for i in order:
        det = detections[i]
        best, best_iou = -1, 0.0
        for g, (cls, box) in enumerate(gt):
            if taken[g] or cls != det.class_id:
                continue
            v = iou(det.box, box)
            if v >= iou_min and v > best_iou:
                best, best_iou = g, v
        if best >= 0:
            taken[best] = True
            matched.append((i, best))
        else:
            leftovers.append(i)

    confused: list[tuple[int, int]] = []
    false_positives: list[int] = []
    for i in leftovers:
        det = detections[i]
        best, best_iou = -1, 0.0
        for g, (_, box) in enumerate(gt):
            if taken[g]:
                continue
            v = iou(det.box, box)
            if v >= iou_min and v > best_iou:
                best, best_iou = g, v
        if best >= 0:
            taken[best] = True
            confused.append((i, best))
        false_positives.append(i)
    missed = [g for g, t in enumerate(taken) if not t]
    return Matching(matched, confused, false_positives, missed)


@dataclass
class LatencyStats:
    min: float
    median: float
    mean: float
    max: float

    @staticmethod
    def of(samples_ms: list[float]) -> "LatencyStats":
        return LatencyStats(min(samples_ms), statistics.median(samples_ms),
                            statistics.fmean(samples_ms), max(samples_ms))


@dataclass
class EvalReport:
    """Aggregated detection quality over a test split."""

    classes: tuple[str, ...]
    gt_count: np.ndarray          # (K,) ground-truth boxes per class
    matched: np.ndarray           # (K,) matched per class
    false_positives: np.ndarray   # (K,) unmatched detections per predicted class
    confusion: np.ndarray         # (K+1, K+1), row = true, col = predicted
    accuracy: float
    mean_confidence: float | None
    min_confidence: float | None
    latency: LatencyStats
    errors: int = 0

    def to_text(self) -> str:
        k = len(self.classes)
        lines = [f"{'class':<12}{'gt':>6}{'matched':>9}{'false_pos':>11}"]
        for c in range(k):
            lines.append(f"{self.classes[c]:<12}{self.gt_count[c]:>6}"
                         f"{self.matched[c]:>9}{self.false_positives[c]:>11}")
        lines.append("")
        lines.append(f"accuracy: {self.accuracy:.4f} "
                     f"({int(self.matched.sum())}/{int(self.gt_count.sum())} "
                     f"ground-truth boxes matched)")
        if self.mean_confidence is not None:
            lines.append(f"confidence of matches: mean {self.mean_confidence:.4f}, "
                         f"min {self.min_confidence:.4f}")
        lines.append(f"latency ms/image: min {self.latency.min:.2f} "
                     f"median {self.latency.median:.2f} mean {self.latency.mean:.2f} "
                     f"max {self.latency.max:.2f}")
        if self.errors:
            lines.append(f"per-image errors: {self.errors}")
        names = list(self.classes) + ["background"]
        lines.append("")
        lines.append("confusion (rows = truth, cols = predicted):")
        head = f"{'':<12}" + "".join(f"{n[:10]:>11}" for n in names)
        lines.append(head)
        for r, name in enumerate(names):
            row = "".join(f"{int(v):>11}" for v in self.confusion[r])
            lines.append(f"{name[:10]:<12}" + row)
        return "\n".join(lines)

    def to_tsv(self) -> str:
        lines = ["class\tgt\tmatched\tfalse_positives"]
        for c, name in enumerate(self.classes):
            lines.append(f"{name}\t{self.gt_count[c]}\t{self.matched[c]}"
                         f"\t{self.false_positives[c]}")
        lines.append(f"accuracy\t{self.accuracy!r}")
        mc = "-" if self.mean_confidence is None else repr(self.mean_confidence)
        nc = "-" if self.min_confidence is None else repr(self.min_confidence)
        lines.append(f"mean_confidence\t{mc}")
        lines.append(f"min_confidence\t{nc}")
        for name in ("min", "median", "mean", "max"):
            lines.append(f"latency_{name}_ms\t{getattr(self.latency, name)!r}")
        lines.append(f"errors\t{self.errors}")
        return "\n".join(lines)


def evaluate(detect_fn, samples, n_classes: int, classes=None,
             iou_min: float = 0.5) -> EvalReport:
    """Run ``detect_fn`` over (input, ground-truth) pairs and aggregate.

    ``samples`` is a sequence of ``(x, gt)`` where ``gt`` is a list of
    ``(class_id, Box)``. Per-image failures raised as package errors are
    counted, treated as empty detections, and do not abort the run.
    """
    if not samples:
        raise ContractError("evaluate needs a non-empty test split")
    k = int(n_classes)
    classes = tuple(classes) if classes is not None else tuple(
        f"class{i}" for i in range(k))
    gt_count = np.zeros(k, dtype=np.int64)
    matched = np.zeros(k, dtype=np.int64)
    false_pos = np.zeros(k, dtype=np.int64)
    confusion = np.zeros((k + 1, k + 1), dtype=np.int64)
    confidences: list[float] = []
    times: list[float] = []
    errors = 0

    for x, gt in samples:
        t0 = time.perf_counter()
        try:
            detections = detect_fn(x)
        except MiniRcnnError:
            errors += 1
            detections = []
        times.append((time.perf_counter() - t0) * 1e3)
        for cls, _ in gt:
            gt_count[cls] += 1
        m = match(detections, gt, iou_min)
        for det_idx, gt_idx in m.matched:
            cls = gt[gt_idx][0]
            matched[cls] += 1
            confusion[cls, cls] += 1
            confidences.append(detections[det_idx].confidence)
        confused_dets = {d for d, _ in m.confused}
        for det_idx, gt_idx in m.confused:
            confusion[gt[gt_idx][0], detections[det_idx].class_id] += 1
        for det_idx in m.false_positives:
            cls = detections[det_idx].class_id
            false_pos[cls] += 1
            if det_idx not in confused_dets:
                confusion[k, cls] += 1
        for gt_idx in m.missed:
            confusion[gt[gt_idx][0], k] += 1

    total_gt = int(gt_count.sum())
    return EvalReport(
        classes=classes, gt_count=gt_count, matched=matched,
        false_positives=false_pos, confusion=confusion,
        accuracy=float(matched.sum() / total_gt) if total_gt else 0.0,
        mean_confidence=statistics.fmean(confidences) if confidences else None,
        min_confidence=min(confidences) if confidences else None,
        latency=LatencyStats.of(times), errors=errors)


def evaluate_model(model: DetectorModel, samples, classes,
                   det_cfg: DetectorConfig | None = None,
                   iou_min: float = 0.5) -> EvalReport:
    """Convenience wrapper: evaluate a real detector over prepared samples."""
    cfg = det_cfg if det_cfg is not None else DetectorConfig()
    return evaluate(lambda img: detect(img, model, cfg),
                    samples, n_classes=len(classes), classes=classes,
                    iou_min=iou_min)


@dataclass
class BenchmarkReport:
    """Wall-clock stats of repeated single-image detection."""

    samples_ms: list[float]
    total: LatencyStats
    stages_ms: dict[str, float] = field(default_factory=dict)  # mean per stage

    def to_tsv(self) -> str:
        lines = ["stage\tms"]
        for name, ms in self.stages_ms.items():
            lines.append(f"{name}\t{ms:.4f}")
        lines.append(f"end_to_end_mean\t{self.total.mean:.4f}")
        lines.append(f"end_to_end_median\t{self.total.median:.4f}")
        lines.append(f"end_to_end_min\t{self.total.min:.4f}")
        lines.append(f"end_to_end_max\t{self.total.max:.4f}")
        lines.append(f"runs\t{len(self.samples_ms)}")
        return "\n".join(lines)


def benchmark_latency(model: DetectorModel, image, warmup: int, runs: int,
                      det_cfg: DetectorConfig | None = None) -> BenchmarkReport:
    """Time ``detect`` on one image after ``warmup`` discarded calls.

    Reports min/median/mean/max over ``runs`` timed calls plus the mean
    per-stage breakdown (backbone / RPN+proposals / RoI+head).
    """
    if runs < 3:
        raise ContractError(f"need at least 3 timed runs, got {runs}")
    if warmup < 0:
        raise ContractError("warmup must be >= 0")
    cfg = det_cfg if det_cfg is not None else DetectorConfig()
    for _ in range(warmup):
        detect(image, model, cfg)
    samples: list[float] = []
    stage_sums = {"backbone": 0.0, "rpn_proposals": 0.0, "roi_head": 0.0}
    for _ in range(runs):
        timings: dict[str, float] = {}
        t0 = time.perf_counter()
        detect(image, model, cfg, timings=timings)
        samples.append((time.perf_counter() - t0) * 1e3)
        for key in stage_sums:
            stage_sums[key] += timings[key]
    stages = {key: total / runs for key, total in stage_sums.items()}
    return BenchmarkReport(samples_ms=samples, total=LatencyStats.of(samples),
                           stages_ms=stages)
