"""Annotation ingestion, manifest persistence, train/test splitting and
model-input preparation.

Annotation files are plain text, one ground-truth box per line::

    image-path <TAB> class-name <TAB> xmin ymin xmax ymax

with integer pixel coordinates. Lines for the same image merge into one
record. Manifests add a split column and are written as TSV with a header
line plus a ``# seed=N`` comment once a split has been assigned.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .boxes import Box
from .errors import ConfigError, DataError, FormatError, ValidationError
from .ppm import load_ppm

TRAIN, TEST, UNASSIGNED = "train", "test", "-"


@dataclass(frozen=True)
class Annotation:
    """One image plus its labeled ground-truth boxes."""

    image: str
    boxes: tuple[tuple[str, Box], ...]


@dataclass(frozen=True)
class DatasetManifest:
    """Class vocabulary, annotations and (optionally) a train/test split."""

    classes: tuple[str, ...]
    annotations: tuple[Annotation, ...]
    root: str = "."
    split: tuple[str, ...] | None = None
    split_seed: int | None = None

    def __post_init__(self):
        if len(set(self.classes)) != len(self.classes):
            raise ValidationError("class vocabulary contains duplicates")
        known = set(self.classes)
        for ann in self.annotations:
            for name, _ in ann.boxes:
                if name not in known:
                    raise ValidationError(f"class {name!r} of {ann.image} is not in the vocabulary")
        if self.split is not None:
            if len(self.split) != len(self.annotations):
                raise ValidationError("split assignment length != record count")
            bad = set(self.split) - {TRAIN, TEST}
            if bad:
                raise ValidationError(f"unknown split labels {sorted(bad)}")

    def image_path(self, ann: Annotation) -> str:
        return os.path.join(self.root, ann.image)

    def records(self, which: str) -> tuple[Annotation, ...]:
        if self.split is None:
            raise ValidationError("manifest has no split assignment yet")
        return tuple(a for a, s in zip(self.annotations, self.split) if s == which)

    @property
    def train_records(self) -> tuple[Annotation, ...]:
        return self.records(TRAIN)

    @property
    def test_records(self) -> tuple[Annotation, ...]:
        return self.records(TEST)


# ---------------------------------------------------------------------------
# parsing


def _parse_box(field: str, lineno: int) -> Box:
    parts = field.split()
    if len(parts) != 4:
        raise FormatError(f"expected 4 box coordinates, got {len(parts)}", line=lineno)
    try:
        x0, y0, x1, y1 = (int(p) for p in parts)
    except ValueError:
        raise FormatError(f"box coordinates must be integers: {field!r}", line=lineno) from None
    try:
        return Box(float(x0), float(y0), float(x1), float(y1))
    except ValidationError as exc:
        raise ValidationError(f"line {lineno}: {exc}") from None


def _check_bounds(ann: Annotation, root: str) -> None:
    """Validate boxes against image dimensions when the image is readable."""
    path = os.path.join(root, ann.image)
    if not os.path.exists(path):
        raise DataError(f"image file not found: {path}")
    img = load_ppm(path)
    _, h, w = img.shape
    for name, box in ann.boxes:
        if box.xmin < 0 or box.ymin < 0 or box.xmax > w or box.ymax > h:
            raise ValidationError(
                f"box {name} {box} of {ann.image} exceeds image bounds {w}x{h}")


def parse_annotations(path: str | os.PathLike, validate_bounds: bool = True) -> DatasetManifest:
    """Read an annotation file into an unsplit manifest.

    The vocabulary is the sorted set of class names encountered. With
    ``validate_bounds`` every referenced image is opened and each box is
    checked to lie inside it.
    """
    path = Path(path)
    by_image: dict[str, list[tuple[str, Box]]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise FormatError(f"expected 3 tab-separated fields, got {len(fields)}",
                                  line=lineno)
            image, cls, boxfield = fields
            if not image or not cls:
                raise FormatError("empty image path or class name", line=lineno)
            by_image.setdefault(image, []).append((cls, _parse_box(boxfield, lineno)))
    annotations = tuple(Annotation(img, tuple(boxes)) for img, boxes in by_image.items())
    classes = tuple(sorted({name for ann in annotations for name, _ in ann.boxes}))
    root = str(path.parent)
    if validate_bounds:
        for ann in annotations:
            _check_bounds(ann, root)
    return DatasetManifest(classes=classes, annotations=annotations, root=root)


# ---------------------------------------------------------------------------
# manifest persistence

_HEADER = "image\tclass\txmin\tymin\txmax\tymax\tsplit"


def save_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> None:
    lines = []
    if manifest.split_seed is not None:
        lines.append(f"# seed={manifest.split_seed}")
    lines.append(_HEADER)
    split = manifest.split or (UNASSIGNED,) * len(manifest.annotations)
    for ann, s in zip(manifest.annotations, split):
        for name, b in ann.boxes:
            lines.append(f"{ann.image}\t{name}\t{b.xmin:g}\t{b.ymin:g}\t{b.xmax:g}\t{b.ymax:g}\t{s}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_manifest(path: str | os.PathLike, validate_bounds: bool = False) -> DatasetManifest:
    path = Path(path)
    seed = None
    rows: list[tuple[str, str, Box, str]] = []
    saw_header = False
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("#"):
                text = line[1:].strip()
                if text.startswith("seed="):
                    try:
                        seed = int(text[5:])
                    except ValueError:
                        raise FormatError(f"bad seed comment {text!r}", line=lineno) from None
                continue
            if not saw_header:
                if line != _HEADER:
                    raise FormatError(f"expected header {_HEADER!r}", line=lineno)
                saw_header = True
                continue
            fields = line.split("\t")
            if len(fields) != 7:
                raise FormatError(f"expected 7 tab-separated fields, got {len(fields)}",
                                  line=lineno)
            image, cls = fields[0], fields[1]
            box = _parse_box(" ".join(fields[2:6]), lineno)
            rows.append((image, cls, box, fields[6]))
    if not saw_header:
        raise FormatError("manifest has no header line", line=1)

    by_image: dict[str, tuple[list[tuple[str, Box]], str]] = {}
    for image, cls, box, s in rows:
        if image not in by_image:
            by_image[image] = ([], s)
        elif by_image[image][1] != s:
            raise ValidationError(f"conflicting split labels for {image}")
        by_image[image][0].append((cls, box))
    annotations = tuple(Annotation(img, tuple(bx)) for img, (bx, _) in by_image.items())
    splits = tuple(s for _, (_, s) in by_image.items())
    classes = tuple(sorted({name for ann in annotations for name, _ in ann.boxes}))
    unsplit = all(s == UNASSIGNED for s in splits)
    if not unsplit and UNASSIGNED in splits:
        raise ValidationError("manifest mixes assigned and unassigned split labels")
    manifest = DatasetManifest(
        classes=classes, annotations=annotations, root=str(path.parent),
        split=None if unsplit else splits, split_seed=seed)
    if validate_bounds:
        for ann in annotations:
            _check_bounds(ann, manifest.root)
    return manifest


# ---------------------------------------------------------------------------
# splitting


def split(manifest: DatasetManifest, ratio_train: float, seed: int) -> DatasetManifest:
    """Assign train/test labels by a seeded shuffle; |train| = round(ratio*N)."""
    if not 0.0 < ratio_train < 1.0:
        raise ConfigError(f"ratio_train must be in (0, 1), got {ratio_train}")
    n = len(manifest.annotations)
    order = np.random.default_rng(seed).permutation(n)
    n_train = round(ratio_train * n)
    labels = [TEST] * n
    for i in order[:n_train]:
        labels[i] = TRAIN
    return replace(manifest, split=tuple(labels), split_seed=seed)


# ---------------------------------------------------------------------------
# input preparation


def resize_nearest(image: np.ndarray, target_w: int, target_h: int) -> np.ndarray:
    """Nearest-neighbor resize of a (3, H, W) array; exact for identity."""
    _, h, w = image.shape
    rows = np.floor(np.arange(target_h) * (h / target_h)).astype(np.int64)
    cols = np.floor(np.arange(target_w) * (w / target_w)).astype(np.int64)
    return image[:, rows[:, None], cols[None, :]]


def rescale_box(box: Box, sx: float, sy: float) -> Box:
    return Box(box.xmin * sx, box.ymin * sy, box.xmax * sx, box.ymax * sy)


def prepare_input(image: Tensor | np.ndarray, target_w: int, target_h: int,
                  stride: int = 16) -> Tensor:
    """Resize to (target_h, target_w) and map [0, 1] values into [-1, 1].

    Target dimensions must be divisible by the model stride so the anchor
    grid tiles exactly. Ground-truth boxes belonging to the image should be
    rescaled with :func:`rescale_box` using factors target/original.
    """
    if target_w % stride or target_h % stride:
        raise ConfigError(
            f"target {target_w}x{target_h} not divisible by stride {stride}")
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    resized = resize_nearest(arr, target_w, target_h)
    return Tensor((resized - 0.5) * 2.0)
