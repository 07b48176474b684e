"""Synthetic shape scenes with exact ground-truth boxes.

Scenes are grayscale backgrounds (flat, gradient or noise) with saturated
colored shapes painted on top; each class keeps a distinctive hue so a small
detector can actually learn at desk scale. The emitted ground-truth box of a
shape is the exact extent of its rasterized pixels, clipped to the image, so
tests can verify boxes by scanning pixels. Everything is driven by one seed
and is byte-reproducible.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .boxes import Box
from .data import Annotation, DatasetManifest
from .errors import ConfigError
from .ppm import save_ppm

BACKGROUNDS = ("flat", "gradient", "noise", "varied")

# class name -> (shape kind, base RGB); colors are saturated so shape pixels
# always separate from the grayscale backgrounds
CLASS_DEFS = {
    "circle": ("circle", (0.85, 0.15, 0.15)),
    "triangle": ("triangle", (0.15, 0.80, 0.20)),
    "bar": ("bar", (0.20, 0.25, 0.90)),
    "circle_yellow": ("circle", (0.95, 0.85, 0.10)),
    "triangle_magenta": ("triangle", (0.85, 0.10, 0.85)),
    "bar_cyan": ("bar", (0.10, 0.85, 0.85)),
    "circle_orange": ("circle", (0.95, 0.50, 0.10)),
    "triangle_purple": ("triangle", (0.55, 0.15, 0.85)),
    "bar_spring": ("bar", (0.10, 0.90, 0.50)),
    "circle_rose": ("circle", (0.90, 0.10, 0.45)),
    "triangle_teal": ("triangle", (0.10, 0.70, 0.70)),
    "bar_olive": ("bar", (0.65, 0.70, 0.15)),
}


def default_classes(k: int) -> tuple[str, ...]:
    """First k class names of the registry (up to 12 distinguishable ones)."""
    if not 1 <= k <= len(CLASS_DEFS):
        raise ConfigError(f"k must be in [1, {len(CLASS_DEFS)}], got {k}")
    return tuple(list(CLASS_DEFS)[:k])


@dataclass(frozen=True)
class SyntheticSceneSpec:
    """Knobs for the scene generator.

    ``occlusion_prob`` is the chance that a shape may be drawn overlapping an
    earlier shape or sticking out past the image border (truncation); other
    shapes are placed fully inside on empty ground.
    """

    width: int = 128
    height: int = 128
    background: str = "varied"
    classes: tuple[str, ...] = ("circle", "triangle", "bar")
    shapes_per_image: tuple[int, int] = (1, 2)
    occlusion_prob: float = 0.2
    min_size: int = 24
    max_size: int = 56

    def __post_init__(self):
        if self.width < 16 or self.height < 16:
            raise ConfigError("scene must be at least 16x16")
        if self.background not in BACKGROUNDS:
            raise ConfigError(f"background must be one of {BACKGROUNDS}")
        unknown = set(self.classes) - set(CLASS_DEFS)
        if unknown:
            raise ConfigError(f"unknown shape classes {sorted(unknown)}; "
                              f"available: {sorted(CLASS_DEFS)}")
        if not self.classes:
            raise ConfigError("need at least one shape class")
        lo, hi = self.shapes_per_image
        if not 1 <= lo <= hi:
            raise ConfigError(f"bad shapes_per_image range {self.shapes_per_image}")
        if not 0.0 <= self.occlusion_prob <= 1.0:
            raise ConfigError("occlusion_prob must be in [0, 1]")
        if not 4 <= self.min_size <= self.max_size:
            raise ConfigError("need 4 <= min_size <= max_size")


# ---------------------------------------------------------------------------
# rasterization (pixel centers at integer + 0.5)


def _shape_mask(kind: str, cx: float, cy: float, size: float,
                width: int, height: int) -> np.ndarray:
    ys, xs = np.mgrid[0:height, 0:width]
    px = xs + 0.5
    py = ys + 0.5
    half = size / 2.0
    if kind == "circle":
        return (px - cx) ** 2 + (py - cy) ** 2 <= half ** 2
    if kind == "triangle":
        # upright isoceles triangle: apex up, base = size, height = size
        in_rows = (py >= cy - half) & (py <= cy + half)
        frac = (py - (cy - half)) / size  # 0 at apex row, 1 at base
        return in_rows & (np.abs(px - cx) <= frac * half)
    if kind == "bar":
        # horizontal slab, width = size, height = size / 2 (the 2:1 aspect
        # keeps bars coverable by the wide anchor ratio)
        hh = size / 4.0
        return (np.abs(px - cx) <= half) & (np.abs(py - cy) <= hh)
    raise ConfigError(f"unknown shape kind {kind!r}")


def _mask_extent(mask: np.ndarray) -> Box | None:
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return None
    return Box(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


def _background(mode: str, width: int, height: int, rng: np.random.Generator) -> np.ndarray:
    """Grayscale background (equal channels) so shape pixels stay separable."""
    if mode == "varied":
        mode = BACKGROUNDS[rng.integers(0, 3)]
    if mode == "flat":
        gray = np.full((height, width), rng.uniform(0.15, 0.75))
    elif mode == "gradient":
        lo, hi = sorted(rng.uniform(0.1, 0.8, size=2))
        if rng.integers(0, 2):
            gray = np.broadcast_to(np.linspace(lo, hi, width), (height, width))
        else:
            gray = np.broadcast_to(np.linspace(lo, hi, height)[:, None], (height, width))
    else:  # noise
        base = rng.uniform(0.2, 0.6)
        gray = np.clip(base + rng.uniform(-0.12, 0.12, size=(height, width)), 0.0, 1.0)
    return np.repeat(gray[None, :, :], 3, axis=0).copy()


def render_scene(spec: SyntheticSceneSpec, rng: np.random.Generator):
    """Draw one scene; returns (image (3,H,W) in [0,1], [(class, Box)], masks)."""
    w, h = spec.width, spec.height
    image = _background(spec.background, w, h, rng)
    n_shapes = int(rng.integers(spec.shapes_per_image[0], spec.shapes_per_image[1] + 1))

    placed: list[tuple[str, Box]] = []
    masks: list[np.ndarray] = []
    for _ in range(n_shapes):
        name = spec.classes[rng.integers(0, len(spec.classes))]
        kind, base_color = CLASS_DEFS[name]
        loose = rng.uniform() < spec.occlusion_prob
        for _attempt in range(40):
            size = float(rng.uniform(spec.min_size, spec.max_size))
            half = size / 2.0
            if loose:
                cx = float(rng.uniform(2.0, w - 2.0))
                cy = float(rng.uniform(2.0, h - 2.0))
            else:
                cx = float(rng.uniform(half + 1, w - half - 1))
                cy = float(rng.uniform(half + 1, h - half - 1))
            mask = _shape_mask(kind, cx, cy, size, w, h)
            box = _mask_extent(mask)
            if box is None:
                continue
            overlaps = any(_boxes_touch(box, b) for _, b in placed)
            if overlaps and not loose:
                continue
            color = np.array(base_color) * rng.uniform(0.8, 1.1)
            image[:, mask] = np.clip(color, 0.0, 1.0)[:, None]
            placed.append((name, box))
            masks.append(mask)
            break

    # later shapes may overpaint earlier ones: boxes keep the full extent
    # (standard for partially occluded objects), images get a global
    # brightness jitter to emulate lighting variation
    image *= rng.uniform(0.75, 1.05)
    np.clip(image, 0.0, 1.0, out=image)
    return image, placed, masks


def _boxes_touch(a: Box, b: Box) -> bool:
    return not (a.xmax <= b.xmin or b.xmax <= a.xmin
                or a.ymax <= b.ymin or b.ymax <= a.ymin)


# ---------------------------------------------------------------------------
# dataset generation


def generate_synthetic(spec: SyntheticSceneSpec, n_images: int, seed: int,
                       out_dir: str | os.PathLike) -> DatasetManifest:
    """Render ``n_images`` scenes into ``out_dir`` as PPM files.

    Returns an unsplit manifest rooted at ``out_dir``; byte-identical output
    for identical (spec, n_images, seed).
    """
    if n_images < 1:
        raise ConfigError(f"n_images must be >= 1, got {n_images}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    streams = np.random.SeedSequence(seed).spawn(n_images)
    annotations = []
    for i, stream in enumerate(streams):
        rng = np.random.default_rng(stream)
        # retry until at least one shape landed (min_size >= 4 makes a
        # fully-vanished shape virtually impossible, but stay total)
        for _ in range(10):
            image, placed, _ = render_scene(spec, rng)
            if placed:
                break
        name = f"scene_{i:05d}.ppm"
        save_ppm(image, out / name)
        annotations.append(Annotation(name, tuple(placed)))
    return DatasetManifest(classes=tuple(sorted(spec.classes)),
                           annotations=tuple(annotations), root=str(out))
