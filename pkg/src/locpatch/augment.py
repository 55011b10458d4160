"""Photometric augmentation restricted to annotated target regions.

Each target box gets its own randomly drawn transform (darken, brighten,
rain streaks or Gaussian blur); the transformed crops are pasted back with
the box mask so background pixels are never touched. The global variant
applies a single draw to the whole frame and exists for ablations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .imaging import BBox, ValidationError, box_pixel_slices, check_image, composite, mask_from_boxes

KINDS = ("darken", "brighten", "rain", "blur")


@dataclass(frozen=True)
class AugmentRanges:
    darken_gain: tuple[float, float] = (0.5, 0.8)
    brighten_gain: tuple[float, float] = (1.2, 1.5)
    blur_sigma: tuple[float, float] = (1.0, 2.0)
    rain_streaks: tuple[int, int] = (5, 20)
    rain_length: tuple[float, float] = (10.0, 30.0)
    rain_angle_deg: tuple[float, float] = (60.0, 80.0)
    rain_alpha: float = 0.3
    rain_value: float = 0.9


DEFAULT_RANGES = AugmentRanges()


@dataclass(frozen=True)
class AugmentOp:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown augmentation kind {self.kind!r}")


@dataclass
class RegionSet:
    regions: list[tuple[BBox, torch.Tensor]] = field(default_factory=list)

    def __len__(self):
        return len(self.regions)


def darken(crop: torch.Tensor, gain: float) -> torch.Tensor:
    return (crop * gain).clamp(0.0, 1.0)


def brighten(crop: torch.Tensor, gain: float) -> torch.Tensor:
    return (crop * gain).clamp(0.0, 1.0)


def rain(crop: torch.Tensor, streaks, alpha: float = 0.3, value: float = 0.9) -> torch.Tensor:
    """Blend thin bright line segments into ``crop``.

    ``streaks`` holds ``(fx, fy, length_px, angle_deg)`` tuples; the start
    point is given as a fraction of the crop size so one draw fits any box.
    """
    if len(streaks) == 0:
        return crop.clone()
    h, w = crop.shape[:2]
    hit = torch.zeros(h, w, dtype=torch.bool)
    for fx, fy, length, angle in streaks:
        a = math.radians(angle)
        t = np.arange(0.0, length + 0.5, 0.5)
        xs = np.floor(fx * w + t * math.cos(a)).astype(int)
        ys = np.floor(fy * h + t * math.sin(a)).astype(int)
        ok = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
        hit[torch.from_numpy(ys[ok]), torch.from_numpy(xs[ok])] = True
    streaked = (1.0 - alpha) * crop + alpha * value
    return torch.where(hit[..., None], streaked, crop).clamp(0.0, 1.0)


def _reflect_index(n: int, pad: int) -> torch.Tensor:
    idx = np.arange(-pad, n + pad)
    if n == 1:
        return torch.zeros(len(idx), dtype=torch.long)
    period = 2 * (n - 1)
    m = np.mod(idx, period)
    return torch.from_numpy(np.where(m < n, m, period - m))


def blur(crop: torch.Tensor, sigma: float) -> torch.Tensor:
    """Separable Gaussian blur, half-width ``ceil(3 sigma)``, reflect padding."""
    r = max(1, math.ceil(3 * sigma))
    k = torch.arange(-r, r + 1, dtype=crop.dtype)
    kernel = torch.exp(-(k ** 2) / (2 * sigma ** 2))
    kernel = kernel / kernel.sum()
    h, w = crop.shape[:2]
    padded = crop[_reflect_index(h, r)][:, _reflect_index(w, r)]
    x = padded.permute(2, 0, 1)[None]
    x = F.conv2d(x, kernel.view(1, 1, -1, 1).repeat(3, 1, 1, 1), groups=3)
    x = F.conv2d(x, kernel.view(1, 1, 1, -1).repeat(3, 1, 1, 1), groups=3)
    return x[0].permute(1, 2, 0).clamp(0.0, 1.0)


def apply_op(crop: torch.Tensor, op: AugmentOp, ranges: AugmentRanges = DEFAULT_RANGES) -> torch.Tensor:
    if crop.shape[0] == 0 or crop.shape[1] == 0:
        raise ValidationError("cannot augment an empty crop")
    if op.kind == "darken":
        return darken(crop, op.params["gain"])
    if op.kind == "brighten":
        return brighten(crop, op.params["gain"])
    if op.kind == "rain":
        return rain(crop, op.params["streaks"], ranges.rain_alpha, ranges.rain_value)
    return blur(crop, op.params["sigma"])


def sample_transform(rng: np.random.Generator, ranges: AugmentRanges = DEFAULT_RANGES) -> AugmentOp:
    """Uniformly pick a transform kind, then draw its parameters uniformly."""
    kind = KINDS[int(rng.integers(len(KINDS)))]
    if kind == "darken":
        return AugmentOp(kind, {"gain": float(rng.uniform(*ranges.darken_gain))})
    if kind == "brighten":
        return AugmentOp(kind, {"gain": float(rng.uniform(*ranges.brighten_gain))})
    if kind == "blur":
        return AugmentOp(kind, {"sigma": float(rng.uniform(*ranges.blur_sigma))})
    lo, hi = ranges.rain_streaks
    n = int(rng.integers(lo, hi + 1))
    streaks = tuple(
        (float(rng.random()), float(rng.random()),
         float(rng.uniform(*ranges.rain_length)), float(rng.uniform(*ranges.rain_angle_deg)))
        for _ in range(n)
    )
    return AugmentOp(kind, {"streaks": streaks})


def extract_regions(image: torch.Tensor, annotation) -> RegionSet:
    check_image(image)
    h, w = image.shape[:2]
    regions = []
    for box in annotation.boxes:
        if not box.inside(h, w):
            raise ValidationError(f"box {box.as_list()} outside {h}x{w} image")
        rows, cols = box_pixel_slices(box, h, w)
        regions.append((box, image[rows, cols].clone()))
    return RegionSet(regions)


def apply_local_augmentation(image: torch.Tensor, annotation, rng: np.random.Generator,
                             ranges: AugmentRanges = DEFAULT_RANGES, ops=None) -> torch.Tensor:
    """Transform every target region independently; background stays bit-identical.

    Overlapping boxes are resolved in list order (later boxes win). ``ops``
    may pin the per-box transforms instead of drawing them from ``rng``.
    """
    regions = extract_regions(image, annotation)
    if not len(regions):
        return image.clone()
    if ops is None:
        ops = [sample_transform(rng, ranges) for _ in regions.regions]
    h, w = image.shape[:2]
    canvas = image.clone()
    for (box, crop), op in zip(regions.regions, ops):
        if crop.numel() == 0:
            continue
        rows, cols = box_pixel_slices(box, h, w)
        canvas[rows, cols] = apply_op(crop, op, ranges)
    return composite(image, canvas, mask_from_boxes(annotation.boxes, h, w))


def apply_global_augmentation(image: torch.Tensor, rng: np.random.Generator,
                              ranges: AugmentRanges = DEFAULT_RANGES, op: AugmentOp | None = None) -> torch.Tensor:
    check_image(image)
    if op is None:
        op = sample_transform(rng, ranges)
    return apply_op(image, op, ranges)


def augment(image: torch.Tensor, annotation, mode: str, rng: np.random.Generator,
            ranges: AugmentRanges = DEFAULT_RANGES) -> torch.Tensor:
    if mode == "none":
        return image
    if mode == "global":
        return apply_global_augmentation(image, rng, ranges)
    if mode == "local":
        return apply_local_augmentation(image, annotation, rng, ranges)
    raise ValidationError(f"augmentation mode must be none, global or local, got {mode!r}")
