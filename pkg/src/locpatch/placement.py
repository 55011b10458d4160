"""Scene-intensity matching and affine placement of the patch on target boxes."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .imaging import BBox, ValidationError, check_image, composite


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneParams:
    contrast_range: tuple[float, float] = (0.8, 1.2)
    brightness_range: tuple[float, float] = (-0.1, 0.1)
    noise_amplitude: float = 0.05

    def __post_init__(self):
        c_lo, c_hi = self.contrast_range
        b_lo, b_hi = self.brightness_range
        if c_lo <= 0 or c_lo > c_hi:
            raise ValidationError(f"contrast_range must satisfy 0 < lo <= hi, got {self.contrast_range}")
        if b_lo > b_hi:
            raise ValidationError(f"brightness_range must be ordered, got {self.brightness_range}")
        if self.noise_amplitude < 0:
            raise ValidationError("noise_amplitude must be >= 0")


@dataclass(frozen=True)
class PlacementParams:
    size_ratio: float = 0.12
    offset_range: float = 0.1
    rotation_range_deg: float = 20.0

    def __post_init__(self):
        if not 0 < self.size_ratio < 1:
            raise ValidationError("size_ratio must lie in (0, 1)")
        if self.offset_range < 0:
            raise ValidationError("offset_range must be >= 0")
        if not 0 <= self.rotation_range_deg <= 180:
            raise ValidationError("rotation_range_deg must lie in [0, 180]")


NEUTRAL_SCENE = SceneParams((1.0, 1.0), (0.0, 0.0), 0.0)


def scene_match(patch: torch.Tensor, params: SceneParams, rng: np.random.Generator) -> torch.Tensor:
    """``clamp(patch * c + b + n)`` with random contrast, brightness and per-pixel uniform noise."""
    c = float(rng.uniform(*params.contrast_range))
    b = float(rng.uniform(*params.brightness_range))
    out = patch * c + b
    if params.noise_amplitude > 0:
        a = params.noise_amplitude
        noise = torch.from_numpy(rng.uniform(-a, a, size=tuple(patch.shape))).to(patch.dtype)
        out = out + noise
    return out.clamp(0.0, 1.0)


def placed_side(box: BBox, size_ratio: float) -> int:
    """Side of the square whose area is ``size_ratio`` times the box area (floored)."""
    return max(1, int(math.floor(math.sqrt(size_ratio * box.area))))


def resize_patch(patch: torch.Tensor, side: int) -> torch.Tensor:
    if patch.shape[0] == side:
        return patch
    x = patch.permute(2, 0, 1)[None]
    x = F.interpolate(x, size=(side, side), mode="bilinear", align_corners=False, antialias=side < patch.shape[0])
    return x[0].permute(1, 2, 0)


def _sample_rotated(src: torch.Tensor, center: tuple[float, float], angle_deg: float,
                    rows: torch.Tensor, cols: torch.Tensor):
    """Bilinearly sample ``src`` rotated by ``angle_deg`` about ``center`` at pixel grid ``rows x cols``.

    Returns ``(values, coverage)``; ``coverage`` is the summed weight of the
    in-bounds source taps and ``values`` are normalized by it.
    """
    side_h, side_w = src.shape[:2]
    a = math.radians(angle_deg)
    cos, sin = math.cos(a), math.sin(a)
    dy = rows.to(torch.float64)[:, None] + 0.5 - center[1]
    dx = cols.to(torch.float64)[None, :] + 0.5 - center[0]
    u = cos * dx + sin * dy + side_w / 2 - 0.5
    v = -sin * dx + cos * dy + side_h / 2 - 0.5
    u0 = torch.floor(u)
    v0 = torch.floor(v)
    fu = (u - u0).to(src.dtype)
    fv = (v - v0).to(src.dtype)
    u0 = u0.long()
    v0 = v0.long()

    values = torch.zeros(rows.numel(), cols.numel(), src.shape[2], dtype=src.dtype)
    coverage = torch.zeros(rows.numel(), cols.numel(), dtype=src.dtype)
    for du, dv, wgt in ((0, 0, (1 - fu) * (1 - fv)), (1, 0, fu * (1 - fv)),
                        (0, 1, (1 - fu) * fv), (1, 1, fu * fv)):
        uu = u0 + du
        vv = v0 + dv
        ok = (uu >= 0) & (uu < side_w) & (vv >= 0) & (vv < side_h)
        w = torch.where(ok, wgt, torch.zeros_like(wgt))
        tap = src[vv.clamp(0, side_h - 1), uu.clamp(0, side_w - 1)]
        values = values + w[..., None] * tap
        coverage = coverage + w
    safe = torch.where(coverage > 0, coverage, torch.ones_like(coverage))
    return values / safe[..., None], coverage


def rotate_patch(patch: torch.Tensor, angle_deg: float):
    """Rotate a patch about its center on its own canvas; returns ``(values, coverage)``."""
    n = patch.shape[0]
    idx = torch.arange(n)
    return _sample_rotated(patch, (n / 2, n / 2), angle_deg, idx, idx)


def place_patch(image: torch.Tensor, patch: torch.Tensor, box: BBox, placement: PlacementParams,
                rng: np.random.Generator | None = None, *, angle: float | None = None,
                offset: tuple[float, float] | None = None):
    """Scale, rotate and translate ``patch`` onto ``box`` and composite it into ``image``.

    The patch is resized so its area is ``size_ratio`` of the box, rotated by
    a draw from ``U(-r, r)`` degrees and shifted by ``(dx * w, dy * h)`` with
    ``dx, dy ~ U(-offset_range, offset_range)``. ``angle``/``offset`` pin the
    draws. Returns the composited image and the binary footprint mask.
    """
    check_image(image)
    h, w = image.shape[:2]
    if not box.inside(h, w):
        raise ValidationError(f"box {box.as_list()} outside {h}x{w} image")
    if angle is None or offset is None:
        if rng is None:
            raise ValidationError("rng required unless angle and offset are given")
        r = placement.rotation_range_deg
        o = placement.offset_range
        draw_angle = float(rng.uniform(-r, r))
        draw_offset = (float(rng.uniform(-o, o)), float(rng.uniform(-o, o)))
        angle = draw_angle if angle is None else angle
        offset = draw_offset if offset is None else offset

    image = image.to(patch.dtype)
    side = placed_side(box, placement.size_ratio)
    scaled = resize_patch(patch, side)
    cx, cy = box.center
    cx += offset[0] * box.width
    cy += offset[1] * box.height
    left = math.floor(cx - side / 2 + 0.5)
    top = math.floor(cy - side / 2 + 0.5)
    pivot = (left + side / 2, top + side / 2)

    a = math.radians(angle)
    reach = side / 2 * (abs(math.cos(a)) + abs(math.sin(a))) + 1
    x0 = max(0, math.floor(pivot[0] - reach))
    x1 = min(w, math.ceil(pivot[0] + reach))
    y0 = max(0, math.floor(pivot[1] - reach))
    y1 = min(h, math.ceil(pivot[1] + reach))
    if x0 >= x1 or y0 >= y1:
        raise PlacementError(f"patch footprint for box {box.as_list()} falls outside the image")

    values, coverage = _sample_rotated(scaled, pivot, angle, torch.arange(y0, y1), torch.arange(x0, x1))
    inside = coverage > 0.5
    if not bool(inside.any()):
        raise PlacementError(f"patch footprint for box {box.as_list()} falls outside the image")

    mask = torch.zeros(h, w, dtype=image.dtype)
    mask[y0:y1, x0:x1] = inside.to(image.dtype)
    overlay = torch.zeros_like(image)
    overlay[y0:y1, x0:x1] = values
    return composite(image, overlay, mask), mask


def apply_patch_to_all_targets(image: torch.Tensor, patch: torch.Tensor, annotation,
                               placement: PlacementParams, scene: SceneParams,
                               rng: np.random.Generator, scene_rng: np.random.Generator | None = None):
    """Place an independently scene-matched copy of ``patch`` on every target box.

    Placement draws come from ``rng`` and photometric draws from
    ``scene_rng`` (``rng`` if omitted). Later boxes overwrite earlier ones.
    """
    scene_rng = rng if scene_rng is None else scene_rng
    out = image.to(patch.dtype)
    for box in annotation.boxes:
        matched = scene_match(patch, scene, scene_rng)
        out, _ = place_patch(out, matched, box, placement, rng)
    return out
