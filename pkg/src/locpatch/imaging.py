"""Image, mask and box primitives shared by every stage of the pipeline.

Images are ``torch.Tensor`` objects of shape ``(H, W, 3)`` with values in
``[0, 1]``; masks are ``(H, W)`` tensors holding only 0 and 1. Conversion to
8-bit happens only in :func:`read_image` / :func:`write_image`.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image


class ValidationError(ValueError):
    """Input violates a documented invariant."""


class DimensionError(ValidationError):
    """Tensor shapes do not line up."""


@dataclass(frozen=True)
class BBox:
    """Horizontal (axis-aligned) box in pixel coordinates."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        vals = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(np.isfinite(v) for v in vals):
            raise ValidationError(f"non-finite box coordinates {vals}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValidationError(f"degenerate box {vals}: need x_min < x_max and y_min < y_max")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (self.x_min + self.x_max) / 2, (self.y_min + self.y_max) / 2

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    def inside(self, height: int, width: int) -> bool:
        return self.x_min >= 0 and self.y_min >= 0 and self.x_max <= width and self.y_max <= height


def as_tensor(x, dtype=None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype or torch.float32)


def check_image(image: torch.Tensor, name: str = "image") -> torch.Tensor:
    if image.ndim != 3 or image.shape[2] != 3:
        raise DimensionError(f"{name} must have shape (H, W, 3), got {tuple(image.shape)}")
    if image.shape[0] < 1 or image.shape[1] < 1:
        raise DimensionError(f"{name} has zero area: {tuple(image.shape)}")
    return image


def check_mask(mask: torch.Tensor) -> torch.Tensor:
    if mask.ndim != 2:
        raise DimensionError(f"mask must have shape (H, W), got {tuple(mask.shape)}")
    if not bool(((mask == 0) | (mask == 1)).all()):
        raise ValidationError("mask must be strictly binary")
    return mask


def composite(base: torch.Tensor, overlay: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Return ``base * (1 - mask) + overlay * mask`` per channel.

    Selection is done with ``torch.where`` so the identity and full
    replacement cases are bit-exact; the result is still differentiable with
    respect to ``overlay`` (gradient equals the broadcast mask).
    """
    check_image(base, "base")
    check_image(overlay, "overlay")
    check_mask(mask)
    if base.shape != overlay.shape or base.shape[:2] != mask.shape:
        raise DimensionError(
            f"shape mismatch: base {tuple(base.shape)}, overlay {tuple(overlay.shape)}, mask {tuple(mask.shape)}"
        )
    return torch.where(mask.bool()[..., None], overlay, base)


def clamp_unit(x):
    """Clamp values into ``[0, 1]``. NaN input is rejected."""
    t = as_tensor(x)
    if bool(torch.isnan(t).any()):
        raise ValidationError("NaN passed to clamp_unit")
    out = t.clamp(0.0, 1.0)
    if isinstance(x, torch.Tensor):
        return out
    if np.ndim(x) == 0:
        return float(out)
    return out.numpy()


def mask_from_boxes(boxes, height: int, width: int) -> torch.Tensor:
    """Rasterize the union of ``boxes`` using the pixel-center rule.

    Pixel ``(i, j)`` is inside a box iff ``x_min <= j + 0.5 < x_max`` and
    ``y_min <= i + 0.5 < y_max``.
    """
    mask = torch.zeros(height, width, dtype=torch.float32)
    cols = torch.arange(width, dtype=torch.float64) + 0.5
    rows = torch.arange(height, dtype=torch.float64) + 0.5
    for box in boxes:
        if not box.inside(height, width):
            raise ValidationError(f"box {box.as_list()} outside {height}x{width} image")
        in_x = (cols >= box.x_min) & (cols < box.x_max)
        in_y = (rows >= box.y_min) & (rows < box.y_max)
        mask[in_y[:, None] & in_x[None, :]] = 1.0
    return mask


def box_pixel_slices(box: BBox, height: int, width: int) -> tuple[slice, slice]:
    """Row/column slices covering the pixels whose centers fall inside ``box``."""
    x0 = max(int(np.ceil(box.x_min - 0.5)), 0)
    x1 = min(int(np.ceil(box.x_max - 0.5)), width)
    y0 = max(int(np.ceil(box.y_min - 0.5)), 0)
    y1 = min(int(np.ceil(box.y_max - 0.5)), height)
    return slice(y0, max(y0, y1)), slice(x0, max(x0, x1))


def read_image(path) -> torch.Tensor:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return torch.from_numpy(arr / 255.0)


def to_uint8(image: torch.Tensor) -> np.ndarray:
    arr = image.detach().cpu().double().numpy()
    return np.floor(np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_image(path, image: torch.Tensor) -> None:
    """Write an ``(H, W, 3)`` unit-range image as 8-bit PNG/JPEG (round half up)."""
    check_image(image)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image)).save(path)
