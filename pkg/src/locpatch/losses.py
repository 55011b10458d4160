"""Printability, smoothness and detection losses for patch optimization."""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
import torch

from .imaging import ValidationError


@dataclass(frozen=True)
class LossWeights:
    """Weights of the detection, smoothness and printability terms.

    TV and NPS are sums over every patch pixel (hundreds at initialization
    for a 64 px patch) while the detection term is a confidence in [0, 1],
    hence the small defaults for ``beta`` and ``gamma``.
    """

    alpha: float = 1.0
    beta: float = 1e-4
    gamma: float = 1e-4

    def __post_init__(self):
        vals = (self.alpha, self.beta, self.gamma)
        if any(v < 0 for v in vals):
            raise ValidationError(f"loss weights must be non-negative, got {vals}")
        if not any(v > 0 for v in vals):
            raise ValidationError("at least one loss weight must be positive")


class PrintableSet:
    """Palette of printable RGB colors, stored as a ``(K, 3)`` tensor."""

    def __init__(self, colors):
        arr = np.asarray(colors, dtype=np.float64).reshape(-1, 3) if len(colors) else np.zeros((0, 3))
        if arr.shape[0] == 0:
            raise ValidationError("printable color set is empty")
        if not np.all((arr >= 0) & (arr <= 1)):
            raise ValidationError("printable colors must lie in [0, 1]")
        self.colors = torch.from_numpy(arr)

    def __len__(self):
        return self.colors.shape[0]

    @classmethod
    def from_file(cls, path=None) -> "PrintableSet":
        if path is None:
            text = resources.files("locpatch").joinpath("assets/printable_colors.txt").read_text()
        else:
            text = Path(path).read_text()
        rows = []
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                rows.append([float(v) for v in line.split()])
        if any(len(r) != 3 for r in rows):
            raise ValidationError("printable color file needs exactly three values per line")
        return cls(rows)


def nps_loss(patch: torch.Tensor, printable: PrintableSet) -> torch.Tensor:
    """Sum over pixels of the squared distance to the nearest printable color.

    At ties the gradient goes to the first minimizing palette entry.
    """
    colors = printable.colors.to(patch.dtype)
    dist = ((patch[..., None, :] - colors) ** 2).sum(-1)
    nearest = dist.argmin(-1, keepdim=True)
    return dist.gather(-1, nearest).sum()


def tv_loss(patch: torch.Tensor) -> torch.Tensor:
    """Squared-difference total variation over the interior index set.

    Only pixels with ``i, j <= N - 1`` (1-based) contribute, so the last row
    and column act solely as neighbors. Accepts ``(N, N)`` or ``(N, N, C)``.
    """
    if patch.shape[0] < 2 or patch.shape[1] < 2:
        raise ValidationError("tv_loss needs a patch side of at least 2")
    core = patch[:-1, :-1]
    down = patch[1:, :-1]
    right = patch[:-1, 1:]
    return ((core - down) ** 2 + (core - right) ** 2).sum()


def det_loss(detections) -> torch.Tensor:
    """Largest confidence among ``detections`` (0 when there are none).

    Accepts a sequence of :class:`~locpatch.detector.Detection` or a tensor
    of raw confidences.
    """
    if isinstance(detections, torch.Tensor):
        confs = detections.reshape(-1)
    else:
        if len(detections) == 0:
            return torch.zeros(())
        confs = torch.stack([torch.as_tensor(d.confidence) for d in detections])
    if confs.numel() == 0:
        return torch.zeros((), dtype=confs.dtype)
    return confs.max()


def batch_det_loss(confidences: torch.Tensor, floor: float = 0.0) -> torch.Tensor:
    """Per-image maximum confidence averaged over the batch; ``confidences`` is ``(N, K)``.

    An image whose best confidence is under ``floor`` has no detections
    and contributes 0 (and no gradient).
    """
    if confidences.shape[-1] == 0:
        return torch.zeros((), dtype=confidences.dtype)
    best = confidences.max(dim=-1).values
    best = torch.where(best >= floor, best, torch.zeros_like(best))
    return best.mean()


def total_loss(det, tv, nps, weights: LossWeights = LossWeights()):
    return weights.alpha * det + weights.beta * tv + weights.gamma * nps
