"""Detector contract and a small single-class grid detector used as the victim.

The toy detector predicts, for every cell of a stride-8 grid, an objectness
logit and box offsets. ``n``/``s``/``m`` variants differ only in channel
width (0.25 / 0.5 / 1.0).
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.ops import nms

from .imaging import BBox, ValidationError

log = logging.getLogger(__name__)

VARIANT_WIDTHS = {"n": 0.25, "s": 0.5, "m": 1.0}
BASE_CHANNELS = (32, 64, 128, 128)


class DetectorContractError(RuntimeError):
    """A detector broke the differentiability or range contract."""


class DetectorTrainingError(RuntimeError):
    pass


@dataclass
class Detection:
    box: BBox
    confidence: float | torch.Tensor

    @property
    def score(self) -> float:
        return float(torch.as_tensor(self.confidence).detach())


class DetectorModel(Protocol):
    confidence_floor: float

    def detect(self, images, confidence_floor: float | None = None) -> list[list[Detection]]:
        ...

    def confidences(self, images: torch.Tensor) -> torch.Tensor:
        """Raw per-candidate confidences ``(N, K)``, differentiable w.r.t. pixels."""
        ...


def _block(cin, cout, stride=1, dilation=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=dilation, dilation=dilation, bias=False),
        nn.BatchNorm2d(cout),
        nn.SiLU(),
    )


class ToyDetector(nn.Module):
    """Four conv stages (three stride-2, one dilated) and a 1x1 grid head."""

    stride = 8

    def __init__(self, variant: str = "s", input_size: int = 128, anchor: float = 32.0,
                 confidence_floor: float = 0.25, nms_iou: float = 0.5):
        super().__init__()
        if variant not in VARIANT_WIDTHS:
            raise ValidationError(f"variant must be one of {sorted(VARIANT_WIDTHS)}, got {variant!r}")
        if input_size % self.stride:
            raise ValidationError(f"input_size must be a multiple of {self.stride}")
        self.variant = variant
        self.input_size = input_size
        self.anchor = anchor
        self.confidence_floor = confidence_floor
        self.nms_iou = nms_iou
        c1, c2, c3, c4 = (max(4, int(c * VARIANT_WIDTHS[variant])) for c in BASE_CHANNELS)
        self.backbone = nn.Sequential(
            _block(3, c1, stride=2),
            _block(c1, c2, stride=2),
            _block(c2, c3, stride=2),
            nn.Sequential(_block(c3, c4, dilation=2), _block(c4, c4, dilation=4)),
        )
        self.head = nn.Conv2d(c4, 5, 1)
        nn.init.constant_(self.head.bias, 0.0)
        nn.init.constant_(self.head.bias[:1], -4.0)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """``(N, 3, H, W)`` in [0, 1] -> raw head output ``(N, 5, H/8, W/8)``."""
        return self.head(self.backbone(x))

    @staticmethod
    def _to_nchw(images) -> torch.Tensor:
        if isinstance(images, (list, tuple)):
            images = torch.stack(list(images))
        if images.ndim == 3:
            images = images[None]
        return images.permute(0, 3, 1, 2)

    def decode(self, raw: torch.Tensor):
        """Raw head output -> ``(confidences (N, K), boxes (N, K, 4))`` in pixels."""
        n, _, gh, gw = raw.shape
        ys, xs = torch.meshgrid(torch.arange(gh, dtype=raw.dtype), torch.arange(gw, dtype=raw.dtype), indexing="ij")
        conf = torch.sigmoid(raw[:, 0])
        cx = (xs + torch.sigmoid(raw[:, 1])) * self.stride
        cy = (ys + torch.sigmoid(raw[:, 2])) * self.stride
        bw = self.anchor * torch.exp(raw[:, 3].clamp(-6, 4))
        bh = self.anchor * torch.exp(raw[:, 4].clamp(-6, 4))
        boxes = torch.stack([cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2], dim=-1)
        return conf.reshape(n, -1), boxes.reshape(n, -1, 4)

    def confidences(self, images: torch.Tensor) -> torch.Tensor:
        """Every grid cell's confidence for ``(N, H, W, 3)`` images."""
        conf, _ = self.decode(self(self._to_nchw(images).to(self.head.weight.dtype)))
        return conf

    def detect(self, images, confidence_floor: float | None = None) -> list[list[Detection]]:
        """NMS-filtered detections per image; confidences keep their autograd graph."""
        floor = self.confidence_floor if confidence_floor is None else confidence_floor
        conf, boxes = self.decode(self(self._to_nchw(images).to(self.head.weight.dtype)))
        size = float(self.input_size)
        out = []
        for c, b in zip(conf, boxes):
            keep = (c >= floor).nonzero().flatten()
            bb = b.detach()[keep]
            bb = torch.stack([bb[:, 0].clamp(0, size), bb[:, 1].clamp(0, size),
                              bb[:, 2].clamp(0, size), bb[:, 3].clamp(0, size)], dim=-1)
            ok = ((bb[:, 2] - bb[:, 0]) > 1e-3) & ((bb[:, 3] - bb[:, 1]) > 1e-3)
            keep, bb = keep[ok], bb[ok]
            order = nms(bb.float(), c.detach()[keep].float(), self.nms_iou)
            out.append([Detection(BBox(*(float(v) for v in bb[i])), c[keep[i]]) for i in order.tolist()])
        return out


def parameter_hash(model: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in state-dict order."""
    digest = hashlib.sha256()
    for name, tensor in model.state_dict().items():
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def freeze(model: nn.Module) -> nn.Module:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def _targets(annotations, gh: int, gw: int, stride: int, anchor: float):
    n = len(annotations)
    obj = torch.zeros(n, gh, gw)
    box = torch.zeros(n, 4, gh, gw)
    for i, ann in enumerate(annotations):
        for b in ann.boxes:
            cx, cy = b.center
            gx = min(gw - 1, int(cx // stride))
            gy = min(gh - 1, int(cy // stride))
            obj[i, gy, gx] = 1.0
            box[i, :, gy, gx] = torch.tensor([
                cx / stride - gx, cy / stride - gy,
                np.log(b.width / anchor), np.log(b.height / anchor),
            ])
    return obj, box


def _flip(images: torch.Tensor, annotations, horizontal: bool, vertical: bool):
    from .data import Annotation

    size = images.shape[1]
    if horizontal:
        images = images.flip(2)
    if vertical:
        images = images.flip(1)
    flipped = []
    for ann in annotations:
        boxes = []
        for b in ann.boxes:
            x0, y0, x1, y1 = b.x_min, b.y_min, b.x_max, b.y_max
            if horizontal:
                x0, x1 = size - x1, size - x0
            if vertical:
                y0, y1 = size - y1, size - y0
            boxes.append(BBox(x0, y0, x1, y1))
        flipped.append(Annotation(ann.image_id, boxes))
    return images, flipped


def detector_loss(model: ToyDetector, raw: torch.Tensor, annotations) -> torch.Tensor:
    _, _, gh, gw = raw.shape
    obj_t, box_t = _targets(annotations, gh, gw, model.stride, model.anchor)
    obj_loss = F.binary_cross_entropy_with_logits(raw[:, 0], obj_t, reduction="sum") / len(annotations)
    pos = obj_t.bool()
    if pos.any():
        pred_xy = torch.sigmoid(raw[:, 1:3]).permute(0, 2, 3, 1)[pos]
        pred_wh = raw[:, 3:5].permute(0, 2, 3, 1)[pos]
        tgt = box_t.permute(0, 2, 3, 1)[pos]
        box_loss = (F.smooth_l1_loss(pred_xy, tgt[:, :2], reduction="sum", beta=0.05)
                    + F.smooth_l1_loss(pred_wh, tgt[:, 2:], reduction="sum", beta=0.05)) / len(annotations)
    else:
        box_loss = raw.sum() * 0.0
    return obj_loss + 5.0 * box_loss


def train_toy_detector(dataset, epochs: int = 60, variant: str = "s", seed: int = 0,
                       val_dataset=None, batch_size: int = 16, learning_rate: float = 2e-3,
                       ap_floor: float | None = 0.95, min_images: int = 100) -> ToyDetector:
    """Fit a :class:`ToyDetector` on ``dataset`` and check held-out AP@0.5.

    With ``ap_floor`` set, an AP below it on ``val_dataset`` raises
    :class:`DetectorTrainingError`. The returned model is frozen.
    """
    from .evaluation import evaluate_detector

    if len(dataset) < min_images:
        raise ValidationError(f"detector training needs at least {min_images} images, got {len(dataset)}")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = ToyDetector(variant, input_size=dataset.images[0].shape[0])
    opt = torch.optim.Adam(model.parameters(), lr=learning_rate)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(1, epochs))
    images = torch.stack(dataset.images)
    history = []
    for epoch in range(epochs):
        model.train()
        order = rng.permutation(len(dataset))
        total = 0.0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            batch = images[idx]
            anns = [dataset.annotations[i] for i in idx]
            batch, anns = _flip(batch, anns, bool(rng.random() < 0.5), bool(rng.random() < 0.5))
            raw = model(batch.permute(0, 3, 1, 2))
            loss = detector_loss(model, raw, anns)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        sched.step()
        history.append(total / len(dataset))
        log.debug("toy-%s epoch %d loss %.4f", variant, epoch + 1, history[-1])

    freeze(model)
    model.training_history = history
    if ap_floor is not None:
        held_out = val_dataset if val_dataset is not None else dataset
        ap = evaluate_detector(model, held_out)
        model.heldout_ap = ap
        if ap < ap_floor:
            raise DetectorTrainingError(
                f"toy-{variant} reached held-out AP@0.5 {ap:.3f} < {ap_floor}; last losses {history[-3:]}"
            )
    return model


def save_detector(model: ToyDetector, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "variant": model.variant,
        "input_size": model.input_size,
        "anchor": model.anchor,
        "state_dict": model.state_dict(),
    }, path)


def load_detector(path) -> ToyDetector:
    ckpt = torch.load(Path(path), map_location="cpu", weights_only=True)
    model = ToyDetector(ckpt["variant"], input_size=ckpt["input_size"], anchor=ckpt["anchor"])
    model.load_state_dict(ckpt["state_dict"])
    return freeze(model)


def check_differentiable(confidences: torch.Tensor) -> None:
    if not confidences.requires_grad:
        raise DetectorContractError("detector returned confidences without an autograd graph")
    if bool(((confidences < 0) | (confidences > 1)).any()):
        raise DetectorContractError("detector confidences must lie in [0, 1]")
