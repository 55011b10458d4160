"""Adversarial patch optimization loop and patch serialization.

One step: augment the batch (none / global / local), scene-match and place
the current patch on every target box, run the frozen detector, combine the
detection, smoothness and printability losses, take an Adam step on the
patch pixels and clamp them back into [0, 1].
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .augment import augment
from .detector import check_differentiable
from .imaging import ValidationError, read_image, write_image
from .losses import LossWeights, PrintableSet, batch_det_loss, nps_loss, total_loss, tv_loss
from .placement import PlacementParams, SceneParams, apply_patch_to_all_targets

log = logging.getLogger(__name__)

MODES = ("none", "global", "local")
SIDECAR_MAGIC = b"APATCHv1"
STREAMS = ("init", "order", "augment", "placement", "scene")


class ConfigError(ValidationError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"config field {field_name!r}: {message}")
        self.field = field_name


class NonFiniteLossError(RuntimeError):
    pass


class PatchFormatError(ValueError):
    pass


@dataclass
class AttackConfig:
    patch_side: int = 64
    epochs: int = 200
    learning_rate: float = 0.03
    optimizer: str = "adam"
    weights: LossWeights = field(default_factory=LossWeights)
    placement: PlacementParams = field(default_factory=PlacementParams)
    scene: SceneParams = field(default_factory=SceneParams)
    mode: str = "local"
    seed: int = 0
    batch_size: int = 8

    def __post_init__(self):
        if not isinstance(self.patch_side, int) or self.patch_side < 8:
            raise ConfigError("patch_side", "must be an integer >= 8")
        if not isinstance(self.epochs, int) or self.epochs < 1:
            raise ConfigError("epochs", "must be a positive integer")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            raise ConfigError("batch_size", "must be a positive integer")
        if not math.isfinite(self.learning_rate) or self.learning_rate < 0:
            raise ConfigError("learning_rate", "must be a finite, non-negative number")
        if self.optimizer != "adam":
            raise ConfigError("optimizer", "only 'adam' is supported")
        if self.mode not in MODES:
            raise ConfigError("mode", f"must be one of {MODES}")
        if not isinstance(self.seed, int):
            raise ConfigError("seed", "must be an integer")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "AttackConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        for key in raw:
            if key not in known:
                raise ConfigError(key, "unknown field")
        kwargs = dict(raw)
        nested = {"weights": LossWeights, "placement": PlacementParams, "scene": SceneParams}
        for name, typ in nested.items():
            if name in kwargs:
                sub = kwargs[name]
                if not isinstance(sub, dict):
                    raise ConfigError(name, "must be an object")
                sub_known = {f.name for f in dataclasses.fields(typ)}
                for key in sub:
                    if key not in sub_known:
                        raise ConfigError(f"{name}.{key}", "unknown field")
                sub = {k: tuple(v) if isinstance(v, list) else v for k, v in sub.items()}
                try:
                    kwargs[name] = typ(**sub)
                except (ValidationError, TypeError) as exc:
                    raise ConfigError(name, str(exc)) from exc
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "AttackConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("<file>", f"invalid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("<file>", "top level must be an object")
        return cls.from_dict(raw)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))


def seed_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent generators per concern, all derived from one master seed."""
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(ss) for name, ss in zip(STREAMS, children)}


def init_patch(side: int, rng: np.random.Generator) -> torch.Tensor:
    """Gray patch: one U(0.3, 0.7) value per pixel, copied to all three channels."""
    if side < 8:
        raise ValidationError("patch side must be at least 8")
    gray = torch.from_numpy(rng.uniform(0.3, 0.7, size=(side, side)).astype(np.float32))
    return gray[..., None].repeat(1, 1, 3)


def make_random_patch(side: int, rng: np.random.Generator) -> torch.Tensor:
    if side < 8:
        raise ValidationError("patch side must be at least 8")
    return torch.from_numpy(rng.uniform(0.0, 1.0, size=(side, side, 3)).astype(np.float32))


@dataclass
class TrainingLog:
    rows: list[dict] = field(default_factory=list)

    COLUMNS = ("epoch", "det_loss", "tv_loss", "nps_loss", "total")

    def append(self, **row):
        self.rows.append(row)

    def column(self, name: str) -> list[float]:
        return [r[name] for r in self.rows]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=self.COLUMNS)
            writer.writeheader()
            for row in self.rows:
                writer.writerow(row)


def patch_step_loss(patch, images, annotations, detector, config: AttackConfig, printable: PrintableSet,
                    streams: dict):
    """Place ``patch`` on an (already augmented) batch and return the loss terms."""
    placed = [
        apply_patch_to_all_targets(img, patch, ann, config.placement, config.scene,
                                   streams["placement"], streams["scene"])
        for img, ann in zip(images, annotations)
    ]
    confs = detector.confidences(torch.stack(placed))
    check_differentiable(confs)
    det = batch_det_loss(confs, getattr(detector, "confidence_floor", 0.0))
    tv = tv_loss(patch)
    nps = nps_loss(patch, printable)
    return det, tv, nps, total_loss(det, tv, nps, config.weights)


def train_patch(config: AttackConfig, dataset, detector, printable: PrintableSet | None = None,
                initial_patch: torch.Tensor | None = None):
    """Optimize a patch against a frozen ``detector``; returns ``(patch, TrainingLog)``.

    ``config.learning_rate`` is the initial rate; it decays to zero along a
    cosine schedule over all optimizer steps.

    The detector is switched to eval mode and its parameters are excluded
    from autograd for the duration of the run, then restored.
    """
    if len(dataset) == 0:
        raise ValidationError("cannot train a patch on an empty dataset")
    printable = printable or PrintableSet.from_file()
    streams = seed_streams(config.seed)
    start = init_patch(config.patch_side, streams["init"])
    if initial_patch is not None:
        start = initial_patch.detach().float().clone()
    patch = start.clone().requires_grad_(True)
    opt = torch.optim.Adam([patch], lr=config.learning_rate)
    steps = config.epochs * math.ceil(len(dataset) / config.batch_size)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(steps, 1))

    was_training = getattr(detector, "training", False)
    params = list(detector.parameters()) if hasattr(detector, "parameters") else []
    flags = [p.requires_grad for p in params]
    if hasattr(detector, "eval"):
        detector.eval()
    for p in params:
        p.requires_grad_(False)

    history = TrainingLog()
    try:
        for epoch in range(1, config.epochs + 1):
            order = streams["order"].permutation(len(dataset))
            sums = np.zeros(4)
            n_batches = 0
            for b in range(0, len(order), config.batch_size):
                idx = order[b:b + config.batch_size]
                anns = [dataset.annotations[i] for i in idx]
                imgs = [augment(dataset.images[i], ann, config.mode, streams["augment"])
                        for i, ann in zip(idx, anns)]
                det, tv, nps, loss = patch_step_loss(patch, imgs, anns, detector, config, printable, streams)
                if not torch.isfinite(loss):
                    raise NonFiniteLossError(
                        f"non-finite loss at epoch {epoch}, batch {n_batches}: "
                        f"det={det.item()}, tv={tv.item()}, nps={nps.item()}, "
                        f"patch range=[{patch.min().item()}, {patch.max().item()}]"
                    )
                opt.zero_grad()
                loss.backward()
                opt.step()
                sched.step()
                with torch.no_grad():
                    patch.clamp_(0.0, 1.0)
                sums += [det.item(), tv.item(), nps.item(), loss.item()]
                n_batches += 1
            means = sums / n_batches
            history.append(epoch=epoch, det_loss=means[0], tv_loss=means[1], nps_loss=means[2], total=means[3])
            log.info("epoch %d det %.4f tv %.3f nps %.3f total %.4f", epoch, *means)
    finally:
        for p, flag in zip(params, flags):
            p.requires_grad_(flag)
        if was_training and hasattr(detector, "train"):
            detector.train()
    return patch.detach(), history


def save_patch_sidecar(path, patch: torch.Tensor) -> None:
    """Lossless float32 dump: magic, side as uint32 LE, then row-major RGB data."""
    arr = patch.detach().cpu().numpy().astype("<f4")
    if arr.ndim != 3 or arr.shape[0] != arr.shape[1] or arr.shape[2] != 3:
        raise ValidationError(f"patch must be (side, side, 3), got {arr.shape}")
    Path(path).write_bytes(SIDECAR_MAGIC + struct.pack("<I", arr.shape[0]) + arr.tobytes(order="C"))


def load_patch_sidecar(path) -> torch.Tensor:
    data = Path(path).read_bytes()
    if data[:8] != SIDECAR_MAGIC:
        raise PatchFormatError(f"{path}: bad magic {data[:8]!r}, expected {SIDECAR_MAGIC!r}")
    if len(data) < 12:
        raise PatchFormatError(f"{path}: truncated header")
    (side,) = struct.unpack("<I", data[8:12])
    expected = 12 + side * side * 3 * 4
    if side == 0 or len(data) != expected:
        raise PatchFormatError(f"{path}: expected {expected} bytes for side {side}, found {len(data)}")
    arr = np.frombuffer(data, dtype="<f4", offset=12).reshape(side, side, 3)
    return torch.from_numpy(arr.astype(np.float32))


def save_patch(out_dir, patch: torch.Tensor, stem: str = "patch") -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    png, sidecar = out / f"{stem}.png", out / f"{stem}.apatch"
    write_image(png, patch)
    save_patch_sidecar(sidecar, patch)
    return png, sidecar


def load_patch(path) -> torch.Tensor:
    """Load a patch from its float sidecar, or an 8-bit image as a fallback."""
    path = Path(path)
    if path.suffix in (".png", ".jpg", ".jpeg"):
        side = path.with_suffix(".apatch")
        return load_patch_sidecar(side) if side.is_file() else read_image(path)
    return load_patch_sidecar(path)
