"""Annotation parsing, letterbox preprocessing and the synthetic ship scenes.

On-disk format is a JSON list of ``{"image": <relative path>, "boxes":
[[x_min, y_min, x_max, y_max], ...]}`` objects next to the image files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .imaging import BBox, ValidationError, check_image, read_image, write_image

ANNOTATION_FILE = "annotations.json"
PAD_VALUE = 0.5
# long side of a synthetic ship as a fraction of the canvas
SHIP_LENGTH_RANGE = (0.45, 0.8)
SHIP_CLASS = 0


class AnnotationParseError(ValueError):
    pass


class IngestionError(RuntimeError):
    pass


class GenerationError(RuntimeError):
    pass


@dataclass
class Annotation:
    image_id: str
    boxes: list[BBox] = field(default_factory=list)
    class_id: int = SHIP_CLASS

    def __post_init__(self):
        if self.class_id != SHIP_CLASS:
            raise ValidationError(f"only the single 'ship' class (0) is supported, got {self.class_id}")

    def to_json(self) -> dict:
        return {"image": self.image_id, "boxes": [b.as_list() for b in self.boxes]}


@dataclass(frozen=True)
class LetterboxRecord:
    scale: float
    pad_left: int
    pad_top: int
    original_size: tuple[int, int]

    def forward(self, box: BBox) -> BBox:
        s = self.scale
        return BBox(box.x_min * s + self.pad_left, box.y_min * s + self.pad_top,
                    box.x_max * s + self.pad_left, box.y_max * s + self.pad_top)

    def inverse(self, box: BBox) -> BBox:
        s = self.scale
        return BBox((box.x_min - self.pad_left) / s, (box.y_min - self.pad_top) / s,
                    (box.x_max - self.pad_left) / s, (box.y_max - self.pad_top) / s)


def _parse_entry(i: int, entry) -> Annotation:
    where = f"entry {i}"
    if not isinstance(entry, dict) or "image" not in entry or "boxes" not in entry:
        raise AnnotationParseError(f"{where}: expected an object with 'image' and 'boxes'")
    image = entry["image"]
    where = f"entry {i} ({image!r})"
    if not isinstance(image, str) or not image:
        raise AnnotationParseError(f"{where}: 'image' must be a non-empty string")
    if not isinstance(entry["boxes"], list):
        raise AnnotationParseError(f"{where}: 'boxes' must be a list")
    boxes = []
    for k, raw in enumerate(entry["boxes"]):
        if not isinstance(raw, (list, tuple)) or len(raw) != 4:
            raise AnnotationParseError(f"{where}, box {k}: expected [x_min, y_min, x_max, y_max]")
        try:
            boxes.append(BBox(*(float(v) for v in raw)))
        except (TypeError, ValueError) as exc:
            raise AnnotationParseError(f"{where}, box {k}: {exc}") from exc
    return Annotation(image, boxes)


def parse_annotations(annotation_file, check_images: bool = True) -> list[Annotation]:
    """Read an annotation JSON file into :class:`Annotation` records.

    Image paths are resolved relative to the annotation file; with
    ``check_images`` a missing image raises :class:`IngestionError`.
    """
    path = Path(annotation_file)
    try:
        records = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise AnnotationParseError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(records, list):
        raise AnnotationParseError(f"{path}: top level must be a list")
    annotations = [_parse_entry(i, e) for i, e in enumerate(records)]
    if check_images:
        for ann in annotations:
            if not (path.parent / ann.image_id).is_file():
                raise IngestionError(f"image {ann.image_id!r} listed in {path} does not exist")
    return annotations


def serialize_annotations(annotations: list[Annotation], annotation_file) -> None:
    path = Path(annotation_file)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps([a.to_json() for a in annotations], indent=1))


def letterbox_resize(image: torch.Tensor, boxes: list[BBox], target: int = 640):
    """Aspect-preserving resize onto a ``target x target`` mid-gray canvas."""
    check_image(image)
    if target <= 0:
        raise ValidationError("target size must be positive")
    h, w = image.shape[:2]
    scale = target / max(h, w)
    new_h = min(target, max(1, round(h * scale)))
    new_w = min(target, max(1, round(w * scale)))
    pad_top = (target - new_h) // 2
    pad_left = (target - new_w) // 2
    record = LetterboxRecord(scale, pad_left, pad_top, (h, w))
    if (new_h, new_w) == (h, w) and (h, w) == (target, target):
        return image.clone(), list(boxes), record
    if (new_h, new_w) == (h, w):
        resized = image
    else:
        resized = F.interpolate(image.permute(2, 0, 1)[None], size=(new_h, new_w), mode="bilinear",
                                align_corners=False, antialias=scale < 1)[0].permute(1, 2, 0).clamp(0, 1)
    canvas = torch.full((target, target, 3), PAD_VALUE, dtype=image.dtype)
    canvas[pad_top:pad_top + new_h, pad_left:pad_left + new_w] = resized
    return canvas, [record.forward(b) for b in boxes], record


def filter_small_objects(annotations: list[Annotation], image_areas: dict, threshold: float = 0.0005):
    """Drop boxes whose area is strictly below ``threshold`` of the image area.

    Images left without any box are dropped as well.
    """
    if not 0 < threshold < 1:
        raise ValidationError("threshold must lie in (0, 1)")
    kept = []
    for ann in annotations:
        area = image_areas[ann.image_id]
        boxes = [b for b in ann.boxes if b.area / area >= threshold]
        if boxes:
            kept.append(Annotation(ann.image_id, boxes, ann.class_id))
    return kept


def generate_synthetic_scene(rng: np.random.Generator, size: int = 128, n_ships=(1, 3),
                             image_id: str = "scene", max_tries: int = 500,
                             length_range: tuple[float, float] = SHIP_LENGTH_RANGE):
    """Dark noisy sea with bright, non-overlapping, axis-aligned ship rectangles.

    ``n_ships`` is an int or an inclusive ``(lo, hi)`` range. Ships have 2:1
    to 6:1 aspect ratios, a long side spanning ``length_range`` of the image
    (45-80% by default), horizontal or vertical orientation, and keep a
    2 px gap from each other.
    """
    if size < 64:
        raise ValidationError("synthetic scenes need size >= 64")
    lo, hi = (n_ships, n_ships) if isinstance(n_ships, int) else n_ships
    count = int(rng.integers(lo, hi + 1))

    sea = rng.uniform(0.1, 0.3)
    tint = rng.uniform(-0.03, 0.03, size=3)
    pixels = sea + tint + rng.uniform(-0.03, 0.03, size=(size, size, 3))

    boxes: list[BBox] = []
    tries = 0
    while len(boxes) < count:
        tries += 1
        if tries > max_tries:
            raise GenerationError(f"could not place {count} non-overlapping ships in {max_tries} tries")
        length = int(rng.integers(int(length_range[0] * size), int(length_range[1] * size) + 1))
        aspect = rng.uniform(2.0, 6.0)
        beam = max(4, int(round(length / aspect)))
        w, h = (length, beam) if rng.random() < 0.5 else (beam, length)
        x0 = int(rng.integers(0, size - w + 1))
        y0 = int(rng.integers(0, size - h + 1))
        cand = BBox(float(x0), float(y0), float(x0 + w), float(y0 + h))
        if any(_gap_overlap(cand, b, 2) for b in boxes):
            continue
        boxes.append(cand)
        hull = rng.uniform(0.6, 0.9)
        pixels[y0:y0 + h, x0:x0 + w] = hull + rng.uniform(-0.03, 0.03, size=(h, w, 3))

    image = torch.from_numpy(np.clip(pixels, 0.0, 1.0).astype(np.float32))
    return image, Annotation(image_id, boxes)


def _gap_overlap(a: BBox, b: BBox, gap: float) -> bool:
    return not (a.x_max + gap <= b.x_min or b.x_max + gap <= a.x_min
                or a.y_max + gap <= b.y_min or b.y_max + gap <= a.y_min)


@dataclass
class SceneDataset:
    """In-memory list of letterboxed images with their annotations."""

    images: list[torch.Tensor]
    annotations: list[Annotation]

    def __post_init__(self):
        if len(self.images) != len(self.annotations):
            raise ValidationError("images and annotations differ in length")

    def __len__(self):
        return len(self.images)

    def subset(self, indices) -> "SceneDataset":
        return SceneDataset([self.images[i] for i in indices], [self.annotations[i] for i in indices])


def synthesize_dataset(count: int, seed: int, size: int = 128, n_ships=(1, 3),
                       length_range: tuple[float, float] = SHIP_LENGTH_RANGE) -> SceneDataset:
    root = np.random.SeedSequence(seed)
    images, anns = [], []
    for i, child in enumerate(root.spawn(count)):
        img, ann = generate_synthetic_scene(np.random.default_rng(child), size, n_ships, f"images/{i:05d}.png",
                                            length_range=length_range)
        images.append(img)
        anns.append(ann)
    return SceneDataset(images, anns)


def write_dataset(dataset: SceneDataset, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for img, ann in zip(dataset.images, dataset.annotations):
        write_image(out / ann.image_id, img)
    serialize_annotations(dataset.annotations, out / ANNOTATION_FILE)
    return out / ANNOTATION_FILE


def load_dataset(path, input_size: int = 128, min_area_ratio: float | None = 0.0005) -> SceneDataset:
    """Load a dataset directory (or annotation file) and letterbox it to ``input_size``.

    Small-object filtering uses the original image area.
    """
    path = Path(path)
    ann_file = path / ANNOTATION_FILE if path.is_dir() else path
    if not ann_file.is_file():
        raise IngestionError(f"no annotation file at {ann_file}")
    annotations = parse_annotations(ann_file)
    raw = {a.image_id: read_image(ann_file.parent / a.image_id) for a in annotations}
    if min_area_ratio is not None:
        areas = {k: v.shape[0] * v.shape[1] for k, v in raw.items()}
        annotations = filter_small_objects(annotations, areas, min_area_ratio)
    images, anns = [], []
    for ann in annotations:
        img, boxes, _ = letterbox_resize(raw[ann.image_id], ann.boxes, input_size)
        images.append(img)
        anns.append(Annotation(ann.image_id, boxes))
    return SceneDataset(images, anns)

