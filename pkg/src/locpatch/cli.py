"""``locpatch`` command line: synth, train-detector, attack, evaluate, transfer, augment-preview.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
Every command writes a ``manifest.json`` describing inputs, outputs, seed
and timings.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .attack import (AttackConfig, ConfigError, PatchFormatError, load_patch, make_random_patch, save_patch,
                     train_patch)
from .augment import augment
from .data import (ANNOTATION_FILE, AnnotationParseError, IngestionError, load_dataset, synthesize_dataset,
                   write_dataset)
from .detector import DetectorTrainingError, load_detector, parameter_hash, save_detector, train_toy_detector
from .evaluation import (AP_SCORE_FLOOR, _detect_all, evaluate_attack, patch_dataset, transfer_matrix,
                         write_transfer_csv)
from .imaging import ValidationError, write_image
from .placement import PlacementParams, SceneParams

log = logging.getLogger("locpatch")

USAGE_ERRORS = (ValidationError, ConfigError, AnnotationParseError, IngestionError, PatchFormatError)


class UsageError(Exception):
    pass


def _hash_files(paths) -> str:
    digest = hashlib.sha256()
    for p in sorted(Path(x) for x in paths):
        digest.update(str(p.name).encode())
        digest.update(p.read_bytes())
    return digest.hexdigest()


def _dataset_files(dataset_dir) -> list[Path]:
    root = Path(dataset_dir)
    ann = root / ANNOTATION_FILE
    if not ann.is_file():
        raise UsageError(f"dataset {root} has no {ANNOTATION_FILE}")
    files = [ann]
    for entry in json.loads(ann.read_text()):
        if isinstance(entry, dict) and isinstance(entry.get("image"), str):
            files.append(root / entry["image"])
    return [f for f in files if f.is_file()]


class Manifest:
    def __init__(self, command: str, args: argparse.Namespace):
        self.data = {
            "command": command,
            "version": __version__,
            "seed": args.seed,
            "args": {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"},
            "config": None,
            "input_hash": None,
            "outputs": [],
            "timings": {"started": time.time()},
        }

    def inputs(self, paths):
        self.data["input_hash"] = _hash_files(paths)

    def output(self, path):
        self.data["outputs"].append(str(path))

    def write(self, path):
        t = self.data["timings"]
        t["finished"] = time.time()
        t["seconds"] = t["finished"] - t["started"]
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.data, indent=1))


def _load_dataset_dir(path, input_size: int):
    path = Path(path)
    if not (path / ANNOTATION_FILE).is_file():
        raise UsageError(f"dataset {path} has no {ANNOTATION_FILE}")
    return load_dataset(path, input_size=input_size)


def cmd_synth(args) -> int:
    man = Manifest("synth", args)
    lo, hi = (int(v) for v in args.ships.split("-")) if "-" in args.ships else (int(args.ships),) * 2
    ds = synthesize_dataset(args.count, args.seed, size=args.size, n_ships=(lo, hi))
    ann = write_dataset(ds, args.out)
    man.output(ann)
    man.data["config"] = {"count": args.count, "size": args.size, "ships": [lo, hi]}
    man.write(Path(args.out) / "manifest.json")
    print(f"wrote {len(ds)} scenes to {args.out}")
    return 0


def cmd_train_detector(args) -> int:
    man = Manifest("train-detector", args)
    files = _dataset_files(args.dataset)
    train = _load_dataset_dir(args.dataset, args.input_size)
    val = None
    if args.val_dataset:
        files += _dataset_files(args.val_dataset)
        val = _load_dataset_dir(args.val_dataset, args.input_size)
    man.inputs(files)
    floor = None if args.ap_floor <= 0 else args.ap_floor
    try:
        model = train_toy_detector(train, epochs=args.epochs, variant=args.variant, seed=args.seed,
                                   val_dataset=val, ap_floor=floor)
    except DetectorTrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    out = Path(args.out)
    save_detector(model, out)
    man.output(out)
    man.data["config"] = {"variant": args.variant, "epochs": args.epochs, "input_size": args.input_size,
                          "heldout_ap": getattr(model, "heldout_ap", None),
                          "parameter_hash": parameter_hash(model)}
    man.write(out.with_suffix(".manifest.json"))
    ap = getattr(model, "heldout_ap", None)
    print(f"toy-{args.variant}: saved {out}" + (f", held-out AP@0.5 {ap:.4f}" if ap is not None else ""))
    return 0


def cmd_attack(args) -> int:
    man = Manifest("attack", args)
    config = AttackConfig.load(args.config) if args.config else AttackConfig()
    overrides = {}
    if args.mode is not None:
        overrides["mode"] = args.mode
    if args.seed_given:
        overrides["seed"] = args.seed
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if overrides:
        config = AttackConfig.from_dict({**config.to_dict(), **overrides})
    detector = load_detector(args.detector)
    dataset = _load_dataset_dir(args.dataset, detector.input_size)
    inputs = _dataset_files(args.dataset) + [Path(args.detector)]
    if args.config:
        inputs.append(Path(args.config))
    man.inputs(inputs)
    man.data["config"] = config.to_dict()
    man.data["seed"] = config.seed

    before = parameter_hash(detector)
    patch, history = train_patch(config, dataset, detector)
    if parameter_hash(detector) != before:
        raise RuntimeError("detector parameters changed during patch training")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    png, sidecar = save_patch(out, patch)
    history.write_csv(out / "training_log.csv")
    config.save(out / "config.json")
    from .plotting import plot_training_log

    curve = plot_training_log(history, out / "loss_curve.png")
    for p in (png, sidecar, out / "training_log.csv", out / "config.json", curve):
        man.output(p)
    man.write(out / "manifest.json")
    last = history.rows[-1]
    print(f"mode={config.mode} epochs={config.epochs} final det_loss={last['det_loss']:.4f} -> {sidecar}")
    return 0


def _resolve_patch(spec: str, seed: int, side: int):
    if spec == "none":
        return None
    if spec == "random":
        return make_random_patch(side, np.random.default_rng(seed))
    return load_patch(spec)


def cmd_evaluate(args) -> int:
    man = Manifest("evaluate", args)
    detector = load_detector(args.detector)
    dataset = _load_dataset_dir(args.dataset, detector.input_size)
    inputs = _dataset_files(args.dataset) + [Path(args.detector)]
    if args.patch not in ("none", "random"):
        inputs.append(Path(args.patch))
    man.inputs(inputs)
    patch = _resolve_patch(args.patch, args.seed, args.patch_side)
    report = evaluate_attack(detector, dataset, patch, PlacementParams(), SceneParams(), seed=args.seed,
                             conf_thresh=args.conf_thresh, iou_thresh=args.iou_thresh)
    man.data["config"] = {"patch": args.patch, "iou_thresh": args.iou_thresh, "conf_thresh": args.conf_thresh}

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_json(out / "report.json")
    report.write_csv(out / "report.csv")
    man.output(out / "report.json")
    man.output(out / "report.csv")
    if args.figure:
        from .plotting import plot_detection_pairs

        k = min(4, len(dataset))
        sub = dataset.subset(range(k))
        attacked = sub.images if patch is None else patch_dataset(sub, patch, PlacementParams(), SceneParams(),
                                                                  args.seed)
        fig = plot_detection_pairs(sub.images, attacked,
                                   _detect_all(detector, sub.images, 32, args.conf_thresh),
                                   _detect_all(detector, attacked, 32, args.conf_thresh),
                                   [a.boxes for a in sub.annotations], out / "detections.png")
        man.output(fig)
    man.write(out / "manifest.json")
    print(json.dumps({"ap": report.ap, "recall": report.recall, "asr": report.asr}))
    return 0


def _named_paths(items, kind):
    named = {}
    for item in items:
        name, sep, path = item.partition("=")
        if not sep:
            name, path = Path(item).stem, item
        if name in named:
            raise UsageError(f"duplicate {kind} name {name!r}")
        named[name] = path
    return named


def cmd_transfer(args) -> int:
    man = Manifest("transfer", args)
    det_paths = _named_paths(args.detector, "detector")
    if len(det_paths) < 2:
        raise UsageError("transfer needs at least two --detector entries")
    patch_paths = _named_paths(args.patch, "patch")
    detectors = {name: load_detector(p) for name, p in det_paths.items()}
    sizes = {d.input_size for d in detectors.values()}
    if len(sizes) != 1:
        raise UsageError("all detectors must share one input size")
    dataset = _load_dataset_dir(args.dataset, sizes.pop())
    patches = {name: _resolve_patch(p, args.seed, args.patch_side) for name, p in patch_paths.items()}
    if any(p is None for p in patches.values()):
        raise UsageError("'none' is not a valid transfer patch")
    man.inputs(_dataset_files(args.dataset) + [Path(p) for p in det_paths.values()]
               + [Path(p) for p in patch_paths.values() if p not in ("random",)])
    rows, cols, matrix = transfer_matrix(patches, detectors, dataset, seed=args.seed,
                                         conf_thresh=args.conf_thresh, iou_thresh=args.iou_thresh)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_transfer_csv(out / "transfer.csv", rows, cols, matrix)
    from .plotting import plot_transfer_matrix

    fig = plot_transfer_matrix(rows, cols, matrix, out / "transfer.png")
    man.output(out / "transfer.csv")
    man.output(fig)
    man.write(out / "manifest.json")
    print((out / "transfer.csv").read_text(), end="")
    return 0


def cmd_augment_preview(args) -> int:
    man = Manifest("augment-preview", args)
    dataset = _load_dataset_dir(args.dataset, args.input_size)
    man.inputs(_dataset_files(args.dataset))
    rng = np.random.default_rng(args.seed)
    out = Path(args.out)
    for i in range(min(args.count, len(dataset))):
        img, ann = dataset.images[i], dataset.annotations[i]
        aug = augment(img, ann, args.mode, rng)
        for name, tensor in ((f"{i:04d}_orig.png", img), (f"{i:04d}_aug.png", aug),
                             (f"{i:04d}_pair.png", torch.cat([img, aug], dim=1))):
            write_image(out / name, tensor)
            man.output(out / name)
    man.write(out / "manifest.json")
    print(f"wrote {min(args.count, len(dataset))} {args.mode} previews to {out}")
    return 0


class _SeedAction(argparse.Action):
    def __call__(self, parser, namespace, values, option_string=None):
        setattr(namespace, self.dest, values)
        namespace.seed_given = True


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, action=_SeedAction)
    common.add_argument("--workers", type=int, default=1, help="intra-op threads")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="locpatch", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic ship dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--ships", default="1-3", help="ship count or inclusive range, e.g. 1-3")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-detector", parents=[common], help="train a toy detector variant")
    p.add_argument("--dataset", required=True)
    p.add_argument("--val-dataset")
    p.add_argument("--variant", choices=["n", "s", "m"], default="s")
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--input-size", type=int, default=128)
    p.add_argument("--ap-floor", type=float, default=0.95, help="0 disables the check")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_detector)

    p = sub.add_parser("attack", parents=[common], help="optimize an adversarial patch")
    p.add_argument("--config")
    p.add_argument("--detector", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--mode", choices=["none", "global", "local"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("evaluate", parents=[common], help="AP / recall / ASR under a patch")
    p.add_argument("--patch", required=True, help="patch file, 'random' or 'none'")
    p.add_argument("--detector", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--patch-side", type=int, default=64)
    p.add_argument("--iou-thresh", type=float, default=0.5)
    p.add_argument("--conf-thresh", type=float, default=0.25)
    p.add_argument("--no-figure", dest="figure", action="store_false")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("transfer", parents=[common], help="ASR matrix of patches x detectors")
    p.add_argument("--patch", action="append", required=True, help="NAME=path (repeatable)")
    p.add_argument("--detector", action="append", required=True, help="NAME=path (repeatable)")
    p.add_argument("--dataset", required=True)
    p.add_argument("--patch-side", type=int, default=64)
    p.add_argument("--iou-thresh", type=float, default=0.5)
    p.add_argument("--conf-thresh", type=float, default=0.25)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("augment-preview", parents=[common], help="write original/augmented image pairs")
    p.add_argument("--dataset", required=True)
    p.add_argument("--mode", choices=["none", "global", "local"], default="local")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--input-size", type=int, default=128)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_augment_preview)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "seed_given"):
        args.seed_given = False
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.set_num_threads(max(1, args.workers))
    try:
        return args.func(args)
    except (UsageError, *USAGE_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("command failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
