"""Desk-scale study protocols: random-vs-adversarial comparison, ablation, transfer.

Everything is deterministic given its seeds, so trained detectors and
patches can be cached on disk under a key derived from their inputs.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .attack import AttackConfig, load_patch_sidecar, make_random_patch, save_patch_sidecar, train_patch
from .data import SHIP_LENGTH_RANGE, SceneDataset, synthesize_dataset
from .detector import ToyDetector, load_detector, save_detector, train_toy_detector
from .evaluation import evaluate_attack, evaluate_detector, transfer_matrix

log = logging.getLogger(__name__)

VARIANTS = ("n", "s", "m")


@dataclass(frozen=True)
class ToySetup:
    train_count: int = 200
    heldout_count: int = 100
    test_count: int = 100
    data_seed: int = 2024
    image_size: int = 128
    detector_epochs: int = 60
    eval_seed: int = 7
    ship_length: tuple[float, float] = SHIP_LENGTH_RANGE


@dataclass
class ToySuite:
    setup: ToySetup
    train: SceneDataset
    heldout: SceneDataset
    test: SceneDataset
    detectors: dict[str, ToyDetector] = field(default_factory=dict)
    cache_dir: Path | None = None

    def detector(self, variant: str) -> ToyDetector:
        if variant not in self.detectors:
            self.detectors[variant] = _cached_detector(self, variant)
        return self.detectors[variant]


def _key(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def build_suite(setup: ToySetup = ToySetup(), cache_dir=None) -> ToySuite:
    s = setup
    return ToySuite(
        setup,
        train=synthesize_dataset(s.train_count, s.data_seed, s.image_size, length_range=s.ship_length),
        heldout=synthesize_dataset(s.heldout_count, s.data_seed + 1, s.image_size, length_range=s.ship_length),
        test=synthesize_dataset(s.test_count, s.data_seed + 2, s.image_size, length_range=s.ship_length),
        cache_dir=Path(cache_dir) if cache_dir else None,
    )


def _cached_detector(suite: ToySuite, variant: str) -> ToyDetector:
    seed = VARIANTS.index(variant) + 11
    key = _key({"setup": suite.setup.__dict__, "variant": variant, "seed": seed})
    path = suite.cache_dir / f"detector_{variant}_{key}.pt" if suite.cache_dir else None
    if path is not None and path.is_file():
        model = load_detector(path)
        model.heldout_ap = evaluate_detector(model, suite.heldout)
        return model
    model = train_toy_detector(suite.train, epochs=suite.setup.detector_epochs, variant=variant, seed=seed,
                               val_dataset=suite.heldout, ap_floor=0.95)
    if path is not None:
        save_detector(model, path)
    return model


def attack_patch(suite: ToySuite, variant: str, config: AttackConfig) -> torch.Tensor:
    """Train (or load from cache) a patch against ``variant`` on the suite's train split."""
    key = _key({"setup": suite.setup.__dict__, "variant": variant, "config": config.to_dict()})
    path = suite.cache_dir / f"patch_{variant}_{config.mode}_s{config.seed}_{key}.apatch" if suite.cache_dir else None
    if path is not None and path.is_file():
        return load_patch_sidecar(path)
    patch, history = train_patch(config, suite.train, suite.detector(variant))
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        save_patch_sidecar(path, patch)
        history.write_csv(path.with_suffix(".csv"))
    return patch


def random_vs_adversarial(suite: ToySuite, variant: str = "s", config: AttackConfig = AttackConfig()):
    """Clean / random-patch / adversarial-patch reports on the test split."""
    det = suite.detector(variant)
    adv = attack_patch(suite, variant, config)
    rnd = make_random_patch(config.patch_side, np.random.default_rng(config.seed))
    ev = dict(placement=config.placement, scene=config.scene, seed=suite.setup.eval_seed)
    return {
        "none": evaluate_attack(det, suite.test, None, **ev),
        "random": evaluate_attack(det, suite.test, rnd, **ev),
        "adversarial": evaluate_attack(det, suite.test, adv, **ev),
    }


def ablation(suite: ToySuite, variant: str = "m", seeds=(0, 1, 2), config: AttackConfig = AttackConfig()):
    """ASR per augmentation mode and seed: ``{mode: [asr per seed]}``."""
    det = suite.detector(variant)
    out = {}
    for mode in ("none", "global", "local"):
        out[mode] = []
        for seed in seeds:
            cfg = replace(config, mode=mode, seed=seed)
            patch = attack_patch(suite, variant, cfg)
            rep = evaluate_attack(det, suite.test, patch, cfg.placement, cfg.scene, seed=suite.setup.eval_seed)
            out[mode].append(rep.asr)
            log.info("ablation toy-%s mode=%s seed=%d ASR %.3f", variant, mode, seed, rep.asr)
    return out


def transfer_study(suite: ToySuite, seed: int = 0, mode: str = "local", config: AttackConfig = AttackConfig()):
    """Transfer matrix for patches trained on every variant; rows/cols ordered n, s, m."""
    cfg = replace(config, mode=mode, seed=seed)
    patches = {f"toy-{v}": attack_patch(suite, v, cfg) for v in VARIANTS}
    detectors = {f"toy-{v}": suite.detector(v) for v in VARIANTS}
    return transfer_matrix(patches, detectors, suite.test, cfg.placement, cfg.scene, seed=suite.setup.eval_seed)
