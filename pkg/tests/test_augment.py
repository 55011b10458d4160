from collections import Counter

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from locpatch.augment import (KINDS, AugmentOp, apply_global_augmentation, apply_local_augmentation, blur, brighten,
                              darken, extract_regions, rain, sample_transform, augment)
from locpatch.data import Annotation, generate_synthetic_scene
from locpatch.imaging import BBox, ValidationError, mask_from_boxes


def _scene(seed=0, size=64, ships=(1, 3)):
    return generate_synthetic_scene(np.random.default_rng(seed), size, ships)


def test_extract_full_image_region(rng):
    img = torch.from_numpy(rng.random((6, 8, 3)))
    regions = extract_regions(img, Annotation("x", [BBox(0, 0, 8, 6)]))
    assert len(regions) == 1 and torch.equal(regions.regions[0][1], img)


def test_extract_matches_index_slice(rng):
    img = torch.from_numpy(rng.random((10, 10, 3)))
    (box, crop), = extract_regions(img, Annotation("x", [BBox(2, 2, 5, 5)])).regions
    assert torch.equal(crop, img[2:5, 2:5])


def test_extract_no_boxes():
    assert len(extract_regions(torch.zeros(4, 4, 3), Annotation("x"))) == 0


def test_sample_transform_is_deterministic():
    a = [sample_transform(np.random.default_rng(3)) for _ in range(1)]
    r1, r2 = np.random.default_rng(42), np.random.default_rng(42)
    assert [sample_transform(r1) for _ in range(50)] == [sample_transform(r2) for _ in range(50)]
    assert a[0].kind in KINDS


def test_sample_transform_kind_frequencies():
    r = np.random.default_rng(2024)
    counts = Counter(sample_transform(r).kind for _ in range(10_000))
    assert set(counts) == set(KINDS)
    for kind in KINDS:
        assert 0.23 <= counts[kind] / 10_000 <= 0.27


def test_sampled_params_within_ranges():
    r = np.random.default_rng(5)
    for _ in range(2000):
        op = sample_transform(r)
        if op.kind == "darken":
            assert 0.5 <= op.params["gain"] <= 0.8
        elif op.kind == "brighten":
            assert 1.2 <= op.params["gain"] <= 1.5
        elif op.kind == "blur":
            assert 1.0 <= op.params["sigma"] <= 2.0
        else:
            assert 5 <= len(op.params["streaks"]) <= 20
            for fx, fy, length, angle in op.params["streaks"]:
                assert 0 <= fx < 1 and 0 <= fy < 1 and 10 <= length <= 30 and 60 <= angle <= 80


def test_unknown_kind_rejected():
    with pytest.raises(ValidationError):
        AugmentOp("sepia")


def test_local_without_boxes_is_identity():
    img, _ = _scene(ships=0)
    out = apply_local_augmentation(img, Annotation("x"), np.random.default_rng(0))
    assert torch.equal(out, img)


def test_local_darken_matches_elementwise_oracle():
    img, ann = _scene(seed=2, ships=1)
    (box,) = ann.boxes
    out = apply_local_augmentation(img, ann, None, ops=[AugmentOp("darken", {"gain": 0.6})])
    y0, y1, x0, x1 = int(box.y_min), int(box.y_max), int(box.x_min), int(box.x_max)
    assert torch.equal(out[y0:y1, x0:x1], torch.clamp(0.6 * img[y0:y1, x0:x1], 0, 1))
    outside = mask_from_boxes(ann.boxes, *img.shape[:2]) == 0
    assert torch.equal(out[outside], img[outside])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 10_000))
def test_local_augmentation_leaves_background_bit_identical(scene_seed, aug_seed):
    img, ann = _scene(seed=scene_seed)
    out = apply_local_augmentation(img, ann, np.random.default_rng(aug_seed))
    outside = mask_from_boxes(ann.boxes, *img.shape[:2]) == 0
    assert torch.equal(out[outside], img[outside])
    assert float(out.min()) >= 0 and float(out.max()) <= 1
    assert out.shape == img.shape


def test_local_augmentation_is_deterministic():
    img, ann = _scene(seed=8)
    a = apply_local_augmentation(img, ann, np.random.default_rng(1))
    b = apply_local_augmentation(img, ann, np.random.default_rng(1))
    assert torch.equal(a, b)


def test_overlapping_regions_later_box_wins(rng):
    img = torch.from_numpy(rng.uniform(0.2, 0.6, (20, 20, 3)))
    ann = Annotation("x", [BBox(2, 2, 12, 12), BBox(8, 8, 18, 18)])
    ops = [AugmentOp("darken", {"gain": 0.5}), AugmentOp("brighten", {"gain": 1.4})]
    out = apply_local_augmentation(img, ann, None, ops=ops)
    assert torch.equal(out[9, 9], torch.clamp(1.4 * img[9, 9], 0, 1))
    assert torch.equal(out[3, 3], 0.5 * img[3, 3])


def test_global_brighten_unit_gain_is_identity():
    img, _ = _scene(seed=3)
    out = apply_global_augmentation(img, None, op=AugmentOp("brighten", {"gain": 1.0}))
    assert torch.equal(out, img)


def test_global_is_deterministic():
    img, _ = _scene(seed=3)
    assert torch.equal(apply_global_augmentation(img, np.random.default_rng(6)),
                       apply_global_augmentation(img, np.random.default_rng(6)))


def test_global_blur_touches_background_unlike_local():
    img, ann = _scene(seed=12, size=96, ships=2)
    op = AugmentOp("blur", {"sigma": 1.5})
    outside = mask_from_boxes(ann.boxes, 96, 96) == 0
    glob = apply_global_augmentation(img, None, op=op)
    loc = apply_local_augmentation(img, ann, None, ops=[op] * len(ann.boxes))
    assert float((glob - img)[outside].abs().max()) > 1e-3
    assert float((loc - img)[outside].abs().max()) == 0.0


def test_kernel_identities(rng):
    crop = torch.from_numpy(rng.random((7, 5, 3)))
    assert torch.equal(darken(crop, 1.0), crop)
    assert torch.equal(rain(crop, ()), crop)
    const = torch.full((9, 6, 3), 0.37, dtype=torch.float64)
    assert torch.allclose(blur(const, 1.7), const, atol=1e-12, rtol=0)


@pytest.mark.parametrize("shape", [(1, 1, 3), (2, 3, 3), (5, 40, 3), (33, 17, 3)])
def test_kernels_preserve_shape_and_range(rng, shape):
    crop = torch.from_numpy(rng.random(shape))
    for out in (darken(crop, 0.6), brighten(crop, 1.5), blur(crop, 2.0),
                rain(crop, [(0.1, 0.2, 25.0, 70.0), (0.5, 0.0, 12.0, 61.0)])):
        assert out.shape == crop.shape
        assert float(out.min()) >= 0 and float(out.max()) <= 1


def test_blur_against_direct_convolution(rng):
    crop = torch.from_numpy(rng.random((12, 10, 3)))
    sigma = 1.2
    r = 4
    k = np.exp(-np.arange(-r, r + 1) ** 2 / (2 * sigma ** 2))
    k /= k.sum()
    padded = np.pad(crop.numpy(), ((r, r), (r, r), (0, 0)), mode="reflect")
    expected = np.zeros_like(crop.numpy())
    for i in range(12):
        for j in range(10):
            window = padded[i:i + 2 * r + 1, j:j + 2 * r + 1]
            expected[i, j] = np.einsum("a,b,abc->c", k, k, window)
    assert np.allclose(blur(crop, sigma).numpy(), expected, atol=1e-12)


def test_rain_brightens_only_streak_pixels():
    crop = torch.full((20, 20, 3), 0.2, dtype=torch.float64)
    out = rain(crop, [(0.0, 0.0, 15.0, 70.0)], alpha=0.3, value=0.9)
    changed = (out != crop).any(-1)
    assert changed.sum() > 5
    assert torch.allclose(out[changed], torch.tensor(0.7 * 0.2 + 0.3 * 0.9, dtype=torch.float64))


def test_augment_dispatch():
    img, ann = _scene(seed=1)
    assert augment(img, ann, "none", np.random.default_rng(0)) is img
    with pytest.raises(ValidationError):
        augment(img, ann, "sideways", np.random.default_rng(0))
