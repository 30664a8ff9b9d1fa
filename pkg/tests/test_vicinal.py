import colorsys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from reprgap import vicinal as vc

IDENTITY = dict(hue_max_delta=0.0, saturation=(1.0, 1.0), brightness_max_delta=0.0, contrast=(1.0, 1.0),
                zoom=(0.0, 0.0), flip=False)


def _images(n=6, h=8, w=7, c=3, seed=0):
    return np.random.default_rng(seed).random((n, h, w, c)).astype(np.float32)


def test_identity_config_is_identity():
    x = _images()
    out = vc.augment(vc.LabeledBatch(x, np.zeros(len(x))), vc.AugmentConfig(**IDENTITY))
    np.testing.assert_allclose(out.x, x, atol=1e-6)


def test_zoom_zero_fraction_is_exact():
    img = _images(1)[0].astype(np.float64)
    np.testing.assert_array_equal(vc.central_zoom(img, 0.0), img)


def test_flip_is_an_involution():
    img = _images(1)[0]
    np.testing.assert_array_equal(vc.flip_lr(vc.flip_lr(img)), img)
    assert not np.array_equal(vc.flip_lr(img), img)


def test_hue_half_turn_twice_returns_red():
    red = np.zeros((1, 1, 3))
    red[..., 0] = 1.0
    once = vc.shift_hue(red, 0.5)
    np.testing.assert_allclose(once[0, 0], colorsys.hsv_to_rgb(0.5, 1.0, 1.0), atol=1e-12)
    np.testing.assert_allclose(vc.shift_hue(once, 0.5), red, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3,), elements=st.floats(0, 1)))
def test_hsv_matches_colorsys(rgb):
    hsv = vc.rgb_to_hsv(rgb)
    ref = colorsys.rgb_to_hsv(*rgb)
    np.testing.assert_allclose(hsv[1:], ref[1:], atol=1e-12)
    if ref[1] > 1e-9:
        d = abs(hsv[0] - ref[0])
        assert min(d, 1 - d) < 1e-9
    np.testing.assert_allclose(vc.hsv_to_rgb(hsv), rgb, atol=1e-9)


def test_augment_deterministic_and_batch_independent():
    x = _images(8)
    y = np.arange(8) % 2
    cfg = vc.AugmentConfig(seed=5)
    full = vc.augment(vc.LabeledBatch(x, y), cfg).x
    assert full.tobytes() == vc.augment(vc.LabeledBatch(x, y), cfg).x.tobytes()
    # same samples in a different batch composition -> same outputs
    part = vc.augment(vc.LabeledBatch(x[[5, 2]], y[[5, 2]], idx=[5, 2]), cfg).x
    assert part.tobytes() == full[[5, 2]].tobytes()
    other = vc.augment(vc.LabeledBatch(x, y), vc.AugmentConfig(seed=6)).x
    assert not np.array_equal(other, full)
    assert full.min() >= 0.0 and full.max() <= 1.0


def test_grayscale_skips_colour_ops_or_raises():
    x = _images(2, c=1)
    out = vc.augment(vc.LabeledBatch(x, [0, 1]), vc.AugmentConfig())
    assert any("skipped" in n for n in out.notes)
    with pytest.raises(ValueError):
        vc.augment(vc.LabeledBatch(x, [0, 1]), vc.AugmentConfig(strict=True))


def test_generic_ops_exclude_colour():
    assert vc.AugmentConfig(generic=True).enabled_ops() == ("flip", "zoom", "contrast")


def test_config_validation():
    with pytest.raises(ValueError):
        vc.AugmentConfig(contrast=(1.0, 0.5))
    with pytest.raises(ValueError):
        vc.AugmentConfig(zoom=(0.0, 0.6))
    with pytest.raises(ValueError):
        vc.MixupSpec(lam=1.5)


def _batch(n=11, k=3, seed=0):
    rng = np.random.default_rng(seed)
    return vc.LabeledBatch(rng.random((n, 4)).astype(np.float32), rng.integers(0, k, n))


def test_mixup_lambda_one_recovers_first_parent():
    b = _batch()
    res = vc.mixup_pairs(b, vc.MixupSpec(lam=1.0), {0: b.x})
    np.testing.assert_array_equal(res.reps, b.x[res.pairs[:, 0]])


def test_mixup_of_identical_inputs_is_input():
    x = np.tile(np.arange(4, dtype=np.float32), (6, 1))
    b = vc.LabeledBatch(x, [0, 0, 1, 1, 2, 2])
    res = vc.mixup_pairs(b, vc.MixupSpec(lam=0.3), {0: x})
    np.testing.assert_allclose(res.reps, x[:3], rtol=1e-7)


def test_mixup_half_is_midpoint_and_label_wise():
    b = _batch(40, 4, seed=3)
    res = vc.mixup_pairs(b, vc.MixupSpec(lam=0.5, seed=2), {0: b.x})
    a, c = res.pairs[:, 0], res.pairs[:, 1]
    np.testing.assert_allclose(res.reps, (b.x[a] + b.x[c]) / 2, atol=1e-7)
    assert np.all(b.y[a] == b.y[c]) and np.all(res.labels == b.y[a])
    assert len(set(a) | set(c)) == 2 * len(a)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=1, max_size=30), st.floats(0, 1), st.integers(0, 100))
def test_mixup_stays_on_segment(labels, lam, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((len(labels), 3)).astype(np.float32)
    b = vc.LabeledBatch(x, labels)
    res = vc.mixup_pairs(b, vc.MixupSpec(lam=lam, seed=seed), {0: x})
    a, c = res.pairs[:, 0], res.pairs[:, 1]
    assert np.all(b.y[a] == b.y[c])
    lo = np.minimum(x[a], x[c]) - 1e-6
    hi = np.maximum(x[a], x[c]) + 1e-6
    assert np.all((res.reps >= lo) & (res.reps <= hi))
    counts = np.bincount(labels, minlength=4)
    assert sorted(res.skipped_classes) == [c for c in range(4) if counts[c] == 1]
    assert len(a) == sum(n // 2 for n in counts)


def test_pairing_independent_of_batch_order():
    b = _batch(20, 2, seed=1)
    perm = np.random.default_rng(0).permutation(20)
    shuffled = vc.LabeledBatch(b.x[perm], b.y[perm], b.idx[perm])
    r1 = vc.mixup_pairs(b, vc.MixupSpec(seed=4), {0: b.x})
    r2 = vc.mixup_pairs(shuffled, vc.MixupSpec(seed=4), {0: shuffled.x})
    assert sorted(map(tuple, r1.pairs)) == sorted(map(tuple, r2.pairs))


def test_mixup_missing_layer():
    b = _batch()
    with pytest.raises(KeyError):
        vc.mixup_pairs(b, vc.MixupSpec(layer=2), {0: b.x})
