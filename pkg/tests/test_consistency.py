import numpy as np
import pytest

from refseg.consistency import (
    IGNORE, STRONG, WEAK, AugmentationSpec, AugmentRecord, apply_cutout_rule, apply_geometry, augment,
    consistency_target, geometric_index_map, threshold_multiclass, threshold_multilabel,
)
from refseg.tensor_io import SeededRng


def test_flip_is_involution():
    a = np.arange(48).reshape(1, 6, 8)
    rec = AugmentRecord(WEAK, flip=True)
    np.testing.assert_array_equal(apply_geometry(a, rec)[0, :, 0], a[0, :, 7])
    np.testing.assert_array_equal(apply_geometry(apply_geometry(a, rec), rec), a)


def test_quarter_turn_is_exact_permutation():
    a = np.arange(64).reshape(8, 8)
    out = apply_geometry(a, AugmentRecord(STRONG, angle=90.0))
    for y in range(8):
        for x in range(8):
            assert out[y, x] == a[x, 7 - y]
    assert sorted(out.ravel()) == list(range(64))


def test_index_map_clamps_to_border():
    rows, cols = geometric_index_map(9, 9, angle=45.0)
    assert rows.min() >= 0 and rows.max() <= 8 and cols.min() >= 0 and cols.max() <= 8
    assert rows[4, 4] == 4 and cols[4, 4] == 4


def test_weak_view_only_flips():
    img = np.random.default_rng(0).random((1, 10, 10)).astype(np.float32)
    for t in range(20):
        out, _, rec = augment(img, None, WEAK, SeededRng(t))
        assert rec.angle == 0.0 and rec.cutout is None and rec.noise_sigma == 0.0
        expect = img[..., ::-1] if rec.flip else img
        np.testing.assert_array_equal(out, expect)


def test_strong_view_record_replays_on_labels():
    img = np.random.default_rng(1).random((1, 16, 16))
    lab = np.arange(256).reshape(16, 16)
    out, new_lab, rec = augment(img, lab, STRONG, SeededRng(3))
    np.testing.assert_array_equal(new_lab, apply_geometry(lab, rec))
    r0, c0, r1, c1 = rec.cutout
    assert (out[:, r0:r1, c0:c1] == 0).all()
    assert out.min() >= 0 and out.max() <= 1
    again = augment(img, lab, STRONG, SeededRng(3))
    np.testing.assert_array_equal(again[0], out)


def test_augment_errors():
    with pytest.raises(ValueError):
        augment(np.zeros((1, 4, 4)), kind="medium")
    with pytest.raises(ValueError):
        AugmentationSpec(cutout_area=(0.5, 0.1))


@pytest.mark.parametrize("tau", [0.8, 0.95])
def test_multiclass_threshold_table(tau):
    cases = [
        ((tau, 1 - tau, 0.0), IGNORE),  # equality is not enough
        ((np.nextafter(tau, 1), 1 - np.nextafter(tau, 1), 0.0), 0),
        ((0.0, 0.999, 0.001), 1),
        ((0.34, 0.33, 0.33), IGNORE),
        ((0.0, 0.0, 1.0), 2),
    ]
    probs = np.array([c[0] for c in cases]).T[:, :, None]
    got = threshold_multiclass(probs, tau)[:, 0]
    np.testing.assert_array_equal(got, [c[1] for c in cases])


@pytest.mark.parametrize("tau", [0.8, 0.95])
def test_multilabel_threshold_table(tau):
    eps = 1e-12
    probs = np.array([tau, tau + eps, 1 - tau, 1 - tau - eps, 0.5, 1.0, 0.0])
    want = [IGNORE, 1, IGNORE, 0, IGNORE, 1, 0]
    np.testing.assert_array_equal(threshold_multilabel(probs, tau), want)


def test_labeled_fraction_monotone_in_tau():
    probs = np.random.default_rng(0).dirichlet(np.ones(3), size=(20, 20)).transpose(2, 0, 1)
    fracs = [(threshold_multiclass(probs, t) != IGNORE).mean() for t in np.linspace(0.35, 0.99, 30)]
    assert all(a >= b for a, b in zip(fracs, fracs[1:]))
    p = np.random.default_rng(1).random((3, 20, 20))
    fracs = [(threshold_multilabel(p, t) != IGNORE).mean() for t in np.linspace(0.51, 0.99, 30)]
    assert all(a >= b for a, b in zip(fracs, fracs[1:]))


def test_threshold_rejects_bad_tau():
    with pytest.raises(ValueError):
        threshold_multiclass(np.full((4, 2, 2), 0.25), 0.2)
    with pytest.raises(ValueError):
        threshold_multilabel(np.full((2, 2), 0.5), 0.5)


@pytest.mark.parametrize("multilabel", [False, True])
def test_cutout_overrides_ignore(multilabel):
    gen = np.random.default_rng(0)
    for _ in range(50):
        h, w = gen.integers(4, 20, size=2)
        r0, c0 = gen.integers(0, h), gen.integers(0, w)
        r1, c1 = gen.integers(r0 + 1, h + 1), gen.integers(c0 + 1, w + 1)
        shape = (3, h, w) if multilabel else (h, w)
        target = gen.choice([IGNORE, 0, 1, 2] if not multilabel else [IGNORE, 0, 1], size=shape)
        rec = AugmentRecord(STRONG, cutout=(r0, c0, r1, c1))
        out = apply_cutout_rule(target, rec, multilabel)
        inside = np.zeros((h, w), dtype=bool)
        inside[r0:r1, c0:c1] = True
        assert (out[..., inside] == 0).all()
        np.testing.assert_array_equal(out[..., ~inside], target[..., ~inside])
    with pytest.raises(ValueError):
        apply_cutout_rule(np.zeros((2, 2)), None)


def test_consistency_target_combines_threshold_geometry_and_cutout():
    probs = np.zeros((2, 4, 4))
    probs[1] = 0.99
    probs[0] = 0.01
    probs[:, 0, 0] = 0.5
    rec = AugmentRecord(STRONG, flip=True, cutout=(3, 0, 4, 4))
    t = consistency_target(probs, rec, 0.8, False)
    assert t[0, 3] == IGNORE  # (0,0) flipped to (0,3)
    assert (t[3] == 0).all()
    assert (t[1:3] == 1).all()
