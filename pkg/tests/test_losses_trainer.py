import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from refseg.consistency import IGNORE, AugmentationSpec
from refseg.losses import binary_ce, softmax_ce, weighted_ce
from refseg.matching import assign_labels, brute_force_oracle
from refseg.model import PixelModel
from refseg.pool import reference_from_features
from refseg.tensor_io import SeededRng
from refseg.trainer import (
    StepBatch, StepSettings, compute_step, evaluate, iou_from_predictions, train_step,
    train_step_baselines, train_step_rpg,
)


def _fd(fn, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = fn(x)
        x[idx] = old - h
        down = fn(x)
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


@pytest.mark.parametrize("seed", range(5))
def test_softmax_ce_gradient(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(2, 3, 4, 4))
    target = rng.integers(-1, 3, size=(2, 4, 4))
    w = rng.random((2, 4, 4))
    _, grad, _ = softmax_ce(logits, target, w)
    num = _fd(lambda z: softmax_ce(z, target, w)[0], logits)
    np.testing.assert_allclose(grad, num, atol=1e-8)


@pytest.mark.parametrize("seed", range(5))
def test_binary_ce_gradient(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(2, 3, 4, 4)) * 3
    target = rng.integers(-1, 2, size=(2, 3, 4, 4))
    w = rng.random((2, 4, 4))
    _, grad, _ = binary_ce(logits, target, w)
    num = _fd(lambda z: binary_ce(z, target, w)[0], logits)
    np.testing.assert_allclose(grad, num, atol=1e-8)


def test_softmax_ce_value():
    logits = np.zeros((1, 2, 1, 2))
    loss, _, n = softmax_ce(logits, np.array([[[0, IGNORE]]]))
    assert n == 1 and loss == pytest.approx(np.log(2))


@pytest.mark.parametrize("multilabel", [False, True])
def test_zero_weight_and_all_ignored_give_zero(multilabel):
    logits = np.random.default_rng(0).normal(size=(1, 2, 3, 3))
    shape = (1, 2, 3, 3) if multilabel else (1, 3, 3)
    loss, grad, n = weighted_ce(logits, np.zeros(shape, dtype=int), np.zeros((1, 3, 3)), multilabel)
    assert loss == 0.0 and not grad.any() and n > 0
    loss, grad, n = weighted_ce(logits, np.full(shape, IGNORE), None, multilabel)
    assert loss == 0.0 and not grad.any() and n == 0


def test_binary_ce_is_stable_for_large_logits():
    loss, grad, _ = binary_ce(np.array([[[[1000.0, -1000.0]]]]), np.array([[[[1, 0]]]]))
    assert np.isfinite(loss) and loss == pytest.approx(0.0) and np.isfinite(grad).all()


def test_loss_shape_errors():
    with pytest.raises(ValueError):
        softmax_ce(np.zeros((1, 2, 3, 3)), np.zeros((1, 3, 2), dtype=int))
    with pytest.raises(ValueError):
        softmax_ce(np.zeros((1, 2, 3, 3)), np.full((1, 3, 3), 2))
    with pytest.raises(ValueError):
        binary_ce(np.zeros((1, 2, 3, 3)), np.zeros((1, 3, 3, 3), dtype=int))


def _batch(ds, n_unlabeled=2):
    return StepBatch(ds.labeled_images, ds.labeled_labels, ds.unlabeled_images[:n_unlabeled],
                     labeled_ids=(0, 1, 2), unlabeled_ids=tuple(range(n_unlabeled)))


def _settings(method, tau=None, **kw):
    kw.setdefault("aug", AugmentationSpec(noise_sigma=0.02))
    return StepSettings(method, "multi-class", 4, s=8, k=20, tau=tau, **kw)


def test_baseline_ignores_unlabeled(small_dataset):
    m = PixelModel(4, hidden=6, rng=SeededRng(0))
    r1, g1, _ = compute_step(m, _batch(small_dataset, 2), _settings("baseline"), SeededRng(1))
    r2, g2, _ = compute_step(m, _batch(small_dataset, 0), _settings("baseline"), SeededRng(1))
    assert r1.total == r2.total == r1.supervised
    np.testing.assert_array_equal(g1, g2)


def test_rpg_weights_only_shrink_nearest_neighbor_loss(small_dataset):
    m = PixelModel(4, hidden=6, rng=SeededRng(0))
    nn, _, _ = compute_step(m, _batch(small_dataset), _settings("nearest-neighbor"), SeededRng(2))
    rpg, _, _ = compute_step(m, _batch(small_dataset), _settings("rpg"), SeededRng(2))
    assert nn.supervised == rpg.supervised
    assert nn.counts["rpg"] == rpg.counts["rpg"]
    assert 0 < rpg.rpg <= nn.rpg


def test_rpg_plus_reduces_to_rpg_as_tau_tends_to_one(small_dataset):
    m = PixelModel(4, hidden=6, rng=SeededRng(0))
    spec = AugmentationSpec(noise_sigma=0.02, cutout=False)
    rpg, g_rpg, _ = compute_step(m, _batch(small_dataset), _settings("rpg", aug=spec), SeededRng(3))
    plus, g_plus, _ = compute_step(m, _batch(small_dataset), _settings("rpg-plus", 1 - 1e-9, aug=spec), SeededRng(3))
    assert plus.counts["consistency"] == 0 and plus.consistency == 0.0
    assert plus.total == pytest.approx(rpg.total, abs=1e-12)
    np.testing.assert_allclose(g_plus[: len(g_rpg)], g_rpg, atol=1e-12)
    assert not g_plus[len(g_rpg):].any()


def test_loss_decomposition(small_dataset):
    m = PixelModel(4, hidden=6, rng=SeededRng(0))
    s = _settings("rpg-plus", 0.3, unlabeled_weight=0.7, consistency_weight=0.4)
    r, _, record = compute_step(m, _batch(small_dataset), s, SeededRng(4))
    assert r.counts["consistency"] > 0
    assert r.total == pytest.approx(r.supervised + 0.7 * r.rpg + 0.4 * r.consistency, abs=1e-12)
    views = [a["view"] for a in record["aug"]]
    assert views.count("strong-0") == 1 and record["labeled_ids"] == [0, 1, 2]


def test_train_step_decreases_supervised_loss(small_dataset):
    m = PixelModel(4, hidden=8, rng=SeededRng(0))
    s = _settings("baseline", augment_labeled=False)
    first, _ = train_step(m, _batch(small_dataset), s, SeededRng(5), lr=0.05)
    for t in range(30):
        last, _ = train_step_baselines(_batch(small_dataset), m, s, SeededRng(t), lr=0.05)
    assert last.supervised < first.supervised


def test_step_wrappers_check_method(small_dataset):
    m = PixelModel(4, hidden=4)
    with pytest.raises(ValueError):
        train_step_rpg(_batch(small_dataset), m, _settings("baseline"), SeededRng(0))
    with pytest.raises(ValueError):
        StepSettings("rpg", "multi-class", 4, tau=0.9)
    with pytest.raises(ValueError):
        StepSettings("fixmatch", "multi-class", 4)
    with pytest.raises(ValueError):
        StepSettings("mean-teacher", "multi-class", 4)


def test_iou_half_overlapping_squares():
    gt = np.zeros((1, 8, 8), dtype=int)
    pred = np.zeros((1, 8, 8), dtype=int)
    gt[0, 0:4, 0:4] = 1
    pred[0, 0:4, 2:6] = 1
    rep = iou_from_predictions(pred, gt, 2, "multi-class")
    assert rep.per_class[1] == pytest.approx(1 / 3)
    assert rep.per_class[0] == pytest.approx(40 / 56)


def test_iou_excludes_empty_union():
    gt = np.zeros((2, 3, 4, 4), dtype=int)
    pred = np.zeros_like(gt)
    gt[:, 0] = 1
    pred[:, 0, :2] = 1
    rep = iou_from_predictions(pred, gt, 3, "multi-label")
    assert rep.excluded == [1, 2]
    assert rep.miou == pytest.approx(0.5)
    assert np.isnan(rep.per_class[1])


def test_evaluate_perfect_model_on_background():
    m = PixelModel(2, hidden=2)
    for v in m.params.values():
        v[...] = 0.0
    m.params["b2"][0] = 5.0
    rep = evaluate(m, np.zeros((2, 1, 4, 4), np.float32), np.zeros((2, 4, 4), dtype=int))
    assert rep.miou == 1.0 and rep.excluded == [1]


@settings(max_examples=50)
@given(st.integers(0, 10_000), st.booleans())
def test_ignored_and_zero_weight_pixels_do_not_influence_gradients(seed, multilabel):
    gen = np.random.default_rng(seed)
    logits = gen.normal(size=(1, 3, 4, 4))
    shape = logits.shape if multilabel else (1, 4, 4)
    target = gen.integers(0, 2 if multilabel else 3, size=shape)
    w = gen.random((1, 4, 4))
    dead = gen.random((1, 4, 4)) < 0.4
    w[dead & (gen.random((1, 4, 4)) < 0.5)] = 0.0
    ignored = dead & (w > 0)
    if multilabel:
        target[:, :, ignored[0]] = IGNORE
    else:
        target[ignored] = IGNORE
    _, g1, _ = weighted_ce(logits, target, w, multilabel)
    moved = logits + np.where(dead[:, None], gen.normal(size=logits.shape) * 5, 0.0)
    _, g2, _ = weighted_ce(moved, target, w, multilabel)
    np.testing.assert_array_equal(g1, g2)
    assert not g1[:, :, dead[0]].any()


def _slow_ce(logits, target, weights):
    total, count = 0.0, 0
    for n in range(logits.shape[0]):
        for y in range(logits.shape[2]):
            for x in range(logits.shape[3]):
                t = target[n, y, x]
                if t == IGNORE:
                    continue
                z = logits[n, :, y, x]
                lse = z.max() + np.log(np.exp(z - z.max()).sum())
                total += (1.0 if weights is None else weights[n, y, x]) * (lse - z[t])
                count += 1
    return total / max(count, 1)


def test_step_loss_matches_slow_path(small_dataset):
    ds = small_dataset
    m = PixelModel(4, hidden=6, rng=SeededRng(0))
    spec = AugmentationSpec(flip_p=0.0)
    s = StepSettings("rpg", "multi-class", 4, s=12, k=100, aug=spec, augment_labeled=False)
    report, _, _ = compute_step(m, _batch(ds), s, SeededRng(9))

    lab_feats, lab_pred = m.forward(ds.labeled_images)
    sup = _slow_ce(lab_pred.logits, ds.labeled_labels, None)
    pool = reference_from_features(lab_feats, ds.labeled_labels, 12)
    u_feats, u_pred = m.forward(ds.unlabeled_images[:2])
    targets, weights = [], []
    for i in range(2):
        res = brute_force_oracle(u_feats[i], pool, 100, 4)
        targets.append(res.labels)
        weights.append(res.weights)
    rpg = _slow_ce(u_pred.logits, np.stack(targets), np.stack(weights))
    assert report.supervised == pytest.approx(sup, abs=1e-5)
    assert report.rpg == pytest.approx(rpg, abs=1e-5)
    assert report.total == pytest.approx(sup + rpg, abs=1e-5)


def test_unlabeled_copy_of_pool_image_inherits_its_labels(small_dataset):
    ds = small_dataset
    m = PixelModel(4, hidden=16, rng=SeededRng(1))
    feats, _ = m.forward(ds.labeled_images)
    h, w = ds.labeled_labels.shape[-2:]
    pool = reference_from_features(feats, ds.labeled_labels, h)
    res = assign_labels(feats[0], pool, len(pool), 4)
    own = pool.image_ids[res.nearest_index.ravel()] == 0
    # self-distance is eps / (|u|^2 + eps), small but not zero for small feature norms
    assert np.abs(res.nearest_distance).max() <= 1e-4
    assert own.mean() > 0.9
    np.testing.assert_array_equal(res.labels.ravel()[own], ds.labeled_labels[0].ravel()[own])
