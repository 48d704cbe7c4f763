import math

import numpy as np
import pytest

from oracles import central_difference, direct_soft_dice, random_simplex, relative_error, segment_in_cube
from pulmovessel import vlsom as V
from pulmovessel.errors import ConfigError, DomainError, GeometryError, InconsistentSkeletonError
from pulmovessel.skeleton import class_skeletons
from pulmovessel.synthgen import default_spec, generate_tree, rasterize_tube, straight_tube
from pulmovessel.volume import LabelVolume, ProbVolume, VolumeGeometry


def _instance(seed, shape=(8, 8, 8)):
    rng = np.random.default_rng(seed)
    p = random_simplex(rng, shape)
    g = rng.integers(0, 3, shape)
    w = rng.choice([1.0, 3.0, 15.0], shape)
    sk = {c: (g == c) & (rng.random(shape) < 0.3) for c in (1, 2)}
    return p, g, w, sk


@pytest.fixture(scope="module")
def phantom():
    return generate_tree(default_spec(0, generations=2))


# --- config and weight maps ---------------------------------------------------------------


def test_config_defaults_and_invariants():
    cfg = V.WeightConfig()
    assert (cfg.w_class, cfg.w_cl, cfg.lambda_cldice, cfg.soft_skel_iters) == (3, 15, 0.5, 10)
    with pytest.raises(ConfigError):
        V.WeightConfig(w_class=20, w_cl=15)
    with pytest.raises(ConfigError):
        V.WeightConfig(w_class=0.5, w_cl=15)
    with pytest.raises(ConfigError):
        V.WeightConfig(lambda_cldice=-1)
    with pytest.raises(ConfigError):
        V.WeightConfig(soft_skel_iters=0)


def test_background_only_gives_ones():
    gt = LabelVolume(np.zeros((6, 6, 6), np.uint8))
    lung = LabelVolume(np.ones((6, 6, 6), np.uint8))
    for kind in V.WeightKind:
        w = V.build_weight_map(gt, class_skeletons(gt), lung, kind=kind)
        assert np.all(w.data == 1)


def test_cylinder_inside_lung_weights():
    ph = straight_tube((20, 20, 40), radius=3, length=30)
    sk = class_skeletons(ph.labels)
    lung = LabelVolume(np.ones(ph.labels.shape, np.uint8))
    for kind in V.WeightKind:
        w = V.build_weight_map(ph.labels, sk, lung, kind=kind).data
        on_skel = sk[1].data != 0
        assert np.all(w[on_skel] == 15)
        assert np.all(w[(ph.labels.data == 1) & ~on_skel] == 3)
        assert np.all(w[ph.labels.data == 0] == 1)


def test_outside_lung_voxel_rule():
    gt = np.zeros((5, 5, 5), np.uint8)
    gt[1, 1, 1] = 2
    lung = np.ones((5, 5, 5), np.uint8)
    lung[1, 1, 1] = 0
    gt, lung = LabelVolume(gt), LabelVolume(lung)
    empty = {c: LabelVolume(np.zeros((5, 5, 5), np.uint8)) for c in (1, 2)}
    assert V.build_weight_map(gt, empty, lung, kind="dice").data[1, 1, 1] == 1
    assert V.build_weight_map(gt, empty, lung, kind="cldice").data[1, 1, 1] == 1
    assert V.build_weight_map(gt, empty, lung, kind="ce").data[1, 1, 1] == 3


def test_weight_set_equals_skeleton_set(phantom):
    sk = class_skeletons(phantom.labels)
    union = (sk[1].data != 0) | (sk[2].data != 0)
    lung = phantom.lung_mask.data != 0
    for kind in V.WeightKind:
        w = V.build_weight_map(phantom.labels, sk, phantom.lung_mask, kind=kind).data
        assert set(np.unique(w)) <= {1.0, 3.0, 15.0}
        expect = union if kind is V.WeightKind.CE else union & lung
        assert np.array_equal(w == 15, expect)


def test_weight_map_errors():
    gt = LabelVolume(np.ones((4, 4, 4), np.uint8))
    lung = LabelVolume(np.ones((4, 4, 4), np.uint8))
    bad = {2: LabelVolume(np.ones((4, 4, 4), np.uint8))}
    with pytest.raises(InconsistentSkeletonError):
        V.build_weight_map(gt, bad, lung)
    with pytest.raises(GeometryError):
        V.build_weight_map(gt, {}, LabelVolume(np.ones((4, 4, 5), np.uint8)))


# --- cross-entropy --------------------------------------------------------------------------


def test_ce_perfect_prediction():
    g = np.random.default_rng(0).integers(0, 3, (4, 4, 4))
    loss, _ = V.weighted_ce_loss(np.eye(3)[g], g, np.ones(g.shape))
    assert loss <= -math.log(1 - 1e-7)


def test_ce_uniform_is_ln3():
    rng = np.random.default_rng(1)
    g = rng.integers(0, 3, (5, 5, 5))
    loss, _ = V.weighted_ce_loss(np.full((5, 5, 5, 3), 1 / 3), g, rng.choice([1.0, 3.0, 15.0], g.shape))
    assert abs(loss - math.log(3)) < 1e-9


def test_ce_clamps_zero_probability():
    g = np.zeros((1, 1, 2), int)
    p = np.zeros((1, 1, 2, 3))
    p[..., 1] = 1.0
    loss, grad = V.weighted_ce_loss(p, g, np.ones((1, 1, 2)))
    assert loss == pytest.approx(-math.log(1e-7))
    assert not grad.any()


@pytest.mark.parametrize("seed", range(5))
def test_ce_gradient_finite_differences(seed):
    p, g, w, _ = _instance(seed)
    _, grad = V.weighted_ce_loss(p, g, w)
    rng = np.random.default_rng(seed + 50)
    for _ in range(20):
        idx = tuple(rng.integers(0, 8, 3)) + (int(g[tuple(rng.integers(0, 8, 3))]),)
        fd, _, _ = central_difference(lambda q: V.weighted_ce_loss(q, g, w)[0], p, idx, 1e-4)
        assert relative_error(fd, grad[idx]) <= 1e-4


def test_ce_monotone_attention():
    g = np.zeros((4, 4, 4), int)
    g[1, 1, :] = 1
    p = np.full((4, 4, 4, 3), 0.1)
    p[..., 0] = 0.8
    p[1, 1, 2] = (0.7, 0.2, 0.1)  # misclassified centerline voxel
    contrib = []
    for w_cl in (3.0, 6.0, 15.0, 30.0):
        w = np.ones(g.shape)
        w[g == 1] = w_cl
        contrib.append(w[1, 1, 2] * -math.log(p[1, 1, 2, 1]) / w.sum())
    assert all(a < b for a, b in zip(contrib, contrib[1:]))


# --- soft Dice ------------------------------------------------------------------------------


def test_dice_perfect_prediction():
    g = np.random.default_rng(2).integers(0, 3, (6, 6, 6))
    loss, _ = V.weighted_soft_dice_loss(np.eye(3)[g], g, np.ones(g.shape))
    assert loss <= 1e-4


def test_dice_total_miss():
    g = np.zeros((6, 6, 6), int)
    g[:3] = 1
    g[3:] = 2
    swapped = np.eye(3)[3 - g]
    loss, _ = V.weighted_soft_dice_loss(swapped, g, np.ones(g.shape))
    assert loss == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("seed", range(3))
def test_dice_uniform_weights_matches_direct(seed):
    p, g, _, _ = _instance(seed, (5, 5, 5))
    loss, _ = V.weighted_soft_dice_loss(p, g, np.ones(g.shape))
    assert relative_error(loss, direct_soft_dice(p, g), 0) <= 1e-10


@pytest.mark.parametrize("seed", range(5))
def test_dice_gradient_finite_differences(seed):
    p, g, w, _ = _instance(seed)
    _, grad = V.weighted_soft_dice_loss(p, g, w)
    rng = np.random.default_rng(seed + 60)
    for _ in range(20):
        idx = tuple(rng.integers(0, 8, 3)) + (int(rng.integers(1, 3)),)
        fd, _, _ = central_difference(lambda q: V.weighted_soft_dice_loss(q, g, w)[0], p, idx, 1e-4)
        assert relative_error(fd, grad[idx]) <= 1e-4
    assert not grad[..., 0].any()


# --- soft skeleton --------------------------------------------------------------------------


def test_soft_skeleton_zero_and_line():
    assert not V.soft_skeleton(np.zeros((5, 5, 5))).any()
    line = np.zeros((7, 7, 15))
    line[3, 3, 2:13] = 1
    assert np.array_equal(V.soft_skeleton(line, 10), line)


def test_soft_skeleton_domain_and_range(rng):
    with pytest.raises(DomainError):
        V.soft_skeleton(np.full((3, 3, 3), 1.5))
    s = V.soft_skeleton(rng.random((9, 9, 9)), 5)
    assert s.min() >= 0 and s.max() <= 1


@pytest.mark.parametrize(
    "direction,center",
    [((0, 0, 1), (12.0, 12.0, 25.0)), ((0, 0, 1), (11.5, 11.5, 25.0)), ((1, 1, 1), (23.5, 23.7, 23.3))],
)
def test_soft_skeleton_mass_near_axis(direction, center):
    d = np.asarray(direction, float)
    d /= np.linalg.norm(d)
    c = np.asarray(center)
    L = 30.0 if direction == (1, 1, 1) else 40.0
    a = c - d * L / 2
    dims = (48, 48, 48) if direction == (1, 1, 1) else (25, 25, 51)
    mask, _ = rasterize_tube(a, d, L, 3.0, VolumeGeometry(dims))
    s = V.soft_skeleton(mask.astype(float), 10)
    pts = np.argwhere(s > 0)
    near = sum(s[tuple(p)] for p in pts if segment_in_cube(p, 1.0, a, a + L * d))
    assert near >= 0.8 * s.sum() > 0


@pytest.mark.parametrize("seed", range(3))
def test_soft_skeleton_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.05, 0.95, (6, 6, 6))
    v = rng.normal(size=x.shape)
    ss = V.SoftSkeleton(x, 3)
    grad = ss.backward(v)
    f = lambda q: float((V.soft_skeleton(q, 3) * v).sum())  # noqa: E731
    checked = 0
    for _ in range(40):
        idx = tuple(rng.integers(0, 6, 3))
        fd, fwd, bwd = central_difference(f, x, idx, 1e-6)
        if relative_error(fwd, bwd) > 1e-3:
            continue  # min/max tie at this entry
        checked += 1
        assert relative_error(fd, grad[idx]) <= 1e-3
    assert checked >= 30


# --- clDice ----------------------------------------------------------------------------------


def test_cldice_perfect_on_phantom(phantom):
    sk = class_skeletons(phantom.labels)
    pred = ProbVolume.from_labels(phantom.labels)
    w = V.build_weight_map(phantom.labels, sk, phantom.lung_mask, kind="cldice")
    loss, _ = V.weighted_cldice_loss(pred, phantom.labels, sk, w)
    assert loss <= 0.05


def test_cldice_background_prediction_is_one(phantom):
    sk = class_skeletons(phantom.labels)
    bg = np.zeros(phantom.labels.shape + (3,))
    bg[..., 0] = 1
    w = V.build_weight_map(phantom.labels, sk, phantom.lung_mask, kind="cldice")
    loss, _ = V.weighted_cldice_loss(ProbVolume(bg, phantom.labels.geometry), phantom.labels, sk, w)
    assert loss == 1.0


def test_cldice_empty_skeletons():
    g = np.zeros((4, 4, 4), int)
    p = random_simplex(np.random.default_rng(0), (4, 4, 4))
    loss, grad = V.weighted_cldice_loss(p, g, {}, np.ones(g.shape))
    assert loss == 0.0 and not grad.any()


def test_cldice_excludes_empty_class():
    p, g, w, sk = _instance(4)
    only1 = {1: sk[1], 2: np.zeros_like(sk[2])}
    loss, grad = V.weighted_cldice_loss(p, g, only1, w, V.WeightConfig(soft_skel_iters=3))
    assert 0 <= loss <= 1 and not grad[..., 2].any()


@pytest.mark.parametrize("seed", range(5))
def test_cldice_gradient_finite_differences(seed):
    p, g, w, sk = _instance(seed)
    cfg = V.WeightConfig(soft_skel_iters=3)
    _, grad = V.weighted_cldice_loss(p, g, sk, w, cfg)
    f = lambda q: V.weighted_cldice_loss(q, g, sk, w, cfg)[0]  # noqa: E731
    rng = np.random.default_rng(seed + 70)
    checked = 0
    for _ in range(20):
        idx = tuple(rng.integers(0, 8, 3)) + (int(rng.integers(1, 3)),)
        fd, fwd, bwd = central_difference(f, p, idx, 1e-5)
        if relative_error(fwd, bwd) > 1e-3:
            continue
        checked += 1
        assert relative_error(fd, grad[idx]) <= 1e-3
    assert checked >= 15


# --- composite --------------------------------------------------------------------------------


def test_composite_identity_and_lambda_zero():
    for seed in range(3):
        p, g, _, _ = _instance(seed)
        gt = LabelVolume(g.astype(np.uint8))
        sk = class_skeletons(gt)
        lung = LabelVolume(np.random.default_rng(seed).random(g.shape) < 0.7)
        total, grad, br = V.composite_loss(ProbVolume(p), gt, sk, lung, V.WeightConfig(soft_skel_iters=3))
        assert relative_error(total, br["ce"] + br["dice"] + 0.5 * br["cldice"], 0) <= 1e-12
        assert grad.shape == p.shape
        t0, _, b0 = V.composite_loss(ProbVolume(p), gt, sk, lung, V.WeightConfig(lambda_cldice=0, soft_skel_iters=3))
        assert t0 == b0["ce"] + b0["dice"]


def test_composite_perfect_on_phantom(phantom):
    sk = class_skeletons(phantom.labels)
    total, _, _ = V.composite_loss(ProbVolume.from_labels(phantom.labels), phantom.labels, sk, phantom.lung_mask)
    assert total <= 0.06


def test_loss_ranges():
    for seed in range(3):
        p, g, w, sk = _instance(seed)
        assert V.weighted_ce_loss(p, g, w)[0] >= 0
        assert 0 <= V.weighted_soft_dice_loss(p, g, w)[0] <= 1 + 1e-3
        assert 0 <= V.weighted_cldice_loss(p, g, sk, w, V.WeightConfig(soft_skel_iters=3))[0] <= 1 + 1e-3


def test_geometry_mismatch_rejected():
    gt = LabelVolume(np.zeros((4, 4, 4), np.uint8))
    w = V.WeightVolume(np.ones((4, 4, 5)))
    with pytest.raises(GeometryError):
        V.weighted_ce_loss(ProbVolume.from_labels(gt), gt, w)
