import itertools

import numpy as np
import pytest
from scipy import ndimage

from oracles import count26, segment_in_cube, simple_point_oracle
from pulmovessel.errors import InvalidMaskError
from pulmovessel.skeleton import class_skeletons, simple_point_test, skeleton_of_class, skeletonize
from pulmovessel.synthgen import rasterize_tube, straight_tube
from pulmovessel.volume import LabelVolume, VolumeGeometry


def _skel(mask):
    return skeletonize(mask).data.astype(bool)


def _neighbor_counts(s):
    return ndimage.convolve(s.astype(int), np.ones((3, 3, 3), int), mode="constant") - 1


def _tube(radius, direction, length=40, dims=(64, 64, 64)):
    d = np.asarray(direction, float)
    d /= np.linalg.norm(d)
    c = np.array([31.5, 31.7, 31.3])
    a = c - d * length / 2
    mask, _ = rasterize_tube(a, d, length, radius, VolumeGeometry(dims))
    return mask, a, a + d * length


# --- simple point predicate -----------------------------------------------------------


def test_endpoint_is_not_simple():
    b = np.zeros((3, 3, 3), bool)
    b[1, 1, 1] = b[2, 1, 1] = True
    assert not simple_point_test(b)
    assert simple_point_test(b, protect_endpoints=False)


def test_face_of_solid_block_is_simple():
    b = np.ones((3, 3, 3), bool)
    b[:, :, 2] = False  # the center now sits on the top face of a 3x3x2 slab
    assert simple_point_test(b)
    assert simple_point_oracle(b)


def test_bridge_is_not_simple():
    b = np.zeros((3, 3, 3), bool)
    b[0, 1, 1] = b[1, 1, 1] = b[2, 1, 1] = True
    assert not simple_point_test(b)


def test_interior_and_isolated_points():
    assert not simple_point_test(np.ones((3, 3, 3), bool))  # would open a cavity
    iso = np.zeros((3, 3, 3), bool)
    iso[1, 1, 1] = True
    assert not simple_point_test(iso, protect_endpoints=False)


def test_simple_point_matches_oracle_on_random_blocks():
    rng = np.random.default_rng(3)
    for density in (0.2, 0.4, 0.6, 0.8):
        for _ in range(1500):
            b = rng.random((3, 3, 3)) < density
            b[1, 1, 1] = True
            assert simple_point_test(b, protect_endpoints=False) == simple_point_oracle(b), b.astype(int)


def test_simple_point_wrong_shape():
    with pytest.raises(InvalidMaskError):
        simple_point_test(np.ones((3, 3)))


def test_simple_point_deletion_preserves_global_topology():
    rng = np.random.default_rng(8)
    for _ in range(200):
        m = np.pad(rng.random((5, 5, 5)) < 0.5, 1)
        x = tuple(rng.integers(1, 6, 3))
        m[x] = True
        block = m[x[0] - 1:x[0] + 2, x[1] - 1:x[1] + 2, x[2] - 1:x[2] + 2]
        if not simple_point_test(block, protect_endpoints=False):
            continue
        after = m.copy()
        after[x] = False
        assert count26(after) == count26(m)
        assert ndimage.label(~after)[1] == ndimage.label(~m)[1]


# --- skeletonize examples ---------------------------------------------------------------


def test_empty_mask():
    assert not skeletonize(np.zeros((5, 5, 5), bool)).data.any()


def test_thin_line_is_its_own_skeleton():
    m = np.zeros((5, 24, 5), bool)
    m[2, 2:22, 2] = True
    assert np.array_equal(_skel(m), m)


def test_diagonal_line_is_its_own_skeleton():
    m = np.zeros((12, 12, 12), bool)
    for i in range(10):
        m[i + 1, i + 1, i + 1] = True
    assert np.array_equal(_skel(m), m)


def test_cylinder_skeleton_near_axis():
    ph = straight_tube((24, 24, 50), radius=3, length=40)
    s = _skel(ph.labels.data)
    tube = ph.tubes[0]
    a, b = np.asarray(tube.start), tube.end
    pts = np.argwhere(s)
    along = pts[:, 2] - a[2]
    for p, t in zip(pts, along):
        if 3 < t < tube.length - 3:
            assert segment_in_cube(p, 1.0, a, b), p
    assert count26(s) == 1
    assert _neighbor_counts(s)[s].max() <= 2


def test_non_binary_rejected():
    with pytest.raises(InvalidMaskError):
        skeletonize(np.full((3, 3, 3), 2))
    with pytest.raises(InvalidMaskError):
        skeletonize(np.zeros((3, 3)))


def test_geometry_carried_through():
    g = VolumeGeometry((6, 6, 6), (0.5, 0.5, 0.8), (1, 2, 3))
    lab = LabelVolume(np.ones((6, 6, 6), np.uint8), g)
    assert skeletonize(lab).geometry == g


# --- per class --------------------------------------------------------------------------


def _two_tubes():
    g = VolumeGeometry((40, 40, 40))
    art, _ = rasterize_tube((10, 12, 5), (0, 0, 1), 30, 2.5, g)
    vein, _ = rasterize_tube((28, 26, 5), (0, 0, 1), 30, 2.5, g)
    data = np.zeros(g.dims, np.uint8)
    data[art] = 1
    data[vein] = 2
    return LabelVolume(data, g)


def test_skeleton_of_missing_class_is_empty():
    lab = LabelVolume(np.ones((5, 5, 5), np.uint8))
    assert not skeleton_of_class(lab, 2).data.any()


def test_class_skeletons_stay_in_class():
    lab = _two_tubes()
    sk = class_skeletons(lab)
    assert sk[1].data.any() and sk[2].data.any()
    assert not np.any((sk[1].data != 0) & (lab.data == 2))
    assert skeleton_of_class(lab, 1) == skeletonize(lab.data == 1)


# --- invariants --------------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(25))
def test_random_mask_topology_containment_idempotence(seed):
    rng = np.random.default_rng(seed)
    m = rng.random((16, 16, 16)) < rng.uniform(0.1, 0.7)
    s = _skel(m)
    assert not (s & ~m).any()
    assert count26(s) == count26(m)
    padded_m, padded_s = np.pad(m, 1), np.pad(s, 1)
    assert ndimage.label(~padded_s)[1] == ndimage.label(~padded_m)[1]
    assert np.array_equal(_skel(s), s)


@pytest.mark.parametrize(
    "radius,direction",
    list(itertools.product([1, 2, 3, 4, 5], [(0, 0, 1), (1, 1, 0), (1, 1, 1), (1, 0.5, 0.2)])),
)
def test_tube_skeleton_thin_centered_single(radius, direction):
    m, a, b = _tube(radius, direction)
    s = _skel(m)
    assert count26(s) == 1
    assert _neighbor_counts(s)[s].max() <= 2
    L = np.linalg.norm(b - a)
    for p in np.argwhere(s):
        t = (p - a) @ (b - a) / L
        if 3 < t < L - 3:
            assert segment_in_cube(p, 1.0, a, b)


def test_deterministic():
    m, _, _ = _tube(3, (1, 0.5, 0.2))
    assert np.array_equal(_skel(m), _skel(m.copy()))
