"""Topology-preserving 3D thinning (26-connected foreground, 6-connected background).

Six directional sub-iterations (+x, -x, +y, -y, +z, -z) peel border voxels
that are simple points. Voxels are admitted in order of their distance to the
background so shells come off evenly. Curve endpoints are kept, except a tip
that appeared before thinning reached its own depth: that is a surface spur
and is peeled like any other voxel. Within a sub-iteration the
candidates are collected first and then deleted one at a time in raster order
(x fastest), each being re-checked against the current image, so every single
deletion preserves topology. Iteration stops at a fixed point.
"""
from __future__ import annotations

import numpy as np
from numba import njit
from scipy import ndimage

from .errors import InvalidMaskError
from .volume import LabelVolume, VolumeGeometry


def _offsets():
    # neighborhood position p = (dx+1) + 3*(dy+1) + 9*(dz+1), matching a
    # (3, 3, 3) block indexed [x, y, z] and raveled in Fortran order
    return [(p % 3 - 1, (p // 3) % 3 - 1, p // 9 - 1) for p in range(27)]


def _tables():
    offs = _offsets()
    adj26 = np.full((27, 26), -1, dtype=np.int64)
    adj6 = np.full((27, 6), -1, dtype=np.int64)
    n18 = np.zeros(27, dtype=np.bool_)
    for p, o in enumerate(offs):
        if p != 13 and sum(abs(c) for c in o) <= 2:
            n18[p] = True
    for p, a in enumerate(offs):
        k26 = k6 = 0
        for q, b in enumerate(offs):
            if q == p or q == 13:
                continue
            d = [abs(x - y) for x, y in zip(a, b)]
            if max(d) == 1:
                adj26[p, k26] = q
                k26 += 1
            if sum(d) == 1 and n18[p] and n18[q]:
                adj6[p, k6] = q
                k6 += 1
    faces = np.array([p for p, o in enumerate(offs) if sum(abs(c) for c in o) == 1], dtype=np.int64)
    return adj26, adj6, n18, faces


ADJ26, ADJ6, N18, FACES = _tables()
DIRECTIONS = np.array(
    [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], dtype=np.int64
)


@njit(cache=True, nogil=True)
def _foreground_neighbors(nb):
    n = 0
    for p in range(27):
        if p != 13 and nb[p]:
            n += 1
    return n


@njit(cache=True, nogil=True)
def _is_simple(nb, adj26, adj6, faces):
    nfg = _foreground_neighbors(nb)
    if nfg == 0:
        return False
    visited = np.zeros(27, dtype=np.bool_)
    stack = np.empty(27, dtype=np.int64)

    # one 26-connected foreground component in N26*
    start = -1
    for p in range(27):
        if p != 13 and nb[p]:
            start = p
            break
    top = 0
    stack[top] = start
    visited[start] = True
    seen = 1
    while top >= 0:
        p = stack[top]
        top -= 1
        for k in range(26):
            q = adj26[p, k]
            if q < 0:
                break
            if nb[q] and not visited[q]:
                visited[q] = True
                seen += 1
                top += 1
                stack[top] = q
    if seen != nfg:
        return False

    # one 6-connected background component in N18 that touches a face neighbor
    visited[:] = False
    ncomp = 0
    for i in range(6):
        f = faces[i]
        if nb[f] or visited[f]:
            continue
        ncomp += 1
        if ncomp > 1:
            return False
        top = 0
        stack[top] = f
        visited[f] = True
        while top >= 0:
            p = stack[top]
            top -= 1
            for k in range(6):
                q = adj6[p, k]
                if q < 0:
                    break
                if not nb[q] and not visited[q]:
                    visited[q] = True
                    top += 1
                    stack[top] = q
    return ncomp == 1


@njit(cache=True, nogil=True)
def _gather(img, x, y, z, nb):
    for dz in range(3):
        for dy in range(3):
            for dx in range(3):
                nb[dx + 3 * dy + 9 * dz] = img[x + dx - 1, y + dy - 1, z + dz - 1]


@njit(cache=True, nogil=True)
def _cascade_blocked(stamp, tick, x, y, z, ox, oy, oz):
    # an in-plane face neighbor (perpendicular to the sweep) was deleted this sub-iteration
    for dz in range(-1, 2):
        for dy in range(-1, 2):
            for dx in range(-1, 2):
                if dx * ox + dy * oy + dz * oz != 0 or abs(dx) + abs(dy) + abs(dz) != 1:
                    continue
                if stamp[x + dx, y + dy, z + dz] == tick:
                    return True
    return False


@njit(cache=True, nogil=True)
def _tip_chain(estamp, tick, x, y, z):
    # a 26-neighbor was deleted as a curve tip earlier in this sub-iteration
    for dz in range(-1, 2):
        for dy in range(-1, 2):
            for dx in range(-1, 2):
                if estamp[x + dx, y + dy, z + dz] == tick:
                    return True
    return False


@njit(cache=True, nogil=True)
def _mark_new_tips(img, tip_level, level, x, y, z, nb):
    for dz in range(-1, 2):
        for dy in range(-1, 2):
            for dx in range(-1, 2):
                u, v, w = x + dx, y + dy, z + dz
                if img[u, v, w] and tip_level[u, v, w] < 0:
                    _gather(img, u, v, w, nb)
                    if _foreground_neighbors(nb) <= 1:
                        tip_level[u, v, w] = level


@njit(cache=True, nogil=True)
def _thin(img, depth, directions, adj26, adj6, faces):
    """Thin a zero-padded uint8 image in place; returns the number of passes.

    ``depth`` holds each voxel's distance to the background; pass k only
    considers voxels with depth <= k, so shells are peeled from all sides
    before deeper voxels are touched.
    """
    nx, ny, nz = img.shape
    nb = np.zeros(27, dtype=np.uint8)
    cand = np.empty((img.size, 3), dtype=np.int64)
    stamp = np.zeros(img.shape, dtype=np.int64)
    estamp = np.zeros(img.shape, dtype=np.int64)
    # level at which each voxel first became a curve tip (-1: not yet);
    # tips of the input are protected unconditionally
    tip_level = np.full(img.shape, -1.0)
    for z in range(1, nz - 1):
        for y in range(1, ny - 1):
            for x in range(1, nx - 1):
                if img[x, y, z]:
                    _gather(img, x, y, z, nb)
                    if _foreground_neighbors(nb) <= 1:
                        tip_level[x, y, z] = np.inf
    tick = 0
    max_depth = 0.0
    for v in depth.ravel():
        if v > max_depth:
            max_depth = v
    passes = 0
    level = 1.0
    changed = True
    while changed or level <= max_depth:
        if not changed:
            level += 1.0
        changed = False
        passes += 1
        for d in range(6):
            tick += 1
            ox, oy, oz = directions[d, 0], directions[d, 1], directions[d, 2]
            n = 0
            for z in range(1, nz - 1):
                for y in range(1, ny - 1):
                    for x in range(1, nx - 1):
                        if img[x, y, z] and not img[x + ox, y + oy, z + oz] and depth[x, y, z] <= level:
                            _gather(img, x, y, z, nb)
                            if _foreground_neighbors(nb) <= 1 and tip_level[x, y, z] >= depth[x, y, z]:
                                continue
                            if _is_simple(nb, adj26, adj6, faces):
                                cand[n, 0] = x
                                cand[n, 1] = y
                                cand[n, 2] = z
                                n += 1
            for i in range(n):
                x, y, z = cand[i, 0], cand[i, 1], cand[i, 2]
                thin_here = not img[x - ox, y - oy, z - oz]
                if thin_here and _cascade_blocked(stamp, tick, x, y, z, ox, oy, oz):
                    continue
                _gather(img, x, y, z, nb)
                tip = _foreground_neighbors(nb) <= 1
                if tip and _tip_chain(estamp, tick, x, y, z):
                    continue
                if _is_simple(nb, adj26, adj6, faces):
                    img[x, y, z] = 0
                    stamp[x, y, z] = tick
                    if tip:
                        estamp[x, y, z] = tick
                    _mark_new_tips(img, tip_level, level, x, y, z, nb)
                    changed = True
    return passes


def simple_point_test(neighborhood, protect_endpoints: bool = True) -> bool:
    """Whether the center of a 3x3x3 binary block may be deleted.

    True iff removing the center keeps a single 26-connected foreground
    component among its 26 neighbors and a single 6-connected background
    component (within the 18-neighborhood) adjacent to its faces. With
    ``protect_endpoints`` a center with at most one foreground neighbor is
    never deletable.
    """
    block = np.asarray(neighborhood)
    if block.shape != (3, 3, 3):
        raise InvalidMaskError(f"neighborhood must be 3x3x3, got {block.shape}")
    nb = (block != 0).astype(np.uint8).ravel(order="F")
    if protect_endpoints and _foreground_neighbors(nb) <= 1:
        return False
    return bool(_is_simple(nb, ADJ26, ADJ6, FACES))


def _as_binary(mask) -> tuple[np.ndarray, VolumeGeometry | None]:
    if isinstance(mask, LabelVolume):
        data, geometry = mask.data, mask.geometry
    else:
        data, geometry = np.asarray(mask), None
    if data.ndim != 3:
        raise InvalidMaskError(f"mask must be 3D, got shape {data.shape}")
    if data.dtype != bool and data.size and not np.all((data == 0) | (data == 1)):
        raise InvalidMaskError("mask is not binary; select one class first")
    return data.astype(bool), geometry


def skeletonize(mask) -> LabelVolume:
    """Curve skeleton of a binary mask (LabelVolume with values {0, 1}, or array).

    Each component of the mask keeps exactly one skeleton component; the
    skeleton is contained in the mask.
    """
    data, geometry = _as_binary(mask)
    img = np.pad(data.astype(np.uint8), 1)
    if data.any():
        depth = ndimage.distance_transform_edt(img)
        _thin(img, depth, DIRECTIONS, ADJ26, ADJ6, FACES)
    return LabelVolume(img[1:-1, 1:-1, 1:-1], geometry or VolumeGeometry(data.shape))


def skeleton_of_class(labels: LabelVolume, cls: int) -> LabelVolume:
    return skeletonize(LabelVolume(labels.data == cls, labels.geometry))


def class_skeletons(labels: LabelVolume) -> dict[int, LabelVolume]:
    """Skeletons of the artery (1) and vein (2) classes."""
    return {cls: skeleton_of_class(labels, cls) for cls in (1, 2)}
