"""Artery/vein repair by connected-component analysis.

Components lying wholly outside the lung are removed, then small
components touching the opposite class's largest component are relabeled
into it, repeatedly, until nothing changes.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import ConfigError
from .volume import CLASS_NAMES, LabelVolume, require_same_geometry

# the 13 neighbors that precede a voxel in raster order (x fastest, then y, then z)
_BACKWARD = np.array(
    [(dx, dy, dz) for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1)
     if dz < 0 or (dz == 0 and (dy < 0 or (dy == 0 and dx < 0)))],
    dtype=np.int64,
)
_ALL26 = np.array(
    [(dx, dy, dz) for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dx, dy, dz) != (0, 0, 0)],
    dtype=np.int64,
)


@njit(cache=True, nogil=True)
def _find(parent, a):
    root = a
    while parent[root] != root:
        root = parent[root]
    while parent[a] != root:
        nxt = parent[a]
        parent[a] = root
        a = nxt
    return root


@njit(cache=True, nogil=True)
def _label26(mask, offsets):
    nx, ny, nz = mask.shape
    prov = np.zeros(mask.shape, dtype=np.int64)
    parent = np.zeros(mask.size + 1, dtype=np.int64)
    nxt = 1
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                if not mask[x, y, z]:
                    continue
                lab = 0
                for k in range(offsets.shape[0]):
                    u, v, w = x + offsets[k, 0], y + offsets[k, 1], z + offsets[k, 2]
                    if u < 0 or v < 0 or w < 0 or u >= nx or v >= ny:
                        continue
                    q = prov[u, v, w]
                    if q == 0:
                        continue
                    if lab == 0:
                        lab = _find(parent, q)
                    else:
                        a, b = _find(parent, lab), _find(parent, q)
                        if a != b:
                            # smaller label wins so the root is the first-encountered voxel's label
                            if a < b:
                                parent[b] = a
                                lab = a
                            else:
                                parent[a] = b
                                lab = b
                if lab == 0:
                    parent[nxt] = nxt
                    lab = nxt
                    nxt += 1
                prov[x, y, z] = lab
    # second pass: dense ids in first-encounter order
    dense = np.zeros(nxt, dtype=np.int64)
    count = 0
    out = np.zeros(mask.shape, dtype=np.int32)
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                q = prov[x, y, z]
                if q == 0:
                    continue
                r = _find(parent, q)
                if dense[r] == 0:
                    count += 1
                    dense[r] = count
                out[x, y, z] = dense[r]
    return out, count


def label_components(mask) -> tuple[np.ndarray, int]:
    """26-connected component ids (int32, 0 = background) and their count.

    Ids are dense from 1 in order of each component's first voxel in raster
    order.
    """
    mask = np.ascontiguousarray(np.asarray(mask) != 0)
    if mask.ndim != 3:
        raise ConfigError(f"mask must be 3D, got shape {mask.shape}")
    return _label26(mask, _BACKWARD)


def _shifted_pairs(ids_a, ids_b):
    """Unique (a, b) id pairs with a voxel of ``a`` 26-adjacent to a voxel of ``b``."""
    nx, ny, nz = ids_a.shape
    pairs = []
    for dx, dy, dz in _ALL26:
        sa = tuple(slice(max(0, -d), n - max(0, d)) for d, n in zip((dx, dy, dz), (nx, ny, nz)))
        sb = tuple(slice(max(0, d), n - max(0, -d)) for d, n in zip((dx, dy, dz), (nx, ny, nz)))
        a, b = ids_a[sa], ids_b[sb]
        hit = (a > 0) & (b > 0)
        if hit.any():
            pairs.append(np.stack([a[hit], b[hit]], axis=1))
    if not pairs:
        return np.zeros((0, 2), dtype=np.int64)
    return np.unique(np.concatenate(pairs).astype(np.int64), axis=0)


@dataclass
class ComponentTable:
    """Per-class components; entry ``i`` describes component id ``i + 1``."""

    cls: int
    voxel_count: np.ndarray
    inside_lung_any: np.ndarray
    touches: list = field(default_factory=list)  # ids of adjacent opposite-class components

    def __len__(self):
        return len(self.voxel_count)

    @property
    def ids(self) -> list[int]:
        return list(range(1, len(self) + 1))

    def largest(self) -> int:
        """Id of the largest component (smaller id on ties); 0 if empty."""
        return int(np.argmax(self.voxel_count)) + 1 if len(self) else 0


def connected_components(labels: LabelVolume, cls: int, lung_mask: LabelVolume | None = None):
    """Components of one class as ``(ComponentTable, ids)``.

    ``touches`` refers to ids of the other class's components as numbered by
    ``connected_components(labels, 3 - cls)``. Without a lung mask every
    component counts as inside the lung.
    """
    if cls not in (1, 2):
        raise ConfigError(f"class must be 1 or 2, got {cls}")
    ids, n = label_components(labels.data == cls)
    other, _ = label_components(labels.data == 3 - cls)
    counts = np.bincount(ids.ravel(), minlength=n + 1)[1:]
    if lung_mask is None:
        inside = np.ones(n, dtype=bool)
    else:
        require_same_geometry(labels, lung_mask, names=["labels", "lung_mask"])
        inside = np.bincount(ids[lung_mask.data != 0], minlength=n + 1)[1:] > 0
    touches = [set() for _ in range(n)]
    for a, b in _shifted_pairs(ids, other):
        touches[a - 1].add(int(b))
    return ComponentTable(cls, counts, inside, touches), ids


@dataclass(frozen=True)
class RepairConfig:
    size_threshold: int = 800
    connectivity: int = 26
    max_iterations: int = 64
    keep_unmerged_small: bool = True

    def __post_init__(self):
        if self.size_threshold < 1:
            raise ConfigError(f"size_threshold must be >= 1, got {self.size_threshold}")
        if self.connectivity != 26:
            raise ConfigError("only 26-connectivity is supported")
        if self.max_iterations < 1:
            raise ConfigError(f"max_iterations must be >= 1, got {self.max_iterations}")


@dataclass
class RepairLog:
    records: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = True

    def add(self, **rec):
        self.records.append(rec)

    def lines(self) -> list[str]:
        out = [" ".join(f"{k}={v}" for k, v in rec.items()) for rec in self.records]
        out.append(f"summary iterations={self.iterations} converged={str(self.converged).lower()} changes={len(self.records)}")
        return out

    def __len__(self):
        return len(self.records)


def _largest_seed(ids, counts):
    """First raster voxel of the largest component, or None."""
    if counts.size == 0:
        return None
    target = int(np.argmax(counts)) + 1
    flat = np.flatnonzero(ids.ravel(order="F") == target)[0]
    return np.unravel_index(flat, ids.shape, order="F")


def _class_state(data, cls, seed):
    ids, n = label_components(data == cls)
    counts = np.bincount(ids.ravel(), minlength=n + 1)[1:]
    big = int(ids[seed]) if seed is not None else 0
    return ids, counts, big


def _merge_step(data, src, seeds, cfg, log, iteration):
    """Relabel small ``src`` components touching the largest of the other class."""
    dst = 3 - src
    ids_s, counts_s, big_s = _class_state(data, src, seeds[src])
    ids_d, _, big_d = _class_state(data, dst, seeds[dst])
    if big_d == 0:
        return False
    touching = {a for a, b in _shifted_pairs(ids_s, ids_d) if b == big_d}
    changed = False
    for cid in sorted(touching):
        if cid == big_s or counts_s[cid - 1] >= cfg.size_threshold:
            continue
        data[ids_s == cid] = dst
        log.add(action="relabel", iteration=iteration, component=cid, size=int(counts_s[cid - 1]),
                source=CLASS_NAMES[src], target=CLASS_NAMES[dst], reason=f"touches_largest_{CLASS_NAMES[dst]}")
        changed = True
    return changed


def repair(labels: LabelVolume, lung_mask: LabelVolume, cfg: RepairConfig | None = None):
    """Remove outside-lung components and merge small stray components.

    Returns ``(repaired, RepairLog)``.
    """
    cfg = cfg or RepairConfig()
    require_same_geometry(labels, lung_mask, names=["labels", "lung_mask"])
    data = labels.data.copy()
    lung = lung_mask.data != 0
    log = RepairLog()

    seeds = {}
    for cls in (1, 2):
        ids, n = label_components(data == cls)
        inside = np.bincount(ids[lung], minlength=n + 1)[1:] > 0
        counts = np.bincount(ids.ravel(), minlength=n + 1)[1:]
        for cid in np.flatnonzero(~inside) + 1:
            data[ids == cid] = 0
            log.add(action="remove", iteration=0, component=int(cid), size=int(counts[cid - 1]),
                    source=CLASS_NAMES[cls], target="background", reason="outside_lung")
        ids[np.isin(ids, np.flatnonzero(~inside) + 1)] = 0
        counts[~inside] = 0
        seeds[cls] = _largest_seed(ids, counts) if counts.any() else None

    log.converged = False
    for it in range(1, cfg.max_iterations + 1):
        changed = _merge_step(data, 1, seeds, cfg, log, it)
        changed |= _merge_step(data, 2, seeds, cfg, log, it)
        if not changed:
            log.converged = True
            break
        log.iterations = it
    if not log.converged:
        # the cap was hit; check whether another pass would still change anything
        probe = data.copy()
        scratch = RepairLog()
        pending = _merge_step(probe, 1, seeds, cfg, scratch, 0) or _merge_step(probe, 2, seeds, cfg, scratch, 0)
        log.converged = not pending
        if pending:
            log.add(action="stop", iteration=log.iterations, component=0, size=0,
                    source="none", target="none", reason="max_iterations_reached")

    if not cfg.keep_unmerged_small:
        for cls in (1, 2):
            ids, counts, big = _class_state(data, cls, seeds[cls])
            for cid in np.flatnonzero(counts < cfg.size_threshold) + 1:
                if cid == big:
                    continue
                data[ids == cid] = 0
                log.add(action="remove", iteration=log.iterations, component=int(cid), size=int(counts[cid - 1]),
                        source=CLASS_NAMES[cls], target="background", reason="unmerged_small")
    return LabelVolume(data, labels.geometry), log


def repair_idempotence_check(labels: LabelVolume, lung_mask: LabelVolume, cfg: RepairConfig | None = None) -> bool:
    """True iff repairing the repaired volume changes nothing."""
    once, _ = repair(labels, lung_mask, cfg)
    twice, _ = repair(once, lung_mask, cfg)
    return once == twice
