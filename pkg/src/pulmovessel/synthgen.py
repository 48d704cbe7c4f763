"""Synthetic vascular phantoms: rasterized tubes and random branching trees.

Phantoms live in label space and come with their exact analytic centerlines
and a convex pseudo-lung mask, so every downstream module can be checked
against known geometry.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import ConvexHull

from .errors import GenerationError, ValidationError
from .volume import LabelVolume, VolumeGeometry

_CUBE26 = np.ones((3, 3, 3), dtype=bool)


@dataclass(frozen=True)
class Branch:
    start: tuple[float, float, float]
    direction: tuple[float, float, float]
    length: float
    radius: float
    cls: int = 1

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float)
        norm = float(np.linalg.norm(d))
        if d.shape != (3,) or norm == 0 or not np.isfinite(norm):
            raise ValidationError(f"branch direction must be a nonzero 3-vector, got {self.direction}")
        if self.radius < 0 or self.length < 0:
            raise ValidationError("branch radius and length must be non-negative")
        if self.cls not in (1, 2):
            raise ValidationError(f"branch class must be 1 or 2, got {self.cls}")
        object.__setattr__(self, "start", tuple(float(v) for v in self.start))
        object.__setattr__(self, "direction", tuple(float(v) for v in d / norm))
        object.__setattr__(self, "length", float(self.length))
        object.__setattr__(self, "radius", float(self.radius))

    @property
    def end(self) -> np.ndarray:
        return np.asarray(self.start) + self.length * np.asarray(self.direction)


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    dims: tuple[int, int, int] = (64, 64, 64)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    branches: tuple[Branch, ...] = ()
    generations: int = 0
    radius_decay: float = 0.8
    length_decay: float = 0.75
    min_radius: float = 1.0
    cone_half_angle: float = 40.0
    separation: int = 2
    lung_margin: int = 2
    max_retries: int = 25
    allow_collision: bool = False

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(
            self,
            "branches",
            tuple(b if isinstance(b, Branch) else Branch(**b) for b in self.branches),
        )
        if not 0 < self.radius_decay <= 1:
            raise ValidationError(f"radius_decay must be in (0, 1], got {self.radius_decay}")
        if self.generations < 0:
            raise ValidationError("generations must be >= 0")

    @property
    def geometry(self) -> VolumeGeometry:
        return VolumeGeometry(self.dims, self.spacing)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "PhantomSpec":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "PhantomSpec":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


@dataclass
class Phantom:
    labels: LabelVolume
    centerlines: dict[int, LabelVolume]
    lung_mask: LabelVolume
    tubes: list[Branch] = field(default_factory=list)


def segment_distance(points: np.ndarray, start, end) -> np.ndarray:
    """Euclidean distance from each point (..., 3) to the segment [start, end]."""
    a = np.asarray(start, dtype=float)
    ab = np.asarray(end, dtype=float) - a
    ap = points - a
    denom = float(ab @ ab)
    if denom == 0:
        t = np.zeros(points.shape[:-1])
    else:
        t = np.clip(ap @ ab / denom, 0.0, 1.0)
    closest = a + t[..., None] * ab
    return np.linalg.norm(points - closest, axis=-1)


def rasterize_tube(start, direction, length, radius, geometry: VolumeGeometry):
    """Voxels whose world centers lie within ``radius`` of the segment.

    Returns ``(mask, axis)``: a bool array and the (N, 3) indices of voxels
    whose centers are within half a voxel of the segment.
    """
    if radius < 0:
        raise ValidationError("radius must be >= 0")
    branch = Branch(start, direction, length, radius)
    a, b = np.asarray(branch.start), branch.end
    sp = np.asarray(geometry.spacing)
    org = np.asarray(geometry.origin)
    half = 0.5 * float(sp.min())
    reach = max(radius, half)
    lo_w = np.minimum(a, b) - reach
    hi_w = np.maximum(a, b) + reach
    dims = np.asarray(geometry.dims)
    lo = np.clip(np.floor((lo_w - org) / sp).astype(int), 0, dims)
    hi = np.clip(np.ceil((hi_w - org) / sp).astype(int) + 1, 0, dims)

    mask = np.zeros(geometry.dims, dtype=bool)
    axis = np.zeros((0, 3), dtype=np.int64)
    if np.any(hi <= lo):
        warnings.warn("tube segment lies outside the volume; nothing rasterized")
        return mask, axis
    grids = np.meshgrid(*[np.arange(l, h) for l, h in zip(lo, hi)], indexing="ij")
    idx = np.stack(grids, axis=-1)
    dist = segment_distance(org + idx * sp, a, b)
    sl = tuple(slice(l, h) for l, h in zip(lo, hi))
    mask[sl] = dist <= radius
    on_axis = dist <= half
    axis = idx[on_axis].astype(np.int64)
    if not mask.any() and axis.size == 0:
        warnings.warn("tube segment lies outside the volume; nothing rasterized")
    return mask, axis


def lung_from_vessels(vessels: np.ndarray, margin: int) -> np.ndarray:
    """Convex hull of the vessel voxels (as unit cubes), dilated by ``margin``."""
    if not vessels.any():
        return np.zeros(vessels.shape, dtype=bool)
    pts = np.argwhere(vessels)
    corners = np.array([[i, j, k] for i in (-0.5, 0.5) for j in (-0.5, 0.5) for k in (-0.5, 0.5)])
    hull_pts = np.unique((pts[:, None, :] + corners[None]).reshape(-1, 3), axis=0)
    hull = ConvexHull(hull_pts)
    lo = pts.min(axis=0)
    hi = pts.max(axis=0) + 1
    grids = np.meshgrid(*[np.arange(l, h) for l, h in zip(lo, hi)], indexing="ij")
    cand = np.stack(grids, axis=-1).reshape(-1, 3).astype(float)
    inside = np.all(cand @ hull.equations[:, :3].T + hull.equations[:, 3] <= 1e-9, axis=1)
    out = np.zeros(vessels.shape, dtype=bool)
    sl = tuple(slice(l, h) for l, h in zip(lo, hi))
    out[sl] = inside.reshape(hi - lo)
    out |= vessels
    if margin > 0:
        out = ndimage.binary_dilation(out, structure=_CUBE26, iterations=margin)
    return out


def _cone_direction(rng, parent, half_angle_deg):
    """Uniform direction on the spherical cap of ``half_angle_deg`` around ``parent``."""
    parent = np.asarray(parent, dtype=float)
    cos_max = math.cos(math.radians(half_angle_deg))
    cos_t = 1.0 - rng.random() * (1.0 - cos_max)
    sin_t = math.sqrt(max(0.0, 1.0 - cos_t * cos_t))
    phi = 2.0 * math.pi * rng.random()
    helper = np.array([1.0, 0.0, 0.0]) if abs(parent[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(parent, helper)
    u /= np.linalg.norm(u)
    v = np.cross(parent, u)
    return cos_t * parent + sin_t * (math.cos(phi) * u + math.sin(phi) * v)


class _Canvas:
    def __init__(self, spec: PhantomSpec):
        self.spec = spec
        self.geometry = spec.geometry
        self.masks = {1: np.zeros(spec.dims, dtype=bool), 2: np.zeros(spec.dims, dtype=bool)}
        self.axes = {1: np.zeros(spec.dims, dtype=bool), 2: np.zeros(spec.dims, dtype=bool)}
        self.tubes: list[Branch] = []

    def inside(self, branch: Branch) -> bool:
        sp = np.asarray(self.geometry.spacing)
        upper = (np.asarray(self.geometry.dims) - 1) * sp
        for p in (np.asarray(branch.start), branch.end):
            if np.any(p - branch.radius < 0) or np.any(p + branch.radius > upper):
                return False
        return True

    def try_place(self, branch: Branch):
        if not self.inside(branch):
            return "leaves the volume"
        mask, axis = rasterize_tube(branch.start, branch.direction, branch.length, branch.radius, self.geometry)
        if not self.spec.allow_collision and self.spec.separation >= 0:
            other = self.masks[3 - branch.cls]
            grown = ndimage.binary_dilation(mask, structure=_CUBE26, iterations=self.spec.separation) if self.spec.separation else mask
            if np.any(grown & other):
                return "collides with the other class"
        return mask, axis

    def commit(self, branch, mask, axis):
        self.masks[branch.cls] |= mask
        if axis.size:
            self.axes[branch.cls][tuple(axis.T)] = True
        self.tubes.append(branch)


def generate_tree(spec: PhantomSpec) -> Phantom:
    """Rasterize the root branches and grow binary subtrees from their ends.

    Each bifurcation draws two child directions uniformly in a cone around
    the parent; children shrink by ``radius_decay`` / ``length_decay``.
    Deterministic in ``spec.seed``.
    """
    rng = np.random.default_rng(spec.seed)
    canvas = _Canvas(spec)
    queue = []
    for i, root in enumerate(spec.branches):
        placed = canvas.try_place(root)
        if isinstance(placed, str):
            raise GenerationError(f"branch {i}: root {placed}")
        canvas.commit(root, *placed)
        queue.append((str(i), root, 0))

    while queue:
        name, parent, gen = queue.pop(0)
        if gen >= spec.generations:
            continue
        for c in range(2):
            child_name = f"{name}.{c}"
            radius = max(parent.radius * spec.radius_decay, spec.min_radius)
            length = parent.length * spec.length_decay
            reason = "no attempts"
            for _ in range(spec.max_retries):
                direction = _cone_direction(rng, parent.direction, spec.cone_half_angle)
                child = Branch(tuple(parent.end), tuple(direction), length, radius, parent.cls)
                placed = canvas.try_place(child)
                if not isinstance(placed, str):
                    canvas.commit(child, *placed)
                    queue.append((child_name, child, gen + 1))
                    break
                reason = placed
            else:
                raise GenerationError(
                    f"branch {child_name}: unplaceable after {spec.max_retries} retries (last attempt {reason})"
                )

    geometry = canvas.geometry
    labels = np.zeros(spec.dims, dtype=np.uint8)
    labels[canvas.masks[1]] = 1
    labels[canvas.masks[2]] = 2  # only reachable with allow_collision
    lung = lung_from_vessels(labels > 0, spec.lung_margin)
    return Phantom(
        labels=LabelVolume(labels, geometry),
        centerlines={cls: LabelVolume(canvas.axes[cls], geometry) for cls in (1, 2)},
        lung_mask=LabelVolume(lung, geometry),
        tubes=canvas.tubes,
    )


def straight_tube(dims, radius, length, axis: int = 2, cls: int = 1, center=None, spacing=(1.0, 1.0, 1.0)) -> Phantom:
    """Single axis-aligned tube centred in the volume (convenience for tests/demos)."""
    dims = tuple(dims)
    center = np.asarray(center if center is not None else [(d - 1) / 2 for d in dims], dtype=float)
    direction = np.zeros(3)
    direction[axis] = 1.0
    start = center.copy()
    start[axis] = center[axis] - length / 2
    spec = PhantomSpec(
        dims=dims,
        spacing=spacing,
        branches=(Branch(tuple(start * np.asarray(spacing)), tuple(direction), length, radius, cls),),
    )
    return generate_tree(spec)


def default_spec(seed: int = 0, dims=(64, 64, 64), generations: int = 2) -> PhantomSpec:
    """An artery tree and a vein tree growing from opposite sides of the volume."""
    nx, ny, nz = dims
    artery = Branch((0.2 * nx, 0.3 * ny, 0.5 * nz), (1.0, 0.15, 0.0), 0.25 * nx, 3.0, 1)
    vein = Branch((0.2 * nx, 0.7 * ny, 0.5 * nz), (1.0, -0.15, 0.0), 0.25 * nx, 3.0, 2)
    return PhantomSpec(seed=seed, dims=tuple(dims), branches=(artery, vein), generations=generations,
                       cone_half_angle=35.0, max_retries=50)


def perturb_labels(phantom: Phantom, seed: int = 0, n_swaps: int = 3, swap_radius: float = 2.5,
                   n_outliers: int = 1, outlier_radius: float = 2.0) -> LabelVolume:
    """A prediction surrogate: swap the class inside a few vessel balls, add outside-lung blobs."""
    rng = np.random.default_rng(seed)
    data = phantom.labels.data.copy()
    grid = np.indices(data.shape).transpose(1, 2, 3, 0)
    vessel = np.argwhere(data > 0)
    for _ in range(n_swaps if len(vessel) else 0):
        c = vessel[rng.integers(len(vessel))]
        ball = (np.linalg.norm(grid - c, axis=-1) <= swap_radius) & (phantom.labels.data > 0)
        data[ball] = 3 - phantom.labels.data[ball]
    outside = np.argwhere(phantom.lung_mask.data == 0)
    for _ in range(n_outliers if len(outside) else 0):
        c = outside[rng.integers(len(outside))]
        ball = np.linalg.norm(grid - c, axis=-1) <= outlier_radius
        ball &= phantom.lung_mask.data == 0
        data[ball] = 1 + int(rng.integers(2))
    return LabelVolume(data, phantom.labels.geometry)
