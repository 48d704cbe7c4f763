"""Volume containers shared by every module.

Arrays are indexed ``data[x, y, z]`` with shape ``(nx, ny, nz)``; on disk the
payload is written in Fortran order so that x varies fastest, matching NIfTI.
Volumes are immutable: the stored arrays are private copies flagged read-only.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import GeometryError, InvalidLabelError, ValidationError

BACKGROUND, ARTERY, VEIN = 0, 1, 2
CLASS_NAMES = {ARTERY: "artery", VEIN: "vein"}
MAX_VOXELS = 2**31 - 1

# relative tolerance when comparing spacing/origin of two volumes; NIfTI stores
# them as float32
_GEOM_RTOL = 1e-6


def _triple(values, kind) -> tuple:
    values = tuple(kind(v) for v in values)
    if len(values) != 3:
        raise ValidationError(f"expected three components, got {len(values)}")
    return values


@dataclass(frozen=True)
class VolumeGeometry:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = _triple(self.dims, int)
        spacing = _triple(self.spacing, float)
        origin = _triple(self.origin, float)
        if min(dims) < 1:
            raise ValidationError(f"dims must be >= 1, got {dims}")
        if not all(s > 0 and np.isfinite(s) for s in spacing):
            raise ValidationError(f"spacing must be positive, got {spacing}")
        if not all(np.isfinite(o) for o in origin):
            raise ValidationError(f"origin must be finite, got {origin}")
        if dims[0] * dims[1] * dims[2] > MAX_VOXELS:
            raise ValidationError(f"volume {dims} exceeds {MAX_VOXELS} voxels")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def size(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    def matches(self, other: "VolumeGeometry") -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, rtol=_GEOM_RTOL, atol=0)
            and np.allclose(self.origin, other.origin, rtol=_GEOM_RTOL, atol=1e-6)
        )

    def world(self, index) -> np.ndarray:
        """World coordinates (mm) of voxel centers; ``index`` is (..., 3)."""
        return np.asarray(self.origin) + np.asarray(index, dtype=float) * np.asarray(self.spacing)


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.flags.writeable = False
    return arr


class _Volume:
    geometry: VolumeGeometry
    data: np.ndarray

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.geometry.dims

    def __eq__(self, other):
        return (
            type(self) is type(other)
            and self.geometry == other.geometry
            and np.array_equal(self.data, other.data)
        )

    __hash__ = None


class ScalarVolume(_Volume):
    """Real-valued intensities, held in float64."""

    def __init__(self, data, geometry: VolumeGeometry | None = None):
        data = np.asarray(data, dtype=np.float64)
        geometry = geometry or VolumeGeometry(data.shape)
        _check_shape(data.shape, geometry.dims)
        if not np.all(np.isfinite(data)):
            raise ValidationError("scalar volume contains non-finite values")
        self.geometry = geometry
        self.data = _frozen(data)

    def __repr__(self):
        return f"ScalarVolume(dims={self.geometry.dims}, spacing={self.geometry.spacing})"


class LabelVolume(_Volume):
    """Integer labels in {0 background, 1 artery, 2 vein}, stored as uint8.

    Binary masks are the special case using only {0, 1}.
    """

    def __init__(self, data, geometry: VolumeGeometry | None = None):
        data = np.asarray(data)
        geometry = geometry or VolumeGeometry(data.shape)
        _check_shape(data.shape, geometry.dims)
        if data.dtype == bool:
            data = data.astype(np.uint8)
        if not np.issubdtype(data.dtype, np.integer):
            if not np.all(np.isin(data, (0, 1, 2))):
                raise InvalidLabelError("labels must be integers in {0, 1, 2}")
        elif data.size and (data.min() < 0 or data.max() > 2):
            raise InvalidLabelError(
                f"labels must lie in {{0, 1, 2}}, found range [{data.min()}, {data.max()}]"
            )
        self.geometry = geometry
        self.data = _frozen(data.astype(np.uint8))

    def mask(self, cls: int) -> np.ndarray:
        return self.data == cls

    def labels_present(self) -> set[int]:
        return set(int(v) for v in np.unique(self.data))

    def __repr__(self):
        return f"LabelVolume(dims={self.geometry.dims}, labels={sorted(self.labels_present())})"


class ProbVolume(_Volume):
    """Per-voxel probabilities over (background, artery, vein)."""

    SUM_TOL = 1e-6

    def __init__(self, data, geometry: VolumeGeometry | None = None):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim != 4 or data.shape[-1] != 3:
            raise ValidationError(f"probability data must have shape (nx, ny, nz, 3), got {data.shape}")
        geometry = geometry or VolumeGeometry(data.shape[:3])
        _check_shape(data.shape[:3], geometry.dims)
        if not np.all(np.isfinite(data)) or data.min() < 0:
            raise ValidationError("probabilities must be finite and non-negative")
        dev = np.abs(data.sum(axis=-1) - 1.0).max()
        if dev > self.SUM_TOL:
            raise ValidationError(f"probabilities must sum to 1 per voxel (max deviation {dev:.3g})")
        self.geometry = geometry
        self.data = _frozen(data)

    @classmethod
    def from_labels(cls, labels: LabelVolume) -> "ProbVolume":
        """One-hot probabilities of a label volume."""
        onehot = np.eye(3)[labels.data]
        return cls(onehot, labels.geometry)

    def argmax(self) -> LabelVolume:
        return LabelVolume(np.argmax(self.data, axis=-1).astype(np.uint8), self.geometry)

    def __repr__(self):
        return f"ProbVolume(dims={self.geometry.dims})"


def _check_shape(shape, dims):
    if tuple(shape) != tuple(dims):
        raise GeometryError(f"data shape {tuple(shape)} does not match dims {tuple(dims)}")


def require_same_geometry(*volumes, names: Iterable[str] | None = None) -> VolumeGeometry:
    """Return the shared geometry or raise GeometryError."""
    names = list(names) if names is not None else [f"volume {i}" for i in range(len(volumes))]
    ref = volumes[0].geometry
    for name, vol in zip(names[1:], volumes[1:]):
        if not ref.matches(vol.geometry):
            raise GeometryError(
                f"geometry mismatch: {names[0]} has dims {ref.dims} spacing {ref.spacing} "
                f"origin {ref.origin}, {name} has dims {vol.geometry.dims} "
                f"spacing {vol.geometry.spacing} origin {vol.geometry.origin}"
            )
    return ref


def voxel_count(volume: LabelVolume, cls: int) -> int:
    if cls not in (0, 1, 2):
        raise InvalidLabelError(f"class must be 0, 1 or 2, got {cls}")
    return int(np.count_nonzero(volume.data == cls))


def binary(volume: LabelVolume) -> np.ndarray:
    """Nonzero voxels of a label volume as a bool array."""
    return volume.data != 0
