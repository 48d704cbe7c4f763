"""CT preprocessing: lung bounding-box crop, resampling, percentile clipping."""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, EmptyMaskError
from .volume import LabelVolume, ScalarVolume, VolumeGeometry, require_same_geometry

DEFAULT_SPACING = (0.726, 0.726, 0.8)


@dataclass(frozen=True)
class PreprocessConfig:
    target_spacing: tuple[float, float, float] = DEFAULT_SPACING
    crop_margin: int = 0
    p_lo: float = 0.5
    p_hi: float = 99.5

    def __post_init__(self):
        object.__setattr__(self, "target_spacing", tuple(float(s) for s in self.target_spacing))
        _check_spacing(self.target_spacing)
        _check_percentiles(self.p_lo, self.p_hi)
        if self.crop_margin < 0:
            raise ConfigError(f"crop_margin must be >= 0, got {self.crop_margin}")


class ClipReport(NamedTuple):
    lo: float
    hi: float
    n_foreground: int


@dataclass(frozen=True)
class PreprocessResult:
    volume: ScalarVolume
    lung_mask: LabelVolume
    bbox_lo: tuple[int, int, int]
    bbox_hi: tuple[int, int, int]  # exclusive
    clip: ClipReport

    @property
    def crop_offset(self) -> tuple[int, int, int]:
        return self.bbox_lo

    def report_lines(self) -> list[str]:
        return [
            f"bbox_lo={','.join(map(str, self.bbox_lo))}",
            f"bbox_hi={','.join(map(str, self.bbox_hi))}",
            f"crop_offset={','.join(map(str, self.crop_offset))}",
            f"clip_lo={self.clip.lo!r}",
            f"clip_hi={self.clip.hi!r}",
            f"n_foreground={self.clip.n_foreground}",
            f"output_dims={','.join(map(str, self.volume.geometry.dims))}",
        ]


def _check_spacing(spacing):
    if len(spacing) != 3 or not all(s > 0 and math.isfinite(s) for s in spacing):
        raise ConfigError(f"target spacing must be three positive numbers, got {tuple(spacing)}")


def _check_percentiles(p_lo, p_hi):
    if not (0 <= p_lo < 100 and 0 < p_hi <= 100):
        raise ConfigError(f"percentiles out of range: p_lo={p_lo}, p_hi={p_hi}")
    if p_lo >= p_hi:
        raise ConfigError(f"p_lo must be below p_hi, got {p_lo} >= {p_hi}")


# ---------------------------------------------------------------------------
# cropping


def mask_bbox(mask: np.ndarray, margin: int = 0):
    """Tight bounding box of nonzero voxels, grown by ``margin`` and clamped.

    Returns ``(lo, hi)`` with ``hi`` exclusive.
    """
    nz = np.nonzero(mask)
    if nz[0].size == 0:
        raise EmptyMaskError("mask has no foreground voxels")
    lo = tuple(max(int(ix.min()) - margin, 0) for ix in nz)
    hi = tuple(min(int(ix.max()) + 1 + margin, n) for ix, n in zip(nz, mask.shape))
    return lo, hi


def crop_geometry(geometry: VolumeGeometry, lo, hi) -> VolumeGeometry:
    dims = tuple(h - l for l, h in zip(lo, hi))
    origin = tuple(o + l * s for o, l, s in zip(geometry.origin, lo, geometry.spacing))
    return VolumeGeometry(dims, geometry.spacing, origin)


def crop(volume, lo, hi):
    """Crop a Scalar/LabelVolume to ``[lo, hi)``, keeping world coordinates."""
    sl = tuple(slice(l, h) for l, h in zip(lo, hi))
    return type(volume)(volume.data[sl], crop_geometry(volume.geometry, lo, hi))


def uncrop(volume, offset, geometry: VolumeGeometry, fill=0):
    """Paste a cropped volume back into a full grid filled with ``fill``."""
    out = np.full(geometry.dims, fill, dtype=volume.data.dtype)
    sl = tuple(slice(o, o + n) for o, n in zip(offset, volume.geometry.dims))
    out[sl] = volume.data
    return type(volume)(out, geometry)


def crop_to_lung_bbox(volume: ScalarVolume, lung_mask: LabelVolume, margin: int = 0):
    """Crop ``volume`` to the lung mask's bounding box (plus ``margin``).

    Returns ``(cropped, crop_offset)``; the offset is the lower corner in the
    input grid.
    """
    require_same_geometry(volume, lung_mask, names=["volume", "lung_mask"])
    if margin < 0:
        raise ConfigError(f"margin must be >= 0, got {margin}")
    lo, hi = mask_bbox(lung_mask.data != 0, margin)
    return crop(volume, lo, hi), lo


# ---------------------------------------------------------------------------
# resampling


def round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def resampled_dims(dims, spacing, target_spacing) -> tuple[int, int, int]:
    return tuple(
        max(1, round_half_away(n * s / t)) for n, s, t in zip(dims, spacing, target_spacing)
    )


def _target_geometry(geometry: VolumeGeometry, target_spacing) -> VolumeGeometry:
    target_spacing = tuple(float(t) for t in target_spacing)
    _check_spacing(target_spacing)
    dims = resampled_dims(geometry.dims, geometry.spacing, target_spacing)
    return VolumeGeometry(dims, target_spacing, geometry.origin)


def _sample_positions(n_out, t, s, n_in):
    """Continuous input index of each output voxel center, clamped to the grid."""
    pos = np.arange(n_out, dtype=np.float64) * (t / s)
    return np.clip(pos, 0.0, n_in - 1)


def resample_trilinear(volume: ScalarVolume, target_spacing) -> ScalarVolume:
    """Resample onto ``target_spacing`` with trilinear interpolation.

    Output voxel ``j`` sits at world ``origin + j * target``; samples outside
    the input grid clamp to the border voxel.
    """
    geom = _target_geometry(volume.geometry, target_spacing)
    out = np.asarray(volume.data, dtype=np.float64)
    for axis in range(3):
        n_in = volume.geometry.dims[axis]
        pos = _sample_positions(geom.dims[axis], geom.spacing[axis], volume.geometry.spacing[axis], n_in)
        i0 = np.floor(pos).astype(np.intp)
        i1 = np.minimum(i0 + 1, n_in - 1)
        frac = pos - i0
        shape = [1, 1, 1]
        shape[axis] = -1
        frac = frac.reshape(shape)
        a = np.take(out, i0, axis=axis)
        b = np.take(out, i1, axis=axis)
        out = a + (b - a) * frac
    return ScalarVolume(out, geom)


def resample_nearest(volume, target_spacing):
    """Nearest-neighbor resampling with the same grid rule; never invents labels."""
    geom = _target_geometry(volume.geometry, target_spacing)
    out = volume.data
    for axis in range(3):
        n_in = volume.geometry.dims[axis]
        pos = _sample_positions(geom.dims[axis], geom.spacing[axis], volume.geometry.spacing[axis], n_in)
        idx = np.minimum(np.floor(pos + 0.5).astype(np.intp), n_in - 1)
        out = np.take(out, idx, axis=axis)
    return type(volume)(out, geom)


# ---------------------------------------------------------------------------
# intensity clipping


def nearest_rank_index(p: float, n: int) -> int:
    """0-based index of the nearest-rank ``p``-th percentile among ``n`` sorted values."""
    # decimal reading of p so that e.g. 0.5 * 1000 / 100 is exactly rank 5
    rank = math.ceil(Fraction(repr(float(p))) * n / 100)
    return min(max(rank, 1), n) - 1


def nearest_rank_percentiles(values: np.ndarray, p_lo: float, p_hi: float) -> tuple[float, float]:
    values = np.sort(np.asarray(values, dtype=np.float64).ravel())
    n = values.size
    return float(values[nearest_rank_index(p_lo, n)]), float(values[nearest_rank_index(p_hi, n)])


def percentile_clip(volume: ScalarVolume, foreground: LabelVolume, p_lo: float = 0.5, p_hi: float = 99.5):
    """Clamp the whole volume into the foreground's nearest-rank percentile range.

    Returns ``(clipped, ClipReport)``.
    """
    _check_percentiles(p_lo, p_hi)
    require_same_geometry(volume, foreground, names=["volume", "foreground"])
    fg = volume.data[foreground.data != 0]
    if fg.size == 0:
        raise EmptyMaskError("foreground mask is empty; cannot compute percentiles")
    lo, hi = nearest_rank_percentiles(fg, p_lo, p_hi)
    clipped = np.clip(volume.data, lo, hi)
    return ScalarVolume(clipped, volume.geometry), ClipReport(lo, hi, int(fg.size))


def preprocess_case(ct: ScalarVolume, lung_mask: LabelVolume, cfg: PreprocessConfig | None = None) -> PreprocessResult:
    """Crop to the lung box, resample to the target grid, clip intensities.

    Percentiles are taken over lung voxels of the resampled crop.
    """
    cfg = cfg or PreprocessConfig()
    require_same_geometry(ct, lung_mask, names=["ct", "lung_mask"])
    lo, hi = mask_bbox(lung_mask.data != 0, cfg.crop_margin)
    ct_c = crop(ct, lo, hi)
    lung_c = crop(lung_mask, lo, hi)
    ct_r = resample_trilinear(ct_c, cfg.target_spacing)
    lung_r = resample_nearest(lung_c, cfg.target_spacing)
    clipped, report = percentile_clip(ct_r, lung_r, cfg.p_lo, cfg.p_hi)
    return PreprocessResult(clipped, lung_r, lo, hi, report)
