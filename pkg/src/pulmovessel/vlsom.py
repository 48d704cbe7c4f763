"""Centerline-weighted supervision: weight maps and the composite training loss.

Every loss returns ``(value, gradient)`` where the gradient has the shape of
the prediction ``(nx, ny, nz, 3)`` and is the exact derivative with respect
to each raw probability entry. Channel 0 (background) receives gradient only
from the cross-entropy term.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError, GeometryError, InconsistentSkeletonError
from .volume import LabelVolume, ProbVolume, VolumeGeometry, require_same_geometry, _Volume

LOG_CLAMP = 1e-7
DICE_EPS = 1e-5
CLDICE_EPS = 1e-5
VESSEL_CLASSES = (1, 2)


class WeightKind(str, enum.Enum):
    CE = "ce"
    DICE = "dice"
    CLDICE = "cldice"


@dataclass(frozen=True)
class WeightConfig:
    w_class: float = 3.0
    w_cl: float = 15.0
    lambda_cldice: float = 0.5
    soft_skel_iters: int = 10

    def __post_init__(self):
        if not self.w_cl >= self.w_class >= 1:
            raise ConfigError(f"need w_cl >= w_class >= 1, got w_class={self.w_class}, w_cl={self.w_cl}")
        if self.lambda_cldice < 0:
            raise ConfigError(f"lambda_cldice must be >= 0, got {self.lambda_cldice}")
        if int(self.soft_skel_iters) != self.soft_skel_iters or self.soft_skel_iters < 1:
            raise ConfigError(f"soft_skel_iters must be a positive integer, got {self.soft_skel_iters}")


class WeightVolume(_Volume):
    """Positive per-voxel loss weights."""

    def __init__(self, data, geometry: VolumeGeometry | None = None):
        data = np.asarray(data, dtype=np.float64)
        geometry = geometry or VolumeGeometry(data.shape)
        if data.shape != geometry.dims:
            raise GeometryError(f"data shape {data.shape} does not match dims {geometry.dims}")
        if data.size and not (np.all(np.isfinite(data)) and data.min() > 0):
            raise ConfigError("weights must be finite and positive")
        self.geometry = geometry
        self.data = data.copy()
        self.data.flags.writeable = False

    def __repr__(self):
        return f"WeightVolume(dims={self.geometry.dims}, values={sorted(set(np.unique(self.data).tolist()))})"


# ---------------------------------------------------------------------------
# weight maps


def build_weight_map(gt: LabelVolume, skeletons: dict, lung_mask: LabelVolume, cfg: WeightConfig | None = None,
                     kind: WeightKind | str = WeightKind.CE) -> WeightVolume:
    """1 on background, ``w_class`` on vessel voxels, ``w_cl`` on centerline voxels.

    For the Dice and clDice kinds the elevated weights apply only inside the
    lung; outside it every voxel weighs 1.
    """
    cfg = cfg or WeightConfig()
    kind = WeightKind(kind)
    require_same_geometry(gt, lung_mask, *skeletons.values(), names=["gt", "lung_mask", *[f"skeleton {c}" for c in skeletons]])
    centerline = np.zeros(gt.shape, dtype=bool)
    for cls, skel in skeletons.items():
        on = skel.data != 0
        stray = on & (gt.data != cls)
        if stray.any():
            raise InconsistentSkeletonError(
                f"class {cls} skeleton has {int(stray.sum())} voxels outside its ground-truth class"
            )
        centerline |= on
    w = np.ones(gt.shape)
    w[gt.data != 0] = cfg.w_class
    w[centerline] = cfg.w_cl
    if kind is not WeightKind.CE:
        w[lung_mask.data == 0] = 1.0
    return WeightVolume(w, gt.geometry)


# ---------------------------------------------------------------------------
# helpers


def _arrays(pred, gt, w):
    """Unwrap volumes to arrays, checking that geometries agree."""
    vols = [v for v in (pred, gt, w) if isinstance(v, _Volume)]
    if len(vols) > 1:
        require_same_geometry(*vols, names=[type(v).__name__ for v in vols])
    p = pred.data if isinstance(pred, _Volume) else np.asarray(pred, dtype=np.float64)
    g = gt.data if isinstance(gt, _Volume) else np.asarray(gt)
    wa = w.data if isinstance(w, _Volume) else np.asarray(w, dtype=np.float64)
    if p.shape != g.shape + (3,) or wa.shape != g.shape:
        raise GeometryError(f"shape mismatch: pred {p.shape}, gt {g.shape}, weights {wa.shape}")
    return p, g, wa


# ---------------------------------------------------------------------------
# cross-entropy


def weighted_ce_loss(pred, gt, w):
    """Weighted mean of ``-log p[gt]``, normalized by the total weight."""
    p, g, wa = _arrays(pred, gt, w)
    pg = np.take_along_axis(p, g[..., None].astype(np.intp), axis=-1)[..., 0]
    clamped = np.clip(pg, LOG_CLAMP, 1.0)
    total_w = wa.sum()
    loss = float((wa * -np.log(clamped)).sum() / total_w)
    inside = (pg > LOG_CLAMP) & (pg < 1.0)
    dpg = np.where(inside, -wa / (np.where(inside, pg, 1.0) * total_w), 0.0)
    grad = np.zeros(p.shape)
    np.put_along_axis(grad, g[..., None].astype(np.intp), dpg[..., None], axis=-1)
    return loss, grad


# ---------------------------------------------------------------------------
# soft Dice


def weighted_soft_dice_loss(pred, gt, w):
    """One minus the mean weighted soft Dice over artery and vein."""
    p, g, wa = _arrays(pred, gt, w)
    grad = np.zeros(p.shape)
    score = 0.0
    for c in VESSEL_CLASSES:
        pc = p[..., c]
        gc = (g == c).astype(np.float64)
        inter = (wa * pc * gc).sum()
        denom = (wa * pc).sum() + (wa * gc).sum() + DICE_EPS
        num = 2.0 * inter + DICE_EPS
        score += num / denom
        grad[..., c] = -0.5 * wa * (2.0 * gc * denom - num) / denom**2
    return 1.0 - score / 2.0, grad


# ---------------------------------------------------------------------------
# soft skeleton


_PLUS = ((0, 0, 0), (1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1))
_CUBE = tuple((dx, dy, dz) for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1))


def _neighbor_index(shape, offsets) -> np.ndarray:
    """(len(offsets), N) flat indices of shifted neighbors, edges replicated."""
    idx = np.pad(np.arange(int(np.prod(shape))).reshape(shape), 1, mode="edge")
    nx, ny, nz = shape
    return np.stack(
        [idx[1 + dx:1 + dx + nx, 1 + dy:1 + dy + ny, 1 + dz:1 + dz + nz].ravel() for dx, dy, dz in offsets]
    )


def _pool(x_flat, nbr, op):
    """Min or max over a neighborhood table; returns values and source indices."""
    vals = x_flat[nbr]
    pick = np.argmin(vals, axis=0) if op == "min" else np.argmax(vals, axis=0)
    src = nbr[pick, np.arange(nbr.shape[1])]
    return x_flat[src], src


class SoftSkeleton:
    """Differentiable morphological skeleton of a field in [0, 1].

    Erosion is the minimum over the center and its six face neighbors,
    dilation the maximum over the full 3x3x3 block; borders replicate.

    ``value`` holds the skeleton; ``backward(g)`` maps a gradient on the
    skeleton back to the input field.
    """

    def __init__(self, field, iters: int = 10):
        field = np.asarray(field, dtype=np.float64)
        if field.size and (not np.all(np.isfinite(field)) or field.min() < 0 or field.max() > 1):
            raise DomainError("soft skeleton input must lie in [0, 1]")
        if iters < 1:
            raise ConfigError("iters must be >= 1")
        self.shape = field.shape
        self.iters = int(iters)
        plus = _neighbor_index(field.shape, _PLUS)
        cube = _neighbor_index(field.shape, _CUBE)
        n = plus.shape[1]
        self._n = n
        # imgs[k+1] = erode(imgs[k]); opening of imgs[k] = dilate(imgs[k+1])
        imgs = [field.ravel()]
        erode_src = []
        for _ in range(self.iters + 1):
            v, s = _pool(imgs[-1], plus, "min")
            imgs.append(v)
            erode_src.append(s)
        dilate_src, deltas, active, skels = [], [], [], []
        skel = None
        for k in range(self.iters + 1):
            opened, s = _pool(imgs[k + 1], cube, "max")
            diff = imgs[k] - opened
            on = diff > 0
            delta = np.where(on, diff, 0.0)
            dilate_src.append(s)
            active.append(on)
            deltas.append(delta)
            if skel is None:
                skel = delta
            else:
                skels.append(skel)
                skel = skel + delta * (1.0 - skel)
        self._erode_src, self._dilate_src = erode_src, dilate_src
        self._deltas, self._active, self._skels = deltas, active, skels
        self.value = skel.reshape(self.shape)

    def backward(self, grad_out) -> np.ndarray:
        g = np.asarray(grad_out, dtype=np.float64).ravel()
        n, K = self._n, self.iters
        g_delta = [None] * (K + 1)
        for k in range(K, 0, -1):
            prev = self._skels[k - 1]
            g_delta[k] = g * (1.0 - prev)
            g = g * (1.0 - self._deltas[k])
        g_delta[0] = g
        g_img = [np.zeros(n) for _ in range(K + 2)]
        for k in range(K + 1):
            gi = np.where(self._active[k], g_delta[k], 0.0)
            g_img[k] += gi
            g_img[k + 1] -= np.bincount(self._dilate_src[k], weights=gi, minlength=n)
        for k in range(K, -1, -1):
            g_img[k] += np.bincount(self._erode_src[k], weights=g_img[k + 1], minlength=n)
        return g_img[0].reshape(self.shape)


def soft_skeleton(prob_class, iters: int = 10) -> np.ndarray:
    """Soft skeleton by iterated soft erosion and opening."""
    return SoftSkeleton(prob_class, iters).value


# ---------------------------------------------------------------------------
# clDice


def _skeleton_arrays(gt_skel, shape):
    out = {}
    for c in VESSEL_CLASSES:
        s = gt_skel.get(c) if gt_skel is not None else None
        if s is None:
            out[c] = np.zeros(shape)
        else:
            a = s.data if isinstance(s, _Volume) else np.asarray(s)
            if a.shape != shape:
                raise GeometryError(f"class {c} skeleton shape {a.shape} does not match {shape}")
            out[c] = (a != 0).astype(np.float64)
    return out


def weighted_cldice_loss(pred, gt, gt_skel: dict, w, cfg: WeightConfig | None = None):
    """One minus the mean weighted clDice over classes with a nonempty GT skeleton.

    Topology precision uses the soft skeleton of the predicted class
    probability; sensitivity uses the hard GT skeleton.
    """
    cfg = cfg or WeightConfig()
    p, g, wa = _arrays(pred, gt, w)
    skels = _skeleton_arrays(gt_skel, g.shape)
    grad = np.zeros(p.shape)
    used = [c for c in VESSEL_CLASSES if skels[c].any()]
    if not used:
        return 0.0, grad
    score = 0.0
    for c in used:
        pc, gc, kc = p[..., c], (g == c).astype(np.float64), skels[c]
        ss = SoftSkeleton(pc, cfg.soft_skel_iters)
        S = ss.value
        n_prec, d_prec = (wa * S * gc).sum(), (wa * S).sum()
        t_prec = n_prec / d_prec if d_prec > 0 else 0.0
        d_sens = (wa * kc).sum()
        t_sens = (wa * kc * pc).sum() / d_sens
        s = t_prec + t_sens + CLDICE_EPS
        score += 2.0 * t_prec * t_sens / s
        df_dprec = 2.0 * t_sens * (t_sens + CLDICE_EPS) / s**2
        df_dsens = 2.0 * t_prec * (t_prec + CLDICE_EPS) / s**2
        dS = wa * (gc * d_prec - n_prec) / d_prec**2 if d_prec > 0 else np.zeros(S.shape)
        grad[..., c] = -(df_dprec * ss.backward(dS) + df_dsens * wa * kc / d_sens) / len(used)
    return 1.0 - score / len(used), grad


# ---------------------------------------------------------------------------
# composite


def composite_loss(pred, gt: LabelVolume, gt_skels: dict, lung_mask: LabelVolume, cfg: WeightConfig | None = None):
    """``ce + dice + lambda_cldice * cldice`` with kind-specific weight maps.

    Returns ``(total, gradient, breakdown)``; ``breakdown`` maps term names
    to their values.
    """
    cfg = cfg or WeightConfig()
    if isinstance(pred, ProbVolume):
        require_same_geometry(pred, gt, names=["pred", "gt"])
    maps = {k: build_weight_map(gt, gt_skels, lung_mask, cfg, k) for k in WeightKind}
    ce, g_ce = weighted_ce_loss(pred, gt, maps[WeightKind.CE])
    dice, g_dice = weighted_soft_dice_loss(pred, gt, maps[WeightKind.DICE])
    cldice, g_cl = weighted_cldice_loss(pred, gt, gt_skels, maps[WeightKind.CLDICE], cfg)
    total = ce + dice + cfg.lambda_cldice * cldice
    grad = g_ce + g_dice + cfg.lambda_cldice * g_cl
    breakdown = {"ce": ce, "dice": dice, "cldice": cldice, "lambda_cldice": cfg.lambda_cldice, "total": total}
    return total, grad, breakdown
