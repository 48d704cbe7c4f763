"""Overlap and centerline metrics per vessel class.

Undefined values (empty denominators) are ``None`` and print as ``NA``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .skeleton import skeletonize
from .volume import CLASS_NAMES, LabelVolume, _Volume, require_same_geometry
from .errors import GeometryError

METRIC_NAMES = ("dice", "recall", "cl_dice", "cl_recall")
CSV_HEADER = "case_id,class,metric,value"


def _pair(pred, gt):
    if isinstance(pred, _Volume) and isinstance(gt, _Volume):
        require_same_geometry(pred, gt, names=["pred", "gt"])
    p = np.asarray(pred.data if isinstance(pred, _Volume) else pred) != 0
    g = np.asarray(gt.data if isinstance(gt, _Volume) else gt) != 0
    if p.shape != g.shape:
        raise GeometryError(f"pred shape {p.shape} does not match gt shape {g.shape}")
    return p, g


def dice(pred, gt):
    """2|P & G| / (|P| + |G|); None when both are empty."""
    p, g = _pair(pred, gt)
    denom = int(p.sum()) + int(g.sum())
    return None if denom == 0 else 2.0 * int((p & g).sum()) / denom


def recall(pred, gt):
    """|P & G| / |G|; None when G is empty."""
    p, g = _pair(pred, gt)
    n = int(g.sum())
    return None if n == 0 else int((p & g).sum()) / n


def _skel(mask):
    return skeletonize(mask).data != 0


def _tsens(p, g, skel_g=None):
    sg = _skel(g) if skel_g is None else skel_g
    n = int(sg.sum())
    return None if n == 0 else int((sg & p).sum()) / n


def cl_recall(pred, gt, gt_skeleton=None):
    """Fraction of GT skeleton voxels covered by the prediction; None if that skeleton is empty."""
    p, g = _pair(pred, gt)
    return _tsens(p, g, gt_skeleton)


def cl_dice(pred, gt, pred_skeleton=None, gt_skeleton=None):
    """Harmonic mean of topology precision and sensitivity; None if either skeleton is empty."""
    p, g = _pair(pred, gt)
    sp = _skel(p) if pred_skeleton is None else pred_skeleton
    tprec = _tsens(g, p, sp)
    tsens = _tsens(p, g, gt_skeleton)
    if tprec is None or tsens is None:
        return None
    if tprec + tsens == 0:
        return 0.0
    return 2.0 * tprec * tsens / (tprec + tsens)


@dataclass
class ClassMetrics:
    dice: float | None
    recall: float | None
    cl_dice: float | None
    cl_recall: float | None
    pred_voxels: int
    gt_voxels: int
    pred_skeleton_voxels: int
    gt_skeleton_voxels: int

    def values(self) -> dict:
        return {m: getattr(self, m) for m in METRIC_NAMES}


@dataclass
class MetricReport:
    case_id: str
    classes: dict = field(default_factory=dict)  # class name -> ClassMetrics

    def rows(self) -> list[str]:
        """Delimited records in the order class, metric."""
        out = []
        for name, cm in self.classes.items():
            for metric in METRIC_NAMES:
                out.append(f"{self.case_id},{name},{metric},{format_value(getattr(cm, metric))}")
            for count in ("pred_voxels", "gt_voxels", "pred_skeleton_voxels", "gt_skeleton_voxels"):
                out.append(f"{self.case_id},{name},{count},{getattr(cm, count)}")
        return out

    def defined_values(self) -> list[float]:
        return [v for cm in self.classes.values() for v in cm.values().values() if v is not None]


def format_value(v) -> str:
    return "NA" if v is None else repr(float(v))


def evaluate(pred: LabelVolume, gt: LabelVolume, case_id: str = "case") -> MetricReport:
    """All four metrics for artery and vein."""
    require_same_geometry(pred, gt, names=["pred", "gt"])
    report = MetricReport(case_id)
    for cls, name in CLASS_NAMES.items():
        p, g = pred.data == cls, gt.data == cls
        sp, sg = _skel(p), _skel(g)
        report.classes[name] = ClassMetrics(
            dice=dice(p, g),
            recall=recall(p, g),
            cl_dice=cl_dice(p, g, sp, sg),
            cl_recall=cl_recall(p, g, sg),
            pred_voxels=int(p.sum()),
            gt_voxels=int(g.sum()),
            pred_skeleton_voxels=int(sp.sum()),
            gt_skeleton_voxels=int(sg.sum()),
        )
    return report
