"""Overlap and surface-distance metrics, aggregation, metrics.csv and error maps."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import ArgumentError, ShapeError

REGIONS = ("et", "wt", "tc")
METRICS = ("dice", "sens", "spec", "hd95")
CSV_COLUMNS = ["case_id"] + [f"{m}_{r}" for m in METRICS for r in REGIONS]

# 6-connected structuring element
_FACE = ndimage.generate_binary_structure(3, 1)


def _pair(pred, truth):
    p = np.asarray(getattr(pred, "data", pred)) > 0
    t = np.asarray(getattr(truth, "data", truth)) > 0
    if p.shape != t.shape:
        raise ShapeError(f"grid mismatch: {p.shape} vs {t.shape}")
    return p, t


def dice_score(pred, truth):
    p, t = _pair(pred, truth)
    sp, st = int(p.sum()), int(t.sum())
    if sp == 0 and st == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(p & t)) / (sp + st)


def sensitivity_specificity(pred, truth):
    p, t = _pair(pred, truth)
    tp = int(np.count_nonzero(p & t))
    fn = int(np.count_nonzero(~p & t))
    fp = int(np.count_nonzero(p & ~t))
    tn = int(np.count_nonzero(~p & ~t))
    sens = tp / (tp + fn) if tp + fn else 1.0
    spec = tn / (tn + fp) if tn + fp else 1.0
    return sens, spec


def surface_voxels(mask):
    """Mask voxels with at least one face neighbour outside the mask (or the grid)."""
    mask = np.asarray(mask, dtype=bool)
    inner = ndimage.binary_erosion(mask, structure=_FACE, border_value=0)
    return mask & ~inner


def _nearest_rank_p95(d):
    d = np.sort(d)
    k = (95 * len(d) + 99) // 100  # ceil(0.95 n), 1-based
    return float(d[k - 1])


def hausdorff95(pred, truth, spacing_mm=(1.0, 1.0, 1.0)):
    """Symmetric 95th-percentile surface distance in mm; ``None`` when either mask is empty."""
    p, t = _pair(pred, truth)
    if not p.any() or not t.any():
        return None
    sp = np.asarray(spacing_mm, dtype=np.float64)
    a = np.argwhere(surface_voxels(p)) * sp
    b = np.argwhere(surface_voxels(t)) * sp
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return max(_nearest_rank_p95(d_ab), _nearest_rank_p95(d_ba))


@dataclass
class CaseMetrics:
    case_id: str
    dice: dict
    sens: dict
    spec: dict
    hd95: dict

    def row(self):
        out = [self.case_id]
        for m in METRICS:
            out += [getattr(self, m)[r] for r in REGIONS]
        return out


def case_metrics(case_id, pred_regions, truth_regions, spacing_mm=(1.0, 1.0, 1.0)):
    """Metrics for all three regions; region arguments are RegionMasks-like objects."""
    vals = {m: {} for m in METRICS}
    for r in REGIONS:
        p, t = getattr(pred_regions, r), getattr(truth_regions, r)
        vals["dice"][r] = dice_score(p, t)
        vals["sens"][r], vals["spec"][r] = sensitivity_specificity(p, t)
        vals["hd95"][r] = hausdorff95(p, t, spacing_mm)
    return CaseMetrics(case_id, **vals)


def _stats(values):
    v = np.asarray(values, dtype=np.float64)
    n = len(v)
    mean = float(v.mean())
    # n == 1 has no sample spread; report 0
    std = float(v.std(ddof=1)) if n > 1 else 0.0
    return mean, std, float(np.median(v))


@dataclass
class AggregateReport:
    cases: list
    mean: dict = field(default_factory=dict)
    std: dict = field(default_factory=dict)
    median: dict = field(default_factory=dict)
    excluded: dict = field(default_factory=dict)

    def column(self, metric, region):
        return self.mean[f"{metric}_{region}"]


def aggregate(cases) -> AggregateReport:
    """Mean, sample std (n-1) and median per column; undefined HD95 values are excluded."""
    cases = list(cases)
    if not cases:
        raise ArgumentError("aggregate needs at least one case")
    rep = AggregateReport(cases)
    for m in METRICS:
        for r in REGIONS:
            key = f"{m}_{r}"
            vals = [getattr(c, m)[r] for c in cases]
            defined = [v for v in vals if v is not None]
            rep.excluded[key] = len(vals) - len(defined)
            if defined:
                rep.mean[key], rep.std[key], rep.median[key] = _stats(defined)
            else:
                rep.mean[key] = rep.std[key] = rep.median[key] = None
    return rep


def _fmt(v):
    return "NA" if v is None else repr(float(v))


def metrics_csv(report: AggregateReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for c in report.cases:
        row = c.row()
        w.writerow([row[0]] + [_fmt(v) for v in row[1:]])
    for label, table in (("mean", report.mean), ("std", report.std), ("median", report.median)):
        w.writerow([label] + [_fmt(table[col]) for col in CSV_COLUMNS[1:]])
    return buf.getvalue()


def parse_metrics_csv(text):
    """Returns ``(case_rows, aggregate_rows)`` as dicts of floats (``None`` for NA)."""
    rows = list(csv.DictReader(io.StringIO(text)))
    conv = lambda r: {k: (None if v == "NA" else float(v)) for k, v in r.items() if k != "case_id"}  # noqa: E731
    cases = {r["case_id"]: conv(r) for r in rows if r["case_id"] not in ("mean", "std", "median")}
    aggs = {r["case_id"]: conv(r) for r in rows if r["case_id"] in ("mean", "std", "median")}
    return cases, aggs


def error_map(pairs):
    """Voxelwise disagreement rate ``mean |pred - truth|`` over cases on a common grid."""
    pairs = list(pairs)
    if not pairs:
        raise ArgumentError("error_map needs at least one case")
    shape = None
    acc = None
    for pred, truth in pairs:
        p, t = _pair(pred, truth)
        if shape is None:
            shape = p.shape
            acc = np.zeros(shape, dtype=np.float64)
        elif p.shape != shape:
            raise ShapeError(f"grid mismatch: {p.shape} vs {shape}")
        acc += p ^ t
    return acc / len(pairs)


ERROR_MAP_NOTE = "voxelwise disagreement rate |pred - truth| averaged over cases (stand-in for voxelwise Dice)"
