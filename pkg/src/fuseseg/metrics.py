"""Spacing-aware segmentation metrics: DSC, Hausdorff, average surface distance.

Distances are computed between surface voxel centers in physical (mm)
coordinates. Empty masks make the distance metrics undefined; such cases are
flagged and excluded from aggregation means rather than given sentinel values.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyMask, NoRecords, ShapeMismatch
from .volio import Mask


@dataclass
class MetricsRecord:
    case_id: str
    dsc: float
    hd_mm: float | None          # None when undefined (an empty mask)
    asd_mm: float | None
    empty_prediction: bool = False
    empty_ground_truth: bool = False


@dataclass
class AggregateReport:
    """Mean +/- std per metric (std is population, ddof=0), with fold breakdown."""

    records: list[MetricsRecord]
    fold_map: dict[str, int] | None = None
    stream: str = ""

    def _defined(self, key):
        vals = [getattr(r, key) for r in self.records]
        return [v for v in vals if v is not None]

    def mean_std(self, key: str) -> tuple[float, float, int]:
        vals = self._defined(key)
        if not vals:
            return (math.nan, math.nan, 0)
        arr = np.asarray(vals, dtype=np.float64)
        return (float(arr.mean()), float(arr.std(ddof=0)), len(vals))

    def undefined_count(self, key: str) -> int:
        return sum(1 for r in self.records if getattr(r, key) is None)

    def folds(self) -> list[int]:
        if not self.fold_map:
            return []
        return sorted(set(self.fold_map.values()))

    def fold_report(self, fold: int) -> "AggregateReport":
        recs = [r for r in self.records if self.fold_map.get(r.case_id) == fold]
        return AggregateReport(recs, None, self.stream)


def dsc(a: Mask, b: Mask) -> float:
    """2|A∩B| / (|A|+|B|); both empty counts as perfect overlap (1.0)."""
    if a.shape != b.shape:
        raise ShapeMismatch(f"mask shapes differ: {a.shape} vs {b.shape}")
    na, nb = a.count(), b.count()
    if na + nb == 0:
        return 1.0
    inter = int(np.logical_and(a.data, b.data).sum())
    return 2.0 * inter / (na + nb)


def surface_voxels(mask: Mask) -> np.ndarray:
    """Indices (n, 3) of foreground voxels with a background 6-neighbour.

    Out-of-bounds neighbours count as background, so voxels on the grid
    boundary are surface voxels.
    """
    data = mask.data
    padded = np.pad(data, 1, mode="constant", constant_values=False)
    interior = np.ones_like(data)
    for axis in range(3):
        lo = np.roll(padded, 1, axis=axis)[1:-1, 1:-1, 1:-1]
        hi = np.roll(padded, -1, axis=axis)[1:-1, 1:-1, 1:-1]
        interior = interior & lo & hi
    surf = data & ~interior
    return np.argwhere(surf)


def _surface_points_mm(mask: Mask, spacing) -> np.ndarray:
    idx = surface_voxels(mask)
    return idx.astype(np.float64) * np.asarray(spacing, dtype=np.float64)


def hausdorff(a: Mask, b: Mask, spacing) -> float:
    """max of the two directed surface distances, in mm."""
    if a.count() == 0 or b.count() == 0:
        raise EmptyMask("hausdorff undefined for an empty mask")
    pa = _surface_points_mm(a, spacing)
    pb = _surface_points_mm(b, spacing)
    d_ab = cKDTree(pb).query(pa)[0]
    d_ba = cKDTree(pa).query(pb)[0]
    return float(max(d_ab.max(), d_ba.max()))


def asd(pred: Mask, gt: Mask, spacing, symmetric: bool = False) -> float:
    """Mean distance from pred surface voxels to the nearest gt surface voxel.

    Directed pred -> gt by default; `symmetric` averages both directions.
    """
    if pred.count() == 0 or gt.count() == 0:
        raise EmptyMask("asd undefined for an empty mask")
    pp = _surface_points_mm(pred, spacing)
    pg = _surface_points_mm(gt, spacing)
    d_pg = cKDTree(pg).query(pp)[0]
    if not symmetric:
        return float(d_pg.mean())
    d_gp = cKDTree(pp).query(pg)[0]
    return float(0.5 * (d_pg.mean() + d_gp.mean()))


def evaluate_case(pred: Mask, gt: Mask, case_id: str = "") -> MetricsRecord:
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs gt {gt.shape}")
    spacing = gt.spacing
    empty_p = pred.count() == 0
    empty_g = gt.count() == 0
    rec = MetricsRecord(
        case_id=case_id,
        dsc=dsc(pred, gt),
        hd_mm=None,
        asd_mm=None,
        empty_prediction=empty_p,
        empty_ground_truth=empty_g,
    )
    if not empty_p and not empty_g:
        rec.hd_mm = hausdorff(pred, gt, spacing)
        rec.asd_mm = asd(pred, gt, spacing)
    return rec


def aggregate(
    records: Sequence[MetricsRecord],
    fold_map: Mapping[str, int] | None = None,
    stream: str = "",
) -> AggregateReport:
    if not records:
        raise NoRecords("no metrics records to aggregate")
    return AggregateReport(list(records), dict(fold_map) if fold_map else None, stream)


# --------------------------------------------------------------------------
# formatting (3 decimals for DSC, 1 decimal for mm metrics)

def fmt_mean_std(mean: float, std: float, decimals: int) -> str:
    if math.isnan(mean):
        return "undefined"
    return f"{mean:.{decimals}f}±{std:.{decimals}f}"


def report_lines(reports: Sequence[AggregateReport], header: str = "") -> list[str]:
    """Human-readable table, one row per report (stream)."""
    lines = []
    if header:
        lines.append(header)
    lines.append("std convention: population (ddof=0); undefined metrics excluded from means")
    lines.append(f"{'stream':<10} {'DSC':>16} {'HD (mm)':>16} {'ASD (mm)':>16} {'n':>4} {'undef':>6}")
    for rep in reports:
        d = fmt_mean_std(*rep.mean_std("dsc")[:2], 3)
        h = fmt_mean_std(*rep.mean_std("hd_mm")[:2], 1)
        a = fmt_mean_std(*rep.mean_std("asd_mm")[:2], 1)
        n = len(rep.records)
        undef = rep.undefined_count("hd_mm")
        lines.append(f"{rep.stream:<10} {d:>16} {h:>16} {a:>16} {n:>4} {undef:>6}")
    return lines


def write_records_csv(records: Sequence[MetricsRecord], path, stream: str = "",
                      fold_map: Mapping[str, int] | None = None) -> None:
    path = Path(path)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["case_id", "stream", "fold", "dsc", "hd_mm", "asd_mm",
                    "empty_prediction", "empty_ground_truth"])
        for r in records:
            fold = fold_map.get(r.case_id, "") if fold_map else ""
            w.writerow([
                r.case_id, stream, fold,
                f"{r.dsc:.6f}",
                "" if r.hd_mm is None else f"{r.hd_mm:.6f}",
                "" if r.asd_mm is None else f"{r.asd_mm:.6f}",
                int(r.empty_prediction), int(r.empty_ground_truth),
            ])
