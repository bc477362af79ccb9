"""Segmentation and grading metrics: Dice, average symmetric surface
distance, macro-average MSE over grades, and cohort report generation.

Conventions (pinned by tests):
  * Dice of two empty masks is 1.0.
  * ASSD is undefined when either mask is empty; cohort evaluation reports
    such cases as missing values rather than zeros.
  * Surface voxels are foreground voxels with at least one face-adjacent
    (6-connectivity) background voxel; the array border counts as background.
  * MAMSE averages the per-grade MSE over the grades present in the truth.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import MsfusionError, ValidationError

STRUCTURES = {"vs": 1, "cochlea": 2}


class EmptyMaskError(MsfusionError):
    """ASSD requested for an empty mask."""


def dice(pred: np.ndarray, truth: np.ndarray) -> float:
    """2|A∩B| / (|A|+|B|); 1.0 when both masks are empty."""
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if pred.shape != truth.shape:
        raise ValidationError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    total = int(pred.sum()) + int(truth.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, truth).sum()) / total


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Indices (N, 3) of 6-connectivity surface voxels."""
    mask = np.asarray(mask).astype(bool)
    if not mask.any():
        return np.empty((0, mask.ndim), dtype=np.int64)
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    eroded = ndimage.binary_erosion(mask, structure=structure, border_value=0)
    return np.argwhere(mask & ~eroded)


def assd(pred: np.ndarray, truth: np.ndarray, spacing) -> float:
    """Average symmetric surface distance in mm.

    Mean distance from each surface voxel of one mask to the nearest surface
    voxel of the other, averaged over both directions.
    """
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if pred.shape != truth.shape:
        raise ValidationError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    if not pred.any() or not truth.any():
        raise EmptyMaskError("ASSD is undefined for an empty mask")
    sp = np.asarray(spacing, dtype=np.float64)
    pts_p = surface_voxels(pred) * sp
    pts_t = surface_voxels(truth) * sp
    d_pt = cKDTree(pts_t).query(pts_p)[0]
    d_tp = cKDTree(pts_p).query(pts_t)[0]
    return float((d_pt.mean() + d_tp.mean()) / 2.0)


def mamse(pred_grades, true_grades) -> float:
    """Macro average over true grades of the per-grade MSE."""
    pred = np.asarray(pred_grades, dtype=np.float64)
    true = np.asarray(true_grades, dtype=np.float64)
    if pred.shape != true.shape or pred.ndim != 1:
        raise ValidationError("grade vectors must be 1-D and the same length")
    if pred.size == 0:
        raise ValidationError("grade vectors are empty")
    grades = np.unique(true)
    per_grade = [np.mean((pred[true == g] - g) ** 2) for g in grades]
    return float(np.mean(per_grade))


# ---------------------------------------------------------------------------
# Cohort evaluation and reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CaseMetric:
    subject_id: str
    structure: str
    dice: float
    assd_mm: float | None


@dataclass(frozen=True)
class MetricReport:
    per_case: list[CaseMetric]
    aggregate: dict
    koos: dict | None
    missing: list[str]


def _aggregate(per_case: list[CaseMetric]) -> dict:
    out = {}
    for structure in STRUCTURES:
        rows = [c for c in per_case if c.structure == structure]
        dices = np.array([c.dice for c in rows], dtype=np.float64)
        assds = np.array([c.assd_mm for c in rows if c.assd_mm is not None], dtype=np.float64)
        out[structure] = {
            "n": len(rows),
            "dice_mean": float(dices.mean()) if rows else None,
            "dice_std": float(dices.std()) if rows else None,
            "assd_mean": float(assds.mean()) if assds.size else None,
            "assd_std": float(assds.std()) if assds.size else None,
            "assd_missing": len(rows) - int(assds.size),
        }
    return out


def evaluate_cohort(
    pred_masks: dict[str, np.ndarray],
    true_masks: dict[str, np.ndarray],
    spacing,
    pred_grades: dict[str, int] | None = None,
    true_grades: dict[str, int] | None = None,
) -> MetricReport:
    """Per-case Dice/ASSD for VS and cochlea plus optional grading metrics.

    Subjects present on only one side are listed in `missing` and excluded;
    the run continues.
    """
    shared = sorted(set(pred_masks) & set(true_masks))
    missing = sorted(set(pred_masks) ^ set(true_masks))
    per_case = []
    for sid in shared:
        pred, true = pred_masks[sid], true_masks[sid]
        for structure, label in STRUCTURES.items():
            p = pred == label
            t = true == label
            try:
                a = assd(p, t, spacing)
            except EmptyMaskError:
                a = None
            per_case.append(CaseMetric(sid, structure, dice(p, t), a))

    koos = None
    if pred_grades and true_grades:
        sids = sorted(set(pred_grades) & set(true_grades))
        missing += sorted(set(pred_grades) ^ set(true_grades))
        pred_v = np.array([pred_grades[s] for s in sids])
        true_v = np.array([true_grades[s] for s in sids])
        confusion = np.zeros((4, 4), dtype=int)
        for t, p in zip(true_v, pred_v):
            confusion[t - 1][p - 1] += 1
        koos = {
            "n": len(sids),
            "mamse": mamse(pred_v, true_v),
            "per_grade_mse": {
                int(g): float(np.mean((pred_v[true_v == g] - g) ** 2.0))
                for g in np.unique(true_v)
            },
            "confusion": confusion.tolist(),
        }
    return MetricReport(per_case, _aggregate(per_case), koos, missing)


def write_report(report: MetricReport, out_dir) -> None:
    """Serialize as metrics.json + per_case.csv."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "per_case": [asdict(c) for c in report.per_case],
        "aggregate": report.aggregate,
        "koos": report.koos,
        "missing": report.missing,
    }
    (out_dir / "metrics.json").write_text(json.dumps(payload, indent=2) + "\n")
    with open(out_dir / "per_case.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["subject_id", "structure", "dice", "assd_mm"])
        for c in report.per_case:
            w.writerow([c.subject_id, c.structure, f"{c.dice:.6f}",
                        "" if c.assd_mm is None else f"{c.assd_mm:.6f}"])


def load_report(path) -> MetricReport:
    """Parse metrics.json and verify the aggregate is recomputable."""
    payload = json.loads(Path(path).read_text())
    per_case = [CaseMetric(**c) for c in payload["per_case"]]
    recomputed = _aggregate(per_case)
    for structure, stats in recomputed.items():
        stored = payload["aggregate"][structure]
        for key, val in stats.items():
            got = stored.get(key)
            if val is None or got is None:
                if val != got:
                    raise ValidationError(f"aggregate mismatch for {structure}.{key}")
            elif abs(val - got) > 1e-9:
                raise ValidationError(f"aggregate mismatch for {structure}.{key}: {got} != {val}")
    return MetricReport(per_case, payload["aggregate"], payload["koos"], payload["missing"])


def write_summary(rows: dict[str, MetricReport], path) -> None:
    """One-line-per-variant summary table (mean ± std per structure/metric)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    def fmt(mean, std):
        if mean is None:
            return "n/a"
        return f"{mean:.4f}±{std:.4f}"

    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["method", "vs_dice", "vs_assd", "cochlea_dice", "cochlea_assd", "mamse"])
        for name, rep in rows.items():
            vs, co = rep.aggregate["vs"], rep.aggregate["cochlea"]
            w.writerow([
                name,
                fmt(vs["dice_mean"], vs["dice_std"]),
                fmt(vs["assd_mean"], vs["assd_std"]),
                fmt(co["dice_mean"], co["dice_std"]),
                fmt(co["assd_mean"], co["assd_std"]),
                "" if rep.koos is None else f"{rep.koos['mamse']:.4f}",
            ])
