import csv
import logging
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import NamedTuple

import numpy as np
import numpy.typing as npt
from scipy import ndimage
from scipy.spatial import cKDTree

from app.runtime import EvaluationError, ShapeError
from app.volume import EXTENSIONS, SEG_SUFFIX, SegVolume, Spacing, find_file, list_cases, read_segmentation

log = logging.getLogger(__name__)

type Mask = npt.NDArray[np.bool_]


class Region(Enum):
    """In the column order of the summary tables"""

    ET = "ET"
    WT = "WT"
    TC = "TC"


region_labels = {
    Region.WT: (1, 2, 4),
    Region.TC: (1, 4),
    Region.ET: (4,),
}


class Metric(Enum):
    DICE = "Dice"
    SENSITIVITY = "Sensitivity"
    SPECIFICITY = "Specificity"
    HD95 = "Hausdorff95"


SUMMARY_ROWS = ("Mean", "StdDev", "Median", "25quantile", "75quantile")


def region_masks(seg: SegVolume) -> dict[Region, Mask]:
    return {r: np.isin(seg.data, region_labels[r]) for r in Region}


def check_same(pred: Mask, ref: Mask):
    if pred.shape != ref.shape:
        raise ShapeError(f"Prediction {pred.shape} and reference {ref.shape} differ")


def dice(pred: Mask, ref: Mask) -> float:
    check_same(pred, ref)
    total = int(pred.sum()) + int(ref.sum())
    if total == 0:
        return 1.0
    return 2 * int((pred & ref).sum()) / total


def sensitivity(pred: Mask, ref: Mask) -> float:
    check_same(pred, ref)
    positives = int(ref.sum())
    if positives == 0:
        return 1.0 if not pred.any() else 0.0
    return int((pred & ref).sum()) / positives


def specificity(pred: Mask, ref: Mask) -> float:
    check_same(pred, ref)
    negatives = int((~ref).sum())
    if negatives == 0:
        return 1.0 if pred.all() else 0.0
    return int((~pred & ~ref).sum()) / negatives


def surface(mask: Mask) -> Mask:
    """Foreground voxels with a background 6-neighbour; outside the grid counts as background"""
    structure = ndimage.generate_binary_structure(3, 1)
    return mask & ~ndimage.binary_erosion(mask, structure=structure, border_value=0)


def diagonal(shape: tuple[int, ...], spacing: Spacing) -> float:
    return math.sqrt(sum((n * s) ** 2 for n, s in zip(shape, spacing, strict=True)))


def closest_distances(src: npt.NDArray[np.intp], dst: npt.NDArray[np.intp], spacing: Spacing):
    """For each src voxel, the physical distance to the closest dst voxel"""
    scale = np.asarray(spacing, dtype=np.float64)
    _, nearest = cKDTree(dst * scale).query(src * scale)
    # Recompute from integer offsets so ties and rounding match a direct all-pairs search
    offsets = (src - dst[nearest]) * scale
    return np.sqrt((offsets**2).sum(axis=1))


def nearest_rank(values: npt.NDArray[np.float64], percent: int = 95) -> float:
    ordered = np.sort(values)
    rank = max(1, (percent * len(ordered) + 99) // 100)
    return float(ordered[rank - 1])


def hd95(pred: Mask, ref: Mask, spacing: Spacing = (1.0, 1.0, 1.0), penalty: float | None = None) -> float:
    """95th percentile of the pooled closest-surface distances in both directions"""
    check_same(pred, ref)
    if not pred.any() and not ref.any():
        return 0.0
    if not pred.any() or not ref.any():
        return penalty if penalty is not None else diagonal(pred.shape, spacing)

    ps, rs = np.argwhere(surface(pred)), np.argwhere(surface(ref))
    pooled = np.concatenate([closest_distances(ps, rs, spacing), closest_distances(rs, ps, spacing)])
    return nearest_rank(pooled)


class RegionScores(NamedTuple):
    dice: float
    sensitivity: float
    specificity: float
    hd95: float

    def value(self, metric: Metric) -> float:
        return self[list(Metric).index(metric)]


@dataclass(frozen=True)
class CaseMetrics:
    case_id: str
    scores: dict[Region, RegionScores]

    def value(self, metric: Metric, region: Region):
        return self.scores[region].value(metric)


def evaluate_case(
    pred: SegVolume,
    ref: SegVolume,
    spacing: Spacing | None = None,
    case_id: str = "",
    penalty: float | None = None,
) -> CaseMetrics:
    if pred.dims != ref.dims:
        raise ShapeError(f"{case_id}: prediction {pred.dims} and reference {ref.dims} differ")
    spacing = spacing or ref.spacing
    pm, rm = region_masks(pred), region_masks(ref)
    scores = {
        r: RegionScores(
            dice(pm[r], rm[r]),
            sensitivity(pm[r], rm[r]),
            specificity(pm[r], rm[r]),
            hd95(pm[r], rm[r], spacing, penalty),
        )
        for r in Region
    }
    log.debug("%s: %s", case_id, {r.value: round(s.dice, 4) for r, s in scores.items()})
    return CaseMetrics(case_id, scores)


class Stats(NamedTuple):
    """Fields in SUMMARY_ROWS order"""

    mean: float
    std: float
    median: float
    q25: float
    q75: float


type SummaryStats = dict[tuple[Metric, Region], Stats]


def describe(values: Sequence[float]) -> Stats:
    x = np.asarray(values, dtype=np.float64)
    q25, median, q75 = np.percentile(x, [25, 50, 75])
    return Stats(float(x.mean()), float(x.std()), float(median), float(q25), float(q75))


def summarize(rows: Sequence[CaseMetrics]) -> SummaryStats:
    if not rows:
        raise EvaluationError("<summary>", "No cases to summarize")
    return {(m, r): describe([row.value(m, r) for row in rows]) for m in Metric for r in Region}


class BoxStats(NamedTuple):
    minimum: float
    q1: float
    median: float
    q3: float
    maximum: float
    outliers: list[float]


def box_stats(values: Sequence[float]) -> BoxStats:
    """Whiskers reach the furthest values within 1.5 IQR of the quartiles; the rest are outliers"""
    x = np.sort(np.asarray(values, dtype=np.float64))
    q1, median, q3 = np.percentile(x, [25, 50, 75])
    reach = 1.5 * (q3 - q1)
    inside = x[(x >= q1 - reach) & (x <= q3 + reach)]
    outliers = x[(x < q1 - reach) | (x > q3 + reach)]
    return BoxStats(
        float(inside.min()), float(q1), float(median), float(q3), float(inside.max()), outliers.tolist()
    )


def fmt(value: float):
    return f"{value:.6f}"


def write_case_csv(rows: Iterable[CaseMetrics], path: Path | str):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["case_id", "region", *(m.value for m in Metric)])
        for row in rows:
            for r in Region:
                w.writerow([row.case_id, r.value, *(fmt(v) for v in row.scores[r])])


def summary_table(summary: SummaryStats) -> list[list[str]]:
    """Two header rows (metric groups, then regions) and one row per statistic"""
    columns = [(m, r) for m in Metric for r in Region]
    table = [
        ["", *(m.value for m, _ in columns)],
        ["", *(r.value for _, r in columns)],
    ]
    for i, label in enumerate(SUMMARY_ROWS):
        table.append([label, *(fmt(summary[c][i]) for c in columns)])
    return table


def write_summary_csv(summary: SummaryStats, path: Path | str):
    with open(path, "w", newline="") as f:
        csv.writer(f).writerows(summary_table(summary))


def write_boxplot_csv(rows: Sequence[CaseMetrics], path: Path | str):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["metric", "region", "min", "q1", "median", "q3", "max", "outliers"])
        for m in Metric:
            for r in Region:
                b = box_stats([row.value(m, r) for row in rows])
                outliers = " ".join(fmt(v) for v in b.outliers)
                w.writerow([m.value, r.value, *(fmt(v) for v in b[:5]), outliers])


def find_prediction(pred_dir: Path, case_id: str):
    """<case_id>.nii[.gz] written by predict, or a case directory like the reference one"""
    for ext in EXTENSIONS:
        if (path := pred_dir / f"{case_id}{ext}").exists():
            return path
    return find_file(pred_dir / case_id, case_id, SEG_SUFFIX)


def match_cases(pred_dir: Path | str, ref_dir: Path | str) -> list[tuple[str, Path, Path]]:
    """(case_id, prediction, reference) for every reference case; every one must have a prediction"""
    pred_dir, ref_dir = Path(pred_dir), Path(ref_dir)
    pairs = []
    for case_id in list_cases(ref_dir):
        if not (ref := find_file(ref_dir / case_id, case_id, SEG_SUFFIX)):
            continue
        if not (pred := find_prediction(pred_dir, case_id)):
            raise EvaluationError(case_id, f"No prediction in {pred_dir}")
        pairs.append((case_id, pred, ref))

    known = {case_id for case_id, _, _ in pairs}
    for path in sorted(pred_dir.glob("*.nii*")):
        case_id = path.name.split(".nii")[0]
        if case_id not in known:
            raise EvaluationError(case_id, f"No reference in {ref_dir}")
    if not pairs:
        raise EvaluationError("<all>", f"No reference segmentations in {ref_dir}")
    return pairs


def evaluate_dirs(
    pred_dir: Path | str,
    ref_dir: Path | str,
    penalty: float | None = None,
) -> list[CaseMetrics]:
    rows = []
    for case_id, pred, ref in match_cases(pred_dir, ref_dir):
        reference = read_segmentation(ref)
        rows.append(evaluate_case(read_segmentation(pred), reference, reference.spacing, case_id, penalty))
        log.info("%s: WT dice %.4f", case_id, rows[-1].value(Metric.DICE, Region.WT))
    return rows
