"""Depth, normal and consistency metrics plus latent PCA redundancy.

Dataset figures are per-image metrics averaged over images.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geometry import GeometryError, Intrinsics, MetricDepth, NormalMap, align_affine, depth_normal_inconsistency

log = logging.getLogger(__name__)

DELTA1_THRESHOLD = 1.25
NORMAL_THRESHOLD_DEG = 11.25


@dataclass
class DepthReport:
    abs_rel: float
    delta1: float
    sample_count: int = 1
    valid_pixel_count: int = 0


@dataclass
class NormalReport:
    mean_deg: float
    pct_below_11_25: float
    sample_count: int = 1
    valid_pixel_count: int = 0


@dataclass
class ConsistencyReport:
    mean_e: float
    per_sample: list[float] = field(default_factory=list)
    skipped: int = 0


def depth_metrics(pred_inv_depth, gt: MetricDepth, align: bool = True, pred_valid=None) -> DepthReport:
    """AbsRel and delta1 of an affine-invariant inverse-depth prediction.

    With ``align=False`` the prediction is taken as metric depth directly.
    """
    pred = np.asarray(pred_inv_depth, dtype=np.float64)
    if align:
        est = align_affine(pred, gt, pred_valid=pred_valid)
        mask, d_hat = est.valid, est.values
    else:
        mask = gt.valid & np.isfinite(pred) & (pred > 0)
        if pred_valid is not None:
            mask &= pred_valid
        d_hat = pred
    if not mask.any():
        raise GeometryError("depth_metrics: empty joint validity mask")
    d, p = gt.values[mask], d_hat[mask]
    ratio = np.maximum(p / d, d / p)
    return DepthReport(
        abs_rel=float(np.mean(np.abs(p - d) / d)),
        delta1=float(100.0 * np.mean(ratio < DELTA1_THRESHOLD)),
        valid_pixel_count=int(mask.sum()),
    )


def angular_errors(pred: NormalMap, gt: NormalMap) -> np.ndarray:
    joint = pred.valid & gt.valid
    if not joint.any():
        raise GeometryError("normal_metrics: empty joint validity mask")
    dots = np.sum(pred.vectors[:, joint] * gt.vectors[:, joint], axis=0)
    return np.degrees(np.arccos(np.clip(dots, -1.0, 1.0)))


def normal_metrics(pred: NormalMap, gt: NormalMap) -> NormalReport:
    ang = angular_errors(pred, gt)
    return NormalReport(
        mean_deg=float(ang.mean()),
        pct_below_11_25=float(100.0 * np.mean(ang < NORMAL_THRESHOLD_DEG)),
        valid_pixel_count=int(ang.size),
    )


def _average(reports: Sequence, cls):
    if not reports:
        raise ValueError("no reports to average")
    keys = [k for k in asdict(reports[0]) if k not in ("sample_count", "valid_pixel_count")]
    values = {k: float(np.mean([getattr(r, k) for r in reports])) for k in keys}
    return cls(**values, sample_count=len(reports), valid_pixel_count=sum(r.valid_pixel_count for r in reports))


def mean_depth_report(reports: Sequence[DepthReport]) -> DepthReport:
    return _average(reports, DepthReport)


def mean_normal_report(reports: Sequence[NormalReport]) -> NormalReport:
    return _average(reports, NormalReport)


def prediction_inconsistency(pred_inv_depth, pred_normal: NormalMap, gt: MetricDepth, K: Intrinsics, pred_valid=None) -> float:
    """Depth-normal inconsistency of a prediction after aligning its depth to ``gt``."""
    depth = align_affine(pred_inv_depth, gt, pred_valid=pred_valid)
    return depth_normal_inconsistency(depth, pred_normal, K)[0]


def consistency_table(items: Iterable[tuple]) -> ConsistencyReport:
    """Mean inconsistency over ``(pred_inv_depth, pred_normal, gt_depth, K)`` items.

    Items that fail (empty masks, rank-deficient alignment) are skipped and counted.
    """
    per_sample, skipped = [], 0
    for i, item in enumerate(items):
        try:
            per_sample.append(prediction_inconsistency(*item))
        except GeometryError as err:
            skipped += 1
            log.warning("consistency: skipping item %d: %s", i, err)
    if not per_sample:
        raise GeometryError(f"consistency_table: all {skipped} items failed")
    return ConsistencyReport(float(np.mean(per_sample)), per_sample, skipped)


def latent_pca_redundancy(latents, variance_target: float = 0.95) -> int:
    """Smallest number of principal channel directions reaching ``variance_target``.

    ``latents`` is an array or collection of [C,h,w] latents; every spatial
    position is one C-dimensional observation.
    """
    if not 0.0 < variance_target <= 1.0:
        raise ValueError(f"variance_target must lie in (0, 1], got {variance_target}")
    arr = np.stack([np.asarray(z, dtype=np.float64) for z in latents])
    if len(arr) < 2:
        raise ValueError("latent_pca_redundancy needs at least two latents")
    c = arr.shape[1]
    vectors = np.moveaxis(arr, 1, -1).reshape(-1, c)
    eig = np.clip(np.linalg.eigvalsh(np.cov(vectors, rowvar=False)), 0.0, None)[::-1]
    total = eig.sum()
    if total <= 0:
        raise ValueError("latents have zero variance")
    cum = np.cumsum(eig) / total
    # tolerance absorbs rounding in the cumulative sum
    return int(np.searchsorted(cum, variance_target - 1e-12) + 1)


def write_json(path: str | Path, report) -> None:
    Path(path).write_text(json.dumps(asdict(report), indent=2, sort_keys=True) + "\n")


def write_csv(path: str | Path, rows: Sequence[dict]) -> None:
    """Aligned-column CSV: every cell padded to its column width."""
    if not rows:
        raise ValueError("no rows to write")
    keys = list(rows[0])
    cells = [[_fmt(r[k]) for k in keys] for r in rows]
    widths = [max(len(k), *(len(row[i]) for row in cells)) for i, k in enumerate(keys)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([k.rjust(wd) for k, wd in zip(keys, widths)])
        for row in cells:
            writer.writerow([c.rjust(wd) for c, wd in zip(row, widths)])


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


__all__ = [
    "ConsistencyReport",
    "DepthReport",
    "NormalReport",
    "angular_errors",
    "consistency_table",
    "depth_metrics",
    "latent_pca_redundancy",
    "mean_depth_report",
    "mean_normal_report",
    "normal_metrics",
    "prediction_inconsistency",
    "write_csv",
    "write_json",
]
