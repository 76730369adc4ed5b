"""Overlap metrics, L1 Hausdorff distance, and the weighted challenge score.

score = 0.4 * Dice + 0.3 * IoU + 0.3 * (1 - normalized Hausdorff)

Distances are exact voxel-grid L1 values computed with a taxicab distance
transform; the empty-vs-empty convention is Dice = IoU = 1 and distance 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DataError, NumericError, UndefinedMetricError
from .volume import MaskVolume, VoxelSet

W_DICE = 0.4
W_IOU = 0.3
W_HD = 0.3


@dataclass(frozen=True)
class ScoreWeights:
    w_dice: float = W_DICE
    w_iou: float = W_IOU
    w_hd: float = W_HD


@dataclass(frozen=True)
class MetricsReport:
    dice: float
    iou: float
    hd_raw: float
    hd_norm: float
    score: float

    def csv_row(self, case: str) -> str:
        return (
            f"{case},{self.dice:.6f},{self.iou:.6f},{self.hd_raw:.6f},"
            f"{self.hd_norm:.6f},{self.score:.6f}"
        )


CSV_HEADER = "case,dice,iou,hd_raw,hd_norm,score"


def _overlap_counts(a: MaskVolume, b: MaskVolume) -> tuple[int, int, int]:
    if a.dims != b.dims:
        raise DataError(f"mask dims differ: {a.dims} vs {b.dims}")
    inter = int(np.count_nonzero(a.data & b.data))
    return inter, a.voxel_count(), b.voxel_count()


def dice(a: MaskVolume, b: MaskVolume) -> float:
    """2*|A intersect B| / (|A| + |B|); 1.0 when both masks are empty."""
    inter, na, nb = _overlap_counts(a, b)
    if na + nb == 0:
        return 1.0
    return 2.0 * inter / (na + nb)


def iou(a: MaskVolume, b: MaskVolume) -> float:
    """|A intersect B| / |A union B|; 1.0 when both masks are empty."""
    inter, na, nb = _overlap_counts(a, b)
    union = na + nb - inter
    if union == 0:
        return 1.0
    return inter / union


def _joint_dims(a: VoxelSet, b: VoxelSet) -> tuple[int, int, int]:
    # L1 geodesics stay inside the bounding box of their endpoints, so a grid
    # covering both sets yields exact cross distances.
    return tuple(max(x, y) for x, y in zip(a.dims, b.dims))  # type: ignore[return-value]


def _l1_distance_field(vs: VoxelSet, dims: tuple[int, int, int]) -> np.ndarray:
    # Exact taxicab distance from every grid voxel to the nearest set voxel.
    occupied = np.zeros(dims, dtype=bool)
    x, y, z = vs.coords.T
    occupied[z, y, x] = True
    return ndimage.distance_transform_cdt(~occupied, metric="taxicab")


def min_l1_separation(a: VoxelSet, b: VoxelSet) -> int:
    """Minimum L1 distance over all cross pairs of the two sets."""
    if len(a) == 0 or len(b) == 0:
        raise UndefinedMetricError("min_l1_separation needs two nonempty sets")
    dist_to_b = _l1_distance_field(b, _joint_dims(a, b))
    x, y, z = a.coords.T
    return int(dist_to_b[z, y, x].min())


def hausdorff_l1(a: VoxelSet, b: VoxelSet) -> int:
    """Symmetric Hausdorff distance with L1 ground distance."""
    if len(a) == 0 or len(b) == 0:
        raise UndefinedMetricError("hausdorff_l1 needs two nonempty sets")
    dims = _joint_dims(a, b)
    ax, ay, az = a.coords.T
    bx, by, bz = b.coords.T
    a_to_b = _l1_distance_field(b, dims)[az, ay, ax].max()
    b_to_a = _l1_distance_field(a, dims)[bz, by, bx].max()
    return int(max(a_to_b, b_to_a))


def max_l1_extent(dims: tuple[int, int, int]) -> int:
    d, h, w = dims
    return (d - 1) + (h - 1) + (w - 1)


def normalize_hd(hd_raw: float, dims: tuple[int, int, int]) -> float:
    """Distance over the maximum possible L1 distance in the grid, clamped."""
    if hd_raw < 0:
        raise DataError(f"hd_raw must be >= 0, got {hd_raw}")
    divisor = max_l1_extent(dims)
    if divisor == 0:
        if hd_raw == 0:
            return 0.0
        raise NumericError(f"cannot normalize distance {hd_raw} in a 1x1x1 grid")
    return float(np.clip(hd_raw / divisor, 0.0, 1.0))


def challenge_score(dice_val: float, iou_val: float, hd_norm: float) -> float:
    """Weighted sum 0.4*dice + 0.3*iou + 0.3*(1 - hd_norm)."""
    for name, val in (("dice", dice_val), ("iou", iou_val), ("hd_norm", hd_norm)):
        if not 0.0 <= val <= 1.0:
            raise DataError(f"{name} must be in [0, 1], got {val}")
    return W_DICE * dice_val + W_IOU * iou_val + W_HD * (1.0 - hd_norm)


def evaluate_masks(
    pred: MaskVolume, gt: MaskVolume, use_min_separation: bool = False
) -> MetricsReport:
    """Full report for one case.

    Hausdorff is used for the distance term by default; the literal minimum
    cross-pair separation is available behind the flag. When exactly one mask
    is empty the distance is undefined and scored at the worst case
    (hd_norm = 1).
    """
    from .volume import to_voxel_set

    d = dice(pred, gt)
    j = iou(pred, gt)
    np_, ng = pred.voxel_count(), gt.voxel_count()
    if np_ == 0 and ng == 0:
        hd_raw, hd_norm = 0.0, 0.0
    elif np_ == 0 or ng == 0:
        hd_raw = float(max_l1_extent(pred.dims))
        hd_norm = 1.0
    else:
        a, b = to_voxel_set(pred), to_voxel_set(gt)
        hd_raw = float(
            min_l1_separation(a, b) if use_min_separation else hausdorff_l1(a, b)
        )
        hd_norm = normalize_hd(hd_raw, pred.dims)
    return MetricsReport(d, j, hd_raw, hd_norm, challenge_score(d, j, hd_norm))


def mean_report(reports: list[MetricsReport]) -> MetricsReport:
    """Per-field mean across cases."""
    if not reports:
        raise DataError("mean_report needs at least one case")
    n = len(reports)
    return MetricsReport(
        dice=sum(r.dice for r in reports) / n,
        iou=sum(r.iou for r in reports) / n,
        hd_raw=sum(r.hd_raw for r in reports) / n,
        hd_norm=sum(r.hd_norm for r in reports) / n,
        score=sum(r.score for r in reports) / n,
    )
