"""
Label assignment for the init and refine stages.

Strategies: one-to-one center assignment, the static MaxIoU assigner, and the
one-to-many assigners that pick top-K candidates by center distance (CD) or IoU
value (IV) and keep those above a dynamic mean + spread threshold. The leading
wrapper labels the refine stage with the init stage's pseudo boxes.

All labeling happens off the tape; no gradient flows through a label decision.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from geometry import Box, center_distance, iou

logger = logging.getLogger(__name__)

# Tolerance for "IoU >= threshold" so that equal IoUs are not split by rounding in the mean
THRESHOLD_TOL = 1e-12

DEFAULT_TOP_K = {"cd": 12, "iv": 16}


class BinLabel(IntEnum):
    NEGATIVE = 0
    POSITIVE = 1
    IGNORE = 2


LABEL_CHARS = {BinLabel.NEGATIVE: "N", BinLabel.POSITIVE: "P", BinLabel.IGNORE: "I"}


class Strategy(str, Enum):
    ONE_TO_ONE = "one2one"
    MAX_IOU = "maxiou"
    TOPK_CD = "cd"
    TOPK_IV = "iv"


class Spread(str, Enum):
    STD = "std"
    VAR = "var"


@dataclass
class AssignerConfig:
    """Refine-stage assignment settings; the init stage is always one-to-one"""
    strategy: Strategy = Strategy.TOPK_IV
    top_k: Optional[int] = None  # None -> 12 for CD, 16 for IV
    leading: bool = True
    spread: Spread = Spread.STD
    iou_pos_thr: float = 0.5
    iou_neg_thr: float = 0.4

    def __post_init__(self):
        self.strategy = Strategy(self.strategy)
        self.spread = Spread(self.spread)
        if not 0.0 <= self.iou_neg_thr <= self.iou_pos_thr <= 1.0:
            raise ValueError(f"Need 0 <= iou_neg_thr <= iou_pos_thr <= 1, got "
                             f"{self.iou_neg_thr} / {self.iou_pos_thr}")
        if self.top_k is not None and self.top_k < 1:
            raise ValueError(f"top_k must be positive, got {self.top_k}")

    @property
    def resolved_top_k(self) -> int:
        if self.top_k is not None:
            return self.top_k
        return DEFAULT_TOP_K.get(self.strategy.value, DEFAULT_TOP_K["cd"])

    def validate(self, n_bins: int) -> None:
        if self.strategy in (Strategy.TOPK_CD, Strategy.TOPK_IV) and self.resolved_top_k > n_bins:
            raise ValueError(f"top_k={self.resolved_top_k} exceeds the {n_bins} bins of the grid")


@dataclass
class AssignmentResult:
    """Per-bin labels plus the row-major list of positive bins"""
    labels: np.ndarray
    positives: List[int]
    threshold_used: Optional[float] = None
    candidates: List[int] = field(default_factory=list)

    @property
    def grid_shape(self) -> Tuple[int, int]:
        return self.labels.shape

    def mask(self, label: BinLabel) -> np.ndarray:
        return (self.labels == label).reshape(-1)

    @property
    def negatives(self) -> List[int]:
        return [int(i) for i in np.flatnonzero(self.mask(BinLabel.NEGATIVE))]

    def to_dict(self) -> Dict:
        rows = ["".join(LABEL_CHARS[BinLabel(v)] for v in row) for row in self.labels]
        return {
            "grid": list(self.labels.shape),
            "labels": rows,
            "positives": list(self.positives),
            "candidates": list(self.candidates),
            "threshold": self.threshold_used,
        }


def bin_centers(grid_shape: Tuple[int, int], stride: float) -> np.ndarray:
    """(H*W, 2) centers, row-major: bin (i, j) sits at ((j + 0.5) * stride, (i + 0.5) * stride)"""
    h, w = grid_shape
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return np.stack([(cols.reshape(-1) + 0.5) * stride, (rows.reshape(-1) + 0.5) * stride], axis=-1)


def _flat_boxes(pred_boxes) -> np.ndarray:
    arr = np.asarray(pred_boxes, dtype=np.float64)
    return arr.reshape(-1, 4)


def _result(grid_shape: Tuple[int, int], positives: Sequence[int], fill: BinLabel = BinLabel.NEGATIVE,
            threshold: Optional[float] = None, candidates: Sequence[int] = ()) -> AssignmentResult:
    labels = np.full(grid_shape[0] * grid_shape[1], int(fill), dtype=np.int8)
    ordered = sorted(int(p) for p in positives)
    labels[ordered] = int(BinLabel.POSITIVE)
    return AssignmentResult(labels.reshape(grid_shape), ordered, threshold, [int(c) for c in candidates])


def _check_k(k: int, n_bins: int) -> None:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > n_bins:
        raise ValueError(f"k={k} exceeds the {n_bins} bins of the grid")


def assign_one_to_one_center(grid_shape: Tuple[int, int], stride: float, gt: Box) -> AssignmentResult:
    """The single bin whose center is nearest the GT center is positive"""
    h, w = grid_shape
    cx, cy = gt.center
    if not (0.0 <= cx <= w * stride and 0.0 <= cy <= h * stride):
        raise ValueError(f"GT center ({cx:.2f}, {cy:.2f}) lies outside the {h}x{w} grid "
                         f"with stride {stride}")
    distances = center_distance(bin_centers(grid_shape, stride), gt)
    return _result(grid_shape, [int(np.argmin(distances))])


def assign_max_iou(pred_boxes, gt: Box, cfg: AssignerConfig) -> AssignmentResult:
    """
    Static IoU thresholds: > pos_thr positive, < neg_thr negative, otherwise ignore.

    Args:
        pred_boxes: (H, W, 4) predicted pseudo boxes
        gt: ground-truth box
        cfg: assigner settings holding the thresholds

    Returns:
        AssignmentResult; if no bin clears pos_thr the first arg-max bin is promoted
    """
    arr = np.asarray(pred_boxes, dtype=np.float64)
    grid_shape = arr.shape[:2]
    ious = iou(_flat_boxes(arr), gt)
    labels = np.full(ious.shape, int(BinLabel.IGNORE), dtype=np.int8)
    labels[ious < cfg.iou_neg_thr] = int(BinLabel.NEGATIVE)
    labels[ious > cfg.iou_pos_thr] = int(BinLabel.POSITIVE)
    if not np.any(labels == BinLabel.POSITIVE):
        labels[int(np.argmax(ious))] = int(BinLabel.POSITIVE)
    positives = [int(i) for i in np.flatnonzero(labels == BinLabel.POSITIVE)]
    return AssignmentResult(labels.reshape(grid_shape), positives)


def select_candidates_cd(grid_shape: Tuple[int, int], stride: float, gt: Box, k: int) -> List[int]:
    """k bins nearest the GT center, ascending distance, row-major ties"""
    _check_k(k, grid_shape[0] * grid_shape[1])
    distances = center_distance(bin_centers(grid_shape, stride), gt)
    return [int(i) for i in np.argsort(distances, kind="stable")[:k]]


def select_candidates_iv(pred_boxes, gt: Box, k: int) -> List[int]:
    """k bins whose boxes overlap the GT most, descending IoU, row-major ties"""
    boxes = _flat_boxes(pred_boxes)
    _check_k(k, boxes.shape[0])
    ious = iou(boxes, gt)
    return [int(i) for i in np.argsort(-ious, kind="stable")[:k]]


def dynamic_threshold_filter(candidates: Sequence[int],
                             candidate_ious: Sequence[float],
                             spread: Spread = Spread.STD) -> Tuple[List[int], float]:
    """
    Keep candidates whose IoU reaches mean + spread of the candidate IoUs.

    The arg-max candidate is always kept, so the result is never empty.

    Returns:
        (positives in candidate order, threshold)
    """
    if len(candidates) == 0:
        raise ValueError("dynamic_threshold_filter needs at least one candidate")
    ious = np.asarray(candidate_ious, dtype=np.float64)
    extra = ious.std() if Spread(spread) == Spread.STD else ious.var()
    threshold = float(ious.mean() + extra)
    keep = ious >= threshold - THRESHOLD_TOL
    keep[int(np.argmax(ious))] = True
    return [int(c) for c, k in zip(candidates, keep) if k], threshold


def assign_one_to_many(pred_boxes_for_labeling, gt: Box, grid_shape: Tuple[int, int],
                       stride: float, cfg: AssignerConfig) -> AssignmentResult:
    """Top-K candidates (CD or IV) filtered by the dynamic threshold; the rest are negative"""
    if cfg.strategy not in (Strategy.TOPK_CD, Strategy.TOPK_IV):
        raise ValueError(f"assign_one_to_many needs a top-K strategy, got {cfg.strategy.value}")
    boxes = _flat_boxes(pred_boxes_for_labeling)
    k = cfg.resolved_top_k
    if cfg.strategy == Strategy.TOPK_CD:
        candidates = select_candidates_cd(grid_shape, stride, gt, k)
    else:
        candidates = select_candidates_iv(boxes, gt, k)
    candidate_ious = iou(boxes[candidates], gt)
    positives, threshold = dynamic_threshold_filter(candidates, candidate_ious, cfg.spread)
    return _result(grid_shape, positives, threshold=threshold, candidates=candidates)


def assign_refine(labeling_boxes, gt: Box, grid_shape: Tuple[int, int], stride: float,
                  cfg: AssignerConfig) -> AssignmentResult:
    """Dispatch the refine-stage strategy on the given labeling boxes"""
    if cfg.strategy == Strategy.ONE_TO_ONE:
        return assign_one_to_one_center(grid_shape, stride, gt)
    if cfg.strategy == Strategy.MAX_IOU:
        return assign_max_iou(np.asarray(labeling_boxes).reshape(grid_shape + (4,)), gt, cfg)
    return assign_one_to_many(labeling_boxes, gt, grid_shape, stride, cfg)


def leading_labels(init_boxes, refine_boxes, gt: Box, grid_shape: Tuple[int, int],
                   stride: float, cfg: AssignerConfig) -> AssignmentResult:
    """
    Refine-stage labels.

    With ``cfg.leading`` the init stage's pseudo boxes drive the labeling,
    otherwise the refine stage's own boxes do.
    """
    labeling = init_boxes if cfg.leading else refine_boxes
    return assign_refine(labeling, gt, grid_shape, stride, cfg)


def init_labels(grid_shape: Tuple[int, int], stride: float, gt: Box) -> AssignmentResult:
    """Init stage is always one-to-one on the bin nearest the GT center"""
    return assign_one_to_one_center(grid_shape, stride, gt)
