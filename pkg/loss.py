"""
Training objective: focal classification loss, stage-weighted GIoU localization
loss, the correlation loss 1 - rho between foreground scores and box IoUs, and
their weighted sum.
"""

import logging
from dataclasses import dataclass, fields
from enum import Enum
from typing import Dict, List, Sequence

import numpy as np

import tape
from assigner import AssignmentResult, BinLabel, bin_centers
from geometry import Box, giou_value
from tape import Value

logger = logging.getLogger(__name__)

TARGET_CAP = 1.0 - 1e-4
RHO_EPS = 1e-9
LOSS_NAMES = ("cls", "init", "refine", "corr", "total")


class SampleMode(str, Enum):
    POS = "pos"
    POS_NEG = "pos_neg"


@dataclass
class LossWeights:
    """Loss weights and focal exponents"""
    lambda_cls: float = 2.0
    lambda_det: float = 1.0
    lambda_corr: float = 0.5
    lambda_init: float = 1.0
    lambda_refine: float = 2.0
    alpha: float = 2.0
    beta: float = 4.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"Loss weight {f.name} must be non-negative, got {getattr(self, f.name)}")


@dataclass
class TargetMap:
    """Classification targets and the mask that drops Ignore bins"""
    targets: np.ndarray
    mask: np.ndarray

    @property
    def positive(self) -> np.ndarray:
        return self.targets == 1.0

    @property
    def batched(self) -> bool:
        return self.targets.ndim == 3

    @classmethod
    def stack(cls, maps: Sequence["TargetMap"]) -> "TargetMap":
        """(B, H, W) targets and masks, one scene per map"""
        return cls(np.stack([m.targets for m in maps]), np.stack([m.mask for m in maps]))


@dataclass
class LossBundle:
    cls: Value
    init: Value
    refine: Value
    corr: Value
    total: Value

    def as_floats(self) -> Dict[str, float]:
        """Component values; per-scene vectors are averaged"""
        return {name: float(np.mean(getattr(self, name).data)) for name in LOSS_NAMES}

    def scene(self, i: int) -> Dict[str, float]:
        return {name: float(getattr(self, name).data.reshape(-1)[i]) for name in LOSS_NAMES}


def build_target_map(assignment: AssignmentResult, gt: Box, stride: float) -> TargetMap:
    """
    Gaussian targets around the GT center with exact ones on positive bins.

    Non-positive bins get exp(-d^2 / 2 sigma^2), sigma = max(gt diagonal / 6, stride / 2),
    capped below 1 so that only positives hit the P=1 branch of the focal loss.
    """
    grid_shape = assignment.grid_shape
    centers = bin_centers(grid_shape, stride)
    gx, gy = gt.center
    d2 = (centers[:, 0] - gx) ** 2 + (centers[:, 1] - gy) ** 2
    sigma = max(np.hypot(gt.width, gt.height) / 6.0, stride / 2.0)
    targets = np.minimum(np.exp(-d2 / (2.0 * sigma ** 2)), TARGET_CAP)
    labels = assignment.labels.reshape(-1)
    targets[labels == BinLabel.POSITIVE] = 1.0
    mask = (labels != BinLabel.IGNORE).astype(np.float64)
    return TargetMap(targets.reshape(grid_shape), mask.reshape(grid_shape))


def _power(x: Value, exponent: float) -> Value:
    if exponent == 2.0:
        return tape.square(x)
    if exponent == 1.0:
        return x
    return tape.exp(exponent * tape.log(x))


def focal_loss(scores: Value, targets: TargetMap, weights: LossWeights) -> Value:
    """
    Penalty-reduced focal loss, normalized by the number of positive bins.

    Args:
        scores: post-sigmoid score map, any shape with H*W entries per scene
        targets: target map and Ignore mask; stacked (B, H, W) maps give one loss per scene
        weights: supplies alpha and beta

    Returns:
        scalar, or (B,) for stacked targets
    """
    batched = targets.batched
    b = targets.targets.shape[0] if batched else 1
    p = scores.reshape(b, -1)
    t = targets.targets.reshape(b, -1)
    mask = targets.mask.reshape(b, -1)
    pos = (t == 1.0).astype(np.float64) * mask
    neg = (t < 1.0).astype(np.float64) * mask * (1.0 - t) ** weights.beta

    pos_term = _power(1.0 - p, weights.alpha) * tape.log(p)
    neg_term = _power(p, weights.alpha) * tape.log(1.0 - p)
    n_pos = np.maximum(1.0, pos.sum(axis=1))
    per_scene = -((pos_term * pos).sum(axis=1) + (neg_term * neg).sum(axis=1)) / n_pos
    return per_scene if batched else per_scene.reshape()


def _segments(owner: np.ndarray, n_segments: int) -> np.ndarray:
    """(segments, members) 0/1 matrix; member j belongs to segment owner[j]"""
    return (owner[None, :] == np.arange(n_segments)[:, None]).astype(np.float64)


def stage_giou_losses(pred_boxes: Value, gts: Sequence[Box], positives: Sequence[Sequence[int]]) -> Value:
    """
    (B,) mean of 1 - GIoU over each scene's positive bins.

    pred_boxes holds the boxes of every bin of every scene, scene-major.
    """
    b = len(gts)
    boxes = pred_boxes.reshape(-1, 4)
    n_bins = boxes.shape[0] // b
    rows, gt_rows, owner = [], [], []
    for i, (gt, pos) in enumerate(zip(gts, positives)):
        if len(pos) == 0:
            raise ValueError(f"stage_giou_loss needs at least one positive bin (scene {i} of {b})")
        rows.append(i * n_bins + np.asarray(pos, dtype=np.int64))
        gt_rows.append(np.tile(gt.as_array(), (len(pos), 1)))
        owner.append(np.full(len(pos), i))
    rows, owner = np.concatenate(rows), np.concatenate(owner)
    losses = 1.0 - giou_value(boxes[rows], np.concatenate(gt_rows))
    segments = _segments(owner, b)
    means = tape.constant(segments / segments.sum(axis=1, keepdims=True))
    return (means @ losses.reshape(-1, 1)).reshape(b)


def stage_giou_loss(pred_boxes: Value, gt: Box, positives: Sequence[int]) -> Value:
    """Mean of 1 - GIoU over the positive bins of one stage"""
    return stage_giou_losses(pred_boxes, [gt], [positives]).reshape()


def corr_rho_segments(s: Value, b: Value, segments: np.ndarray) -> Value:
    """
    corr_rho of every segment of two aligned vectors.

    Args:
        s: (M,) scores
        b: (M,) IoUs
        segments: (K, M) 0/1 membership, every row with at least two members

    Returns:
        (K,) agreement per segment
    """
    seg = np.asarray(segments, dtype=np.float64)
    counts = seg.sum(axis=1, keepdims=True)
    if s.data.size != b.data.size or seg.shape[1] != s.data.size or np.any(counts < 2):
        raise ValueError(f"corr_rho needs two aligned sets of >= 2 entries per segment, got "
                         f"{s.data.size} and {b.data.size} over segments of sizes {counts.reshape(-1).tolist()}")
    member_sum, spread_back = tape.constant(seg), tape.constant(seg.T)
    average = tape.constant(seg / counts)
    s_col, b_col = s.reshape(-1, 1), b.reshape(-1, 1)
    s_mean, b_mean = average @ s_col, average @ b_col
    v_s, v_b = s_col - spread_back @ s_mean, b_col - spread_back @ b_mean
    sq_s, sq_b = tape.square(v_s), tape.square(v_b)
    pearson = (member_sum @ (v_s * v_b)) / (tape.sqrt(member_sum @ sq_s) * tape.sqrt(member_sum @ sq_b))
    var_s, var_b = average @ sq_s, average @ sq_b
    numerator = 2.0 * pearson * tape.sqrt(var_s) * tape.sqrt(var_b)
    denominator = var_s + var_b + tape.square(s_mean - b_mean) + RHO_EPS
    return (numerator / denominator).reshape(-1)


def corr_rho(s: Value, b: Value) -> Value:
    """
    Concordance-style agreement between scores and IoUs over one sample set.

    Population statistics throughout: 2 * pearson * std(s) * std(b) over
    var(s) + var(b) + (mean(s) - mean(b))^2.
    """
    if s.data.size < 2 or s.data.size != b.data.size:
        raise ValueError(f"corr_rho needs two aligned sets of >= 2 entries, got {s.data.size} and {b.data.size}")
    return corr_rho_segments(s, b, np.ones((1, s.data.size))).reshape()


def corr_members(positives: Sequence[int],
                 sample_mode: SampleMode = SampleMode.POS,
                 negatives: Sequence[int] = ()) -> List[int]:
    """Sorted bins entering the correlation set"""
    members = list(positives)
    pos_neg = SampleMode(sample_mode) == SampleMode.POS_NEG
    if pos_neg:
        members += list(negatives)
        if len(members) < 2:
            logger.warning(f"Correlation set has {len(members)} bin(s) under pos_neg; corr loss is 0")
    return sorted(members)


def corr_losses(scores: Value, refine_ious: Value, member_sets: Sequence[Sequence[int]],
                truncate: bool = True) -> Value:
    """
    (B,) 1 - rho per scene; scenes with fewer than two members get 0.

    scores and refine_ious cover every bin of every scene, scene-major.
    """
    b = len(member_sets)
    flat_scores = scores.reshape(-1)
    ious = refine_ious.reshape(-1)
    if truncate:
        ious = tape.detach(ious)
    n_bins = flat_scores.shape[0] // b
    live = [i for i, members in enumerate(member_sets) if len(members) >= 2]
    if not live:
        return tape.constant(np.zeros(b))
    rows = np.concatenate([i * n_bins + np.asarray(member_sets[i], dtype=np.int64) for i in live])
    owner = np.concatenate([np.full(len(member_sets[i]), k) for k, i in enumerate(live)])
    per_live = 1.0 - corr_rho_segments(flat_scores[rows], ious[rows], _segments(owner, len(live)))
    slot = np.full(b, len(live), dtype=np.int64)
    slot[live] = np.arange(len(live))
    return tape.concat([per_live, tape.constant([0.0])], axis=0)[slot]


def corr_loss(scores: Value,
              refine_ious: Value,
              positives: Sequence[int],
              sample_mode: SampleMode = SampleMode.POS,
              truncate: bool = True,
              negatives: Sequence[int] = ()) -> Value:
    """
    1 - rho between per-bin scores and refine-stage IoUs.

    With ``truncate`` the IoU side is detached, so the loss only trains the
    classification branch. Returns a constant 0 when fewer than two bins are sampled.
    """
    members = corr_members(positives, sample_mode, negatives)
    if len(members) < 2:
        return tape.constant(0.0)
    return corr_losses(scores, refine_ious, [members], truncate).reshape()


def total_loss(cls, init, refine, corr, weights: LossWeights) -> LossBundle:
    """
    L_all = lambda_cls L_cls + lambda_det (lambda_init L_init + lambda_refine L_refine) + lambda_corr L_corr

    Components may be per-scene vectors; the total then is too.
    """
    cls, init, refine, corr = (tape.lift(v) for v in (cls, init, refine, corr))
    det = weights.lambda_init * init + weights.lambda_refine * refine
    total = weights.lambda_cls * cls + weights.lambda_det * det + weights.lambda_corr * corr
    return LossBundle(cls=cls, init=init, refine=refine, corr=corr, total=total)
