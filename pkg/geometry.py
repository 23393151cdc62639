"""
Boxes, point sets and the converters between them.

Each measure exists twice: a plain numpy version used by the assigners and the
evaluation code, and a tape version (``*_value``) used inside the losses. Boxes are
always corner format (x1, y1, x2, y2) in pixels.
"""

import logging
import math
from dataclasses import dataclass
from typing import Sequence, Tuple, Union

import numpy as np

import tape
from tape import Value

logger = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-6

BoxLike = Union["Box", Sequence[float], np.ndarray]


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle in continuous image coordinates"""
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"Box coordinates must be finite: {coords}")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise ValueError(f"Box corners out of order: {coords}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> Tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    def to_list(self):
        return [self.x1, self.y1, self.x2, self.y2]

    def to_xywh(self):
        return [self.x1, self.y1, self.width, self.height]

    @classmethod
    def from_array(cls, arr) -> "Box":
        x1, y1, x2, y2 = (float(v) for v in np.asarray(arr, dtype=np.float64).reshape(4))
        return cls(x1, y1, x2, y2)

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "Box":
        return cls(x, y, x + w, y + h)


@dataclass(frozen=True)
class PointSet:
    """Ordered sample points representing the target at one feature bin"""
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
            raise ValueError(f"PointSet needs an (n, 2) array with n >= 2, got shape {pts.shape}")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class MomentMultipliers:
    """Globally shared scale factors, stored as logs so they stay positive"""
    log_lambda_x: float = 0.0
    log_lambda_y: float = 0.0

    @property
    def lambda_x(self) -> float:
        return math.exp(self.log_lambda_x)

    @property
    def lambda_y(self) -> float:
        return math.exp(self.log_lambda_y)

    def as_array(self) -> np.ndarray:
        return np.array([self.lambda_x, self.lambda_y])


def as_boxes(boxes: BoxLike) -> np.ndarray:
    """Coerce a Box, a sequence or an (..., 4) array to a float64 array"""
    if isinstance(boxes, Box):
        return boxes.as_array()
    return np.asarray(boxes, dtype=np.float64)


def _as_points(ps) -> np.ndarray:
    return ps.points if isinstance(ps, PointSet) else np.asarray(ps, dtype=np.float64)


def box_area(boxes: BoxLike) -> np.ndarray:
    b = as_boxes(boxes)
    return (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])


def _overlap(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    iw = np.maximum(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0.0)
    ih = np.maximum(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0.0)
    inter = iw * ih
    union = box_area(a) + box_area(b) - inter
    return inter, union


def _scalar_or_array(result: np.ndarray, *inputs) -> Union[float, np.ndarray]:
    if all(isinstance(x, Box) for x in inputs):
        return float(result)
    return result


def iou(a: BoxLike, b: BoxLike):
    """
    Intersection over union, broadcasting over leading axes.

    Returns 0 where the union area is 0. Two Box arguments give a float.
    """
    aa, bb = as_boxes(a), as_boxes(b)
    inter, union = _overlap(aa, bb)
    safe = np.where(union > 0, union, 1.0)
    result = np.where(union > 0, inter / safe, 0.0)
    return _scalar_or_array(result, a, b)


def giou(a: BoxLike, b: BoxLike):
    """IoU minus the share of the enclosing hull not covered by the union"""
    aa, bb = as_boxes(a), as_boxes(b)
    inter, union = _overlap(aa, bb)
    hull = ((np.maximum(aa[..., 2], bb[..., 2]) - np.minimum(aa[..., 0], bb[..., 0]))
            * (np.maximum(aa[..., 3], bb[..., 3]) - np.minimum(aa[..., 1], bb[..., 1])))
    ratio = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    penalty = np.where(hull > 0, (hull - union) / np.where(hull > 0, hull, 1.0), 0.0)
    return _scalar_or_array(ratio - penalty, a, b)


def box_centers(boxes: BoxLike) -> np.ndarray:
    b = as_boxes(boxes)
    return np.stack([0.5 * (b[..., 0] + b[..., 2]), 0.5 * (b[..., 1] + b[..., 3])], axis=-1)


def center_distance(bin_center, gt: BoxLike):
    """Euclidean distance between bin center(s) (..., 2) and the GT box center"""
    c = np.asarray(bin_center, dtype=np.float64)
    g = box_centers(gt)
    d = np.sqrt(np.sum((c - g) ** 2, axis=-1))
    return float(d) if d.ndim == 0 else d


def convert_minmax(ps) -> np.ndarray:
    """Tight bounding box of the points: (..., n, 2) -> (..., 4)"""
    pts = _as_points(ps)
    lo = pts.min(axis=-2)
    hi = pts.max(axis=-2)
    return np.concatenate([lo, hi], axis=-1)


def convert_moment(ps, m: MomentMultipliers = MomentMultipliers()) -> np.ndarray:
    """Box centered on the point mean with half-extent lambda * population std"""
    pts = _as_points(ps)
    mu = pts.mean(axis=-2)
    sigma = np.maximum(pts.std(axis=-2), SIGMA_FLOOR)
    half = m.as_array() * sigma
    return np.concatenate([mu - half, mu + half], axis=-1)


def clamp_box(b: BoxLike, bounds: Box):
    """Clip coordinates into ``bounds``; a box outside collapses onto the nearest edge"""
    arr = as_boxes(b)
    lo = np.array([bounds.x1, bounds.y1, bounds.x1, bounds.y1])
    hi = np.array([bounds.x2, bounds.y2, bounds.x2, bounds.y2])
    out = np.clip(arr, lo, hi)
    return Box.from_array(out) if isinstance(b, Box) else out


# Tape versions

def _columns(boxes: Value):
    return [boxes[..., i] for i in range(4)]


def _overlap_values(pred: Value, gt) -> Tuple[Value, Value, Value]:
    """Intersection, union and hull areas as Values"""
    gt = tape.lift(as_boxes(gt) if not isinstance(gt, Value) else gt)
    px1, py1, px2, py2 = _columns(pred)
    gx1, gy1, gx2, gy2 = _columns(gt)
    iw = tape.relu(tape.minimum(px2, gx2) - tape.maximum(px1, gx1))
    ih = tape.relu(tape.minimum(py2, gy2) - tape.maximum(py1, gy1))
    inter = iw * ih
    union = (px2 - px1) * (py2 - py1) + (gx2 - gx1) * (gy2 - gy1) - inter
    hull = ((tape.maximum(px2, gx2) - tape.minimum(px1, gx1))
            * (tape.maximum(py2, gy2) - tape.minimum(py1, gy1)))
    return inter, union, hull


def iou_value(pred: Value, gt) -> Value:
    inter, union, _ = _overlap_values(pred, gt)
    return inter / union


def giou_value(pred: Value, gt) -> Value:
    inter, union, hull = _overlap_values(pred, gt)
    return inter / union - (hull - union) / hull


def convert_minmax_value(points: Value) -> Value:
    """(..., n, 2) points -> (..., 4) boxes; gradient reaches the first extreme point"""
    xs, ys = points[..., 0], points[..., 1]
    return tape.stack([xs.min(axis=-1), ys.min(axis=-1), xs.max(axis=-1), ys.max(axis=-1)], axis=-1)


def convert_moment_value(points: Value, log_lambda: Value) -> Value:
    """
    Moment converter on the tape.

    Args:
        points: (..., n, 2) point coordinates
        log_lambda: (2,) log of the x/y multipliers
    """
    mu = points.mean(axis=-2, keepdims=True)
    var = tape.square(points - mu).mean(axis=-2)
    sigma = tape.maximum(tape.sqrt(var), SIGMA_FLOOR)
    half = tape.exp(log_lambda) * sigma
    center = mu.reshape(*var.shape)
    return tape.concat([center - half, center + half], axis=-1)


def clamp_box_value(boxes: Value, bounds: Box) -> Value:
    lo = np.array([bounds.x1, bounds.y1, bounds.x1, bounds.y1])
    hi = np.array([bounds.x2, bounds.y2, bounds.x2, bounds.y2])
    return tape.clip(boxes, lo, hi)


CONVERTERS = ("minmax", "moment")
