"""
Finite-difference gradient suite behind the ``gradcheck`` command.

Each case rebuilds a scalar objective from leaf parameters and compares the
backward gradients against central differences with tape.grad_check.
"""

import logging
import time
from dataclasses import dataclass
from typing import Callable, List, Tuple

import numpy as np

import tape
from assigner import AssignerConfig, assign_one_to_many
from config import RunConfig
from engine import assign_scene, scene_loss
from geometry import Box, convert_minmax_value, convert_moment_value, iou_value
from loss import LossWeights, build_target_map, corr_loss, focal_loss, stage_giou_loss
from model import ModelConfig, forward, init_parameters
from scenes import Rng, SceneConfig, generate_scene
from tape import Value

logger = logging.getLogger(__name__)

LOSS_TOL = 1e-4
END_TO_END_TOL = 1e-3
STEP = 1e-5
# Gradients of the tiny end-to-end model reach 1e-9; differences this small are roundoff
ABS_TOL = 1e-7

GRID = (4, 4)
STRIDE = 4.0
GT = Box(3.3, 4.1, 11.7, 13.2)


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


Case = Tuple[Callable[[], Value], List[Value]]


def _random_points(rng: Rng, bins: int, n: int) -> np.ndarray:
    """Points scattered around the bin centers of the 4x4 grid"""
    centers = np.array([[(j + 0.5) * STRIDE, (i + 0.5) * STRIDE] for i in range(GRID[0]) for j in range(GRID[1])])
    jitter = rng.uniform_array(bins * n * 2, -3.0, 3.0).reshape(bins, n, 2)
    return centers[:bins, None, :] + jitter


def focal_case(rng: Rng) -> Case:
    logits = tape.parameter(rng.uniform_array(16, -2.0, 2.0).reshape(GRID))
    assignment = assign_one_to_many(_spread_boxes(rng), GT, GRID, STRIDE, AssignerConfig(strategy="iv", top_k=6))
    targets = build_target_map(assignment, GT, STRIDE)
    weights = LossWeights()
    return (lambda: focal_loss(tape.sigmoid(logits), targets, weights)), [logits]


def _spread_boxes(rng: Rng) -> np.ndarray:
    """Valid (16, 4) boxes of varied overlap with GT"""
    lo = rng.uniform_array(32, 0.0, 10.0).reshape(16, 2)
    size = rng.uniform_array(32, 2.0, 8.0).reshape(16, 2)
    return np.concatenate([lo, lo + size], axis=1)


def giou_minmax_case(rng: Rng) -> Case:
    points = tape.parameter(_random_points(rng, 6, 5))
    positives = list(range(6))
    return (lambda: stage_giou_loss(convert_minmax_value(points), GT, positives)), [points]


def giou_moment_case(rng: Rng) -> Case:
    points = tape.parameter(_random_points(rng, 6, 5))
    log_lambda = tape.parameter(rng.uniform_array(2, -0.3, 0.3))
    positives = list(range(6))
    return (lambda: stage_giou_loss(convert_moment_value(points, log_lambda), GT, positives)), [points, log_lambda]


def corr_truncated_case(rng: Rng) -> Case:
    """Score side only; the IoU side is cut from the graph"""
    logits = tape.parameter(rng.uniform_array(16, -2.0, 2.0).reshape(GRID))
    ious = iou_value(tape.constant(_spread_boxes(rng)), GT)
    positives = [0, 3, 5, 9, 12, 15]
    return (lambda: corr_loss(tape.sigmoid(logits), ious, positives, truncate=True)), [logits]


def corr_full_case(rng: Rng) -> Case:
    logits = tape.parameter(rng.uniform_array(16, -2.0, 2.0).reshape(GRID))
    boxes = tape.parameter(_spread_boxes(rng))
    positives = [0, 3, 5, 9, 12, 15]
    negatives = [1, 2, 4]

    def objective() -> Value:
        return corr_loss(tape.sigmoid(logits), iou_value(boxes, GT), positives,
                         sample_mode="pos_neg", truncate=False, negatives=negatives)
    return objective, [logits, boxes]


def tiny_run_config(converter: str = "minmax") -> RunConfig:
    """
    4x4 grid model used by the end-to-end check and the fast tests.

    The narrower point layout keeps fresh points a pixel away from the sampling
    and box clamps.
    """
    model = ModelConfig(search_size=16, template_size=8, stride=4, feature_dim=4,
                        n_points=4, hidden_dim=8, converter=converter, init_spread=0.75)
    return RunConfig(seed=3, epochs=1, scenes_per_epoch=4, batch_size=2, truncate=False,
                     assigner=AssignerConfig(strategy="iv", top_k=6), model=model)


def tiny_scene_config() -> SceneConfig:
    return SceneConfig(search_size=16, template_size=8, min_area=16.0)


def end_to_end_case(rng: Rng, converter: str = "minmax") -> Case:
    """
    Total loss of one tiny scene against every parameter.

    Labels are fixed from the unperturbed forward pass and the correlation loss is
    untruncated, so the objective is a smooth function of the parameters near the
    checked point.
    """
    cfg = tiny_run_config(converter)
    params = init_parameters(cfg.model, seed=int(rng.next_u64() & 0xFFFF))
    # log_lambda starts at 0; move it so its gradient is checked at a generic point
    params["log_lambda"].data[:] = rng.uniform_array(2, -0.2, 0.2)
    scene = generate_scene(cfg.seed, 0, tiny_scene_config())
    out = forward(scene.template, scene.search, params)
    labels = assign_scene(out.init_boxes.data, out.refine_boxes.data, scene, cfg)
    return (lambda: scene_loss(params, scene, cfg, labels).bundle.total), list(params)


def suite() -> List[Tuple[str, Callable[[Rng], Case], float]]:
    return [
        ("focal", focal_case, LOSS_TOL),
        ("giou_minmax", giou_minmax_case, LOSS_TOL),
        ("giou_moment", giou_moment_case, LOSS_TOL),
        ("corr_truncated", corr_truncated_case, LOSS_TOL),
        ("corr_untruncated", corr_full_case, LOSS_TOL),
        ("end_to_end_minmax", lambda rng: end_to_end_case(rng, "minmax"), END_TO_END_TOL),
        ("end_to_end_moment", lambda rng: end_to_end_case(rng, "moment"), END_TO_END_TOL),
    ]


def run_suite(seed: int = 0) -> List[GradCheckResult]:
    """Run every case; each gets its own stream keyed by its position"""
    results = []
    for i, (name, build, tol) in enumerate(suite()):
        started = time.perf_counter()
        objective, params = build(Rng.keyed(seed, i))
        error = tape.grad_check(objective, params, h=STEP, abs_tol=ABS_TOL)
        result = GradCheckResult(name, error, tol, time.perf_counter() - started)
        status = "ok" if result.passed else "FAILED"
        logger.info(f"gradcheck {name}: max rel error {error:.3e} (tol {tol:g}) {status} "
                    f"[{result.seconds:.2f}s]")
        results.append(result)
    return results


def suite_passed(results: List[GradCheckResult]) -> bool:
    return all(r.passed for r in results)
