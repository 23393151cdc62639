"""
Training engine: batched loss assembly, AdamW with decoupled weight decay,
the epoch loop with its step learning-rate schedule, and ablation runs.
"""

import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

import tape
from assigner import AssignmentResult, init_labels, leading_labels
from config import RunConfig, apply_overrides, save_config, to_flat
from geometry import iou, iou_value
from loss import (LossBundle, TargetMap, build_target_map, corr_losses, corr_members, focal_loss,
                  stage_giou_losses, total_loss)
from metrics import evaluate
from model import HeadOutput, Parameters, forward, forward_batch, init_parameters, save_checkpoint
from scenes import Scene, generate_scene
from tape import TapeError

# Configure logging
logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
IOU_GOAL = 0.5

METRICS_COLUMNS = ["epoch", "mean_train_iou", "loss_cls", "loss_init", "loss_refine",
                   "loss_corr", "loss_total", "positives_per_scene", "wall_time_s"]


class TrainingError(RuntimeError):
    """Training hit a non-finite loss"""

    def __init__(self, message: str, scene_id: int):
        super().__init__(f"{message} (scene {scene_id})")
        self.scene_id = scene_id


@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Parameters) -> "OptimizerState":
        return cls({k: np.zeros_like(p.data) for k, p in params.values.items()},
                   {k: np.zeros_like(p.data) for k, p in params.values.items()})


@dataclass
class SceneStats:
    bundle: LossBundle
    train_iou: float
    positives: int


@dataclass
class BatchStats:
    bundle: LossBundle
    train_ious: List[float]
    positives: List[int]


@dataclass
class StepStats:
    losses: Dict[str, float]
    ious: List[float]
    positives: List[int]
    grad_norm: float


@dataclass
class MetricsRecord:
    epoch: int
    mean_train_iou: float
    loss_cls: float
    loss_init: float
    loss_refine: float
    loss_corr: float
    loss_total: float
    positives_per_scene: float
    wall_time_s: float = 0.0


@dataclass
class ExperimentResult:
    params: Parameters
    records: List[MetricsRecord]
    summary: Dict = field(default_factory=dict)

    def epochs_to_reach(self, goal: float = IOU_GOAL) -> Optional[int]:
        """Epochs trained until mean_train_iou first reached ``goal``; None if never"""
        for record in self.records:
            if record.mean_train_iou >= goal:
                return record.epoch + 1
        return None


def adamw_step(params: Parameters,
               grads: Dict[str, np.ndarray],
               state: OptimizerState,
               lr: float,
               weight_decay: float,
               betas: Tuple[float, float] = ADAM_BETAS,
               eps: float = ADAM_EPS) -> OptimizerState:
    """
    One AdamW update, in place on the parameter data.

    Decay is decoupled: w <- w - lr * wd * w, then the bias-corrected Adam step.
    """
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, param in params.values.items():
        g = grads[name]
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = state.m[name] / c1
        v_hat = state.v[name] / c2
        param.data -= lr * weight_decay * param.data
        param.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


def clip_gradients(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """Scale every gradient by max_norm / global norm when the norm exceeds max_norm; returns the norm"""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * scale
    return norm


def assign_scene(init_boxes: np.ndarray, refine_boxes: np.ndarray, scene: Scene,
                 cfg: RunConfig) -> Tuple[AssignmentResult, AssignmentResult]:
    """Init labels are one-to-one; refine labels follow cfg.assigner"""
    model_cfg = cfg.model
    init = init_labels(model_cfg.grid_shape, model_cfg.stride, scene.gt)
    refine = leading_labels(init_boxes, refine_boxes, scene.gt, model_cfg.grid_shape,
                            model_cfg.stride, cfg.assigner)
    return init, refine


Labels = Tuple[AssignmentResult, AssignmentResult]


def batch_loss(params: Parameters, scenes: Sequence[Scene], cfg: RunConfig,
               labels: Optional[Sequence[Labels]] = None) -> BatchStats:
    """
    Forward several scenes through one graph and assemble their weighted losses.

    Every loss component of the returned bundle is a (B,) vector. ``labels`` pins the
    (init, refine) assignments of each scene instead of deriving them from this pass.
    """
    out = forward_batch([s.template for s in scenes], [s.search for s in scenes], params)
    if labels is None:
        init_boxes, refine_boxes = out.scene_boxes("init"), out.scene_boxes("refine")
        labels = [assign_scene(init_boxes[i], refine_boxes[i], scene, cfg) for i, scene in enumerate(scenes)]
    weights = cfg.loss_weights
    gts = [scene.gt for scene in scenes]
    inits = [init.positives for init, _ in labels]
    refines = [refine.positives for _, refine in labels]

    targets = TargetMap.stack([build_target_map(refine, scene.gt, cfg.model.stride)
                               for (_, refine), scene in zip(labels, scenes)])
    cls = focal_loss(out.score_map, targets, weights)
    init = stage_giou_losses(out.init_boxes, gts, inits)
    refine = stage_giou_losses(out.refine_boxes, gts, refines)
    if weights.lambda_corr > 0:
        gt_rows = np.repeat(np.stack([gt.as_array() for gt in gts]), out.n_bins, axis=0)
        refine_ious = iou_value(out.refine_boxes, gt_rows)
        members = [corr_members(r.positives, cfg.corr_sample_mode, r.negatives) for _, r in labels]
        corr = corr_losses(out.score_map, refine_ious, members, cfg.truncate)
    else:
        corr = tape.constant(np.zeros(len(scenes)))

    bundle = total_loss(cls, init, refine, corr, weights)
    train_ious = [float(iou(box, gt)) for box, gt in zip(out.predicted_boxes(), gts)]
    return BatchStats(bundle, train_ious, [len(p) for p in refines])


def scene_loss(params: Parameters, scene: Scene, cfg: RunConfig,
               labels: Optional[Labels] = None) -> SceneStats:
    """
    Forward one scene and assemble its weighted loss.

    ``labels`` pins the (init, refine) assignments instead of deriving them from
    this forward pass.
    """
    stats = batch_loss(params, [scene], cfg, None if labels is None else [labels])
    b = stats.bundle
    bundle = LossBundle(*(v.reshape() for v in (b.cls, b.init, b.refine, b.corr, b.total)))
    return SceneStats(bundle, stats.train_ious[0], stats.positives[0])


def _failing_scene(batch: Sequence[Scene], params: Parameters, cfg: RunConfig) -> Tuple[int, str]:
    """First scene of the batch whose own loss is non-finite, with what went wrong"""
    for scene in batch:
        try:
            total = scene_loss(params, scene, cfg).bundle.as_floats()["total"]
        except TapeError as e:
            return scene.scene_id, f"Non-finite value during forward: {e}"
        if not math.isfinite(total):
            return scene.scene_id, f"Non-finite loss {total}"
    return batch[0].scene_id, "Non-finite value in the batched forward"


def train_step(batch: Sequence[Scene], params: Parameters, state: OptimizerState,
               cfg: RunConfig, lr: float) -> StepStats:
    """
    Batch-mean loss, backward, global-norm clipping and one AdamW update.

    Raises:
        TrainingError: a scene produced a non-finite value; carries its scene_id
    """
    if not batch:
        raise ValueError("train_step needs a non-empty batch")
    try:
        stats = batch_loss(params, batch, cfg)
        failed = not np.all(np.isfinite(stats.bundle.total.data))
    except TapeError:
        failed = True
    if failed:
        scene_id, message = _failing_scene(batch, params, cfg)
        raise TrainingError(message, scene_id)

    loss = stats.bundle.total.mean()
    store = tape.backward(loss)
    grads = {name: store.of(p) for name, p in params.values.items()}
    grad_norm = clip_gradients(grads, cfg.grad_clip)
    if not math.isfinite(grad_norm):
        raise TrainingError("Non-finite gradient norm", batch[0].scene_id)
    adamw_step(params, grads, state, lr, cfg.weight_decay)
    losses = stats.bundle.as_floats()
    logger.debug(f"step {state.step}: total {losses['total']:.6f}, grad norm {grad_norm:.4f}")
    return StepStats(losses, stats.train_ious, stats.positives, grad_norm)


def scene_ids_for_epoch(epoch: int, cfg: RunConfig) -> List[int]:
    """scene_id = epoch * N + index; overfit mode repeats scene 0"""
    n = cfg.scenes_per_epoch
    if cfg.overfit:
        return [0] * n
    return [epoch * n + i for i in range(n)]


def _batches(ids: List[int], size: int) -> List[List[int]]:
    return [ids[i:i + size] for i in range(0, len(ids), size)]


def write_metrics_csv(records: List[MetricsRecord], path) -> Path:
    path = Path(path)
    frame = pd.DataFrame([asdict(r) for r in records], columns=METRICS_COLUMNS)
    frame.to_csv(path, index=False, float_format="%.9g")
    return path


def run_experiment(cfg: RunConfig, out_dir=None) -> ExperimentResult:
    """
    Train from a fresh initialization over the deterministic scene stream.

    When ``out_dir`` is given it receives config.json, metrics.csv, summary.json
    and checkpoint.json.
    """
    logger.info(f"Starting experiment: seed {cfg.seed}, {cfg.epochs} epochs x {cfg.scenes_per_epoch} scenes, "
                f"strategy {cfg.assigner.strategy.value}, leading {cfg.assigner.leading}")
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_config(cfg, out_dir / "config.json")

    params = init_parameters(cfg.model, cfg.seed)
    state = OptimizerState.zeros_like(params)
    scene_cfg = cfg.scene_config
    records: List[MetricsRecord] = []
    started = time.perf_counter()
    timings = []

    for epoch in range(cfg.epochs):
        epoch_start = time.perf_counter()
        lr = cfg.lr_at(epoch)
        if epoch == cfg.lr_drop_epoch and epoch > 0:
            logger.info(f"Epoch {epoch}: learning rate dropped to {lr:g}")
        sums = {"cls": 0.0, "init": 0.0, "refine": 0.0, "corr": 0.0, "total": 0.0}
        ious, positives, steps = [], [], 0
        for batch_ids in _batches(scene_ids_for_epoch(epoch, cfg), cfg.batch_size):
            batch = [generate_scene(cfg.seed, sid, scene_cfg) for sid in batch_ids]
            stats = train_step(batch, params, state, cfg, lr)
            for key in sums:
                sums[key] += stats.losses[key] * len(batch)
            ious.extend(stats.ious)
            positives.extend(stats.positives)
            steps += 1

        elapsed = time.perf_counter() - epoch_start
        timings.append(elapsed)
        n = len(ious)
        record = MetricsRecord(
            epoch=epoch,
            mean_train_iou=float(np.mean(ious)),
            loss_cls=sums["cls"] / n,
            loss_init=sums["init"] / n,
            loss_refine=sums["refine"] / n,
            loss_corr=sums["corr"] / n,
            loss_total=sums["total"] / n,
            positives_per_scene=float(np.mean(positives)),
            wall_time_s=elapsed if cfg.log_wall_time else 0.0,
        )
        records.append(record)
        logger.info(f"Epoch {epoch}: IoU {record.mean_train_iou:.4f}, loss {record.loss_total:.4f}, "
                    f"positives/scene {record.positives_per_scene:.2f} ({elapsed:.1f}s, {steps} steps)")

    result = ExperimentResult(params, records)
    result.summary = {
        "seed": cfg.seed,
        "final": asdict(records[-1]),
        "epochs_to_iou_0_5": result.epochs_to_reach(),
        "parameter_count": params.count(),
        "wall_time_s": time.perf_counter() - started,
        "epoch_wall_times_s": timings,
        "config": to_flat(cfg),
    }
    if out_dir is not None:
        write_metrics_csv(records, out_dir / "metrics.csv")
        with open(out_dir / "summary.json", "w") as f:
            json.dump(result.summary, f, indent=2)
        save_checkpoint(out_dir / "checkpoint.json", params, to_flat(cfg))
        logger.info(f"Experiment outputs written to {out_dir}")
    return result


def _run_variant(job: Tuple[str, RunConfig, Optional[str]]) -> Dict:
    name, cfg, out_dir = job
    result = run_experiment(cfg, out_dir)
    report = evaluate(result.params, cfg.eval_sequences, cfg.resolved_eval_seed, cfg.scene_config)
    final = result.records[-1]
    return {
        "variant": name,
        "final_iou": final.mean_train_iou,
        "ao": report.ao,
        "sr_050": report.sr_050,
        "epochs_to_iou_0_5": result.epochs_to_reach(),
        "final_loss": final.loss_total,
    }


def run_ablation(base_cfg: RunConfig,
                 variants: Sequence[Tuple[str, Dict]],
                 out_dir=None,
                 workers: int = 1) -> pd.DataFrame:
    """
    Run every variant on the same seed and scene stream and tabulate the outcome.

    Args:
        base_cfg: configuration shared by all variants
        variants: (name, flat overrides) pairs
        out_dir: each variant writes into out_dir/<name>; the table goes to ablation.csv
        workers: > 1 runs variants in separate processes

    Returns:
        DataFrame with one row per variant in input order
    """
    if not variants:
        raise ValueError("run_ablation needs at least one variant")
    names = [name for name, _ in variants]
    if len(set(names)) != len(names):
        raise ValueError(f"Variant names must be unique: {names}")
    jobs = []
    for name, overrides in variants:
        cfg = apply_overrides(base_cfg, overrides)
        variant_dir = str(Path(out_dir) / name) if out_dir is not None else None
        jobs.append((name, cfg, variant_dir))
    logger.info(f"Running {len(jobs)} ablation variants with {workers} worker(s)")

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_variant, jobs))
    else:
        rows = [_run_variant(job) for job in jobs]

    table = pd.DataFrame(rows)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        table.to_csv(Path(out_dir) / "ablation.csv", index=False, float_format="%.9g")
    for row in rows:
        logger.info(f"{row['variant']}: final IoU {row['final_iou']:.4f}, AO {row['ao']:.4f}, "
                    f"epochs to 0.5 {row['epochs_to_iou_0_5']}")
    return table


@dataclass
class SceneInspection:
    scene: Scene
    output: HeadOutput
    assignment: AssignmentResult

    def to_dict(self, cfg: RunConfig) -> Dict:
        return {
            "assigner": cfg.assigner.strategy.value,
            "leading": cfg.assigner.leading,
            "spread": cfg.assigner.spread.value,
            "top_k": cfg.assigner.resolved_top_k,
            "gt": self.scene.gt.to_list(),
            **self.assignment.to_dict(),
        }


def inspect_scene(cfg: RunConfig, scene_seed: int, params: Optional[Parameters] = None) -> SceneInspection:
    """
    Refine-stage labels of scene 0 under ``scene_seed``.

    Without trained parameters the model is freshly initialized from the scene seed.
    """
    if params is None:
        params = init_parameters(cfg.model, scene_seed)
    scene = generate_scene(scene_seed, 0, cfg.scene_config)
    out = forward(scene.template, scene.search, params)
    _, refine = assign_scene(out.init_boxes.data, out.refine_boxes.data, scene, cfg)
    return SceneInspection(scene, out, refine)
