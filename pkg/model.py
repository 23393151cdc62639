"""
The trainable tracking head.

A patch-linear encoder fuses the search image with a pooled template vector into a
per-bin feature grid. Three small MLPs read that grid: a classification branch
producing the score map, an init branch emitting n point offsets per bin, and a
refine branch that samples features at the init points (bilinear) and emits
residual offsets. Point sets become pseudo boxes through the min-max or moment
converter.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

import tape
from assigner import bin_centers
from geometry import (CONVERTERS, Box, clamp_box_value, convert_minmax_value,
                      convert_moment_value)
from scenes import Rng
from tape import Value

logger = logging.getLogger(__name__)

LOGIT_CLAMP = 15.0
OFFSET_INIT_SCALE = 0.01

# Output layers of the regression branches start near zero
SMALL_INIT = ("init_w2", "init_b2", "refine_w2", "refine_b2")


@dataclass
class ModelConfig:
    search_size: int = 64
    template_size: int = 32
    stride: int = 4
    feature_dim: int = 32
    n_points: int = 9
    hidden_dim: int = 64
    converter: str = "minmax"
    # half-width of the starting point layout, in grid cells
    init_spread: float = 1.5

    def __post_init__(self):
        if self.search_size % self.stride or self.template_size % self.stride:
            raise ValueError(f"Image sizes ({self.search_size}, {self.template_size}) "
                             f"must be divisible by stride {self.stride}")
        if self.search_size // self.stride < 2:
            raise ValueError(f"Feature grid needs at least 2x2 bins, got search_size={self.search_size}")
        if self.n_points < 2:
            raise ValueError(f"n_points must be >= 2, got {self.n_points}")
        if self.converter not in CONVERTERS:
            raise ValueError(f"Unknown converter '{self.converter}', expected one of {CONVERTERS}")
        if self.init_spread < 0:
            raise ValueError(f"init_spread must be >= 0, got {self.init_spread}")

    @property
    def grid(self) -> int:
        return self.search_size // self.stride

    @property
    def grid_shape(self) -> Tuple[int, int]:
        return (self.grid, self.grid)

    @property
    def image_bounds(self) -> Box:
        return Box(0.0, 0.0, float(self.search_size), float(self.search_size))

    def parameter_shapes(self) -> Dict[str, Tuple[int, ...]]:
        patch = self.stride * self.stride
        f, hid, n2 = self.feature_dim, self.hidden_dim, 2 * self.n_points
        return {
            "patch_w": (patch, f), "patch_b": (f,),
            "template_w": (patch, f), "template_b": (f,),
            "cls_w1": (f, hid), "cls_b1": (hid,), "cls_w2": (hid, 1), "cls_b2": (1,),
            "init_w1": (f, hid), "init_b1": (hid,), "init_w2": (hid, n2), "init_b2": (n2,),
            "refine_w1": (self.n_points * f, hid), "refine_b1": (hid,),
            "refine_w2": (hid, n2), "refine_b2": (n2,),
            "log_lambda": (2,),
        }


@dataclass
class Parameters:
    """Named trainable tensors in a fixed order"""
    values: Dict[str, Value]
    config: ModelConfig
    seed: int = 0

    def __getitem__(self, name: str) -> Value:
        return self.values[name]

    def __iter__(self):
        return iter(self.values.values())

    def names(self) -> List[str]:
        return list(self.values)

    def count(self) -> int:
        return int(sum(v.data.size for v in self.values.values()))

    def copy(self) -> "Parameters":
        return Parameters({k: tape.parameter(v.data) for k, v in self.values.items()},
                          self.config, self.seed)


@dataclass
class FeatureGrid:
    """
    features is (B*H*W, F): scene-major, then row-major over bins.

    batch is None for a single scene; bin_centers always covers one scene.
    """
    features: Value
    stride: int
    grid_shape: Tuple[int, int]
    bin_centers: np.ndarray
    batch: Optional[int] = None

    @property
    def n_bins(self) -> int:
        return self.grid_shape[0] * self.grid_shape[1]

    @property
    def n_scenes(self) -> int:
        return 1 if self.batch is None else self.batch

    @property
    def map_shape(self) -> Tuple[int, ...]:
        return self.grid_shape if self.batch is None else (self.batch,) + self.grid_shape

    def row_centers(self) -> np.ndarray:
        """Bin center of every feature row"""
        return np.tile(self.bin_centers, (self.n_scenes, 1))


@dataclass
class HeadOutput:
    score_map: Value
    init_points: Value
    refine_points: Value
    init_boxes: Value
    refine_boxes: Value
    grid_shape: Tuple[int, int]
    batch: Optional[int] = None

    @property
    def n_bins(self) -> int:
        return self.grid_shape[0] * self.grid_shape[1]

    def best_bins(self) -> np.ndarray:
        """First arg-max of every scene's score map, row-major"""
        return np.argmax(self.score_map.data.reshape(-1, self.n_bins), axis=1)

    def best_bin(self) -> int:
        return int(self.best_bins()[0])

    def scene_boxes(self, stage: str = "refine") -> np.ndarray:
        """(scenes, H*W, 4) box array of the init or refine stage"""
        boxes = self.init_boxes if stage == "init" else self.refine_boxes
        return boxes.data.reshape(-1, self.n_bins, 4)

    def predicted_boxes(self) -> List[Box]:
        refine = self.scene_boxes("refine")
        return [Box.from_array(refine[b, i]) for b, i in enumerate(self.best_bins())]

    def predicted_box(self) -> Box:
        return self.predicted_boxes()[0]


def initial_point_layout(n_points: int, spread: float) -> np.ndarray:
    """
    Starting offsets of the init points, in grid cells.

    The four corners of the [-spread, spread] square come first, then the rest of a
    square lattice row by row, so any n >= 2 spans a box of side 2 * spread.
    """
    if spread == 0.0:
        return np.zeros((n_points, 2))
    side = max(2, math.ceil(math.sqrt(n_points)))
    ticks = np.linspace(-spread, spread, side)
    corners = [(-spread, -spread), (spread, spread), (spread, -spread), (-spread, spread)]
    lattice = [(float(x), float(y)) for y in ticks for x in ticks]
    order = corners + [p for p in lattice if p not in corners]
    return np.array(order[:n_points], dtype=np.float64)


def init_parameters(cfg: ModelConfig, seed: int) -> Parameters:
    """
    Uniform(-sqrt(1/fan_in), sqrt(1/fan_in)) from the pinned stream; log_lambda starts at 0.

    The regression output layers are scaled by 0.01, and the init-head bias adds the
    starting point layout, so fresh point sets span about 2 * init_spread cells.
    """
    rng = Rng.keyed(seed, 0x504152414D53)
    values: Dict[str, Value] = {}
    shapes = cfg.parameter_shapes()
    for name, shape in shapes.items():
        if name == "log_lambda":
            values[name] = tape.parameter(np.zeros(shape))
            continue
        # biases share the fan-in of their weight matrix
        weight_shape = shapes[name.replace("_b", "_w", 1)] if len(shape) == 1 else shape
        bound = math.sqrt(1.0 / weight_shape[0])
        data = rng.uniform_array(int(np.prod(shape)), -bound, bound).reshape(shape)
        if name in SMALL_INIT:
            data = data * OFFSET_INIT_SCALE
        if name == "init_b2":
            data = data + initial_point_layout(cfg.n_points, cfg.init_spread).reshape(-1)
        values[name] = tape.parameter(data)
    logger.debug(f"Initialized {len(values)} tensors for seed {seed}")
    return Parameters(values, cfg, seed)


def _patches(image: np.ndarray, stride: int) -> np.ndarray:
    """(S, S) -> (S/stride * S/stride, stride * stride), row-major over patches"""
    size = image.shape[0]
    g = size // stride
    return image.reshape(g, stride, g, stride).transpose(0, 2, 1, 3).reshape(g * g, stride * stride)


def _check_image(image: np.ndarray, size: int, role: str) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    if arr.shape != (size, size):
        raise ValueError(f"{role} image must be {size}x{size}, got {arr.shape}")
    return arr


def encode_batch(templates: Sequence[np.ndarray], searches: Sequence[np.ndarray],
                 params: Parameters) -> FeatureGrid:
    """
    Fused features of several template/search pairs in one grid.

    Scene b owns feature rows b*H*W .. (b+1)*H*W - 1.
    """
    cfg = params.config
    if len(templates) != len(searches) or not searches:
        raise ValueError(f"encode_batch needs matching non-empty image lists, "
                         f"got {len(templates)} templates and {len(searches)} searches")
    searches = [_check_image(s, cfg.search_size, "Search") for s in searches]
    templates = [_check_image(t, cfg.template_size, "Template") for t in templates]
    b, bins, f = len(searches), cfg.grid * cfg.grid, cfg.feature_dim

    patches = np.concatenate([_patches(s, cfg.stride) for s in searches])
    pooled = np.stack([_patches(t, cfg.stride).mean(axis=0) for t in templates])
    s = (tape.constant(patches) @ params["patch_w"] + params["patch_b"]).reshape(b, bins, f)
    t = (tape.constant(pooled) @ params["template_w"] + params["template_b"]).reshape(b, 1, f)
    fused = tape.relu(s + s * t).reshape(b * bins, f)
    return FeatureGrid(fused, cfg.stride, cfg.grid_shape, bin_centers(cfg.grid_shape, cfg.stride), batch=b)


def encode(template: np.ndarray, search: np.ndarray, params: Parameters) -> FeatureGrid:
    """
    Per-bin fused features relu(s + s * t).

    s is the linear embedding of each stride x stride search patch; t is the embedding
    of the template's average patch.
    """
    return replace(encode_batch([template], [search], params), batch=None)


def _mlp(x: Value, params: Parameters, prefix: str) -> Value:
    hidden = tape.relu(x @ params[f"{prefix}_w1"] + params[f"{prefix}_b1"])
    return hidden @ params[f"{prefix}_w2"] + params[f"{prefix}_b2"]


def classify(fg: FeatureGrid, params: Parameters) -> Value:
    """(H, W) scores, (B, H, W) for a batch; logits clamped to +-15 before the sigmoid"""
    logits = tape.clip(_mlp(fg.features, params, "cls"), -LOGIT_CLAMP, LOGIT_CLAMP)
    return tape.sigmoid(logits).reshape(*fg.map_shape)


def points_to_boxes(points: Value, params: Parameters) -> Value:
    """(B, n, 2) -> (B, 4) through the configured converter, clamped to the search image"""
    cfg = params.config
    if cfg.converter == "moment":
        boxes = convert_moment_value(points, params["log_lambda"])
    else:
        boxes = convert_minmax_value(points)
    return clamp_box_value(boxes, cfg.image_bounds)


def init_stage(fg: FeatureGrid, params: Parameters) -> Tuple[Value, Value]:
    """Point k of bin p = center_p + stride * offset_k"""
    n = params.config.n_points
    rows = fg.features.shape[0]
    offsets = _mlp(fg.features, params, "init").reshape(rows, n, 2)
    points = tape.constant(fg.row_centers().reshape(rows, 1, 2)) + fg.stride * offsets
    return points, points_to_boxes(points, params)


def sample_point_features(fg: FeatureGrid, points: Value) -> Value:
    """
    Bilinear interpolation of the feature grid at every point.

    Args:
        fg: feature grid
        points: (B, n, 2) image coordinates; for a batched grid B covers every bin
            of every scene and row r samples from scene r // (H*W)

    Returns:
        (B, n * F) features concatenated in point order
    """
    h, w = fg.grid_shape
    b, n, _ = points.shape
    f = fg.features.shape[1]
    if fg.batch is None:
        base = np.zeros(b * n, dtype=np.int64)
    else:
        if b != fg.batch * fg.n_bins:
            raise ValueError(f"Batched sampling needs one point set per bin ({fg.batch * fg.n_bins}), got {b}")
        base = np.repeat((np.arange(b) // fg.n_bins) * fg.n_bins, n)
    u = tape.clip(points[..., 0] / fg.stride - 0.5, 0.0, w - 1.0).reshape(b * n, 1)
    v = tape.clip(points[..., 1] / fg.stride - 0.5, 0.0, h - 1.0).reshape(b * n, 1)
    x0 = np.minimum(np.floor(u.data[:, 0]).astype(np.int64), w - 2)
    y0 = np.minimum(np.floor(v.data[:, 0]).astype(np.int64), h - 2)
    wx = u - x0.reshape(-1, 1).astype(np.float64)
    wy = v - y0.reshape(-1, 1).astype(np.float64)

    top_left = base + y0 * w + x0
    rows = np.concatenate([top_left, top_left + 1, top_left + w, top_left + w + 1])
    corners = fg.features[rows].reshape(4, b * n, f)
    ux, uy = 1.0 - wx, 1.0 - wy
    weights = tape.stack([ux * uy, wx * uy, ux * wy, wx * wy], axis=0)
    sampled = (corners * weights).sum(axis=0)
    return sampled.reshape(b, n * f)


def refine_residuals(fg: FeatureGrid, init_points: Value, params: Parameters) -> Value:
    """(B, n, 2) raw residual offsets read from the point-aligned features"""
    b, n, _ = init_points.shape
    return _mlp(sample_point_features(fg, init_points), params, "refine").reshape(b, n, 2)


def refine_stage(fg: FeatureGrid, init_points: Value, params: Parameters) -> Tuple[Value, Value]:
    """Refine point k = init point k + stride * delta_k"""
    points = init_points + fg.stride * refine_residuals(fg, init_points, params)
    return points, points_to_boxes(points, params)


def _head(fg: FeatureGrid, params: Parameters) -> HeadOutput:
    scores = classify(fg, params)
    init_points, init_boxes = init_stage(fg, params)
    refine_points, refine_boxes = refine_stage(fg, init_points, params)
    return HeadOutput(scores, init_points, refine_points, init_boxes, refine_boxes, fg.grid_shape, fg.batch)


def forward(template: np.ndarray, search: np.ndarray, params: Parameters) -> HeadOutput:
    return _head(encode(template, search, params), params)


def forward_batch(templates: Sequence[np.ndarray], searches: Sequence[np.ndarray],
                  params: Parameters) -> HeadOutput:
    """One graph for several scenes; scores are (B, H, W), points and boxes scene-major"""
    return _head(encode_batch(templates, searches, params), params)


def predict_box(template: np.ndarray, search: np.ndarray, params: Parameters) -> Box:
    """Inference: refine box at the highest-scoring bin"""
    return forward(template, search, params).predicted_box()


def predict_boxes(template: np.ndarray, searches: Sequence[np.ndarray], params: Parameters) -> List[Box]:
    """predict_box for many search images against one template"""
    return forward_batch([template] * len(searches), searches, params).predicted_boxes()


def save_checkpoint(path, params: Parameters, run_config: Optional[Dict] = None) -> Path:
    """JSON checkpoint; float repr makes the round trip bit-exact"""
    path = Path(path)
    payload = {
        "config": run_config or {},
        "model": asdict(params.config),
        "seed": params.seed,
        "parameters": {
            name: {"shape": list(v.data.shape), "data": [float(x) for x in v.data.reshape(-1)]}
            for name, v in params.values.items()
        },
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(payload, f)
    logger.info(f"Checkpoint written to {path}")
    return path


def load_checkpoint(path) -> Tuple[Parameters, Dict]:
    """
    Read a checkpoint written by save_checkpoint.

    Returns:
        (Parameters, the run config echo)
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    with open(path) as f:
        payload = json.load(f)
    known = {f.name for f in fields(ModelConfig)}
    cfg = ModelConfig(**{k: v for k, v in payload.get("model", {}).items() if k in known})
    expected = cfg.parameter_shapes()
    values: Dict[str, Value] = {}
    for name, shape in expected.items():
        entry = payload["parameters"].get(name)
        if entry is None:
            raise ValueError(f"Checkpoint {path} is missing parameter '{name}'")
        data = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        if data.shape != shape:
            raise ValueError(f"Parameter '{name}' has shape {data.shape}, expected {shape}")
        values[name] = tape.parameter(data)
    logger.info(f"Loaded checkpoint {path} ({sum(v.data.size for v in values.values())} weights)")
    return Parameters(values, cfg, int(payload.get("seed", 0))), payload.get("config", {})
