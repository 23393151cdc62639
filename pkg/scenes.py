"""
Deterministic synthetic tracking scenes.

A scene is a grayscale search image holding one ellipse or rotated rectangle,
its tight pixel-support ground-truth box, and a template with the same shape
rendered centered. Sequences evolve the shape with a bounded random walk.
Everything is a pure function of (seed, id) through a SplitMix64 stream.
"""

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence as Seq, Tuple

import numpy as np

from geometry import Box

logger = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB

SHAPE_KINDS = ("ellipse", "rect")


def _mix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * MIX1) & MASK64
    z = ((z ^ (z >> 27)) * MIX2) & MASK64
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX2)
        return z ^ (z >> np.uint64(31))


class Rng:
    """SplitMix64: state += GAMMA, output = mix(state)"""

    def __init__(self, seed: int):
        self.state = seed & MASK64

    @classmethod
    def keyed(cls, seed: int, *keys: int) -> "Rng":
        """Independent stream for (seed, key, ...); each key is folded in with one mix"""
        h = seed & MASK64
        for key in keys:
            h = _mix64(((h ^ (key & MASK64)) + GAMMA) & MASK64)
        return cls(h)

    def next_u64(self) -> int:
        self.state = (self.state + GAMMA) & MASK64
        return _mix64(self.state)

    def next_block(self, n: int) -> np.ndarray:
        """The next n outputs at once, identical to n calls of next_u64"""
        with np.errstate(over="ignore"):
            steps = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(GAMMA)
            states = np.uint64(self.state) + steps
        self.state = (self.state + n * GAMMA) & MASK64
        return _mix64_array(states)

    def random(self) -> float:
        """Uniform in [0, 1) with 53 bits"""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def random_array(self, n: int) -> np.ndarray:
        return (self.next_block(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def uniform_array(self, n: int, lo: float, hi: float) -> np.ndarray:
        return lo + (hi - lo) * self.random_array(n)

    def normal_array(self, n: int) -> np.ndarray:
        """Box-Muller over two uniform blocks"""
        u1 = 1.0 - self.random_array(n)
        u2 = self.random_array(n)
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * math.pi * u2)


@dataclass
class SceneConfig:
    search_size: int = 64
    template_size: int = 32
    margin: int = 2
    min_area: float = 36.0
    background_max: float = 0.3
    intensity_range: Tuple[float, float] = (0.6, 1.0)
    noise_std: float = 0.05
    max_retries: int = 50
    sequence_length: int = 32
    max_step: float = 3.0
    scale_drift: Tuple[float, float] = (0.97, 1.03)
    rotation_drift: float = 0.1

    @property
    def size_bounds(self) -> Tuple[float, float]:
        lo = 0.07 * self.search_size
        hi = min(0.22 * self.search_size, self.template_size / 2.0 - 1.0)
        return lo, max(hi, lo)


@dataclass
class ShapeSpec:
    """Geometry of the rendered target; a/b are semi-axes or half-widths"""
    kind: str
    cx: float
    cy: float
    a: float
    b: float
    theta: float
    intensity: float

    def half_extent(self) -> Tuple[float, float]:
        c, s = abs(math.cos(self.theta)), abs(math.sin(self.theta))
        if self.kind == "ellipse":
            return (math.sqrt((self.a * c) ** 2 + (self.b * s) ** 2),
                    math.sqrt((self.a * s) ** 2 + (self.b * c) ** 2))
        return self.a * c + self.b * s, self.a * s + self.b * c


@dataclass
class Scene:
    template: np.ndarray
    search: np.ndarray
    gt: Box
    scene_id: int
    shape: Optional[ShapeSpec] = None


@dataclass
class Frame:
    image: np.ndarray
    gt: Box


@dataclass
class Sequence:
    frames: List[Frame]
    template: np.ndarray
    seq_id: int
    shapes: List[ShapeSpec] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def gts(self) -> List[Box]:
        return [f.gt for f in self.frames]


def support_mask(shape: ShapeSpec, size: int) -> np.ndarray:
    """Pixels whose centers fall inside the shape"""
    coords = np.arange(size) + 0.5
    px, py = np.meshgrid(coords, coords)
    dx, dy = px - shape.cx, py - shape.cy
    c, s = math.cos(shape.theta), math.sin(shape.theta)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    if shape.kind == "ellipse":
        return (u / shape.a) ** 2 + (v / shape.b) ** 2 <= 1.0
    return (np.abs(u) <= shape.a) & (np.abs(v) <= shape.b)


def tight_box(mask: np.ndarray) -> Optional[Box]:
    """Tight box of the support in continuous coordinates; pixel (r, c) covers [c, c+1) x [r, r+1)"""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return None
    return Box(float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))


def render(shape: ShapeSpec, size: int, rng: Rng, cfg: SceneConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Noisy background, flat-intensity shape, additive gaussian noise, clamped to [0, 1]"""
    n = size * size
    image = rng.uniform_array(n, 0.0, cfg.background_max).reshape(size, size)
    mask = support_mask(shape, size)
    image[mask] = shape.intensity
    image = image + cfg.noise_std * rng.normal_array(n).reshape(size, size)
    return np.clip(image, 0.0, 1.0), mask


def _box_ok(gt: Optional[Box], cfg: SceneConfig) -> bool:
    if gt is None:
        return False
    far = cfg.search_size - cfg.margin
    inside = gt.x1 >= cfg.margin and gt.y1 >= cfg.margin and gt.x2 <= far and gt.y2 <= far
    return inside and gt.area >= cfg.min_area


def _draw_shape(rng: Rng, cfg: SceneConfig) -> ShapeSpec:
    lo, hi = cfg.size_bounds
    kind = SHAPE_KINDS[0] if rng.random() < 0.5 else SHAPE_KINDS[1]
    theta = rng.uniform(0.0, math.pi)
    intensity = rng.uniform(*cfg.intensity_range)
    if kind == "ellipse":
        a, b = rng.uniform(lo, hi), rng.uniform(lo, hi)
    else:
        a, b = rng.uniform(0.8 * lo, 0.7 * hi), rng.uniform(0.8 * lo, 0.7 * hi)
    shape = ShapeSpec(kind, 0.0, 0.0, a, b, theta, intensity)
    ex, ey = shape.half_extent()
    room = cfg.margin + 1.0
    shape.cx = rng.uniform(room + ex, max(room + ex, cfg.search_size - room - ex))
    shape.cy = rng.uniform(room + ey, max(room + ey, cfg.search_size - room - ey))
    return shape


def _fallback_shape(cfg: SceneConfig) -> ShapeSpec:
    lo, hi = cfg.size_bounds
    half = cfg.search_size / 2.0
    return ShapeSpec("ellipse", half, half, 0.5 * (lo + hi), 0.5 * (lo + hi), 0.0, 0.8)


def generate_scene(seed: int, scene_id: int, cfg: SceneConfig = SceneConfig()) -> Scene:
    """
    Render one template/search pair.

    Shape draws are retried until the GT box keeps the margin and minimum area;
    after ``cfg.max_retries`` a centered ellipse is used instead.
    """
    rng = Rng.keyed(seed, scene_id)
    shape = None
    for _ in range(cfg.max_retries):
        candidate = _draw_shape(rng, cfg)
        if _box_ok(tight_box(support_mask(candidate, cfg.search_size)), cfg):
            shape = candidate
            break
    if shape is None:
        logger.warning(f"Scene ({seed}, {scene_id}): no valid draw after {cfg.max_retries} tries, using fallback")
        shape = _fallback_shape(cfg)

    search, mask = render(shape, cfg.search_size, rng, cfg)
    centered = replace(shape, cx=cfg.template_size / 2.0, cy=cfg.template_size / 2.0)
    template, _ = render(centered, cfg.template_size, rng, cfg)
    return Scene(template=template, search=search, gt=tight_box(mask), scene_id=scene_id, shape=shape)


def _reflect(value: float, lo: float, hi: float) -> float:
    if hi <= lo:
        return 0.5 * (lo + hi)
    while value < lo or value > hi:
        value = 2 * lo - value if value < lo else 2 * hi - value
    return value


def _step_shape(shape: ShapeSpec, base: ShapeSpec, rng: Rng, cfg: SceneConfig) -> ShapeSpec:
    """One random-walk step: shift, multiplicative scale drift, rotation drift"""
    lo, hi = cfg.size_bounds
    scale = rng.uniform(*cfg.scale_drift)
    limit_lo = (0.8 * lo if shape.kind == "rect" else lo) / min(base.a, base.b)
    limit_hi = (0.7 * hi if shape.kind == "rect" else hi) / max(base.a, base.b)
    current = shape.a / base.a
    new_scale = min(max(current * scale, limit_lo), max(limit_lo, limit_hi))
    moved = replace(shape,
                    a=base.a * new_scale,
                    b=base.b * new_scale,
                    theta=(shape.theta + rng.uniform(-cfg.rotation_drift, cfg.rotation_drift)) % math.pi)
    dx = rng.uniform(-cfg.max_step, cfg.max_step)
    dy = rng.uniform(-cfg.max_step, cfg.max_step)
    ex, ey = moved.half_extent()
    room = cfg.margin + 1.0
    moved.cx = _reflect(shape.cx + dx, room + ex, cfg.search_size - room - ex)
    moved.cy = _reflect(shape.cy + dy, room + ey, cfg.search_size - room - ey)
    return moved


def generate_sequence(seed: int, seq_id: int, cfg: SceneConfig = SceneConfig()) -> Sequence:
    """Frame 0 is generate_scene(seed, seq_id); later frames follow a bounded random walk"""
    if cfg.sequence_length < 2:
        raise ValueError(f"Sequences need at least 2 frames, got {cfg.sequence_length}")
    first = generate_scene(seed, seq_id, cfg)
    frames = [Frame(first.search, first.gt)]
    shapes = [first.shape]
    rng = Rng.keyed(seed, seq_id, 1)
    shape = first.shape
    for _ in range(1, cfg.sequence_length):
        shape = _step_shape(shape, first.shape, rng, cfg)
        image, mask = render(shape, cfg.search_size, rng, cfg)
        gt = tight_box(mask)
        if gt is None:
            # vanished shapes cannot happen with the size floor; keep the previous box
            gt = frames[-1].gt
        frames.append(Frame(image, gt))
        shapes.append(shape)
    return Sequence(frames=frames, template=first.template, seq_id=seq_id, shapes=shapes)


def write_pgm(path: Path, image: np.ndarray) -> None:
    """8-bit binary PGM"""
    pixels = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())


def dump_scenes(out_dir, scenes: Seq[Scene]) -> Path:
    """Write search/template PGMs and a JSON sidecar of GT boxes"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sidecar: Dict[str, Dict] = {}
    for scene in scenes:
        write_pgm(out_dir / f"scene_{scene.scene_id:05d}_search.pgm", scene.search)
        write_pgm(out_dir / f"scene_{scene.scene_id:05d}_template.pgm", scene.template)
        sidecar[str(scene.scene_id)] = {
            "gt": scene.gt.to_list(),
            "shape": scene.shape.kind if scene.shape else None,
        }
    sidecar_path = out_dir / "scenes.json"
    with open(sidecar_path, "w") as f:
        json.dump(sidecar, f, indent=2)
    logger.info(f"Dumped {len(scenes)} scenes to {out_dir}")
    return sidecar_path
