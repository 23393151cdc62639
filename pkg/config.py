"""
Run configuration: the RunConfig dataclass and its flat JSON form.

Config files are a single JSON object whose keys are the fields of RunConfig and of
the nested assigner, loss and model settings, all at top level. Unknown keys and
wrongly typed values are rejected so an ablation switch can never be silently ignored.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from assigner import AssignerConfig, Strategy
from loss import LossWeights, SampleMode
from model import ModelConfig
from scenes import SceneConfig

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Malformed, unknown or ill-typed configuration"""


@dataclass
class RunConfig:
    seed: int = 42
    epochs: int = 30
    scenes_per_epoch: int = 1000
    batch_size: int = 32
    lr: float = 1e-3
    lr_drop_factor: float = 0.1
    lr_drop_at: float = 0.8
    weight_decay: float = 1e-4
    grad_clip: float = 10.0
    corr_sample_mode: str = "pos"
    truncate: bool = True
    overfit: bool = False
    log_wall_time: bool = False
    eval_sequences: int = 64
    eval_seed: Optional[int] = None
    sequence_length: int = 32
    assigner: AssignerConfig = field(default_factory=AssignerConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        self.corr_sample_mode = SampleMode(self.corr_sample_mode).value
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not 1 <= self.batch_size <= self.scenes_per_epoch:
            raise ConfigError(f"batch_size must lie in [1, scenes_per_epoch={self.scenes_per_epoch}], "
                              f"got {self.batch_size}")
        if self.lr < 0 or self.weight_decay < 0 or self.grad_clip <= 0:
            raise ConfigError("lr and weight_decay must be non-negative and grad_clip positive")
        if not 0.0 < self.lr_drop_at <= 1.0:
            raise ConfigError(f"lr_drop_at must lie in (0, 1], got {self.lr_drop_at}")
        if self.eval_sequences < 1 or self.sequence_length < 2:
            raise ConfigError("eval_sequences must be >= 1 and sequence_length >= 2")
        self.assigner.validate(self.model.grid * self.model.grid)

    @property
    def lr_drop_epoch(self) -> int:
        """First (0-based) epoch trained at the dropped rate"""
        return math.ceil(self.lr_drop_at * self.epochs)

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_drop_factor if epoch >= self.lr_drop_epoch else self.lr

    @property
    def scene_config(self) -> SceneConfig:
        return SceneConfig(search_size=self.model.search_size,
                           template_size=self.model.template_size,
                           sequence_length=self.sequence_length)

    @property
    def resolved_eval_seed(self) -> int:
        return self.seed if self.eval_seed is None else self.eval_seed


# Flat key -> owning section ("run" means a top-level RunConfig field)
_SECTIONS = {"assigner": AssignerConfig, "loss_weights": LossWeights, "model": ModelConfig}
_NULLABLE = {"top_k", "eval_seed"}


def _flat_schema() -> Dict[str, Tuple[str, Any]]:
    schema: Dict[str, Tuple[str, Any]] = {}
    for f in fields(RunConfig):
        if f.name not in _SECTIONS:
            schema[f.name] = ("run", f.default)
    for section, cls in _SECTIONS.items():
        for f in fields(cls):
            schema[f.name] = (section, f.default)
    return schema


FLAT_SCHEMA = _flat_schema()
FLAT_KEYS = list(FLAT_SCHEMA)


def _check_type(key: str, value: Any, default: Any) -> Any:
    if value is None:
        if key in _NULLABLE:
            return None
        raise ConfigError(f"Config key '{key}' may not be null")
    if key in _NULLABLE or isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"Config key '{key}' expects an integer, got {value!r}")
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"Config key '{key}' expects true/false, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"Config key '{key}' expects a number, got {value!r}")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"Config key '{key}' expects a string, got {value!r}")
    return value


def from_flat(flat: Dict[str, Any], base: Optional[RunConfig] = None) -> RunConfig:
    """Build a RunConfig from flat keys, starting from ``base`` (defaults if None)"""
    if not isinstance(flat, dict):
        raise ConfigError(f"Config must be a JSON object, got {type(flat).__name__}")
    unknown = sorted(set(flat) - set(FLAT_SCHEMA))
    if unknown:
        raise ConfigError(f"Unknown config keys: {', '.join(unknown)}")
    merged = to_flat(base) if base is not None else {}
    merged.update(flat)

    buckets: Dict[str, Dict[str, Any]] = {"run": {}, **{s: {} for s in _SECTIONS}}
    for key, value in merged.items():
        section, default = FLAT_SCHEMA[key]
        buckets[section][key] = _check_type(key, value, default)
    try:
        sections = {name: cls(**buckets[name]) for name, cls in _SECTIONS.items()}
        return RunConfig(**buckets["run"], **sections)
    except ConfigError:
        raise
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from e


def to_flat(cfg: RunConfig) -> Dict[str, Any]:
    """Flat dict with every key; enums become their string values"""
    flat: Dict[str, Any] = {}
    for f in fields(RunConfig):
        if f.name not in _SECTIONS:
            flat[f.name] = getattr(cfg, f.name)
    for section in _SECTIONS:
        for key, value in asdict(getattr(cfg, section)).items():
            flat[key] = value.value if hasattr(value, "value") else value
    return flat


def load_config(path) -> RunConfig:
    """
    Read a flat JSON config file.

    Raises:
        FileNotFoundError: the file does not exist
        ConfigError: malformed JSON (with line and column), unknown keys or bad types
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")
    try:
        with open(path) as f:
            flat = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}") from e
    cfg = from_flat(flat)
    logger.info(f"Loaded config from {path}")
    return cfg


def save_config(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(to_flat(cfg), f, indent=2)
    return path


def apply_overrides(cfg: RunConfig, overrides: Dict[str, Any]) -> RunConfig:
    return from_flat(overrides, base=cfg)


SHORTHAND_STRATEGIES = tuple(s.value for s in Strategy)


def variant_overrides(name: str) -> Dict[str, Any]:
    """
    Overrides for a shorthand variant name such as ``iv`` or ``iv+lead``.

    ``one2one`` is the baseline row and also switches the correlation loss off.
    """
    base, _, suffix = name.partition("+")
    if base not in SHORTHAND_STRATEGIES or suffix not in ("", "lead"):
        raise ConfigError(f"Unknown variant '{name}'; expected one of {SHORTHAND_STRATEGIES} "
                          f"optionally suffixed with '+lead'")
    overrides: Dict[str, Any] = {"strategy": base, "leading": suffix == "lead"}
    if base == Strategy.ONE_TO_ONE.value:
        overrides["lambda_corr"] = 0.0
    return overrides


def load_variants_file(path) -> List[Tuple[str, Dict[str, Any]]]:
    """JSON list of {"name": ..., "overrides": {...}}"""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Variants file not found: {path}")
    try:
        with open(path) as f:
            entries = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}") from e
    if not isinstance(entries, list) or not entries:
        raise ConfigError(f"{path}: expected a non-empty JSON list of variants")
    variants = []
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict) or "name" not in entry:
            raise ConfigError(f"{path}: variant #{i} needs a 'name'")
        overrides = entry.get("overrides", {})
        unknown = sorted(set(overrides) - set(FLAT_SCHEMA))
        if unknown:
            raise ConfigError(f"{path}: variant '{entry['name']}' has unknown keys: {', '.join(unknown)}")
        variants.append((str(entry["name"]), dict(overrides)))
    return variants
