"""Run configuration: strict YAML schema with CLI flag overrides.

Unknown keys are rejected at every nesting level, and every command
writes its fully-resolved configuration beside its outputs so runs are
reproducible from the artifact directory alone.
"""

from dataclasses import asdict, dataclass, field, fields

import yaml

from mrfica.errors import DomainError


class ConfigError(DomainError):
    """Invalid or unknown run-configuration content."""


@dataclass
class SequenceConfig:
    t_points: int = 200
    tr_ms: float = 4.3
    te_ms: float = 2.0
    flip_seed: int = 1234
    flip_train_path: str = None


@dataclass
class GridConfig:
    step_factor: int = 5
    drop_zero: bool = True
    drop_t2_above_t1: bool = True


@dataclass
class PhantomConfig:
    width: int = 64
    height: int = 64
    seed: int = 11
    snap_to_grid: bool = True
    noise_sigma: float = 0.0


@dataclass
class TrainSection:
    lr: float = 15e-4
    batch: int = 512
    max_epochs: int = 100
    patience: int = 15
    val_fraction: float = 0.1


@dataclass
class ModelConfig:
    patch: int = 4
    stride: int = 1
    ratio: int = 4


@dataclass
class SelectConfig:
    method: str = "attention"
    n_channels: int = 40


@dataclass
class SweepConfig:
    channel_counts: list = field(default_factory=lambda: [100, 200, 300])
    patch_sizes: list = field(default_factory=lambda: [4, 8, 12, 16, 24])
    methods: list = field(default_factory=lambda: ["attention", "pca",
                                                   "random"])


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 1
    out_dir: str = "runs/out"
    svd_rank: int = 0
    folds: int = 1
    full_scale: bool = False
    sequence: SequenceConfig = field(default_factory=SequenceConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    train: TrainSection = field(default_factory=TrainSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    select: SelectConfig = field(default_factory=SelectConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)


_SECTIONS = {"sequence": SequenceConfig, "grid": GridConfig,
             "phantom": PhantomConfig, "train": TrainSection,
             "model": ModelConfig, "select": SelectConfig,
             "sweep": SweepConfig}


def _build(cls, data, path):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    return cls(**data)


def load_config(path=None):
    """Parse a YAML run configuration (defaults when ``path`` is None)."""
    if path is None:
        return RunConfig()
    with open(path, "r", encoding="utf-8") as fh:
        raw = yaml.safe_load(fh)
    if raw is None:
        return RunConfig()
    if not isinstance(raw, dict):
        raise ConfigError("top level: expected a mapping")
    top_known = {f.name for f in fields(RunConfig)}
    unknown = set(raw) - top_known
    if unknown:
        raise ConfigError(f"top level: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, value in raw.items():
        if key in _SECTIONS:
            kwargs[key] = _build(_SECTIONS[key], value, key)
        else:
            kwargs[key] = value
    return RunConfig(**kwargs)


def validate_config(cfg):
    if cfg.sequence.t_points < 1:
        raise ConfigError("sequence.t_points must be >= 1")
    if cfg.grid.step_factor < 1:
        raise ConfigError("grid.step_factor must be >= 1")
    if cfg.phantom.width < 8 or cfg.phantom.height < 8:
        raise ConfigError("phantom dimensions must be at least 8")
    if cfg.phantom.noise_sigma < 0:
        raise ConfigError("phantom.noise_sigma must be >= 0")
    if cfg.train.lr <= 0 or cfg.train.batch < 1 or cfg.train.max_epochs < 1 \
            or cfg.train.patience < 1:
        raise ConfigError("train section values must be positive")
    if not 0.0 < cfg.train.val_fraction < 1.0:
        raise ConfigError("train.val_fraction must lie in (0, 1)")
    if cfg.model.patch < 1 or cfg.model.stride < 1 or cfg.model.ratio < 1:
        raise ConfigError("model section values must be >= 1")
    if cfg.select.method not in ("attention", "pca", "random"):
        raise ConfigError(f"unknown select.method {cfg.select.method!r}")
    if cfg.folds < 1:
        raise ConfigError("folds must be >= 1")
    if cfg.svd_rank < 0:
        raise ConfigError("svd_rank must be >= 0")
    for m in cfg.sweep.methods:
        if m not in ("attention", "pca", "random"):
            raise ConfigError(f"unknown sweep method {m!r}")
    return cfg


def dump_config(cfg, path):
    """Write the fully-resolved configuration as YAML."""
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(asdict(cfg), fh, sort_keys=True,
                       default_flow_style=False)
