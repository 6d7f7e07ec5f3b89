"""Run configuration and deterministic random-stream derivation."""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import yaml

from .errors import InvalidConfig

DATA_DIR_ENV = "ADAPTPLANNER_DATA_DIR"


def rng_stream(master_seed: int, label: str, *indices: int) -> np.random.Generator:
    """Independent counter-based generator for (master seed, component label, indices).

    Every stochastic operation in the package derives its stream here, so any
    run is reproducible from the master seed alone and components never share
    or race on generator state.
    """
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    label_words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    entropy = [int(master_seed) & 0xFFFFFFFF, *label_words, *[int(i) & 0xFFFFFFFF for i in indices]]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def derive_seed(master_seed: int, label: str, *indices: int) -> int:
    """Stable integer sub-seed for handing to APIs that take a seed."""
    return int(rng_stream(master_seed, label, *indices).integers(2**63))


def default_data_dir() -> Path:
    root = os.environ.get(DATA_DIR_ENV)
    return Path(root) if root else Path.cwd() / "artifacts"


@dataclass
class DiffusionConfig:
    n_steps: int = 64
    horizon: int = 128
    schedule: str = "cosine"

    def validate(self):
        if self.n_steps < 2:
            raise InvalidConfig("diffusion.n_steps must be >= 2")
        if self.horizon < 2:
            raise InvalidConfig("diffusion.horizon must be >= 2")
        if self.schedule not in ("cosine", "linear"):
            raise InvalidConfig(f"unknown schedule {self.schedule!r}")


@dataclass
class DenoiserConfig:
    width: int = 32
    blocks: int = 3
    kernel_size: int = 5
    embed_dim: int = 32
    groups: int = 8
    dilations: list | None = None  # default: 1, 4, 16, ... per block

    def resolved_dilations(self) -> tuple:
        if self.dilations is not None:
            return tuple(int(d) for d in self.dilations)
        return tuple(4**i for i in range(self.blocks))

    def validate(self):
        if self.width < 1 or self.blocks < 1:
            raise InvalidConfig("denoiser width and blocks must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise InvalidConfig("kernel_size must be odd and positive")
        if self.embed_dim < 2 or self.embed_dim % 2:
            raise InvalidConfig("embed_dim must be even and >= 2")
        if self.groups < 1:
            raise InvalidConfig("groups must be positive")
        if len(self.resolved_dilations()) != self.blocks:
            raise InvalidConfig("denoiser.dilations needs one value per block")


@dataclass
class TrainConfig:
    steps: int = 3000
    batch_size: int = 32
    lr: float = 2e-4

    def validate(self):
        if self.steps < 0:
            raise InvalidConfig("training.steps must be >= 0")
        if self.batch_size < 1:
            raise InvalidConfig("training.batch_size must be >= 1")
        if self.lr < 0:
            raise InvalidConfig("training.lr must be >= 0")


@dataclass
class GuidanceConfig:
    mode: str = "none"
    alpha: float = 0.0
    gamma: float = 1.0
    coin_norm: int = 2
    coin_smoothing: float = 1e-6

    def validate(self):
        if self.mode not in ("none", "return", "coin"):
            raise InvalidConfig(f"unknown guidance mode {self.mode!r}")
        if not (0.0 < self.gamma <= 1.0):
            raise InvalidConfig("guidance.gamma must lie in (0, 1]")
        if self.coin_norm not in (1, 2):
            raise InvalidConfig("coin_norm must be 1 or 2")
        if self.coin_smoothing <= 0:
            raise InvalidConfig("coin_smoothing must be positive")


@dataclass
class EvolutionConfig:
    phases: int = 1
    n_tasks: int = 18
    per_task: int = 2
    attempt_factor: int = 20
    finetune_divisor: int = 4
    coin_tasks: int = 0
    deviation_max: float | None = None  # default 2 * v_max * dt at runtime
    rule_c1: float | None = None
    rule_c2: float | None = None
    rule_c3: float | None = None
    rule_weight: float = 1.0

    def validate(self):
        if self.phases < 1:
            raise InvalidConfig("evolution.phases must be >= 1")
        if self.n_tasks < 1 or self.per_task < 1:
            raise InvalidConfig("evolution.n_tasks and per_task must be >= 1")
        if self.attempt_factor < 1:
            raise InvalidConfig("evolution.attempt_factor must be >= 1")
        if self.finetune_divisor < 1:
            raise InvalidConfig("evolution.finetune_divisor must be >= 1")


@dataclass
class EvalConfig:
    suite: str = "random"
    n_tasks: int = 20
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])

    def validate(self):
        if self.suite not in ("random", "hard", "coin"):
            raise InvalidConfig(f"unknown eval suite {self.suite!r}")
        if len(self.seeds) < 3:
            raise InvalidConfig("eval.seeds needs at least 3 entries")


@dataclass
class RunConfig:
    """Everything a command needs; flags override file values, file overrides defaults."""

    maze: str = "umaze"
    seed: int = 0
    env: dict = field(default_factory=dict)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    evolution: EvolutionConfig = field(default_factory=EvolutionConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self):
        for section in (
            self.diffusion, self.denoiser, self.training,
            self.guidance, self.evolution, self.eval,
        ):
            section.validate()

    def to_dict(self) -> dict:
        return asdict(self)


# Defaults keyed by bundled maze; anything that scales with the layout.
# n_steps/horizon follow the published per-maze sizes; dilations keep the
# denoiser's receptive field at least the horizon.
MAZE_PRESETS = {
    "umaze": {"diffusion": {"n_steps": 64, "horizon": 128}, "dilations": [1, 4, 16]},
    "medium": {"diffusion": {"n_steps": 128, "horizon": 192}, "dilations": [1, 6, 24]},
    "large": {"diffusion": {"n_steps": 256, "horizon": 384}, "dilations": [1, 12, 48]},
}

_SECTION_TYPES = {
    "diffusion": DiffusionConfig,
    "denoiser": DenoiserConfig,
    "training": TrainConfig,
    "guidance": GuidanceConfig,
    "evolution": EvolutionConfig,
    "eval": EvalConfig,
}


def make_run_config(maze: str = "umaze", **sections) -> RunConfig:
    """RunConfig with per-maze presets applied before explicit overrides."""
    cfg = RunConfig(maze=maze)
    preset = MAZE_PRESETS.get(maze, {})
    cfg.diffusion = DiffusionConfig(**preset.get("diffusion", {}))
    if "dilations" in preset:
        cfg.denoiser.dilations = list(preset["dilations"])
    for key, value in sections.items():
        _apply_section(cfg, key, value)
    cfg.validate()
    return cfg


def _apply_section(cfg: RunConfig, key: str, value) -> None:
    if key in ("maze", "seed"):
        setattr(cfg, key, value)
        return
    if key == "env":
        if not isinstance(value, dict):
            raise InvalidConfig("env section must be a mapping")
        cfg.env.update(value)
        return
    if key not in _SECTION_TYPES:
        raise InvalidConfig(f"unknown config section {key!r}")
    if not isinstance(value, dict):
        raise InvalidConfig(f"config section {key!r} must be a mapping")
    section = getattr(cfg, key)
    for name, entry in value.items():
        if not hasattr(section, name):
            raise InvalidConfig(f"unknown key {key}.{name}")
        setattr(section, name, entry)


def load_run_config(path: str | Path | None, **overrides) -> RunConfig:
    """Load a YAML config file and apply keyword overrides on top."""
    data: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise InvalidConfig(f"config file {path} does not exist")
        loaded = yaml.safe_load(path.read_text())
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise InvalidConfig("config file must hold a mapping at top level")
        data.update(loaded)
    maze = overrides.pop("maze", data.pop("maze", "umaze"))
    cfg = make_run_config(maze=maze, **data)
    for key, value in overrides.items():
        if value is None:
            continue
        if key == "seed":
            cfg.seed = int(value)
        elif "." in key:
            section, name = key.split(".", 1)
            _apply_section(cfg, section, {name: value})
        else:
            _apply_section(cfg, key, value)
    cfg.validate()
    return cfg
