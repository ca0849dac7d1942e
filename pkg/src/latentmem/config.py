"""Run configuration loaded from TOML.

Training keys mirror the hyperparameter table names (``batch_size``,
``epoch``, ``warmup_ratio``, ``num_iteration``, ``learning_rate``,
``group_size``, ``clip_ratio``, ``kl_penalty_coefficient``,
``target_kl_per_token``, ``penalty_intensity``; adapter keys ``rank``,
``alpha``, ``drop_out_rate``, ``target_module``).  Everything else is a desk
knob with a documented default.
"""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields

from .pretrain import PretrainConfig
from .tasks import FAMILIES
from .vlm import ModelConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

STAGES = ("I", "II")
PHASES = ("delimiter", "anywhere")


class ConfigError(ValueError):
    pass


@dataclass
class StageConfig:
    stage: str
    learning_rate: float
    warmup_ratio: float
    epoch: int = 2
    batch_size: int = 1
    group_size: int = 16
    clip_ratio: float = 0.2
    kl_penalty_coefficient: float = 0.015
    target_kl_per_token: float = 0.03
    penalty_intensity: float | None = None
    num_iteration: int = 1
    optimizer: str = "AdamW"
    scheduler: str = "Cosine"
    weight_decay: float = 0.0
    tasks_per_epoch: int = 500
    families: tuple[str, ...] = ("retrieve",)
    temperature: float = 1.0
    max_new_tokens: int = 8
    memory_sigma: float = 0.05
    sigma_anneal: float = 0.5
    curriculum: tuple[str, ...] = ("delimiter", "anywhere")
    force_prob: tuple[float, ...] = (1.0, 0.5)
    early_stop: bool = True
    task_seed_base: int = 1_000_000

    def __post_init__(self):
        self.families = tuple(self.families)
        self.curriculum = tuple(self.curriculum)
        self.force_prob = tuple(float(p) for p in self.force_prob)
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if (self.penalty_intensity is not None) != (self.stage == "II"):
            raise ConfigError("penalty_intensity must be set for stage II and only for stage II")
        if self.num_iteration != 1:
            raise ConfigError("only num_iteration = 1 is supported")
        if self.optimizer != "AdamW" or self.scheduler != "Cosine":
            raise ConfigError("only the AdamW optimizer with the Cosine scheduler is implemented")
        if self.group_size < 2:
            raise ConfigError("group_size must be >= 2")
        if min(self.batch_size, self.epoch, self.tasks_per_epoch) < 1:
            raise ConfigError("batch_size, epoch and tasks_per_epoch must be >= 1")
        if not set(self.families) <= set(FAMILIES):
            raise ConfigError(f"unknown families in {self.families}")
        if not set(self.curriculum) <= set(PHASES):
            raise ConfigError(f"curriculum phases must come from {PHASES}")
        if len(self.force_prob) != len(self.curriculum):
            raise ConfigError("force_prob needs one entry per curriculum phase")

    @property
    def steps_per_epoch(self) -> int:
        return max(1, self.tasks_per_epoch // self.batch_size)

    @property
    def total_steps(self) -> int:
        return self.epoch * self.steps_per_epoch

    def phase(self, epoch: int) -> tuple[str, float]:
        """Curriculum phase and forcing probability for a 0-based epoch."""
        i = min(epoch, len(self.curriculum) - 1)
        return self.curriculum[i], self.force_prob[i]


def stage1_defaults() -> StageConfig:
    return StageConfig(stage="I", learning_rate=1e-3, warmup_ratio=0.2,
                       kl_penalty_coefficient=0.015, target_kl_per_token=0.03)


def stage2_defaults() -> StageConfig:
    return StageConfig(stage="II", learning_rate=1e-3, warmup_ratio=0.1,
                       kl_penalty_coefficient=0.030, target_kl_per_token=0.05,
                       penalty_intensity=0.3, tasks_per_epoch=150,
                       families=("retrieve", "rule", "mixed"), memory_sigma=0.0,
                       curriculum=("anywhere",), force_prob=(0.0,))


@dataclass
class EvalConfig:
    suite_size: int = 200
    families: tuple[str, ...] = ("retrieve", "rule", "mixed")
    task_seed_base: int = 10_000_000
    max_new_tokens: int = 8
    temperature: float = 1.0
    samples_per_task: int = 4

    def __post_init__(self):
        self.families = tuple(self.families)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    stage1: StageConfig = field(default_factory=stage1_defaults)
    stage2: StageConfig = field(default_factory=stage2_defaults)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return asdict(self)


def _build(cls, data: dict, base=None, section: str = ""):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    values = asdict(base) if base is not None else {}
    values.update(data)
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


def from_dict(data: dict) -> RunConfig:
    sections = {"model", "pretrain", "stage1", "stage2", "eval"}
    unknown = set(data) - sections
    if unknown:
        raise ConfigError(f"unknown sections: {sorted(unknown)}")
    d = RunConfig()
    return RunConfig(
        model=_build(ModelConfig, data.get("model", {}), d.model, "model"),
        pretrain=_build(PretrainConfig, data.get("pretrain", {}), d.pretrain, "pretrain"),
        stage1=_build(StageConfig, data.get("stage1", {}), d.stage1, "stage1"),
        stage2=_build(StageConfig, data.get("stage2", {}), d.stage2, "stage2"),
        eval=_build(EvalConfig, data.get("eval", {}), d.eval, "eval"),
    )


def load(path) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid TOML: {exc}") from exc
    try:
        return from_dict(data)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
