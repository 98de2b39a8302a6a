"""Experiment configuration: flat ``key = value`` INI sections, one per module.

See ``docs/config.md`` for every key.
"""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields, replace
import hashlib
import json
from pathlib import Path

from .model import ModelConfig
from .roofline import RooflineConfig
from .tasks import KINDS, TaskConfig
from .training import TrainConfig

STAGES = ("pyramid", "train", "evaluate", "oracle", "roofline", "compare")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    train_color: int = 2000
    train_glyph: int = 4000
    test_color: int = 300
    test_glyph: int = 600

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 1:
                raise ValueError(f"data.{f.name} must be >= 1")

    @property
    def train_counts(self) -> dict[str, int]:
        return dict(zip(KINDS, (self.train_color, self.train_glyph)))

    @property
    def test_counts(self) -> dict[str, int]:
        return dict(zip(KINDS, (self.test_color, self.test_glyph)))


@dataclass(frozen=True)
class RunConfig:
    run_id: str = "default"
    seed: int = 0
    stages: tuple[str, ...] = STAGES
    compare_k: tuple[int, ...] = (1, 9, 36, 144)
    text_tokens: int = 30
    visual_tokens: tuple[int, ...] = (576, 144, 36, 9, 1)

    def __post_init__(self):
        bad = [s for s in self.stages if s not in STAGES]
        if bad:
            raise ValueError(f"unknown stages {bad}; expected a subset of {STAGES}")
        if not self.run_id or any(c in self.run_id for c in "/\\"):
            raise ValueError(f"run_id must be a plain name, got {self.run_id!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    run: RunConfig = field(default_factory=RunConfig)
    data: DataConfig = field(default_factory=DataConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    model: dict = field(default_factory=dict)  # ModelConfig overrides on top of the task geometry
    train: TrainConfig = field(default_factory=TrainConfig)
    roofline: RooflineConfig = field(default_factory=RooflineConfig)

    def model_config(self) -> ModelConfig:
        return ModelConfig.for_task(self.task, **self.model)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, run=replace(self.run, seed=seed), train=replace(self.train, seed=seed))

    def to_dict(self) -> dict:
        return {
            "run": asdict(self.run),
            "data": asdict(self.data),
            "task": asdict(self.task),
            "model": self.model_config().to_dict(),
            "train": self.train.to_dict(),
            "roofline": self.roofline.to_dict(),
        }

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


_MODEL_KEYS = ("width", "heads", "layers", "channels", "max_seq", "ffn_mult")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.replace(" ", "").split(",") if x)


def _typed(cls, section: dict) -> dict:
    types = {f.name: f.type for f in fields(cls)}
    unknown = set(section) - set(types)
    if unknown:
        raise ConfigError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    out = {}
    for k, v in section.items():
        t = types[k]
        if t == "int":
            out[k] = int(v)
        elif t == "float":
            out[k] = float(v)
        elif t.startswith("tuple"):
            out[k] = tuple(x.strip() for x in v.split(",")) if "str" in t else _ints(v)
        else:
            out[k] = v
    return out


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(str(e)) from None
    known = {"run", "data", "task", "model", "train", "roofline"}
    extra = set(parser.sections()) - known
    if extra:
        raise ConfigError(f"unknown sections: {sorted(extra)}")
    sec = {name: dict(parser[name]) if parser.has_section(name) else {} for name in known}
    try:
        run = RunConfig(**_typed(RunConfig, sec["run"]))
        model = {}
        for k, v in sec["model"].items():
            if k not in _MODEL_KEYS:
                raise ConfigError(f"unknown model key {k!r}; expected one of {_MODEL_KEYS}")
            model[k] = int(v)
        train_kw = dict(sec["train"])
        train_kw.setdefault("seed", str(run.seed))
        cfg = ExperimentConfig(
            run=run,
            data=DataConfig(**_typed(DataConfig, sec["data"])),
            task=TaskConfig(**_typed(TaskConfig, sec["task"])),
            model=model,
            train=TrainConfig.from_mapping(train_kw),
            roofline=RooflineConfig.from_mapping(sec["roofline"]),
        )
        cfg.model_config()
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    return cfg


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse_config(text)
