"""Run configuration file: one JSON document with model, train, data, task and harness sections."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .harness import HarnessConfig
from .model import ConfigError, ModelConfig
from .training import TrainConfig

SECTIONS = ("seed", "model", "train", "data", "task", "harness")
# filled in from the data and the task, never from the file
DERIVED_MODEL_KEYS = ("vocab_size", "task", "n_labels")


@dataclass
class DataConfig:
    valid_speakers: list[str] = field(default_factory=list)
    bpe_size: int = 0  # 0 keeps a character vocabulary

    def __post_init__(self):
        if self.bpe_size < 0:
            raise ConfigError("bpe_size must be >= 0")


@dataclass
class TaskConfig:
    name: str = "intent"  # intent | sentiment

    def __post_init__(self):
        if self.name not in ("intent", "sentiment"):
            raise ConfigError(f"task.name must be intent or sentiment, got {self.name!r}")


def _section(cls, raw, what: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"section {what!r} must be an object")
    unknown = set(raw) - set(cls.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown keys in {what}: {sorted(unknown)}")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"bad {what} section: {exc}") from exc


@dataclass
class RunConfig:
    seed: int = 0
    model: dict = field(default_factory=dict)  # ModelConfig fields except the derived ones
    train: TrainConfig = field(default_factory=TrainConfig)
    pretrain: TrainConfig | None = None  # train.pretrain overrides, merged
    data: DataConfig = field(default_factory=DataConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    harness: HarnessConfig = field(default_factory=HarnessConfig)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(raw) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
        seed = raw.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise ConfigError("seed must be an integer")
        model = dict(raw.get("model") or {})
        derived = [k for k in DERIVED_MODEL_KEYS if k in model]
        if derived:
            raise ConfigError(f"model keys {derived} are derived from the data and may not be set")
        unknown = set(model) - set(ModelConfig.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown keys in model: {sorted(unknown)}")
        train_raw = dict(raw.get("train") or {})
        pre_raw = train_raw.pop("pretrain", None)
        train = _section(TrainConfig, train_raw, "train")
        pretrain = None
        if pre_raw is not None:
            if not isinstance(pre_raw, dict):
                raise ConfigError("train.pretrain must be an object")
            pretrain = _section(TrainConfig, {**train_raw, **pre_raw}, "train.pretrain")
        cfg = cls(seed, model, train, pretrain, _section(DataConfig, raw.get("data"), "data"),
                  _section(TaskConfig, raw.get("task"), "task"),
                  _section(HarnessConfig, raw.get("harness"), "harness"))
        # validate the model section now with placeholder derived values
        cfg.model_config(vocab_size=64, n_labels=1)
        return cfg.with_seed(seed)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(raw)

    def with_seed(self, seed: int) -> "RunConfig":
        """Route one seed to every component."""
        return replace(self, seed=seed, model={**self.model, "seed": seed},
                       train=replace(self.train, seed=seed),
                       pretrain=replace(self.pretrain, seed=seed) if self.pretrain else None,
                       harness=replace(self.harness, seed=seed))

    def model_config(self, vocab_size: int, n_labels: int = 0, task: str | None = None) -> ModelConfig:
        task = task or self.task.name
        try:
            return ModelConfig.from_dict({**self.model, "vocab_size": vocab_size, "task": task,
                                          "n_labels": n_labels if task != "asr" else 0})
        except TypeError as exc:
            raise ConfigError(f"bad model section: {exc}") from exc

    def pretrain_config(self) -> TrainConfig:
        return self.pretrain or replace(self.train, freeze_encoder=False)

    def to_dict(self) -> dict:
        train = self.train.to_dict()
        if self.pretrain is not None:
            train["pretrain"] = self.pretrain.to_dict()
        return {"seed": self.seed, "model": dict(sorted(self.model.items())), "train": train,
                "data": asdict(self.data), "task": asdict(self.task), "harness": self.harness.to_dict()}

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]
