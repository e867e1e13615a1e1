"""Flat ``key = value`` run configuration shared by the command-line tools."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields

from .model import PRESETS, ModelConfig
from .pointcloud import AugmentParams
from .training import TrainConfig


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


@dataclass(frozen=True)
class RunConfig:
    preset: str = "desk"
    D: int | None = None  # overrides the preset's embedding width
    K: int | None = None
    L: int | None = None
    epochs: int = 60
    batch: int = 16
    lr: float = 1e-3
    balance: bool = True
    seeds: tuple[int, ...] = (0,)
    random_seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    k_folds: int = 4
    val_fraction: float = 0.1
    variant: str = "full"
    include_instances: bool = False
    embedding_seed: int = 0
    embeddings: str = ""
    aug_rotation: bool = False
    aug_jitter: float = 0.0
    aug_dropout: float = 0.0

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"preset must be one of {sorted(PRESETS)}, got {self.preset!r}")
        if not self.seeds or not self.random_seeds:
            raise ConfigError("seeds and random_seeds must list at least one seed")
        try:
            self.model_config()
            self.train_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def model_config(self) -> ModelConfig:
        base = PRESETS[self.preset]
        enc = base.encoder
        if self.D is not None:
            enc = dataclasses.replace(enc, head_widths=enc.head_widths[:-1] + (self.D,))
        return dataclasses.replace(
            base,
            encoder=enc,
            hidden=self.K if self.K is not None else base.hidden,
            layers=self.L if self.L is not None else base.layers,
            variant=self.variant,
            include_instances=self.include_instances,
            embedding_seed=self.embedding_seed,
        )

    def augment(self) -> AugmentParams:
        return AugmentParams(self.aug_rotation, self.aug_jitter, self.aug_dropout)

    def train_config(self, seed: int = 0) -> TrainConfig:
        return TrainConfig(self.epochs, self.batch, self.lr, seed, self.balance, self.augment())

    # --- text form -----------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = str(v).lower()
            elif v is None:
                v = ""
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def sha256(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def to_json(self) -> dict:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v) for f in fields(self)}

    @classmethod
    def parse(cls, text: str, where: str = "config") -> "RunConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{where}:{lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in kinds:
                raise ConfigError(f"{where}:{lineno}: unknown key {key!r}")
            if key in values:
                raise ConfigError(f"{where}:{lineno}: key {key!r} given twice")
            try:
                values[key] = _convert(kinds[key], value)
            except ValueError as exc:
                raise ConfigError(f"{where}:{lineno}: bad value for {key}: {exc}") from None
        return cls(**values)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.parse(fh.read(), str(path))


def _convert(kind: str, value: str):
    if kind == "bool":
        return _bool(value)
    if kind == "int":
        return int(value)
    if kind == "int | None":
        return int(value) if value else None
    if kind == "float":
        return float(value)
    if kind == "tuple[int, ...]":
        return _ints(value)
    return value
