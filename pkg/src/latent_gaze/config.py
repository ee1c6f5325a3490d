"""Run configuration: a strict sectioned key=value file.

Every key has a default.  Unknown sections or keys are rejected, and values
are parsed with the type of their default.  The config hash is the SHA-256 of
the canonical JSON form and is embedded in every artifact.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .optics import NoiseConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    n_subjects_train: int = 40
    n_subjects_test: int = 8
    samples_per_subject: int = 500
    test_samples_per_subject: int = 250
    invalid_fraction: float = 0.08
    out_dir: str = "data"


@dataclass(frozen=True)
class LossWeights:
    lambda_sup: float = 1.0
    lambda_cls: float = 0.2
    lambda_gaze_distill: float = 0.5
    lambda_feat_distill: float = 0.0

    def __post_init__(self):
        vals = (self.lambda_sup, self.lambda_cls, self.lambda_gaze_distill,
                self.lambda_feat_distill)
        if min(vals) < 0 or max(vals) <= 0:
            raise ConfigError("loss weights must be >= 0 with at least one > 0")

    @property
    def distills(self) -> bool:
        return self.lambda_gaze_distill > 0 or self.lambda_feat_distill > 0


@dataclass(frozen=True)
class NoiseSection:
    readout_sigma: float = 0.002
    gain_jitter_sigma: float = 0.01
    enabled: bool = True

    def to_noise(self) -> NoiseConfig:
        return NoiseConfig(self.readout_sigma, self.gain_jitter_sigma, self.enabled)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 12
    batch_size: int = 128
    learning_rate: float = 1e-3
    mask_learning_rate: float = 0.05
    seed: int = 0
    bank_mode: str = "learned"
    mask_density: float = 0.5
    mask_init_scale: float = 1.0
    mask_init_block: int = 32
    n_masks: int = 16
    temperature_start: float = 1.0
    temperature_end: float = 0.05
    teacher_source: str = "mock"
    teacher_file: str = ""
    augment: bool = True
    activation: str = "relu"
    width: int = 256
    lr_decay: float = 0.1

    def __post_init__(self):
        if self.bank_mode not in ("learned", "random", "hadamard"):
            raise ConfigError(f"bank_mode must be learned|random|hadamard, got {self.bank_mode!r}")
        if self.teacher_source not in ("none", "file", "mock"):
            raise ConfigError(f"teacher_source must be none|file|mock, got {self.teacher_source!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if not (self.learning_rate > 0 and self.mask_learning_rate > 0):
            raise ConfigError("learning rates must be positive")
        if not (0 < self.temperature_end <= self.temperature_start):
            raise ConfigError("temperature schedule must satisfy 0 < end <= start")
        if self.mask_init_block < 1 or 256 % self.mask_init_block:
            raise ConfigError("mask_init_block must divide 256")
        if self.teacher_source == "file" and not self.teacher_file:
            raise ConfigError("teacher_source = file needs teacher_file")


@dataclass(frozen=True)
class CalibrationConfig:
    steps: int = 200
    lr_scale: float = 0.1
    k_values: str = "9,12,15"

    @property
    def ks(self) -> list[int]:
        return [int(k) for k in self.k_values.split(",") if k.strip()]


@dataclass(frozen=True)
class SteeringConfig:
    hidden: int = 128
    cycle_weight: float = 0.1
    steps: int = 6000
    batch_size: int = 256
    learning_rate: float = 1e-3
    identity_fraction: float = 0.1
    max_decoder_mae: float = 20.0


@dataclass(frozen=True)
class BenchConfig:
    runs: int = 2000
    warmup: int = 50
    external_sensing_us: float = -1.0


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    noise: NoiseSection = field(default_factory=NoiseSection)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    steering: SteeringConfig = field(default_factory=SteeringConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def with_overrides(self, **sections) -> "RunConfig":
        """``with_overrides(train={"epochs": 3})`` returns an updated copy."""
        new = self
        for sec, kv in sections.items():
            if not kv:
                continue
            cur = getattr(new, sec)
            _check_keys(sec, cur, kv)
            new = replace(new, **{sec: replace(cur, **kv)})
        return new

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return cls().with_overrides(**d)

    def to_ini(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"[{f.name}]")
            for k, v in asdict(getattr(self, f.name)).items():
                lines.append(f"{k} = {str(v).lower() if isinstance(v, bool) else v}")
            lines.append("")
        return "\n".join(lines)


def _check_keys(section, obj, kv):
    known = {f.name for f in fields(obj)}
    unknown = sorted(set(kv) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")


def _parse_value(section: str, key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as "
                          f"{type(default).__name__}") from None


def load_config(path=None, text: str | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is None and text is None:
        return cfg
    parser = configparser.ConfigParser(interpolation=None, strict=True)
    parser.optionxform = str
    try:
        if text is not None:
            parser.read_string(text)
        else:
            with open(path) as fh:
                parser.read_file(fh)
    except (configparser.Error, OSError) as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    sections = {f.name for f in fields(RunConfig)}
    overrides = {}
    for sec in parser.sections():
        if sec not in sections:
            raise ConfigError(f"unknown section [{sec}]")
        cur = getattr(cfg, sec)
        _check_keys(sec, cur, dict(parser[sec]))
        defaults = asdict(cur)
        overrides[sec] = {k: _parse_value(sec, k, v, defaults[k]) for k, v in parser[sec].items()}
    try:
        return cfg.with_overrides(**overrides)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def write_config(cfg: RunConfig, path) -> Path:
    Path(path).write_text(cfg.to_ini())
    return Path(path)
