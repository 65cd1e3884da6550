"""Experiment configuration: one flat INI section, validated, with CLI overrides.

Example::

    [experiment]
    dataset = synthetic
    strategies = efpkd, fedavg
    seeds = 0, 1, 2
    n_clients = 10
    delta = 0.9
    desk_scale = true

Keys left unset fall back to the dataset profile (rounds, batch size, top-k,
temperature) and then to the field defaults below.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .data import PROFILES
from .fl import DISTANCES, STRATEGIES, RoundConfig

SECTION = "experiment"
DATASETS = ("nsl-kdd", "unsw-nb15", "iotid20", "synthetic", "generic")
DESK_TRAIN_CAP = 10_000
DESK_TEST_CAP = 2_000
DESK_TEACHER_CONV = (32, 64, 128)


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    dataset: str = "synthetic"
    train_path: str | None = None
    test_path: str | None = None
    label_column: str | None = None  # generic CSVs only
    normal_value: str | None = None  # generic CSVs only
    mode: str = "binary"
    n_clients: int = 10
    delta: float = 0.9
    strategies: tuple[str, ...] = ("efpkd",)
    seeds: tuple[int, ...] = (0,)
    top_k: int | None = None
    availability_probability: float = 0.9
    rounds: int | None = None
    local_epochs: int = 5
    batch_size: int | None = None
    psi: float = 0.1
    gamma: float = 1.0
    zeta: float | None = None
    student_lr: float = 1e-4
    lr_decay: float = 0.97
    teacher_lr: float = 1e-3
    teacher_epochs: int = 5
    distance: str = "l2sq"
    proto_mean_normalized: bool = False
    fedprox_mu: float = 0.01
    student_conv: tuple[int, ...] = (64, 128)
    student_hidden: int = 64
    teacher_conv: tuple[int, ...] = (512, 1024, 2048)
    teacher_hidden: int = 512
    desk_scale: bool = False
    train_cap: int | None = None
    test_cap: int | None = None
    data_seed: int = 0
    synthetic_train: int = 10_000
    synthetic_test: int = 2_000
    synthetic_overlap: float = 0.3
    out: str = "runs"

    # -- derived values ---------------------------------------------------

    @property
    def profile(self):
        from .data import DatasetProfile

        if self.dataset == "generic":
            return DatasetProfile("generic", label_column=self.label_column or "label",
                                  normal_value=self.normal_value or "normal")
        return PROFILES[self.dataset]

    @property
    def effective_train_cap(self) -> int | None:
        if self.desk_scale:
            return min(self.train_cap or DESK_TRAIN_CAP, DESK_TRAIN_CAP)
        return self.train_cap

    @property
    def effective_test_cap(self) -> int | None:
        if self.desk_scale:
            return min(self.test_cap or DESK_TEST_CAP, DESK_TEST_CAP)
        return self.test_cap

    def round_config(self, strategy: str, seed: int) -> RoundConfig:
        p = self.profile
        return RoundConfig(
            strategy=strategy,
            rounds=self.rounds if self.rounds is not None else p.rounds,
            local_epochs=self.local_epochs,
            batch_size=self.batch_size if self.batch_size is not None else p.batch_size,
            psi=self.psi,
            gamma=self.gamma,
            zeta=self.zeta if self.zeta is not None else p.zeta,
            student_lr=self.student_lr,
            lr_decay=self.lr_decay,
            teacher_lr=self.teacher_lr,
            teacher_epochs=self.teacher_epochs,
            availability_probability=self.availability_probability,
            distance=self.distance,
            proto_mean_normalized=self.proto_mean_normalized,
            fedprox_mu=self.fedprox_mu,
            student_conv=tuple(self.student_conv),
            student_hidden=self.student_hidden,
            teacher_conv=DESK_TEACHER_CONV if self.desk_scale else tuple(self.teacher_conv),
            teacher_hidden=self.teacher_hidden,
            seed=seed,
        )

    # -- validation ---------------------------------------------------------

    def validate(self) -> "ExperimentConfig":
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {', '.join(DATASETS)}")
        if self.dataset != "synthetic" and not self.train_path:
            raise ConfigError(f"dataset {self.dataset!r} needs train_path")
        if self.dataset == "generic" and not self.label_column:
            raise ConfigError("generic datasets need label_column")
        if self.mode not in ("binary", "multi"):
            raise ConfigError("mode must be binary or multi")
        if self.n_clients < 1:
            raise ConfigError("n_clients must be >= 1")
        if not self.delta > 0:
            raise ConfigError("delta must be > 0")
        if not self.strategies:
            raise ConfigError("at least one strategy is required")
        for s in self.strategies:
            if s not in STRATEGIES:
                raise ConfigError(f"unknown strategy {s!r}; choose from {', '.join(STRATEGIES)}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.top_k is not None and self.top_k < 1:
            raise ConfigError("top_k must be >= 1")
        if self.distance not in DISTANCES:
            raise ConfigError(f"distance must be one of {', '.join(sorted(DISTANCES))}")
        if not 0 <= self.synthetic_overlap <= 1:
            raise ConfigError("synthetic_overlap must be in [0, 1]")
        for cap in (self.train_cap, self.test_cap):
            if cap is not None and cap < 1:
                raise ConfigError("subsample caps must be >= 1")
        try:
            for s in self.strategies:
                self.round_config(s, self.seeds[0]).validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    # -- serialisation ------------------------------------------------------

    def to_ini(self) -> str:
        lines = [f"[{SECTION}]"]
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if value is None:
                continue
            if isinstance(value, (tuple, list)):
                value = ", ".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
_INT_TUPLES = {"seeds", "student_conv", "teacher_conv"}
_STR_TUPLES = {"strategies"}
_BOOLS = {"proto_mean_normalized", "desk_scale"}
_INTS = {"n_clients", "top_k", "rounds", "local_epochs", "batch_size", "teacher_epochs", "student_hidden",
         "teacher_hidden", "train_cap", "test_cap", "data_seed", "synthetic_train", "synthetic_test"}
_FLOATS = {"delta", "availability_probability", "psi", "gamma", "zeta", "student_lr", "lr_decay", "teacher_lr",
           "fedprox_mu", "synthetic_overlap"}


def parse_value(key: str, text: str):
    if key not in _FIELDS:
        raise ConfigError(f"unknown configuration key {key!r}")
    text = text.strip()
    try:
        if key in _INT_TUPLES:
            return tuple(int(v) for v in text.split(",") if v.strip())
        if key in _STR_TUPLES:
            return tuple(v.strip() for v in text.split(",") if v.strip())
        if key in _BOOLS:
            low = text.lower()
            if low not in ("true", "false", "yes", "no", "1", "0"):
                raise ValueError(text)
            return low in ("true", "yes", "1")
        if key in _INTS:
            return int(text)
        if key in _FLOATS:
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None
    return text


def load_config(path: str | Path, overrides: dict | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    extra = [s for s in parser.sections() if s != SECTION]
    if extra:
        raise ConfigError(f"unknown section(s) {extra}; only [{SECTION}] is allowed")
    values = {k: parse_value(k, v) for k, v in parser[SECTION].items()} if parser.has_section(SECTION) else {}
    return build_config(values, overrides)


def build_config(values: dict | None = None, overrides: dict | None = None) -> ExperimentConfig:
    merged = dict(values or {})
    for k, v in (overrides or {}).items():
        if k not in _FIELDS:
            raise ConfigError(f"unknown configuration key {k!r}")
        if v is not None:
            merged[k] = v
    return ExperimentConfig(**merged).validate()


__all__ = ["ConfigError", "ExperimentConfig", "build_config", "load_config", "parse_value"]
