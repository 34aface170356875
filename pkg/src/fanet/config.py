"""Flat ``key = value`` run configuration.

Every key maps to one field of DatasetSpec, ScheduleConfig, SgdConfig,
AblationConfig or to run plumbing (paths, seed, workers). Values are parsed
by the type of the default; tuples are comma separated and the decay
schedule is written ``epoch:lr,epoch:lr``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields
from pathlib import Path

from .model import DESK_BACKBONE, PAPER_BACKBONE, AblationConfig, BackboneConfig
from .synth import DatasetSpec
from .tensor import SgdConfig
from .train import DESK_SCHEDULE, ScheduleConfig

SEED_ENV = "FANET_SEED"
BACKBONES = {"desk": DESK_BACKBONE, "paper": PAPER_BACKBONE}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # dataset
    persons: int = 32
    cameras: int = 6
    images_per_pair: int = 6
    height: int = 128
    width: int = 48
    train_persons: int | None = None
    train_cameras: tuple[int, ...] | None = None
    noise: float = 0.02
    workers: int = 1
    # schedule
    epochs: int = DESK_SCHEDULE.total_epochs
    warmup_epochs: int = DESK_SCHEDULE.warmup_epochs
    lr_start: float = DESK_SCHEDULE.lr_start
    lr_peak: float = DESK_SCHEDULE.lr_peak
    decay: tuple[tuple[int, float], ...] = DESK_SCHEDULE.decay
    P: int = DESK_SCHEDULE.P
    K: int = DESK_SCHEDULE.K
    weight_decay: float = 5e-4
    momentum: float = 0.9
    max_iterations: int | None = None
    eval_every: int = 0
    # model
    backbone: str = "desk"
    tem: bool = True
    background: bool = True
    interaction: bool = True
    tal: str = "full"
    hpp: bool = True
    k: int = 256
    embed_dim: int = 64
    stripe_pool: str = "avg"
    # run
    seed: int = 0
    data: str | None = None
    out: str | None = None
    checkpoint: str | None = None
    split: str = "query"
    rows: tuple[str, ...] | None = None

    # ------------------------------------------------------------ views

    def dataset_spec(self) -> DatasetSpec:
        return DatasetSpec(
            n_persons=self.persons,
            n_cameras=self.cameras,
            images_per_pair=self.images_per_pair,
            height=self.height,
            width=self.width,
            seed=self.seed,
            n_train_persons=self.train_persons,
            train_cameras=self.train_cameras,
            noise=self.noise,
        )

    def schedule(self) -> ScheduleConfig:
        return ScheduleConfig(
            warmup_epochs=self.warmup_epochs,
            lr_start=self.lr_start,
            lr_peak=self.lr_peak,
            decay=self.decay,
            total_epochs=self.epochs,
            P=self.P,
            K=self.K,
        )

    def sgd(self) -> SgdConfig:
        return SgdConfig(base_lr=self.lr_start, weight_decay=self.weight_decay, momentum=self.momentum)

    def ablation(self) -> AblationConfig:
        return AblationConfig(
            enable_tem=self.tem,
            enable_background_branch=self.background,
            enable_interaction=self.interaction,
            tal_variant=self.tal,
            enable_hpp=self.hpp,
            k=self.k,
            embed_dim=self.embed_dim,
            stripe_pool=self.stripe_pool,
        )

    def backbone_config(self) -> BackboneConfig:
        try:
            return BACKBONES[self.backbone]
        except KeyError:
            raise ConfigError(f"backbone must be one of {sorted(BACKBONES)}, got {self.backbone!r}") from None

    def validate(self) -> None:
        """Build every view once so bad combinations fail before any work starts."""
        try:
            self.dataset_spec()
            self.schedule()
            self.sgd()
            self.ablation()
        except ValueError as e:
            raise ConfigError(str(e)) from None
        self.backbone_config()
        if self.split not in ("train", "query", "gallery", "all"):
            raise ConfigError(f"split must be train, query, gallery or all, got {self.split!r}")

    def with_ablation(self, cfg: AblationConfig) -> "RunConfig":
        out = RunConfig(**{f.name: getattr(self, f.name) for f in fields(self)})
        out.tem, out.background, out.interaction = cfg.enable_tem, cfg.enable_background_branch, cfg.enable_interaction
        out.tal, out.hpp = cfg.tal_variant, cfg.enable_hpp
        return out

    # ------------------------------------------------------------ text form

    def to_text(self) -> str:
        return "".join(f"{f.name} = {format_value(getattr(self, f.name))}\n" for f in fields(self))


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
KEYS = tuple(FIELD_TYPES)


def format_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(f"{x[0]}:{x[1]}" if isinstance(x, tuple) else str(x) for x in v)
    return str(v)


def _parse_bool(s: str) -> bool:
    low = s.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def parse_value(key: str, raw: str):
    if key not in FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    t = FIELD_TYPES[key]
    raw = raw.strip()
    optional = "None" in t
    if optional and raw == "":
        return None
    try:
        if key == "decay":
            if not raw:
                return ()
            pairs = []
            for item in raw.split(","):
                e, lr = item.split(":")
                pairs.append((int(e), float(lr)))
            return tuple(pairs)
        if t.startswith("tuple[int"):
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if t.startswith("tuple[str"):
            return tuple(v.strip() for v in raw.split(",") if v.strip())
        if t.startswith("bool"):
            return _parse_bool(raw)
        if t.startswith("int"):
            return int(raw)
        if t.startswith("float"):
            return float(raw)
        return raw
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {raw!r} ({e})") from None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        try:
            values[key] = parse_value(key, raw)
        except ConfigError as e:
            raise ConfigError(f"{source}:{lineno}: {e}") from None
    return values


def resolve(config_path: str | os.PathLike | None, overrides: dict[str, str], env: dict[str, str] | None = None) -> RunConfig:
    """Defaults, then the config file, then FANET_SEED, then command-line overrides."""
    env = os.environ if env is None else env
    values: dict = {}
    if config_path is not None:
        values.update(parse_config_text(Path(config_path).read_text(), str(config_path)))
    if env.get(SEED_ENV):
        values["seed"] = parse_value("seed", env[SEED_ENV])
    for key, raw in overrides.items():
        values[key] = parse_value(key, raw)
    return RunConfig(**values)
