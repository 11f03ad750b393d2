"""Run configuration: dataclass sections read from an INI-style ``key = value`` file.

Unknown sections or keys are errors. Relative paths in ``[data]`` and
``[run] out_dir`` resolve against the directory holding the config file.
"""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .augment import AugmentConfig
from .errors import ConfigError
from .losses import LossConfig
from .synth import SynthConfig
from .viewgen import ViewConfig


@dataclass(frozen=True)
class DataConfig:
    manifest: str = "data/train.tsv"
    val_manifest: str = "data/val.tsv"


@dataclass(frozen=True)
class DimsConfig:
    patch_size: int = 16
    patches_per_view: int = 49
    clip: int = 10
    embed_dim: int = 64
    proj_dim: int = 32

    @property
    def view(self) -> ViewConfig:
        return ViewConfig(self.patch_size, self.patches_per_view, self.clip)


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    steps: int = 1000
    batch_size: int = 32
    ema_m: float = 0.99
    warmup_steps: int = 100

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 for in-batch negatives")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if not 0 <= self.ema_m < 1:
            raise ConfigError("ema_m must lie in [0, 1)")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    out_dir: str = "runs/default"
    checkpoint_every: int = 500


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 500
    lr: float = 0.1


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    dims: DimsConfig = field(default_factory=DimsConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    run: RunSection = field(default_factory=RunSection)
    synth: SynthConfig = field(default_factory=SynthConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    base_dir: Path = field(default=Path("."), compare=False)

    @property
    def seed(self) -> int:
        return self.run.seed

    @property
    def num_patches(self) -> int:
        p = self.dims.patch_size
        return (self.augment.out_width // p) * (self.augment.out_height // p)

    def resolve(self, p: str | Path) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def manifest_path(self) -> Path:
        return self.resolve(self.data.manifest)

    @property
    def val_manifest_path(self) -> Path | None:
        return self.resolve(self.data.val_manifest) if self.data.val_manifest else None

    @property
    def out_dir(self) -> Path:
        return self.resolve(self.run.out_dir)

    def with_overrides(self, **sections) -> RunConfig:
        """``cfg.with_overrides(optim={"steps": 10})`` -> copy with replaced section fields."""
        out = self
        for name, values in sections.items():
            out = replace(out, **{name: replace(getattr(out, name), **values)})
        return out


SECTIONS = tuple(f.name for f in fields(RunConfig) if f.name != "base_dir")


def _coerce(raw: str, default, where: str):
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
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None


def parse_config(text: str, base_dir: Path = Path(".")) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(str(e)) from None
    defaults = RunConfig()
    built = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        proto = getattr(defaults, section)
        known = {f.name for f in fields(proto)}
        values = {}
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            values[key] = _coerce(raw, getattr(proto, key), f"[{section}] {key}")
        try:
            built[section] = replace(proto, **values)
        except (ConfigError, ValueError) as e:
            raise ConfigError(f"[{section}]: {e}") from None
    return RunConfig(**built, base_dir=Path(base_dir))


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"), path.parent)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for section in SECTIONS:
        lines.append(f"[{section}]")
        for key, value in asdict(getattr(cfg, section)).items():
            lines.append(f"{key} = {value!r}" if isinstance(value, float) else f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)
