"""Run configuration and the flat key/value config-file format.

A config file is plain text, one ``key = value`` per line, ``#`` comments.
Keys are dotted paths into the config sections; unknown keys are hard
errors.  Tuple values are comma-separated.  ``default_run_config`` carries
the desk-scale defaults; full-scale values from the original protocol
(population 60 -> 30, 30/15 training epochs, 100 -> 3 pruning strategies,
8 fine-tune epochs, 15M parameter cap, 2048 predictor units) are noted in
the README and can all be set through this file.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, replace

from .evolve import EvolveConfig
from .genome import SearchSpaceConfig
from .predictor import PredictorConfig

MODES = ("arch", "arch+pruning", "arch+pruning+hyp")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainDefaults:
    momentum: float = 0.9
    weight_decay: float = 5e-4
    bn_calib_batches: int = 20
    calib_batch_size: int = 64


@dataclass(frozen=True)
class DataConfig:
    path: str = ""  # empty: generate the synthetic benchmark
    classes: int = 10
    per_class: int = 50
    size: int = 32
    channels: int = 3
    seed: int = 1234


def desk_space_config() -> SearchSpaceConfig:
    """Search space at desk scale: paper-shaped stages at 1/8 width."""
    return SearchSpaceConfig(base_channels=(8, 16, 32, 64, 64),
                             max_layers_per_stage=2)


@dataclass(frozen=True)
class RunConfig:
    space: SearchSpaceConfig = field(default_factory=desk_space_config)
    evolve: EvolveConfig = field(default_factory=EvolveConfig)
    train: TrainDefaults = field(default_factory=TrainDefaults)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    data: DataConfig = field(default_factory=DataConfig)
    split_fraction: float = 0.2
    max_params: int = 200_000  # rejects roughly a quarter of random draws
    search_space_mode: str = "arch+pruning+hyp"
    cv_folds: int = 5
    jobs: int = 1

    def __post_init__(self):
        if not 0.0 < self.split_fraction < 1.0:
            raise ConfigError("split_fraction must be in (0, 1)")
        if self.search_space_mode not in MODES:
            raise ConfigError(f"search_space_mode must be one of {MODES}")


_SECTIONS = ("space", "evolve", "train", "predictor", "data")
_TOP_LEVEL = ("split_fraction", "max_params", "search_space_mode", "cv_folds",
              "jobs")


def _parse_value(raw: str, current):
    raw = raw.strip()
    if isinstance(current, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected boolean, got {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        parts = [p for p in raw.replace(",", " ").split() if p]
        elem = current[0] if current else 0
        cast = int if isinstance(elem, int) else float
        return tuple(cast(p) for p in parts)
    return raw


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Apply ``key = value`` overrides to the defaults; unknown keys raise.

    Overrides are collected per section and applied in one shot so that
    cross-field validation sees the final values.
    """
    cfg = base or RunConfig()
    pending: dict[str, dict] = {name: {} for name in _SECTIONS}
    top: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if "." in key:
            section, fname = key.split(".", 1)
            if section not in pending:
                raise ConfigError(f"line {lineno}: unknown section {section!r}")
            obj = getattr(cfg, section)
            names = {f.name for f in dataclasses.fields(obj)}
            if fname not in names:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            pending[section][fname] = _parse_value(raw, getattr(obj, fname))
        else:
            if key not in _TOP_LEVEL:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            top[key] = _parse_value(raw, getattr(cfg, key))
    sections = {name: replace(getattr(cfg, name), **overrides) if overrides
                else getattr(cfg, name)
                for name, overrides in pending.items()}
    return replace(cfg, **sections, **top)


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read(), base)


def render_config(cfg: RunConfig) -> str:
    """Full config as parseable text (every documented key, one per line)."""
    lines = []
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{section}.{f.name} = {v}")
    for key in _TOP_LEVEL:
        lines.append(f"{key} = {getattr(cfg, key)}")
    return "\n".join(lines) + "\n"


def config_keys() -> list[str]:
    """Every accepted config key (the documented key list)."""
    keys = []
    cfg = RunConfig()
    for section in _SECTIONS:
        for f in dataclasses.fields(getattr(cfg, section)):
            keys.append(f"{section}.{f.name}")
    keys.extend(_TOP_LEVEL)
    return keys
