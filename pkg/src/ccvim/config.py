"""Plain-text run configuration.

Format: ``key = value`` lines, ``#`` comments, and the section headers
``[network]``, ``[train]``, ``[branches]`` and ``[watershed]``. Unknown
sections and keys are errors reported with their line number.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .net import NetworkConfig
from .plan import BranchPlan, default_plan
from .postproc import WatershedParams


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 8
    epochs: int = 30
    weight_decay: float = 0.01
    seed: int = 42
    t_max: int = 0          # cosine period in optimizer steps; 0 = whole run
    augment: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.t_max < 0:
            raise ConfigError("t_max must be >= 0")


@dataclass
class Config:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    watershed: WatershedParams = field(default_factory=WatershedParams)

    def to_text(self) -> str:
        lines = ["[network]"]
        for f in dataclasses.fields(NetworkConfig):
            if f.name == "branch_plan":
                continue
            lines.append(f"{f.name} = {_fmt(getattr(self.network, f.name))}")
        lines.append("\n[train]")
        lines += [f"{f.name} = {_fmt(getattr(self.train, f.name))}" for f in dataclasses.fields(TrainConfig)]
        lines.append("\n[watershed]")
        lines += [f"{f.name} = {_fmt(getattr(self.watershed, f.name))}" for f in dataclasses.fields(WatershedParams)]
        lines.append("\n[branches]")
        lines += self.network.branch_plan.to_lines()
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _convert(raw: str, target):
    if target is bool:
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"not a boolean: '{raw}'")
    if target is int:
        return int(raw)
    if target is float:
        return float(raw)
    if target is tuple:
        return tuple(int(x) for x in raw.split(",") if x.strip())
    return raw


_SECTIONS = {"network": NetworkConfig, "train": TrainConfig, "watershed": WatershedParams}


def _field_types(cls) -> dict[str, type]:
    out = {}
    for f in dataclasses.fields(cls):
        if f.name == "branch_plan":
            continue
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        out[f.name] = type(default)
    return out


def parse_config(text: str) -> Config:
    values: dict[str, dict] = {name: {} for name in _SECTIONS}
    plan = BranchPlan()
    plan_given = False
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip().lower()
            if section not in _SECTIONS and section != "branches":
                raise ConfigError(f"line {lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got '{line}'")
        if section is None:
            raise ConfigError(f"line {lineno}: key outside of any section")
        key, value = (s.strip() for s in line.split("=", 1))
        if section == "branches":
            plan.set(key, value, lineno)
            plan_given = True
            continue
        types = _field_types(_SECTIONS[section])
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key '{key}' in [{section}]")
        try:
            values[section][key] = _convert(value, types[key])
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for '{key}': {exc}") from None
    try:
        network = NetworkConfig(**values["network"], branch_plan=plan if plan_given else default_plan())
        return Config(network=network, train=TrainConfig(**values["train"]),
                      watershed=WatershedParams(**values["watershed"]))
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> Config:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text())
