"""Branch plans: which four branches each CCS6 layer runs.

A plan maps every layer, keyed ``stageN.layerM`` (encoder) or ``decN.layerM``
(decoder), to four branch tokens drawn from ``h, hflip, v, vflip, cc4, cc25``.
A ``preset`` line written in the ablation shorthand (``h-hflip-C4-C25``)
fills every layer; explicit layer lines override it.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .scan_paths import ScanDirection

BRANCHES_PER_LAYER = 4
_LAYER_KEY = re.compile(r"^(stage|dec)([1-9]\d*)\.layer([1-9]\d*)$")


@dataclass(frozen=True)
class BranchSpec:
    kind: str                               # "scan" or "cc"
    direction: ScanDirection | None = None
    centers: int | None = None

    @property
    def token(self) -> str:
        return self.direction.value if self.kind == "scan" else f"cc{self.centers}"

    def __str__(self) -> str:
        return self.token


SCAN_TOKENS = {d.value: BranchSpec("scan", direction=d) for d in ScanDirection}
CC_TOKENS = {"cc4": BranchSpec("cc", centers=4), "cc25": BranchSpec("cc", centers=25)}


def parse_token(tok: str) -> BranchSpec:
    t = tok.strip().lower()
    if t in ("c4", "c25"):
        t = "c" + t
    spec = SCAN_TOKENS.get(t) or CC_TOKENS.get(t)
    if spec is None:
        raise ConfigError(f"unknown branch token '{tok.strip()}'")
    return spec


def parse_layer(value: str) -> tuple[BranchSpec, ...]:
    """Comma-separated list of exactly four tokens."""
    specs = tuple(parse_token(t) for t in value.split(",") if t.strip())
    if len(specs) != BRANCHES_PER_LAYER:
        raise ConfigError(f"a CCS6 layer needs exactly {BRANCHES_PER_LAYER} branches, got {len(specs)}")
    return specs


def expand_preset(name: str) -> tuple[BranchSpec, ...]:
    """Ablation shorthand (``h-hflip``, ``hflip-vflip-C4-C25``) -> four branches.

    Shorter settings are repeated cyclically so every layer still has four slots.
    """
    toks = [parse_token(t) for t in name.split("-") if t.strip()]
    if not 1 <= len(toks) <= BRANCHES_PER_LAYER:
        raise ConfigError(f"preset '{name}' must list 1 to {BRANCHES_PER_LAYER} branches")
    return tuple(toks[i % len(toks)] for i in range(BRANCHES_PER_LAYER))


@dataclass
class BranchPlan:
    layers: dict[str, tuple[BranchSpec, ...]] = field(default_factory=dict)
    preset: tuple[BranchSpec, ...] | None = None

    def get(self, part: str, stage: int, layer: int) -> tuple[BranchSpec, ...]:
        key = f"{part}{stage}.layer{layer}"
        if key in self.layers:
            return self.layers[key]
        if self.preset is not None:
            return self.preset
        raise ConfigError(f"branch plan has no entry for {key}")

    def set(self, key: str, value: str, lineno: int | None = None) -> None:
        where = f"line {lineno}: " if lineno is not None else ""
        try:
            if key == "preset":
                self.preset = expand_preset(value)
            elif _LAYER_KEY.match(key):
                self.layers[key] = parse_layer(value)
            else:
                raise ConfigError(f"unknown branch-plan key '{key}'")
        except ConfigError as exc:
            raise ConfigError(f"{where}{exc}") from None

    def to_lines(self) -> list[str]:
        lines = []
        if self.preset is not None:
            lines.append("preset = " + "-".join(s.token for s in self.preset))
        for key, specs in self.layers.items():
            lines.append(f"{key} = " + ",".join(s.token for s in specs))
        return lines

    @classmethod
    def uniform(cls, preset: str) -> "BranchPlan":
        return cls(preset=expand_preset(preset))


def parse_plan_text(text: str) -> BranchPlan:
    plan = BranchPlan()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line or line.lower() == "[branches]":
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got '{line}'")
        key, value = (s.strip() for s in line.split("=", 1))
        plan.set(key, value, lineno)
    return plan


def load_branch_plan(path) -> BranchPlan:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"branch plan file not found: {p}")
    return parse_plan_text(p.read_text())


DEFAULT_PLAN_TEXT = """\
# encoder: global h/hflip scans paired with both clustering widths early on,
# vertical scans mixed in deeper; the decoder mirrors the encoder.
stage1.layer1 = h, hflip, cc4, cc25
stage1.layer2 = v, vflip, cc4, cc25
stage2.layer1 = h, vflip, cc4, cc25
stage2.layer2 = hflip, v, cc4, cc25
stage3.layer1 = h, hflip, v, cc4
stage3.layer2 = hflip, vflip, cc4, cc25
stage4.layer1 = h, hflip, v, vflip
stage4.layer2 = h, hflip, cc4, cc25
dec1.layer1 = h, hflip, cc4, cc25
dec1.layer2 = h, hflip, v, vflip
dec2.layer1 = hflip, vflip, cc4, cc25
dec2.layer2 = h, hflip, v, cc4
dec3.layer1 = hflip, v, cc4, cc25
dec3.layer2 = h, vflip, cc4, cc25
dec4.layer1 = v, vflip, cc4, cc25
dec4.layer2 = h, hflip, cc4, cc25
"""


def default_plan() -> BranchPlan:
    return parse_plan_text(DEFAULT_PLAN_TEXT)


# the thirteen settings of the scan/cluster ablation
ABLATION_PRESETS = (
    "h-hflip", "h-hflip-C4", "h-hflip-C25", "h-hflip-C4-C25",
    "v-vflip", "v-vflip-C4", "v-vflip-C25", "v-vflip-C4-C25",
    "h-hflip-v-vflip", "h-v-C4-C25", "h-vflip-C4-C25", "hflip-v-C4-C25",
    "hflip-vflip-C4-C25",
)
