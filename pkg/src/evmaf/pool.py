"""Feature keys and the versioned candidate-pool enumeration.

A key renders as ``NAME-channel-S<scale>`` (``VIF-Cb-S1``, ``ΔTI-Cb-S4``);
scalar features such as ``E-ADM`` carry no channel or scale.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass
from importlib import resources
from typing import Iterable, List, Optional, Tuple

from .errors import ConfigurationError

CHANNELS = ("Y", "Cb", "Cr")
SCALES = (1, 2, 3, 4)

SCALAR_FEATURES = ("E-ADM", "ADM")
CHANNEL_FEATURES = ("PSNR", "SSIM", "MSSSIM", "VIF", "BL", "ED", "SI", "CF", "TP", "TI",
                    "LUMA", "ΔSI", "ΔCF", "ΔTI", "ΔTP")

POOL_VERSION = "pool-v1"

_KEY_RE = re.compile(r"^(?P<name>[^-]+)-(?P<channel>Y|Cb|Cr)-S(?P<scale>[1-4])$")


@dataclass(frozen=True, order=True)
class FeatureKey:
    name: str
    channel: Optional[str] = None
    scale: Optional[int] = None

    def __post_init__(self):
        if self.name in SCALAR_FEATURES:
            if self.channel is not None or self.scale is not None:
                raise ConfigurationError(f"{self.name} takes no channel/scale")
            return
        if self.name not in CHANNEL_FEATURES:
            raise ConfigurationError(f"unknown feature {self.name!r}")
        if self.channel not in CHANNELS or self.scale not in SCALES:
            raise ConfigurationError(
                f"bad channel/scale for {self.name}: {self.channel!r}, {self.scale!r}")

    def __str__(self):
        if self.channel is None:
            return self.name
        return f"{self.name}-{self.channel}-S{self.scale}"

    @property
    def is_delta(self) -> bool:
        return self.name.startswith("Δ")

    @classmethod
    def parse(cls, text: str) -> "FeatureKey":
        text = text.strip()
        if text in SCALAR_FEATURES:
            return cls(text)
        m = _KEY_RE.match(text)
        if not m:
            raise ConfigurationError(f"cannot parse feature key {text!r}")
        name = m["name"]
        # ASCII alias: dTI == ΔTI
        if name.startswith("d") and "Δ" + name[1:] in CHANNEL_FEATURES:
            name = "Δ" + name[1:]
        return cls(name, m["channel"], int(m["scale"]))


def K(text: str) -> FeatureKey:
    return FeatureKey.parse(text)


# Features of the original fusion model; E-ADM stands in for ADM.
ORIGINAL_KEYS: Tuple[FeatureKey, ...] = (
    K("E-ADM"), K("TI-Y-S3"), K("VIF-Y-S1"), K("VIF-Y-S2"), K("VIF-Y-S3"), K("VIF-Y-S4"),
)


def _grid(name, channels=CHANNELS, scales=SCALES):
    return [FeatureKey(name, c, s) for c in channels for s in scales]


def full_pool() -> List[FeatureKey]:
    """The 165 candidate keys, in canonical order.

    Luma VIF at all scales belongs to the original model and is not repeated
    here; MS-SSIM is evaluated at S1-S3 only (at S4 it would run its own
    five-level pyramid on a 1/8-size plane); colourfulness is a chroma
    statistic.
    """
    keys: List[FeatureKey] = []
    for name in ("PSNR", "SSIM"):
        keys += _grid(name)
    keys += _grid("MSSSIM", scales=(1, 2, 3))
    keys += _grid("VIF", channels=("Cb", "Cr"))
    for name in ("BL", "ED", "SI"):
        keys += _grid(name)
    keys += _grid("CF", channels=("Cb", "Cr"))
    for name in ("TP", "TI", "LUMA", "ΔSI"):
        keys += _grid(name)
    keys += _grid("ΔCF", channels=("Cb", "Cr"))
    for name in ("ΔTI", "ΔTP"):
        keys += _grid(name)
    return keys


def pool_with_originals() -> List[FeatureKey]:
    keys = list(ORIGINAL_KEYS)
    seen = set(keys)
    keys += [k for k in full_pool() if k not in seen]
    return keys


@dataclass(frozen=True)
class PoolSpec:
    version: str
    keys: Tuple[FeatureKey, ...]

    def __post_init__(self):
        if len(set(self.keys)) != len(self.keys):
            dupes = sorted({str(k) for k in self.keys if self.keys.count(k) > 1})
            raise ConfigurationError(f"duplicate keys in pool spec: {dupes}")

    def __len__(self):
        return len(self.keys)

    def __iter__(self):
        return iter(self.keys)


def parse_pool_spec(text: str) -> PoolSpec:
    """Parse the pool_spec text format.

    Blank lines and ``#`` comments are skipped. ``version: <id>`` sets the
    version; ``@full`` / ``@originals`` expand to the built-in enumerations;
    any other line is one feature key.
    """
    version = None
    keys: List[FeatureKey] = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("version:"):
            version = line.split(":", 1)[1].strip()
        elif line == "@full":
            keys += full_pool()
        elif line == "@originals":
            keys += list(ORIGINAL_KEYS)
        else:
            keys.append(FeatureKey.parse(line))
    if version is None:
        raise ConfigurationError("pool spec has no 'version:' line")
    seen = set()
    ordered = []
    for k in keys:
        if k not in seen:
            seen.add(k)
            ordered.append(k)
    return PoolSpec(version, tuple(ordered))


def load_pool_spec(path) -> PoolSpec:
    with open(path, encoding="utf-8") as fh:
        return parse_pool_spec(fh.read())


def builtin_pool_spec(name: str = "full") -> PoolSpec:
    """Load one of the pool specs shipped with the package (``full``, ``m2``...)."""
    text = resources.files("evmaf.data").joinpath(f"pool_{name}.txt").read_text(encoding="utf-8")
    return parse_pool_spec(text)


def resolve_pool_spec(name_or_path) -> PoolSpec:
    if os.path.exists(os.fspath(name_or_path)):
        return load_pool_spec(name_or_path)
    return builtin_pool_spec(str(name_or_path))


def render_keys(keys: Iterable[FeatureKey]) -> List[str]:
    return [str(k) for k in keys]
