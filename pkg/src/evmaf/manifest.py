"""Database manifests: one JSON file per subjective database.

Example::

    {
      "schema_version": 1,
      "database": "synth-a",
      "mos_scale": [1, 5],
      "sources": [
        {"id": "src00", "path": "src00.y4m", "width": 128, "height": 128, "frames": 3}
      ],
      "sequences": [
        {"id": "src00_blur2", "source": "src00", "path": "src00_blur2.yuv",
         "width": 128, "height": 128, "frames": 3, "mos": 3.4},
        {"id": "src00_half", "source": "src00", "path": "src00_half.yuv",
         "width": 64, "height": 64, "frames": 3, "resample": true, "mos": 2.9}
      ]
    }

Media paths are resolved relative to the manifest file. ``bit_depth`` (8) and
``fps`` (30) are optional per record; ``mos`` may be omitted for databases
used only for prediction.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import jsonschema

from .errors import ConfigurationError
from .video_io import VideoSpec

MANIFEST_SCHEMA_VERSION = 1

_MEDIA = {
    "type": "object",
    "required": ["id", "path", "width", "height", "frames"],
    "properties": {
        "id": {"type": "string", "pattern": r"^[A-Za-z0-9_.+-]+$"},
        "path": {"type": "string", "minLength": 1},
        "width": {"type": "integer", "minimum": 64},
        "height": {"type": "integer", "minimum": 64},
        "frames": {"type": "integer", "minimum": 2},
        "bit_depth": {"enum": [8, 10]},
        "fps": {"type": "number", "exclusiveMinimum": 0},
    },
}

MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "database", "sources", "sequences"],
    "properties": {
        "schema_version": {"const": MANIFEST_SCHEMA_VERSION},
        "database": {"type": "string", "pattern": r"^[A-Za-z0-9_.+-]+$"},
        "mos_scale": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
        "sources": {"type": "array", "minItems": 1, "items": _MEDIA},
        "sequences": {
            "type": "array",
            "minItems": 1,
            "items": {
                "allOf": [_MEDIA],
                "required": ["source"],
                "properties": {
                    "source": {"type": "string"},
                    "resample": {"type": "boolean"},
                    "mos": {"type": "number"},
                },
            },
        },
    },
}


@dataclass(frozen=True)
class MediaRecord:
    id: str
    path: str
    spec: VideoSpec


@dataclass(frozen=True)
class SequenceRecord:
    id: str
    source: MediaRecord
    test: MediaRecord
    resample: bool
    mos_raw: Optional[float]
    mos: Optional[float]  # on [0, 100]

    @property
    def upsample(self) -> Optional[str]:
        return "bilinear" if self.resample else None


@dataclass(frozen=True)
class DatabaseManifest:
    database: str
    path: str
    mos_scale: Tuple[float, float]
    sources: Dict[str, MediaRecord]
    sequences: List[SequenceRecord]

    @property
    def has_mos(self) -> bool:
        return all(s.mos is not None for s in self.sequences)


def normalize_mos(raw: float, lo: float, hi: float) -> float:
    """Map a raw MOS on ``[lo, hi]`` linearly onto [0, 100]."""
    if not hi > lo:
        raise ConfigurationError(f"MOS scale needs max > min, got [{lo}, {hi}]")
    if not lo <= raw <= hi:
        raise ConfigurationError(f"MOS {raw} outside declared scale [{lo}, {hi}]")
    return 100.0 * (raw - lo) / (hi - lo)


def _media(d: dict, base: str) -> MediaRecord:
    spec = VideoSpec(d["width"], d["height"], d["frames"], d.get("bit_depth", 8),
                     float(d.get("fps", 30.0)))
    return MediaRecord(d["id"], os.path.normpath(os.path.join(base, d["path"])), spec)


def parse_manifest(data: dict, path: str = "<memory>") -> DatabaseManifest:
    try:
        jsonschema.validate(data, MANIFEST_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path)
        raise ConfigurationError(f"{path}: invalid manifest at '{where}': {exc.message}") from None
    base = os.path.dirname(os.path.abspath(path)) if path != "<memory>" else os.getcwd()
    lo, hi = (float(v) for v in data.get("mos_scale", (0, 100)))
    if not hi > lo:
        raise ConfigurationError(f"{path}: mos_scale needs max > min, got [{lo}, {hi}]")
    sources: Dict[str, MediaRecord] = {}
    for d in data["sources"]:
        if d["id"] in sources:
            raise ConfigurationError(f"{path}: duplicate source id {d['id']!r}")
        sources[d["id"]] = _media(d, base)
    seqs: List[SequenceRecord] = []
    seen = set()
    for d in data["sequences"]:
        if d["id"] in seen:
            raise ConfigurationError(f"{path}: duplicate sequence id {d['id']!r}")
        seen.add(d["id"])
        if d["source"] not in sources:
            raise ConfigurationError(f"{path}: sequence {d['id']!r} references unknown "
                                     f"source {d['source']!r}")
        raw = d.get("mos")
        mos = normalize_mos(float(raw), lo, hi) if raw is not None else None
        seqs.append(SequenceRecord(d["id"], sources[d["source"]], _media(d, base),
                                   bool(d.get("resample", False)), raw, mos))
    return DatabaseManifest(data["database"], os.path.abspath(path), (lo, hi), sources, seqs)


def load_manifest(path) -> DatabaseManifest:
    path = os.fspath(path)
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read manifest {path}: {exc}") from None
    return parse_manifest(data, path)
