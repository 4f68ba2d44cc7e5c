"""Crash report loading and metadata summarization.

A report is a directory holding ``sketch.png`` (or ``.jpg``), ``narrative.txt``
and optionally ``metadata.json``. Metadata keys the pipeline understands:

- ``orientations``: user id -> compass heading ("east", "NE", degrees ok)
- ``lanes``: user id -> {"road": int, "lane": int}
- ``speed_limit``: number in m/s, or a string like "40 km/h" / "25 mph"
- ``stop_sign``: bool
- ``records``: optional row form, ``[{"user", "field", "value"}, ...]``

Unknown keys pass through untouched in ``MetadataSummary.extras``. All speeds
are normalized to m/s at ingest time.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ImageFormatError, MetadataError, ReportLoadError
from .parsing import normalize_user_id

KMH_TO_MPS = 1.0 / 3.6
MPH_TO_MPS = 0.44704

_SKETCH_NAMES = ("sketch.png", "sketch.jpg", "sketch.jpeg")


@dataclass
class CrashReport:
    report_id: str
    sketch: np.ndarray
    narrative: str
    metadata: dict
    source: Path


@dataclass
class MetadataSummary:
    orientations: dict[str, str] = field(default_factory=dict)
    lanes: dict[str, tuple[int, int]] = field(default_factory=dict)
    same_origin_groups: list[tuple[str, ...]] = field(default_factory=list)
    adjacent_lane_pairs: list[tuple[str, str]] = field(default_factory=list)
    speed_limit_mps: float | None = None
    stop_sign: bool = False
    extras: dict = field(default_factory=dict)
    rendered_text: str = ""


def parse_speed(value) -> float:
    """Normalize a speed value to m/s; strings may carry km/h / mph / m/s."""
    if isinstance(value, (int, float)):
        return float(value)
    text = str(value).strip().lower()
    m = re.fullmatch(r"(-?\d+(?:\.\d+)?)\s*(km/h|kmh|kph|mph|m/s|mps)?", text)
    if not m:
        raise MetadataError(f"cannot parse speed value {value!r}")
    number = float(m.group(1))
    unit = m.group(2) or "m/s"
    if unit in ("km/h", "kmh", "kph"):
        return number * KMH_TO_MPS
    if unit == "mph":
        return number * MPH_TO_MPS
    return number


def load_report(path: str | Path) -> CrashReport:
    path = Path(path)
    if not path.is_dir():
        raise ReportLoadError(f"report directory not found: {path}")

    sketch_path = None
    for name in _SKETCH_NAMES:
        if (path / name).exists():
            sketch_path = path / name
            break
    if sketch_path is None:
        raise ReportLoadError(f"report {path.name!r} is missing part: sketch image")

    narrative_path = path / "narrative.txt"
    if not narrative_path.exists():
        raise ReportLoadError(f"report {path.name!r} is missing part: narrative.txt")

    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(sketch_path) as im:
            sketch = np.asarray(im.convert("L"))
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageFormatError(f"sketch of report {path.name!r} cannot be decoded: {exc}") from exc

    narrative = narrative_path.read_text().strip()
    if not narrative:
        raise ReportLoadError(f"report {path.name!r} has an empty narrative")

    metadata: dict = {}
    meta_path = path / "metadata.json"
    if meta_path.exists():
        try:
            metadata = json.loads(meta_path.read_text())
        except json.JSONDecodeError as exc:
            raise ReportLoadError(f"report {path.name!r} metadata is not valid JSON: {exc}") from exc
        if not isinstance(metadata, dict):
            raise ReportLoadError(f"report {path.name!r} metadata must be a JSON object")

    return CrashReport(path.name, sketch, narrative, metadata, path)


def load_reports(root: str | Path) -> list[CrashReport]:
    """Load every report directory directly under ``root``, sorted by id."""
    root = Path(root)
    if not root.is_dir():
        raise ReportLoadError(f"report root not found: {root}")
    reports = []
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        reports.append(load_report(sub))
    return reports


_KNOWN_KEYS = {"orientations", "lanes", "speed_limit", "stop_sign", "records"}


def _merge_records(metadata: dict) -> tuple[dict, dict]:
    """Fold the optional row form into the map form, rejecting contradictions."""
    orientations: dict[str, str] = {}
    lanes: dict[str, tuple[int, int]] = {}

    for user, value in (metadata.get("orientations") or {}).items():
        orientations[normalize_user_id(user)] = str(value).strip().lower()
    for user, value in (metadata.get("lanes") or {}).items():
        lanes[normalize_user_id(user)] = (int(value["road"]), int(value["lane"]))

    for row in metadata.get("records") or []:
        user = normalize_user_id(str(row.get("user", "")))
        fieldname = str(row.get("field", "")).lower()
        value = row.get("value")
        if fieldname == "orientation":
            new = str(value).strip().lower()
            if user in orientations and orientations[user] != new:
                raise MetadataError(
                    f"user {user}: contradictory orientations {orientations[user]!r} vs {new!r}"
                )
            orientations[user] = new
        elif fieldname == "lane":
            new = (int(value["road"]), int(value["lane"]))
            if user in lanes and lanes[user] != new:
                raise MetadataError(f"user {user}: contradictory lane records {lanes[user]} vs {new}")
            lanes[user] = new
    return orientations, lanes


def summarize_metadata(metadata: dict) -> MetadataSummary:
    """Derive origin groups, adjacency and limits; render one text summary."""
    orientations, lanes = _merge_records(metadata)

    # Same origin = identical (orientation, road, lane) key. Users without
    # a lane record only group with other lane-free users of that heading.
    by_origin: dict[tuple, list[str]] = {}
    for user in sorted(orientations):
        key = (orientations[user], lanes.get(user))
        by_origin.setdefault(key, []).append(user)
    groups = [tuple(users) for users in by_origin.values() if len(users) >= 2]
    groups.sort()

    pairs: list[tuple[str, str]] = []
    users_with_lane = sorted(lanes)
    for i, a in enumerate(users_with_lane):
        for b in users_with_lane[i + 1:]:
            if lanes[a][0] == lanes[b][0] and abs(lanes[a][1] - lanes[b][1]) == 1:
                pairs.append((a, b))

    speed_limit = None
    if metadata.get("speed_limit") is not None:
        speed_limit = parse_speed(metadata["speed_limit"])

    stop_sign = bool(metadata.get("stop_sign", False))
    extras = {k: v for k, v in metadata.items() if k not in _KNOWN_KEYS}

    summary = MetadataSummary(
        orientations=orientations,
        lanes=lanes,
        same_origin_groups=groups,
        adjacent_lane_pairs=pairs,
        speed_limit_mps=speed_limit,
        stop_sign=stop_sign,
        extras=extras,
    )
    summary.rendered_text = _render_text(summary)
    return summary


def _render_text(s: MetadataSummary) -> str:
    """One sentence per populated field, each field mentioned exactly once."""
    parts: list[str] = []
    if s.orientations:
        body = "; ".join(f"{u} heading {d}" for u, d in sorted(s.orientations.items()))
        parts.append(f"Orientations: {body}.")
    if s.lanes:
        body = "; ".join(
            f"{u} on road {road} lane {lane}" for u, (road, lane) in sorted(s.lanes.items())
        )
        parts.append(f"Recorded lanes: {body}.")
    if s.same_origin_groups:
        body = "; ".join(" and ".join(g) for g in s.same_origin_groups)
        parts.append(f"Same origin: {body}.")
    if s.adjacent_lane_pairs:
        body = "; ".join(f"{a} and {b}" for a, b in s.adjacent_lane_pairs)
        parts.append(f"Adjacent lanes: {body}.")
    if s.speed_limit_mps is not None:
        parts.append(f"Posted speed limit: {s.speed_limit_mps:.2f} m/s.")
    if s.stop_sign:
        parts.append("A stop sign controls the crash location.")
    if s.extras:
        body = "; ".join(f"{k}={s.extras[k]}" for k in sorted(s.extras))
        parts.append(f"Additional records: {body}.")
    return " ".join(parts)
