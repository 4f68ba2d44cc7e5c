"""Parsers for the structured response formats the model is prompted for.

Four schemas exist: ``label`` (component classification), ``bracketed_layout``
(road layout sections), ``semantic_dicts`` (python-literal scenario
description) and ``free_text``. ``render_bracketed_layout`` is the inverse of
the layout parser: parse(render(x)) == x for every well-formed layout dict.
"""

from __future__ import annotations

import ast
import math
import re
from fractions import Fraction

from .errors import NumericFieldError, SchemaError

COMPONENT_LABELS = (
    "road_edge",
    "lane_edge",
    "road_user",
    "traffic_sign",
    "annotation",
    "other",
)

_SECTION_RE = re.compile(r"^\[([^\]\n]+)\]\s*:\s*(.*)$", re.MULTILINE)
_ROAD_KEY_RE = re.compile(r"(road\s*\d+)\s*[:=]\s*", re.IGNORECASE)
_PAIR_RE = re.compile(r"\[\s*([^\]|]+?)\s*\|\s*([^\]|]+?)\s*\]")


def parse_structured(text: str, schema: str):
    if schema == "label":
        return parse_label(text)
    if schema == "bracketed_layout":
        return parse_bracketed_layout(text)
    if schema == "semantic_dicts":
        return parse_semantic_dicts(text)
    if schema == "free_text":
        return {"text": text}
    raise SchemaError(f"unknown schema {schema!r}")


# --- label schema ---------------------------------------------------------

_USER_ID_RE = re.compile(
    r"\b((?:Vehicle|Animal|Pedestrian)\s*\d+|[VAP]\d+)\b", re.IGNORECASE
)


def parse_label(text: str) -> dict:
    """Extract one of the six component labels, plus user ids if present."""
    lowered = text.lower().replace("-", "_")
    found = None
    for label in COMPONENT_LABELS:
        spaced = label.replace("_", " ")
        if label in lowered or spaced in lowered:
            found = label
            break
    if found is None:
        raise SchemaError(f"no component label in response: {text[:80]!r}")
    user_ids: list[str] = []
    if found == "road_user":
        for m in _USER_ID_RE.finditer(text):
            token = normalize_user_id(m.group(1))
            if token not in user_ids:
                user_ids.append(token)
    return {"label": found, "user_ids": user_ids}


def normalize_user_id(token: str) -> str:
    """Map short forms (V1, a2) onto the long form used everywhere else."""
    token = token.strip()
    m = re.fullmatch(r"([VAPvap])\s*(\d+)", token)
    if m:
        kind = {"v": "Vehicle", "a": "Animal", "p": "Pedestrian"}[m.group(1).lower()]
        return f"{kind} {m.group(2)}"
    m = re.fullmatch(r"(Vehicle|Animal|Pedestrian)\s*(\d+)", token, re.IGNORECASE)
    if m:
        return f"{m.group(1).capitalize()} {m.group(2)}"
    return token


# --- angle tokens ---------------------------------------------------------


def parse_angle(token: str, field: str = "Angle to junction") -> float:
    """Read an angle written as a decimal or a multiple of pi (``3pi/2``)."""
    token = token.strip().rstrip(",.")
    if not token or token.upper() in {"N/A", "NA", "NONE"}:
        raise SchemaError(f"field {field!r}: empty angle token")
    m = re.fullmatch(r"(-?\d*\.?\d*)\s*\*?\s*pi\s*(?:/\s*(\d+))?", token, re.IGNORECASE)
    if m:
        num = float(m.group(1)) if m.group(1) not in ("", "-") else (-1.0 if m.group(1) == "-" else 1.0)
        den = float(m.group(2)) if m.group(2) else 1.0
        return num * math.pi / den
    try:
        return float(token)
    except ValueError:
        raise NumericFieldError(field, token) from None


def render_angle(value: float) -> str:
    """Emit ``kpi/d`` when value is a small rational multiple of pi."""
    if value == 0.0:
        return "0"
    frac = Fraction(value / math.pi).limit_denominator(12)
    if abs(float(frac) * math.pi - value) < 1e-9 and frac.denominator <= 12:
        num, den = frac.numerator, frac.denominator
        head = "" if num == 1 else ("-" if num == -1 else str(num))
        body = f"{head}pi"
        if den != 1:
            body += f"/{den}"
        return body
    return repr(float(value))


def _parse_float(token: str, field: str) -> float:
    token = token.strip().rstrip(",.")
    try:
        return float(token)
    except ValueError:
        raise NumericFieldError(field, token) from None


def _parse_int(token: str, field: str) -> int:
    token = token.strip()
    try:
        return int(token)
    except ValueError:
        raise NumericFieldError(field, token) from None


# --- bracketed layout schema ----------------------------------------------


def _split_sections(text: str) -> dict[str, str]:
    sections: dict[str, str] = {}
    matches = list(_SECTION_RE.finditer(text))
    for i, m in enumerate(matches):
        name = m.group(1).strip().lower()
        end = matches[i + 1].start() if i + 1 < len(matches) else len(text)
        body = (m.group(2) + text[m.end():end]).strip()
        # Keys repeat when the model re-lists a section; first one wins.
        sections.setdefault(name, body)
    return sections


def _road_chunks(body: str) -> dict[str, str]:
    """Split ``road1: ... road2: ...`` bodies into per-road chunks."""
    chunks: dict[str, str] = {}
    marks = list(_ROAD_KEY_RE.finditer(body))
    for i, m in enumerate(marks):
        key = re.sub(r"\s+", "", m.group(1).lower())
        end = marks[i + 1].start() if i + 1 < len(marks) else len(body)
        chunks[key] = body[m.end():end].strip().rstrip(",;")
    return chunks


def parse_bracketed_layout(text: str) -> dict:
    """Parse the sectioned layout answer into a plain dict.

    Returns keys: ``category`` (str), ``topology`` (str | None), ``lanes``
    (dict road key -> (left, right)), ``curvature`` (dict road key -> float),
    ``angles`` (dict road key -> float), ``ramp`` ((left, right) side labels
    or None).
    """
    sections = _split_sections(text)
    if "category" not in sections or not sections["category"]:
        raise SchemaError("missing required field 'Category'")
    category = sections["category"].splitlines()[0].strip()

    topology = None
    if sections.get("topology"):
        top = sections["topology"].splitlines()[0].strip()
        if top.upper() not in {"N/A", "NA"}:
            topology = top

    lanes: dict[str, tuple[int, int]] = {}
    body = sections.get("lane info", "")
    if body:
        chunks = _road_chunks(body)
        if chunks:
            for key, chunk in chunks.items():
                m = _PAIR_RE.search(chunk)
                if not m:
                    raise SchemaError(f"field 'Lane info' ({key}): no [left | right] pair")
                lanes[key] = (
                    _parse_int(m.group(1), f"Lane info {key} left"),
                    _parse_int(m.group(2), f"Lane info {key} right"),
                )
        else:
            m = _PAIR_RE.search(body)
            if m:
                lanes["road1"] = (
                    _parse_int(m.group(1), "Lane info left"),
                    _parse_int(m.group(2), "Lane info right"),
                )

    curvature: dict[str, float] = {}
    body = sections.get("road curvature", "")
    if body and body.upper() not in {"N/A", "NA", "[N/A]"}:
        chunks = _road_chunks(body)
        if chunks:
            for key, chunk in chunks.items():
                curvature[key] = _parse_float(chunk, f"Road curvature {key}")
        else:
            value = _parse_float(body.splitlines()[0], "Road curvature")
            for key in lanes or {"road1": None}:
                curvature[key] = value

    angles: dict[str, float] = {}
    body = sections.get("angle to junction", "")
    if body and body.upper() not in {"N/A", "NA", "[N/A]"}:
        chunks = _road_chunks(body)
        for key, chunk in chunks.items():
            token = chunk.splitlines()[0].strip()
            if token.upper() in {"N/A", "NA"}:
                continue
            angles[key] = parse_angle(token, f"Angle to junction {key}")

    ramp = None
    body = sections.get("ramp info", "")
    if body and body.upper() not in {"N/A", "NA", "[N/A]"}:
        m = _PAIR_RE.search(body)
        if m:
            def side(tok: str):
                tok = tok.strip()
                return None if tok.lower() in {"none", "n/a", "na"} else tok
            ramp = (side(m.group(1)), side(m.group(2)))

    return {
        "category": category,
        "topology": topology,
        "lanes": lanes,
        "curvature": curvature,
        "angles": angles,
        "ramp": ramp,
    }


def render_bracketed_layout(layout: dict) -> str:
    """Inverse of :func:`parse_bracketed_layout` (identity under re-parse)."""
    lines = [f"[Category]: {layout['category']}"]
    lines.append(f"[Topology]: {layout.get('topology') or 'N/A'}")

    lanes = layout.get("lanes") or {}
    if len(lanes) == 1 and "road1" in lanes:
        left, right = lanes["road1"]
        lines.append(f"[Lane info]: [{left} | {right}]")
    elif lanes:
        parts = [f"{key}: [{l} | {r}]" for key, (l, r) in lanes.items()]
        lines.append("[Lane info]: " + ", ".join(parts))
    else:
        lines.append("[Lane info]: N/A")

    curvature = layout.get("curvature") or {}
    values = set(curvature.values())
    if not curvature:
        lines.append("[Road curvature]: N/A")
    elif len(values) == 1 and set(curvature) == set(lanes):
        lines.append(f"[Road curvature]: {values.pop()!r}")
    else:
        parts = [f"{key}: {v!r}" for key, v in curvature.items()]
        lines.append("[Road curvature]: " + ", ".join(parts))

    angles = layout.get("angles") or {}
    if angles:
        parts = [f"{key}: {render_angle(v)}" for key, v in angles.items()]
        lines.append("[Angle to junction]: " + ", ".join(parts))
    else:
        lines.append("[Angle to junction]: [N/A]")

    ramp = layout.get("ramp")
    if ramp is None:
        lines.append("[Ramp info]: [N/A]")
    else:
        left = ramp[0] if ramp[0] else "None"
        right = ramp[1] if ramp[1] else "None"
        lines.append(f"[Ramp info]: [{left} | {right}]")
    return "\n".join(lines)


# --- semantic dict schema ---------------------------------------------------


def _literal_blocks(text: str):
    """Yield balanced top-level ``{...}`` / ``[...]`` spans, respecting quotes."""
    starters = {"{": "}", "[": "]"}
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch not in starters:
            i += 1
            continue
        close = starters[ch]
        depth = 0
        quote = None
        start = i
        j = i
        matched = False
        while j < n:
            c = text[j]
            if quote:
                if c == "\\":
                    j += 2
                    continue
                if c == quote:
                    quote = None
            elif c in "\"'":
                quote = c
            elif c in "([{":
                depth += 1
            elif c in ")]}":
                depth -= 1
                if depth == 0:
                    if c == close:
                        yield text[start : j + 1]
                        matched = True
                    break
            j += 1
        if not matched and j >= n:
            break
        i = j + 1


def parse_semantic_dicts(text: str) -> list:
    """Parse every python-literal dict/list block found in the response."""
    blocks = []
    for span in _literal_blocks(text):
        try:
            blocks.append(ast.literal_eval(span))
        except (ValueError, SyntaxError):
            continue
    if not blocks:
        raise SchemaError("no parsable dict/list block in semantic response")
    return blocks
