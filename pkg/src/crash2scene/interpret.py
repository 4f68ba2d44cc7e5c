"""Turning tree query answers into one resolved scene description.

Every quantity is estimated several ways: a road's lane counts come from the
lane tree's mid node, from the root overview and from summing leaf regions,
and the road count comes from the root, from the detected boundary pairs and
from summing per-region confirmations. Disagreements are settled by simple
majority with a fixed precedence for ties (mid, then root, then leaf), and
every settled disagreement lands in the audit log. Across trees, structural
facts from the road and lane trees outrank claims from the user trees, which
only ever narrow down user state.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field

from .errors import LayoutSpecError, SchemaError
from .gateway import Gateway, ModelQuery
from .parsing import parse_angle, parse_semantic_dicts, render_angle
from .prompts import prompt_text
from .roads import RoadLayoutSpec, RoadSpec, snap_angle, wrap_pm
from .sketch import Decomposition, VisualTree, build_all_trees, decompose

ANGLE_MATCH_GATE_RAD = math.radians(30.0)

_PAIR_RE = re.compile(r"\[\s*(\d+)\s*\|\s*(\d+)\s*\]")
_ROADS_RE = re.compile(r"roads\s*:\s*(\d+)", re.IGNORECASE)
_CATEGORY_RE = re.compile(r"category\s*:\s*([A-Za-z]+)", re.IGNORECASE)
_CURV_RE = re.compile(r"curvature\s*:\s*(-?\d+(?:\.\d+)?(?:e-?\d+)?)", re.IGNORECASE)
_LANES_SIDE_RE = re.compile(r"lanes\s*:\s*(\d+)\s*,\s*side\s*:\s*(\w+)", re.IGNORECASE)
_REPORT_ENTRY_RE = re.compile(r"road_angle\s+([^:]+):\s*\[\s*(\d+)\s*\|\s*(\d+)\s*\]", re.IGNORECASE)
_LOCATION_RE = re.compile(
    r"road_angle\s*:\s*([^;]+);\s*lane\s*:\s*(-?\d+)\s*;\s*progress\s*:\s*([0-9.]+)",
    re.IGNORECASE,
)
_MANEUVER_RE = re.compile(r"maneuver\s*:\s*(\w+)", re.IGNORECASE)
_EXTENT_RE = re.compile(r"extent\s*:\s*([0-9.]+)\s*;\s*intent\s*:\s*(\w+)", re.IGNORECASE)
_PRESENT_RE = re.compile(r"present\s*:\s*(yes|no)", re.IGNORECASE)


def parse_lane_report(text: str) -> list[tuple[float, int, int]]:
    """Entries of a per-road lane overview keyed by approach angle."""
    out = []
    for tok, left, right in _REPORT_ENTRY_RE.findall(text):
        out.append((parse_angle(tok.strip()), int(left), int(right)))
    if not out:
        raise SchemaError(f"no road_angle entries in {text!r}")
    return out


def majority(votes: list[tuple[str, object]], precedence: tuple[str, ...]):
    """Most common value; ties go to the earliest source in ``precedence``.

    Returns (winner, disagreed) where disagreed is True when sources differ.
    """
    present = [(src, v) for src, v in votes if v is not None]
    if not present:
        return None, False
    counts = Counter(v for _, v in present)
    top = max(counts.values())
    leaders = {v for v, c in counts.items() if c == top}
    if len(leaders) == 1:
        winner = leaders.pop()
    else:
        ranked = sorted(present, key=lambda sv: precedence.index(sv[0]))
        winner = next(v for _, v in ranked if v in leaders)
    return winner, len(counts) > 1


class _TreeAnswers:
    """Per-node answers for one tree, majority-folded over repeat samples."""

    def __init__(self, gateway: Gateway, tree: VisualTree, samples: int = 1):
        self.by_node = {}
        for node in tree.root.walk():
            answers = []
            for k in range(max(samples, 1)):
                ctx = dict(node.context)
                if samples > 1:
                    ctx["sample"] = k
                query = ModelQuery(
                    prompt=node.prompt, images=(node.image,), context=ctx,
                    schema="free_text",
                )
                answers.append(gateway.ask(query).text)
            self.by_node[id(node)] = self._fold(answers)

    @staticmethod
    def _fold(answers: list[str]) -> str:
        counts = Counter(answers)
        top = max(counts.values())
        return next(a for a in answers if counts[a] == top)

    def of(self, node) -> str:
        return self.by_node[id(node)]


@dataclass
class RoadEstimate:
    pair_id: int
    angle: float
    left: int
    right: int
    curvature: float = 0.0


@dataclass
class LayoutEstimate:
    category: str
    road_count: int
    roads: list[RoadEstimate]
    audit: list[dict] = field(default_factory=list)

    def to_layout_spec(self) -> RoadLayoutSpec:
        if not self.roads:
            raise LayoutSpecError("no roads estimated")
        if self.road_count <= 1 or len(self.roads) == 1:
            r = self.roads[0]
            return RoadLayoutSpec(
                category="SingleRoad",
                roads=[RoadSpec("road1", r.left, r.right, curvature=r.curvature)],
            )
        ordered = sorted(self.roads, key=lambda r: r.angle)
        roads = [
            RoadSpec(f"road{i + 1}", r.left, r.right, angle=snap_angle(r.angle))
            for i, r in enumerate(ordered)
        ]
        return RoadLayoutSpec(category="Intersection", roads=roads)

    def as_rows(self) -> list[tuple[float, int, int]]:
        return [(r.angle, r.left, r.right) for r in self.roads]


def _nearest_entry(entries: list[tuple[float, int, int]], angle: float):
    best = None
    for ent in entries:
        gap = abs(wrap_pm(ent[0] - angle))
        if best is None or gap < best[0]:
            best = (gap, ent)
    if best is None or best[0] > ANGLE_MATCH_GATE_RAD:
        return None
    return best[1]


def estimate_layout(
    gateway: Gateway,
    dec: Decomposition,
    trees: dict[str, VisualTree],
    samples_per_node: int = 1,
) -> LayoutEstimate:
    audit: list[dict] = []

    road_tree = trees["road_identification"]
    road_ans = _TreeAnswers(gateway, road_tree, samples_per_node)
    root_text = road_ans.of(road_tree.root)
    m = _ROADS_RE.search(root_text)
    n_root = int(m.group(1)) if m else None
    n_struct = len(dec.pairs)
    leaf_counts = {}
    n_leaf = 0
    for leaf in road_tree.leaves():
        lm = _ROADS_RE.search(road_ans.of(leaf))
        count = int(lm.group(1)) if lm else 1
        leaf_counts[leaf.context.get("pair_id")] = count
        n_leaf += count
    road_count, disagreed = majority(
        [("structural", n_struct), ("root", n_root), ("leafsum", n_leaf)],
        precedence=("structural", "root", "leafsum"),
    )
    if disagreed:
        audit.append({
            "field": "road_count", "winner": road_count,
            "values": {"structural": n_struct, "root": n_root, "leafsum": n_leaf},
        })

    cm = _CATEGORY_RE.search(root_text)
    category = cm.group(1) if cm else None
    derived = "SingleRoad" if road_count == 1 else "Intersection"
    if category is None:
        category = derived
    elif category != derived and category != "Interchange":
        audit.append({"field": "category", "winner": derived, "loser": category})
        category = derived

    lane_tree = trees["lane_identification"]
    lane_ans = _TreeAnswers(gateway, lane_tree, samples_per_node)
    root_entries = None
    try:
        root_entries = parse_lane_report(lane_ans.of(lane_tree.root))
    except SchemaError:
        audit.append({"field": "lane_root", "note": "unparseable root overview"})

    pair_by_id = {p.pair_id: p for p in dec.pairs}
    roads: list[RoadEstimate] = []
    for mid in lane_tree.mids():
        pair_id = mid.context.get("pair_id")
        pair = pair_by_id[pair_id]
        if leaf_counts.get(pair_id, 1) == 0 and n_struct > road_count:
            audit.append({"field": "pair_dropped", "pair_id": pair_id})
            continue
        text = lane_ans.of(mid)
        pm = _PAIR_RE.search(text)
        mid_l, mid_r = (int(pm.group(1)), int(pm.group(2))) if pm else (None, None)
        cm = _CURV_RE.search(text)
        curvature = float(cm.group(1)) if cm else 0.0

        angle = pair.outward_angle or 0.0
        root_l = root_r = None
        if root_entries:
            ent = _nearest_entry(root_entries, angle)
            if ent is not None:
                root_l, root_r = ent[1], ent[2]

        leaf_l = leaf_r = 0
        for leaf in mid.children:
            lm = _LANES_SIDE_RE.search(lane_ans.of(leaf))
            if not lm:
                continue
            count, side = int(lm.group(1)), lm.group(2).lower()
            if side == "left":
                leaf_l += count
            elif side == "right":
                leaf_r += count

        precedence = ("mid", "root", "leaf")
        left, dis_l = majority(
            [("mid", mid_l), ("root", root_l), ("leaf", leaf_l)], precedence)
        right, dis_r = majority(
            [("mid", mid_r), ("root", root_r), ("leaf", leaf_r)], precedence)
        if dis_l or dis_r:
            audit.append({
                "field": f"lanes.pair{pair_id}", "winner": (left, right),
                "values": {
                    "mid": (mid_l, mid_r), "root": (root_l, root_r),
                    "leaf": (leaf_l, leaf_r),
                },
            })
        roads.append(RoadEstimate(pair_id, angle, int(left or 0), int(right or 0), curvature))

    if road_count != len(roads):
        audit.append({
            "field": "road_count_vs_pairs",
            "road_count": road_count, "pairs": len(roads),
        })
        road_count = len(roads)
    return LayoutEstimate(category, road_count, roads, audit)


def baseline_lane_estimate(
    gateway: Gateway, image, fixture_id: str = "",
) -> list[tuple[float, int, int]]:
    """One-shot whole-sketch lane estimate used as the non-tree reference."""
    query = ModelQuery(
        prompt=prompt_text("baseline"), images=(image,),
        context={"fixture_id": fixture_id, "kind": "baseline", "level": "single"},
        schema="free_text",
    )
    return parse_lane_report(gateway.ask(query).text)


@dataclass
class UserEstimate:
    user_id: str
    waypoints: list[dict] = field(default_factory=list)
    maneuvers: list[str] = field(default_factory=list)
    extent_m: float = 0.0
    intent: str = ""


@dataclass
class ResolvedScene:
    layout: LayoutEstimate
    users: dict[str, UserEstimate] = field(default_factory=dict)
    audit: list[dict] = field(default_factory=list)

    def layout_spec(self) -> RoadLayoutSpec:
        return self.layout.to_layout_spec()


def estimate_users(
    gateway: Gateway,
    trees: dict[str, VisualTree],
    samples_per_node: int = 1,
) -> tuple[dict[str, UserEstimate], list[dict]]:
    users: dict[str, UserEstimate] = {}
    audit: list[dict] = []

    loc_tree = trees.get("user_location")
    if loc_tree is not None:
        ans = _TreeAnswers(gateway, loc_tree, samples_per_node)
        for mid in loc_tree.mids():
            user_id = str(mid.context["user_id"])
            est = users.setdefault(user_id, UserEstimate(user_id))
            m = _LOCATION_RE.search(ans.of(mid))
            wp = {"order": mid.context.get("waypoint_order", len(est.waypoints))}
            if m:
                wp.update({
                    "road_angle": parse_angle(m.group(1).strip()),
                    "lane": int(m.group(2)),
                    "progress": float(m.group(3)),
                })
            present = 0
            for leaf in mid.children:
                pm = _PRESENT_RE.search(ans.of(leaf))
                if pm and pm.group(1).lower() == "yes":
                    present += 1
            if present != 1:
                audit.append({
                    "field": f"presence.{user_id}.{wp['order']}",
                    "regions_claiming_user": present,
                })
            est.waypoints.append(wp)
        for est in users.values():
            est.waypoints.sort(key=lambda w: w["order"])

    beh_tree = trees.get("user_behavior_adjacent")
    if beh_tree is not None:
        ans = _TreeAnswers(gateway, beh_tree, samples_per_node)
        segs: dict[str, list[tuple[int, str]]] = {}
        for mid in beh_tree.mids():
            user_id = str(mid.context["user_id"])
            m = _MANEUVER_RE.search(ans.of(mid))
            token = m.group(1) if m else "go_straight"
            seg = mid.context.get("segment") or [0, 0]
            segs.setdefault(user_id, []).append((int(seg[0]), token))
        for user_id, entries in segs.items():
            est = users.setdefault(user_id, UserEstimate(user_id))
            est.maneuvers = [tok for _, tok in sorted(entries)]

    pure_tree = trees.get("user_behavior_pure")
    if pure_tree is not None:
        ans = _TreeAnswers(gateway, pure_tree, samples_per_node)
        for leaf in pure_tree.leaves():
            user_id = str(leaf.context["user_id"])
            est = users.setdefault(user_id, UserEstimate(user_id))
            m = _EXTENT_RE.search(ans.of(leaf))
            if m:
                est.extent_m = float(m.group(1))
                est.intent = m.group(2)
    return users, audit


def vote_with_priority(
    layout: LayoutEstimate,
    users: dict[str, UserEstimate],
    user_audit: list[dict] | None = None,
) -> ResolvedScene:
    """Cross-tree reconciliation: structure outranks user-tree claims."""
    audit = list(layout.audit) + list(user_audit or [])
    by_angle = [(r.angle, r) for r in layout.roads]

    for est in users.values():
        for wp in est.waypoints:
            if "lane" not in wp or "road_angle" not in wp:
                continue
            road = None
            best = None
            for angle, r in by_angle:
                gap = abs(wrap_pm(angle - wp["road_angle"]))
                if best is None or gap < best:
                    best, road = gap, r
            if road is None:
                continue
            lane = wp["lane"]
            bounded = max(-road.right, min(road.left, lane)) if lane else lane
            if bounded == 0:
                bounded = 1 if road.left else -1
            if bounded != lane:
                audit.append({
                    "field": f"user_lane.{est.user_id}.{wp['order']}",
                    "winner": bounded, "loser": lane,
                    "rule": "layout lanes bound user locations",
                })
                wp["lane"] = bounded
    return ResolvedScene(layout, users, audit)


@dataclass
class SceneDescription:
    layout_spec: RoadLayoutSpec
    users: list[dict]
    events: list[dict]
    queues: list[list[str]]
    resolved: ResolvedScene
    audit: list[dict] = field(default_factory=list)


def synthesize_description(
    gateway: Gateway,
    dec: Decomposition,
    resolved: ResolvedScene,
    narrative: str,
    metadata_text: str = "",
) -> SceneDescription:
    from .roads import render_layout_response

    spec = resolved.layout_spec()
    findings = [render_layout_response(spec)]
    for user_id, est in sorted(resolved.users.items()):
        lanes = [w.get("lane") for w in est.waypoints if "lane" in w]
        findings.append(
            f"{user_id}: lanes {lanes}, maneuvers {est.maneuvers}, "
            f"extent {est.extent_m:g} m, intent {est.intent or 'unknown'}"
        )
    prompt = "\n\n".join([
        prompt_text("synthesize"),
        "Narrative:\n" + narrative,
        "Metadata:\n" + (metadata_text or "none"),
        "Findings:\n" + "\n".join(findings),
    ])
    query = ModelQuery(
        prompt=prompt, images=(dec.image,),
        context={"fixture_id": dec.fixture_id, "kind": "synthesize", "level": "synthesize"},
        schema="semantic_dicts",
    )
    blocks = parse_semantic_dicts(gateway.ask(query).text)

    users, events, queues = [], [], []
    for block in blocks:
        if "queue" in block:
            queues.append(list(block["queue"]))
        elif "entities" in block or "involvement" in block:
            events.append(dict(block))
        elif "name" in block:
            users.append(dict(block))

    audit = list(resolved.audit)
    for block in users:
        est = resolved.users.get(str(block.get("name", "")))
        if est is None:
            continue
        lanes = [w["lane"] for w in est.waypoints if "lane" in w]
        if lanes:
            claimed = block.get("initial_lane")
            if claimed is not None and claimed != lanes[0]:
                audit.append({
                    "field": f"initial_lane.{block['name']}",
                    "winner": lanes[0], "loser": claimed,
                    "rule": "location tree overrides narrative lane claims",
                })
            block["initial_lane"] = lanes[0]
        block.setdefault("maneuvers", est.maneuvers)
        block.setdefault("extent_m", est.extent_m)
        if est.waypoints and "road_angle" in est.waypoints[0]:
            block.setdefault(
                "road_angle", render_angle(est.waypoints[0]["road_angle"]))
            block.setdefault("progress", est.waypoints[0].get("progress"))
    named = {str(b.get("name")) for b in users}
    for user_id, est in sorted(resolved.users.items()):
        if user_id in named:
            continue
        lanes = [w["lane"] for w in est.waypoints if "lane" in w]
        users.append({
            "name": user_id,
            "type": "animal" if user_id.lower().startswith("animal") else "vehicle",
            "initial_lane": lanes[0] if lanes else None,
            "maneuvers": est.maneuvers,
        })
        audit.append({"field": f"user_added.{user_id}",
                      "rule": "sketch users missing from narrative are kept"})

    return SceneDescription(spec, users, events, queues, resolved, audit)


@dataclass
class InterpretationResult:
    decomposition: Decomposition
    trees: dict[str, VisualTree]
    layout: LayoutEstimate
    resolved: ResolvedScene
    description: SceneDescription | None
    baseline: list[tuple[float, int, int]] | None = None


def interpret_sketch(
    image,
    gateway: Gateway,
    fixture_id: str = "",
    narrative: str = "",
    metadata_text: str = "",
    samples_per_node: int = 1,
    with_baseline: bool = False,
    order_hints: dict[str, list[int]] | None = None,
) -> InterpretationResult:
    """Full path from a sketch image to a resolved scene description."""
    dec = decompose(image, gateway, fixture_id, order_hints)
    trees = build_all_trees(dec)
    layout = estimate_layout(gateway, dec, trees, samples_per_node)
    users, user_audit = estimate_users(gateway, trees, samples_per_node)
    resolved = vote_with_priority(layout, users, user_audit)
    description = None
    if narrative:
        description = synthesize_description(
            gateway, dec, resolved, narrative, metadata_text)
    baseline = None
    if with_baseline:
        baseline = baseline_lane_estimate(gateway, image, fixture_id)
    return InterpretationResult(dec, trees, layout, resolved, description, baseline)
