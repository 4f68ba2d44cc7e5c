"""Synthetic crash sketches with ground truth and a scripted answer source.

Scenes are drawn from the same geometry builder the road stage uses, so a
drawn sketch and the final road network always agree. Each drawn stroke is
recorded as a primitive with its pixel box, which lets :func:`make_resolver`
answer decomposition queries from the truth instead of a live model: the
resolver locates a query's anchor point in world space and reads the answer
off the layout. Freezing the resulting answer book gives bit-identical
replays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, ImageDraw

from .gateway import ModelQuery
from .parsing import render_angle
from .roads import (
    BuiltRoad,
    RoadGeometry,
    RoadLayoutSpec,
    RoadSpec,
    build_geometry,
    wrap_pm,
)

PX_PER_M = 3.0
EDGE_WIDTH_PX = 3
LANE_LINE_WIDTH_PX = 2
MAX_DRAW_LENGTH_M = 130.0
PAD_PX = 30

# Icon footprints are narrower than real vehicles: a lane is only ~10 px
# wide at the default scale and icons must never touch the lane lines.
ICON_SIZES_M = {
    "vehicle": (4.5, 1.4),
    "pedestrian": (0.8, 0.8),
    "animal": (1.8, 0.8),
}


@dataclass
class WaypointTruth:
    road_key: str
    lane_id: int
    s_frac: float                   # fraction of the drawn arm length
    touching: int | None = None     # group id shared with another icon


@dataclass
class UserTruth:
    user_id: str
    kind: str                       # vehicle | pedestrian | animal
    waypoints: list[WaypointTruth]
    maneuvers: list[str] = field(default_factory=list)
    extent_m: float = 0.0
    intent: str = "go_straight"


@dataclass
class Primitive:
    kind: str                       # road_edge | lane_edge | road_user
    road_key: str | None
    bbox: tuple[int, int, int, int]
    user_ids: tuple[str, ...] = ()
    lane_id: int | None = None
    track: np.ndarray | None = None    # px polyline of the drawn stroke
    corners: np.ndarray | None = None  # px corners of a drawn icon rect
    hit_radius: float = 3.0

    def contains(self, px: float, py: float) -> bool:
        if self.track is not None:
            d2 = (self.track[:, 0] - px) ** 2 + (self.track[:, 1] - py) ** 2
            return bool(d2.min() <= self.hit_radius ** 2)
        if self.corners is not None:
            c = self.corners
            crosses = []
            for i in range(4):
                ax, ay = c[i]
                bx, by = c[(i + 1) % 4]
                crosses.append((bx - ax) * (py - ay) - (by - ay) * (px - ax))
            return all(v >= -1.0 for v in crosses) or all(v <= 1.0 for v in crosses)
        x0, y0, x1, y1 = self.bbox
        return x0 <= px <= x1 and y0 <= py <= y1


@dataclass
class SynthScene:
    fixture_id: str
    image: np.ndarray
    layout: RoadLayoutSpec
    geometry: RoadGeometry
    users: dict[str, UserTruth]
    primitives: list[Primitive]
    px_per_m: float
    origin_px: tuple[float, float]   # pixel of world (0, 0)
    draw_lengths: dict[str, float]
    semantic_blocks: list[dict] = field(default_factory=list)
    narrative: str = ""

    def world_to_px(self, x: float, y: float) -> tuple[float, float]:
        ox, oy = self.origin_px
        return ox + self.px_per_m * x, oy - self.px_per_m * y

    def px_to_world(self, px: float, py: float) -> tuple[float, float]:
        ox, oy = self.origin_px
        return (px - ox) / self.px_per_m, (oy - py) / self.px_per_m

    def approach_roads(self) -> list[BuiltRoad]:
        return [r for r in self.geometry.roads if r.junction < 0]

    def road_by_key(self, key: str) -> BuiltRoad:
        for road in self.approach_roads():
            if road.spec_key == key:
                return road
        raise KeyError(key)

    def locate(self, px: float, py: float):
        """Map a pixel point to (road, s, t) of the nearest drawn road band."""
        wx, wy = self.px_to_world(px, py)
        best = None
        for road in self.approach_roads():
            length = self.draw_lengths[road.spec_key]
            step = max(length / 200.0, 0.25)
            s_grid = np.arange(0.0, length + step, step)
            pts = np.array([road.eval(min(s, road.length))[:2] for s in s_grid])
            d2 = (pts[:, 0] - wx) ** 2 + (pts[:, 1] - wy) ** 2
            k = int(np.argmin(d2))
            s = float(s_grid[k])
            x, y, hdg = road.eval(min(s, road.length))
            t = float(-(wx - x) * math.sin(hdg) + (wy - y) * math.cos(hdg))
            half = max(road.left, road.right) * road.lane_width + 2.0
            outside = max(0.0, abs(t) - half)
            score = outside * 100.0 + math.hypot(wx - x, wy - y)
            if best is None or score < best[0]:
                best = (score, road, s, t)
        if best is None:
            return None
        return best[1], best[2], best[3]

    def lane_at(self, road: BuiltRoad, t: float) -> int:
        rel = t - road.lane_offset
        if rel >= 0:
            lane = max(1, math.ceil(rel / road.lane_width - 1e-9))
            return min(lane, road.left) if road.left else 0
        lane = max(1, math.ceil(-rel / road.lane_width - 1e-9))
        return -min(lane, road.right) if road.right else 0


# --- drawing -------------------------------------------------------------------


def _sample_polyline(road: BuiltRoad, t: float, length: float, step: float = 1.0):
    points = []
    s = 0.0
    while s < length:
        x, y, _ = road.world(min(s, road.length), t)[:3]
        points.append((x, y))
        s += step
    x, y, _ = road.world(min(length, road.length), t)[:3]
    points.append((x, y))
    return points


def _lane_line_ts(road: BuiltRoad) -> list[tuple[float, str]]:
    """Lateral positions of every drawn stroke on a road, innermost first."""
    w = road.lane_width
    off = road.lane_offset
    ts: list[tuple[float, str]] = []
    ts.append((off + road.left * w, "road_edge"))
    ts.append((off - road.right * w, "road_edge"))
    if road.left and road.right:
        ts.append((off, "lane_edge"))
    for j in range(1, road.left):
        ts.append((off + j * w, "lane_edge"))
    for j in range(1, road.right):
        ts.append((off - j * w, "lane_edge"))
    return ts


def _icon_corners(cx: float, cy: float, hdg: float, length: float, width: float):
    u = (math.cos(hdg), math.sin(hdg))
    n = (-math.sin(hdg), math.cos(hdg))
    hl, hw = length / 2, width / 2
    return [
        (cx + su * hl * u[0] + sn * hw * n[0], cy + su * hl * u[1] + sn * hw * n[1])
        for su, sn in ((1, 1), (1, -1), (-1, -1), (-1, 1))
    ]


def draw_scene(
    spec: RoadLayoutSpec,
    users: list[UserTruth] | None = None,
    fixture_id: str = "scene",
    px_per_m: float = PX_PER_M,
    semantic_blocks: list[dict] | None = None,
    narrative: str = "",
) -> SynthScene:
    """Render a layout (plus optional road users) into a sketch with truth."""
    spec = spec.normalized()
    spec.validate()
    geometry = build_geometry(spec)
    users = list(users or [])

    approach = [r for r in geometry.roads if r.junction < 0]
    draw_lengths = {r.spec_key: min(r.length, MAX_DRAW_LENGTH_M) for r in approach}

    strokes: list[tuple[str, str, list, int | None]] = []   # kind, road_key, points, lane
    for road in approach:
        length = draw_lengths[road.spec_key]
        for t, kind in _lane_line_ts(road):
            strokes.append((kind, road.spec_key, _sample_polyline(road, t, length), None))

    icon_specs = []   # (user, wp_index, corners)
    for user in users:
        for wi, wp in enumerate(user.waypoints):
            road = next(r for r in approach if r.spec_key == wp.road_key)
            length = draw_lengths[wp.road_key]
            s = wp.s_frac * length
            t = road.lane_center_t(wp.lane_id)
            x, y, hdg = road.world(min(s, road.length), t)
            if wp.lane_id > 0:
                hdg += math.pi
            size = ICON_SIZES_M.get(user.kind, ICON_SIZES_M["vehicle"])
            icon_specs.append((user, wi, _icon_corners(x, y, hdg, *size)))

    all_pts = [p for _, _, pts, _ in strokes for p in pts]
    all_pts += [c for _, _, corners in icon_specs for c in corners]
    xs = [p[0] for p in all_pts]
    ys = [p[1] for p in all_pts]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    width = int(math.ceil((x1 - x0) * px_per_m)) + 2 * PAD_PX
    height = int(math.ceil((y1 - y0) * px_per_m)) + 2 * PAD_PX
    origin_px = (PAD_PX - x0 * px_per_m, PAD_PX + y1 * px_per_m)

    def to_px(p):
        return (origin_px[0] + px_per_m * p[0], origin_px[1] - px_per_m * p[1])

    img = Image.new("L", (width, height), 255)
    draw = ImageDraw.Draw(img)
    primitives: list[Primitive] = []

    for kind, road_key, points, lane in strokes:
        px_pts = [to_px(p) for p in points]
        stroke_w = EDGE_WIDTH_PX if kind == "road_edge" else LANE_LINE_WIDTH_PX
        draw.line(px_pts, fill=0, width=stroke_w, joint="curve")
        bx = [p[0] for p in px_pts]
        by = [p[1] for p in px_pts]
        pad = stroke_w / 2 + 1
        primitives.append(Primitive(
            kind, road_key,
            (int(min(bx) - pad), int(min(by) - pad),
             int(max(bx) + pad) + 1, int(max(by) + pad) + 1),
            track=np.asarray(px_pts, dtype=float),
            hit_radius=stroke_w / 2 + 1.5,
        ))

    touch_centers: dict[int, list[tuple[float, float]]] = {}
    for user, wi, corners in icon_specs:
        px_corners = [to_px(c) for c in corners]
        draw.polygon(px_corners, fill=0)
        bx = [p[0] for p in px_corners]
        by = [p[1] for p in px_corners]
        primitives.append(Primitive(
            "road_user", user.waypoints[wi].road_key,
            (int(min(bx)) - 1, int(min(by)) - 1, int(max(bx)) + 2, int(max(by)) + 2),
            user_ids=(user.user_id,),
            lane_id=user.waypoints[wi].lane_id,
            corners=np.asarray(px_corners, dtype=float),
        ))
        group = user.waypoints[wi].touching
        if group is not None:
            cx = sum(bx) / len(bx)
            cy = sum(by) / len(by)
            touch_centers.setdefault(group, []).append((cx, cy))
    # Icons marked as touching get a short bridge stroke so they merge into
    # one drawn blob, the way colliding vehicles overlap in real sketches.
    for centers in touch_centers.values():
        for a, b in zip(centers[:-1], centers[1:]):
            draw.line([a, b], fill=0, width=3)

    scene = SynthScene(
        fixture_id=fixture_id,
        image=np.asarray(img, dtype=np.uint8),
        layout=spec,
        geometry=geometry,
        users={u.user_id: u for u in users},
        primitives=primitives,
        px_per_m=px_per_m,
        origin_px=origin_px,
        draw_lengths=draw_lengths,
        semantic_blocks=list(semantic_blocks or []),
        narrative=narrative,
    )
    return scene


# --- scripted answers ------------------------------------------------------------


def _angle_token(road: BuiltRoad) -> str:
    angle = road.angle if road.angle is not None else 0.0
    return render_angle(angle % (2 * math.pi))


def _lane_report(scene: SynthScene) -> str:
    parts = []
    for road in sorted(scene.approach_roads(), key=lambda r: (r.angle or 0.0)):
        parts.append(f"road_angle {_angle_token(road)}: [{road.left} | {road.right}]")
    return "; ".join(parts)


_LABEL_PRIORITY = ("road_user", "traffic_sign", "road_edge", "lane_edge", "annotation")


def _classify_answer(scene: SynthScene, ctx: dict) -> str:
    probes = ctx.get("probes") or []
    if not probes:
        cx = (ctx["bbox"][0] + ctx["bbox"][2]) / 2
        cy = (ctx["bbox"][1] + ctx["bbox"][3]) / 2
        probes = [[cx, cy]]
    hits = [
        p for p in scene.primitives
        if any(p.contains(px, py) for px, py in probes)
    ]
    for label in _LABEL_PRIORITY:
        matched = [p for p in hits if p.kind == label]
        if matched:
            if label == "road_user":
                ids = sorted({uid for p in matched for uid in p.user_ids})
                return f"label: road_user; ids: {', '.join(ids)}"
            return f"label: {label}"
    return "label: other"


def _locate_ctx_point(scene: SynthScene, ctx: dict, key: str):
    point = ctx.get(key)
    if not point:
        return None
    return scene.locate(float(point[0]), float(point[1]))


def _road_leaf_answer(scene: SynthScene, ctx: dict) -> str:
    hit = _locate_ctx_point(scene, ctx, "center")
    if hit is None:
        return "roads: 0"
    road, s, t = hit
    half = max(road.left, road.right) * road.lane_width + 1.0
    return "roads: 1" if abs(t) <= half else "roads: 0"


def _lane_mid_answer(scene: SynthScene, ctx: dict) -> str:
    hit = _locate_ctx_point(scene, ctx, "center")
    if hit is None:
        return "lanes: [0 | 0]; curvature: 0"
    road = hit[0]
    curv = road.curvature or 0.0
    return f"lanes: [{road.left} | {road.right}]; curvature: {curv:g}"


def _lane_leaf_answer(scene: SynthScene, ctx: dict) -> str:
    hit = _locate_ctx_point(scene, ctx, "region_center")
    if hit is None:
        return "lanes: 0, side: none"
    road, _, t = hit
    rel = t - road.lane_offset
    band = (road.left if rel >= 0 else road.right) * road.lane_width
    if abs(rel) > band + 0.5:
        return "lanes: 0, side: none"
    side = "left" if rel >= 0 else "right"
    return f"lanes: 1, side: {side}"


def _nearest_waypoint(scene: SynthScene, user_id: str, ctx: dict):
    user = scene.users.get(user_id)
    if user is None:
        return None, None
    order = ctx.get("waypoint_order")
    if order is not None and 0 <= int(order) < len(user.waypoints):
        return user, user.waypoints[int(order)]
    return user, user.waypoints[0] if user.waypoints else None


def _location_mid_answer(scene: SynthScene, ctx: dict) -> str:
    user, wp = _nearest_waypoint(scene, str(ctx.get("user_id")), ctx)
    if user is None or wp is None:
        return "road_angle: 0; lane: 0; progress: 0"
    road = scene.road_by_key(wp.road_key)
    return (
        f"road_angle: {_angle_token(road)}; lane: {wp.lane_id}; "
        f"progress: {wp.s_frac:.2f}"
    )


def _location_leaf_answer(scene: SynthScene, ctx: dict) -> str:
    hit = _locate_ctx_point(scene, ctx, "region_center")
    user, wp = _nearest_waypoint(scene, str(ctx.get("user_id")), ctx)
    if hit is None or user is None or wp is None:
        return "present: no"
    road, _, t = hit
    if road.spec_key != wp.road_key:
        return "present: no"
    present = scene.lane_at(road, t) == wp.lane_id
    return "present: yes" if present else "present: no"


def _behavior_mid_answer(scene: SynthScene, ctx: dict) -> str:
    user = scene.users.get(str(ctx.get("user_id")))
    seg = ctx.get("segment") or [0, 1]
    if user is None:
        return "maneuver: go_straight"
    idx = int(seg[0])
    if 0 <= idx < len(user.maneuvers):
        return f"maneuver: {user.maneuvers[idx]}"
    return "maneuver: go_straight"


def _behavior_pure_answer(scene: SynthScene, ctx: dict) -> str:
    user = scene.users.get(str(ctx.get("user_id")))
    if user is None:
        return "extent: 0; intent: unknown"
    return f"extent: {user.extent_m:g}; intent: {user.intent}"


def make_resolver(scenes: dict[str, SynthScene] | SynthScene):
    """Build a resolver answering gateway queries from scene ground truth."""
    if isinstance(scenes, SynthScene):
        scenes = {scenes.fixture_id: scenes}

    def resolve(query: ModelQuery) -> str:
        ctx = dict(query.context)
        fixture = str(ctx.get("fixture_id", ""))
        scene = scenes.get(fixture)
        if scene is None and len(scenes) == 1:
            scene = next(iter(scenes.values()))
        if scene is None:
            raise KeyError(f"no synthetic scene registered for {fixture!r}")

        kind = ctx.get("kind") or ctx.get("tree") or ""
        level = str(ctx.get("level", "single"))
        if kind == "component":
            return _classify_answer(scene, ctx)
        if kind == "baseline" or (level == "single" and not kind):
            return _lane_report(scene)
        if kind == "road_identification":
            if level == "root":
                return f"roads: {len(scene.approach_roads())}; category: {scene.layout.category}"
            return _road_leaf_answer(scene, ctx)
        if kind == "lane_identification":
            if level == "root":
                return _lane_report(scene)
            if level == "mid":
                return _lane_mid_answer(scene, ctx)
            return _lane_leaf_answer(scene, ctx)
        if kind == "user_location":
            if level == "root":
                return "ok"
            if level == "mid":
                return _location_mid_answer(scene, ctx)
            return _location_leaf_answer(scene, ctx)
        if kind == "user_behavior_adjacent":
            if level == "root":
                return "ok"
            if level == "mid":
                return _behavior_mid_answer(scene, ctx)
            return _location_leaf_answer(scene, ctx)
        if kind == "user_behavior_pure":
            if level == "root":
                return "ok"
            return _behavior_pure_answer(scene, ctx)
        if kind == "synthesize":
            return "\n".join(repr(block) for block in scene.semantic_blocks)
        return "ok"

    return resolve


# --- fixture factories ------------------------------------------------------------


def _single_spec(left: int, right: int, curvature: float = 0.0) -> RoadLayoutSpec:
    return RoadLayoutSpec(
        category="SingleRoad",
        roads=[RoadSpec("road1", left, right, curvature=curvature)],
    )


def _intersection_spec(arms: list[tuple[int, int, float]]) -> RoadLayoutSpec:
    roads = [
        RoadSpec(f"road{i + 1}", left, right, angle=angle)
        for i, (left, right, angle) in enumerate(arms)
    ]
    return RoadLayoutSpec(category="Intersection", roads=roads)


def layout_benchmark(
    count: int = 100, seed: int = 7, singles: int | None = None,
) -> list[SynthScene]:
    """Mixed single-road and intersection sketches with known lane counts.

    With ``singles`` set, exactly that many single-road sketches are produced
    and the rest are intersections; otherwise the split is random (p=0.25).
    """
    rng = np.random.default_rng(seed)
    if singles is None:
        draw_single = [bool(rng.random() < 0.25) for _ in range(count)]
    else:
        draw_single = [i < singles for i in range(count)]
        rng.shuffle(draw_single)
    scenes = []
    compass = [0.0, math.pi / 2, math.pi, 3 * math.pi / 2]
    for i in range(count):
        fixture_id = f"layout_{i:03d}"
        if draw_single[i]:
            curv = float(rng.choice([0.0, 0.003, -0.003, 0.005, -0.005]))
            spec = _single_spec(int(rng.integers(1, 4)), int(rng.integers(1, 4)), curv)
        else:
            n_arms = int(rng.choice([3, 4, 5], p=[0.35, 0.5, 0.15]))
            if n_arms == 5:
                angles = [k * 2 * math.pi / 5 for k in range(5)]
            elif n_arms == 4:
                angles = compass
            else:
                keep = sorted(rng.choice(4, size=3, replace=False))
                angles = [compass[k] for k in keep]
            arms = [
                (int(rng.integers(1, 4)), int(rng.integers(1, 4)), a)
                for a in angles
            ]
            spec = _intersection_spec(arms)
        scenes.append(draw_scene(spec, fixture_id=fixture_id))
    return scenes


def scene_side_hit(fixture_id: str = "side_hit") -> SynthScene:
    """Two vehicles meeting at a 4-way crossing, final icons touching."""
    spec = _intersection_spec([
        (2, 2, 0.0), (2, 2, math.pi / 2), (2, 2, math.pi), (2, 2, 3 * math.pi / 2),
    ])
    users = [
        UserTruth(
            "Vehicle 1", "vehicle",
            waypoints=[
                WaypointTruth("road4", 1, 0.55),
                WaypointTruth("road4", 1, 0.06, touching=1),
            ],
            maneuvers=["go_straight"],
            extent_m=60.0, intent="cross_straight",
        ),
        UserTruth(
            "Vehicle 2", "vehicle",
            waypoints=[
                WaypointTruth("road1", 1, 0.5),
                WaypointTruth("road4", 1, 0.09, touching=1),
            ],
            maneuvers=["go_straight"],
            extent_m=55.0, intent="cross_straight",
        ),
    ]
    blocks = [
        {"name": "Vehicle 1", "type": "vehicle", "state": "moving",
         "initial_lane": 1, "movement": "going straight", "initial_speed": None,
         "actions": ["go straight", "enter intersection"]},
        {"name": "Vehicle 2", "type": "vehicle", "state": "moving",
         "initial_lane": 1, "movement": "going straight", "initial_speed": None,
         "actions": ["go straight", "enter intersection"]},
        {"entities": ["Vehicle 1", "Vehicle 2"], "involvement": "crash",
         "type_of_the_crash": "vehicle-vehicle", "crash_style": "side hit",
         "posture": ["front", "left side"],
         "reactions": [["brake", "stop"], ["brake", "stop"]]},
    ]
    narrative = (
        "Vehicle 1 was northbound approaching the crossing while Vehicle 2 "
        "came from the east. Vehicle 2 entered the intersection and its front "
        "struck the left side of Vehicle 1. Both drivers braked and stopped."
    )
    return draw_scene(spec, users, fixture_id=fixture_id,
                      semantic_blocks=blocks, narrative=narrative)


def scene_rear_end(fixture_id: str = "rear_end") -> SynthScene:
    """A follower running into a slower lead vehicle on a straight road."""
    spec = _single_spec(1, 1)
    users = [
        UserTruth(
            "Vehicle 1", "vehicle",
            waypoints=[WaypointTruth("road1", -1, 0.60, touching=2)],
            extent_m=10.0, intent="go_straight",
        ),
        UserTruth(
            "Vehicle 2", "vehicle",
            waypoints=[
                WaypointTruth("road1", -1, 0.25),
                WaypointTruth("road1", -1, 0.57, touching=2),
            ],
            maneuvers=["go_straight"],
            extent_m=70.0, intent="go_straight",
        ),
    ]
    blocks = [
        {"name": "Vehicle 1", "type": "vehicle", "state": "moving",
         "initial_lane": -1, "movement": "going straight", "initial_speed": 10.0,
         "actions": ["go straight"]},
        {"name": "Vehicle 2", "type": "vehicle", "state": "moving",
         "initial_lane": -1, "movement": "going straight", "initial_speed": 15.0,
         "actions": ["go straight", "brake late"]},
        {"entities": ["Vehicle 2", "Vehicle 1"], "involvement": "crash",
         "type_of_the_crash": "vehicle-vehicle", "crash_style": "rear-end",
         "posture": ["front", "back"],
         "reactions": [["stop"], ["stop"]]},
        {"queue": ["Vehicle 1", "Vehicle 2"]},
    ]
    narrative = (
        "Vehicle 2 was following Vehicle 1 in the same lane. Vehicle 1 slowed "
        "and Vehicle 2 failed to brake in time, striking the back of Vehicle 1 "
        "with its front. Both vehicles came to rest in the lane."
    )
    return draw_scene(spec, users, fixture_id=fixture_id,
                      semantic_blocks=blocks, narrative=narrative)


def scene_animal(fixture_id: str = "animal") -> SynthScene:
    """A deer stepping into the travel lane of a two-lane road."""
    spec = _single_spec(1, 1)
    users = [
        UserTruth(
            "Vehicle 1", "vehicle",
            waypoints=[
                WaypointTruth("road1", -1, 0.2),
                WaypointTruth("road1", -1, 0.5, touching=3),
            ],
            maneuvers=["go_straight"],
            extent_m=60.0, intent="go_straight",
        ),
        UserTruth(
            "Animal 1", "animal",
            waypoints=[WaypointTruth("road1", -1, 0.52, touching=3)],
            extent_m=5.0, intent="cross_straight",
        ),
    ]
    blocks = [
        {"name": "Vehicle 1", "type": "vehicle", "state": "moving",
         "initial_lane": -1, "movement": "going straight", "initial_speed": None,
         "actions": ["go straight"]},
        {"name": "Animal 1", "type": "animal", "state": "moving",
         "movement": "crossing the road", "actions": ["cross the road"]},
        {"entities": ["Vehicle 1", "Animal 1"], "involvement": "crash",
         "type_of_the_crash": "vehicle-animal", "crash_style": "animal encounter",
         "posture": ["front", "left side"],
         "reactions": [["brake", "stop"], []]},
    ]
    narrative = (
        "A deer entered the roadway from the right shoulder. Vehicle 1 was "
        "traveling straight and could not avoid it; the front of the vehicle "
        "struck the animal. The driver braked and stopped on the lane."
    )
    return draw_scene(spec, users, fixture_id=fixture_id,
                      semantic_blocks=blocks, narrative=narrative)


def user_scene_set() -> list[SynthScene]:
    return [scene_side_hit(), scene_rear_end(), scene_animal()]
