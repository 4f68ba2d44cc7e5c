"""Kinematic execution of scenario documents on their road network.

Actors follow lane centerlines along their routes, storyboard triggers fire
once on first satisfaction, and actions ramp speed, blend lane changes and
offsets, teleport, or replay trajectories. A run is deterministic for fixed
inputs; collisions are oriented-bounding-box overlaps and never halt the
run by themselves (post-crash behavior comes from the scenario).
"""

from __future__ import annotations

import csv
import io
import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field

from .errors import ActorLookupError, SimulationError, UnsupportedFeatureError
from .roads import BuiltRoad, RoadGeometry, parse_opendrive, render_geometry_svg

DT_DEFAULT_S = 0.1
DT_MAX_S = 0.2
HORIZON_DEFAULT_S = 30.0


# --- trace types ------------------------------------------------------------


@dataclass(slots=True)
class AgentState:
    actor_id: str
    x: float
    y: float
    heading: float
    speed: float
    road: int | None
    lane: int | None
    s: float


@dataclass
class CollisionEvent:
    pair: tuple[str, str]
    time: float
    location: tuple[float, float]
    postures: tuple[str, str]


@dataclass
class SimTrace:
    dt: float
    actors: list[str]
    dims: dict[str, tuple[float, float]]   # actor -> (length, width)
    steps: list[list[AgentState]]          # steps[k][i]: actors[i] at t = k*dt
    collisions: list[CollisionEvent] = field(default_factory=list)
    min_distance: dict[tuple[str, str], float] = field(default_factory=dict)

    def index(self, actor_id: str) -> int:
        try:
            return self.actors.index(actor_id)
        except ValueError:
            raise ActorLookupError(f"actor {actor_id!r} not in trace") from None

    def states(self, actor_id: str) -> list[AgentState]:
        i = self.index(actor_id)
        return [row[i] for row in self.steps]


# --- oriented boxes ---------------------------------------------------------


def _corners(x, y, h, length, width):
    ca, sa = math.cos(h), math.sin(h)
    hl, hw = length / 2.0, width / 2.0
    return (
        (x + ca * hl - sa * hw, y + sa * hl + ca * hw),
        (x + ca * hl + sa * hw, y + sa * hl - ca * hw),
        (x - ca * hl + sa * hw, y - sa * hl - ca * hw),
        (x - ca * hl - sa * hw, y - sa * hl + ca * hw),
    )


def _rects_overlap(ra, rb) -> bool:
    for rect in (ra, rb):
        for i in (0, 1):
            ax = rect[i + 1][0] - rect[i][0]
            ay = rect[i + 1][1] - rect[i][1]
            pa = [px * ax + py * ay for px, py in ra]
            pb = [px * ax + py * ay for px, py in rb]
            if max(pa) < min(pb) or max(pb) < min(pa):
                return False
    return True


def _point_seg_d2(px, py, ax, ay, bx, by):
    dx, dy = bx - ax, by - ay
    den = dx * dx + dy * dy
    if den <= 0.0:
        return (px - ax) ** 2 + (py - ay) ** 2
    u = ((px - ax) * dx + (py - ay) * dy) / den
    u = 0.0 if u < 0.0 else (1.0 if u > 1.0 else u)
    qx, qy = ax + u * dx, ay + u * dy
    return (px - qx) ** 2 + (py - qy) ** 2


def _rect_gap(ra, rb) -> float:
    """Exact clearance between two rectangles; 0 when they overlap."""
    if _rects_overlap(ra, rb):
        return 0.0
    best = math.inf
    # Disjoint convex shapes: closest approach is vertex-to-edge.
    for i in range(4):
        a1, a2 = ra[i], ra[(i + 1) % 4]
        for j in range(4):
            b1, b2 = rb[j], rb[(j + 1) % 4]
            d2 = min(
                _point_seg_d2(a1[0], a1[1], b1[0], b1[1], b2[0], b2[1]),
                _point_seg_d2(a2[0], a2[1], b1[0], b1[1], b2[0], b2[1]),
                _point_seg_d2(b1[0], b1[1], a1[0], a1[1], a2[0], a2[1]),
                _point_seg_d2(b2[0], b2[1], a1[0], a1[1], a2[0], a2[1]),
            )
            if d2 < best:
                best = d2
    return math.sqrt(best)


def _posture(of_x, of_y, other_heading) -> str:
    """Sector of a displacement seen from the other actor's frame."""
    ang = math.atan2(of_y, of_x) - other_heading
    ang = math.atan2(math.sin(ang), math.cos(ang))
    if abs(ang) <= math.pi / 4:
        return "front"
    if abs(ang) >= 3 * math.pi / 4:
        return "back"
    return "left side" if ang > 0 else "right side"


def _pair_postures(sa: AgentState, sb: AgentState) -> tuple[str, str]:
    return (
        _posture(sa.x - sb.x, sa.y - sb.y, sb.heading),
        _posture(sb.x - sa.x, sb.y - sa.y, sa.heading),
    )


# --- document parsing -------------------------------------------------------


@dataclass
class _Entity:
    name: str
    category: str
    length: float
    width: float


@dataclass
class _Cond:
    kind: str                     # time | traveled | reldist | dist
    entity: str | None = None
    other: str | None = None
    value: float = 0.0
    rule: str = "greaterThan"
    freespace: bool = False
    point: tuple[float, float] | None = None
    delay: float = 0.0
    sat_time: float | None = None


@dataclass
class _Event:
    name: str
    actor: str
    groups: list[list[_Cond]]
    actions: list[tuple]
    fired: bool = False


@dataclass
class _Act:
    name: str
    groups: list[list[_Cond]]
    events: list[_Event]
    started: bool = False


@dataclass
class _Document:
    entities: list[_Entity]
    inits: list[tuple[str, list[tuple]]]   # (entity, actions) in document order
    acts: list[_Act]


def _road_by_id(geo: RoadGeometry, road_id: int) -> BuiltRoad:
    for r in geo.roads:
        if r.road_id == road_id:
            return r
    raise SimulationError(f"scenario references unknown road id {road_id}")


def _parse_position(el: ET.Element | None, geo: RoadGeometry):
    if el is None:
        raise UnsupportedFeatureError("action is missing its Position")
    lp = el.find("LanePosition")
    if lp is not None:
        road = _road_by_id(geo, int(lp.get("roadId")))
        return ("lane", road, int(lp.get("laneId")),
                float(lp.get("s")), float(lp.get("offset") or 0.0))
    wp = el.find("WorldPosition")
    if wp is not None:
        return ("world", float(wp.get("x")), float(wp.get("y")),
                float(wp.get("h") or 0.0))
    kinds = ", ".join(child.tag for child in el)
    raise UnsupportedFeatureError(f"unsupported position variant: {kinds}")


def _position_point(pos, geo) -> tuple[float, float]:
    if pos[0] == "world":
        return pos[1], pos[2]
    _, road, lane, s, offset = pos
    t = road.lane_center_t(lane) + offset
    x, y, _ = road.world(s, t)
    return x, y


def _parse_private_action(el: ET.Element, geo: RoadGeometry) -> tuple:
    child = next(iter(el), None)
    if child is None:
        raise UnsupportedFeatureError("empty PrivateAction")
    tag = child.tag
    if tag == "LongitudinalAction":
        sp = child.find("SpeedAction")
        if sp is None:
            raise UnsupportedFeatureError(
                "unsupported longitudinal action: "
                + ", ".join(c.tag for c in child))
        tgt = sp.find("SpeedActionTarget/AbsoluteTargetSpeed")
        if tgt is None:
            raise UnsupportedFeatureError("only AbsoluteTargetSpeed is supported")
        dyn = sp.find("SpeedActionDynamics")
        value = float(dyn.get("value") or 0.0) if dyn is not None else 0.0
        dim = dyn.get("dynamicsDimension", "time") if dyn is not None else "time"
        if dim not in ("time", "distance"):
            raise UnsupportedFeatureError(f"speed dynamics dimension {dim!r}")
        return ("speed", float(tgt.get("value")), value, dim)
    if tag == "LateralAction":
        lc = child.find("LaneChangeAction")
        if lc is not None:
            tgt = lc.find("LaneChangeTarget/AbsoluteTargetLane")
            if tgt is None:
                raise UnsupportedFeatureError("only AbsoluteTargetLane is supported")
            dyn = lc.find("LaneChangeActionDynamics")
            dist = float(dyn.get("value") or 0.0) if dyn is not None else 0.0
            dim = dyn.get("dynamicsDimension", "distance") if dyn is not None else "distance"
            shape = dyn.get("dynamicsShape", "linear") if dyn is not None else "linear"
            end_offset = float(lc.get("targetLaneOffset") or 0.0)
            return ("lane_change", int(tgt.get("value")), dist, dim, shape, end_offset)
        lo = child.find("LaneOffsetAction")
        if lo is not None:
            tgt = lo.find("LaneOffsetTarget/AbsoluteTargetLaneOffset")
            if tgt is None:
                raise UnsupportedFeatureError("only AbsoluteTargetLaneOffset is supported")
            dyn = lo.find("LaneOffsetActionDynamics")
            acc = float(dyn.get("maxLateralAcc") or 2.0) if dyn is not None else 2.0
            return ("lane_offset", float(tgt.get("value")), max(acc, 0.1))
        raise UnsupportedFeatureError(
            "unsupported lateral action: " + ", ".join(c.tag for c in child))
    if tag == "TeleportAction":
        return ("teleport", _parse_position(child.find("Position"), geo))
    if tag == "RoutingAction":
        assign = child.find("AssignRouteAction")
        if assign is not None:
            wps = [_parse_position(w.find("Position"), geo)
                   for w in assign.findall("Route/Waypoint")]
            for wp in wps:
                if wp[0] != "lane":
                    raise UnsupportedFeatureError("route waypoints must be lane positions")
            return ("route", wps)
        follow = child.find("FollowTrajectoryAction")
        if follow is not None:
            verts = []
            for v in follow.findall(".//Polyline/Vertex"):
                pos = _parse_position(v.find("Position"), geo)
                verts.append((float(v.get("time") or 0.0), _position_point(pos, geo)))
            if not verts:
                raise UnsupportedFeatureError("trajectory has no vertices")
            timing = follow.find("TimeReference/Timing")
            scale = float(timing.get("scale") or 1.0) if timing is not None else 1.0
            offset = float(timing.get("offset") or 0.0) if timing is not None else 0.0
            times = [offset + scale * t for t, _ in verts]
            pts = [p for _, p in verts]
            return ("trajectory", times, pts)
        raise UnsupportedFeatureError(
            "unsupported routing action: " + ", ".join(c.tag for c in child))
    raise UnsupportedFeatureError(f"unsupported action type {tag}")


def _parse_condition(el: ET.Element, geo: RoadGeometry) -> _Cond:
    delay = float(el.get("delay") or 0.0)
    byv = el.find("ByValueCondition")
    if byv is not None:
        st = byv.find("SimulationTimeCondition")
        if st is None:
            raise UnsupportedFeatureError(
                "unsupported value condition: " + ", ".join(c.tag for c in byv))
        return _Cond("time", value=float(st.get("value")),
                     rule=st.get("rule", "greaterThan"), delay=delay)
    bye = el.find("ByEntityCondition")
    if bye is None:
        raise UnsupportedFeatureError("condition has no recognized body")
    refs = bye.findall("TriggeringEntities/EntityRef")
    entity = refs[0].get("entityRef") if refs else None
    body = bye.find("EntityCondition")
    inner = next(iter(body), None) if body is not None else None
    if inner is None:
        raise UnsupportedFeatureError("entity condition has no body")
    rule = inner.get("rule", "greaterThan")
    if rule not in ("lessThan", "greaterThan"):
        raise UnsupportedFeatureError(f"unsupported condition rule {rule!r}")
    if inner.tag == "TraveledDistanceCondition":
        return _Cond("traveled", entity=entity,
                     value=float(inner.get("value")), delay=delay)
    if inner.tag == "RelativeDistanceCondition":
        return _Cond("reldist", entity=entity, other=inner.get("entityRef"),
                     value=float(inner.get("value")), rule=rule,
                     freespace=(inner.get("freespace") == "true"), delay=delay)
    if inner.tag == "DistanceCondition":
        pos = _parse_position(inner.find("Position"), geo)
        return _Cond("dist", entity=entity, value=float(inner.get("value")),
                     rule=rule, freespace=(inner.get("freespace") == "true"),
                     point=_position_point(pos, geo), delay=delay)
    raise UnsupportedFeatureError(f"unsupported entity condition {inner.tag}")


def _parse_trigger(el: ET.Element | None, geo: RoadGeometry) -> list[list[_Cond]]:
    if el is None:
        return []
    groups = []
    for group in el.findall("ConditionGroup"):
        conds = [_parse_condition(c, geo) for c in group.findall("Condition")]
        if conds:
            groups.append(conds)
    return groups


def _parse_document(xml_text: str, geo: RoadGeometry) -> _Document:
    try:
        root = ET.fromstring(xml_text)
    except ET.ParseError as exc:
        raise SimulationError(f"scenario is not well-formed XML: {exc}") from None
    if root.tag != "OpenSCENARIO":
        raise SimulationError(f"root element is {root.tag!r}, expected OpenSCENARIO")

    entities = []
    for so in root.findall("Entities/ScenarioObject"):
        name = so.get("name")
        veh = so.find("Vehicle")
        ped = so.find("Pedestrian")
        obj = veh if veh is not None else ped
        if obj is None:
            raise UnsupportedFeatureError(f"entity {name!r} is not a Vehicle or Pedestrian")
        category = "vehicle" if veh is not None else (
            obj.get("pedestrianCategory") or "pedestrian")
        dims = obj.find("BoundingBox/Dimensions")
        length = float(dims.get("length")) if dims is not None else 4.5
        width = float(dims.get("width")) if dims is not None else 1.8
        entities.append(_Entity(name, category, length, width))

    storyboard = root.find("Storyboard")
    if storyboard is None:
        raise SimulationError("scenario has no Storyboard")
    stop = storyboard.find("StopTrigger")
    if stop is not None and len(stop):
        raise UnsupportedFeatureError("storyboard StopTrigger conditions")

    if storyboard.find("Init/Actions/GlobalAction") is not None:
        raise UnsupportedFeatureError("global init actions")
    inits = []
    for private in storyboard.findall("Init/Actions/Private"):
        who = private.get("entityRef")
        actions = [_parse_private_action(a, geo)
                   for a in private.findall("PrivateAction")]
        inits.append((who, actions))

    acts = []
    for story in storyboard.findall("Story"):
        for act_el in story.findall("Act"):
            events = []
            for group in act_el.findall("ManeuverGroup"):
                count = group.get("maximumExecutionCount", "1")
                if count != "1":
                    raise UnsupportedFeatureError("repeating maneuver groups")
                refs = group.findall("Actors/EntityRef")
                if len(refs) != 1:
                    raise UnsupportedFeatureError("maneuver groups must name one actor")
                actor = refs[0].get("entityRef")
                for man in group.findall("Maneuver"):
                    for ev in man.findall("Event"):
                        if ev.get("maximumExecutionCount", "1") != "1":
                            raise UnsupportedFeatureError("repeating events")
                        priority = ev.get("priority", "overwrite")
                        if priority not in ("overwrite", "parallel"):
                            raise UnsupportedFeatureError(
                                f"event priority {priority!r}")
                        actions = []
                        for action in ev.findall("Action"):
                            for pa in action.findall("PrivateAction"):
                                actions.append(_parse_private_action(pa, geo))
                            for ga in action.findall("GlobalAction"):
                                raise UnsupportedFeatureError("global story actions")
                        events.append(_Event(
                            ev.get("name", "event"), actor,
                            _parse_trigger(ev.find("StartTrigger"), geo), actions))
            acts.append(_Act(act_el.get("name", "act"),
                             _parse_trigger(act_el.find("StartTrigger"), geo),
                             events))
    return _Document(entities, inits, acts)


# --- route plans ------------------------------------------------------------


@dataclass
class _Seg:
    road: BuiltRoad
    lane: int
    s_from: float
    s_to: float
    dir: float

    @property
    def length(self) -> float:
        return abs(self.s_to - self.s_from)


def _travel_dir(lane: int) -> float:
    return -1.0 if lane > 0 else 1.0


def _connector_to(geo: RoadGeometry, in_id: int, in_lane: int, out_id: int):
    """Connecting road, its lane, and the exit contact for a junction hop."""
    fallback = None
    for junc in geo.junctions:
        for conn in junc.connections:
            if conn.incoming != in_id:
                continue
            croad = _road_by_id(geo, conn.connecting)
            succ = croad.successor
            if not succ or succ[0] != "road" or succ[1] != out_id:
                continue
            contact = succ[2] or "start"
            for src, dst in conn.lane_links:
                if src == in_lane:
                    return croad, dst, contact
            if conn.lane_links and fallback is None:
                fallback = (croad, conn.lane_links[0][1], contact)
    return fallback


def _expand_route(geo: RoadGeometry, start, waypoints) -> list[_Seg]:
    """Segments from a (road, lane, s) start through lane waypoints."""
    segs: list[_Seg] = []
    cur_road, cur_lane, cur_s = start
    for wp in waypoints:
        _, road, lane, s, _offset = wp
        if road.road_id == cur_road.road_id:
            if abs(s - cur_s) > 1e-9:
                segs.append(_Seg(cur_road, lane, cur_s, s,
                                 1.0 if s >= cur_s else -1.0))
            cur_road, cur_lane, cur_s = road, lane, s
            continue
        direction = _travel_dir(cur_lane)
        face_s = cur_road.length if direction > 0 else 0.0
        if abs(face_s - cur_s) > 1e-9:
            segs.append(_Seg(cur_road, cur_lane, cur_s, face_s, direction))
        hop = _connector_to(geo, cur_road.road_id, cur_lane, road.road_id)
        if hop is not None:
            croad, clane, contact = hop
            segs.append(_Seg(croad, clane, 0.0, croad.length, 1.0))
            entry_s = 0.0 if contact == "start" else road.length
        else:
            # No connector: enter the target road at the end nearest the face.
            fx, fy, _ = cur_road.eval(face_s)
            d0 = math.dist((fx, fy), road.eval(0.0)[:2])
            d1 = math.dist((fx, fy), road.eval(road.length)[:2])
            entry_s = 0.0 if d0 <= d1 else road.length
        if abs(s - entry_s) > 1e-9:
            segs.append(_Seg(road, lane, entry_s, s,
                             1.0 if s >= entry_s else -1.0))
        cur_road, cur_lane, cur_s = road, lane, s
    return [seg for seg in segs if seg.length > 1e-9]


def _default_plan(road: BuiltRoad, lane: int, s: float) -> list[_Seg]:
    direction = _travel_dir(lane)
    end = road.length if direction > 0 else 0.0
    if abs(end - s) <= 1e-9:
        return []
    return [_Seg(road, lane, s, end, direction)]


def _project_to_lane(geo: RoadGeometry, x, y):
    """Nearest (road, lane, s, offset) over all driving lanes."""
    best = None
    for road in geo.roads:
        for piece in road.pieces:
            s_local, t = _project_piece(piece, x, y)
            s = min(max(piece.s + s_local, 0.0), road.length)
            px, py, h = road.eval(s)
            lat = -(x - px) * math.sin(h) + (y - py) * math.cos(h)
            lon = (x - px) * math.cos(h) + (y - py) * math.sin(h)
            half = max(road.left, road.right) * road.lane_width + road.lane_width
            score = abs(lon) + max(0.0, abs(lat - road.lane_offset) - half)
            if best is None or score < best[0] - 1e-12:
                lanes = road.driving_lane_ids()
                lane = min(lanes, key=lambda l: abs(road.lane_center_t(l) - lat))
                best = (score, road, lane, s, lat - road.lane_center_t(lane))
    if best is None:
        raise SimulationError("no roads to project onto")
    _, road, lane, s, offset = best
    return road, lane, s, offset


def _project_piece(piece, x, y):
    if piece.kind == "line" or piece.curvature == 0.0:
        dx, dy = x - piece.x, y - piece.y
        ca, sa = math.cos(piece.hdg), math.sin(piece.hdg)
        s = min(max(dx * ca + dy * sa, 0.0), piece.length)
        t = -dx * sa + dy * ca
        return s, t
    k = piece.curvature
    cx = piece.x - math.sin(piece.hdg) / k
    cy = piece.y + math.cos(piece.hdg) / k
    ang = math.atan2(y - cy, x - cx)
    ang0 = math.atan2(piece.y - cy, piece.x - cx)
    sweep = (ang - ang0) * (1.0 if k > 0 else -1.0)
    sweep = math.atan2(math.sin(sweep), math.cos(sweep))
    s = min(max(sweep / abs(k), 0.0), piece.length)
    r = math.hypot(x - cx, y - cy)
    t = (1.0 / k) - math.copysign(r, k)
    return s, t


# --- agents -----------------------------------------------------------------


class _Agent:
    def __init__(self, entity: _Entity, geo: RoadGeometry):
        self.name = entity.name
        self.length = entity.length
        self.width = entity.width
        self.geo = geo
        self.x = 0.0
        self.y = 0.0
        self.heading = 0.0
        self.speed = 0.0
        self.road: BuiltRoad | None = None
        self.lane = 0
        self.s = 0.0
        self.mode = "follow"           # follow | free | trajectory
        self.plan: list[_Seg] = []
        self.pos = 0.0                 # progress within plan[0]
        self.blend_t = 0.0             # decaying lateral from lane changes
        self.offset_t = 0.0            # lateral from offsets/teleports
        self.traveled = 0.0
        self.speed_ramp = None         # (v0, target, duration, elapsed)
        self.lane_blend = None         # (delta0, distance, covered, shape)
        self.offset_ramp = None        # (o0, target, duration, elapsed)
        self.traj = None               # (times, points, elapsed)

    # -- action entry points --

    def apply(self, action: tuple) -> None:
        kind = action[0]
        if kind == "speed":
            self._start_speed(action[1], action[2], action[3])
        elif kind == "lane_change":
            self._start_lane_change(action[1], action[2], action[3],
                                    action[4], action[5])
        elif kind == "lane_offset":
            self._start_offset(action[1], action[2])
        elif kind == "teleport":
            self._teleport(action[1])
        elif kind == "route":
            self._assign_route(action[1])
        elif kind == "trajectory":
            self.traj = (action[1], action[2], 0.0)
            self.mode = "trajectory"
        else:
            raise UnsupportedFeatureError(f"unsupported action kind {kind!r}")

    def _start_speed(self, target, value, dimension):
        target = max(target, 0.0)
        if dimension == "distance":
            # Equivalent linear-in-time ramp that covers the same distance.
            total = self.speed + target
            value = 2.0 * value / total if total > 1e-9 else 0.0
        if value <= 1e-9:
            self.speed = target
            self.speed_ramp = None
        else:
            self.speed_ramp = (self.speed, target, value, 0.0)

    def _start_lane_change(self, target, dist, dimension, shape, end_offset):
        if self.road is None:
            return
        if dimension == "time":
            dist = max(self.speed, 0.1) * dist
        # Keep the total lateral position continuous at the start of the blend.
        old_total = self.road.lane_center_t(self.lane) + self.blend_t + self.offset_t
        new_center = self.road.lane_center_t(target)
        self.blend_t = old_total - new_center - end_offset
        self.offset_t = end_offset
        self.offset_ramp = None
        self.lane = target
        for seg in self.plan:
            if seg.road.road_id == self.road.road_id:
                seg.lane = target
        if dist <= 1e-9:
            self.blend_t = 0.0
            self.lane_blend = None
        else:
            self.lane_blend = (self.blend_t, dist, 0.0, shape)

    def _start_offset(self, target, max_lat_acc):
        delta = abs(target - self.offset_t)
        duration = max(2.0 * math.sqrt(delta / max_lat_acc), 1e-6)
        self.offset_ramp = (self.offset_t, target, duration, 0.0)

    def _teleport(self, pos):
        if pos[0] == "lane":
            _, road, lane, s, offset = pos
            self.road, self.lane, self.s = road, lane, s
            self.offset_t = offset
        else:
            _, x, y, h = pos
            road, lane, s, offset = _project_to_lane(self.geo, x, y)
            self.road, self.lane, self.s = road, lane, s
            self.offset_t = offset
        self.blend_t = 0.0
        self.lane_blend = None
        self.mode = "follow"
        self.plan = _default_plan(self.road, self.lane, self.s)
        self.pos = 0.0
        self._place()

    def _assign_route(self, waypoints):
        if self.road is None:
            return
        self.plan = _expand_route(
            self.geo, (self.road, self.lane, self.s), waypoints)
        self.pos = 0.0
        self.mode = "follow"
        self._place()

    # -- per-step updates --

    def _ramp_speed(self, dt) -> float:
        """Advance the speed ramp; returns distance covered in dt."""
        if self.speed_ramp is None:
            return self.speed * dt
        v0, target, duration, elapsed = self.speed_ramp
        before = self.speed
        elapsed += dt
        if elapsed >= duration:
            self.speed = target
            self.speed_ramp = None
        else:
            self.speed = v0 + (target - v0) * (elapsed / duration)
            self.speed_ramp = (v0, target, duration, elapsed)
        return (before + self.speed) / 2.0 * dt

    def _ramp_offset(self, dt) -> None:
        if self.offset_ramp is None:
            return
        o0, target, duration, elapsed = self.offset_ramp
        elapsed += dt
        if elapsed >= duration:
            self.offset_t = target
            self.offset_ramp = None
        else:
            u = elapsed / duration
            self.offset_t = o0 + (target - o0) * (u * u * (3.0 - 2.0 * u))
            self.offset_ramp = (o0, target, duration, elapsed)

    def _ramp_blend(self, dist) -> None:
        if self.lane_blend is None:
            return
        delta0, total, covered, shape = self.lane_blend
        covered += dist
        if covered >= total:
            self.blend_t = 0.0
            self.lane_blend = None
            return
        u = covered / total
        frac = u if shape == "linear" else u * u * (3.0 - 2.0 * u)
        self.blend_t = delta0 * (1.0 - frac)
        self.lane_blend = (delta0, total, covered, shape)

    def step(self, dt: float) -> None:
        if self.mode == "trajectory":
            self._step_trajectory(dt)
            return
        dist = self._ramp_speed(dt)
        self._ramp_offset(dt)
        self._ramp_blend(dist)
        self.traveled += dist
        if self.mode == "free":
            self.x += dist * math.cos(self.heading)
            self.y += dist * math.sin(self.heading)
            return
        remaining = dist
        while self.plan and remaining > 1e-12:
            seg = self.plan[0]
            room = seg.length - self.pos
            if remaining < room:
                self.pos += remaining
                remaining = 0.0
            else:
                remaining -= room
                self.pos = seg.length
                self._place()
                self.plan.pop(0)
                self.pos = 0.0
        self._place()
        if not self.plan and remaining > 1e-12 and self.road is not None:
            self.mode = "free"
            self.x += remaining * math.cos(self.heading)
            self.y += remaining * math.sin(self.heading)

    def _step_trajectory(self, dt: float) -> None:
        times, points, elapsed = self.traj
        before = (self.x, self.y)
        elapsed += dt
        if elapsed >= times[-1]:
            self.x, self.y = points[-1]
            if len(points) > 1 and times[-1] > times[0]:
                px, py = points[-2]
                seg_d = math.dist(points[-1], (px, py))
                seg_t = times[-1] - times[-2]
                if seg_d > 1e-9:
                    self.heading = math.atan2(points[-1][1] - py, points[-1][0] - px)
                self.speed = seg_d / seg_t if seg_t > 0 else 0.0
            self.traj = None
            self.mode = "free"
        else:
            self.traj = (times, points, elapsed)
            k = 0
            while k + 1 < len(times) and times[k + 1] <= elapsed:
                k += 1
            if elapsed <= times[0]:
                self.x, self.y = points[0]
            else:
                t0, t1 = times[k], times[k + 1]
                u = (elapsed - t0) / (t1 - t0) if t1 > t0 else 1.0
                x0, y0 = points[k]
                x1, y1 = points[k + 1]
                self.x = x0 + (x1 - x0) * u
                self.y = y0 + (y1 - y0) * u
                if abs(x1 - x0) + abs(y1 - y0) > 1e-9:
                    self.heading = math.atan2(y1 - y0, x1 - x0)
                dur = t1 - t0
                self.speed = math.dist((x0, y0), (x1, y1)) / dur if dur > 0 else 0.0
        moved = math.dist(before, (self.x, self.y))
        self.traveled += moved

    def _place(self) -> None:
        """World pose from the current plan segment or lane reference."""
        if self.plan:
            seg = self.plan[0]
            s = seg.s_from + seg.dir * self.pos
            self.road, self.lane, self.s = seg.road, seg.lane, s
            direction = seg.dir
        else:
            if self.road is None:
                return
            s = self.s
            direction = _travel_dir(self.lane)
        x, y, h = self.road.eval(s)
        t = self.road.lane_center_t(self.lane) + self.blend_t + self.offset_t
        self.x = x - t * math.sin(h)
        self.y = y + t * math.cos(h)
        self.heading = h if direction > 0 else math.atan2(
            math.sin(h + math.pi), math.cos(h + math.pi))
        self.s = s

    def state(self) -> AgentState:
        return AgentState(self.name, self.x, self.y, self.heading, self.speed,
                          self.road.road_id if self.road else None,
                          self.lane if self.road else None, self.s)


# --- condition evaluation ---------------------------------------------------


def _rule_holds(value, threshold, rule) -> bool:
    return value < threshold if rule == "lessThan" else value > threshold


class _World:
    """Per-step view the trigger predicates read from."""

    def __init__(self, agents: dict[str, _Agent]):
        self.agents = agents
        self.t = 0.0
        self._boxes: dict[str, tuple] = {}
        self._gaps: dict[tuple[str, str], float] = {}

    def begin_step(self, t: float) -> None:
        self.t = t
        self._boxes.clear()
        self._gaps.clear()

    def box(self, name: str):
        cached = self._boxes.get(name)
        if cached is None:
            a = self.agents[name]
            cached = _corners(a.x, a.y, a.heading, a.length, a.width)
            self._boxes[name] = cached
        return cached

    def gap(self, a: str, b: str) -> float:
        key = (a, b) if a <= b else (b, a)
        cached = self._gaps.get(key)
        if cached is None:
            cached = _rect_gap(self.box(a), self.box(b))
            self._gaps[key] = cached
        return cached

    def predicate(self, cond: _Cond) -> bool:
        if cond.kind == "time":
            return _rule_holds(self.t, cond.value, cond.rule)
        agent = self.agents.get(cond.entity)
        if agent is None:
            raise SimulationError(f"condition references unknown entity {cond.entity!r}")
        if cond.kind == "traveled":
            return agent.traveled > cond.value
        if cond.kind == "reldist":
            other = self.agents.get(cond.other)
            if other is None:
                raise SimulationError(
                    f"condition references unknown entity {cond.other!r}")
            if cond.freespace:
                centers = math.dist((agent.x, agent.y), (other.x, other.y))
                reach = (math.hypot(agent.length, agent.width)
                         + math.hypot(other.length, other.width)) / 2.0
                if centers - reach > cond.value:
                    # gap is at least centers - reach, already past threshold
                    return cond.rule != "lessThan"
                d = self.gap(cond.entity, cond.other)
            else:
                d = math.dist((agent.x, agent.y), (other.x, other.y))
            return _rule_holds(d, cond.value, cond.rule)
        if cond.kind == "dist":
            d = math.dist((agent.x, agent.y), cond.point)
            return _rule_holds(d, cond.value, cond.rule)
        raise UnsupportedFeatureError(f"unsupported condition kind {cond.kind!r}")


def _groups_satisfied(groups: list[list[_Cond]], world: _World) -> bool:
    if not groups:
        return True
    for group in groups:
        done = True
        for cond in group:
            if cond.sat_time is None and world.predicate(cond):
                cond.sat_time = world.t
            if cond.sat_time is None or world.t < cond.sat_time + cond.delay:
                done = False
        if done:
            return True
    return False


# --- execution --------------------------------------------------------------


def _load_geometry(road) -> RoadGeometry:
    if isinstance(road, RoadGeometry):
        return road
    if isinstance(road, str):
        return parse_opendrive(road)
    raise SimulationError(f"cannot interpret road input of type {type(road).__name__}")


def run(doc, road, horizon: float = HORIZON_DEFAULT_S,
        dt: float = DT_DEFAULT_S) -> SimTrace:
    """Execute a scenario document; returns the full trace.

    ``doc`` is OpenSCENARIO XML text; ``road`` is a RoadGeometry or
    OpenDRIVE XML text.
    """
    if not 0.0 < dt <= DT_MAX_S:
        raise SimulationError(f"dt must be in (0, {DT_MAX_S}] s, got {dt}")
    if horizon <= 0:
        raise SimulationError("horizon must be positive")
    geo = _load_geometry(road)
    document = doc if isinstance(doc, _Document) else _parse_document(doc, geo)

    agents: dict[str, _Agent] = {}
    order = []
    for entity in document.entities:
        agents[entity.name] = _Agent(entity, geo)
        order.append(entity.name)
    for who, actions in document.inits:
        agent = agents.get(who)
        if agent is None:
            raise SimulationError(f"init refers to unknown entity {who!r}")
        for action in actions:
            agent.apply(action)
    for agent in agents.values():
        if agent.road is not None and not agent.plan and agent.mode == "follow":
            agent.plan = _default_plan(agent.road, agent.lane, agent.s)
            agent.pos = 0.0
        agent._place()

    world = _World(agents)
    steps = [[agents[name].state() for name in order]]
    n = int(round(horizon / dt))
    for k in range(n):
        world.begin_step(k * dt)
        for act in document.acts:
            if not act.started:
                act.started = _groups_satisfied(act.groups, world)
            if not act.started:
                continue
            for event in act.events:
                if event.fired:
                    continue
                if _groups_satisfied(event.groups, world):
                    event.fired = True
                    agent = agents.get(event.actor)
                    if agent is None:
                        raise SimulationError(
                            f"event {event.name!r} names unknown actor {event.actor!r}")
                    for action in event.actions:
                        agent.apply(action)
        for name in order:
            agents[name].step(dt)
        steps.append([agents[name].state() for name in order])

    trace = SimTrace(
        dt=dt, actors=order,
        dims={e.name: (e.length, e.width) for e in document.entities},
        steps=steps)
    trace.collisions = detect_collisions(trace)
    collided = {ev.pair for ev in trace.collisions}
    for i, a in enumerate(order):
        for b in order[i + 1:]:
            if (a, b) in collided:
                trace.min_distance[(a, b)] = 0.0
            else:
                trace.min_distance[(a, b)] = _scan_min_gap(trace, a, b)
    return trace


def detect_collisions(trace: SimTrace) -> list[CollisionEvent]:
    """First OBB contact per actor pair, with contact-side postures."""
    events = []
    n = len(trace.actors)
    for i in range(n):
        for j in range(i + 1, n):
            a, b = trace.actors[i], trace.actors[j]
            la, wa = trace.dims[a]
            lb, wb = trace.dims[b]
            reach = (math.hypot(la, wa) + math.hypot(lb, wb)) / 2.0
            for k, row in enumerate(trace.steps):
                sa, sb = row[i], row[j]
                if math.dist((sa.x, sa.y), (sb.x, sb.y)) > reach:
                    continue
                ra = _corners(sa.x, sa.y, sa.heading, la, wa)
                rb = _corners(sb.x, sb.y, sb.heading, lb, wb)
                if _rects_overlap(ra, rb):
                    events.append(CollisionEvent(
                        (a, b), k * trace.dt,
                        ((sa.x + sb.x) / 2.0, (sa.y + sb.y) / 2.0),
                        _pair_postures(sa, sb)))
                    break
    events.sort(key=lambda ev: ev.time)
    return events


def _scan_min_gap(trace: SimTrace, a: str, b: str) -> float:
    i, j = trace.index(a), trace.index(b)
    la, wa = trace.dims[a]
    lb, wb = trace.dims[b]
    reach = (math.hypot(la, wa) + math.hypot(lb, wb)) / 2.0
    best = math.inf
    for row in trace.steps:
        sa, sb = row[i], row[j]
        center = math.dist((sa.x, sa.y), (sb.x, sb.y))
        if center - reach >= best:
            continue
        gap = _rect_gap(
            _corners(sa.x, sa.y, sa.heading, la, wa),
            _corners(sb.x, sb.y, sb.heading, lb, wb))
        if gap < best:
            best = gap
            if best == 0.0:
                break
    return best


def min_pair_distance(trace: SimTrace, a: str, b: str) -> float:
    """Minimum clearance between two actors' boxes over the trace."""
    if a == b:
        raise ActorLookupError(f"pair needs two distinct actors, got {a!r} twice")
    trace.index(a)
    trace.index(b)
    key = (a, b) if (a, b) in trace.min_distance else (b, a)
    if key in trace.min_distance:
        return trace.min_distance[key]
    return _scan_min_gap(trace, a, b)


# --- export -----------------------------------------------------------------


def trace_to_csv(trace: SimTrace) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["t", "actor", "x", "y", "heading", "speed", "road", "lane"])
    for k, row in enumerate(trace.steps):
        t = k * trace.dt
        for st in row:
            writer.writerow([
                f"{t:.3f}", st.actor_id, f"{st.x:.4f}", f"{st.y:.4f}",
                f"{st.heading:.5f}", f"{st.speed:.4f}",
                "" if st.road is None else st.road,
                "" if st.lane is None else st.lane,
            ])
    return out.getvalue()


def render_trace_svg(geometry: RoadGeometry, trace: SimTrace, size: int = 800) -> str:
    polylines = [(name, [(st.x, st.y) for st in trace.states(name)])
                 for name in trace.actors]
    return render_geometry_svg(geometry, polylines, size=size)
