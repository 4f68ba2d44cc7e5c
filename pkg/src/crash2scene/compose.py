"""Crash behavior composition: semantic description to OpenSCENARIO.

The composer never invents behavior. Every trigger/action in the output
document comes from one catalog element, selected by the rule table in
``data/composition_rules.toml``. Numeric slots the description does not pin
become named placeholders with bounds; the optimizer assigns their values.
"""

from __future__ import annotations

import json
import math
import re
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from importlib import resources

try:
    import tomllib
except ModuleNotFoundError:  # 3.10
    import tomli as tomllib

from .errors import (
    CompositionError,
    InstantiationError,
    ParamRangeError,
    PlacementError,
    ScenarioValidationError,
)
from .gateway import Gateway, ModelQuery
from .parsing import parse_angle
from .prompts import prompt_text
from .roads import RoadGeometry, RoadLayoutSpec, RoadSpec, build_geometry, wrap_pm

CONTACT_TRIGGER_M = 0.3
D_DYN_DEFAULT_M = 30.0
SPEED_RAMP_S = 2.0
FOLLOW_GAP_M = 8.0

# Default footprints (length, width) in meters; collision geometry needs them.
DEFAULT_DIMENSIONS = {
    "vehicle": (4.5, 1.8),
    "pedestrian": (0.5, 0.5),
    "animal": (1.5, 0.5),
}

PLACEHOLDER_BOUNDS = {
    "time": (0.0, 30.0),
    "speed": (0.0, 40.0),
    "distance": (0.0, 200.0),
    "offset": (-3.5, 3.5),
}


# --- catalog ------------------------------------------------------------------


@dataclass(frozen=True)
class Slot:
    name: str
    kind: str
    tunable: bool


@dataclass(frozen=True)
class ScenarioElement:
    index: int
    name: str
    summary: str
    slots: tuple[Slot, ...]

    def slot(self, name: str) -> Slot:
        for s in self.slots:
            if s.name == name:
                return s
        raise KeyError(f"element {self.index} has no slot {name!r}")


def _data_text(name: str) -> str:
    return resources.files("crash2scene").joinpath(f"data/{name}").read_text()


def load_catalog(path=None) -> dict[int, ScenarioElement]:
    if path is not None:
        text = open(path).read()
    else:
        text = _data_text("elements.toml")
    raw = tomllib.loads(text)
    catalog = {}
    for row in raw["element"]:
        slots = tuple(Slot(s["name"], s["kind"], s["tunable"]) for s in row["slots"])
        el = ScenarioElement(row["index"], row["name"], row.get("summary", ""), slots)
        catalog[el.index] = el
    return catalog


def load_rules(path=None) -> dict:
    if path is not None:
        text = open(path).read()
    else:
        text = _data_text("composition_rules.toml")
    return tomllib.loads(text)


def normalize_style(style: str) -> str:
    """'parking collision: car following (back, front)' -> 'parking collision'."""
    s = re.sub(r"\([^)]*\)", "", style or "").strip().lower()
    s = re.sub(r"\s+", " ", s)
    return s


def style_rule(rules: dict, style: str) -> dict | None:
    styles = rules.get("styles", {})
    key = normalize_style(style)
    if key in styles:
        return styles[key]
    if ":" in key:
        prefix = key.split(":", 1)[0].strip()
        if prefix in styles:
            return styles[prefix]
    return None


# --- semantic description -----------------------------------------------------


@dataclass
class UserRecord:
    name: str
    category: str = "vehicle"
    road_key: str | None = None
    road_angle: float | None = None
    lane: int | None = None
    progress: float | None = None
    speed: float | None = None
    later_speed: float | None = None
    maneuvers: list[str] = field(default_factory=list)
    state: str = "moving"
    extent_m: float = 0.0
    intent: str = ""


@dataclass
class EventRecord:
    entities: list[str]
    involvement: str = "crash"
    crash_style: str = ""
    posture: list[str] = field(default_factory=list)
    reactions: list[list[str]] = field(default_factory=list)


@dataclass
class SemanticDescription:
    users: list[UserRecord]
    events: list[EventRecord]
    queues: list[list[str]] = field(default_factory=list)
    speed_limit: float | None = None

    def user(self, name: str) -> UserRecord:
        for u in self.users:
            if u.name == name:
                return u
        raise CompositionError(f"event references unknown road user {name!r}")

    def validate(self) -> None:
        names = {u.name for u in self.users}
        for ev in self.events:
            missing = [e for e in ev.entities if e not in names]
            if missing:
                raise CompositionError(
                    f"event entities {missing} have no road user record")
        for q in self.queues:
            missing = [e for e in q if e not in names]
            if missing:
                raise CompositionError(f"queue entities {missing} unknown")

    @classmethod
    def from_dict(cls, d: dict) -> "SemanticDescription":
        users = []
        for u in d.get("users", []):
            angle = u.get("road_angle")
            if isinstance(angle, str):
                angle = parse_angle(angle)
            users.append(UserRecord(
                name=str(u["name"]),
                category=_category_of(u),
                road_key=u.get("road"),
                road_angle=angle,
                lane=u.get("initial_lane"),
                progress=u.get("progress"),
                speed=u.get("initial_speed"),
                later_speed=u.get("later_speed"),
                maneuvers=list(u.get("maneuvers") or u.get("actions") or []),
                state=u.get("state", "moving"),
                extent_m=float(u.get("extent_m") or 0.0),
                intent=u.get("intent", ""),
            ))
        events = []
        for ev in d.get("events", []):
            reactions = ev.get("reactions") or []
            if reactions and reactions and not isinstance(reactions[0], list):
                reactions = [list(reactions) for _ in ev.get("entities", [])]
            events.append(EventRecord(
                entities=[str(e) for e in ev.get("entities", [])],
                involvement=ev.get("involvement", ev.get("involvement_type", "crash")),
                crash_style=ev.get("crash_style", ""),
                posture=list(ev.get("posture") or []),
                reactions=[list(r) for r in reactions],
            ))
        desc = cls(
            users=users,
            events=events,
            queues=[list(q) for q in d.get("queues", [])],
            speed_limit=d.get("speed_limit"),
        )
        desc.validate()
        return desc

    @classmethod
    def from_description(cls, description) -> "SemanticDescription":
        """Adapt an interpreted SceneDescription."""
        return cls.from_dict({
            "users": description.users,
            "events": [
                {
                    "entities": e.get("entities", []),
                    "involvement": e.get("involvement", "crash"),
                    "crash_style": e.get("crash_style", e.get("type_of_the_crash", "")),
                    "posture": e.get("posture", []),
                    "reactions": e.get("reactions", []),
                }
                for e in description.events
            ],
            "queues": description.queues,
        })


def _category_of(u: dict) -> str:
    cat = str(u.get("type", u.get("category", ""))).lower()
    if cat in DEFAULT_DIMENSIONS:
        return cat
    name = str(u.get("name", "")).lower()
    for key in ("pedestrian", "animal"):
        if key in name or key in cat:
            return key
    return "vehicle"


# --- template -----------------------------------------------------------------


@dataclass(frozen=True)
class Param:
    """Marker for a slot value the optimizer supplies."""

    name: str


@dataclass
class Placeholder:
    name: str
    unit: str
    lower: float
    upper: float
    npc: bool = False


@dataclass
class Actor:
    actor_id: str
    category: str
    length: float
    width: float
    road: str
    lane: int
    start_s: object
    speed: object
    route: list | None = None
    npc: bool = False


@dataclass
class ElementInstance:
    element: ScenarioElement
    bound: dict
    actors: list[str]
    role: str = "maneuver"
    event_index: int | None = None


@dataclass
class ScenarioTemplate:
    layout: RoadLayoutSpec
    road_ref: str
    actors: list[Actor]
    instances: list[ElementInstance]
    placeholders: list[Placeholder]
    crash_pairs: list[tuple[str, str]]
    non_collision_pairs: list[tuple[str, str]] = field(default_factory=list)
    event_order: list[tuple[int, int]] = field(default_factory=list)
    constraints: list[dict] = field(default_factory=list)

    def actor(self, actor_id: str) -> Actor:
        for a in self.actors:
            if a.actor_id == actor_id:
                return a
        raise KeyError(f"actor {actor_id!r} not in template")

    def placeholder_names(self) -> list[str]:
        return [p.name for p in self.placeholders]

    def validate(self) -> None:
        ids = {a.actor_id for a in self.actors}
        for a, b in self.crash_pairs:
            if a not in ids or b not in ids:
                raise CompositionError(f"crash pair ({a}, {b}) not among actors")
        used = set()
        for inst in self.instances:
            for v in inst.bound.values():
                used.update(_params_in(v))
        for actor in self.actors:
            used.update(_params_in(actor.start_s))
            used.update(_params_in(actor.speed))
            used.update(_params_in(actor.route))
        for ph in self.placeholders:
            if not (math.isfinite(ph.lower) and math.isfinite(ph.upper)
                    and ph.lower < ph.upper):
                raise CompositionError(f"placeholder {ph.name} has bad bounds")
            if ph.name not in used:
                raise CompositionError(f"placeholder {ph.name} appears in no element")


def _params_in(value) -> set[str]:
    if isinstance(value, Param):
        return {value.name}
    if isinstance(value, (list, tuple)):
        out = set()
        for v in value:
            out |= _params_in(v)
        return out
    return set()


def _resolve(value, params: dict):
    if isinstance(value, Param):
        try:
            return params[value.name]
        except KeyError:
            raise InstantiationError(f"placeholder {value.name!r} unbound") from None
    if isinstance(value, (list, tuple)):
        return [_resolve(v, params) for v in value]
    return value


def _slug(name: str) -> str:
    return re.sub(r"[^a-z0-9]+", "_", name.lower()).strip("_")


# --- element selection ----------------------------------------------------------


class _TemplateBuilder:
    def __init__(self, desc, layout, catalog, rules):
        self.desc = desc
        self.layout = layout.normalized()
        self.geometry = build_geometry(self.layout)
        self.catalog = catalog
        self.rules = rules
        self.actors: list[Actor] = []
        self.instances: list[ElementInstance] = []
        self.placeholders: list[Placeholder] = []
        self.crash_pairs: list[tuple[str, str]] = []
        self.constraints: list[dict] = []
        self._ph_names = set()

    def param(self, name, kind, lower=None, upper=None, npc=False) -> Param:
        lo, hi = PLACEHOLDER_BOUNDS[kind]
        if kind == "speed" and self.desc.speed_limit:
            hi = min(hi, self.desc.speed_limit * 1.3)
        lo = lo if lower is None else lower
        hi = hi if upper is None else upper
        base = name
        k = 2
        while name in self._ph_names:
            name = f"{base}_{k}"
            k += 1
        self._ph_names.add(name)
        self.placeholders.append(Placeholder(name, kind, lo, hi, npc=npc))
        return Param(name)

    def road_for(self, user: UserRecord):
        roads = self.layout.roads
        if user.road_key:
            for r in roads:
                if r.key == user.road_key:
                    return r
            if (self.layout.category == "Interchange"
                    and user.road_key.lower() in ("ramp", "on_ramp", "off_ramp")):
                # The ramp is implied by the layout, not listed as an arm.
                return RoadSpec(key="ramp", left=0, right=1)
        if user.road_angle is not None and self.layout.category != "SingleRoad":
            best = min(roads, key=lambda r: abs(wrap_pm((r.angle or 0.0) - user.road_angle)))
            return best
        return roads[0]

    def built(self, key: str):
        for r in self.geometry.roads:
            if r.spec_key == key or r.name == key:
                return r
        raise CompositionError(f"road {key!r} not in built geometry")

    def arm_toward(self, from_road, turn: float):
        """Exit arm for a movement through the junction.

        turn is the heading change: 0 straight, +pi/2 left, -pi/2 right.
        """
        if self.layout.category == "SingleRoad":
            return None
        inward = (from_road.angle or 0.0) + math.pi
        want = inward + turn
        others = [r for r in self.layout.roads if r.key != from_road.key]
        if not others:
            return None
        return min(others, key=lambda r: abs(wrap_pm((r.angle or 0.0) - want)))

    def default_route(self, user: UserRecord, road_spec, built, lane, start_s):
        """Waypoints for the user's movement; None for static users."""
        if user.state != "moving":
            return None
        turn = 0.0
        for tok in user.maneuvers:
            if tok == "turn_left":
                turn = math.pi / 2
            elif tok == "turn_right":
                turn = -math.pi / 2
        if user.intent == "turn_left":
            turn = math.pi / 2
        elif user.intent == "turn_right":
            turn = -math.pi / 2
        waypoints = [[road_spec.key, lane, start_s]]
        if self.layout.category == "Interchange":
            return self._interchange_route(road_spec, built, lane, start_s, waypoints)
        if self.layout.category == "SingleRoad" or lane < 0:
            # Travel along this road: negative lanes move with s, positive against.
            end_s = built.length - 5.0 if lane < 0 else 5.0
            waypoints.append([road_spec.key, lane, end_s])
            return waypoints
        exit_arm = self.arm_toward(road_spec, turn)
        if exit_arm is None or exit_arm.right < 1:
            waypoints.append([road_spec.key, lane, 5.0])
            return waypoints
        exit_built = self.built(exit_arm.key)
        exit_lane = -min(abs(lane), exit_arm.right)
        waypoints.append([exit_arm.key, exit_lane, exit_built.length * 0.8])
        return waypoints

    def _interchange_route(self, road_spec, built, lane, start_s, waypoints):
        main = self.layout.roads[0]
        after = f"{main.key}_after"
        if road_spec.key == "ramp":
            if self.layout.ramp_kind == "on":
                # Merge into the outermost through lane past the junction.
                merge_lane = -max(main.right, 1)
                after_len = self.built(after).length
                waypoints.append([after, merge_lane, after_len * 0.8])
            else:
                waypoints.append(["ramp", -1, built.length - 5.0])
            return waypoints
        if lane < 0:
            after_len = self.built(after).length
            waypoints.append([after, lane, after_len * 0.8])
        else:
            # Left-side lanes head away from the junction on the first half.
            waypoints.append([road_spec.key, lane, 5.0])
        return waypoints

    def add_actor(self, user: UserRecord) -> Actor:
        road_spec = self.road_for(user)
        built = self.built(road_spec.key)
        lane = user.lane
        if lane is None or lane == 0:
            lane = 1 if road_spec.left else -1
        lane = max(-road_spec.right, min(road_spec.left, lane)) or (
            1 if road_spec.left else -1)
        if user.progress is not None:
            start_s = min(max(user.progress, 0.03), 0.97) * built.length
        else:
            start_s = built.length * 0.5
        slug = _slug(user.name)
        if user.speed is not None:
            speed = float(user.speed)
        elif user.state != "moving":
            speed = 0.0
        else:
            speed = self.param(f"{slug}_init_speed", "speed", 2.0)
        length, width = DEFAULT_DIMENSIONS[user.category]
        route = self.default_route(user, road_spec, built, lane, start_s)
        actor = Actor(user.name, user.category, length, width,
                      road_spec.key, lane, start_s, speed, route)
        self.actors.append(actor)
        element = self.catalog[2]
        self.instances.append(ElementInstance(
            element, {"road_user": user.name,
                      "waypoints": route or [[road_spec.key, lane, start_s]]},
            [user.name], role="init"))
        return actor

    def add_maneuvers(self, user: UserRecord, actor: Actor) -> None:
        table = self.rules.get("maneuvers", {})
        slug = _slug(user.name)
        seq = 0
        for tok in user.maneuvers:
            if tok in ("go_straight", "turn_left", "turn_right", "proceed", "crash"):
                continue
            idx = table.get(tok)
            if idx is None:
                continue
            seq += 1
            if idx == 9:
                step = 1 if tok.endswith("left") else -1
                target = self._shift_lane(actor, step)
                self.instances.append(ElementInstance(
                    self.catalog[9],
                    {"road_user": user.name, "target_lanes": [target],
                     "trigger_times": [self.param(f"{slug}_lane_t{seq}", "time")]},
                    [user.name]))
            elif idx == 16:
                target = 0.0 if tok == "stop" else (
                    user.later_speed if user.later_speed is not None
                    else self.param(f"{slug}_speed{seq}", "speed"))
                self.instances.append(ElementInstance(
                    self.catalog[16],
                    {"target_speeds": [target],
                     "trigger_times": [self.param(f"{slug}_speed_t{seq}", "time")],
                     "completion_distances": [15.0],
                     "road_user": user.name},
                    [user.name]))
            elif idx == 20:
                self.instances.append(ElementInstance(
                    self.catalog[20],
                    {"road_user": user.name,
                     "target_offset": self.param(f"{slug}_offset{seq}", "offset"),
                     "trigger_time": self.param(f"{slug}_offset_t{seq}", "time")},
                    [user.name]))

    def _shift_lane(self, actor: Actor, step_left: int) -> int:
        """Adjacent lane id one step to the driver's left (+1) or right (-1)."""
        spec = next(r for r in self.layout.roads if r.key == actor.road)
        lane = actor.lane
        # Driving direction flips which signed neighbor is "left".
        delta = -step_left if lane < 0 else step_left
        target = lane + delta
        if target == 0:
            target = lane - delta
        lo, hi = -spec.right, spec.left
        return max(lo, min(hi, target)) or lane

    def add_event(self, index: int, ev: EventRecord) -> None:
        rule = style_rule(self.rules, ev.crash_style)
        if rule is None:
            raise CompositionError(
                f"no composition rule for event {index}: style "
                f"{ev.crash_style!r}, involvement {ev.involvement!r}")
        entities = ev.entities
        approach = rule.get("approach_element")
        if approach == 28 and self.layout.category == "Intersection":
            for name in entities:
                actor = next(a for a in self.actors if a.actor_id == name)
                if actor.category != "vehicle" or actor.lane < 0:
                    continue
                slug = _slug(name)
                self.instances.append(ElementInstance(
                    self.catalog[28],
                    {"road_user": name, "junction_position": [0.0, 0.0],
                     "target_speed": self.param(f"{slug}_cross_speed", "speed", 2.0),
                     "trigger_distance": self.param(f"{slug}_cross_dist", "distance", 10.0, 120.0)},
                    [name], event_index=index))
        elif approach == 34 and len(entities) == 2:
            name, other = entities
            slug = _slug(name)
            self.instances.append(ElementInstance(
                self.catalog[34],
                {"road_user": name, "other_user": other,
                 "distance_threshold": self.param(f"{slug}_merge_dist", "distance", 5.0, 100.0),
                 "relative_speed": self.param(f"{slug}_merge_rel", "speed", 0.0, 10.0)},
                [name], event_index=index))

        crash_el = rule["crash_element"]
        if crash_el == 22 and len(entities) >= 2:
            a, b = entities[0], entities[1]
            self.instances.append(ElementInstance(
                self.catalog[22],
                {"road_user_a": a, "road_user_b": b,
                 "stop_interval_a": self.param(f"{_slug(a)}_stop", "time", 0.3, 6.0),
                 "stop_interval_b": self.param(f"{_slug(b)}_stop", "time", 0.3, 6.0)},
                [a, b], role="crash", event_index=index))
            self.crash_pairs.append((a, b))
        elif crash_el == 21 and len(entities) >= 2:
            mover = entities[0]
            for name in entities:
                if self.desc.user(name).state == "moving":
                    mover = name
                    break
            other = next(e for e in entities if e != mover)
            self.instances.append(ElementInstance(
                self.catalog[21],
                {"road_user": mover, "other_user": other,
                 "stop_interval": self.param(f"{_slug(mover)}_stop", "time", 0.3, 6.0)},
                [mover, other], role="crash", event_index=index))
            self.crash_pairs.append((mover, other))
        elif crash_el == 40:
            name = entities[0]
            other = entities[1] if len(entities) > 1 else ""
            slug = _slug(name)
            actor = next(a for a in self.actors if a.actor_id == name)
            direction = "right"
            for u in self.desc.users:
                if u.name == name and "left" in " ".join(u.maneuvers):
                    direction = "left"
            self.instances.append(ElementInstance(
                self.catalog[40],
                {"road_user": name, "other_user": other,
                 "distance_threshold": self.param(f"{slug}_losectl_dist", "distance", 5.0, 150.0),
                 "offroad_direction": direction,
                 "stop_interval": self.param(f"{slug}_losectl_stop", "time", 0.5, 8.0)},
                [name] + ([other] if other else []), role="crash", event_index=index))
            if other:
                self.crash_pairs.append((name, other))
        else:
            raise CompositionError(
                f"event {index} ({ev.crash_style!r}) needs {len(entities)} "
                f"entities but maps to element {crash_el}")

        reaction_table = self.rules.get("reactions", {})
        for who, tokens in zip(entities, ev.reactions):
            partner = next((e for e in entities if e != who), who)
            for tok in tokens:
                idx = reaction_table.get(str(tok).lower())
                if idx is None:
                    continue
                self._add_reaction(idx, who, partner, index)

    def _add_reaction(self, idx: int, who: str, other: str, event_index: int) -> None:
        slug = _slug(who)
        threshold = self.param(f"{slug}_react_dist", "distance", 2.0, 40.0)
        bound = {"road_user": who, "other_user": other, "distance_threshold": threshold}
        if idx == 37:
            bound["target_speed"] = self.param(f"{slug}_react_speed", "speed", 0.0, 20.0)
        elif idx == 38:
            actor = next(a for a in self.actors if a.actor_id == who)
            bound["target_lane"] = self._shift_lane(actor, 1)
        elif idx == 39:
            bound["target_offset"] = self.param(f"{slug}_react_offset", "offset")
        elif idx == 40:
            bound["offroad_direction"] = "right"
            bound["stop_interval"] = self.param(f"{slug}_react_stop", "time", 0.5, 8.0)
        elif idx == 41:
            actor = next(a for a in self.actors if a.actor_id == who)
            bound["waypoints"] = list(actor.route or [])
            bound["timestamps"] = []
            bound["avoid_direction"] = "right"
            bound["avoid_distance"] = self.param(f"{slug}_avoid_dist", "distance", 1.0, 10.0)
        self.instances.append(ElementInstance(
            self.catalog[idx], bound, [who], role="awareness", event_index=event_index))

    def add_queue(self, qi: int, queue: list[str]) -> None:
        lead = self.actors[0]
        for a in self.actors:
            if a.actor_id == queue[0]:
                lead = a
        # lower bound admits unrealistically tight gaps on purpose: the
        # ordering constraint penalizes them instead of the bounds hiding them
        gap = self.param(f"queue{qi}_gap", "distance", 0.5, 40.0)
        built = self.built(lead.road)
        by_id = {a.actor_id: a for a in self.actors}
        self.instances.append(ElementInstance(
            self.catalog[1],
            {"old_positions": [[a, by_id[a].road, by_id[a].lane] for a in queue],
             "road_user_order": list(queue),
             "relative_distances": gap,
             "road_length": built.length},
            list(queue), role="init"))
        self.constraints.append({
            "kind": "ordering-on-road", "actors": list(queue),
            "threshold": FOLLOW_GAP_M,
        })

    def build(self) -> ScenarioTemplate:
        self.desc.validate()
        for user in self.desc.users:
            self.add_actor(user)
        for user in self.desc.users:
            actor = next(a for a in self.actors if a.actor_id == user.name)
            self.add_maneuvers(user, actor)
        if not self.desc.events:
            raise CompositionError("description contains no events")
        for i, ev in enumerate(self.desc.events):
            self.add_event(i, ev)
        for qi, queue in enumerate(self.desc.queues):
            self.add_queue(qi, queue)
        n_events = len(self.desc.events)
        order = [(i, i + 1) for i in range(n_events - 1)]
        template = ScenarioTemplate(
            layout=self.layout,
            road_ref="network.xodr",
            actors=self.actors,
            instances=self.instances,
            placeholders=self.placeholders,
            crash_pairs=self.crash_pairs,
            event_order=order,
            constraints=self.constraints,
        )
        template.validate()
        return template


def select_elements(
    desc: SemanticDescription,
    layout: RoadLayoutSpec,
    catalog: dict[int, ScenarioElement] | None = None,
    rules: dict | None = None,
) -> ScenarioTemplate:
    """Deterministic mapping from the description to an element sequence."""
    catalog = catalog or load_catalog()
    rules = rules or load_rules()
    return _TemplateBuilder(desc, layout, catalog, rules).build()


# --- XML emission ---------------------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int,)):
        return str(value)
    v = float(value)
    if v == 0:
        return "0"
    return f"{v:.12g}"


def _lane_position(road_geo: RoadGeometry, wp, offset: float = 0.0) -> ET.Element:
    road_key, lane, s = wp[0], wp[1], wp[2]
    road = _road_by_key(road_geo, road_key)
    pos = ET.Element("Position")
    attrs = {"roadId": str(road.road_id), "laneId": str(int(lane)),
             "offset": _fmt(offset), "s": _fmt(s)}
    ET.SubElement(pos, "LanePosition", attrs)
    return pos


def _world_position(x, y, h=0.0) -> ET.Element:
    pos = ET.Element("Position")
    ET.SubElement(pos, "WorldPosition", {"x": _fmt(x), "y": _fmt(y), "h": _fmt(h)})
    return pos


def _road_by_key(geo: RoadGeometry, key: str):
    for r in geo.roads:
        if r.spec_key == key or r.name == key or str(r.road_id) == str(key):
            return r
    raise InstantiationError(f"waypoint references unknown road {key!r}")


def _condition(name: str, inner: ET.Element, entity: str | None = None) -> ET.Element:
    cond = ET.Element("Condition", {
        "name": name, "delay": "0", "conditionEdge": "rising"})
    if entity is None:
        by = ET.SubElement(cond, "ByValueCondition")
        by.append(inner)
    else:
        by = ET.SubElement(cond, "ByEntityCondition")
        trig = ET.SubElement(by, "TriggeringEntities", {"triggeringEntitiesRule": "any"})
        ET.SubElement(trig, "EntityRef", {"entityRef": entity})
        ent = ET.SubElement(by, "EntityCondition")
        ent.append(inner)
    return cond


def _cond_sim_time(t) -> ET.Element:
    return _condition("at_time", ET.Element("SimulationTimeCondition", {
        "value": _fmt(t), "rule": "greaterThan"}))


def _cond_traveled(entity: str, d) -> ET.Element:
    return _condition("traveled", ET.Element("TraveledDistanceCondition", {
        "value": _fmt(d)}), entity)


def _cond_rel_distance(entity: str, other: str, d, rule="lessThan") -> ET.Element:
    inner = ET.Element("RelativeDistanceCondition", {
        "entityRef": other, "relativeDistanceType": "cartesianDistance",
        "value": _fmt(d), "freespace": "true", "rule": rule})
    return _condition("near_entity", inner, entity)


def _cond_distance(entity: str, position: ET.Element, d, rule="lessThan") -> ET.Element:
    inner = ET.Element("DistanceCondition", {
        "value": _fmt(d), "freespace": "false", "rule": rule})
    inner.append(position)
    return _condition("near_position", inner, entity)


def _action_speed(target, duration=SPEED_RAMP_S, dimension="time") -> ET.Element:
    act = ET.Element("PrivateAction")
    lon = ET.SubElement(act, "LongitudinalAction")
    sp = ET.SubElement(lon, "SpeedAction")
    ET.SubElement(sp, "SpeedActionDynamics", {
        "dynamicsShape": "linear", "value": _fmt(duration),
        "dynamicsDimension": dimension})
    tgt = ET.SubElement(sp, "SpeedActionTarget")
    ET.SubElement(tgt, "AbsoluteTargetSpeed", {"value": _fmt(target)})
    return act


def _action_lane_change(lane: int, distance=D_DYN_DEFAULT_M) -> ET.Element:
    act = ET.Element("PrivateAction")
    lat = ET.SubElement(act, "LateralAction")
    lc = ET.SubElement(lat, "LaneChangeAction", {"targetLaneOffset": "0"})
    ET.SubElement(lc, "LaneChangeActionDynamics", {
        "dynamicsShape": "linear", "value": _fmt(distance),
        "dynamicsDimension": "distance"})
    tgt = ET.SubElement(lc, "LaneChangeTarget")
    ET.SubElement(tgt, "AbsoluteTargetLane", {"value": str(int(lane))})
    return act


def _action_lane_offset(offset) -> ET.Element:
    act = ET.Element("PrivateAction")
    lat = ET.SubElement(act, "LateralAction")
    lo = ET.SubElement(lat, "LaneOffsetAction", {"continuous": "false"})
    ET.SubElement(lo, "LaneOffsetActionDynamics", {
        "maxLateralAcc": "2", "dynamicsShape": "linear"})
    tgt = ET.SubElement(lo, "LaneOffsetTarget")
    ET.SubElement(tgt, "AbsoluteTargetLaneOffset", {"value": _fmt(offset)})
    return act


def _action_teleport(position: ET.Element) -> ET.Element:
    act = ET.Element("PrivateAction")
    tp = ET.SubElement(act, "TeleportAction")
    tp.append(position)
    return act


def _action_assign_route(geo, waypoints) -> ET.Element:
    act = ET.Element("PrivateAction")
    routing = ET.SubElement(act, "RoutingAction")
    assign = ET.SubElement(routing, "AssignRouteAction")
    route = ET.SubElement(assign, "Route", {"name": "route", "closed": "false"})
    for wp in waypoints:
        w = ET.SubElement(route, "Waypoint", {"routeStrategy": "shortest"})
        w.append(_lane_position(geo, wp))
    return act


def _action_trajectory(geo, waypoints, timestamps, scale=1.0) -> ET.Element:
    act = ET.Element("PrivateAction")
    routing = ET.SubElement(act, "RoutingAction")
    follow = ET.SubElement(routing, "FollowTrajectoryAction")
    traj = ET.SubElement(follow, "TrajectoryRef")
    tr = ET.SubElement(traj, "Trajectory", {"name": "trajectory", "closed": "false"})
    shape = ET.SubElement(tr, "Shape")
    poly = ET.SubElement(shape, "Polyline")
    times = list(timestamps) if timestamps else [i * 1.0 for i in range(len(waypoints))]
    for wp, t in zip(waypoints, times):
        v = ET.SubElement(poly, "Vertex", {"time": _fmt(t)})
        if len(wp) == 3 and isinstance(wp[0], str):
            v.append(_lane_position(geo, wp))
        else:
            v.append(_world_position(*wp))
    ref = ET.SubElement(follow, "TimeReference")
    ET.SubElement(ref, "Timing", {
        "domainAbsoluteRelative": "relative", "scale": _fmt(scale), "offset": "0"})
    mode = ET.SubElement(follow, "TrajectoryFollowingMode")
    mode.set("followingMode", "position")
    return act


@dataclass
class _ActSpec:
    name: str
    moves: list  # (actor_id, trigger ET.Element, [PrivateAction ...])


class _Compiler:
    """Per-element trigger/action realization."""

    def __init__(self, template: ScenarioTemplate, params: dict, geo: RoadGeometry):
        self.t = template
        self.params = params
        self.geo = geo
        self.init_overrides: dict[str, dict] = {}
        self.acts: list[_ActSpec] = []

    def bound(self, inst: ElementInstance, slot: str, default=None):
        if slot in inst.bound:
            return _resolve(inst.bound[slot], self.params)
        return default

    def lane_pos(self, wp) -> ET.Element:
        return _lane_position(self.geo, wp)

    def compile_all(self) -> None:
        for i, inst in enumerate(self.t.instances):
            fn = _COMPILERS.get(inst.element.index)
            if fn is None:
                raise InstantiationError(
                    f"element {inst.element.index} ({inst.element.name}) "
                    "has no realization")
            fn(self, i, inst)

    def act(self, name: str, moves) -> None:
        self.acts.append(_ActSpec(name, moves))


def _c_initial_pose(c: _Compiler, i, inst):
    order = c.bound(inst, "road_user_order", [])
    gap = c.bound(inst, "relative_distances", FOLLOW_GAP_M)
    if isinstance(gap, list):
        gaps = gap
    else:
        gaps = [gap] * max(len(order) - 1, 0)
    if not order:
        return
    lead = c.t.actor(order[0])
    lead_s = _resolve(lead.start_s, c.params)
    # Queue members line up behind the lead along its travel direction.
    behind = 1.0 if lead.lane > 0 else -1.0
    s = lead_s
    for k, name in enumerate(order):
        if k > 0:
            s = s + behind * (gaps[min(k - 1, len(gaps) - 1)] + c.t.actor(name).length)
        c.init_overrides.setdefault(name, {})["position"] = [lead.road, lead.lane, s]


def _c_initial_route(c: _Compiler, i, inst):
    name = c.bound(inst, "road_user")
    waypoints = c.bound(inst, "waypoints", [])
    ov = c.init_overrides.setdefault(name, {})
    if waypoints:
        ov.setdefault("position", waypoints[0])
    if len(waypoints) > 1:
        ov["route"] = waypoints


def _c_initial_trajectory(c: _Compiler, i, inst):
    name = c.bound(inst, "road_user")
    waypoints = c.bound(inst, "waypoints", [])
    times = c.bound(inst, "timestamps", [])
    scale = c.bound(inst, "time_scale", 1.0)
    if waypoints:
        c.init_overrides.setdefault(name, {}).setdefault("position", waypoints[0])
    c.act(f"e{i}_trajectory", [(
        name, _cond_sim_time(0.0),
        [_action_trajectory(c.geo, waypoints, times, scale)])])


def _c_speed_and_route(c: _Compiler, i, inst):
    name = c.bound(inst, "road_user")
    start = c.bound(inst, "start_position")
    end = c.bound(inst, "end_position")
    t = c.bound(inst, "change_time", 0.0)
    target = c.bound(inst, "target_speed", 0.0)
    dist = c.bound(inst, "change_distance", 20.0)
    if start:
        c.init_overrides.setdefault(name, {}).setdefault("position", start)
    actions = [_action_speed(target, max(dist, 0.1), "distance")]
    if end:
        actions.append(_action_assign_route(c.geo, [start, end] if start else [end]))
    c.act(f"e{i}_speed_route", [(name, _cond_sim_time(t), actions)])


def _c_speed_and_trajectory(c: _Compiler, i, inst):
    name = c.bound(inst, "road_user")
    start = c.bound(inst, "start_position")
    end = c.bound(inst, "end_position")
    t = c.bound(inst, "change_time", 0.0)
    target = c.bound(inst, "target_speed", 0.0)
    dist = c.bound(inst, "change_distance", 20.0)
    times = c.bound(inst, "timestamps", [])
    scale = c.bound(inst, "time_scale", 1.0)
    if start:
        c.init_overrides.setdefault(name, {}).setdefault("position", start)
    waypoints = [w for w in (start, end) if w]
    c.act(f"e{i}_speed_traj", [(name, _cond_sim_time(t), [
        _action_speed(target, max(dist, 0.1), "distance"),
        _action_trajectory(c.geo, waypoints, times, scale),
    ])])


def _c_lane_change_at_time(c: _Compiler, i, inst):
    name = c.bound(inst, "road_user")
    lanes = c.bound(inst, "target_lanes", [])
    times = c.bound(inst, "trigger_times", [])
    moves = []
    for k, (lane, t) in enumerate(zip(lanes, times)):
        moves.append((name, _cond_sim_time(t), [_action_lane_change(lane)]))
    c.act(f"e{i}_lane_change", moves)


def _c_lane_change_at_distance(c: _Compiler, i, inst):
    names = c.bound(inst, "road_users")
    if isinstance(names, str):
        names = [names]
    lanes = c.bound(inst, "target_lanes", [])
    dists = c.bound(inst, "trigger_distances", [])
    trans = c.bound(inst, "transition_distance", D_DYN_DEFAULT_M)
    moves = []
    for name, lane, d in zip(names, lanes, dists):
        moves.append((name, _cond_traveled(name, d),
                      [_action_lane_change(lane, max(trans, 1.0))]))
    c.act(f"e{i}_lane_change_dist", moves)


def _c_lane_change_to_position(c: _Compiler, i, inst):
    name = c.bound(inst, "road_user")
    target = c.bound(inst, "target_position")
    dists = c.bound(inst, "change_distances", [D_DYN_DEFAULT_M])
    d = dists[0] if isinstance(dists, list) and dists else dists or D_DYN_DEFAULT_M
    lane = int(target[1])
    c.act(f"e{i}_lane_to_pos", [(
        name,
        _cond_distance(name, c.lane_pos(target), max(d, 1.0)),
        [_action_lane_change(lane, max(d, 1.0))])])


def _c_lane_and_speed(c: _Compiler, i, inst):
    name = c.bound(inst, "road_user")
    speed = c.bound(inst, "target_speed", 0.0)
    lane = c.bound(inst, "target_lane")
    times = c.bound(inst, "trigger_times", [0.0])
    dist = c.bound(inst, "completion_distance", D_DYN_DEFAULT_M)
    speed_first = str(c.bound(inst, "speed_first", "true")).lower() in ("true", "1", "yes")
    t_speed = times[0] if speed_first else times[-1]
    t_lane = times[-1] if speed_first else times[0]
    c.act(f"e{i}_lane_speed", [
        (name, _cond_sim_time(t_speed), [_action_speed(speed, max(dist, 0.1), "distance")]),
        (name, _cond_sim_time(t_lane), [_action_lane_change(lane, max(dist, 1.0))]),
    ])


def _c_parking(c: _Compiler, i, inst):
    name = c.bound(inst, "road_user")
    spot = c.bound(inst, "spot_position")
    ranges = c.bound(inst, "adjust_ranges", [15.0])
    rng = ranges[0] if isinstance(ranges, list) and ranges else ranges or 15.0
    pulling_out = inst.element.index == 14
    offset = float(spot[3]) if len(spot) > 3 else 2.5
    if pulling_out:
        ov = c.init_overrides.setdefault(name, {})
        ov.setdefault("position", spot)
        ov["offset"] = offset
        c.act(f"e{i}_pull_out", [(name, _cond_sim_time(0.5), [
            _action_lane_offset(0.0), _action_speed(5.0)])])
    else:
        c.act(f"e{i}_pull_in", [(
            name, _cond_distance(name, c.lane_pos(spot), max(rng, 1.0)),
            [_action_lane_offset(offset), _action_speed(0.0)])])


def _c_speed_at_time(c: _Compiler, i, inst):
    name = c.bound(inst, "road_user") or inst.actors[0]
    speeds = c.bound(inst, "target_speeds", [])
    times = c.bound(inst, "trigger_times", [])
    dists = c.bound(inst, "completion_distances", [])
    moves = []
    for k, (v, t) in enumerate(zip(speeds, times)):
        d = dists[k] if k < len(dists) else 15.0
        moves.append((name, _cond_sim_time(t), [_action_speed(v, max(d, 0.1), "distance")]))
    c.act(f"e{i}_speed", moves)


def _c_speed_at_distance(c: _Compiler, i, inst):
    name = c.bound(inst, "road_user") or inst.actors[0]
    speeds = c.bound(inst, "target_speeds", [])
    dists = c.bound(inst, "trigger_distances", [])
    moves = []
    for v, d in zip(speeds, dists):
        moves.append((name, _cond_traveled(name, d), [_action_speed(v, 15.0, "distance")]))
    c.act(f"e{i}_speed_dist", moves)


def _junction_center(c: _Compiler):
    if c.geo.junctions:
        return c.geo.junctions[0].center
    return (0.0, 0.0)


def _c_speed_near_junction(c: _Compiler, i, inst):
    name = c.bound(inst, "road_user")
    speeds = c.bound(inst, "target_speeds", [])
    dists = c.bound(inst, "junction_distances", [])
    traveled = c.bound(inst, "traveled_distances", [])
    cx, cy = _junction_center(c)
    moves = []
    for k, (v, d) in enumerate(zip(speeds, dists)):
        trigger = _cond_distance(name, _world_position(cx, cy), d)
        acts = [_action_speed(v)]
        moves.append((name, trigger, acts))
        if traveled and k < len(traveled):
            moves[-1] = (name, _cond_group(
                [trigger, _cond_traveled(name, traveled[k])]), acts)
    c.act(f"e{i}_speed_junction", moves)


def _cond_group(conditions) -> ET.Element:
    """AND-combined conditions wrapped so the act builder can detect them."""
    grp = ET.Element("ConditionGroup")
    for cond in conditions:
        grp.append(cond)
    return grp


def _c_offset_at_time(c: _Compiler, i, inst):
    name = c.bound(inst, "road_user")
    off = c.bound(inst, "target_offset", 0.0)
    t = c.bound(inst, "trigger_time", 0.0)
    c.act(f"e{i}_offset", [(name, _cond_sim_time(t), [_action_lane_offset(off)])])


def _c_crash_one_stop(c: _Compiler, i, inst):
    name = c.bound(inst, "road_user")
    other = c.bound(inst, "other_user")
    dt = c.bound(inst, "stop_interval", 1.0)
    c.act(f"e{i}_crash_stop_one", [(
        name, _cond_rel_distance(name, other, CONTACT_TRIGGER_M),
        [_action_speed(0.0, max(dt, 0.05), "time")])])


def _c_crash_stop(c: _Compiler, i, inst):
    a = c.bound(inst, "road_user_a")
    b = c.bound(inst, "road_user_b")
    ta = c.bound(inst, "stop_interval_a", 1.0)
    tb = c.bound(inst, "stop_interval_b", 1.0)
    c.act(f"e{i}_crash_stop", [
        (a, _cond_rel_distance(a, b, CONTACT_TRIGGER_M),
         [_action_speed(0.0, max(ta, 0.05), "time")]),
        (b, _cond_rel_distance(b, a, CONTACT_TRIGGER_M),
         [_action_speed(0.0, max(tb, 0.05), "time")]),
    ])


def _c_crash_move(c: _Compiler, i, inst):
    a = c.bound(inst, "road_user_a")
    b = c.bound(inst, "road_user_b")
    pa = c.bound(inst, "rest_position_a")
    pb = c.bound(inst, "rest_position_b")
    c.act(f"e{i}_crash_move", [
        (a, _cond_rel_distance(a, b, CONTACT_TRIGGER_M),
         [_action_teleport(c.lane_pos(pa)), _action_speed(0.0, 0.05, "time")]),
        (b, _cond_rel_distance(b, a, CONTACT_TRIGGER_M),
         [_action_teleport(c.lane_pos(pb)), _action_speed(0.0, 0.05, "time")]),
    ])


def _c_crash_lane_change(c: _Compiler, i, inst):
    name = c.bound(inst, "road_user")
    other = c.bound(inst, "other_user")
    lane = c.bound(inst, "target_lane")
    dt = c.bound(inst, "change_interval", 2.0)
    c.act(f"e{i}_crash_lane", [(
        name, _cond_rel_distance(name, other, CONTACT_TRIGGER_M),
        [_action_lane_change(lane, max(dt, 0.5) * 5.0)])])


def _c_crash_speed(c: _Compiler, i, inst):
    name = c.bound(inst, "road_user")
    other = c.bound(inst, "other_user")
    v = c.bound(inst, "target_speed", 0.0)
    dt = c.bound(inst, "change_interval", 2.0)
    c.act(f"e{i}_crash_speed", [(
        name, _cond_rel_distance(name, other, CONTACT_TRIGGER_M),
        [_action_speed(v, max(dt, 0.05), "time")])])


def _c_stop_sign(c: _Compiler, i, inst):
    name = c.bound(inst, "road_user")
    pos = c.bound(inst, "current_position")
    d = c.bound(inst, "decel_distance", 20.0)
    moves = [(name, _cond_distance(name, c.lane_pos(pos), max(d, 1.0)),
              [_action_speed(0.0, max(d, 1.0), "distance")])]
    if inst.element.index == 27:
        moves.append((name, _cond_sim_time(4.0), [_action_speed(8.0)]))
    c.act(f"e{i}_stop_sign", moves)


def _c_cross_junction_speed(c: _Compiler, i, inst):
    name = c.bound(inst, "road_user")
    v = c.bound(inst, "target_speed", 10.0)
    d = c.bound(inst, "trigger_distance", 40.0)
    cx, cy = _junction_center(c)
    c.act(f"e{i}_junction_speed", [(
        name, _cond_distance(name, _world_position(cx, cy), max(d, 1.0)),
        [_action_speed(v)])])


def _c_wait_then_cross(c: _Compiler, i, inst):
    name = c.bound(inst, "road_user")
    other = c.bound(inst, "other_user")
    v = c.bound(inst, "cross_speed", 8.0)
    near = c.bound(inst, "near_distance", 15.0)
    clear = c.bound(inst, "clear_distance", c.bound(inst, "gap_distance", 10.0))
    cx, cy = _junction_center(c)
    center = _world_position(cx, cy)
    moves = [(name, _cond_distance(name, center, max(near, 1.0)),
              [_action_speed(0.0, 10.0, "distance")])]
    if inst.element.index == 30:
        # Go once the other user has moved past the junction.
        go = _cond_distance(other, _world_position(cx, cy), max(clear, 1.0), "greaterThan")
    else:
        go = _cond_distance(other, _world_position(cx, cy), max(clear, 1.0))
    moves.append((name, go, [_action_speed(v)]))
    c.act(f"e{i}_wait_cross", moves)


def _c_close_lane_change(c: _Compiler, i, inst):
    name = c.bound(inst, "road_user")
    other = c.bound(inst, "other_user")
    rel_v = c.bound(inst, "relative_speed", 3.0)
    d = c.bound(inst, "relative_distance", c.bound(inst, "distance_threshold", 15.0))
    other_actor = c.t.actor(other)
    target = other_actor.lane
    base = _resolve(c.t.actor(other).speed, c.params)
    base = base if isinstance(base, (int, float)) else 8.0
    moves = [(name, _cond_rel_distance(name, other, max(d, 0.5)),
              [_action_lane_change(target, 15.0), _action_speed(base + rel_v)])]
    if inst.element.index == 33:
        own = c.t.actor(name)
        moves.append((name, _cond_rel_distance(name, other, max(d, 0.5) / 2.0), [
            _action_lane_change(own.lane, 10.0),
            _action_lane_offset(-3.0 if own.lane < 0 else 3.0),
            _action_speed(0.0, 3.0, "time"),
        ]))
    c.act(f"e{i}_close_lane_change", moves)


def _c_ramp_merge(c: _Compiler, i, inst):
    name = c.bound(inst, "road_user")
    other = c.bound(inst, "other_user")
    d = c.bound(inst, "distance_threshold", 30.0)
    rel = c.bound(inst, "relative_speed", 0.0)
    base = _resolve(c.t.actor(other).speed, c.params)
    base = base if isinstance(base, (int, float)) else 10.0
    c.act(f"e{i}_merge", [(
        name, _cond_rel_distance(name, other, max(d, 0.5)),
        [_action_speed(max(base + rel, 0.0))])])


def _c_offset_at_position(c: _Compiler, i, inst):
    name = c.bound(inst, "road_user")
    off = c.bound(inst, "offset_value", 0.0)
    pos = c.bound(inst, "target_position")
    d = c.bound(inst, "distance_threshold", 15.0)
    c.act(f"e{i}_offset_pos", [(
        name, _cond_distance(name, c.lane_pos(pos), max(d, 0.5)),
        [_action_lane_offset(off)])])


def _c_offset_near_entity(c: _Compiler, i, inst):
    name = c.bound(inst, "road_user")
    other = c.bound(inst, "other_user")
    off = c.bound(inst, "offset_value", c.bound(inst, "target_offset", 0.0))
    d = c.bound(inst, "distance_threshold", 15.0)
    c.act(f"e{i}_offset_entity", [(
        name, _cond_rel_distance(name, other, max(d, 0.5)),
        [_action_lane_offset(off)])])


def _c_risk_speed(c: _Compiler, i, inst):
    name = c.bound(inst, "road_user")
    other = c.bound(inst, "other_user")
    d = c.bound(inst, "distance_threshold", 10.0)
    v = c.bound(inst, "target_speed", 0.0)
    c.act(f"e{i}_risk_speed", [(
        name, _cond_rel_distance(name, other, max(d, 0.5)),
        [_action_speed(v)])])


def _c_risk_lane(c: _Compiler, i, inst):
    name = c.bound(inst, "road_user")
    other = c.bound(inst, "other_user")
    d = c.bound(inst, "distance_threshold", 10.0)
    lane = c.bound(inst, "target_lane")
    c.act(f"e{i}_risk_lane", [(
        name, _cond_rel_distance(name, other, max(d, 0.5)),
        [_action_lane_change(lane, 15.0)])])


def _c_risk_lose_control(c: _Compiler, i, inst):
    name = c.bound(inst, "road_user")
    other = c.bound(inst, "other_user")
    d = c.bound(inst, "distance_threshold", 10.0)
    direction = str(c.bound(inst, "offroad_direction", "right"))
    stop = c.bound(inst, "stop_interval", 2.0)
    actor = c.t.actor(name)
    # Off the road: one lane width past the outer edge on the chosen side.
    lane_w = c.geo.lane_width
    # Driver's right is negative offset for forward (negative-lane) travel.
    sign = -1.0 if (actor.lane < 0) == (direction == "right") else 1.0
    off = sign * lane_w * 1.4
    if other:
        trigger = _cond_rel_distance(name, other, max(d, 0.5))
    else:
        trigger = _cond_traveled(name, max(d, 0.5))
    c.act(f"e{i}_lose_control", [(name, trigger, [
        _action_lane_offset(off),
        _action_speed(0.0, max(stop, 0.05), "time"),
    ])])


def _c_risk_turn_trajectory(c: _Compiler, i, inst):
    name = c.bound(inst, "road_user")
    other = c.bound(inst, "other_user")
    d = c.bound(inst, "distance_threshold", 10.0)
    avoid = c.bound(inst, "avoid_distance", 2.0)
    direction = str(c.bound(inst, "avoid_direction", "right"))
    sign = -1.0 if direction == "right" else 1.0
    c.act(f"e{i}_turn_away", [(
        name, _cond_rel_distance(name, other, max(d, 0.5)),
        [_action_lane_offset(sign * min(avoid, 3.5))])])


def _c_secondary_crash(c: _Compiler, i, inst):
    name = c.bound(inst, "road_user")
    avoid = c.bound(inst, "avoid_user")
    collide = c.bound(inst, "collide_user")
    d = c.bound(inst, "distance_threshold", 15.0)
    dt = c.bound(inst, "crash_interval", 2.0)
    target = c.t.actor(collide).lane
    c.act(f"e{i}_secondary", [(
        name, _cond_rel_distance(name, avoid, max(d, 0.5)),
        [_action_lane_change(target, max(dt, 0.5) * 6.0)])])


_COMPILERS = {
    1: _c_initial_pose,
    2: _c_initial_route,
    3: _c_initial_trajectory,
    4: _c_initial_route,
    5: _c_initial_trajectory,
    6: _c_speed_and_route,
    7: _c_speed_and_trajectory,
    8: _c_speed_and_route,
    9: _c_lane_change_at_time,
    10: _c_lane_change_at_distance,
    11: _c_lane_change_to_position,
    12: _c_lane_and_speed,
    13: _c_parking,
    14: _c_parking,
    15: _c_parking,
    16: _c_speed_at_time,
    17: _c_speed_at_distance,
    18: _c_speed_near_junction,
    19: _c_speed_near_junction,
    20: _c_offset_at_time,
    21: _c_crash_one_stop,
    22: _c_crash_stop,
    23: _c_crash_move,
    24: _c_crash_lane_change,
    25: _c_crash_speed,
    26: _c_stop_sign,
    27: _c_stop_sign,
    28: _c_cross_junction_speed,
    29: _c_cross_junction_speed,
    30: _c_wait_then_cross,
    31: _c_wait_then_cross,
    32: _c_close_lane_change,
    33: _c_close_lane_change,
    34: _c_ramp_merge,
    35: _c_offset_at_position,
    36: _c_offset_near_entity,
    37: _c_risk_speed,
    38: _c_risk_lane,
    39: _c_offset_near_entity,
    40: _c_risk_lose_control,
    41: _c_risk_turn_trajectory,
    42: _c_secondary_crash,
}


def check_params(template: ScenarioTemplate, params: dict) -> None:
    byname = {p.name: p for p in template.placeholders}
    for name, ph in byname.items():
        if name not in params:
            raise InstantiationError(f"placeholder {name!r} unbound")
        v = params[name]
        if not (ph.lower - 1e-9 <= v <= ph.upper + 1e-9):
            raise ParamRangeError(
                f"placeholder {name!r} = {v:g} outside [{ph.lower:g}, {ph.upper:g}]")


def instantiate(template: ScenarioTemplate, params: dict,
                geometry: RoadGeometry | None = None) -> str:
    """Expand every element instance into OpenSCENARIO XML. Deterministic."""
    check_params(template, params)
    geo = geometry or build_geometry(template.layout)
    compiler = _Compiler(template, dict(params), geo)
    compiler.compile_all()

    root = ET.Element("OpenSCENARIO")
    ET.SubElement(root, "FileHeader", {
        "revMajor": "1", "revMinor": "1", "date": "2026-01-01T00:00:00",
        "description": "crash scenario", "author": "crash2scene"})
    ET.SubElement(root, "ParameterDeclarations")
    ET.SubElement(root, "CatalogLocations")
    net = ET.SubElement(root, "RoadNetwork")
    ET.SubElement(net, "LogicFile", {"filepath": template.road_ref})

    entities = ET.SubElement(root, "Entities")
    for actor in template.actors:
        so = ET.SubElement(entities, "ScenarioObject", {"name": actor.actor_id})
        if actor.category == "vehicle":
            obj = ET.SubElement(so, "Vehicle", {
                "name": "car", "vehicleCategory": "car"})
        else:
            pcat = "animal" if actor.category == "animal" else "pedestrian"
            obj = ET.SubElement(so, "Pedestrian", {
                "name": actor.category, "pedestrianCategory": pcat,
                "mass": "80"})
        bb = ET.SubElement(obj, "BoundingBox")
        ET.SubElement(bb, "Center", {"x": "0", "y": "0", "z": "0.7"})
        ET.SubElement(bb, "Dimensions", {
            "width": _fmt(actor.width), "length": _fmt(actor.length),
            "height": "1.5"})
        if actor.category == "vehicle":
            ET.SubElement(obj, "Performance", {
                "maxSpeed": "60", "maxAcceleration": "8", "maxDeceleration": "9"})
            axles = ET.SubElement(obj, "Axles")
            ET.SubElement(axles, "FrontAxle", {
                "maxSteering": "0.5", "wheelDiameter": "0.6", "trackWidth": "1.6",
                "positionX": "1.4", "positionZ": "0.3"})
            ET.SubElement(axles, "RearAxle", {
                "maxSteering": "0", "wheelDiameter": "0.6", "trackWidth": "1.6",
                "positionX": "-1.4", "positionZ": "0.3"})

    storyboard = ET.SubElement(root, "Storyboard")
    init = ET.SubElement(storyboard, "Init")
    init_actions = ET.SubElement(init, "Actions")
    for actor in template.actors:
        ov = compiler.init_overrides.get(actor.actor_id, {})
        private = ET.SubElement(init_actions, "Private", {
            "entityRef": actor.actor_id})
        position = ov.get("position") or [
            actor.road, actor.lane, _resolve(actor.start_s, params)]
        position = _resolve(position, params)
        private.append(_action_teleport(
            _lane_position(geo, position, ov.get("offset", 0.0))))
        speed = _resolve(actor.speed, params)
        private.append(_action_speed(speed, 0.0, "time"))
        route = ov.get("route") or (_resolve(actor.route, params)
                                    if actor.route else None)
        if route and len(route) > 1:
            private.append(_action_assign_route(geo, route))

    story = ET.SubElement(storyboard, "Story", {"name": "story"})
    for spec in compiler.acts:
        act = ET.SubElement(story, "Act", {"name": spec.name})
        for k, (actor_id, trigger, actions) in enumerate(spec.moves):
            group = ET.SubElement(act, "ManeuverGroup", {
                "maximumExecutionCount": "1", "name": f"{spec.name}_g{k}"})
            sel = ET.SubElement(group, "Actors", {"selectTriggeringEntities": "false"})
            ET.SubElement(sel, "EntityRef", {"entityRef": actor_id})
            maneuver = ET.SubElement(group, "Maneuver", {"name": f"{spec.name}_m{k}"})
            event = ET.SubElement(maneuver, "Event", {
                "name": f"{spec.name}_ev{k}", "priority": "overwrite",
                "maximumExecutionCount": "1"})
            for action_el in actions:
                action = ET.SubElement(event, "Action", {"name": f"{spec.name}_a{k}"})
                action.append(action_el)
            start = ET.SubElement(event, "StartTrigger")
            if trigger.tag == "ConditionGroup":
                start.append(trigger)
            else:
                cg = ET.SubElement(start, "ConditionGroup")
                cg.append(trigger)
        act_start = ET.SubElement(act, "StartTrigger")
        acg = ET.SubElement(act_start, "ConditionGroup")
        acg.append(_cond_sim_time(-0.5))
    ET.SubElement(storyboard, "StopTrigger")

    ET.indent(root, space="  ")
    body = ET.tostring(root, encoding="unicode")
    return '<?xml version="1.0" encoding="UTF-8"?>\n' + body + "\n"


def validate_openscenario(xml_text: str, geometry: RoadGeometry | None = None) -> None:
    """Structural checks; raises with the full problem list."""
    problems = []
    try:
        root = ET.fromstring(xml_text)
    except ET.ParseError as exc:
        raise ScenarioValidationError([f"not well-formed: {exc}"]) from None
    if root.tag != "OpenSCENARIO":
        problems.append(f"root is {root.tag!r}")
    if len(root.findall("Storyboard")) != 1:
        problems.append("expected exactly one Storyboard")
    names = [so.get("name") for so in root.iter("ScenarioObject")]
    if len(names) != len(set(names)):
        problems.append("duplicate entity names")
    declared = set(names)
    for ref in root.iter("EntityRef"):
        ent = ref.get("entityRef")
        if ent and ent not in declared:
            problems.append(f"entityRef {ent!r} not declared")
    for cond in root.iter("RelativeDistanceCondition"):
        ent = cond.get("entityRef")
        if ent not in declared:
            problems.append(f"RelativeDistanceCondition references {ent!r}")
    by_id = {}
    if geometry is not None:
        by_id = {str(r.road_id): r for r in geometry.roads}
    for lp in root.iter("LanePosition"):
        rid = lp.get("roadId")
        lane = int(lp.get("laneId", "0"))
        s = float(lp.get("s", "0"))
        if geometry is None:
            continue
        road = by_id.get(rid)
        if road is None:
            problems.append(f"LanePosition road {rid!r} not in network")
            continue
        if lane == 0 or (lane > 0 and lane > road.left) or (lane < 0 and -lane > road.right):
            problems.append(f"lane {lane} not on road {rid}")
        if not (-0.5 <= s <= road.length + 0.5):
            problems.append(f"s={s:g} outside road {rid} (length {road.length:g})")
    for attr_holder in root.iter():
        for key, value in attr_holder.attrib.items():
            if key in ("value", "s", "offset") and value not in ("", "undefined"):
                try:
                    v = float(value)
                except ValueError:
                    continue
                if not math.isfinite(v):
                    problems.append(f"non-finite {key} on {attr_holder.tag}")
    if problems:
        raise ScenarioValidationError(problems)


# --- NPC enrichment -------------------------------------------------------------


_NPC_LINE_RE = re.compile(
    r"npc\s*(\d+)\s*:\s*road\s*=\s*(\w+)\s*lane\s*=\s*(-?\d+)"
    r"\s*s\s*=\s*([0-9.]+)\s*speed\s*=\s*([0-9.]+)",
    re.IGNORECASE,
)


def add_npc_slots(
    template: ScenarioTemplate,
    n: int,
    layout: RoadLayoutSpec,
    gateway: Gateway,
    catalog: dict[int, ScenarioElement] | None = None,
    fixture_id: str = "",
) -> ScenarioTemplate:
    """Ask the model for NPC start positions and extend the template."""
    if n < 1:
        raise PlacementError("requested NPC count must be >= 1")
    catalog = catalog or load_catalog()
    geo = build_geometry(layout)
    occupied = [(a.road, a.lane, a.start_s) for a in template.actors]
    lines = [
        f"{a.actor_id}: road={a.road} lane={a.lane}" for a in template.actors]
    roads_desc = "; ".join(
        f"{r.key}: left={r.left} right={r.right}" for r in layout.roads)
    prompt = "\n".join([
        prompt_text("npc"),
        f"Place {n} NPC vehicles.",
        f"Roads: {roads_desc}",
        "Existing actors:\n" + "\n".join(lines),
    ])
    context = {"kind": "npc", "level": "single", "count": n}
    if fixture_id:
        context["fixture_id"] = fixture_id
    reply = gateway.ask(ModelQuery(
        prompt=prompt, images=(),
        context=context, schema="npc_positions")).text
    placements = _NPC_LINE_RE.findall(reply)
    if len(placements) < n:
        raise PlacementError(
            f"model proposed {len(placements)} placements for {n} NPCs")

    lane_counts = {(r.key, lane): 0 for r in layout.roads
                   for lane in range(-r.right, r.left + 1) if lane != 0}
    for road, lane, _ in occupied:
        if (road, lane) in lane_counts:
            lane_counts[(road, lane)] += 1

    new_actors = []
    new_instances = []
    new_placeholders = []
    new_pairs = list(template.non_collision_pairs)
    new_constraints = list(template.constraints)
    for k, (idx, road_key, lane_s, s_s, speed_s) in enumerate(placements[:n]):
        lane = int(lane_s)
        s = float(s_s)
        speed = float(speed_s)
        spec_road = next((r for r in layout.roads if r.key == road_key), None)
        if spec_road is None:
            raise PlacementError(f"NPC {idx} placed on unknown road {road_key!r}")
        if lane == 0 or lane > spec_road.left or -lane > spec_road.right:
            raise PlacementError(f"NPC {idx} placed on missing lane {lane} of {road_key}")
        key = (road_key, lane)
        built = next(r for r in geo.roads if r.spec_key == road_key)
        if not 0.0 <= s <= built.length:
            raise PlacementError(
                f"NPC {idx} placed at s={s} beyond road {road_key} ({built.length} m)")
        capacity = max(int(built.length // 40.0), 1)
        if lane_counts.get(key, 0) >= capacity:
            raise PlacementError(
                f"no free lane capacity on {road_key} lane {lane} for NPC {idx}")
        lane_counts[key] = lane_counts.get(key, 0) + 1

        name = f"NPC {k + 1}"
        length, width = DEFAULT_DIMENSIONS["vehicle"]
        slug = _slug(name)
        ph_s = Placeholder(f"{slug}_start_s", "distance", 5.0,
                           max(built.length - 5.0, 10.0), npc=True)
        ph_v = Placeholder(f"{slug}_speed", "speed", 0.0, 20.0, npc=True)
        ph_t = Placeholder(f"{slug}_adjust_t", "time", 0.0, 20.0, npc=True)
        new_placeholders += [ph_s, ph_v, ph_t]
        end_s = built.length - 5.0 if lane < 0 else 5.0
        route = [[road_key, lane, Param(ph_s.name)], [road_key, lane, end_s]]
        actor = Actor(name, "vehicle", length, width, road_key, lane,
                      Param(ph_s.name), speed, route, npc=True)
        new_actors.append(actor)
        new_instances.append(ElementInstance(
            catalog[2], {"road_user": name, "waypoints": route}, [name], role="init"))
        new_instances.append(ElementInstance(
            catalog[16],
            {"road_user": name, "target_speeds": [Param(ph_v.name)],
             "trigger_times": [Param(ph_t.name)],
             "completion_distances": [15.0]},
            [name]))
        for other in template.actors:
            new_pairs.append((name, other.actor_id))
        for other in template.actors:
            if other.road == road_key and other.lane == lane:
                new_constraints.append({
                    "kind": "min-initial-gap", "actors": [name, other.actor_id],
                    "threshold": FOLLOW_GAP_M})

    out = ScenarioTemplate(
        layout=template.layout,
        road_ref=template.road_ref,
        actors=template.actors + new_actors,
        instances=template.instances + new_instances,
        placeholders=template.placeholders + new_placeholders,
        crash_pairs=list(template.crash_pairs),
        non_collision_pairs=new_pairs,
        event_order=list(template.event_order),
        constraints=new_constraints,
    )
    out.validate()
    return out


# --- serialization ----------------------------------------------------------------


def _encode(value):
    if isinstance(value, Param):
        return {"$param": value.name}
    if isinstance(value, (list, tuple)):
        return [_encode(v) for v in value]
    return value


def _decode(value):
    if isinstance(value, dict) and "$param" in value:
        return Param(value["$param"])
    if isinstance(value, list):
        return [_decode(v) for v in value]
    return value


def template_to_json(template: ScenarioTemplate) -> str:
    data = {
        "layout": {
            "category": template.layout.category,
            "road_length": template.layout.road_length,
            "lane_width": template.layout.lane_width,
            "topology": template.layout.topology,
            "ramp_kind": template.layout.ramp_kind,
            "ramp_side": template.layout.ramp_side,
            "ramp_curvature": template.layout.ramp_curvature,
            "roads": [
                {"key": r.key, "left": r.left, "right": r.right,
                 "angle": r.angle, "curvature": r.curvature}
                for r in template.layout.roads
            ],
        },
        "road_ref": template.road_ref,
        "actors": [
            {"id": a.actor_id, "category": a.category, "length": a.length,
             "width": a.width, "road": a.road, "lane": a.lane,
             "start_s": _encode(a.start_s), "speed": _encode(a.speed),
             "route": _encode(a.route), "npc": a.npc}
            for a in template.actors
        ],
        "instances": [
            {"element": inst.element.index,
             "bound": {k: _encode(v) for k, v in inst.bound.items()},
             "actors": inst.actors, "role": inst.role,
             "event_index": inst.event_index}
            for inst in template.instances
        ],
        "placeholders": [
            {"name": p.name, "unit": p.unit, "lower": p.lower,
             "upper": p.upper, "npc": p.npc}
            for p in template.placeholders
        ],
        "crash_pairs": [list(p) for p in template.crash_pairs],
        "non_collision_pairs": [list(p) for p in template.non_collision_pairs],
        "event_order": [list(p) for p in template.event_order],
        "constraints": template.constraints,
    }
    return json.dumps(data, indent=1, sort_keys=True)


def template_from_json(text: str,
                       catalog: dict[int, ScenarioElement] | None = None) -> ScenarioTemplate:
    from .roads import RoadSpec

    catalog = catalog or load_catalog()
    data = json.loads(text)
    lay = data["layout"]
    layout = RoadLayoutSpec(
        category=lay["category"],
        roads=[RoadSpec(r["key"], r["left"], r["right"],
                        angle=r.get("angle"), curvature=r.get("curvature", 0.0))
               for r in lay["roads"]],
        topology=lay.get("topology"),
        ramp_kind=lay.get("ramp_kind"),
        ramp_side=lay.get("ramp_side"),
        ramp_curvature=lay.get("ramp_curvature", 0.0),
        road_length=lay.get("road_length", 200.0),
        lane_width=lay.get("lane_width", 3.5),
    )
    actors = [
        Actor(a["id"], a["category"], a["length"], a["width"], a["road"],
              a["lane"], _decode(a["start_s"]), _decode(a["speed"]),
              _decode(a["route"]), a.get("npc", False))
        for a in data["actors"]
    ]
    instances = [
        ElementInstance(
            catalog[inst["element"]],
            {k: _decode(v) for k, v in inst["bound"].items()},
            inst["actors"], inst.get("role", "maneuver"), inst.get("event_index"))
        for inst in data["instances"]
    ]
    placeholders = [
        Placeholder(p["name"], p["unit"], p["lower"], p["upper"], p.get("npc", False))
        for p in data["placeholders"]
    ]
    return ScenarioTemplate(
        layout=layout,
        road_ref=data["road_ref"],
        actors=actors,
        instances=instances,
        placeholders=placeholders,
        crash_pairs=[tuple(p) for p in data["crash_pairs"]],
        non_collision_pairs=[tuple(p) for p in data["non_collision_pairs"]],
        event_order=[tuple(p) for p in data["event_order"]],
        constraints=data.get("constraints", []),
    )
