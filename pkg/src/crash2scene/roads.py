"""Road network construction and OpenDRIVE 1.6 emission.

Supported categories: SingleRoad (one straight or constant-curvature road),
Intersection (3 to 5 approach arms around one junction) and Interchange (a
main road split by a junction with an off- or on-ramp).

Conventions, fixed here and relied on everywhere else:

- An approach road's reference line starts on the junction boundary and points
  outward. Left lanes (positive ids) carry traffic toward the junction, right
  lanes (negative ids) away from it, matching right-hand traffic.
- Lane ids count outward from the center lane 0; every driving lane has the
  layout's uniform lane width.
- Junction connecting roads own one right-lane band; their reference line is
  fitted as a circular arc through the incoming band edge (position and
  heading) and the outgoing band edge position. Straight movements degenerate
  to lines. Endpoint gaps are zero by construction.

Emission is deterministic: fixed header date, fixed float formatting, fixed
element order. Re-parsing an emitted document recovers the layout spec.
"""

from __future__ import annotations

import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field

from .errors import EmissionError, LayoutSpecError, UnsupportedFeatureError
from .parsing import parse_bracketed_layout, render_bracketed_layout

LANE_WIDTH_M = 3.5
ROAD_LENGTH_M = 200.0
RAMP_LENGTH_M = 150.0
DEFAULT_RAMP_CURVATURE = 0.02
JUNCTION_CLEARANCE_M = 2.0
INTERCHANGE_GAP_M = 20.0
SNAP_ANGLES = (0.0, math.pi / 2, math.pi, 3 * math.pi / 2)
SNAP_TOLERANCE_RAD = math.radians(5.0)
MIN_ARM_SEPARATION_RAD = math.radians(10.0)

CATEGORY_SINGLE = "SingleRoad"
CATEGORY_INTERSECTION = "Intersection"
CATEGORY_INTERCHANGE = "Interchange"
CATEGORIES = (CATEGORY_SINGLE, CATEGORY_INTERSECTION, CATEGORY_INTERCHANGE)


def wrap_angle(a: float) -> float:
    """Wrap to [0, 2*pi)."""
    a = math.fmod(a, 2 * math.pi)
    return a + 2 * math.pi if a < 0 else a


def wrap_pm(a: float) -> float:
    """Wrap to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2 * math.pi)
    if a <= 0:
        a += 2 * math.pi
    return a - math.pi


# --- layout spec ------------------------------------------------------------


@dataclass
class RoadSpec:
    key: str
    left: int
    right: int
    angle: float | None = None
    curvature: float = 0.0


@dataclass
class RoadLayoutSpec:
    category: str
    roads: list[RoadSpec]
    topology: str | None = None
    ramp_kind: str | None = None   # "off" | "on"
    ramp_side: str | None = None   # "left" | "right"
    ramp_curvature: float = 0.0
    lane_width: float = LANE_WIDTH_M
    road_length: float = ROAD_LENGTH_M

    def validate(self) -> None:
        if self.category not in CATEGORIES:
            raise LayoutSpecError(f"unknown category {self.category!r}")
        if self.lane_width <= 0 or self.road_length <= 0:
            raise LayoutSpecError("lane width and road length must be positive")
        for road in self.roads:
            if road.left < 0 or road.right < 0 or road.left + road.right < 1:
                raise LayoutSpecError(
                    f"{road.key}: lane counts ({road.left},{road.right}) need at least one lane"
                )
        if self.category == CATEGORY_SINGLE:
            if len(self.roads) != 1:
                raise LayoutSpecError("SingleRoad takes exactly one road entry")
            kappa = self.roads[0].curvature
            if abs(kappa) * self.road_length > math.pi:
                raise LayoutSpecError("single road bends more than a half circle")
        elif self.category == CATEGORY_INTERSECTION:
            if not 3 <= len(self.roads) <= 5:
                raise LayoutSpecError(
                    f"intersection needs 3-5 arms, got {len(self.roads)}"
                )
            angles = []
            for road in self.roads:
                if road.angle is None:
                    raise LayoutSpecError(f"{road.key}: intersection arm needs an angle")
                angles.append(snap_angle(road.angle))
            for i, a in enumerate(angles):
                for b in angles[i + 1:]:
                    sep = abs(wrap_pm(a - b))
                    if sep < MIN_ARM_SEPARATION_RAD:
                        raise LayoutSpecError(
                            f"arm angles {a:.3f} and {b:.3f} are closer than 10 degrees"
                        )
        else:
            if len(self.roads) != 1:
                raise LayoutSpecError("Interchange takes exactly one main-road entry")
            if self.ramp_kind not in ("off", "on"):
                raise LayoutSpecError("Interchange needs ramp_kind 'off' or 'on'")
            if self.ramp_side not in ("left", "right"):
                raise LayoutSpecError("Interchange needs ramp_side 'left' or 'right'")

    def normalized(self) -> "RoadLayoutSpec":
        """Validated copy with junction angles snapped to the canonical set."""
        self.validate()
        roads = []
        for road in self.roads:
            angle = road.angle
            if self.category == CATEGORY_INTERSECTION and angle is not None:
                angle = snap_angle(angle)
            roads.append(RoadSpec(road.key, road.left, road.right, angle, road.curvature))
        ramp_curv = self.ramp_curvature
        if self.category == CATEGORY_INTERCHANGE and ramp_curv == 0.0:
            ramp_curv = -DEFAULT_RAMP_CURVATURE if self.ramp_side == "right" else DEFAULT_RAMP_CURVATURE
        return RoadLayoutSpec(
            self.category, roads, self.topology, self.ramp_kind, self.ramp_side,
            ramp_curv, self.lane_width, self.road_length,
        )


def snap_angle(angle: float) -> float:
    """Snap to {0, pi/2, pi, 3pi/2} when within 5 degrees; wrap otherwise."""
    angle = wrap_angle(angle)
    for canon in SNAP_ANGLES:
        if abs(wrap_pm(angle - canon)) <= SNAP_TOLERANCE_RAD:
            return canon
    return angle


_TOPO_NORMALIZE = {
    "t-junction": "T-Junction", "tjunction": "T-Junction", "t junction": "T-Junction",
    "3-way": "T-Junction", "4-way": "4-way", "four-way": "4-way", "5-way": "5-way",
    "straight": "Straight", "curved": "Curved",
    "off ramp": "Off Ramp", "off-ramp": "Off Ramp", "offramp": "Off Ramp",
    "on ramp": "On Ramp", "on-ramp": "On Ramp", "onramp": "On Ramp",
}


def default_topology(spec: RoadLayoutSpec) -> str:
    if spec.category == CATEGORY_SINGLE:
        return "Curved" if spec.roads[0].curvature else "Straight"
    if spec.category == CATEGORY_INTERCHANGE:
        return "Off Ramp" if spec.ramp_kind == "off" else "On Ramp"
    return {3: "T-Junction", 4: "4-way", 5: "5-way"}[len(spec.roads)]


def parse_layout_response(text: str) -> RoadLayoutSpec:
    """Turn a bracketed layout answer into a validated RoadLayoutSpec."""
    raw = parse_bracketed_layout(text)
    category = raw["category"].strip().lower().replace(" ", "")
    mapping = {
        "singleroad": CATEGORY_SINGLE, "single": CATEGORY_SINGLE,
        "intersection": CATEGORY_INTERSECTION,
        "interchange": CATEGORY_INTERCHANGE,
    }
    if category not in mapping:
        raise LayoutSpecError(f"unknown category {raw['category']!r}")
    category = mapping[category]

    topology = None
    if raw.get("topology"):
        topology = _TOPO_NORMALIZE.get(raw["topology"].strip().lower(), raw["topology"])

    roads = []
    for key in sorted(raw["lanes"], key=lambda k: int(k.replace("road", "") or 0)):
        left, right = raw["lanes"][key]
        roads.append(RoadSpec(
            key, left, right,
            angle=raw["angles"].get(key),
            curvature=raw["curvature"].get(key, 0.0),
        ))

    ramp_kind = ramp_side = None
    ramp_curvature = 0.0
    if category == CATEGORY_INTERCHANGE:
        ramp = raw.get("ramp")
        if ramp:
            for side, label in zip(("left", "right"), ramp):
                if label:
                    ramp_side = side
                    ramp_kind = "on" if "on" in label.lower() else "off"
        if ramp_kind is None and topology:
            ramp_kind = "on" if "on" in topology.lower() else "off"
            ramp_side = ramp_side or "right"
        # Curvature on an interchange describes the ramp; mains stay straight.
        if roads and roads[0].curvature:
            ramp_curvature = roads[0].curvature
            roads[0].curvature = 0.0

    spec = RoadLayoutSpec(category, roads, topology, ramp_kind, ramp_side, ramp_curvature)
    spec.validate()
    return spec


def render_layout_response(spec: RoadLayoutSpec) -> str:
    """Inverse of :func:`parse_layout_response` for the supported subset."""
    lanes = {r.key: (r.left, r.right) for r in spec.roads}
    curvature = {r.key: r.curvature for r in spec.roads}
    if spec.category == CATEGORY_INTERCHANGE:
        curvature = {spec.roads[0].key: spec.ramp_curvature}
    angles = {r.key: r.angle for r in spec.roads if r.angle is not None}
    ramp = None
    if spec.category == CATEGORY_INTERCHANGE:
        label = "Off-ramp" if spec.ramp_kind == "off" else "On-ramp"
        ramp = (label, None) if spec.ramp_side == "left" else (None, label)
    layout = {
        "category": spec.category,
        "topology": spec.topology or default_topology(spec),
        "lanes": lanes,
        "curvature": curvature,
        "angles": angles,
        "ramp": ramp,
    }
    return render_bracketed_layout(layout)


# --- geometry ----------------------------------------------------------------


@dataclass
class GeomPiece:
    s: float
    x: float
    y: float
    hdg: float
    length: float
    kind: str = "line"           # "line" | "arc"
    curvature: float = 0.0

    def eval(self, u: float) -> tuple[float, float, float]:
        """World pose at arc length u from the piece start."""
        if self.kind == "line" or self.curvature == 0.0:
            return (
                self.x + u * math.cos(self.hdg),
                self.y + u * math.sin(self.hdg),
                self.hdg,
            )
        k = self.curvature
        phi = k * u
        x = self.x + (math.sin(self.hdg + phi) - math.sin(self.hdg)) / k
        y = self.y - (math.cos(self.hdg + phi) - math.cos(self.hdg)) / k
        return x, y, self.hdg + phi


@dataclass
class BuiltRoad:
    road_id: int
    name: str
    length: float
    left: int
    right: int
    pieces: list[GeomPiece]
    lane_width: float = LANE_WIDTH_M
    junction: int = -1
    road_type: str = "town"
    lane_offset: float = 0.0
    predecessor: tuple[str, int, str | None] | None = None
    successor: tuple[str, int, str | None] | None = None
    angle: float | None = None
    curvature: float = 0.0
    spec_key: str | None = None

    def eval(self, s: float) -> tuple[float, float, float]:
        s = min(max(s, 0.0), self.length)
        piece = self.pieces[0]
        for p in self.pieces:
            if p.s <= s + 1e-9:
                piece = p
            else:
                break
        return piece.eval(s - piece.s)

    def world(self, s: float, t: float) -> tuple[float, float, float]:
        """World pose of the point at lateral offset t (positive = left of ref)."""
        x, y, h = self.eval(s)
        return x - t * math.sin(h), y + t * math.cos(h), h

    def lane_center_t(self, lane_id: int) -> float:
        if lane_id == 0:
            return self.lane_offset
        sign = 1.0 if lane_id > 0 else -1.0
        return self.lane_offset + sign * (abs(lane_id) - 0.5) * self.lane_width

    def lane_edge_t(self, lane_id: int, outer: bool = True) -> float:
        if lane_id == 0:
            return self.lane_offset
        sign = 1.0 if lane_id > 0 else -1.0
        n = abs(lane_id) if outer else abs(lane_id) - 1
        return self.lane_offset + sign * n * self.lane_width

    def driving_lane_ids(self) -> list[int]:
        return list(range(self.left, 0, -1)) + [-(i + 1) for i in range(self.right)]


@dataclass
class Connection:
    conn_id: int
    incoming: int
    connecting: int
    contact: str
    lane_links: list[tuple[int, int]]


@dataclass
class Junction:
    junction_id: int
    name: str
    connections: list[Connection]
    center: tuple[float, float] = (0.0, 0.0)


@dataclass
class RoadGeometry:
    category: str
    roads: list[BuiltRoad]
    junctions: list[Junction] = field(default_factory=list)
    lane_width: float = LANE_WIDTH_M
    spec: RoadLayoutSpec | None = None

    def road_by_id(self, road_id: int) -> BuiltRoad:
        for road in self.roads:
            if road.road_id == road_id:
                return road
        raise KeyError(f"road {road_id} not in network")

    def approach_roads(self) -> list[BuiltRoad]:
        return [r for r in self.roads if r.junction == -1]


# --- builders ----------------------------------------------------------------


def _line_road(road_id, name, start, hdg, length, left, right, lane_width, **kw) -> BuiltRoad:
    piece = GeomPiece(0.0, start[0], start[1], hdg, length, "line")
    return BuiltRoad(road_id, name, length, left, right, [piece], lane_width, **kw)


def build_single_road(spec: RoadLayoutSpec) -> RoadGeometry:
    spec = spec.normalized()
    entry = spec.roads[0]
    kappa = entry.curvature
    if kappa == 0.0:
        pieces = [GeomPiece(0.0, 0.0, 0.0, 0.0, spec.road_length, "line")]
    else:
        pieces = [GeomPiece(0.0, 0.0, 0.0, 0.0, spec.road_length, "arc", kappa)]
    road = BuiltRoad(
        1, entry.key, spec.road_length, entry.left, entry.right, pieces,
        spec.lane_width, curvature=kappa, spec_key=entry.key,
    )
    return RoadGeometry(CATEGORY_SINGLE, [road], [], spec.lane_width, spec)


def _inbound_count(road: BuiltRoad, contact: str) -> int:
    return road.left if contact == "start" else road.right


def _outbound_count(road: BuiltRoad, contact: str) -> int:
    return road.right if contact == "start" else road.left


def _cross_section(road: BuiltRoad, contact: str, inbound: bool, n: int):
    """Band edge pose for the n matched lanes at a road's junction face.

    Returns (point, driver heading, count) where point is the driver-left
    edge of the driver-leftmost matched lane.
    """
    s = 0.0 if contact == "start" else road.length
    x, y, h = road.eval(s)
    if inbound:
        count = _inbound_count(road, contact)
        travel = h + math.pi if contact == "start" else h
        # Lanes orient so the matched band edge sits at |count-n| widths.
        sign = 1.0 if contact == "start" else -1.0
    else:
        count = _outbound_count(road, contact)
        travel = h if contact == "start" else h + math.pi
        sign = -1.0 if contact == "start" else 1.0
    t_edge = road.lane_offset + sign * (count - n) * road.lane_width
    px = x - t_edge * math.sin(h)
    py = y + t_edge * math.cos(h)
    return (px, py), wrap_angle(travel), count


def _fit_connector_pieces(start, h0, end) -> list[GeomPiece]:
    """Line or arc from start pose through end point."""
    dx, dy = end[0] - start[0], end[1] - start[1]
    chord = math.hypot(dx, dy)
    if chord < 1e-9:
        raise EmissionError("connector endpoints coincide")
    alpha = wrap_pm(math.atan2(dy, dx) - h0)
    if abs(alpha) < 1e-6:
        return [GeomPiece(0.0, start[0], start[1], h0, chord, "line")]
    curvature = 2.0 * math.sin(alpha) / chord
    length = abs(alpha / math.sin(alpha)) * chord
    return [GeomPiece(0.0, start[0], start[1], h0, length, "arc", curvature)]


def _matched_lane_ids(road: BuiltRoad, contact: str, inbound: bool, n: int) -> list[int]:
    """Matched lane ids ordered driver-left to driver-right."""
    if inbound:
        count = _inbound_count(road, contact)
        if contact == "start":
            return [count - n + 1 + i for i in range(n)]
        return [-(count - n + 1 + i) for i in range(n)]
    count = _outbound_count(road, contact)
    if contact == "start":
        return [-(count - n + 1 + i) for i in range(n)]
    return [count - n + 1 + i for i in range(n)]


def _connect(
    conn_road_id: int,
    in_road: BuiltRoad,
    in_contact: str,
    out_road: BuiltRoad,
    out_contact: str,
    junction_id: int,
    lane_width: float,
    max_links: int | None = None,
) -> tuple[BuiltRoad, list[tuple[int, int]]] | None:
    n = min(_inbound_count(in_road, in_contact), _outbound_count(out_road, out_contact))
    if max_links is not None:
        n = min(n, max_links)
    if n <= 0:
        return None
    start, h0, _ = _cross_section(in_road, in_contact, True, n)
    end, _, _ = _cross_section(out_road, out_contact, False, n)
    pieces = _fit_connector_pieces(start, h0, end)
    length = sum(p.length for p in pieces)
    conn = BuiltRoad(
        conn_road_id, f"conn_{in_road.road_id}_{out_road.road_id}", length,
        0, n, pieces, lane_width, junction=junction_id,
        predecessor=("road", in_road.road_id, in_contact),
        successor=("road", out_road.road_id, out_contact),
    )
    sources = _matched_lane_ids(in_road, in_contact, True, n)
    links = [(src, -(i + 1)) for i, src in enumerate(sources)]
    return conn, links


def _junction_radius(spec: RoadLayoutSpec) -> float:
    """Smallest arm-start radius that keeps adjacent arm pavements apart.

    Facing edges of arms with half-widths h_i, h_j and angular gap g cross
    beyond radius (h_j + h_i cos g) / sin g, so the junction must start the
    arms outside that for every adjacent pair. Right-angle layouts reduce to
    the plain max-half-width rule.
    """
    w = spec.lane_width
    half = {r.key: max(r.left, r.right) * w for r in spec.roads}
    ordered = sorted(spec.roads, key=lambda r: wrap_angle(r.angle))
    radius = max(half.values()) + JUNCTION_CLEARANCE_M
    for i, a in enumerate(ordered):
        b = ordered[(i + 1) % len(ordered)]
        gap = wrap_angle(b.angle - a.angle) if len(ordered) > 1 else 0.0
        if not 1e-6 < gap < math.pi - 1e-6:
            continue
        ha, hb = half[a.key], half[b.key]
        need = max(hb + ha * math.cos(gap), ha + hb * math.cos(gap)) / math.sin(gap)
        radius = max(radius, need + JUNCTION_CLEARANCE_M)
    return radius


def build_intersection(spec: RoadLayoutSpec) -> RoadGeometry:
    spec = spec.normalized()
    w = spec.lane_width
    radius = _junction_radius(spec)

    arms: list[BuiltRoad] = []
    ordered = sorted(spec.roads, key=lambda r: wrap_angle(r.angle))
    for idx, entry in enumerate(ordered):
        theta = wrap_angle(entry.angle)
        start = (radius * math.cos(theta), radius * math.sin(theta))
        if entry.curvature == 0.0:
            pieces = [GeomPiece(0.0, start[0], start[1], theta, spec.road_length, "line")]
        else:
            pieces = [GeomPiece(0.0, start[0], start[1], theta, spec.road_length, "arc", entry.curvature)]
        arms.append(BuiltRoad(
            idx + 1, entry.key, spec.road_length, entry.left, entry.right, pieces,
            w, predecessor=("junction", 1, None), angle=theta,
            curvature=entry.curvature, spec_key=entry.key,
        ))

    connections: list[Connection] = []
    conn_roads: list[BuiltRoad] = []
    next_road_id = 100
    next_conn_id = 0
    for a in arms:
        for b in arms:
            if a.road_id == b.road_id:
                continue
            built = _connect(next_road_id, a, "start", b, "start", 1, w)
            if built is None:
                continue
            conn, links = built
            conn_roads.append(conn)
            connections.append(Connection(next_conn_id, a.road_id, conn.road_id, "start", links))
            next_road_id += 1
            next_conn_id += 1

    junction = Junction(1, "junction1", connections, (0.0, 0.0))
    return RoadGeometry(CATEGORY_INTERSECTION, arms + conn_roads, [junction], w, spec)


def build_interchange(spec: RoadLayoutSpec) -> RoadGeometry:
    spec = spec.normalized()
    w = spec.lane_width
    main = spec.roads[0]
    seg = spec.road_length
    gap = INTERCHANGE_GAP_M
    split = seg  # junction begins where the first main segment ends

    before = _line_road(1, f"{main.key}_before", (0.0, 0.0), 0.0, seg, main.left, main.right,
                        w, successor=("junction", 1, None), road_type="motorway",
                        angle=math.pi, spec_key=main.key)
    after = _line_road(2, f"{main.key}_after", (split + gap, 0.0), 0.0, seg, main.left, main.right,
                       w, predecessor=("junction", 1, None), road_type="motorway",
                       angle=0.0, spec_key=main.key)

    side = 1.0 if spec.ramp_side == "left" else -1.0
    kappa = spec.ramp_curvature
    lane_count = main.left if side > 0 else main.right
    band_t = side * (lane_count - 1) * w  # outermost lane's inner edge
    if spec.ramp_kind == "off":
        # Ramp leaves the junction along +x and bends away from the main road.
        if kappa == 0.0:
            pieces = [GeomPiece(0.0, split + gap, band_t, 0.0, RAMP_LENGTH_M, "line")]
        else:
            pieces = [GeomPiece(0.0, split + gap, band_t, 0.0, RAMP_LENGTH_M, "arc", kappa)]
        ramp = BuiltRoad(3, "ramp", RAMP_LENGTH_M, 0, 1, pieces, w,
                         predecessor=("junction", 1, None), road_type="motorwayExit",
                         curvature=kappa)
    else:
        # On-ramp: one arc whose end pose is (split, band_t, heading 0).
        if kappa == 0.0:
            pieces = [GeomPiece(0.0, split - RAMP_LENGTH_M, band_t, 0.0, RAMP_LENGTH_M, "line")]
        else:
            ah = -kappa * RAMP_LENGTH_M
            ax = split + math.sin(ah) / kappa
            ay = band_t + (1.0 - math.cos(ah)) / kappa
            pieces = [GeomPiece(0.0, ax, ay, ah, RAMP_LENGTH_M, "arc", kappa)]
        ramp = BuiltRoad(3, "ramp", RAMP_LENGTH_M, 0, 1, pieces, w,
                         successor=("junction", 1, None), road_type="motorwayEntry",
                         curvature=kappa)

    connections: list[Connection] = []
    conn_roads: list[BuiltRoad] = []
    next_road_id = 100
    builds = [
        (before, "end", after, "start", None),
        (after, "start", before, "end", None),
    ]
    if spec.ramp_kind == "off":
        builds.append((before, "end", ramp, "start", 1))
    else:
        builds.append((ramp, "end", after, "start", 1))
    for idx, (ra, ca, rb, cb, max_links) in enumerate(builds):
        built = _connect(next_road_id, ra, ca, rb, cb, 1, w, max_links=max_links)
        if built is None:
            continue
        conn, links = built
        conn_roads.append(conn)
        connections.append(Connection(idx, ra.road_id, conn.road_id, "start", links))
        next_road_id += 1

    junction = Junction(1, "junction1", connections, (split + gap / 2, 0.0))
    roads = [before, after, ramp] + conn_roads
    return RoadGeometry(CATEGORY_INTERCHANGE, roads, [junction], w, spec)


def build_geometry(spec: RoadLayoutSpec) -> RoadGeometry:
    spec.validate()
    if spec.category == CATEGORY_SINGLE:
        return build_single_road(spec)
    if spec.category == CATEGORY_INTERSECTION:
        return build_intersection(spec)
    return build_interchange(spec)


# --- OpenDRIVE emission -------------------------------------------------------


def _fmt(value: float) -> str:
    if value == 0:
        return "0"
    text = f"{value:.12g}"
    return text


def _road_element(road: BuiltRoad) -> ET.Element:
    el = ET.Element("road", {
        "name": road.name,
        "length": _fmt(road.length),
        "id": str(road.road_id),
        "junction": str(road.junction),
        "rule": "RHT",
    })
    if road.predecessor or road.successor:
        link = ET.SubElement(el, "link")
        for tag, ref in (("predecessor", road.predecessor), ("successor", road.successor)):
            if ref is None:
                continue
            etype, eid, contact = ref
            attrs = {"elementType": etype, "elementId": str(eid)}
            if etype == "road" and contact:
                attrs["contactPoint"] = contact
            ET.SubElement(link, tag, attrs)
    type_el = ET.SubElement(el, "type", {"s": "0", "type": road.road_type})
    ET.SubElement(type_el, "speed", {"max": "undefined"})

    plan = ET.SubElement(el, "planView")
    for piece in road.pieces:
        geom = ET.SubElement(plan, "geometry", {
            "s": _fmt(piece.s), "x": _fmt(piece.x), "y": _fmt(piece.y),
            "hdg": _fmt(piece.hdg), "length": _fmt(piece.length),
        })
        if piece.kind == "arc":
            ET.SubElement(geom, "arc", {"curvature": _fmt(piece.curvature)})
        else:
            ET.SubElement(geom, "line")

    lanes = ET.SubElement(el, "lanes")
    if road.lane_offset:
        ET.SubElement(lanes, "laneOffset", {
            "s": "0", "a": _fmt(road.lane_offset), "b": "0", "c": "0", "d": "0",
        })
    section = ET.SubElement(lanes, "laneSection", {"s": "0"})
    if road.left:
        left = ET.SubElement(section, "left")
        for lane_id in range(road.left, 0, -1):
            _lane_element(left, lane_id, road)
    center = ET.SubElement(section, "center")
    lane0 = ET.SubElement(center, "lane", {"id": "0", "type": "none", "level": "false"})
    ET.SubElement(lane0, "roadMark", {
        "sOffset": "0", "type": "solid", "weight": "standard", "color": "yellow", "width": "0.13",
    })
    if road.right:
        right = ET.SubElement(section, "right")
        for lane_id in range(1, road.right + 1):
            _lane_element(right, -lane_id, road)
    return el


def _lane_element(parent: ET.Element, lane_id: int, road: BuiltRoad) -> None:
    lane = ET.SubElement(parent, "lane", {
        "id": str(lane_id), "type": "driving", "level": "false",
    })
    ET.SubElement(lane, "link")
    ET.SubElement(lane, "width", {
        "sOffset": "0", "a": _fmt(road.lane_width), "b": "0", "c": "0", "d": "0",
    })
    outer = abs(lane_id) == (road.left if lane_id > 0 else road.right)
    ET.SubElement(lane, "roadMark", {
        "sOffset": "0", "type": "solid" if outer else "broken",
        "weight": "standard", "color": "standard", "width": "0.13",
    })


def emit_opendrive(geometry: RoadGeometry, name: str = "crash2scene") -> str:
    """Serialize to OpenDRIVE 1.6. Deterministic: equal input, equal bytes."""
    root = ET.Element("OpenDRIVE")
    xs: list[float] = []
    ys: list[float] = []
    for road in geometry.roads:
        for s in (0.0, road.length / 2, road.length):
            x, y, _ = road.eval(s)
            xs.append(x)
            ys.append(y)
    ET.SubElement(root, "header", {
        "revMajor": "1", "revMinor": "6", "name": name, "version": "1.00",
        "date": "2026-01-01T00:00:00",
        "north": _fmt(max(ys) + 50), "south": _fmt(min(ys) - 50),
        "east": _fmt(max(xs) + 50), "west": _fmt(min(xs) - 50),
        "vendor": "crash2scene",
    })
    for road in geometry.roads:
        root.append(_road_element(road))
    for junction in geometry.junctions:
        jel = ET.SubElement(root, "junction", {
            "id": str(junction.junction_id), "name": junction.name,
        })
        for conn in junction.connections:
            cel = ET.SubElement(jel, "connection", {
                "id": str(conn.conn_id),
                "incomingRoad": str(conn.incoming),
                "connectingRoad": str(conn.connecting),
                "contactPoint": conn.contact,
            })
            for src, dst in conn.lane_links:
                ET.SubElement(cel, "laneLink", {"from": str(src), "to": str(dst)})
    ET.indent(root, space="  ")
    body = ET.tostring(root, encoding="unicode")
    return '<?xml version="1.0" encoding="UTF-8"?>\n' + body + "\n"


# --- OpenDRIVE re-parse -------------------------------------------------------


def parse_opendrive(text: str) -> RoadGeometry:
    """Read back the emitted subset (lines, arcs, one lane section per road)."""
    try:
        root = ET.fromstring(text)
    except ET.ParseError as exc:
        raise UnsupportedFeatureError(f"not well-formed OpenDRIVE: {exc}") from None
    if root.tag != "OpenDRIVE":
        raise UnsupportedFeatureError(f"root element is {root.tag!r}, expected OpenDRIVE")

    roads: list[BuiltRoad] = []
    for rel in root.findall("road"):
        pieces = []
        for gel in rel.findall("planView/geometry"):
            arc = gel.find("arc")
            kind = "arc" if arc is not None else "line"
            if gel.find("line") is None and arc is None:
                raise UnsupportedFeatureError(
                    f"road {rel.get('id')}: unsupported geometry primitive"
                )
            pieces.append(GeomPiece(
                float(gel.get("s")), float(gel.get("x")), float(gel.get("y")),
                float(gel.get("hdg")), float(gel.get("length")), kind,
                float(arc.get("curvature")) if arc is not None else 0.0,
            ))
        sections = rel.findall("lanes/laneSection")
        if len(sections) != 1:
            raise UnsupportedFeatureError(
                f"road {rel.get('id')}: expected exactly one laneSection"
            )
        section = sections[0]
        left = len([l for l in section.findall("left/lane") if l.get("type") == "driving"])
        right = len([l for l in section.findall("right/lane") if l.get("type") == "driving"])
        width_el = section.find("left/lane/width")
        if width_el is None:
            width_el = section.find("right/lane/width")
        lane_width = float(width_el.get("a")) if width_el is not None else LANE_WIDTH_M

        offset_el = rel.find("lanes/laneOffset")
        lane_offset = float(offset_el.get("a")) if offset_el is not None else 0.0

        def _link(tag):
            lel = rel.find(f"link/{tag}")
            if lel is None:
                return None
            return (lel.get("elementType"), int(lel.get("elementId")), lel.get("contactPoint"))

        type_el = rel.find("type")
        road = BuiltRoad(
            int(rel.get("id")), rel.get("name", ""), float(rel.get("length")),
            left, right, pieces, lane_width,
            junction=int(rel.get("junction", "-1")),
            road_type=type_el.get("type") if type_el is not None else "town",
            lane_offset=lane_offset,
            predecessor=_link("predecessor"), successor=_link("successor"),
        )
        if pieces and len(pieces) == 1 and pieces[0].kind == "arc":
            road.curvature = pieces[0].curvature
        roads.append(road)

    junctions = []
    for jel in root.findall("junction"):
        conns = []
        for cel in jel.findall("connection"):
            links = [(int(l.get("from")), int(l.get("to"))) for l in cel.findall("laneLink")]
            conns.append(Connection(
                int(cel.get("id")), int(cel.get("incomingRoad")),
                int(cel.get("connectingRoad")), cel.get("contactPoint", "start"), links,
            ))
        junctions.append(Junction(int(jel.get("id")), jel.get("name", ""), conns))

    category = _recover_category(roads, junctions)
    lane_width = roads[0].lane_width if roads else LANE_WIDTH_M
    geometry = RoadGeometry(category, roads, junctions, lane_width)
    # Approach-arm angles: outward heading at the junction face.
    for road in geometry.approach_roads():
        if junctions and road.pieces:
            if road.predecessor and road.predecessor[0] == "junction":
                road.angle = wrap_angle(road.pieces[0].hdg)
            elif road.successor and road.successor[0] == "junction":
                _, _, h = road.eval(road.length)
                road.angle = wrap_angle(h + math.pi)
    return geometry


def _recover_category(roads, junctions) -> str:
    if not junctions:
        return CATEGORY_SINGLE
    for road in roads:
        if road.road_type in ("motorwayExit", "motorwayEntry"):
            return CATEGORY_INTERCHANGE
    return CATEGORY_INTERSECTION


def recover_layout_spec(geometry: RoadGeometry) -> RoadLayoutSpec:
    """Rebuild the layout spec from (possibly re-parsed) geometry."""
    if geometry.category == CATEGORY_SINGLE:
        road = geometry.approach_roads()[0]
        spec = RoadLayoutSpec(
            CATEGORY_SINGLE,
            [RoadSpec("road1", road.left, road.right, None, road.curvature)],
            road_length=road.length, lane_width=road.lane_width,
        )
        spec.topology = default_topology(spec)
        return spec

    if geometry.category == CATEGORY_INTERCHANGE:
        ramp = next(r for r in geometry.roads if r.road_type in ("motorwayExit", "motorwayEntry"))
        mains = [r for r in geometry.approach_roads() if r.road_id != ramp.road_id]
        main = mains[0]
        kind = "off" if ramp.road_type == "motorwayExit" else "on"
        # Ramp side: lateral sign of the ramp's outer end in the main frame.
        outer_s = ramp.length if kind == "off" else 0.0
        _, ry, _ = ramp.eval(outer_s)
        side = "left" if ry > 0 else "right"
        kappa = 0.0
        for piece in ramp.pieces:
            if piece.kind == "arc":
                kappa = piece.curvature
                break
        spec = RoadLayoutSpec(
            CATEGORY_INTERCHANGE,
            [RoadSpec("road1", main.left, main.right, None, 0.0)],
            ramp_kind=kind, ramp_side=side, ramp_curvature=kappa,
            road_length=main.length, lane_width=main.lane_width,
        )
        spec.topology = default_topology(spec)
        return spec

    arms = sorted(geometry.approach_roads(), key=lambda r: wrap_angle(r.angle or 0.0))
    roads = [
        RoadSpec(f"road{i + 1}", arm.left, arm.right, wrap_angle(arm.angle or 0.0), arm.curvature)
        for i, arm in enumerate(arms)
    ]
    spec = RoadLayoutSpec(
        CATEGORY_INTERSECTION, roads,
        road_length=arms[0].length, lane_width=arms[0].lane_width,
    )
    spec.topology = default_topology(spec)
    return spec


# --- junction gap audit -------------------------------------------------------


def junction_gaps(geometry: RoadGeometry) -> list[float]:
    """Distance between every connector endpoint and its matched band edge."""
    gaps: list[float] = []
    for junction in geometry.junctions:
        for conn in junction.connections:
            croad = geometry.road_by_id(conn.connecting)
            n = croad.right
            if croad.predecessor is None or croad.successor is None:
                raise EmissionError(
                    f"junction {junction.junction_id}: connector {croad.road_id} lacks links"
                )
            _, in_id, in_contact = croad.predecessor
            _, out_id, out_contact = croad.successor
            in_road = geometry.road_by_id(in_id)
            out_road = geometry.road_by_id(out_id)
            expected_start, _, _ = _cross_section(in_road, in_contact or "start", True, n)
            expected_end, _, _ = _cross_section(out_road, out_contact or "start", False, n)
            sx, sy, _ = croad.eval(0.0)
            ex, ey, _ = croad.eval(croad.length)
            gaps.append(math.hypot(sx - expected_start[0], sy - expected_start[1]))
            gaps.append(math.hypot(ex - expected_end[0], ey - expected_end[1]))
    return gaps


# --- SVG rendering -------------------------------------------------------------


def render_geometry_svg(geometry: RoadGeometry, traces=None, size: int = 800) -> str:
    """Deterministic top-down SVG of the network plus optional trajectories.

    ``traces`` is an iterable of (label, [(x, y), ...]) polylines.
    """
    samples: list[tuple[float, float]] = []
    outlines = []
    for road in geometry.roads:
        n = max(8, int(road.length / 5))
        upper = []
        lower = []
        for i in range(n + 1):
            s = road.length * i / n
            t_top = road.lane_offset + road.left * road.lane_width
            t_bot = road.lane_offset - road.right * road.lane_width
            upper.append(road.world(s, t_top)[:2])
            lower.append(road.world(s, t_bot)[:2])
        poly = upper + lower[::-1]
        outlines.append(poly)
        samples.extend(poly)
    for _, pts in traces or []:
        samples.extend(pts)
    if not samples:
        samples = [(0.0, 0.0)]
    xs = [p[0] for p in samples]
    ys = [p[1] for p in samples]
    pad = 10.0
    x0, x1 = min(xs) - pad, max(xs) + pad
    y0, y1 = min(ys) - pad, max(ys) + pad
    scale = size / max(x1 - x0, y1 - y0)

    def to_px(p):
        return ((p[0] - x0) * scale, (y1 - p[1]) * scale)

    def path(points):
        return " ".join(f"{to_px(p)[0]:.1f},{to_px(p)[1]:.1f}" for p in points)

    h_px = (y1 - y0) * scale
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{h_px:.0f}" '
        f'viewBox="0 0 {size} {h_px:.0f}">',
        f'<rect width="{size}" height="{h_px:.0f}" fill="white"/>',
    ]
    for poly in outlines:
        parts.append(f'<polygon points="{path(poly)}" fill="#d9d9d9" stroke="#555" stroke-width="1"/>')
    colors = ("#c0392b", "#2471a3", "#1e8449", "#b7950b", "#7d3c98", "#117864")
    for i, (label, pts) in enumerate(traces or []):
        color = colors[i % len(colors)]
        parts.append(
            f'<polyline points="{path(pts)}" fill="none" stroke="{color}" stroke-width="2"/>'
        )
        if pts:
            px, py = to_px(pts[0])
            parts.append(f'<text x="{px:.1f}" y="{py:.1f}" font-size="12" fill="{color}">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
