"""Sketch decomposition into components, boundary pairs and visual trees.

The sketch is near-binary line art. Components are 4-connected foreground
regions after mid-gray thresholding. Road boundary edges pair up into road
bands; lane edges nest inside a band and split it into lane regions. Five
tree kinds turn the decomposition into visual prompts: every node is the
original image with all components outside the node's scope painted over with
background, so global coordinates stay valid at every level.

Node counts follow fixed formulas. With R roads (boundary pairs), L_i lane
edges inside pair i, W total waypoints and V road users: the road tree has R
leaves; the lane tree R mids and sum(L_i + 1) leaves; the location tree W mids
and one leaf per lane region of each waypoint's road; the adjacent-behavior
tree W - V mids (consecutive waypoint pairs) with the same leaf rule; the pure
behavior tree V leaves. Every tree has exactly one root.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import (
    ClassificationError,
    EmptyTreeError,
    SketchStructureError,
)
from .gateway import Gateway, ModelQuery
from .parsing import parse_label
from .prompts import prompt_text

BINARIZE_THRESHOLD = 128
PARALLEL_TOLERANCE_RAD = math.radians(15.0)
MIN_PROJECTION_OVERLAP = 0.5
BACKGROUND = 255

TREE_KINDS = (
    "road_identification",
    "lane_identification",
    "user_location",
    "user_behavior_adjacent",
    "user_behavior_pure",
)


@dataclass
class Component:
    comp_id: int
    bbox: tuple[int, int, int, int]      # x0, y0, x1, y1 (exclusive)
    mask: np.ndarray                     # local bool array, shape (y1-y0, x1-x0)
    area: int
    centroid: tuple[float, float]        # (x, y) in image coordinates
    label: str | None = None
    user_ids: list[str] = field(default_factory=list)

    def pixels(self) -> np.ndarray:
        ys, xs = np.nonzero(self.mask)
        return np.stack([xs + self.bbox[0], ys + self.bbox[1]], axis=1).astype(float)

    def probe_points(self, count: int = 9) -> list[list[int]]:
        """A few on-component pixels, evenly spread in raster order."""
        pts = self.pixels()
        if len(pts) <= count:
            picks = pts
        else:
            idx = np.linspace(0, len(pts) - 1, count).astype(int)
            picks = pts[idx]
        return [[int(x), int(y)] for x, y in picks]


def binarize(image: np.ndarray, threshold: int = BINARIZE_THRESHOLD) -> np.ndarray:
    """Foreground mask of a near-binary sketch (dark strokes on light paper)."""
    if image.ndim == 3:
        image = image.mean(axis=2)
    return image < threshold


def extract_components(image: np.ndarray, threshold: int = BINARIZE_THRESHOLD) -> list[Component]:
    """4-connected components of the binarized sketch, in raster order."""
    fg = binarize(image, threshold)
    structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
    labels, count = ndimage.label(fg, structure=structure)
    components: list[Component] = []
    slices = ndimage.find_objects(labels)
    for idx, sl in enumerate(slices, start=1):
        if sl is None:
            continue
        local = labels[sl] == idx
        ys, xs = np.nonzero(local)
        y0, x0 = sl[0].start, sl[1].start
        area = int(local.sum())
        cx = float(xs.mean()) + x0
        cy = float(ys.mean()) + y0
        components.append(Component(
            comp_id=len(components),
            bbox=(x0, y0, sl[1].stop, sl[0].stop),
            mask=local,
            area=area,
            centroid=(cx, cy),
        ))
    return components


def classify_components(
    components: list[Component],
    image: np.ndarray,
    gateway: Gateway,
    fixture_id: str = "",
) -> list[Component]:
    """Label every component through the gateway; fills labels in place."""
    for comp in components:
        node_img = erase_except(image, components, (comp.comp_id,))
        query = ModelQuery(
            prompt=prompt_text("classify"),
            images=(node_img,),
            context={
                "fixture_id": fixture_id,
                "kind": "component",
                "level": "component",
                "bbox": list(comp.bbox),
                "area": comp.area,
                "probes": comp.probe_points(),
            },
            schema="label",
        )
        response = gateway.ask(query)
        try:
            parsed = parse_label(response.text)
        except Exception as exc:
            raise ClassificationError(comp.comp_id, str(exc)) from exc
        comp.label = parsed["label"]
        comp.user_ids = parsed["user_ids"]
    return components


# --- boundary pairing --------------------------------------------------------


@dataclass
class BoundaryPair:
    pair_id: int
    edge_a: Component
    edge_b: Component | None
    direction: float                      # radians, mod pi
    center: tuple[float, float]
    lane_edges: list[Component] = field(default_factory=list)
    outward_angle: float | None = None

    @property
    def degenerate(self) -> bool:
        return self.edge_b is None

    def region_count(self) -> int:
        return len(self.lane_edges) + 1

    def edges(self) -> list[Component]:
        return [self.edge_a] if self.edge_b is None else [self.edge_a, self.edge_b]


def _principal_direction(points: np.ndarray) -> float:
    centered = points - points.mean(axis=0)
    cov = centered.T @ centered
    vals, vecs = np.linalg.eigh(cov)
    major = vecs[:, int(np.argmax(vals))]
    angle = math.atan2(major[1], major[0])
    return angle % math.pi


def _angle_gap(a: float, b: float) -> float:
    d = abs(a - b) % math.pi
    return min(d, math.pi - d)


def _frame(direction: float) -> tuple[np.ndarray, np.ndarray]:
    u = np.array([math.cos(direction), math.sin(direction)])
    n = np.array([-math.sin(direction), math.cos(direction)])
    return u, n


def _projection_overlap(pts_a: np.ndarray, pts_b: np.ndarray, direction: float) -> float:
    u, _ = _frame(direction)
    pa = pts_a @ u
    pb = pts_b @ u
    lo = max(pa.min(), pb.min())
    hi = min(pa.max(), pb.max())
    if hi <= lo:
        return 0.0
    shorter = min(pa.max() - pa.min(), pb.max() - pb.min())
    return (hi - lo) / max(shorter, 1e-9)


def pair_road_boundaries(components: list[Component]) -> list[BoundaryPair]:
    """Group road edges into parallel pairs; leftovers become one-sided pairs."""
    edges = [c for c in components if c.label == "road_edge"]
    if not edges:
        raise SketchStructureError("no road detected: sketch has no road_edge components")
    info = {}
    for edge in edges:
        pts = edge.pixels()
        info[edge.comp_id] = (pts, _principal_direction(pts))

    candidates = []
    for i, a in enumerate(edges):
        for b in edges[i + 1:]:
            pts_a, dir_a = info[a.comp_id]
            pts_b, dir_b = info[b.comp_id]
            if _angle_gap(dir_a, dir_b) > PARALLEL_TOLERANCE_RAD:
                continue
            direction = dir_a
            if _projection_overlap(pts_a, pts_b, direction) < MIN_PROJECTION_OVERLAP:
                continue
            _, n = _frame(direction)
            gap = abs(float((np.asarray(b.centroid) - np.asarray(a.centroid)) @ n))
            if gap < 3.0:
                continue
            candidates.append((gap, a.comp_id, b.comp_id))

    candidates.sort()
    used: set[int] = set()
    pairs: list[BoundaryPair] = []
    lookup = {c.comp_id: c for c in edges}
    for gap, ia, ib in candidates:
        if ia in used or ib in used:
            continue
        used.update((ia, ib))
        a, b = lookup[ia], lookup[ib]
        direction = _principal_direction(np.vstack([info[ia][0], info[ib][0]]))
        center = (
            (a.centroid[0] + b.centroid[0]) / 2,
            (a.centroid[1] + b.centroid[1]) / 2,
        )
        pairs.append(BoundaryPair(len(pairs), a, b, direction, center))
    for edge in edges:
        if edge.comp_id not in used:
            pairs.append(BoundaryPair(
                len(pairs), edge, None, info[edge.comp_id][1], edge.centroid,
            ))

    _assign_lane_edges(pairs, components)
    _assign_outward_angles(pairs)
    return pairs


def _assign_lane_edges(pairs: list[BoundaryPair], components: list[Component]) -> None:
    lane_edges = [c for c in components if c.label == "lane_edge"]
    for lane in lane_edges:
        best = None
        for pair in pairs:
            if pair.degenerate:
                continue
            if _angle_gap(_principal_direction(lane.pixels()), pair.direction) > math.radians(25):
                continue
            u, n = _frame(pair.direction)
            center = np.asarray(pair.center)
            t_a = float((np.asarray(pair.edge_a.centroid) - center) @ n)
            t_b = float((np.asarray(pair.edge_b.centroid) - center) @ n)
            lo, hi = min(t_a, t_b), max(t_a, t_b)
            t = float((np.asarray(lane.centroid) - center) @ n)
            if not (lo + 1.0 < t < hi - 1.0):
                continue
            pts = pair.edge_a.pixels()
            s_span = (pts @ u).max() - (pts @ u).min()
            s = abs(float((np.asarray(lane.centroid) - center) @ u))
            if s > s_span / 2 + 2.0:
                continue
            depth = min(t - lo, hi - t)
            if best is None or depth > best[0]:
                best = (depth, pair)
        if best is not None:
            best[1].lane_edges.append(lane)
    for pair in pairs:
        if pair.degenerate:
            continue
        _, n = _frame(pair.direction)
        center = np.asarray(pair.center)
        pair.lane_edges.sort(key=lambda c: float((np.asarray(c.centroid) - center) @ n))


def _assign_outward_angles(pairs: list[BoundaryPair]) -> None:
    # Angles are reported in plan convention (y up, counterclockwise) while
    # image rows grow downward, hence the sign flip on the y component.
    if len(pairs) == 1:
        pairs[0].outward_angle = (-pairs[0].direction) % math.pi
        return
    # The junction point is where the band centerlines meet: the least-squares
    # point minimizing distance to every line (center_i, direction_i).
    A = np.zeros((2, 2))
    b = np.zeros(2)
    for pair in pairs:
        u, _ = _frame(pair.direction)
        proj = np.eye(2) - np.outer(u, u)
        A += proj
        b += proj @ np.asarray(pair.center)
    if abs(np.linalg.det(A)) > 1e-9:
        hub = np.linalg.solve(A, b)
    else:
        hub = np.array([p.center for p in pairs]).mean(axis=0)
    for pair in pairs:
        v = np.asarray(pair.center) - hub
        pair.outward_angle = math.atan2(-v[1], v[0]) % (2 * math.pi)


def pair_separators(pair: BoundaryPair) -> list[tuple[float, Component | None]]:
    """Lateral positions splitting the band into lane regions, sorted."""
    u, n = _frame(pair.direction)
    center = np.asarray(pair.center)

    def t_of(comp: Component) -> float:
        return float((np.asarray(comp.centroid) - center) @ n)

    seps: list[tuple[float, Component | None]] = [(t_of(pair.edge_a), pair.edge_a)]
    if pair.edge_b is not None:
        seps.append((t_of(pair.edge_b), pair.edge_b))
    for lane in pair.lane_edges:
        seps.append((t_of(lane), lane))
    seps.sort(key=lambda item: item[0])
    return seps


def pair_span(pair: BoundaryPair) -> tuple[float, float]:
    u, _ = _frame(pair.direction)
    pts = np.vstack([e.pixels() for e in pair.edges()])
    center = np.asarray(pair.center)
    s = (pts - center) @ u
    return float(s.min()), float(s.max())


def region_boxes(pair: BoundaryPair) -> list[tuple[int, int, int, int]]:
    """Axis-aligned bounding box per lane region of the pair's band."""
    seps = pair_separators(pair)
    if len(seps) < 2:
        box = pair.edge_a.bbox
        return [box]
    u, n = _frame(pair.direction)
    center = np.asarray(pair.center)
    s_lo, s_hi = pair_span(pair)
    boxes = []
    for (t0, _), (t1, _) in zip(seps[:-1], seps[1:]):
        corners = []
        for s in (s_lo, s_hi):
            for t in (t0, t1):
                corners.append(center + u * s + n * t)
        corners = np.array(corners)
        boxes.append((
            int(corners[:, 0].min()), int(corners[:, 1].min()),
            int(math.ceil(corners[:, 0].max())), int(math.ceil(corners[:, 1].max())),
        ))
    return boxes


def region_center(pair: BoundaryPair, index: int) -> tuple[float, float]:
    seps = pair_separators(pair)
    u, n = _frame(pair.direction)
    center = np.asarray(pair.center)
    t0 = seps[index][0]
    t1 = seps[index + 1][0] if index + 1 < len(seps) else t0
    point = center + n * ((t0 + t1) / 2)
    return float(point[0]), float(point[1])


def component_region_index(pair: BoundaryPair, comp: Component) -> int | None:
    """Which lane region the component's centroid falls into, if any."""
    seps = pair_separators(pair)
    if len(seps) < 2:
        return None
    u, n = _frame(pair.direction)
    center = np.asarray(pair.center)
    t = float((np.asarray(comp.centroid) - center) @ n)
    s = float((np.asarray(comp.centroid) - center) @ u)
    s_lo, s_hi = pair_span(pair)
    if not (s_lo - 2.0 <= s <= s_hi + 2.0):
        return None
    for k in range(len(seps) - 1):
        if seps[k][0] <= t <= seps[k + 1][0]:
            return k
    return None


# --- waypoints ----------------------------------------------------------------


@dataclass
class Waypoint:
    user_id: str
    component: Component
    pair: BoundaryPair | None
    position: tuple[float, float]
    order: int


def build_waypoints(
    components: list[Component],
    pairs: list[BoundaryPair],
    order_hints: dict[str, list[int]] | None = None,
) -> dict[str, list[Waypoint]]:
    """Per-user waypoint sequences from road_user components.

    ``order_hints`` maps user id to an ordered component-id list (derived from
    the narrative); without a hint, icons order left-to-right, top-to-bottom.
    """
    per_user: dict[str, list[Component]] = {}
    for comp in components:
        if comp.label != "road_user":
            continue
        for user in comp.user_ids:
            per_user.setdefault(user, []).append(comp)

    waypoints: dict[str, list[Waypoint]] = {}
    for user in sorted(per_user):
        comps = per_user[user]
        hint = (order_hints or {}).get(user)
        if hint:
            rank = {cid: i for i, cid in enumerate(hint)}
            comps.sort(key=lambda c: (rank.get(c.comp_id, len(rank)), c.centroid))
        else:
            comps.sort(key=lambda c: (c.centroid[0], c.centroid[1]))
        seq = []
        for order, comp in enumerate(comps):
            pair = _containing_pair(comp, pairs)
            seq.append(Waypoint(user, comp, pair, comp.centroid, order))
        waypoints[user] = seq
    return waypoints


def _containing_pair(comp: Component, pairs: list[BoundaryPair]) -> BoundaryPair | None:
    best = None
    best_gap = None
    for pair in pairs:
        idx = component_region_index(pair, comp)
        if idx is not None:
            return pair
        _, n = _frame(pair.direction)
        gap = abs(float((np.asarray(comp.centroid) - np.asarray(pair.center)) @ n))
        if best_gap is None or gap < best_gap:
            best_gap = gap
            best = pair
    return best


# --- tree construction ----------------------------------------------------------


@dataclass
class TreeNode:
    level: str
    image: np.ndarray
    roi: tuple[int, int, int, int]
    prompt: str
    context: dict
    kept: tuple[int, ...]
    children: list["TreeNode"] = field(default_factory=list)

    def walk(self):
        yield self
        for child in self.children:
            yield from child.walk()


@dataclass
class VisualTree:
    kind: str
    root: TreeNode

    def nodes(self) -> list[TreeNode]:
        return list(self.root.walk())

    def count(self, level: str) -> int:
        return sum(1 for node in self.nodes() if node.level == level)

    def leaves(self) -> list[TreeNode]:
        return [n for n in self.nodes() if n.level == "leaf"]

    def mids(self) -> list[TreeNode]:
        return [n for n in self.nodes() if n.level == "mid"]


def erase_except(image: np.ndarray, components: list[Component], keep: tuple[int, ...]) -> np.ndarray:
    """Copy of the sketch with every component outside ``keep`` painted over."""
    out = image.copy()
    keep_set = set(keep)
    for comp in components:
        if comp.comp_id in keep_set:
            continue
        x0, y0, x1, y1 = comp.bbox
        view = out[y0:y1, x0:x1]
        view[comp.mask] = BACKGROUND
    return out


def _full_roi(image: np.ndarray) -> tuple[int, int, int, int]:
    return (0, 0, image.shape[1], image.shape[0])


def _bbox_union(boxes) -> tuple[int, int, int, int]:
    xs0, ys0, xs1, ys1 = zip(*boxes)
    return (min(xs0), min(ys0), max(xs1), max(ys1))


@dataclass
class Decomposition:
    image: np.ndarray
    components: list[Component]
    pairs: list[BoundaryPair]
    waypoints: dict[str, list[Waypoint]]
    fixture_id: str = ""

    @property
    def users(self) -> list[str]:
        return sorted(self.waypoints)

    def waypoint_list(self) -> list[Waypoint]:
        out = []
        for user in self.users:
            out.extend(self.waypoints[user])
        return out

    def stats(self) -> dict:
        lane_counts = [p.region_count() for p in self.pairs]
        W = len(self.waypoint_list())
        V = len(self.users)
        return {"R": len(self.pairs), "regions": lane_counts, "W": W, "V": V}


def decompose(
    image: np.ndarray,
    gateway: Gateway,
    fixture_id: str = "",
    order_hints: dict[str, list[int]] | None = None,
) -> Decomposition:
    components = extract_components(image)
    classify_components(components, image, gateway, fixture_id)
    pairs = pair_road_boundaries(components)
    waypoints = build_waypoints(components, pairs, order_hints)
    return Decomposition(image, components, pairs, waypoints, fixture_id)


def _node(level, image, comps, keep, roi, prompt_name, ctx) -> TreeNode:
    rendered = erase_except(image, comps, tuple(keep))
    return TreeNode(
        level=level,
        image=rendered,
        roi=roi,
        prompt=prompt_text(prompt_name),
        context=ctx,
        kept=tuple(sorted(keep)),
    )


def _pair_ctx(dec: Decomposition, pair: BoundaryPair) -> dict:
    return {
        "pair_id": pair.pair_id,
        "center": [round(pair.center[0], 1), round(pair.center[1], 1)],
        "outward_deg": round(math.degrees(pair.outward_angle or 0.0), 1),
    }


def build_tree(dec: Decomposition, kind: str) -> VisualTree:
    if kind not in TREE_KINDS:
        raise SketchStructureError(f"unknown tree kind {kind!r}")
    if not dec.pairs and kind != "user_behavior_pure":
        raise SketchStructureError("no road detected: cannot build tree")
    needs_users = kind in ("user_location", "user_behavior_adjacent", "user_behavior_pure")
    if needs_users and not dec.users:
        raise EmptyTreeError(f"tree {kind!r} needs road users, sketch has none")

    builder = {
        "road_identification": _build_road_tree,
        "lane_identification": _build_lane_tree,
        "user_location": _build_location_tree,
        "user_behavior_adjacent": _build_behavior_adjacent_tree,
        "user_behavior_pure": _build_behavior_pure_tree,
    }[kind]
    return builder(dec)


def _base_ctx(dec: Decomposition, tree: str, level: str, extra: dict | None = None) -> dict:
    ctx = {"fixture_id": dec.fixture_id, "tree": tree, "level": level}
    if extra:
        ctx.update(extra)
    return ctx


def _build_road_tree(dec: Decomposition) -> VisualTree:
    tree = "road_identification"
    all_edges = [c.comp_id for c in dec.components if c.label == "road_edge"]
    root = _node(
        "root", dec.image, dec.components, all_edges, _full_roi(dec.image),
        "road_root", _base_ctx(dec, tree, "root"),
    )
    for pair in dec.pairs:
        keep = [e.comp_id for e in pair.edges()]
        roi = _bbox_union([e.bbox for e in pair.edges()])
        ctx = _base_ctx(dec, tree, "leaf", _pair_ctx(dec, pair))
        root.children.append(_node("leaf", dec.image, dec.components, keep, roi, "road_leaf", ctx))
    return VisualTree(tree, root)


def _build_lane_tree(dec: Decomposition) -> VisualTree:
    tree = "lane_identification"
    skeleton = [c.comp_id for c in dec.components if c.label in ("road_edge", "lane_edge")]
    root = _node(
        "root", dec.image, dec.components, skeleton, _full_roi(dec.image),
        "lane_root", _base_ctx(dec, tree, "root"),
    )
    for pair in dec.pairs:
        keep = [e.comp_id for e in pair.edges()] + [l.comp_id for l in pair.lane_edges]
        roi = _bbox_union([dec.components[c].bbox for c in keep])
        mid_ctx = _base_ctx(dec, tree, "mid", _pair_ctx(dec, pair))
        mid = _node("mid", dec.image, dec.components, keep, roi, "lane_mid", mid_ctx)
        boxes = region_boxes(pair)
        for idx in range(pair.region_count()):
            center = region_center(pair, idx) if idx < len(boxes) else pair.center
            ctx = _base_ctx(dec, tree, "leaf", _pair_ctx(dec, pair))
            ctx.update({
                "region_index": idx,
                "region_center": [round(center[0], 1), round(center[1], 1)],
            })
            roi_leaf = boxes[idx] if idx < len(boxes) else mid.roi
            # Lane regions render empty: the open band between two separators.
            mid.children.append(
                _node("leaf", dec.image, dec.components, [], roi_leaf, "lane_leaf", ctx)
            )
        root.children.append(mid)
    return VisualTree(tree, root)


def _user_scope_ids(dec: Decomposition) -> list[int]:
    return [c.comp_id for c in dec.components if c.label in ("road_edge", "lane_edge", "road_user")]


def _location_mid(dec: Decomposition, wp: Waypoint, tree: str) -> TreeNode:
    pair = wp.pair
    keep = [wp.component.comp_id]
    boxes = []
    if pair is not None:
        keep += [e.comp_id for e in pair.edges()] + [l.comp_id for l in pair.lane_edges]
        boxes = [dec.components[c].bbox for c in keep]
    roi = _bbox_union(boxes) if boxes else wp.component.bbox
    ctx = _base_ctx(dec, tree, "mid", {
        "user_id": wp.user_id,
        "waypoint_order": wp.order,
        "point": [round(wp.position[0], 1), round(wp.position[1], 1)],
    })
    if pair is not None:
        ctx.update(_pair_ctx(dec, pair))
    return _node("mid", dec.image, dec.components, keep, roi, "location_mid", ctx)


def _region_leaves(dec: Decomposition, parent: TreeNode, pair: BoundaryPair | None,
                   members: list[Component], tree: str, extra: dict) -> None:
    if pair is None:
        return
    boxes = region_boxes(pair)
    for idx in range(pair.region_count()):
        inside = [c.comp_id for c in members if component_region_index(pair, c) == idx]
        center = region_center(pair, idx)
        ctx = _base_ctx(dec, tree, "leaf", _pair_ctx(dec, pair))
        ctx.update(extra)
        ctx.update({
            "region_index": idx,
            "region_center": [round(center[0], 1), round(center[1], 1)],
        })
        roi = boxes[idx] if idx < len(boxes) else parent.roi
        parent.children.append(
            _node("leaf", dec.image, dec.components, inside, roi, "location_leaf", ctx)
        )


def _build_location_tree(dec: Decomposition) -> VisualTree:
    tree = "user_location"
    root = _node(
        "root", dec.image, dec.components, _user_scope_ids(dec), _full_roi(dec.image),
        "location_root", _base_ctx(dec, tree, "root"),
    )
    for wp in dec.waypoint_list():
        mid = _location_mid(dec, wp, tree)
        _region_leaves(dec, mid, wp.pair, [wp.component], tree,
                       {"user_id": wp.user_id, "waypoint_order": wp.order})
        root.children.append(mid)
    return VisualTree(tree, root)


def _build_behavior_adjacent_tree(dec: Decomposition) -> VisualTree:
    tree = "user_behavior_adjacent"
    root = _node(
        "root", dec.image, dec.components, _user_scope_ids(dec), _full_roi(dec.image),
        "behavior_root", _base_ctx(dec, tree, "root"),
    )
    for user in dec.users:
        seq = dec.waypoints[user]
        for first, second in zip(seq[:-1], seq[1:]):
            pair = first.pair or second.pair
            keep = [first.component.comp_id, second.component.comp_id]
            if pair is not None:
                keep += [e.comp_id for e in pair.edges()] + [l.comp_id for l in pair.lane_edges]
            roi = _bbox_union([dec.components[c].bbox for c in keep])
            ctx = _base_ctx(dec, tree, "mid", {
                "user_id": user,
                "segment": [first.order, second.order],
                "from_point": [round(first.position[0], 1), round(first.position[1], 1)],
                "to_point": [round(second.position[0], 1), round(second.position[1], 1)],
            })
            if pair is not None:
                ctx.update(_pair_ctx(dec, pair))
            mid = _node("mid", dec.image, dec.components, keep, roi, "behavior_mid", ctx)
            members = [first.component, second.component]
            _region_leaves(dec, mid, pair, members, tree,
                           {"user_id": user, "segment": [first.order, second.order]})
            root.children.append(mid)
    return VisualTree(tree, root)


def _build_behavior_pure_tree(dec: Decomposition) -> VisualTree:
    tree = "user_behavior_pure"
    user_comps = [c.comp_id for c in dec.components if c.label == "road_user"]
    root = _node(
        "root", dec.image, dec.components, user_comps, _full_roi(dec.image),
        "behavior_pure_root", _base_ctx(dec, tree, "root"),
    )
    for user in dec.users:
        keep = [wp.component.comp_id for wp in dec.waypoints[user]]
        roi = _bbox_union([dec.components[c].bbox for c in keep])
        ctx = _base_ctx(dec, tree, "leaf", {"user_id": user})
        root.children.append(
            _node("leaf", dec.image, dec.components, keep, roi, "behavior_pure_leaf", ctx)
        )
    return VisualTree(tree, root)


def build_all_trees(dec: Decomposition) -> dict[str, VisualTree]:
    """Every buildable tree; user trees are skipped on user-free sketches."""
    trees: dict[str, VisualTree] = {}
    for kind in TREE_KINDS:
        try:
            trees[kind] = build_tree(dec, kind)
        except EmptyTreeError:
            continue
    return trees


def dump_tree_images(tree: VisualTree, outdir) -> list[str]:
    """Write every node image as PNG; returns the written paths."""
    from pathlib import Path

    from PIL import Image

    outdir = Path(outdir) / tree.kind
    outdir.mkdir(parents=True, exist_ok=True)
    written = []
    counters = {"root": 0, "mid": 0, "leaf": 0}
    for node in tree.root.walk():
        idx = counters[node.level]
        counters[node.level] += 1
        path = outdir / f"{node.level}_{idx:03d}.png"
        Image.fromarray(node.image).save(path)
        written.append(str(path))
    return written
