"""Genetic search over scenario placeholders, NPC safety tuning, counterfactual probing."""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field

from .compose import Param, ScenarioTemplate, _slug, instantiate
from .errors import OptimizationError
from .roads import RoadGeometry, build_geometry, parse_opendrive
from .simulate import SimTrace, min_pair_distance, run

TOURNAMENT_K = 3
BLEND_ALPHA = 0.3
COUNTERFACTUAL_STEP_FRAC = 0.05
LANE_PENALTY_M = 3.5


@dataclass(frozen=True)
class FitnessReport:
    crash_term: float
    safety_term: float
    order_term: float
    constraint_term: float
    total: float


@dataclass
class GAConfig:
    population: int = 60
    generations: int = 80
    crossover_rate: float = 0.9
    mutation_rate: float = 0.15
    mutation_scale: float = 0.10
    elitism: int = 2
    seed: int = 0
    crash_weight: float = 10.0
    safety_weight: float = 1.0
    order_weight: float = 5.0
    constraint_weight: float = 5.0
    d_safe: float = 2.0
    horizon: float = 30.0
    dt: float = 0.1

    def validate(self) -> None:
        if self.population < 2:
            raise OptimizationError(f"population must be at least 2, got {self.population}")
        for name in ("crossover_rate", "mutation_rate"):
            rate = getattr(self, name)
            if not 0.0 <= rate <= 1.0:
                raise OptimizationError(f"{name} must lie in [0, 1], got {rate}")
        if self.elitism < 0 or self.elitism >= self.population:
            raise OptimizationError(
                f"elitism must lie in [0, population), got {self.elitism}")
        if self.generations < 1:
            raise OptimizationError(f"generations must be positive, got {self.generations}")


@dataclass
class NpcResult:
    values: dict[str, float]
    safety_term: float
    feasible: bool
    history: list[dict] = field(default_factory=list)


@dataclass
class CounterfactualResult:
    prevented: bool
    values: dict[str, float]
    trace: SimTrace
    clearance: float

    def __iter__(self):
        # unpacks as (values, trace) for callers that only want the outcome
        return iter((self.values, self.trace))


def _geometry(road, template: ScenarioTemplate) -> RoadGeometry:
    if road is None:
        return build_geometry(template.layout)
    if isinstance(road, RoadGeometry):
        return road
    if isinstance(road, str):
        return parse_opendrive(road)
    raise OptimizationError(f"cannot interpret road input of type {type(road).__name__}")


def _resolve(value, params: dict):
    if isinstance(value, Param):
        return params[value.name]
    return value


# --- fitness ------------------------------------------------------------------


def _along_gap(front, back, half_lengths: float) -> float:
    """Signed bumper gap from back to front, measured along back's heading."""
    dx, dy = front.x - back.x, front.y - back.y
    along = dx * math.cos(back.heading) + dy * math.sin(back.heading)
    return along - half_lengths


def _constraint_term(template: ScenarioTemplate, trace: SimTrace,
                     constraints: list[dict]) -> float:
    if not trace.steps:
        return 0.0
    first = {st.actor_id: st for st in trace.steps[0]}
    total = 0.0
    for con in constraints:
        kind = con.get("kind")
        actors = con.get("actors", [])
        threshold = float(con.get("threshold", 0.0))
        if kind == "ordering-on-road":
            for ahead, behind in zip(actors, actors[1:]):
                sa, sb = first.get(ahead), first.get(behind)
                if sa is None or sb is None:
                    continue
                halves = (trace.dims[ahead][0] + trace.dims[behind][0]) / 2.0
                gap = _along_gap(sa, sb, halves)
                total += max(0.0, threshold - gap)
        elif kind == "min-initial-gap":
            a, b = actors[0], actors[1]
            if a in trace.actors and b in trace.actors:
                sub = SimTrace(trace.dt, trace.actors, trace.dims, trace.steps[:1])
                total += max(0.0, threshold - min_pair_distance(sub, a, b))
        elif kind == "lane-validity":
            specs = {r.key: r for r in template.layout.roads}
            for name in actors:
                try:
                    actor = template.actor(name)
                except KeyError:
                    continue
                spec = specs.get(actor.road)
                if spec is None:
                    continue
                if actor.lane == 0 or not -spec.right <= actor.lane <= spec.left:
                    total += LANE_PENALTY_M
        else:
            raise OptimizationError(f"unknown constraint kind {kind!r}")
    return total


def _score(template: ScenarioTemplate, trace: SimTrace, cfg: GAConfig,
           constraints: list[dict]) -> FitnessReport:
    crash = sum(min_pair_distance(trace, a, b) for a, b in template.crash_pairs)
    safety = sum(max(0.0, cfg.d_safe - min_pair_distance(trace, a, b))
                 for a, b in template.non_collision_pairs)
    times = {frozenset(ev.pair): ev.time for ev in trace.collisions}
    pair_by_event = {
        inst.event_index: frozenset(inst.actors[:2])
        for inst in template.instances
        if inst.role == "crash" and inst.event_index is not None and len(inst.actors) >= 2
    }
    order = 0
    for i, j in template.event_order:
        ti = times.get(pair_by_event.get(i, frozenset()))
        tj = times.get(pair_by_event.get(j, frozenset()))
        if ti is not None and tj is not None and ti > tj:
            order += 1
    constraint = _constraint_term(template, trace, constraints)
    total = (cfg.crash_weight * crash + cfg.safety_weight * safety
             + cfg.order_weight * order + cfg.constraint_weight * constraint)
    return FitnessReport(crash, safety, float(order), constraint, total)


def evaluate_fitness(template: ScenarioTemplate, params: dict, road=None,
                     config: GAConfig | None = None,
                     constraints: list[dict] | None = None) -> FitnessReport:
    cfg = config or GAConfig()
    geo = _geometry(road, template)
    cons = template.constraints if constraints is None else constraints
    xml = instantiate(template, params, geo)
    trace = run(xml, geo, horizon=cfg.horizon, dt=cfg.dt)
    return _score(template, trace, cfg, cons)


# --- genetic search -------------------------------------------------------------


def _repair(template: ScenarioTemplate, names: list[str], values: list[float],
            bounds: dict[str, tuple[float, float]], constraints: list[dict]) -> tuple:
    """Push tunable start positions apart until initial-gap constraints hold."""
    params = dict(zip(names, values))
    start_params = {}
    for actor in template.actors:
        if isinstance(actor.start_s, Param) and actor.start_s.name in params:
            start_params[actor.actor_id] = actor
    for con in constraints:
        if con.get("kind") not in ("ordering-on-road", "min-initial-gap"):
            continue
        actors = con.get("actors", [])
        threshold = float(con.get("threshold", 0.0))
        for ahead_id, behind_id in zip(actors, actors[1:]):
            mover = start_params.get(behind_id)
            if mover is None:
                continue
            try:
                ahead = template.actor(ahead_id)
            except KeyError:
                continue
            if ahead.road != mover.road or ahead.lane != mover.lane:
                continue
            s_ahead = _resolve(ahead.start_s, params)
            halves = (ahead.length + mover.length) / 2.0
            direction = -1.0 if mover.lane > 0 else 1.0
            want = s_ahead - direction * (threshold + halves)
            name = mover.start_s.name
            lo, hi = bounds[name]
            current = params[name]
            gap = (s_ahead - current) * direction - halves
            if gap < threshold:
                params[name] = min(max(want, lo), hi)
    return tuple(params[n] for n in names)


def _clip(value: float, lo: float, hi: float) -> float:
    return min(max(value, lo), hi)


def optimize(template: ScenarioTemplate, constraints: list[dict] | None = None,
             road=None, config: GAConfig | None = None):
    """Seeded GA over the template placeholders.

    Returns (best parameter map, its FitnessReport, per-generation history).
    History entries carry the best total so far plus its term breakdown,
    so the sequence of best_total values is non-increasing.
    """
    cfg = config or GAConfig()
    cfg.validate()
    geo = _geometry(road, template)
    cons = template.constraints if constraints is None else constraints
    names = [p.name for p in template.placeholders]
    bounds = {p.name: (p.lower, p.upper) for p in template.placeholders}

    cache: dict[tuple, FitnessReport] = {}

    def fitness(vec: tuple) -> FitnessReport:
        got = cache.get(vec)
        if got is None:
            got = evaluate_fitness(template, dict(zip(names, vec)), geo, cfg, cons)
            cache[vec] = got
        return got

    if not names:
        report = fitness(())
        return {}, report, [_history_entry(0, report)]

    rng = random.Random(cfg.seed)
    pop = [_repair(template, names,
                   [rng.uniform(*bounds[n]) for n in names], bounds, cons)
           for _ in range(cfg.population)]

    best_vec: tuple | None = None
    best_rep: FitnessReport | None = None
    history: list[dict] = []

    for gen in range(cfg.generations):
        scored = []
        for ind in pop:
            rep = fitness(ind)
            scored.append((rep.total, ind, rep))
            if best_rep is None or rep.total < best_rep.total:
                best_vec, best_rep = ind, rep
        history.append(_history_entry(gen, best_rep))
        if best_rep.total == 0.0:
            break
        scored.sort(key=lambda item: item[0])

        def pick() -> tuple:
            contenders = [scored[i] for i in
                          (rng.randrange(len(scored)) for _ in range(TOURNAMENT_K))]
            return min(contenders, key=lambda item: item[0])[1]

        nxt = [item[1] for item in scored[:cfg.elitism]]
        while len(nxt) < cfg.population:
            pa, pb = pick(), pick()
            if rng.random() < cfg.crossover_rate:
                child = []
                for k, name in enumerate(names):
                    lo, hi = bounds[name]
                    a, b = pa[k], pb[k]
                    span = abs(a - b)
                    low = min(a, b) - BLEND_ALPHA * span
                    high = max(a, b) + BLEND_ALPHA * span
                    child.append(_clip(rng.uniform(low, high), lo, hi))
            else:
                child = list(pa)
            for k, name in enumerate(names):
                if rng.random() < cfg.mutation_rate:
                    lo, hi = bounds[name]
                    child[k] = _clip(child[k] + rng.gauss(0.0, cfg.mutation_scale * (hi - lo)),
                                     lo, hi)
            nxt.append(_repair(template, names, child, bounds, cons))
        pop = nxt

    return dict(zip(names, best_vec)), best_rep, history


def _history_entry(gen: int, report: FitnessReport) -> dict:
    return {
        "gen": gen,
        "best_total": report.total,
        "crash_term": report.crash_term,
        "safety_term": report.safety_term,
        "order_term": report.order_term,
        "constraint_term": report.constraint_term,
    }


# --- NPC tuning ------------------------------------------------------------------


def optimize_npc(template: ScenarioTemplate, road=None,
                 config: GAConfig | None = None,
                 base_params: dict | None = None) -> NpcResult:
    """Tune NPC placeholders so every (NPC, other) pair keeps a safe distance.

    Base placeholders stay frozen at base_params; the declared crash pairs
    must still collide afterwards, which is asserted on the best individual.
    """
    cfg = config or GAConfig()
    cfg.validate()
    geo = _geometry(road, template)
    npc_names = [p.name for p in template.placeholders if p.npc]
    if not npc_names:
        raise OptimizationError("template has no NPC placeholders to optimize")
    base = dict(base_params or {})
    missing = [p.name for p in template.placeholders
               if not p.npc and p.name not in base]
    if missing:
        raise OptimizationError(
            f"base parameter values missing for {', '.join(sorted(missing))}")
    bounds = {p.name: (p.lower, p.upper) for p in template.placeholders if p.npc}
    npc_ids = {a.actor_id for a in template.actors if a.npc}
    pairs = [(a, b) for a, b in template.non_collision_pairs
             if a in npc_ids or b in npc_ids]

    cache: dict[tuple, tuple[float, SimTrace]] = {}

    def safety(vec: tuple) -> tuple[float, SimTrace]:
        got = cache.get(vec)
        if got is None:
            params = dict(base)
            params.update(zip(npc_names, vec))
            xml = instantiate(template, params, geo)
            trace = run(xml, geo, horizon=cfg.horizon, dt=cfg.dt)
            term = sum(max(0.0, cfg.d_safe - min_pair_distance(trace, a, b))
                       for a, b in pairs)
            got = (term, trace)
            cache[vec] = got
        return got

    rng = random.Random(cfg.seed)
    pop = [tuple(rng.uniform(*bounds[n]) for n in npc_names)
           for _ in range(cfg.population)]
    best_vec: tuple | None = None
    best_term = math.inf
    best_trace: SimTrace | None = None
    history: list[dict] = []

    for gen in range(cfg.generations):
        scored = []
        for ind in pop:
            term, trace = safety(ind)
            scored.append((term, ind))
            if term < best_term:
                best_vec, best_term, best_trace = ind, term, trace
        history.append({"gen": gen, "best_total": best_term})
        if best_term == 0.0:
            break
        scored.sort(key=lambda item: item[0])

        def pick() -> tuple:
            contenders = [scored[i] for i in
                          (rng.randrange(len(scored)) for _ in range(TOURNAMENT_K))]
            return min(contenders, key=lambda item: item[0])[1]

        nxt = [item[1] for item in scored[:cfg.elitism]]
        while len(nxt) < cfg.population:
            pa, pb = pick(), pick()
            child = []
            for k, name in enumerate(npc_names):
                lo, hi = bounds[name]
                if rng.random() < cfg.crossover_rate:
                    span = abs(pa[k] - pb[k])
                    value = rng.uniform(min(pa[k], pb[k]) - BLEND_ALPHA * span,
                                        max(pa[k], pb[k]) + BLEND_ALPHA * span)
                else:
                    value = pa[k]
                if rng.random() < cfg.mutation_rate:
                    value += rng.gauss(0.0, cfg.mutation_scale * (hi - lo))
                child.append(_clip(value, lo, hi))
            nxt.append(tuple(child))
        pop = nxt

    collided = {frozenset(ev.pair) for ev in best_trace.collisions}
    broken = [pair for pair in template.crash_pairs if frozenset(pair) not in collided]
    if broken:
        raise OptimizationError(
            f"NPC placement broke scripted crash pairs: {broken}")
    values = dict(base)
    values.update(zip(npc_names, best_vec))
    return NpcResult(values, best_term, best_term == 0.0, history)


# --- counterfactual probing -------------------------------------------------------


def counterfactual_search(template: ScenarioTemplate, params: dict, road=None,
                          initiator: int = 0, direction: dict | None = None,
                          config: GAConfig | None = None) -> CounterfactualResult:
    """Step the initiator element's parameters along sign hints until no crash.

    direction maps parameter name to +1/-1. Steps grow geometrically
    (5 %, 10 %, 20 % ... of each bound range) until every crash pair clears
    d_safe or all hinted parameters sit at their bounds. A bound hit without
    prevention is an ordinary result with prevented=False, carrying the
    closest-approach trace seen.
    """
    cfg = config or GAConfig()
    geo = _geometry(road, template)
    if not template.crash_pairs:
        raise OptimizationError("scenario declares no crash pairs to prevent")
    if not 0 <= initiator < len(template.instances):
        raise OptimizationError(
            f"initiator index {initiator} outside instances 0..{len(template.instances) - 1}")
    hints = dict(direction or {})
    if not hints:
        raise OptimizationError("direction hints are empty; nothing to adjust")
    inst = template.instances[initiator]
    # an element's adjustable knobs: its own bound params plus the per-actor
    # placeholders (init speed and the like) for the actors it drives
    tunable = {v.name for v in inst.bound.values() if isinstance(v, Param)}
    prefixes = tuple(f"{_slug(a)}_" for a in inst.actors)
    tunable.update(p.name for p in template.placeholders
                   if p.name.startswith(prefixes))
    unknown = sorted(set(hints) - tunable)
    if unknown:
        raise OptimizationError(
            f"direction names parameters not tuned by the initiator element: "
            f"{', '.join(unknown)}")
    bounds = {p.name: (p.lower, p.upper) for p in template.placeholders}

    def attempt(vec: dict) -> tuple[bool, float, SimTrace]:
        xml = instantiate(template, vec, geo)
        trace = run(xml, geo, horizon=cfg.horizon, dt=cfg.dt)
        clearance = min(min_pair_distance(trace, a, b) for a, b in template.crash_pairs)
        collided = {frozenset(ev.pair) for ev in trace.collisions}
        crashed = any(frozenset(p) in collided for p in template.crash_pairs)
        return (not crashed and clearance >= cfg.d_safe), clearance, trace

    prevented, clearance, trace = attempt(params)
    if clearance > 0.0:
        raise OptimizationError(
            "baseline scenario does not produce the crash; nothing to counteract")
    best = (clearance, dict(params), trace)

    multiplier = 1.0
    while True:
        candidate = dict(params)
        at_bound = True
        for name, sign in hints.items():
            lo, hi = bounds[name]
            step = COUNTERFACTUAL_STEP_FRAC * (hi - lo) * multiplier
            moved = _clip(params[name] + math.copysign(step, sign), lo, hi)
            if moved not in (lo, hi):
                at_bound = False
            candidate[name] = moved
        prevented, clearance, trace = attempt(candidate)
        if clearance > best[0]:
            best = (clearance, candidate, trace)
        if prevented:
            return CounterfactualResult(True, candidate, trace, clearance)
        if at_bound:
            return CounterfactualResult(False, best[1], best[2], best[0])
        multiplier *= 2.0
