"""Stage orchestration: each stage reads the previous stage's artifact and
writes its own under ``<out_dir>/<report_id>/``, so any stage can rerun alone."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import compose, interpret, metrics, optimize, reports, roads, simulate
from .config import PipelineConfig
from .errors import Crash2SceneError, StageError
from .gateway import Gateway, OracleNoise, ScriptedOracle

STAGES = ("ingest", "interpret", "build-road", "compose", "optimize",
          "simulate", "evaluate")


def make_gateway(cfg: PipelineConfig, noise: OracleNoise | None = None) -> Gateway:
    oracle = None
    if cfg.provider == "oracle":
        if cfg.oracle_book:
            oracle = ScriptedOracle.from_file(cfg.oracle_book, noise=noise)
        else:
            oracle = ScriptedOracle(noise=noise)
    return Gateway.from_env(
        provider=cfg.provider, endpoint=cfg.endpoint, api_key=cfg.api_key,
        cache_dir=cfg.cache_dir or None, oracle=oracle)


def bundle_dir(cfg: PipelineConfig, report_id: str) -> Path:
    root = Path(cfg.out_dir) / report_id
    root.mkdir(parents=True, exist_ok=True)
    return root


def _write(path: Path, text: str) -> Path:
    path.write_text(text)
    return path


def _read_json(root: Path, name: str, needed_by: str, producer: str) -> dict:
    path = root / name
    if not path.exists():
        raise StageError(needed_by, producer)
    return json.loads(path.read_text())


def _audit(root: Path, stage: str, status: str, t0: float, **extra) -> None:
    entry = {"stage": stage, "status": status,
             "elapsed_s": round(time.perf_counter() - t0, 3)}
    entry.update(extra)
    with open(root / "audit.jsonl", "a") as fh:
        fh.write(json.dumps(entry, sort_keys=True) + "\n")


# --- layout serialization -----------------------------------------------------


def layout_to_dict(spec: roads.RoadLayoutSpec) -> dict:
    return {
        "category": spec.category,
        "topology": spec.topology,
        "ramp_kind": spec.ramp_kind,
        "ramp_side": spec.ramp_side,
        "ramp_curvature": spec.ramp_curvature,
        "lane_width": spec.lane_width,
        "road_length": spec.road_length,
        "roads": [
            {"key": r.key, "left": r.left, "right": r.right,
             "angle": r.angle, "curvature": r.curvature}
            for r in spec.roads
        ],
    }


def layout_from_dict(d: dict) -> roads.RoadLayoutSpec:
    return roads.RoadLayoutSpec(
        category=d["category"],
        roads=[roads.RoadSpec(r["key"], r["left"], r["right"],
                              angle=r.get("angle"),
                              curvature=r.get("curvature", 0.0))
               for r in d["roads"]],
        topology=d.get("topology"),
        ramp_kind=d.get("ramp_kind"),
        ramp_side=d.get("ramp_side"),
        ramp_curvature=d.get("ramp_curvature", 0.0),
        lane_width=d.get("lane_width", 3.5),
        road_length=d.get("road_length", 200.0),
    )


# --- stages ---------------------------------------------------------------------


def stage_ingest(report_dir: str | Path, cfg: PipelineConfig) -> Path:
    t0 = time.perf_counter()
    report = reports.load_report(report_dir)
    root = bundle_dir(cfg, report.report_id)
    summary = reports.summarize_metadata(report.metadata)
    from PIL import Image

    Image.fromarray(report.sketch).save(root / "sketch.png")
    _write(root / "ingest.json", json.dumps({
        "report_id": report.report_id,
        "narrative": report.narrative,
        "metadata": report.metadata,
        "metadata_text": summary.rendered_text,
        "speed_limit_mps": summary.speed_limit_mps,
        "queues_hint": [list(g) for g in summary.same_origin_groups],
    }, indent=1, sort_keys=True))
    _audit(root, "ingest", "ok", t0, source=str(report.source))
    return root


def stage_interpret(root: Path, cfg: PipelineConfig, gateway: Gateway) -> Path:
    t0 = time.perf_counter()
    ing = _read_json(root, "ingest.json", "interpret", "ingest")
    sketch_path = root / "sketch.png"
    if not sketch_path.exists():
        raise StageError("interpret", "ingest")
    from PIL import Image

    with Image.open(sketch_path) as im:
        image = np.asarray(im.convert("L"))
    result = interpret.interpret_sketch(
        image, gateway,
        fixture_id=ing["report_id"],
        narrative=ing["narrative"],
        metadata_text=ing.get("metadata_text", ""),
        samples_per_node=cfg.samples_per_node,
    )
    if result.description is None:
        raise StageError("interpret", message="stage interpret produced no scene description")
    desc = result.description
    payload = {
        "layout": layout_to_dict(desc.layout_spec),
        "users": desc.users,
        "events": desc.events,
        "queues": [list(q) for q in desc.queues],
        "tree_nodes": {kind: len(tree.nodes()) for kind, tree in result.trees.items()},
        "audit": desc.audit,
    }
    _write(root / "interpret.json", json.dumps(payload, indent=1, sort_keys=True))
    _audit(root, "interpret", "ok", t0)
    return root


def stage_build_road(root: Path, cfg: PipelineConfig) -> Path:
    t0 = time.perf_counter()
    data = _read_json(root, "interpret.json", "build-road", "interpret")
    layout = layout_from_dict(data["layout"])
    geometry = roads.build_geometry(layout)
    _write(root / f"{root.name}.xodr", roads.emit_opendrive(geometry, name=root.name))
    _audit(root, "build-road", "ok", t0,
           roads=len(geometry.roads), junctions=len(geometry.junctions))
    return root


def stage_compose(root: Path, cfg: PipelineConfig) -> Path:
    t0 = time.perf_counter()
    data = _read_json(root, "interpret.json", "compose", "interpret")
    ing = _read_json(root, "ingest.json", "compose", "ingest")
    layout = layout_from_dict(data["layout"])
    desc = compose.SemanticDescription.from_dict({
        "users": data["users"],
        "events": data["events"],
        "queues": data["queues"],
        "speed_limit": ing.get("speed_limit_mps"),
    })
    catalog = compose.load_catalog(cfg.elements_path or None)
    rules = compose.load_rules(cfg.rules_path or None)
    template = compose.select_elements(desc, layout, catalog, rules)
    _write(root / "template.json", compose.template_to_json(template))
    geometry = roads.build_geometry(layout)
    mid = {p.name: (p.lower + p.upper) / 2.0 for p in template.placeholders}
    _write(root / f"{root.name}.xosc", compose.instantiate(template, mid, geometry))
    _audit(root, "compose", "ok", t0,
           elements=len(template.instances), placeholders=len(template.placeholders))
    return root


def _load_template(root: Path, stage: str, cfg: PipelineConfig) -> compose.ScenarioTemplate:
    path = root / "template.json"
    if not path.exists():
        raise StageError(stage, "compose")
    catalog = compose.load_catalog(cfg.elements_path or None)
    return compose.template_from_json(path.read_text(), catalog)


def _load_geometry(root: Path, stage: str) -> roads.RoadGeometry:
    path = root / f"{root.name}.xodr"
    if not path.exists():
        raise StageError(stage, "build-road")
    return roads.parse_opendrive(path.read_text())


def stage_optimize(root: Path, cfg: PipelineConfig) -> Path:
    t0 = time.perf_counter()
    template = _load_template(root, "optimize", cfg)
    data = _read_json(root, "interpret.json", "optimize", "interpret")
    geometry = roads.build_geometry(layout_from_dict(data["layout"]))
    best, report, history = optimize.optimize(template, None, geometry, cfg.ga)
    with open(root / "ga_log.jsonl", "w") as fh:
        for entry in history:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    _write(root / "params.json", json.dumps(
        {"params": best, "report": asdict(report)}, indent=1, sort_keys=True))
    _write(root / f"{root.name}.optimized.xosc",
           compose.instantiate(template, best, geometry))
    _audit(root, "optimize", "ok", t0, best_total=report.total,
           generations=len(history))
    return root


def stage_simulate(root: Path, cfg: PipelineConfig) -> Path:
    t0 = time.perf_counter()
    xosc = root / f"{root.name}.optimized.xosc"
    if not xosc.exists():
        xosc = root / f"{root.name}.xosc"
    if not xosc.exists():
        raise StageError("simulate", "compose")
    geometry = _load_geometry(root, "simulate")
    trace = simulate.run(xosc.read_text(), geometry,
                         horizon=cfg.horizon, dt=cfg.dt)
    _write(root / "trace.csv", simulate.trace_to_csv(trace))
    _write(root / "trace.svg", simulate.render_trace_svg(geometry, trace))
    payload = {
        "collisions": [
            {"pair": list(ev.pair), "time": ev.time,
             "location": list(ev.location), "postures": list(ev.postures)}
            for ev in trace.collisions
        ],
        "min_distance": {f"{a}|{b}": d for (a, b), d in sorted(trace.min_distance.items())},
        "actors": trace.actors,
    }
    _write(root / "sim.json", json.dumps(payload, indent=1, sort_keys=True))
    _audit(root, "simulate", "ok", t0, collisions=len(trace.collisions))
    return root


def _initial_queue_order(trace: simulate.SimTrace, queue: list[str]) -> list[str]:
    """Queue members sorted front to back from their t=0 poses."""
    present = [st for st in trace.steps[0] if st.actor_id in set(queue)]
    if len(present) != len(queue):
        return []
    hx = sum(math.cos(st.heading) for st in present)
    hy = sum(math.sin(st.heading) for st in present)
    ordered = sorted(present, key=lambda st: st.x * hx + st.y * hy, reverse=True)
    return [st.actor_id for st in ordered]


def scenario_outcome(root: Path, cfg: PipelineConfig) -> metrics.ScenarioOutcome:
    template = _load_template(root, "evaluate", cfg)
    sim = _read_json(root, "sim.json", "evaluate", "simulate")
    params = _read_json(root, "params.json", "evaluate", "optimize")
    data = _read_json(root, "interpret.json", "evaluate", "interpret")
    geometry = roads.build_geometry(layout_from_dict(data["layout"]))
    xosc = root / f"{root.name}.optimized.xosc"
    trace = simulate.run(xosc.read_text(), geometry, horizon=cfg.horizon, dt=cfg.dt)
    queues = [list(q) for q in data.get("queues", [])]
    return metrics.ScenarioOutcome(
        scenario_id=root.name,
        crash_pairs=[tuple(p) for p in template.crash_pairs],
        collided_pairs=[tuple(ev["pair"]) for ev in sim["collisions"]],
        safety_term=params["report"]["safety_term"],
        expected_users=[u["name"] for u in data["users"]],
        realized_users=[a.actor_id for a in template.actors],
        expected_queues=queues,
        initial_order=[_initial_queue_order(trace, q) for q in queues],
    )


def stage_evaluate(root: Path, cfg: PipelineConfig) -> Path:
    t0 = time.perf_counter()
    out = scenario_outcome(root, cfg)
    payload = evaluate_outcomes([out])
    _write(root / "metrics.json", json.dumps(payload, indent=1, sort_keys=True))
    _audit(root, "evaluate", "ok", t0)
    return root


def evaluate_outcomes(outcomes: list[metrics.ScenarioOutcome]) -> dict:
    payload = {
        "scenarios": len(outcomes),
        "collision_rate": metrics.collision_rate(outcomes),
        "acc_road_user": metrics.acc_road_user(outcomes),
        "safety_term_max": max(o.safety_term for o in outcomes),
    }
    if any(o.expected_queues for o in outcomes):
        payload["acc_init_rel_pos"] = metrics.acc_init_rel_pos(
            [o for o in outcomes if o.expected_queues])
    return payload


# --- extra stages (not part of the default chain) -------------------------------


def stage_counterfactual(root: Path, cfg: PipelineConfig, initiator: int,
                         direction: dict[str, float]) -> Path:
    t0 = time.perf_counter()
    template = _load_template(root, "counterfactual", cfg)
    params = _read_json(root, "params.json", "counterfactual", "optimize")
    data = _read_json(root, "interpret.json", "counterfactual", "interpret")
    geometry = roads.build_geometry(layout_from_dict(data["layout"]))
    result = optimize.counterfactual_search(
        template, params["params"], geometry,
        initiator=initiator, direction=direction, config=cfg.ga)
    _write(root / "counterfactual.json", json.dumps({
        "prevented": result.prevented,
        "clearance": result.clearance,
        "params": result.values,
        "initiator": initiator,
        "direction": direction,
    }, indent=1, sort_keys=True))
    _write(root / f"{root.name}.counterfactual.xosc",
           compose.instantiate(template, result.values, geometry))
    _audit(root, "counterfactual", "ok", t0, prevented=result.prevented)
    return root


def stage_enrich_npc(root: Path, cfg: PipelineConfig, gateway: Gateway,
                     count: int) -> Path:
    t0 = time.perf_counter()
    template = _load_template(root, "enrich-npc", cfg)
    params = _read_json(root, "params.json", "enrich-npc", "optimize")
    data = _read_json(root, "interpret.json", "enrich-npc", "interpret")
    layout = layout_from_dict(data["layout"])
    geometry = roads.build_geometry(layout)
    catalog = compose.load_catalog(cfg.elements_path or None)
    enriched = compose.add_npc_slots(template, count, layout, gateway, catalog,
                                     fixture_id=root.name)
    result = optimize.optimize_npc(enriched, geometry, cfg.ga,
                                   base_params=params["params"])
    _write(root / "template_npc.json", compose.template_to_json(enriched))
    _write(root / "params_npc.json", json.dumps({
        "params": result.values,
        "safety_term": result.safety_term,
        "feasible": result.feasible,
    }, indent=1, sort_keys=True))
    _write(root / f"{root.name}.npc.xosc",
           compose.instantiate(enriched, result.values, geometry))
    _audit(root, "enrich-npc", "ok", t0, feasible=result.feasible)
    return root


def stage_render(root: Path, cfg: PipelineConfig) -> Path:
    t0 = time.perf_counter()
    geometry = _load_geometry(root, "render")
    trace_path = root / "trace.csv"
    if trace_path.exists():
        xosc = root / f"{root.name}.optimized.xosc"
        if not xosc.exists():
            xosc = root / f"{root.name}.xosc"
        trace = simulate.run(xosc.read_text(), geometry,
                             horizon=cfg.horizon, dt=cfg.dt)
        svg = simulate.render_trace_svg(geometry, trace)
    else:
        svg = roads.render_geometry_svg(geometry)
    _write(root / "trace.svg", svg)
    _audit(root, "render", "ok", t0)
    return root


# --- full chain -------------------------------------------------------------------


def run_pipeline(report_dir: str | Path, cfg: PipelineConfig,
                 gateway: Gateway | None = None) -> dict:
    """Run every stage for one report; returns a bundle summary.

    ``success`` is true iff the optimized scenario realized every declared
    crash pair in simulation.
    """
    gw = gateway or make_gateway(cfg)
    report_dir = Path(report_dir)
    current = "ingest"
    try:
        root = stage_ingest(report_dir, cfg)
        current = "interpret"
        stage_interpret(root, cfg, gw)
        current = "build-road"
        stage_build_road(root, cfg)
        current = "compose"
        stage_compose(root, cfg)
        current = "optimize"
        stage_optimize(root, cfg)
        current = "simulate"
        stage_simulate(root, cfg)
        current = "evaluate"
        stage_evaluate(root, cfg)
    except Crash2SceneError as exc:
        raise StageError(current, message=f"stage {current}: {exc}") from exc

    template = _load_template(root, "summary", cfg)
    sim = json.loads((root / "sim.json").read_text())
    collided = {frozenset(ev["pair"]) for ev in sim["collisions"]}
    success = all(frozenset(p) in collided for p in template.crash_pairs)
    return {
        "report_id": root.name,
        "root": str(root),
        "success": success,
        "artifacts": sorted(p.name for p in root.iterdir()),
    }
