"""Command line front: one subcommand per pipeline stage plus a full run."""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import sys
from pathlib import Path

from . import pipeline
from .config import PipelineConfig, load_config
from .errors import ConfigError, Crash2SceneError, StageError

EXIT_OK = 0
EXIT_STAGE = 2
EXIT_CONFIG = 3


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="TOML config file")
    parser.add_argument("--seed", type=int, help="seed for every stochastic stage")
    parser.add_argument("--oracle", help="scripted-oracle answer book (JSON)")
    parser.add_argument("--provider", help="model provider name (default oracle)")
    parser.add_argument("--out", help="artifact output directory")
    parser.add_argument("--jobs", type=int, help="parallel reports in run mode")


def _parse_direction(text: str) -> dict[str, float]:
    hints = {}
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        name, _, value = part.partition("=")
        if not value:
            raise ConfigError(
                f"direction entry {part!r} must look like name=+1 or name=-1")
        try:
            hints[name.strip()] = float(value)
        except ValueError as exc:
            raise ConfigError(f"direction sign {value!r} is not a number") from exc
    if not hints:
        raise ConfigError("direction is empty")
    return hints


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crash2scene",
        description="Turn crash-report sketches and narratives into "
                    "executable road and scenario files.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="full pipeline over one or more report dirs")
    run.add_argument("reports", nargs="+", help="report directories")
    run.add_argument("--stage", choices=pipeline.STAGES,
                     help="stop after this stage")
    _common(run)

    ingest = sub.add_parser("ingest", help="load a report dir into a bundle")
    ingest.add_argument("report", help="report directory")
    _common(ingest)

    for name, help_text in (
            ("interpret", "sketch + narrative to layout and description"),
            ("build-road", "layout to OpenDRIVE"),
            ("compose", "description to scenario template and XML"),
            ("optimize", "GA search over template placeholders"),
            ("simulate", "run the scenario, write trace CSV and SVG"),
            ("render", "redraw the top-down SVG plot"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("bundle", help="artifact bundle directory")
        _common(p)

    ev = sub.add_parser("evaluate", help="score one or more bundles")
    ev.add_argument("bundles", nargs="+", help="artifact bundle directories")
    _common(ev)

    cf = sub.add_parser("counterfactual",
                        help="search initiator parameters that prevent the crash")
    cf.add_argument("bundle", help="artifact bundle directory")
    cf.add_argument("--initiator", type=int, required=True,
                    help="index of the blamed element instance")
    cf.add_argument("--direction", required=True,
                    help="sign hints, e.g. 'vehicle_2_init_speed=-1'")
    _common(cf)

    npc = sub.add_parser("enrich-npc", help="add NPC actors and tune them safe")
    npc.add_argument("bundle", help="artifact bundle directory")
    npc.add_argument("--count", type=int, default=2, help="NPC vehicles to add")
    _common(npc)

    return parser


def _config_from(args: argparse.Namespace) -> PipelineConfig:
    return load_config(
        args.config,
        seed=args.seed,
        oracle_book=args.oracle,
        provider=args.provider,
        out_dir=args.out,
        jobs=args.jobs,
    )


def _run_one(report: str, cfg: PipelineConfig, stop_after: str | None) -> dict:
    if stop_after is None:
        return pipeline.run_pipeline(report, cfg)
    gw = pipeline.make_gateway(cfg)
    order = pipeline.STAGES[:pipeline.STAGES.index(stop_after) + 1]
    root = pipeline.stage_ingest(report, cfg)
    steps = {
        "interpret": lambda: pipeline.stage_interpret(root, cfg, gw),
        "build-road": lambda: pipeline.stage_build_road(root, cfg),
        "compose": lambda: pipeline.stage_compose(root, cfg),
        "optimize": lambda: pipeline.stage_optimize(root, cfg),
        "simulate": lambda: pipeline.stage_simulate(root, cfg),
        "evaluate": lambda: pipeline.stage_evaluate(root, cfg),
    }
    for stage in order[1:]:
        steps[stage]()
    return {"report_id": root.name, "root": str(root), "success": True,
            "artifacts": sorted(p.name for p in root.iterdir())}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _config_from(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        return _dispatch(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StageError, Crash2SceneError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE


def _dispatch(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    if args.command == "run":
        results = []
        if cfg.jobs > 1 and len(args.reports) > 1:
            with concurrent.futures.ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
                futures = [pool.submit(_run_one, r, cfg, args.stage)
                           for r in args.reports]
                for fut in futures:
                    results.append(fut.result())
        else:
            for report in args.reports:
                results.append(_run_one(report, cfg, args.stage))
        for res in results:
            flag = "ok" if res["success"] else "crash pairs not realized"
            print(f"{res['report_id']}: {flag} ({res['root']})")
        return EXIT_OK if all(r["success"] for r in results) else EXIT_STAGE

    if args.command == "ingest":
        root = pipeline.stage_ingest(args.report, cfg)
        print(root)
        return EXIT_OK

    if args.command == "evaluate":
        if len(args.bundles) == 1:
            root = pipeline.stage_evaluate(Path(args.bundles[0]), cfg)
            print((root / "metrics.json").read_text())
            return EXIT_OK
        outcomes = [pipeline.scenario_outcome(Path(b), cfg) for b in args.bundles]
        payload = pipeline.evaluate_outcomes(outcomes)
        out_path = Path(cfg.out_dir) / "metrics.json"
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(json.dumps(payload, indent=1, sort_keys=True))
        print(json.dumps(payload, indent=1, sort_keys=True))
        return EXIT_OK

    root = Path(args.bundle)
    if args.command == "interpret":
        pipeline.stage_interpret(root, cfg, pipeline.make_gateway(cfg))
    elif args.command == "build-road":
        pipeline.stage_build_road(root, cfg)
    elif args.command == "compose":
        pipeline.stage_compose(root, cfg)
    elif args.command == "optimize":
        pipeline.stage_optimize(root, cfg)
    elif args.command == "simulate":
        pipeline.stage_simulate(root, cfg)
    elif args.command == "render":
        pipeline.stage_render(root, cfg)
    elif args.command == "counterfactual":
        pipeline.stage_counterfactual(
            root, cfg, args.initiator, _parse_direction(args.direction))
        data = json.loads((root / "counterfactual.json").read_text())
        print("prevented" if data["prevented"] else "not prevented within bounds")
        if not data["prevented"]:
            return EXIT_STAGE
    elif args.command == "enrich-npc":
        pipeline.stage_enrich_npc(root, cfg, pipeline.make_gateway(cfg), args.count)
    else:
        raise ConfigError(f"unknown command {args.command!r}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
