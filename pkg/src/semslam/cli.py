"""``semslam`` command-line entry point: sim, run, eval."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .evaluation import LengthMismatch, MatchConfig, ape, landmark_prf
from .io import (
    SchemaViolation,
    iter_frames,
    read_config,
    read_map,
    read_trajectory,
    read_world,
    write_edit_log,
    write_frames,
    write_map,
    write_trajectory,
    write_world,
)
from .pipeline import ConfigError, PipelineConfig, SlamPipeline
from .simulator import SceneChangeEvent, ScenarioConfig, ScriptedOracle, make_scenario
from .supervision import HttpOracle

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
log = logging.getLogger("semslam")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # bad arguments are configuration errors, not runtime failures
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="semslam", description="Object-level semantic SLAM with oracle-supervised landmark refinement.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("sim", help="write a synthetic dataset directory")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--objects", type=int, default=20)
    s.add_argument("--groups", type=int, default=3)
    s.add_argument("--frames", type=int, default=48)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--remove-object", type=int, help="object id removed mid-run")
    s.add_argument("--remove-frame", type=int, help="frame of the removal (default: half the run)")

    r = sub.add_parser("run", help="run the pipeline over a frames file")
    r.add_argument("--dataset", type=Path, required=True)
    r.add_argument("--config", type=Path)
    r.add_argument("--oracle", choices=["scripted", "http", "none"])
    r.add_argument("--oracle-url")
    r.add_argument("--world", type=Path, help="ground-truth world for the scripted oracle")
    r.add_argument("--error-rate", type=float, default=0.0)
    r.add_argument("--out-map", type=Path)
    r.add_argument("--out-traj", type=Path)
    r.add_argument("--edit-log", type=Path)

    e = sub.add_parser("eval", help="score a map and trajectory")
    e.add_argument("--map", type=Path)
    e.add_argument("--world", type=Path)
    e.add_argument("--traj", type=Path)
    e.add_argument("--gt-traj", type=Path)
    e.add_argument("--match-dist", type=float, default=0.3)
    e.add_argument("--rule", choices=["exact-category", "embedding"], default="exact-category")
    e.add_argument("--tau", type=float, default=0.8)
    e.add_argument("--json", action="store_true")
    return p


def cmd_sim(args) -> int:
    events = []
    if args.remove_object is not None:
        frame = args.remove_frame if args.remove_frame is not None else args.frames // 2
        events.append(SceneChangeEvent(frame, "remove", args.remove_object))
    try:
        sc = make_scenario(
            ScenarioConfig(seed=args.seed, n_objects=args.objects, n_groups=args.groups, n_frames=args.frames, events=events)
        )
    except (ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc
    args.out.mkdir(parents=True, exist_ok=True)
    write_frames(args.out / "frames.jsonl", sc.frames())
    write_world(args.out / "world.json", sc.world)
    write_trajectory(args.out / "gt_traj.csv", sc.gt_trajectory())
    write_trajectory(args.out / "odom_traj.csv", sc.odometry_trajectory())
    print(f"wrote {sc.n_frames} frames and {len(sc.world.objects)} objects to {args.out}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = read_config(args.config) if args.config else PipelineConfig()
    if args.oracle:
        cfg = dataclasses.replace(cfg, oracle=args.oracle)
    oracle = None
    if cfg.oracle == "scripted":
        if args.world is None:
            raise ConfigError("--oracle scripted needs --world")
        oracle = ScriptedOracle(read_world(args.world), {}, args.error_rate)
    elif cfg.oracle == "http":
        if not args.oracle_url:
            raise ConfigError("--oracle http needs --oracle-url")
        oracle = HttpOracle(args.oracle_url)
    result = SlamPipeline(cfg, oracle).run(iter_frames(args.dataset))
    if args.out_map:
        write_map(args.out_map, result.to_map())
    if args.out_traj:
        write_trajectory(args.out_traj, result.trajectory)
    if args.edit_log:
        write_edit_log(args.edit_log, result.edit_log)
    print(
        f"{len(result.trajectory)} poses, {len(result.landmarks)} exported landmarks, "
        f"{len(result.edit_log.mutations)} feedback edits"
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    metrics: dict = {}
    if args.map or args.world:
        if not (args.map and args.world):
            raise ConfigError("--map and --world go together")
        m = MatchConfig(args.match_dist, args.rule, args.tau)
        metrics["landmarks"] = landmark_prf(read_map(args.map), read_world(args.world), m).to_dict()
        metrics["match"] = dataclasses.asdict(m)
    if args.traj or args.gt_traj:
        if not (args.traj and args.gt_traj):
            raise ConfigError("--traj and --gt-traj go together")
        metrics["ape"] = ape(read_trajectory(args.traj), read_trajectory(args.gt_traj)).to_dict()
    if not metrics:
        raise ConfigError("nothing to evaluate: give --map/--world and/or --traj/--gt-traj")
    if args.json:
        print(json.dumps(metrics))
    else:
        for section, values in metrics.items():
            print(f"[{section}]")
            for k, v in values.items():
                print(f"  {k}: {v:.4f}" if isinstance(v, float) else f"  {k}: {v}")
    return EXIT_OK


COMMANDS = {"sim": cmd_sim, "run": cmd_run, "eval": cmd_eval}


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (SchemaViolation, ConfigError, LengthMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # anything else is a runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
