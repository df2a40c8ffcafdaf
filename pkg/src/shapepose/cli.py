"""Command-line entry point: ``shapepose run|synth|eval|trace-plot``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .config import PCP_VARIANTS, load_config, parse_frames
from .io import ParseError, load_results, load_scene, trace_rows, write_scene, write_trace
from .runner import (
    EXIT_CONFIG,
    EXIT_INPUT,
    EXIT_OK,
    EXIT_RUNTIME,
    METRICS_NAME,
    RESULTS_NAME,
    SCENE_NAME,
    TRACE_NAME,
    build_scene,
    metrics_text,
    run_pipeline,
)
from .synth import ConfigError

logger = logging.getLogger("shapepose")


def _frames_arg(text: str):
    try:
        return parse_frames(text)
    except ConfigError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="shapepose", description="Multi-view multi-person 3D pose reconstruction.")
    ap.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = ap.add_subparsers(dest="verb", required=True)

    run = sub.add_parser("run", help="reconstruct poses for every frame of a scene")
    run.add_argument("--config", required=True, type=Path)
    run.add_argument("--seed", type=int)
    run.add_argument("--out-dir", type=Path)
    run.add_argument("--frames", type=_frames_arg, help="half-open frame range a..b")
    run.add_argument("--threads", type=int)

    syn = sub.add_parser("synth", help="write the config's synthetic scene to a scene file")
    syn.add_argument("--config", required=True, type=Path)
    syn.add_argument("--seed", type=int)
    syn.add_argument("--out-dir", type=Path)

    ev = sub.add_parser("eval", help="score a results file against a scene's truth")
    ev.add_argument("--results", type=Path, help=f"default: <out-dir>/{RESULTS_NAME}")
    ev.add_argument("--scene", type=Path, help=f"default: <out-dir>/{SCENE_NAME}")
    ev.add_argument("--out-dir", type=Path, default=Path("."))
    ev.add_argument("--pcp-variant", choices=PCP_VARIANTS, default="strict")

    tp = sub.add_parser("trace-plot", help="emit per-iteration energy traces as CSV")
    tp.add_argument("--results", type=Path, help=f"default: <out-dir>/{RESULTS_NAME}")
    tp.add_argument("--out-dir", type=Path, default=Path("."))
    tp.add_argument("--out", type=Path, help=f"default: <out-dir>/{TRACE_NAME}; '-' for stdout")
    return ap


def _synth(args) -> int:
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, seed=args.seed)
        if cfg.synth is None:
            raise ConfigError("synth needs a 'synth' section in the config")
        cfg = dataclasses.replace(cfg, scene=None)
        topology = cfg.load_topology()
        scene = build_scene(cfg, topology)
    except ConfigError as exc:
        logger.error("config error: %s", exc)
        return EXIT_CONFIG
    out = args.out_dir or cfg.out_dir
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / SCENE_NAME).write_text(write_scene(scene), encoding="utf-8")
    except OSError as exc:
        logger.error("runtime failure: %s", exc)
        return EXIT_RUNTIME
    return EXIT_OK


def _eval(args) -> int:
    results_path = args.results or args.out_dir / RESULTS_NAME
    scene_path = args.scene or args.out_dir / SCENE_NAME
    try:
        results = load_results(results_path)
        scene = load_scene(scene_path)
    except OSError as exc:
        logger.error("input error: %s", exc)
        return EXIT_INPUT
    except ParseError as exc:
        logger.error("input error: %s", exc)
        return EXIT_INPUT
    if scene.truth is None:
        logger.error("input error: %s has no truth block", scene_path)
        return EXIT_INPUT
    if list(scene.topology.names) != results.joint_names:
        logger.error("input error: results and scene joint names differ")
        return EXIT_INPUT
    try:
        text = metrics_text(results, scene, scene.topology, args.pcp_variant)
    except ValueError as exc:
        logger.error("input error: %s", exc)
        return EXIT_INPUT
    try:
        args.out_dir.mkdir(parents=True, exist_ok=True)
        (args.out_dir / METRICS_NAME).write_text(text, encoding="utf-8")
    except OSError as exc:
        logger.error("runtime failure: %s", exc)
        return EXIT_RUNTIME
    return EXIT_OK


def _trace_plot(args) -> int:
    results_path = args.results or args.out_dir / RESULTS_NAME
    try:
        results = load_results(results_path)
    except (OSError, ParseError) as exc:
        logger.error("input error: %s", exc)
        return EXIT_INPUT
    text = write_trace(trace_rows(results))
    if args.out is not None and str(args.out) == "-":
        sys.stdout.write(text)
        return EXIT_OK
    target = args.out or args.out_dir / TRACE_NAME
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(text, encoding="utf-8")
    except OSError as exc:
        logger.error("runtime failure: %s", exc)
        return EXIT_RUNTIME
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    ap = _parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad usage; report usage problems as config errors
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if args.verb == "run":
        return run_pipeline(args.config, args.seed, args.out_dir, args.frames, args.threads)
    if args.verb == "synth":
        return _synth(args)
    if args.verb == "eval":
        return _eval(args)
    return _trace_plot(args)


if __name__ == "__main__":
    sys.exit(main())
