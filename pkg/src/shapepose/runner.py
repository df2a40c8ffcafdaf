"""Batch driver: scene in, results/metrics/trace files out."""

from __future__ import annotations

import dataclasses
import logging
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .config import PipelineConfig, load_config
from .geometry import CameraView, SkeletonTopology
from .io import (
    FrameRecord,
    InstanceRecord,
    ParseError,
    ResultsFile,
    SceneFile,
    load_scene,
    trace_rows,
    write_metrics,
    write_results,
    write_scene,
    write_trace,
)
from .pipeline import process_frame
from .synth import ConfigError, FrameObservations, evaluate, generate_scene

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_INPUT = 2
EXIT_RUNTIME = 3

RESULTS_NAME = "results.json"
METRICS_NAME = "metrics.json"
TRACE_NAME = "trace.csv"
SCENE_NAME = "scene.json"


@dataclass(frozen=True)
class _FrameJob:
    frame: int
    observations: FrameObservations
    cameras: Sequence[CameraView]
    topology: SkeletonTopology
    config: PipelineConfig


def _run_frame(job: _FrameJob) -> FrameRecord:
    cfg = job.config
    try:
        result = process_frame(
            job.observations.detections,
            job.cameras,
            job.topology,
            cfg.proposal,
            cfg.refine,
            affinities=job.observations.affinities,
            max_pair_residual=cfg.max_pair_residual,
        )
    except Exception as exc:  # per-frame isolation: log and skip, never abort the batch
        logger.error("frame %d failed: %s", job.frame, exc)
        logger.debug("%s", traceback.format_exc())
        return FrameRecord(job.frame, [], f"{type(exc).__name__}: {exc}")
    instances = [
        InstanceRecord(
            instance_id=init.instance_id,
            pose=ref.pose,
            initial=init,
            infilled=ref.infilled,
            params=None if ref.shape_skipped else ref.params,
            shape_skipped=ref.shape_skipped,
            trace=[(t.n, t.e_2d, t.e_shape, t.total, t.inliers) for t in ref.trace],
        )
        for init, ref in zip(result.initial, result.refined)
    ]
    return FrameRecord(job.frame, instances)


def select_frames(n: int, frames: tuple[int, int | None] | None) -> range:
    if frames is None:
        return range(n)
    start, stop = frames
    return range(min(start, n), n if stop is None else min(stop, n))


def run_frames(scene: SceneFile, cfg: PipelineConfig, topology: SkeletonTopology, frame_range: range) -> list[FrameRecord]:
    """Process frames, in parallel when ``cfg.threads > 1``; output stays in frame order."""
    jobs = [_FrameJob(f, scene.frames[f], scene.cameras, topology, cfg) for f in frame_range]
    if cfg.threads <= 1 or len(jobs) <= 1:
        return [_run_frame(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(cfg.threads, len(jobs))) as pool:
        return list(pool.map(_run_frame, jobs))


def metrics_text(results: ResultsFile, scene: SceneFile, topology: SkeletonTopology, pcp_variant: str) -> str:
    """Metrics over the frames present in ``results``; failed frames count as empty predictions."""
    if scene.truth is None:
        raise ValueError("scene has no truth block")
    n_truth = len(scene.truth.frames)
    for fr in results.frames:
        if fr.frame >= n_truth:
            raise ValueError(f"results frame {fr.frame} has no truth")
    truth = [scene.truth.frames[fr.frame].poses for fr in results.frames]
    final = evaluate([[i.pose for i in fr.instances] for fr in results.frames], truth, topology, pcp_variant)
    initial = evaluate([[i.initial for i in fr.instances] for fr in results.frames], truth, topology, pcp_variant)
    failed = sum(not fr.ok for fr in results.frames)
    return write_metrics(final, initial, len(results.frames), failed)


def build_scene(cfg: PipelineConfig, topology: SkeletonTopology) -> SceneFile:
    """Load the configured scene file, or synthesize one from the ``synth`` section."""
    if cfg.scene is not None:
        try:
            return load_scene(cfg.scene)
        except OSError as exc:
            raise ParseError(f"cannot read scene {cfg.scene}: {exc.strerror}") from None
    truth, observations = generate_scene(cfg.scene_config(), topology=topology)
    return SceneFile(topology, truth.cameras, observations, truth)


def _write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def run_pipeline(
    config: str | Path | PipelineConfig,
    seed: int | None = None,
    out_dir: str | Path | None = None,
    frames: tuple[int, int | None] | None = None,
    threads: int | None = None,
) -> int:
    """Run the full pipeline and write results, trace and (with truth) metrics.

    Returns an exit code: 0 ok, 1 config error, 2 input parse error,
    3 runtime failure. Individual frame failures are logged, recorded in the
    results file and do not change the exit code.
    """
    try:
        cfg = config if isinstance(config, PipelineConfig) else load_config(config)
        overrides = {}
        if seed is not None:
            overrides["seed"] = seed
        if out_dir is not None:
            overrides["out_dir"] = Path(out_dir)
        if frames is not None:
            overrides["frames"] = frames
        if threads is not None:
            if threads < 1:
                raise ConfigError("threads must be >= 1")
            overrides["threads"] = threads
        if overrides:
            cfg = dataclasses.replace(cfg, **overrides)
        topology = cfg.load_topology()
    except ConfigError as exc:
        logger.error("config error: %s", exc)
        return EXIT_CONFIG

    try:
        scene = build_scene(cfg, topology)
    except ParseError as exc:
        logger.error("input error: %s", exc)
        return EXIT_INPUT
    except ConfigError as exc:
        logger.error("config error: %s", exc)
        return EXIT_CONFIG
    if scene.topology.names != topology.names:
        logger.error("input error: scene topology %s differs from configured topology", list(scene.topology.names))
        return EXIT_INPUT

    try:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        if cfg.scene is None:
            _write(out / SCENE_NAME, write_scene(scene))
        records = run_frames(scene, cfg, topology, select_frames(len(scene.frames), cfg.frames))
        results = ResultsFile(list(topology.names), records)
        _write(out / RESULTS_NAME, write_results(results))
        _write(out / TRACE_NAME, write_trace(trace_rows(results)))
        if scene.truth is not None:
            _write(out / METRICS_NAME, metrics_text(results, scene, topology, cfg.pcp_variant))
        failed = sum(not r.ok for r in records)
        if failed:
            logger.warning("%d of %d frames failed", failed, len(records))
    except Exception as exc:
        logger.error("runtime failure: %s", exc)
        logger.debug("%s", traceback.format_exc())
        return EXIT_RUNTIME
    return EXIT_OK
