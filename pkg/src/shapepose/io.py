"""JSON scene/results/metrics formats and the trace CSV.

All writers emit canonical JSON (sorted keys, one-space indent, trailing
newline), so ``write(parse(text)) == text`` for any file they produced.
Parsers validate every field and raise :class:`ParseError` naming the field
path (for example ``frames[2].views[0].detections[5][3]``) rather than
letting a malformed file surface as an arbitrary exception.
"""

from __future__ import annotations

import csv
import io
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .body_model import BodyParams
from .geometry import CameraView, Detection2D, LimbAffinity, PoseEstimate, SkeletonTopology, index_by_view
from .synth import FrameObservations, FrameTruth, MetricsReport, SceneTruth

SCENE_FORMAT = "shapepose-scene"
RESULTS_FORMAT = "shapepose-results"
METRICS_FORMAT = "shapepose-metrics"
FORMAT_VERSION = 1
TRACE_COLUMNS = ("frame", "instance", "n", "E2D", "Eshape", "L", "inliers")


class ParseError(ValueError):
    """A malformed input file. ``path`` locates the offending field."""

    def __init__(self, message: str, path: str = "", line: int | None = None):
        self.message = message
        self.path = path
        self.line = line
        where = path or "<document>"
        if line is not None:
            where = f"line {line}: {where}"
        super().__init__(f"{where}: {message}")


def dumps(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=False, ensure_ascii=False) + "\n"


def loads(text: str) -> Any:
    """Decode JSON. Non-finite literals decode here and are rejected by field validation."""
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, line=exc.lineno) from None
    except RecursionError:
        raise ParseError("document nests too deeply") from None


_WS = re.compile(r"[ \t\n\r]*")
_PATH_PART = re.compile(r"([A-Za-z_]\w*)|\[(\d+)\]")


def _locate(text: str, path: str) -> int:
    """Character offset of the value at ``path`` (best effort: the deepest reachable)."""
    decoder = json.JSONDecoder()
    pos = _WS.match(text, 0).end()
    try:
        for key, index in _PATH_PART.findall(path):
            if key:
                if text[pos] != "{":
                    return pos
                cur = _WS.match(text, pos + 1).end()
                while text[cur] == '"':
                    name, cur = json.decoder.scanstring(text, cur + 1)
                    cur = _WS.match(text, cur).end() + 1
                    cur = _WS.match(text, cur).end()
                    if name == key:
                        break
                    cur = _WS.match(text, decoder.raw_decode(text, cur)[1]).end()
                    if text[cur] == ",":
                        cur = _WS.match(text, cur + 1).end()
                else:
                    return pos
            else:
                if text[pos] != "[":
                    return pos
                cur = _WS.match(text, pos + 1).end()
                for _ in range(int(index)):
                    cur = _WS.match(text, decoder.raw_decode(text, cur)[1]).end()
                    if text[cur] != ",":
                        return pos
                    cur = _WS.match(text, cur + 1).end()
            pos = cur
    except (IndexError, ValueError):
        pass
    return pos


def _with_line(parse, text: str):
    """Run a document parser, adding the line number of the offending field to errors."""
    try:
        return parse(text)
    except ParseError as exc:
        if exc.line is not None:
            raise
        line = text.count("\n", 0, _locate(text, exc.path)) + 1
        raise ParseError(exc.message, exc.path, line) from None


# ---------------------------------------------------------------------------
# Field validation helpers
# ---------------------------------------------------------------------------


def _obj(value, path: str, required: Iterable[str] = (), optional: Iterable[str] = ()) -> dict:
    if not isinstance(value, dict):
        raise ParseError("expected an object", path)
    required, allowed = set(required), set(required) | set(optional)
    missing = required - set(value)
    if missing:
        raise ParseError(f"missing field {sorted(missing)[0]!r}", path)
    unknown = set(value) - allowed
    if unknown:
        raise ParseError(f"unknown field {sorted(unknown)[0]!r}", path)
    return value


def _list(value, path: str, length: int | None = None) -> list:
    if not isinstance(value, list):
        raise ParseError("expected an array", path)
    if length is not None and len(value) != length:
        raise ParseError(f"expected {length} entries, found {len(value)}", path)
    return value


def _num(value, path: str, lo: float | None = None, hi: float | None = None) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ParseError("expected a number", path)
    x = float(value)
    if not math.isfinite(x):
        raise ParseError("number is not finite", path)
    if (lo is not None and x < lo) or (hi is not None and x > hi):
        raise ParseError(f"value {x!r} outside [{lo}, {hi}]", path)
    return x


def _int(value, path: str, lo: int | None = None, hi: int | None = None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ParseError("expected an integer", path)
    if (lo is not None and value < lo) or (hi is not None and value > hi):
        raise ParseError(f"integer {value} outside [{lo}, {hi}]", path)
    return value


def _bool(value, path: str) -> bool:
    if not isinstance(value, bool):
        raise ParseError("expected true or false", path)
    return value


def _str(value, path: str) -> str:
    if not isinstance(value, str):
        raise ParseError("expected a string", path)
    return value


def _vec(value, path: str, length: int) -> list[float]:
    return [_num(v, f"{path}[{i}]") for i, v in enumerate(_list(value, path, length))]


def _header(doc, fmt: str, required: Iterable[str], optional: Iterable[str] = ()) -> dict:
    doc = _obj(doc, "", {"format", "version", *required}, optional)
    if doc["format"] != fmt:
        raise ParseError(f"expected format {fmt!r}, found {doc['format']!r}", "format")
    if _int(doc["version"], "version") != FORMAT_VERSION:
        raise ParseError(f"unsupported version {doc['version']}", "version")
    return doc


def _guard(fn, path: str, *args):
    """Run a domain constructor, turning its validation errors into ParseError."""
    try:
        return fn(*args)
    except ParseError:
        raise
    except (ValueError, TypeError) as exc:
        raise ParseError(str(exc), path) from None


def _floats(a) -> list:
    return np.asarray(a, dtype=float).tolist()


# ---------------------------------------------------------------------------
# Scene files
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class SceneFile:
    """A parsed scene: topology, cameras, per-frame observations, optional truth.

    A frame's ``affinities`` is None when none of its views carries an
    affinity list; association then falls back to limb-length checks.
    """

    topology: SkeletonTopology
    cameras: list[CameraView]
    frames: list[FrameObservations]
    truth: SceneTruth | None = None
    affinity_views: list[set[int]] = field(default_factory=list)


def scene_to_dict(scene: SceneFile) -> dict:
    cams = [
        {
            "view_id": int(c.view_id),
            "projection": _floats(c.projection.ravel()),
            "width": int(c.width),
            "height": int(c.height),
        }
        for c in scene.cameras
    ]
    frames = []
    for f, obs in enumerate(scene.frames):
        per_view = index_by_view(obs.detections)
        with_aff = scene.affinity_views[f] if f < len(scene.affinity_views) else None
        if with_aff is None:
            with_aff = {c.view_id for c in scene.cameras} if obs.affinities is not None else set()
        aff_by_view: dict[int, list] = {}
        for a in obs.affinities or []:
            aff_by_view.setdefault(a.view_id, []).append(
                [int(a.limb), int(a.parent_det), int(a.child_det), float(a.score)]
            )
        views = []
        for c in scene.cameras:
            rec = {
                "view_id": int(c.view_id),
                "detections": [
                    [int(d.part), float(d.uv[0]), float(d.uv[1]), float(d.confidence)]
                    for d in per_view.get(c.view_id, [])
                ],
            }
            if c.view_id in with_aff:
                rec["affinities"] = aff_by_view.get(c.view_id, [])
            views.append(rec)
        frames.append({"views": views})
    doc = {
        "format": SCENE_FORMAT,
        "version": FORMAT_VERSION,
        "topology": scene.topology.to_dict(),
        "cameras": cams,
        "frames": frames,
        "truth": None,
    }
    if scene.truth is not None:
        doc["truth"] = {
            "noise": {k: v for k, v in scene.truth.noise.items()},
            "frames": [
                {
                    "poses": [
                        {"joints": p.to_optional(), "params": prm.to_dict()}
                        for p, prm in zip(fr.poses, fr.params)
                    ]
                }
                for fr in scene.truth.frames
            ],
        }
    return doc


def write_scene(scene: SceneFile) -> str:
    return dumps(scene_to_dict(scene))


def _parse_topology(value, path: str) -> SkeletonTopology:
    _obj(value, path, {"names", "parent", "rest_offset"}, {"hip_index"})
    names = [_str(n, f"{path}.names[{i}]") for i, n in enumerate(_list(value["names"], f"{path}.names"))]
    n = len(names)
    parent = [_int(p, f"{path}.parent[{i}]", -1, n - 1) for i, p in enumerate(_list(value["parent"], f"{path}.parent", n))]
    offsets = [_vec(o, f"{path}.rest_offset[{i}]", 3) for i, o in enumerate(_list(value["rest_offset"], f"{path}.rest_offset", n))]
    hip = _int(value.get("hip_index", 0), f"{path}.hip_index", 0)
    return _guard(SkeletonTopology, path, tuple(names), parent, offsets, hip)


def _parse_camera(value, path: str) -> CameraView:
    _obj(value, path, {"view_id", "projection", "width", "height"})
    P = np.array(_vec(value["projection"], f"{path}.projection", 12)).reshape(3, 4)
    return _guard(
        CameraView, path, P,
        _int(value["width"], f"{path}.width", 1),
        _int(value["height"], f"{path}.height", 1),
        _int(value["view_id"], f"{path}.view_id"),
    )


def _parse_params(value, path: str, n: int) -> BodyParams:
    _obj(value, path, {"root_translation", "joint_rotation", "bone_log_scale"})
    t = _vec(value["root_translation"], f"{path}.root_translation", 3)
    rot = [_vec(r, f"{path}.joint_rotation[{i}]", 3) for i, r in enumerate(_list(value["joint_rotation"], f"{path}.joint_rotation", n))]
    beta = [_num(b, f"{path}.bone_log_scale[{i}]") for i, b in enumerate(_list(value["bone_log_scale"], f"{path}.bone_log_scale", n - 1))]
    return _guard(BodyParams, path, t, rot, beta)


def _parse_optional_joints(value, path: str, n: int) -> list:
    rows = _list(value, path, n)
    return [None if r is None else _vec(r, f"{path}[{i}]", 3) for i, r in enumerate(rows)]


def _parse_truth(value, path: str, topology: SkeletonTopology, cameras, n_frames: int) -> SceneTruth:
    _obj(value, path, {"frames"}, {"noise"})
    noise = _obj(value.get("noise", {}), f"{path}.noise", (), {"pixel_sigma", "p_miss", "p_fp", "seed"})
    clean_noise = {}
    for k, v in noise.items():
        clean_noise[k] = _int(v, f"{path}.noise.{k}") if k == "seed" else _num(v, f"{path}.noise.{k}", 0.0)
    frames_raw = _list(value["frames"], f"{path}.frames", n_frames)
    n = topology.joint_count
    frames = []
    for f, fr in enumerate(frames_raw):
        fp = f"{path}.frames[{f}]"
        _obj(fr, fp, {"poses"})
        poses, params = [], []
        for k, rec in enumerate(_list(fr["poses"], f"{fp}.poses")):
            pp = f"{fp}.poses[{k}]"
            _obj(rec, pp, {"joints", "params"})
            joints = _parse_optional_joints(rec["joints"], f"{pp}.joints", n)
            if any(j is None for j in joints):
                raise ParseError("truth poses must have every joint", f"{pp}.joints")
            poses.append(_guard(PoseEstimate, pp, np.array(joints), np.ones(n), k))
            params.append(_parse_params(rec["params"], f"{pp}.params", n))
        frames.append(FrameTruth(poses, params))
    return SceneTruth(list(cameras), frames, clean_noise)


def parse_scene(text: str) -> SceneFile:
    """Parse a scene document; errors carry the field path and its line."""
    return _with_line(_parse_scene, text)


def _parse_scene(text: str) -> SceneFile:
    doc = _header(loads(text), SCENE_FORMAT, {"topology", "cameras", "frames"}, {"truth"})
    topology = _parse_topology(doc["topology"], "topology")
    n = topology.joint_count
    n_limbs = len(topology.limbs)
    cameras = [_parse_camera(c, f"cameras[{i}]") for i, c in enumerate(_list(doc["cameras"], "cameras"))]
    ids = [c.view_id for c in cameras]
    if len(set(ids)) != len(ids):
        raise ParseError("duplicate view_id", "cameras")
    frames, affinity_views = [], []
    for f, fr in enumerate(_list(doc["frames"], "frames")):
        fp = f"frames[{f}]"
        _obj(fr, fp, {"views"})
        detections: list[Detection2D] = []
        affinities: list[LimbAffinity] = []
        seen_views: set[int] = set()
        with_aff: set[int] = set()
        for v, view in enumerate(_list(fr["views"], f"{fp}.views")):
            vp = f"{fp}.views[{v}]"
            _obj(view, vp, {"view_id", "detections"}, {"affinities"})
            vid = _int(view["view_id"], f"{vp}.view_id")
            if vid not in ids:
                raise ParseError(f"unknown view_id {vid}", f"{vp}.view_id")
            if vid in seen_views:
                raise ParseError(f"view_id {vid} listed twice", f"{vp}.view_id")
            seen_views.add(vid)
            dets = _list(view["detections"], f"{vp}.detections")
            for d, rec in enumerate(dets):
                dp = f"{vp}.detections[{d}]"
                _list(rec, dp, 4)
                part = _int(rec[0], f"{dp}[0]", 0, n - 1)
                u, w = _num(rec[1], f"{dp}[1]"), _num(rec[2], f"{dp}[2]")
                conf = _num(rec[3], f"{dp}[3]", 0.0, 1.0)
                detections.append(Detection2D(part, np.array([u, w]), conf, vid))
            if "affinities" in view:
                with_aff.add(vid)
                for a, rec in enumerate(_list(view["affinities"], f"{vp}.affinities")):
                    ap = f"{vp}.affinities[{a}]"
                    _list(rec, ap, 4)
                    limb = _int(rec[0], f"{ap}[0]", 0, n_limbs - 1)
                    pa = _int(rec[1], f"{ap}[1]", 0, len(dets) - 1)
                    ch = _int(rec[2], f"{ap}[2]", 0, len(dets) - 1)
                    score = _num(rec[3], f"{ap}[3]", 0.0, 1.0)
                    affinities.append(LimbAffinity(vid, limb, pa, ch, score))
        frames.append(FrameObservations(detections, affinities if with_aff else None))
        affinity_views.append(with_aff)
    truth = None
    if doc.get("truth") is not None:
        truth = _parse_truth(doc["truth"], "truth", topology, cameras, len(frames))
    return SceneFile(topology, cameras, frames, truth, affinity_views)


def load_scene(path: str | Path) -> SceneFile:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"not UTF-8 text: {exc.reason}") from None
    return parse_scene(text)


# ---------------------------------------------------------------------------
# Results files
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class InstanceRecord:
    instance_id: int
    pose: PoseEstimate
    initial: PoseEstimate
    infilled: np.ndarray
    params: BodyParams | None
    shape_skipped: bool
    trace: list[tuple[int, float, float, float, int]]


@dataclass(eq=False)
class FrameRecord:
    frame: int
    instances: list[InstanceRecord]
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass(eq=False)
class ResultsFile:
    joint_names: list[str]
    frames: list[FrameRecord]


def _instance_to_dict(r: InstanceRecord) -> dict:
    return {
        "instance_id": int(r.instance_id),
        "joints": r.pose.to_optional(),
        "confidence": _floats(r.pose.joint_confidence),
        "initial_joints": r.initial.to_optional(),
        "initial_confidence": _floats(r.initial.joint_confidence),
        "infilled": [bool(b) for b in r.infilled],
        "params": None if r.params is None else r.params.to_dict(),
        "shape_skipped": bool(r.shape_skipped),
        "trace": [[int(n), float(a), float(b), float(c), int(k)] for n, a, b, c, k in r.trace],
    }


def results_to_dict(results: ResultsFile) -> dict:
    return {
        "format": RESULTS_FORMAT,
        "version": FORMAT_VERSION,
        "joint_names": list(results.joint_names),
        "frames": [
            {
                "frame": int(fr.frame),
                "status": "ok" if fr.ok else "failed",
                "error": fr.error,
                "instances": [_instance_to_dict(r) for r in fr.instances],
            }
            for fr in results.frames
        ],
    }


def write_results(results: ResultsFile) -> str:
    return dumps(results_to_dict(results))


def _parse_conf(value, path: str, n: int) -> list[float]:
    return [_num(c, f"{path}[{i}]", 0.0, 1.0) for i, c in enumerate(_list(value, path, n))]


def _parse_pose(value: dict, prefix: str, path: str, n: int, instance_id: int) -> PoseEstimate:
    jp, cp = f"{path}.{prefix}joints", f"{path}.{prefix}confidence"
    X = _parse_optional_joints(value[f"{prefix}joints"], jp, n)
    w = _parse_conf(value[f"{prefix}confidence"], cp, n)
    for i, (x, c) in enumerate(zip(X, w)):
        if (x is None) != (c == 0.0):
            raise ParseError("a joint is null exactly when its confidence is 0", f"{jp}[{i}]")
    return _guard(PoseEstimate.from_optional, path, X, w, instance_id)


def _parse_instance(value, path: str, n: int) -> InstanceRecord:
    keys = {"instance_id", "joints", "confidence", "initial_joints", "initial_confidence",
            "infilled", "params", "shape_skipped", "trace"}
    _obj(value, path, keys)
    iid = _int(value["instance_id"], f"{path}.instance_id", 0)
    pose = _parse_pose(value, "", path, n, iid)
    initial = _parse_pose(value, "initial_", path, n, iid)
    infilled = np.array([_bool(b, f"{path}.infilled[{i}]") for i, b in enumerate(_list(value["infilled"], f"{path}.infilled", n))], dtype=bool)
    params = None if value["params"] is None else _parse_params(value["params"], f"{path}.params", n)
    trace = []
    for t, rec in enumerate(_list(value["trace"], f"{path}.trace")):
        tp = f"{path}.trace[{t}]"
        _list(rec, tp, 5)
        trace.append((
            _int(rec[0], f"{tp}[0]", 0),
            _num(rec[1], f"{tp}[1]", 0.0),
            _num(rec[2], f"{tp}[2]", 0.0),
            _num(rec[3], f"{tp}[3]", 0.0),
            _int(rec[4], f"{tp}[4]", 0),
        ))
    return InstanceRecord(iid, pose, initial, infilled, params, _bool(value["shape_skipped"], f"{path}.shape_skipped"), trace)


def parse_results(text: str) -> ResultsFile:
    """Parse a results document; errors carry the field path and its line."""
    return _with_line(_parse_results, text)


def _parse_results(text: str) -> ResultsFile:
    doc = _header(loads(text), RESULTS_FORMAT, {"joint_names", "frames"})
    names = [_str(s, f"joint_names[{i}]") for i, s in enumerate(_list(doc["joint_names"], "joint_names"))]
    if not names:
        raise ParseError("no joints", "joint_names")
    n = len(names)
    frames = []
    for f, fr in enumerate(_list(doc["frames"], "frames")):
        fp = f"frames[{f}]"
        _obj(fr, fp, {"frame", "status", "error", "instances"})
        status = _str(fr["status"], f"{fp}.status")
        if status not in ("ok", "failed"):
            raise ParseError(f"unknown status {status!r}", f"{fp}.status")
        error = fr["error"]
        if status == "failed":
            error = _str(error, f"{fp}.error")
        elif error is not None:
            raise ParseError("ok frames carry a null error", f"{fp}.error")
        inst = [_parse_instance(r, f"{fp}.instances[{k}]", n) for k, r in enumerate(_list(fr["instances"], f"{fp}.instances"))]
        frames.append(FrameRecord(_int(fr["frame"], f"{fp}.frame", 0), inst, error))
    return ResultsFile(names, frames)


def load_results(path: str | Path) -> ResultsFile:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"not UTF-8 text: {exc.reason}") from None
    return parse_results(text)


# ---------------------------------------------------------------------------
# Metrics and traces
# ---------------------------------------------------------------------------


def metrics_to_dict(final: MetricsReport, initial: MetricsReport, frames_evaluated: int, frames_failed: int) -> dict:
    return {
        "format": METRICS_FORMAT,
        "version": FORMAT_VERSION,
        "frames_evaluated": int(frames_evaluated),
        "frames_failed": int(frames_failed),
        "final": _plain(final.to_dict()),
        "initial": _plain(initial.to_dict()),
    }


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    return obj


def write_metrics(final: MetricsReport, initial: MetricsReport, frames_evaluated: int, frames_failed: int = 0) -> str:
    return dumps(metrics_to_dict(final, initial, frames_evaluated, frames_failed))


def trace_rows(results: ResultsFile) -> list[tuple]:
    rows = []
    for fr in results.frames:
        for inst in fr.instances:
            for n, e2d, es, total, inl in inst.trace:
                rows.append((fr.frame, inst.instance_id, n, e2d, es, total, inl))
    return rows


def write_trace(rows: Sequence[tuple]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRACE_COLUMNS)
    for r in rows:
        writer.writerow([r[0], r[1], r[2], repr(float(r[3])), repr(float(r[4])), repr(float(r[5])), r[6]])
    return buf.getvalue()
