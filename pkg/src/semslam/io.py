"""On-disk formats: frame datasets (JSONL), ground-truth worlds, trajectories, maps, configs."""
from __future__ import annotations

import csv
import io as _io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .association import Detection
from .geometry import CameraIntrinsics, Pose, se3_exp, se3_log
from .semantics import ConfusionMatrix
from .supervision import EditEntry, EditLog

TRAJECTORY_HEADER = ["t", "tx", "ty", "tz", "qx", "qy", "qz", "qw"]
DEFAULT_EXTENT = 0.2  # metres per side when a detection omits its extent


class SchemaViolation(ValueError):
    def __init__(self, message: str, where: str = ""):
        super().__init__(f"{where}: {message}" if where else message)
        self.where = where


# -- small validators ----------------------------------------------------------------


def _need(d: dict, key: str, where: str):
    if not isinstance(d, dict):
        raise SchemaViolation("expected an object", where)
    if key not in d:
        raise SchemaViolation(f"missing field {key!r}", where)
    return d[key]


def _floats(value, n: int, name: str, where: str) -> np.ndarray:
    if not isinstance(value, list) or len(value) != n:
        raise SchemaViolation(f"{name} must be a list of {n} numbers", where)
    if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
        raise SchemaViolation(f"{name} must hold numbers", where)
    arr = np.array(value, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise SchemaViolation(f"{name} must be finite", where)
    return arr


def _number(value, name: str, where: str, kind=(int, float)) -> float:
    if isinstance(value, bool) or not isinstance(value, kind):
        raise SchemaViolation(f"{name} must be a number", where)
    return value


def _string(value, name: str, where: str) -> str:
    if not isinstance(value, str) or not value:
        raise SchemaViolation(f"{name} must be a non-empty string", where)
    return value


# -- frames ---------------------------------------------------------------------------


def frame_to_dict(frame) -> dict:
    k = frame.intrinsics
    dets = []
    for det in frame.detections:
        d = {
            "label": det.label,
            "conf": float(det.confidence),
            "box": [int(round(x)) for x in det.pixel_box],
            "point_cam": [float(x) for x in det.point_cam],
        }
        if det.extent is not None:
            d["extent"] = [float(x) for x in det.extent]
        dets.append(d)
    return {
        "frame": int(frame.frame_id),
        "t": float(frame.timestamp),
        "odom": {
            "dx": [float(x) for x in se3_log(frame.odometry)],
            "cov": [float(x) for x in np.asarray(frame.odom_cov).ravel()],
        },
        "intrinsics": {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy, "w": k.width, "h": k.height},
        "detections": dets,
    }


def frame_from_dict(d: dict, line: int | None = None):
    from .pipeline import Frame

    prefix = f"line {line}" if line is not None else "frame"
    if not isinstance(d, dict):
        raise SchemaViolation("expected a JSON object", prefix)
    fid = d.get("frame")
    where = f"{prefix} (frame {fid})" if isinstance(fid, int) else prefix
    fid = _number(_need(d, "frame", where), "frame", where, int)
    t = float(_number(_need(d, "t", where), "t", where))
    odom = _need(d, "odom", where)
    dx = _floats(_need(odom, "dx", where), 6, "odom.dx", where)
    cov = _floats(_need(odom, "cov", where), 36, "odom.cov", where).reshape(6, 6)
    kd = _need(d, "intrinsics", where)
    try:
        k = CameraIntrinsics(
            *(float(_number(_need(kd, f, where), f, where)) for f in ("fx", "fy", "cx", "cy")),
            int(_number(_need(kd, "w", where), "w", where, int)),
            int(_number(_need(kd, "h", where), "h", where, int)),
        )
    except ValueError as exc:
        if isinstance(exc, SchemaViolation):
            raise
        raise SchemaViolation(f"intrinsics: {exc}", where) from exc
    raw = _need(d, "detections", where)
    if not isinstance(raw, list):
        raise SchemaViolation("detections must be a list", where)
    dets = []
    for i, rd in enumerate(raw):
        w = f"{where} detection {i}"
        box = _need(rd, "box", w)
        if not isinstance(box, list) or len(box) != 4 or not all(isinstance(x, int) and not isinstance(x, bool) for x in box):
            raise SchemaViolation("box must be 4 integers", w)
        extent = rd.get("extent")
        extent = np.full(3, DEFAULT_EXTENT) if extent is None else _floats(extent, 3, "extent", w)
        try:
            dets.append(
                Detection(
                    _string(_need(rd, "label", w), "label", w),
                    float(_number(_need(rd, "conf", w), "conf", w)),
                    tuple(box),
                    _floats(_need(rd, "point_cam", w), 3, "point_cam", w),
                    extent,
                )
            )
        except SchemaViolation:
            raise
        except ValueError as exc:
            raise SchemaViolation(str(exc), w) from exc
    try:
        return Frame(fid, t, se3_exp(dx), cov, dets, k)
    except ValueError as exc:
        raise SchemaViolation(str(exc), where) from exc


def write_frames(path, frames) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for frame in frames:
            fh.write(json.dumps(frame_to_dict(frame)) + "\n")


def iter_frames(path):
    """Stream frames from a JSONL dataset, raising SchemaViolation with line/frame context."""
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaViolation(f"invalid JSON: {exc.msg}", f"line {n}") from exc
            yield frame_from_dict(d, n)


def read_frames(path) -> list:
    return list(iter_frames(path))


# -- ground-truth world ---------------------------------------------------------------


def _object_to_dict(o, active_until=None) -> dict:
    return {
        "id": o.id,
        "pos": list(map(float, o.position)),
        "extent": list(map(float, o.extent)),
        "category": o.category,
        "descriptive": o.descriptive,
        "group": o.group,
        "active_until": active_until,
    }


def _object_from_dict(d, where):
    from .simulator import WorldObject

    return WorldObject(
        int(_number(_need(d, "id", where), "id", where, int)),
        tuple(_floats(_need(d, "pos", where), 3, "pos", where).tolist()),
        tuple(_floats(_need(d, "extent", where), 3, "extent", where).tolist()),
        _string(_need(d, "category", where), "category", where),
        _string(_need(d, "descriptive", where), "descriptive", where),
        int(d.get("group", -1)),
    )


def world_to_dict(world) -> dict:
    """Initial objects plus the event list; ``active_until`` is the removal frame, if any."""
    initial = world.initial()
    removed = {e.object_id: e.frame for e in world.events if e.action == "remove"}
    events = []
    for e in world.events:
        ed = {"frame": e.frame, "action": e.action, "id": e.object_id}
        if e.action == "add":
            ed["object"] = _object_to_dict(e.obj, removed.get(e.object_id))
        events.append(ed)
    return {
        "objects": [_object_to_dict(o, removed.get(o.id)) for o in initial.objects],
        "events": events,
    }


def world_from_dict(d: dict):
    from .simulator import SceneChangeEvent, WorldGT, apply_scene_change

    objs = _need(d, "objects", "world")
    if not isinstance(objs, list):
        raise SchemaViolation("objects must be a list", "world")
    try:
        world = WorldGT([_object_from_dict(o, f"world object {i}") for i, o in enumerate(objs)])
    except SchemaViolation:
        raise
    except ValueError as exc:
        raise SchemaViolation(str(exc), "world") from exc
    events = d.get("events", [])
    if not isinstance(events, list):
        raise SchemaViolation("events must be a list", "world")
    for i, ed in enumerate(events):
        where = f"world event {i}"
        obj = _object_from_dict(ed["object"], where) if ed.get("action") == "add" and "object" in ed else None
        try:
            e = SceneChangeEvent(int(_need(ed, "frame", where)), _need(ed, "action", where), int(_need(ed, "id", where)), obj)
            world = apply_scene_change(world, e)
        except (ValueError, KeyError) as exc:
            raise SchemaViolation(str(exc), where) from exc
    # objects carrying only active_until (no explicit event) still get their removal
    listed = {(e.object_id, e.action) for e in world.events}
    for o in objs:
        until = o.get("active_until")
        if until is not None and (o["id"], "remove") not in listed:
            world = apply_scene_change(world, SceneChangeEvent(int(until), "remove", o["id"]))
    return world


def write_world(path, world) -> None:
    Path(path).write_text(json.dumps(world_to_dict(world), indent=2), encoding="utf-8")


def read_world(path):
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaViolation(f"invalid JSON: {exc.msg}", str(path)) from exc
    return world_from_dict(d)


# -- trajectories ---------------------------------------------------------------------


def trajectory_to_csv(traj) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRAJECTORY_HEADER)
    for t, pose in traj:
        q = Rotation.from_matrix(pose.rotation).as_quat()  # x, y, z, w
        if q[3] < 0:
            q = -q
        w.writerow([f"{v:.9g}" for v in (t, *pose.translation, *q)])
    return buf.getvalue()


def trajectory_from_csv(text: str, where: str = "trajectory") -> list:
    rows = list(csv.reader(_io.StringIO(text)))
    if not rows or [h.strip() for h in rows[0]] != TRAJECTORY_HEADER:
        raise SchemaViolation(f"header must be {','.join(TRAJECTORY_HEADER)}", where)
    out = []
    for n, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            vals = np.array([float(x) for x in row])
        except ValueError as exc:
            raise SchemaViolation("non-numeric value", f"{where} line {n}") from exc
        if vals.shape != (8,) or not np.all(np.isfinite(vals)):
            raise SchemaViolation("expected 8 finite values", f"{where} line {n}")
        q = vals[4:]
        if abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise SchemaViolation("quaternion is not unit length", f"{where} line {n}")
        out.append((float(vals[0]), Pose(Rotation.from_quat(q).as_matrix(), vals[1:4])))
    return out


def write_trajectory(path, traj) -> None:
    Path(path).write_text(trajectory_to_csv(traj), encoding="utf-8")


def read_trajectory(path) -> list:
    return trajectory_from_csv(Path(path).read_text(encoding="utf-8"), str(path))


# -- maps -----------------------------------------------------------------------------


@dataclass
class ExportedLandmark:
    id: int
    position: np.ndarray
    extent: np.ndarray
    label_set: list
    primary_label: str
    status: str
    observations: int

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        self.extent = np.asarray(self.extent, dtype=float).reshape(3)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "position": self.position.tolist(),
            "extent": self.extent.tolist(),
            "label_set": list(self.label_set),
            "primary_label": self.primary_label,
            "status": self.status,
            "observations": self.observations,
        }

    def __eq__(self, other):
        return isinstance(other, ExportedLandmark) and self.to_dict() == other.to_dict()


@dataclass
class MapExport:
    landmarks: list
    m: ConfusionMatrix = field(default_factory=ConfusionMatrix)
    d: ConfusionMatrix = field(default_factory=ConfusionMatrix)
    edit_log: list = field(default_factory=EditLog)

    def __post_init__(self):
        ids = [lm.id for lm in self.landmarks]
        if len(set(ids)) != len(ids):
            raise SchemaViolation("landmark ids must be unique", "map")

    def to_dict(self) -> dict:
        def matrix(m):
            return {"labels": list(m.labels), "counts": m.counts.tolist()}

        return {
            "landmarks": [lm.to_dict() for lm in self.landmarks],
            "M": matrix(self.m),
            "D": matrix(self.d),
            "edit_log": [e.to_dict() for e in self.edit_log],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MapExport":
        lms = []
        for i, ld in enumerate(_need(d, "landmarks", "map")):
            where = f"map landmark {i}"
            labels = _need(ld, "label_set", where)
            if not isinstance(labels, list) or not all(isinstance(x, str) for x in labels):
                raise SchemaViolation("label_set must be a list of strings", where)
            lms.append(
                ExportedLandmark(
                    int(_number(_need(ld, "id", where), "id", where, int)),
                    _floats(_need(ld, "position", where), 3, "position", where),
                    _floats(_need(ld, "extent", where), 3, "extent", where),
                    labels,
                    _string(_need(ld, "primary_label", where), "primary_label", where),
                    _string(_need(ld, "status", where), "status", where),
                    int(_number(_need(ld, "observations", where), "observations", where, int)),
                )
            )

        def matrix(name):
            md = d.get(name, {"labels": [], "counts": []})
            labels, counts = _need(md, "labels", f"map {name}"), _need(md, "counts", f"map {name}")
            if len(counts) != len(labels) or any(len(row) != len(labels) for row in counts):
                raise SchemaViolation("matrix must be square and match its labels", f"map {name}")
            try:
                return ConfusionMatrix.from_dict({"labels": labels, "counts": counts or np.zeros((0, 0))})
            except ValueError as exc:
                raise SchemaViolation(str(exc), f"map {name}") from exc

        log = EditLog(EditEntry.from_dict(e) for e in d.get("edit_log", []))
        return cls(lms, matrix("M"), matrix("D"), log)

    def __eq__(self, other):
        return (
            isinstance(other, MapExport)
            and self.landmarks == other.landmarks
            and self.m == other.m
            and self.d == other.d
            and [e.to_dict() for e in self.edit_log] == [e.to_dict() for e in other.edit_log]
        )


def write_map(path, m: MapExport) -> None:
    Path(path).write_text(json.dumps(m.to_dict(), indent=2), encoding="utf-8")


def read_map(path) -> MapExport:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaViolation(f"invalid JSON: {exc.msg}", str(path)) from exc
    return MapExport.from_dict(d)


def write_edit_log(path, log) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in log:
            fh.write(json.dumps(e.to_dict()) + "\n")


# -- configs --------------------------------------------------------------------------


def read_config(path):
    from .pipeline import PipelineConfig

    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaViolation(f"invalid JSON: {exc.msg}", str(path)) from exc
    if not isinstance(d, dict):
        raise SchemaViolation("config must be a JSON object", str(path))
    return PipelineConfig.from_dict(d)
