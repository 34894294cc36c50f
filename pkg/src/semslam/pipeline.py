"""Frame-by-frame orchestration of the semantic SLAM loop.

One thread owns the factor graph. Supervision rounds are dispatched either
inline (scripted referee) or on a worker pool (HTTP), and their verdicts are
queued and applied only at frame boundaries.
"""
from __future__ import annotations

import dataclasses
import logging
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .association import AssociationConfig, Detection, associate_frame
from .geometry import CameraIntrinsics, Pose, se3_compose
from .graph import Between, FactorGraph, NoiseModel, Observation, OptimizerConfig, PriorPose
from .semantics import (
    ConfusionMatrix,
    LabelDatabase,
    Landmark,
    NGramEmbedding,
    find_duplicate_pairs,
    posterior_class_update,
    resolve_duplicates,
)
from .supervision import (
    CompositeSpec,
    EditLog,
    MalformedResponse,
    apply_feedback,
    build_composite,
    parse_class_label_gen,
    parse_landmark_eval,
    render_class_label_gen_prompt,
    render_landmark_eval_prompt,
)

log = logging.getLogger(__name__)

ORACLE_MODES = ("scripted", "http", "none")


class OutOfOrderFrame(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class Frame:
    frame_id: int
    timestamp: float
    odometry: Pose
    odom_cov: np.ndarray
    detections: list
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        self.odom_cov = np.asarray(self.odom_cov, dtype=float).reshape(6, 6)


@dataclass
class PipelineConfig:
    association: AssociationConfig = field(default_factory=AssociationConfig)
    supervision_every: int = 5
    oracle: str = "none"
    relabel_margin: float = 0.1
    duplicate_iou: float = 0.90
    duplicate_distance: float = 0.10
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    min_observations: int = 2
    measurement_sigma: float = 0.02
    prior_sigma: float = 1e-3
    max_overlays: int = 25
    default_extent: float = 0.2
    kappa: float = 1.0

    def __post_init__(self):
        if self.oracle not in ORACLE_MODES:
            raise ConfigError(f"oracle must be one of {ORACLE_MODES}, got {self.oracle!r}")
        if self.supervision_every < 1:
            raise ConfigError("supervision_every must be >= 1")
        if not 0 <= self.relabel_margin < 1:
            raise ConfigError("relabel_margin must lie in [0, 1)")
        if not 0 < self.duplicate_iou <= 1 or self.duplicate_distance <= 0:
            raise ConfigError("duplicate thresholds out of range")
        if self.min_observations < 0 or self.max_overlays < 1:
            raise ConfigError("counts must be positive")
        if min(self.measurement_sigma, self.prior_sigma, self.default_extent, self.kappa) <= 0:
            raise ConfigError("sigmas, extent and kappa must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        """Build from a JSON-shaped dict; unknown keys anywhere are errors."""
        d = dict(d)
        nested = {"association": AssociationConfig, "optimizer": OptimizerConfig}
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key, sub in nested.items():
            if key in d:
                if not isinstance(d[key], dict):
                    raise ConfigError(f"{key} must be an object")
                bad = set(d[key]) - {f.name for f in dataclasses.fields(sub)}
                if bad:
                    raise ConfigError(f"unknown {key} keys: {sorted(bad)}")
                try:
                    d[key] = sub(**d[key])
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"{key}: {exc}") from exc
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class StepReport:
    frame_id: int
    relabeled: int = 0
    assigned: int = 0
    spawned: int = 0
    rejected: int = 0
    proactive_merges: int = 0
    supervision_round: bool = False
    feedback_edits: int = 0


@dataclass
class RunResult:
    landmarks: list  # ExportedLandmark
    trajectory: list  # (timestamp, Pose)
    edit_log: EditLog
    m: ConfusionMatrix
    d: ConfusionMatrix
    reports: list
    label_db: list

    def to_map(self):
        from .io import MapExport

        return MapExport(self.landmarks, self.m, self.d, self.edit_log)


@dataclass
class _Round:
    spec: CompositeSpec
    future: Future | None = None
    result: tuple | None = None


def _query(oracle, spec: CompositeSpec):
    """Ask both roles about one composite; failures degrade to no feedback."""
    evaluation = generation = None
    text = oracle.landmark_eval(spec, render_landmark_eval_prompt(spec))
    if text is not None:
        try:
            evaluation = parse_landmark_eval(text)
        except MalformedResponse as exc:
            log.warning("frame %d: unusable LandmarkEval response: %s", spec.frame_id, exc)
    text = oracle.class_label_gen(spec, render_class_label_gen_prompt(spec))
    if text is not None:
        try:
            generation = parse_class_label_gen(text)
        except MalformedResponse as exc:
            log.warning("frame %d: unusable ClassLabelGen response: %s", spec.frame_id, exc)
    return evaluation, generation


class SlamPipeline:
    def __init__(self, cfg: PipelineConfig | None = None, oracle=None, provider=None, workers: int = 2):
        self.cfg = cfg or PipelineConfig()
        if self.cfg.oracle != "none" and oracle is None:
            raise ConfigError(f"oracle mode {self.cfg.oracle!r} needs an oracle")
        self.oracle = oracle if self.cfg.oracle != "none" else None
        self.provider = provider or NGramEmbedding()
        self.graph = FactorGraph()
        self.landmarks: dict = {}
        self.m = ConfusionMatrix(self.cfg.kappa)
        self.d = ConfusionMatrix(self.cfg.kappa)
        self.label_db = LabelDatabase()
        self.edit_log = EditLog()
        self.gamma = NoiseModel.isotropic(3, self.cfg.measurement_sigma)
        self.pose_keys: list = []
        self.timestamps: list = []
        self.reports: list = []
        self._last: Frame | None = None
        self._rounds: list[_Round] = []
        synchronous = getattr(self.oracle, "synchronous", False)
        self._pool = ThreadPoolExecutor(workers) if self.oracle is not None and not synchronous else None

    # -- per-frame work ---------------------------------------------------------

    def _add_pose(self, frame: Frame):
        if not self.pose_keys:
            key = self.graph.add_pose(frame.odometry)
            self.graph.add_factor(PriorPose(key, frame.odometry, NoiseModel.isotropic(6, self.cfg.prior_sigma)))
        else:
            prev = self.pose_keys[-1]
            key = self.graph.add_pose(se3_compose(self.graph.estimate.poses[prev], frame.odometry))
            self.graph.add_factor(Between(prev, key, frame.odometry, NoiseModel(frame.odom_cov)))
        self.pose_keys.append(key)
        self.timestamps.append(frame.timestamp)
        return key

    def _relabel(self, detections) -> tuple[list, int]:
        out, changed = [], 0
        for det in detections:
            label, post = posterior_class_update(det, self.m)
            if label != det.label and post[label] - post[det.label] > self.cfg.relabel_margin:
                det = dataclasses.replace(det, label=label)
                changed += 1
            out.append(det)
        return out, changed

    def _spawn(self, det: Detection, pose_key, frame_id: int):
        pose = self.graph.estimate.poses[pose_key]
        key = self.graph.add_landmark(pose.transform(det.point_cam))
        self.graph.add_factor(Observation(pose_key, key, det.point_cam, self.gamma))
        extent = det.extent if det.extent is not None else np.full(3, self.cfg.default_extent)
        self.landmarks[key] = Landmark(key, [det.label], extent, created_frame=frame_id)

    def _proactive_duplicates(self, pose_key, frame: Frame) -> int:
        positions = {k: self.graph.estimate.landmarks[k] for k in self.landmarks}
        pairs = find_duplicate_pairs(
            self.landmarks, positions, self.graph.estimate.poses[pose_key], frame.intrinsics,
            self.cfg.duplicate_iou, self.cfg.duplicate_distance,
        )
        merges = resolve_duplicates(pairs, self.d, self.landmarks)
        for mg in merges:
            self.landmarks.pop(mg.removed)
            n = self.graph.remove_landmark_factors(mg.removed)
            self.edit_log.add(
                frame.frame_id, "proactive_merge", mg.removed, into=mg.survivor.index,
                precise=mg.precise_label, duplicate=mg.duplicate_label, factors=n,
            )
        if merges:
            self.graph.optimize(self.cfg.optimizer)
        return len(merges)

    def _dispatch(self, pose_key, frame: Frame) -> bool:
        positions = {k: self.graph.estimate.landmarks[k] for k in self.landmarks}
        spec = build_composite(
            self.landmarks, positions, self.graph.estimate.poses[pose_key], frame.intrinsics,
            frame.frame_id, self.cfg.max_overlays,
        )
        if not spec.entries:
            return False
        rnd = _Round(spec)
        if self._pool is None:
            rnd.result = _query(self.oracle, spec)
        else:
            rnd.future = self._pool.submit(_query, self.oracle, spec)
        self._rounds.append(rnd)
        return True

    def _apply_ready(self, wait: bool = False) -> int:
        edits = 0
        while self._rounds:
            rnd = self._rounds[0]
            if rnd.future is not None:
                if not wait and not rnd.future.done():
                    break
                try:
                    rnd.result = rnd.future.result()
                except Exception as exc:  # oracle transport failure: drop the round
                    log.warning("frame %d: oracle round failed: %s", rnd.spec.frame_id, exc)
                    rnd.result = (None, None)
            self._rounds.pop(0)
            evaluation, generation = rnd.result
            new = apply_feedback(
                rnd.spec, evaluation, generation, self.graph, self.landmarks,
                self.m, self.d, self.label_db, self.cfg.optimizer,
            )
            self.edit_log.extend(new)
            edits += len(new.mutations)
        return edits

    def step(self, frame: Frame) -> StepReport:
        if self._last is not None:
            if frame.frame_id <= self._last.frame_id:
                raise OutOfOrderFrame(f"frame {frame.frame_id} after frame {self._last.frame_id}")
            if frame.timestamp < self._last.timestamp:
                raise OutOfOrderFrame(f"frame {frame.frame_id}: timestamp goes backwards")
        self._last = frame
        report = StepReport(frame.frame_id)
        pose_key = self._add_pose(frame)

        detections, report.relabeled = self._relabel(frame.detections)
        result = associate_frame(
            detections, self.landmarks, self.graph, pose_key, self.cfg.association, self.provider, self.gamma
        )
        for a in result.assignments:
            det = detections[a.detection]
            self.graph.add_factor(Observation(pose_key, a.landmark, det.point_cam, self.gamma))
        spawn = result.spawn()
        for i in spawn:
            self._spawn(detections[i], pose_key, frame.frame_id)
        report.assigned = len(result.assignments)
        report.spawned = len(spawn)
        report.rejected = len(detections) - report.assigned - report.spawned

        self.graph.optimize(self.cfg.optimizer)
        report.proactive_merges = self._proactive_duplicates(pose_key, frame)

        if self.oracle is not None and frame.frame_id % self.cfg.supervision_every == 0:
            report.supervision_round = self._dispatch(pose_key, frame)
        report.feedback_edits = self._apply_ready()
        self.reports.append(report)
        return report

    # -- whole runs -------------------------------------------------------------------

    def flush(self) -> int:
        edits = self._apply_ready(wait=True)
        if self._pool is not None:
            self._pool.shutdown(wait=True)
            self._pool = None
        return edits

    def export(self) -> RunResult:
        from .io import ExportedLandmark

        lms = []
        for key in sorted(self.landmarks, key=lambda k: k.index):
            n = self.graph.observation_count(key)
            if n < self.cfg.min_observations:
                continue
            lm = self.landmarks[key]
            lms.append(
                ExportedLandmark(
                    key.index, np.array(self.graph.estimate.landmarks[key]), np.array(lm.extent),
                    list(lm.label_set), lm.primary_label, lm.status.value, n,
                )
            )
        traj = [(t, self.graph.estimate.poses[k]) for t, k in zip(self.timestamps, self.pose_keys)]
        return RunResult(lms, traj, self.edit_log, self.m, self.d, self.reports, self.label_db.to_list())

    def run(self, frames) -> RunResult:
        try:
            for frame in frames:
                self.step(frame)
            last = self._last
            if self.oracle is not None and last is not None and last.frame_id % self.cfg.supervision_every:
                self._dispatch(self.pose_keys[-1], last)
            self.flush()
            if self.graph.factors:
                self.graph.optimize(self.cfg.optimizer)
        finally:
            if self._pool is not None:
                self._pool.shutdown(wait=False, cancel_futures=True)
                self._pool = None
        return self.export()


def run(frames, cfg: PipelineConfig | None = None, oracle=None, provider=None) -> RunResult:
    return SlamPipeline(cfg, oracle, provider).run(frames)


def run_scenario(scenario, cfg: PipelineConfig | None = None, oracle=None, error_rate: float = 0.0) -> RunResult:
    """Run a simulated scenario with detections generated live against the growing label database."""
    cfg = cfg or PipelineConfig()
    if cfg.oracle == "scripted" and oracle is None:
        oracle = scenario.oracle(error_rate)
    pipe = SlamPipeline(cfg, oracle)
    return pipe.run(scenario.frames(pipe.label_db))
