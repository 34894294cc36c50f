"""Synthetic indoor scenes for end-to-end checks.

Objects in a small room (including clusters of same-category objects), a
camera orbiting the room with drifting odometry, a detector with label
confusion, misses, clutter and point noise, step scene changes, and a scripted
ground-truth referee that answers supervision prompts.
"""
from __future__ import annotations

import dataclasses
import zlib
from dataclasses import dataclass, field

import numpy as np

from .association import Detection
from .geometry import (
    CameraIntrinsics,
    Pose,
    back_project,
    clip_box,
    project_box,
    project_pinhole,
    se3_compose,
    se3_exp,
    se3_inverse,
    transform_to_frame,
)
from .semantics import normalize_label
from .supervision import (
    CompositeSpec,
    EvalFeedback,
    GenFeedback,
    render_class_label_gen_response,
    render_landmark_eval_response,
)

CATEGORIES = [
    "apple", "backpack", "bag", "banana", "bin", "book", "bottle", "bowl", "chair", "clock",
    "cup", "fan", "flower", "football", "hammer", "helmet", "keyboard", "lamp", "monitor", "mug",
    "pillow", "plant", "racquet", "remote", "scissors", "shoe", "snowman", "teacup", "toy car", "vase",
]
COLORS = ["black", "blue", "brown", "gray", "green", "orange", "pink", "purple", "red", "white", "yellow"]


class UnknownObject(KeyError):
    pass


@dataclass(frozen=True)
class WorldObject:
    id: int
    position: tuple
    extent: tuple
    category: str
    descriptive: str
    group: int = -1

    @property
    def pos(self) -> np.ndarray:
        return np.asarray(self.position, dtype=float)

    @property
    def labels(self) -> set:
        return {normalize_label(self.category), normalize_label(self.descriptive)}


@dataclass(frozen=True)
class SceneChangeEvent:
    frame: int
    action: str  # "remove" | "add"
    object_id: int
    obj: WorldObject | None = None

    def __post_init__(self):
        if self.action not in ("remove", "add"):
            raise ValueError(f"unknown scene change action {self.action!r}")
        if self.action == "add" and (self.obj is None or self.obj.id != self.object_id):
            raise ValueError("add events carry the new object")


@dataclass
class WorldGT:
    objects: list
    active: dict = field(default_factory=dict)
    events: list = field(default_factory=list)

    def __post_init__(self):
        ids = [o.id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ValueError("object ids must be unique")
        for o in self.objects:
            if min(o.extent) <= 0:
                raise ValueError(f"object {o.id} has non-positive extent")
            self.active.setdefault(o.id, True)

    def get(self, object_id: int) -> WorldObject:
        for o in self.objects:
            if o.id == object_id:
                return o
        raise UnknownObject(object_id)

    def active_objects(self) -> list:
        return [o for o in self.objects if self.active[o.id]]

    @property
    def categories(self) -> list:
        return sorted({o.category for o in self.objects})

    def initial(self) -> "WorldGT":
        added = {e.object_id for e in self.events if e.action == "add"}
        objs = [o for o in self.objects if o.id not in added]
        return WorldGT(objs, {o.id: True for o in objs}, list(self.events))

    def state_at(self, frame: int) -> "WorldGT":
        """World with every event at or before ``frame`` applied."""
        w = self.initial()
        for e in sorted(self.events, key=lambda e_: e_.frame):
            if e.frame <= frame:
                w = apply_scene_change(w, e, record=False)
        return w

    def final(self) -> "WorldGT":
        return self.state_at(max([e.frame for e in self.events], default=0))


def apply_scene_change(world: WorldGT, e: SceneChangeEvent, record: bool = True) -> WorldGT:
    objects = list(world.objects)
    active = dict(world.active)
    if e.action == "remove":
        if e.object_id not in active:
            raise UnknownObject(e.object_id)
        active[e.object_id] = False
    else:
        if e.object_id in active:
            raise ValueError(f"object id {e.object_id} already exists")
        objects.append(e.obj)
        active[e.object_id] = True
    events = list(world.events)
    if record and e not in events:
        events.append(e)
    return WorldGT(objects, active, events)


def _place_cluster(rng, size, radius, z_range, placed, min_sep, spacing=(0.3, 0.5)):
    for _ in range(5000):
        r = radius * np.sqrt(rng.uniform())
        a = rng.uniform(0, 2 * np.pi)
        center = np.array([r * np.cos(a), r * np.sin(a)])
        if size == 1:
            pts = [center]
        else:
            pts = []
            for _ in range(200):
                cand = [center + rng.uniform(-0.3, 0.3, 2) for _ in range(size)]
                d = [np.linalg.norm(p - q) for i, p in enumerate(cand) for q in cand[i + 1 :]]
                if min(d) >= spacing[0] and max(d) < spacing[1]:
                    pts = cand
                    break
            if not pts:
                continue
        if any(np.linalg.norm(p) > radius for p in pts):
            continue
        if all(np.linalg.norm(p - q[:2]) >= min_sep for p in pts for q in placed):
            # group members share a height band so the 3-D spacing stays under the bound
            z0 = rng.uniform(z_range[0] + 0.05, z_range[1] - 0.05)
            out = [np.array([p[0], p[1], z0 + rng.uniform(-0.05, 0.05)]) for p in pts]
            if all(np.linalg.norm(p - q) < spacing[1] for i, p in enumerate(out) for q in out[i + 1 :]):
                return out
    raise RuntimeError("could not place objects; room too crowded")


def generate_world(
    seed: int,
    n_objects: int = 20,
    n_same_category_groups: int = 3,
    region_radius: float = 2.0,
    min_separation: float = 0.7,
) -> WorldGT:
    """Seeded room layout; each group holds 2-3 same-category objects within 0.5 m."""
    if n_objects < 2 * n_same_category_groups:
        raise ValueError("n_objects must be at least twice the number of groups")
    rng = np.random.default_rng(seed)
    cats = [str(c) for c in rng.permutation(CATEGORIES)]
    sizes = []
    budget = n_objects
    for g in range(n_same_category_groups):
        remaining_groups = n_same_category_groups - g - 1
        size = int(rng.integers(2, 4))
        size = min(size, budget - 2 * remaining_groups)
        sizes.append(size)
        budget -= size
    if budget > len(cats) - n_same_category_groups:
        raise ValueError("not enough distinct categories for the requested world")
    objects, placed = [], []
    oid = 0
    for g, size in enumerate(sizes):
        cat = cats[g]
        colors = rng.choice(COLORS, size=size, replace=False)
        for pos, color in zip(_place_cluster(rng, size, region_radius, (0.1, 0.9), placed, min_separation), colors):
            extent = tuple(float(x) for x in rng.uniform(0.1, 0.3, 3))
            objects.append(WorldObject(oid, tuple(float(x) for x in pos), extent, cat, f"{color} {cat}", g))
            placed.append(pos)
            oid += 1
    for cat in cats[n_same_category_groups : n_same_category_groups + budget]:
        (pos,) = _place_cluster(rng, 1, region_radius, (0.1, 0.9), placed, min_separation)
        extent = tuple(float(x) for x in rng.uniform(0.1, 0.3, 3))
        color = str(rng.choice(COLORS))
        objects.append(WorldObject(oid, tuple(float(x) for x in pos), extent, cat, f"{color} {cat}"))
        placed.append(pos)
        oid += 1
    return WorldGT(objects)


def look_at(position, target) -> Pose:
    """Camera pose (z forward, y down) at ``position`` facing ``target`` with world z up."""
    position = np.asarray(position, dtype=float)
    forward = np.asarray(target, dtype=float) - position
    forward /= np.linalg.norm(forward)
    down = np.array([0.0, 0.0, -1.0])
    right = np.cross(down, forward)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    return Pose(np.column_stack([right, down, forward]), position)


def odometry_covariance(sigma_rot: float, sigma_trans: float) -> np.ndarray:
    return np.diag([sigma_rot**2] * 3 + [sigma_trans**2] * 3)


def generate_trajectory(
    seed: int,
    n_frames: int,
    odom_noise,
    radius: float = 3.0,
    loops: float = 1.25,
    height: float = 0.5,
):
    """Orbit the room center; returns (ground-truth poses, noisy odometry increments).

    ``odom_noise`` is the 6x6 covariance of the (rotation, translation) twist
    noise right-multiplied onto each true relative pose.
    """
    if n_frames < 2:
        raise ValueError("need at least two frames")
    cov = np.asarray(odom_noise, dtype=float)
    rng = np.random.default_rng([seed, 7])
    poses = []
    for i in range(n_frames):
        a = 2 * np.pi * loops * i / (n_frames - 1)
        pos = [radius * np.cos(a), radius * np.sin(a), height + 0.05 * np.sin(3 * a)]
        target = [0.4 * np.sin(2 * a), 0.4 * np.cos(a), 0.45]
        poses.append(look_at(pos, target))
    odometry = []
    for i in range(1, n_frames):
        rel = se3_compose(se3_inverse(poses[i - 1]), poses[i])
        noise = rng.multivariate_normal(np.zeros(6), cov) if np.any(cov) else np.zeros(6)
        odometry.append(se3_compose(rel, se3_exp(noise)))
    return poses, odometry


def dead_reckon(origin: Pose, increments) -> list:
    out = [origin]
    for inc in increments:
        out.append(se3_compose(out[-1], inc))
    return out


def build_confusion_table(categories, rate: float, seed: int) -> dict:
    """Each category keeps its label with probability 1 - rate, else turns into one fixed confuser."""
    rng = np.random.default_rng([seed, 11])
    cats = sorted(categories)
    table = {}
    for c in cats:
        others = [o for o in cats if o != c]
        row = {c: 1.0 - rate}
        if rate > 0 and others:
            row[str(rng.choice(others))] = rate
        table[c] = row
    return table


@dataclass
class DetectorSim:
    detection_range: float = 5.0
    fov_half_angle: float = 0.6
    miss_prob: float = 0.05
    clutter_rate: float = 0.3
    point_noise: np.ndarray = field(default_factory=lambda: np.eye(3) * 0.02**2)
    confusion: dict = field(default_factory=dict)
    correct_beta: tuple = (8.0, 2.0)
    confused_beta: tuple = (5.0, 3.0)
    clutter_beta: tuple = (3.0, 3.0)
    confidence_threshold: float = 0.5

    def __post_init__(self):
        self.point_noise = np.asarray(self.point_noise, dtype=float)
        for p in (self.miss_prob, self.confidence_threshold):
            if not 0 <= p <= 1:
                raise ValueError("probabilities must lie in [0, 1]")
        if self.clutter_rate < 0:
            raise ValueError("clutter rate must be non-negative")
        if self.point_noise.any():  # an all-zero matrix means noise-free points
            np.linalg.cholesky(self.point_noise)


def _sample_label(rng, row: dict, true_label: str) -> str:
    u = rng.uniform()
    if not row:
        return true_label
    acc = 0.0
    for label, p in sorted(row.items()):
        acc += p
        if u < acc:
            return label
    return true_label


def simulate_detections(
    world: WorldGT,
    pose: Pose,
    det: DetectorSim,
    rng,
    k: CameraIntrinsics,
    labeldb=None,
) -> list:
    """One frame of noisy detections of the active objects visible from ``pose``.

    Objects whose descriptive label is in ``labeldb`` are reported with it;
    otherwise the label is drawn from the confusion row of the category.
    Every object consumes the same random draws whether or not it is seen,
    so label-database changes never shift the noise streams.
    """
    if isinstance(rng, (int, tuple, list)):
        rng = np.random.default_rng(rng)
    out = []
    chol = np.linalg.cholesky(det.point_noise) if det.point_noise.any() else np.zeros((3, 3))
    for obj in sorted(world.objects, key=lambda o: o.id):
        miss_u = rng.uniform()
        noise = chol @ rng.standard_normal(3)
        label_rng = np.random.default_rng(rng.integers(2**63))
        conf_rng = np.random.default_rng(rng.integers(2**63))
        if not world.active[obj.id]:
            continue
        p = transform_to_frame(pose, obj.pos)
        dist = np.linalg.norm(p)
        if p[2] <= 0.05 or dist > det.detection_range or np.arccos(p[2] / dist) > det.fov_half_angle:
            continue
        pix = project_pinhole(k, p)
        if pix is None or not (0 <= pix[0] < k.width and 0 <= pix[1] < k.height):
            continue
        if miss_u < det.miss_prob:
            continue
        if labeldb is not None and obj.descriptive in labeldb:
            label = obj.descriptive
        else:
            label = _sample_label(label_rng, det.confusion.get(obj.category, {}), obj.category)
        correct = label in (obj.category, obj.descriptive)
        a, b = det.correct_beta if correct else det.confused_beta
        conf = float(conf_rng.beta(a, b))
        point = p + noise
        if conf < det.confidence_threshold or point[2] <= 0:
            continue
        box = clip_box(project_box(obj.pos, obj.extent, pose, k), k)
        out.append(Detection(label, conf, box, point, np.asarray(obj.extent)))
    n_clutter = rng.poisson(det.clutter_rate)
    vocab = world.categories
    for _ in range(n_clutter):
        depth = rng.uniform(1.0, det.detection_range)
        pix = (rng.uniform(0, k.width), rng.uniform(0, k.height))
        label = str(vocab[rng.integers(len(vocab))])
        conf = float(rng.beta(*det.clutter_beta))
        if conf < det.confidence_threshold:
            continue
        point = back_project(k, pix, depth)
        half = 0.1 * k.fx / depth
        box = clip_box((pix[0] - half, pix[1] - half, pix[0] + half, pix[1] + half), k)
        out.append(Detection(label, conf, box, point, None))
    return out


# -- scripted referee ------------------------------------------------------------------


def _stable_seed(*parts) -> int:
    return zlib.crc32("/".join(map(str, parts)).encode())


class ScriptedOracle:
    """Ground-truth stand-in for the multimodal evaluator.

    Judges each overlay against the world state at the composite's frame and
    answers in the same text format a language model would. With
    ``error_rate`` > 0 each verdict is independently dropped or scrambled.
    """

    synchronous = True

    def __init__(self, world: WorldGT, gt_poses: dict, error_rate: float = 0.0, radius: float = 0.25, seed: int = 0):
        self.world = world
        self.gt_poses = gt_poses
        self.error_rate = error_rate
        self.radius = radius
        self.seed = seed
        self.transcript: list = []

    def verdicts(self, spec: CompositeSpec):
        world = self.world.state_at(spec.frame_id)
        active = world.active_objects()
        fb, gen = EvalFeedback(), GenFeedback()
        nearest = {}
        for e in spec.entries:
            pos = np.asarray(e.position, dtype=float)
            best = min(active, key=lambda o: (np.linalg.norm(o.pos - pos), o.id), default=None)
            if best is None or np.linalg.norm(best.pos - pos) > self.radius:
                fb.empty.append(e.number)
            else:
                nearest.setdefault(best.id, []).append(e)
        for oid in sorted(nearest):
            obj = world.get(oid)
            entries = sorted(nearest[oid], key=lambda e_: e_.number)
            keeper = entries[0]
            if len(entries) > 1:
                target = normalize_label(obj.descriptive)
                named = [e for e in entries if target in {normalize_label(x) for x in (e.label, *e.label_set)}]
                keeper = (named or entries)[0]
                fb.duplicated.append(tuple(e.number for e in entries))
                fb.precise_in_duplicated.append(keeper.number)
            labels = {normalize_label(x) for x in (keeper.label_set or (keeper.label,))}
            if not labels & obj.labels:
                fb.incorrect.append(keeper.number)
                fb.corrected.append(obj.category)
            else:
                gen.labels[keeper.number] = [obj.descriptive]
        return fb, gen

    def _corrupt_eval(self, spec, fb: EvalFeedback) -> EvalFeedback:
        if self.error_rate <= 0:
            return fb
        rng = np.random.default_rng(_stable_seed(self.seed, spec.frame_id, "eval"))
        numbers = [e.number for e in spec.entries]
        cats = self.world.categories
        out = EvalFeedback()
        for n in fb.empty:
            if rng.uniform() < self.error_rate:
                if rng.uniform() < 0.5:
                    continue
                n = int(rng.choice(numbers))
            if n not in out.empty:
                out.empty.append(n)
        for n, c in zip(fb.incorrect, fb.corrected):
            if rng.uniform() < self.error_rate:
                if rng.uniform() < 0.5:
                    continue
                c = str(rng.choice(cats))
            out.incorrect.append(n)
            out.corrected.append(c)
        for g, p in zip(fb.duplicated, fb.precise_in_duplicated):
            if rng.uniform() < self.error_rate:
                continue
            out.duplicated.append(g)
            out.precise_in_duplicated.append(p)
        flagged = set(fb.empty) | set(fb.incorrect) | {n for g in fb.duplicated for n in g}
        for n in numbers:
            if n not in flagged and n not in out.empty and rng.uniform() < self.error_rate / 2:
                out.empty.append(n)
        return out

    def _corrupt_gen(self, spec, gen: GenFeedback) -> GenFeedback:
        if self.error_rate <= 0:
            return gen
        rng = np.random.default_rng(_stable_seed(self.seed, spec.frame_id, "gen"))
        out = GenFeedback()
        for n in sorted(gen.labels):
            labels = gen.labels[n]
            if rng.uniform() < self.error_rate:
                if rng.uniform() < 0.5:
                    continue
                labels = [f"{rng.choice(COLORS)} {labels[0].split(' ', 1)[-1]}"]
            out.labels[n] = labels
        return out

    def landmark_eval(self, spec: CompositeSpec, prompt: str) -> str:
        fb, _ = self.verdicts(spec)
        text = render_landmark_eval_response(self._corrupt_eval(spec, fb))
        self.transcript.append(("landmark_eval", spec.frame_id, text))
        return text

    def class_label_gen(self, spec: CompositeSpec, prompt: str) -> str:
        _, gen = self.verdicts(spec)
        text = render_class_label_gen_response(self._corrupt_gen(spec, gen))
        self.transcript.append(("class_label_gen", spec.frame_id, text))
        return text


def scripted_oracle(spec: CompositeSpec, world: WorldGT, gt_pose: Pose | None = None, error_rate: float = 0.0, seed: int = 0):
    """Both role responses (LandmarkEval text, ClassLabelGen text) for one composite."""
    oracle = ScriptedOracle(world, {spec.frame_id: gt_pose}, error_rate, seed=seed)
    return oracle.landmark_eval(spec, ""), oracle.class_label_gen(spec, "")


# -- scenarios ---------------------------------------------------------------------------

DEFAULT_INTRINSICS = CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)


@dataclass
class ScenarioConfig:
    seed: int = 0
    n_objects: int = 20
    n_groups: int = 3
    n_frames: int = 48
    loops: float = 1.25
    odom_sigma_rot: float = 0.005
    odom_sigma_trans: float = 0.02
    point_sigma: float = 0.02
    miss_prob: float = 0.05
    clutter_rate: float = 0.3
    confusion_rate: float = 0.15
    dt: float = 0.5
    events: list = field(default_factory=list)


@dataclass
class Scenario:
    config: ScenarioConfig
    world: WorldGT
    gt_poses: list
    odometry: list
    odom_cov: np.ndarray
    detector: DetectorSim
    intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS

    @property
    def n_frames(self) -> int:
        return len(self.gt_poses)

    def timestamp(self, frame: int) -> float:
        return frame * self.config.dt

    def detections(self, frame: int, labeldb=None) -> list:
        world = self.world.state_at(frame)
        rng = np.random.default_rng([self.config.seed, frame, 3])
        return simulate_detections(world, self.gt_poses[frame], self.detector, rng, self.intrinsics, labeldb)

    def frame(self, i: int, labeldb=None):
        from .pipeline import Frame

        odom = self.gt_poses[0] if i == 0 else self.odometry[i - 1]
        cov = self.odom_cov if i else np.eye(6) * 1e-6
        return Frame(i, self.timestamp(i), odom, cov, self.detections(i, labeldb), self.intrinsics)

    def frames(self, labeldb=None):
        """Frames generated on demand so detections see the label database as it grows."""
        for i in range(self.n_frames):
            yield self.frame(i, labeldb)

    def gt_trajectory(self) -> list:
        return [(self.timestamp(i), p) for i, p in enumerate(self.gt_poses)]

    def odometry_trajectory(self) -> list:
        poses = dead_reckon(self.gt_poses[0], self.odometry)
        return [(self.timestamp(i), p) for i, p in enumerate(poses)]

    def oracle(self, error_rate: float = 0.0) -> ScriptedOracle:
        return ScriptedOracle(self.world, dict(enumerate(self.gt_poses)), error_rate, seed=self.config.seed)


def make_scenario(cfg: ScenarioConfig | None = None, **overrides) -> Scenario:
    cfg = dataclasses.replace(cfg or ScenarioConfig(), **overrides)
    world = generate_world(cfg.seed, cfg.n_objects, cfg.n_groups)
    for e in cfg.events:
        world = apply_scene_change(world, e)
    cov = odometry_covariance(cfg.odom_sigma_rot, cfg.odom_sigma_trans)
    gt, odom = generate_trajectory(cfg.seed, cfg.n_frames, cov, loops=cfg.loops)
    detector = DetectorSim(
        miss_prob=cfg.miss_prob,
        clutter_rate=cfg.clutter_rate,
        point_noise=np.eye(3) * cfg.point_sigma**2,
        confusion=build_confusion_table(world.categories, cfg.confusion_rate, cfg.seed),
    )
    return Scenario(cfg, world, gt, odom, cov, detector)
