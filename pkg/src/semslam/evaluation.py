"""Trajectory and map quality metrics."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .association import semantic_similarity
from .semantics import NGramEmbedding, normalize_label


class LengthMismatch(ValueError):
    pass


@dataclass(frozen=True)
class ApeStats:
    rmse: float
    mean: float
    median: float
    max: float

    def to_dict(self):
        return asdict(self)


def ape(est, gt, time_tolerance: float = 1e-6) -> ApeStats:
    """Translational absolute pose error; no alignment is applied.

    Both inputs are sequences of (timestamp, Pose).
    """
    if len(est) != len(gt):
        raise LengthMismatch(f"{len(est)} estimated vs {len(gt)} ground-truth poses")
    if not est:
        raise LengthMismatch("empty trajectories")
    for (te, _), (tg, _) in zip(est, gt):
        if abs(te - tg) > time_tolerance:
            raise LengthMismatch(f"timestamps differ: {te} vs {tg}")
    err = np.array([np.linalg.norm(pe.translation - pg.translation) for (_, pe), (_, pg) in zip(est, gt)])
    return ApeStats(
        float(np.sqrt(np.mean(err**2))), float(err.mean()), float(np.median(err)), float(err.max())
    )


@dataclass(frozen=True)
class MatchConfig:
    distance: float = 0.3
    rule: str = "exact-category"  # or "embedding"
    tau: float = 0.8

    def __post_init__(self):
        if self.distance <= 0:
            raise ValueError("match distance must be positive")
        if self.rule not in ("exact-category", "embedding"):
            raise ValueError(f"unknown semantic rule {self.rule!r}")


def _category_match(labels, category: str) -> bool:
    need = set(normalize_label(category).split())
    return any(need <= set(normalize_label(lab).split()) for lab in labels)


def _semantic_ok(labels, obj, m: MatchConfig, provider) -> bool:
    if m.rule == "exact-category":
        return _category_match(labels, obj.category)
    return any(
        semantic_similarity(lab, target, provider) >= m.tau
        for lab in labels
        for target in (obj.category, obj.descriptive)
    )


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float
    est_count: int
    false_pos: int
    true_pos: int
    gt_count: int

    def to_dict(self):
        return asdict(self)


def prf_from_counts(est_count: int, true_pos: int, gt_count: int) -> PRF:
    if not 0 <= true_pos <= min(est_count, gt_count):
        raise ValueError("true positives must not exceed either count")
    p = true_pos / est_count if est_count else 0.0
    r = true_pos / gt_count if gt_count else 0.0
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return PRF(p, r, f1, est_count, est_count - true_pos, true_pos, gt_count)


def match_landmarks(landmarks, objects, m: MatchConfig | None = None, provider=None) -> list:
    """Greedy one-to-one (landmark index, object id, distance) matches by ascending distance."""
    m = m or MatchConfig()
    provider = provider or NGramEmbedding()
    pairs = []
    for i, lm in enumerate(landmarks):
        for obj in objects:
            dist = float(np.linalg.norm(np.asarray(lm.position) - obj.pos))
            if dist <= m.distance and _semantic_ok(lm.label_set, obj, m, provider):
                pairs.append((dist, i, obj.id))
    pairs.sort()
    used_l, used_o, out = set(), set(), []
    for dist, i, oid in pairs:
        if i in used_l or oid in used_o:
            continue
        used_l.add(i)
        used_o.add(oid)
        out.append((i, oid, dist))
    return out


def landmark_prf(map_export, world, m: MatchConfig | None = None, provider=None) -> PRF:
    """Precision/recall of exported landmarks against the world's finally-active objects."""
    objects = world.final().active_objects()
    landmarks = list(map_export.landmarks)
    matches = match_landmarks(landmarks, objects, m, provider)
    return prf_from_counts(len(landmarks), len(matches), len(objects))
