"""Geometric-then-semantic data association.

A detection is compatible with a landmark when its Mahalanobis distance under
the innovation covariance passes a chi-square gate and its label is close
enough (cosine of label embeddings) to one of the landmark's labels.
Compatible pairs are resolved greedily by ascending distance, one-to-one.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2

from .geometry import Pose, skew, transform_to_frame
from .graph import FactorGraph, JointMarginal, NoiseModel, VariableKey


class SingularCovariance(ValueError):
    pass


@dataclass
class Detection:
    label: str
    confidence: float
    pixel_box: tuple
    point_cam: np.ndarray
    extent: np.ndarray | None = None

    def __post_init__(self):
        self.point_cam = np.asarray(self.point_cam, dtype=float).reshape(3)
        if self.extent is not None:
            self.extent = np.asarray(self.extent, dtype=float).reshape(3)
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        u0, v0, u1, v1 = self.pixel_box
        if u0 > u1 or v0 > v1:
            raise ValueError("pixel box corners out of order")
        if not self.point_cam[2] > 0:
            raise ValueError("detection point must be in front of the camera")
        if not self.label:
            raise ValueError("empty detection label")


@dataclass
class AssociationConfig:
    d: int = 3
    alpha: float = 0.95
    semantic_threshold: float = 0.6

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if not -1 <= self.semantic_threshold <= 1:
            raise ValueError("semantic_threshold must lie in [-1, 1]")


class Rejection(enum.Enum):
    SEM_FAIL = "SemFail"  # geometry passed for some landmark, labels never did
    TAKEN = "Taken"  # every compatible landmark was claimed by a closer detection


@dataclass(frozen=True)
class Assignment:
    detection: int
    landmark: VariableKey
    d2: float
    similarity: float


@dataclass
class AssociationResult:
    assignments: list = field(default_factory=list)
    new_landmarks: list = field(default_factory=list)
    rejected: list = field(default_factory=list)  # (detection index, Rejection)

    def spawn(self) -> list:
        """Detections that should start new landmarks."""
        return sorted(self.new_landmarks + [i for i, why in self.rejected if why is Rejection.SEM_FAIL])


def predict_measurement(pose: Pose, landmark_pos) -> np.ndarray:
    return transform_to_frame(pose, landmark_pos)


def measurement_jacobian(pose: Pose, landmark_pos) -> np.ndarray:
    """3x9 Jacobian of the prediction w.r.t. (pose tangent, landmark position)."""
    p = transform_to_frame(pose, landmark_pos)
    return np.hstack([skew(p), -np.eye(3), pose.rotation.T])


def innovation_covariance(h: np.ndarray, sigma, gamma) -> np.ndarray:
    s = sigma.matrix if isinstance(sigma, JointMarginal) else np.asarray(sigma, dtype=float)
    g = gamma.covariance if isinstance(gamma, NoiseModel) else np.asarray(gamma, dtype=float)
    try:
        np.linalg.cholesky(g)
    except np.linalg.LinAlgError as exc:
        raise ValueError("measurement noise must be positive definite") from exc
    c = h @ s @ h.T + g
    return 0.5 * (c + c.T)


def _cholesky(c):
    try:
        return np.linalg.cholesky(c)
    except np.linalg.LinAlgError as exc:
        raise SingularCovariance("covariance is not positive definite") from exc


def mahalanobis_distance(residual, c) -> float:
    """Squared Mahalanobis distance r^T C^-1 r."""
    lc = _cholesky(np.asarray(c, dtype=float))
    y = np.linalg.solve(lc, np.asarray(residual, dtype=float))
    return float(y @ y)


def chi2_quantile(d: int, alpha: float) -> float:
    if d < 1 or not 0 < alpha < 1:
        raise ValueError("need d >= 1 and 0 < alpha < 1")
    return float(chi2.ppf(alpha, d))


def association_likelihood(residual, c) -> float:
    """Gaussian density of ``residual`` under zero-mean covariance ``c``."""
    c = np.asarray(c, dtype=float)
    lc = _cholesky(c)
    y = np.linalg.solve(lc, np.asarray(residual, dtype=float))
    log_det = 2.0 * np.log(np.diag(lc)).sum()
    d = len(y)
    return float(np.exp(-0.5 * (y @ y) - 0.5 * (d * np.log(2 * np.pi) + log_det)))


def semantic_similarity(label_a: str, label_b: str, provider) -> float:
    if not label_a or not label_b:
        raise ValueError("labels must be non-empty")
    if label_a == label_b:
        return 1.0
    s = float(provider.embed(label_a) @ provider.embed(label_b))
    return min(1.0, max(-1.0, s))


def landmark_similarity(label: str, label_set, provider) -> float:
    return max(semantic_similarity(label, other, provider) for other in label_set)


def associate_frame(
    detections,
    landmarks: dict,
    graph: FactorGraph,
    pose_key: VariableKey,
    cfg: AssociationConfig,
    provider,
    gamma: NoiseModel,
) -> AssociationResult:
    """Associate one frame of detections with existing landmarks.

    ``landmarks`` maps landmark keys to objects exposing ``label_set``. The
    pose estimate and marginals are read from ``graph`` as-is.
    """
    result = AssociationResult()
    if not detections:
        return result
    keys = [k for k in sorted(landmarks, key=lambda k_: k_.index) if graph.has(k)]
    if not keys:
        result.new_landmarks = list(range(len(detections)))
        return result

    pose = graph.estimate.poses[pose_key]
    marginals = graph.joint_marginals(pose_key, keys)
    gate = chi2_quantile(cfg.d, cfg.alpha)
    z = np.stack([det.point_cam for det in detections])

    geometric = [[] for _ in detections]
    candidates = []
    for k in keys:
        lm = graph.estimate.landmarks[k]
        c = innovation_covariance(measurement_jacobian(pose, lm), marginals[k], gamma)
        lc = _cholesky(c)
        y = np.linalg.solve(lc, (z - predict_measurement(pose, lm)).T)
        d2 = (y * y).sum(axis=0)
        for i in np.flatnonzero(d2 < gate):
            geometric[i].append(k)
            sim = landmark_similarity(detections[i].label, landmarks[k].label_set, provider)
            if sim >= cfg.semantic_threshold:
                candidates.append((float(d2[i]), int(i), k.index, k, sim))

    candidates.sort(key=lambda c_: c_[:3])
    used_det, used_lm = set(), set()
    passing = set()
    for d2, i, _, k, sim in candidates:
        passing.add(i)
        if i in used_det or k in used_lm:
            continue
        used_det.add(i)
        used_lm.add(k)
        result.assignments.append(Assignment(i, k, d2, sim))

    for i in range(len(detections)):
        if i in used_det:
            continue
        if i in passing:
            result.rejected.append((i, Rejection.TAKEN))
        elif geometric[i]:
            result.rejected.append((i, Rejection.SEM_FAIL))
        else:
            result.new_landmarks.append(i)
    result.assignments.sort(key=lambda a: a.detection)
    return result
