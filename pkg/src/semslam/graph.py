"""Factor graph over SE(3) poses and 3-D point landmarks.

Holds prior, odometry (between) and point-observation factors, runs
Levenberg-Marquardt on the negative log posterior, and recovers joint
pose/landmark marginal covariances from the Gauss-Newton information matrix.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Union

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .geometry import (
    Pose,
    adjoint,
    se3_compose,
    se3_exp,
    se3_inverse,
    se3_log,
    se3_right_jacobian_inv,
    skew,
    transform_to_frame,
)

log = logging.getLogger(__name__)


class GraphError(RuntimeError):
    pass


class UnknownKey(GraphError, KeyError):
    pass


class Underconstrained(GraphError):
    pass


class SingularSystem(GraphError):
    pass


class VarKind(enum.Enum):
    POSE = "x"
    LANDMARK = "l"


class VariableKey(NamedTuple):
    kind: VarKind
    index: int

    def __str__(self):
        return f"{self.kind.value}{self.index}"

    @property
    def dim(self) -> int:
        return 6 if self.kind is VarKind.POSE else 3


def X(i: int) -> VariableKey:
    return VariableKey(VarKind.POSE, i)


def L(j: int) -> VariableKey:
    return VariableKey(VarKind.LANDMARK, j)


class NoiseModel:
    """Gaussian noise with a full covariance; whitens residuals by sqrt-information."""

    def __init__(self, covariance):
        cov = np.array(covariance, dtype=float)
        if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
            raise ValueError("covariance must be square")
        if np.abs(cov - cov.T).max() > 1e-12:
            raise ValueError("covariance must be symmetric")
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ValueError("covariance must be positive definite") from exc
        self.covariance = cov
        self.information = np.linalg.inv(cov)
        self.information = 0.5 * (self.information + self.information.T)
        # upper factor U with U^T U = information
        self.sqrt_information = np.linalg.cholesky(self.information).T

    @classmethod
    def isotropic(cls, dim: int, sigma: float) -> "NoiseModel":
        return cls(np.eye(dim) * sigma**2)

    @classmethod
    def diagonal(cls, sigmas) -> "NoiseModel":
        return cls(np.diag(np.asarray(sigmas, dtype=float) ** 2))

    @property
    def dim(self) -> int:
        return self.covariance.shape[0]

    def whiten(self, r):
        return self.sqrt_information @ r


@dataclass
class PriorPose:
    key: VariableKey
    mean: Pose
    noise: NoiseModel

    @property
    def keys(self):
        return (self.key,)

    def residual(self, poses, landmarks) -> np.ndarray:
        return se3_log(se3_compose(se3_inverse(self.mean), poses[self.key]))

    def linearize(self, poses, landmarks):
        r = self.residual(poses, landmarks)
        return r, [(self.key, se3_right_jacobian_inv(r))]


@dataclass
class Between:
    key_a: VariableKey
    key_b: VariableKey
    relative: Pose
    noise: NoiseModel

    @property
    def keys(self):
        return (self.key_a, self.key_b)

    def _error(self, poses) -> Pose:
        xa, xb = poses[self.key_a], poses[self.key_b]
        return se3_compose(se3_inverse(self.relative), se3_compose(se3_inverse(xa), xb))

    def residual(self, poses, landmarks) -> np.ndarray:
        return se3_log(self._error(poses))

    def linearize(self, poses, landmarks):
        r = self.residual(poses, landmarks)
        jr_inv = se3_right_jacobian_inv(r)
        xa, xb = poses[self.key_a], poses[self.key_b]
        j_a = -jr_inv @ adjoint(se3_compose(se3_inverse(xb), xa))
        return r, [(self.key_a, j_a), (self.key_b, jr_inv)]


@dataclass
class Observation:
    """A landmark measured as a 3-D point in the sensor frame of a pose."""

    pose_key: VariableKey
    landmark_key: VariableKey
    measured: np.ndarray
    noise: NoiseModel

    def __post_init__(self):
        self.measured = np.asarray(self.measured, dtype=float).reshape(3)
        if not np.all(np.isfinite(self.measured)):
            raise ValueError("observation must be finite")

    @property
    def keys(self):
        return (self.pose_key, self.landmark_key)

    def residual(self, poses, landmarks) -> np.ndarray:
        return self.measured - transform_to_frame(poses[self.pose_key], landmarks[self.landmark_key])

    def linearize(self, poses, landmarks):
        pose = poses[self.pose_key]
        p = transform_to_frame(pose, landmarks[self.landmark_key])
        j_pose = np.hstack([-skew(p), np.eye(3)])
        return self.measured - p, [(self.pose_key, j_pose), (self.landmark_key, -pose.rotation.T)]


Factor = Union[PriorPose, Between, Observation]


@dataclass
class GraphEstimate:
    poses: dict = field(default_factory=dict)
    landmarks: dict = field(default_factory=dict)

    def copy(self) -> "GraphEstimate":
        return GraphEstimate(dict(self.poses), {k: v.copy() for k, v in self.landmarks.items()})

    def __getitem__(self, key: VariableKey):
        if key.kind is VarKind.POSE:
            return self.poses[key]
        return self.landmarks[key]

    def __contains__(self, key):
        return key in self.poses or key in self.landmarks


@dataclass
class JointMarginal:
    """9x9 covariance of (pose tangent, landmark position)."""

    matrix: np.ndarray

    @property
    def pose(self):
        return self.matrix[:6, :6]

    @property
    def cross(self):
        return self.matrix[:6, 6:]

    @property
    def landmark(self):
        return self.matrix[6:, 6:]


@dataclass
class OptimizerConfig:
    lambda0: float = 1e-4
    lambda_factor: float = 10.0
    lambda_max: float = 1e10
    max_iterations: int = 100
    relative_tolerance: float = 1e-8
    step_tolerance: float = 1e-8


@dataclass
class OptimizeReport:
    initial_error: float
    final_error: float
    iterations: int
    reason: str


class FactorGraph:
    def __init__(self):
        self.estimate = GraphEstimate()
        self.factors: dict[int, Factor] = {}
        self._next_index = {VarKind.POSE: 0, VarKind.LANDMARK: 0}
        self._next_factor = 0
        self._factors_of: dict[VariableKey, set] = {}

    # -- construction ---------------------------------------------------------

    def add_variable(self, kind: VarKind, value) -> VariableKey:
        key = VariableKey(kind, self._next_index[kind])
        if kind is VarKind.POSE:
            if not isinstance(value, Pose) or not value.is_valid(1e-6):
                raise ValueError("pose variables need a valid Pose")
            self.estimate.poses[key] = value
        else:
            value = np.array(value, dtype=float).reshape(3)
            if not np.all(np.isfinite(value)):
                raise ValueError("landmark position must be finite")
            self.estimate.landmarks[key] = value
        self._next_index[kind] += 1
        self._factors_of[key] = set()
        return key

    def add_pose(self, value: Pose) -> VariableKey:
        return self.add_variable(VarKind.POSE, value)

    def add_landmark(self, value) -> VariableKey:
        return self.add_variable(VarKind.LANDMARK, value)

    def add_factor(self, factor: Factor) -> int:
        for k in factor.keys:
            if k not in self._factors_of:
                raise UnknownKey(k)
        fid = self._next_factor
        self._next_factor += 1
        self.factors[fid] = factor
        for k in factor.keys:
            self._factors_of[k].add(fid)
        return fid

    def remove_landmark_factors(self, key: VariableKey) -> int:
        """Delete a landmark variable and every factor touching it; returns the factor count."""
        if key not in self._factors_of or key.kind is not VarKind.LANDMARK:
            raise UnknownKey(key)
        fids = self._factors_of.pop(key)
        for fid in fids:
            factor = self.factors.pop(fid)
            for other in factor.keys:
                if other != key:
                    self._factors_of[other].discard(fid)
        del self.estimate.landmarks[key]
        return len(fids)

    # -- queries ---------------------------------------------------------------

    @property
    def pose_keys(self):
        return sorted(self.estimate.poses, key=lambda k: k.index)

    @property
    def landmark_keys(self):
        return sorted(self.estimate.landmarks, key=lambda k: k.index)

    def has(self, key: VariableKey) -> bool:
        return key in self._factors_of

    def factors_of(self, key: VariableKey) -> list:
        if key not in self._factors_of:
            raise UnknownKey(key)
        return [self.factors[f] for f in sorted(self._factors_of[key])]

    def observation_count(self, key: VariableKey) -> int:
        return sum(isinstance(f, Observation) for f in self.factors_of(key))

    def _ordering(self):
        offsets, n = {}, 0
        for k in self.pose_keys + self.landmark_keys:
            offsets[k] = n
            n += k.dim
        return offsets, n

    def total_error(self, estimate: GraphEstimate | None = None) -> float:
        e = self.estimate if estimate is None else estimate
        total = 0.0
        obs = []
        for f in self.factors.values():
            if isinstance(f, Observation):
                obs.append(f)
            else:
                w = f.noise.whiten(f.residual(e.poses, e.landmarks))
                total += 0.5 * float(w @ w)
        if obs:
            r, _, _, info = self._observation_batch(obs, e, jacobians=False)
            total += 0.5 * float(np.einsum("mi,mij,mj->", r, info, r))
        return total

    # -- linearization -----------------------------------------------------------

    @staticmethod
    def _observation_batch(obs, e: GraphEstimate, jacobians=True):
        rot = np.stack([e.poses[f.pose_key].rotation for f in obs])
        trans = np.stack([e.poses[f.pose_key].translation for f in obs])
        lm = np.stack([e.landmarks[f.landmark_key] for f in obs])
        z = np.stack([f.measured for f in obs])
        info = np.stack([f.noise.information for f in obs])
        p = np.einsum("mji,mj->mi", rot, lm - trans)
        r = z - p
        if not jacobians:
            return r, None, None, info
        m = len(obs)
        j_pose = np.zeros((m, 3, 6))
        px, py, pz = p[:, 0], p[:, 1], p[:, 2]
        # -skew(p)
        j_pose[:, 0, 1], j_pose[:, 0, 2] = pz, -py
        j_pose[:, 1, 0], j_pose[:, 1, 2] = -pz, px
        j_pose[:, 2, 0], j_pose[:, 2, 1] = py, -px
        j_pose[:, :, 3:] = np.eye(3)
        j_lm = -np.transpose(rot, (0, 2, 1))
        return r, j_pose, j_lm, info

    def linearize(self, estimate: GraphEstimate | None = None):
        """Gauss-Newton system (H, g, error) with g = J^T W r."""
        e = self.estimate if estimate is None else estimate
        offsets, n = self._ordering()
        h = np.zeros((n, n))
        g = np.zeros(n)
        error = 0.0
        obs = []
        for f in self.factors.values():
            if isinstance(f, Observation):
                obs.append(f)
                continue
            r, blocks = f.linearize(e.poses, e.landmarks)
            info = f.noise.information
            error += 0.5 * float(r @ info @ r)
            for ka, ja in blocks:
                oa = offsets[ka]
                g[oa : oa + ka.dim] += ja.T @ info @ r
                for kb, jb in blocks:
                    ob = offsets[kb]
                    h[oa : oa + ka.dim, ob : ob + kb.dim] += ja.T @ info @ jb
        if obs:
            r, jp, jl, info = self._observation_batch(obs, e)
            error += 0.5 * float(np.einsum("mi,mij,mj->", r, info, r))
            ip = np.array([offsets[f.pose_key] for f in obs])[:, None] + np.arange(6)
            il = np.array([offsets[f.landmark_key] for f in obs])[:, None] + np.arange(3)
            jp_t_info = np.einsum("mji,mjk->mik", jp, info)
            jl_t_info = np.einsum("mji,mjk->mik", jl, info)
            np.add.at(h, (ip[:, :, None], ip[:, None, :]), jp_t_info @ jp)
            hpl = jp_t_info @ jl
            np.add.at(h, (ip[:, :, None], il[:, None, :]), hpl)
            np.add.at(h, (il[:, :, None], ip[:, None, :]), np.transpose(hpl, (0, 2, 1)))
            np.add.at(h, (il[:, :, None], il[:, None, :]), jl_t_info @ jl)
            np.add.at(g, ip, np.einsum("mij,mj->mi", jp_t_info, r))
            np.add.at(g, il, np.einsum("mij,mj->mi", jl_t_info, r))
        return h, g, error, offsets

    def retract(self, delta: np.ndarray, offsets, estimate: GraphEstimate | None = None) -> GraphEstimate:
        e = self.estimate if estimate is None else estimate
        out = GraphEstimate()
        for k, pose in e.poses.items():
            o = offsets[k]
            out.poses[k] = se3_compose(pose, se3_exp(delta[o : o + 6]))
        for k, p in e.landmarks.items():
            o = offsets[k]
            out.landmarks[k] = p + delta[o : o + 3]
        return out

    # -- optimization -------------------------------------------------------------

    def check_constrained(self):
        if not any(isinstance(f, PriorPose) for f in self.factors.values()):
            raise Underconstrained("no PriorPose anchors the gauge")
        free = [str(k) for k, fs in self._factors_of.items() if not fs]
        if free:
            raise Underconstrained(f"variables without factors: {', '.join(free)}")

    def optimize(self, cfg: OptimizerConfig | None = None) -> OptimizeReport:
        cfg = cfg or OptimizerConfig()
        if not self._factors_of:
            return OptimizeReport(0.0, 0.0, 0, "empty")
        self.check_constrained()
        lam = cfg.lambda0
        current = self.estimate
        h, g, err, offsets = self.linearize(current)
        initial = err
        reason = "max_iterations"
        it = 0
        while it < cfg.max_iterations:
            it += 1
            if err <= 1e-300:
                reason = "zero_error"
                break
            accepted = False
            while not accepted:
                try:
                    chol = cho_factor(h + lam * np.eye(len(g)), lower=True, check_finite=True)
                    delta = -cho_solve(chol, g)
                except (LinAlgError, ValueError):
                    lam *= cfg.lambda_factor
                    if lam > cfg.lambda_max:
                        raise SingularSystem("normal equations not positive definite at lambda_max")
                    continue
                candidate = self.retract(delta, offsets, current)
                new_err = self.total_error(candidate)
                if np.isfinite(new_err) and new_err <= err:
                    accepted = True
                else:
                    lam *= cfg.lambda_factor
                    if lam > cfg.lambda_max:
                        break
            if not accepted:
                reason = "lambda_max"
                break
            decrease = (err - new_err) / max(err, 1e-300)
            step = float(np.linalg.norm(delta))
            current, err = candidate, new_err
            lam = max(lam / cfg.lambda_factor, 1e-15)
            if decrease < cfg.relative_tolerance:
                reason = "relative_decrease"
                break
            if step < cfg.step_tolerance:
                reason = "small_step"
                break
            h, g, err, offsets = self.linearize(current)
        self.estimate = current
        log.debug("LM %d iterations, error %.6g -> %.6g (%s)", it, initial, err, reason)
        return OptimizeReport(initial, err, it, reason)

    # -- marginals -------------------------------------------------------------------

    def _information_factor(self):
        h, _, _, offsets = self.linearize()
        try:
            chol = cho_factor(h, lower=True)
        except LinAlgError as exc:
            raise SingularSystem("information matrix is not positive definite") from exc
        return chol, offsets, len(h)

    def marginal_covariance(self, key: VariableKey) -> np.ndarray:
        if not self.has(key):
            raise UnknownKey(key)
        chol, offsets, n = self._information_factor()
        o = offsets[key]
        rhs = np.zeros((n, key.dim))
        rhs[o : o + key.dim] = np.eye(key.dim)
        cov = cho_solve(chol, rhs)[o : o + key.dim]
        return 0.5 * (cov + cov.T)

    def joint_marginals(self, pose_key: VariableKey, landmark_keys) -> dict:
        """Joint (pose, landmark) marginals for many landmarks from one factorization."""
        landmark_keys = list(landmark_keys)
        for k in [pose_key, *landmark_keys]:
            if not self.has(k):
                raise UnknownKey(k)
        if not landmark_keys:
            return {}
        chol, offsets, n = self._information_factor()
        cols = [offsets[pose_key] + i for i in range(6)]
        for k in landmark_keys:
            cols.extend(offsets[k] + i for i in range(3))
        rhs = np.zeros((n, len(cols)))
        rhs[cols, np.arange(len(cols))] = 1.0
        sol = cho_solve(chol, rhs)
        out = {}
        op = offsets[pose_key]
        for i, k in enumerate(landmark_keys):
            ol = offsets[k]
            c = 6 + 3 * i
            m = np.zeros((9, 9))
            m[:6, :6] = sol[op : op + 6, :6]
            m[:6, 6:] = sol[op : op + 6, c : c + 3]
            m[6:, :6] = sol[ol : ol + 3, :6]
            m[6:, 6:] = sol[ol : ol + 3, c : c + 3]
            out[k] = JointMarginal(0.5 * (m + m.T))
        return out

    def joint_marginal_covariance(self, pose_key: VariableKey, landmark_key: VariableKey) -> JointMarginal:
        return self.joint_marginals(pose_key, [landmark_key])[landmark_key]
