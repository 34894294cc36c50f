"""Reference implementations used to check the package.

Nothing here imports semslam's geometry or graph math: poses are 4x4
matrices, exponentials and logarithms come from scipy.linalg, Jacobians from
central differences, and the solver is plain dense Gauss-Newton.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.linalg import expm, logm
from scipy.special import erf


# -- SE(3) as 4x4 matrices --------------------------------------------------------------


def hat6(xi) -> np.ndarray:
    w, v = xi[:3], xi[3:]
    m = np.zeros((4, 4))
    m[:3, :3] = [[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]]
    m[:3, 3] = v
    return m


def vee6(m) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0], m[0, 3], m[1, 3], m[2, 3]])


def exp6(xi) -> np.ndarray:
    return expm(hat6(np.asarray(xi, dtype=float)))


def log6(t) -> np.ndarray:
    return vee6(np.real(logm(t)))


def inv4(t) -> np.ndarray:
    out = np.eye(4)
    out[:3, :3] = t[:3, :3].T
    out[:3, 3] = -t[:3, :3].T @ t[:3, 3]
    return out


def random_pose(rng, trans_scale=1.0, rot_scale=1.0) -> np.ndarray:
    return exp6(np.concatenate([rng.normal(size=3) * rot_scale, rng.normal(size=3) * trans_scale]))


# -- dense Gauss-Newton -----------------------------------------------------------------


class DenseProblem:
    """Least squares over poses (4x4) and points with right-perturbed poses.

    Factors are tuples:
      ("prior", i, mean4x4, info6)
      ("between", i, j, rel4x4, info6)
      ("obs", i, j, z3, info3)
    """

    def __init__(self, poses, points):
        self.poses = [np.array(p, dtype=float) for p in poses]
        self.points = [np.array(p, dtype=float) for p in points]
        self.factors = []

    @property
    def n(self):
        return 6 * len(self.poses) + 3 * len(self.points)

    def _pose_offset(self, i):
        return 6 * i

    def _point_offset(self, j):
        return 6 * len(self.poses) + 3 * j

    def residual(self, f, poses, points) -> np.ndarray:
        kind = f[0]
        if kind == "prior":
            _, i, mean, _ = f
            return log6(inv4(mean) @ poses[i])
        if kind == "between":
            _, i, j, rel, _ = f
            return log6(inv4(rel) @ inv4(poses[i]) @ poses[j])
        _, i, j, z, _ = f
        t = poses[i]
        return z - t[:3, :3].T @ (points[j] - t[:3, 3])

    def info(self, f):
        return f[-1]

    def perturb(self, delta):
        poses = [p @ exp6(delta[6 * i : 6 * i + 6]) for i, p in enumerate(self.poses)]
        o = 6 * len(self.poses)
        points = [p + delta[o + 3 * j : o + 3 * j + 3] for j, p in enumerate(self.points)]
        return poses, points

    def stacked(self, delta=None):
        poses, points = (self.poses, self.points) if delta is None else self.perturb(delta)
        return np.concatenate([self.residual(f, poses, points) for f in self.factors])

    def weight(self):
        blocks = [self.info(f) for f in self.factors]
        size = sum(len(b) for b in blocks)
        w = np.zeros((size, size))
        o = 0
        for b in blocks:
            w[o : o + len(b), o : o + len(b)] = b
            o += len(b)
        return w

    def _variables(self, f):
        """(offset, dim) of each variable a factor touches."""
        if f[0] == "prior":
            return [(self._pose_offset(f[1]), 6)]
        if f[0] == "between":
            return [(self._pose_offset(f[1]), 6), (self._pose_offset(f[2]), 6)]
        return [(self._pose_offset(f[1]), 6), (self._point_offset(f[2]), 3)]

    def _perturbed(self, offset, vec):
        poses, points = list(self.poses), list(self.points)
        if offset < 6 * len(poses):
            i = offset // 6
            poses[i] = poses[i] @ exp6(vec)
        else:
            j = (offset - 6 * len(poses)) // 3
            points[j] = points[j] + vec
        return poses, points

    def jacobian(self, eps=1e-6) -> np.ndarray:
        """Central-difference Jacobian, assembled factor by factor."""
        rows = []
        for f in self.factors:
            m = 6 if f[0] != "obs" else 3
            block = np.zeros((m, self.n))
            for offset, dim in self._variables(f):
                for k in range(dim):
                    d = np.zeros(dim)
                    d[k] = eps
                    plus = self.residual(f, *self._perturbed(offset, d))
                    minus = self.residual(f, *self._perturbed(offset, -d))
                    block[:, offset + k] = (plus - minus) / (2 * eps)
            rows.append(block)
        return np.vstack(rows)

    def cost(self) -> float:
        r = self.stacked()
        return 0.5 * float(r @ self.weight() @ r)

    def information(self) -> np.ndarray:
        j = self.jacobian()
        return j.T @ self.weight() @ j

    def solve(self, iterations=30, tol=1e-10):
        w = self.weight()
        for _ in range(iterations):
            r = self.stacked()
            j = self.jacobian()
            h = j.T @ w @ j
            step = -np.linalg.solve(h, j.T @ w @ r)
            self.poses, self.points = self.perturb(step)
            if np.linalg.norm(step) < tol:
                break
        return self


# -- chi-square quantiles ------------------------------------------------------------------


def chi2_cdf(x: float, d: int) -> float:
    """Closed-form chi-square CDF for d in {1, 2, 3}."""
    if x <= 0:
        return 0.0
    if d == 1:
        return erf(math.sqrt(x / 2))
    if d == 2:
        return 1.0 - math.exp(-x / 2)
    if d == 3:
        return erf(math.sqrt(x / 2)) - math.sqrt(2 * x / math.pi) * math.exp(-x / 2)
    raise ValueError("oracle supports d = 1, 2, 3")


def chi2_quantile_bisect(alpha: float, d: int) -> float:
    lo, hi = 0.0, 100.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if chi2_cdf(mid, d) < alpha:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def gaussian_density(r, c) -> float:
    r = np.asarray(r, dtype=float)
    d = len(r)
    return float(np.exp(-0.5 * r @ np.linalg.inv(c) @ r) / np.sqrt((2 * np.pi) ** d * np.linalg.det(c)))


# -- Bayesian relabel -----------------------------------------------------------------------


def bayes_enumerate(labels, counts, kappa, observed, confidence):
    """Exhaustive posterior over ``labels`` for a detection labelled ``observed``."""
    n = len(labels)
    j = labels.index(observed)
    post = {}
    for i, c in enumerate(labels):
        like = (counts[i][j] + kappa) / (sum(counts[i]) + kappa * n)
        prior = confidence if c == observed else (1 - confidence) / (n - 1)
        post[c] = prior * like
    z = sum(post.values())
    post = {c: p / z for c, p in post.items()}
    best = max(post.values())
    if math.isclose(post[observed], best, rel_tol=1e-12, abs_tol=0.0):
        return observed, post
    return next(c for c in labels if post[c] == best), post


# -- projection arithmetic -------------------------------------------------------------------


def projected_box(center, extent, rot, trans, fx, fy, cx, cy):
    """Pixel hull of the eight box corners (plus center) for a camera at (rot, trans)."""
    pts = [np.asarray(center, dtype=float)]
    for sx in (-0.5, 0.5):
        for sy in (-0.5, 0.5):
            for sz in (-0.5, 0.5):
                pts.append(np.asarray(center) + np.array([sx, sy, sz]) * np.asarray(extent))
    us, vs = [], []
    for p in pts:
        q = rot.T @ (p - trans)
        us.append(fx * q[0] / q[2] + cx)
        vs.append(fy * q[1] / q[2] + cy)
    return min(us), min(vs), max(us), max(vs)


def rect_iou(a, b) -> float:
    w = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    h = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = w * h
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


# -- character n-grams ------------------------------------------------------------------------


def ngram_cosine(a: str, b: str, n: int = 3) -> float:
    """Cosine of exact (unhashed) padded n-gram count vectors."""
    from collections import Counter

    def grams(s):
        s = "^" + " ".join(s.replace("_", " ").lower().split()) + "$"
        return Counter(s[i : i + n] for i in range(len(s) - n + 1))

    ga, gb = grams(a), grams(b)
    dot = sum(ga[g] * gb[g] for g in ga)
    return dot / math.sqrt(sum(v * v for v in ga.values()) * sum(v * v for v in gb.values()))
