"""Open-vocabulary label bookkeeping.

Embeddings for label similarity, growable confusion matrices (one for
misclassifications, one for duplicate/precise label pairs), Bayesian
relabeling of detections, and proactive duplicate-landmark detection.
"""
from __future__ import annotations

import enum
import hashlib
import re
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from .geometry import CameraIntrinsics, Pose, project_box


class EmbeddingUnavailable(RuntimeError):
    pass


class UnknownLabel(KeyError):
    pass


def normalize_label(label: str) -> str:
    return re.sub(r"\s+", " ", label.replace("_", " ")).strip().lower()


class EmbeddingProvider(Protocol):
    def embed(self, label: str) -> np.ndarray: ...


class NGramEmbedding:
    """Character n-gram counts hashed into a fixed-size unit vector.

    Labels are lower-cased, underscores become spaces, and the string is
    padded with ``^``/``$`` so word boundaries contribute their own grams.
    """

    def __init__(self, dim: int = 256, n: int = 3):
        self.dim = dim
        self.n = n
        self._cache: dict[str, np.ndarray] = {}

    def grams(self, label: str) -> list[str]:
        text = f"^{normalize_label(label)}$"
        return [text[i : i + self.n] for i in range(len(text) - self.n + 1)]

    def _bucket(self, gram: str) -> int:
        digest = hashlib.blake2b(gram.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little") % self.dim

    def embed(self, label: str) -> np.ndarray:
        if not normalize_label(label):
            raise ValueError("label must be non-empty")
        vec = self._cache.get(label)
        if vec is None:
            vec = np.zeros(self.dim)
            for g in self.grams(label):
                vec[self._bucket(g)] += 1.0
            vec /= np.linalg.norm(vec)
            vec.flags.writeable = False
            self._cache[label] = vec
        return vec


class TextProtocolEmbedding:
    """Adapter for an external embedding service.

    ``transport`` sends the label string and returns the raw response: a
    fixed number of decimal floats separated by whitespace or commas.
    """

    def __init__(self, transport: Callable[[str], str], dim: int):
        self.transport = transport
        self.dim = dim
        self._cache: dict[str, np.ndarray] = {}

    def embed(self, label: str) -> np.ndarray:
        if label in self._cache:
            return self._cache[label]
        try:
            raw = self.transport(label)
        except Exception as exc:  # transport failures of any kind
            raise EmbeddingUnavailable(str(exc)) from exc
        try:
            vec = np.array([float(tok) for tok in re.split(r"[\s,]+", raw.strip()) if tok])
        except ValueError as exc:
            raise EmbeddingUnavailable(f"unparseable embedding response for {label!r}") from exc
        if vec.shape != (self.dim,) or not np.all(np.isfinite(vec)) or not np.linalg.norm(vec) > 0:
            raise EmbeddingUnavailable(f"bad embedding for {label!r}: shape {vec.shape}")
        vec = vec / np.linalg.norm(vec)
        self._cache[label] = vec
        return vec


def embed_label(provider: EmbeddingProvider, label: str) -> np.ndarray:
    return provider.embed(label)


class ConfusionMatrix:
    """Label-indexed count matrix ``counts[truth][observed]`` that grows on demand."""

    def __init__(self, kappa: float = 1.0):
        if kappa <= 0:
            raise ValueError("kappa must be positive")
        self.kappa = kappa
        self.labels: list[str] = []
        self._index: dict[str, int] = {}
        self.counts = np.zeros((0, 0), dtype=np.int64)

    def __len__(self):
        return len(self.labels)

    def __contains__(self, label):
        return label in self._index

    def add_label(self, label: str) -> int:
        if label not in self._index:
            if not label:
                raise ValueError("empty label")
            self._index[label] = len(self.labels)
            self.labels.append(label)
            self.counts = np.pad(self.counts, ((0, 1), (0, 1)))
        return self._index[label]

    def record(self, truth: str, observed: str) -> None:
        i = self.add_label(truth)
        j = self.add_label(observed)
        self.counts[i, j] += 1

    def count(self, truth: str, observed: str) -> int:
        if truth not in self._index or observed not in self._index:
            return 0
        return int(self.counts[self._index[truth], self._index[observed]])

    def likelihood(self, observed: str, hypothesis: str) -> float:
        """Laplace-smoothed P(observed | hypothesis)."""
        try:
            i, j = self._index[hypothesis], self._index[observed]
        except KeyError as exc:
            raise UnknownLabel(exc.args[0]) from None
        row = self.counts[i]
        return (row[j] + self.kappa) / (row.sum() + self.kappa * len(self.labels))

    def to_dict(self) -> dict:
        return {"labels": list(self.labels), "counts": self.counts.tolist(), "kappa": self.kappa}

    @classmethod
    def from_dict(cls, d: dict) -> "ConfusionMatrix":
        m = cls(d.get("kappa", 1.0))
        for label in d["labels"]:
            m.add_label(label)
        counts = np.array(d["counts"], dtype=np.int64).reshape(len(m.labels), len(m.labels))
        if (counts < 0).any():
            raise ValueError("negative counts")
        m.counts = counts
        return m

    def __eq__(self, other):
        return (
            isinstance(other, ConfusionMatrix)
            and self.labels == other.labels
            and np.array_equal(self.counts, other.counts)
            and self.kappa == other.kappa
        )


def confusion_record(m: ConfusionMatrix, truth_label: str, observed_label: str) -> None:
    m.record(truth_label, observed_label)


def confusion_likelihood(m: ConfusionMatrix, observed: str, hypothesis: str) -> float:
    return m.likelihood(observed, hypothesis)


def posterior_class_update(det, m: ConfusionMatrix):
    """Posterior over the classes in ``m`` for a detection's label.

    The detection confidence is the prior mass of its own class; the rest is
    split evenly across the other N-1 classes. Returns (label, posterior).
    Unknown labels or N < 2 return the detection label unchanged.
    """
    observed = det.label
    n = len(m)
    if observed not in m or n < 2:
        return observed, {observed: 1.0}
    conf = float(det.confidence)
    others = (1.0 - conf) / (n - 1)
    scores = {}
    for c in m.labels:
        prior = conf if c == observed else others
        scores[c] = prior * m.likelihood(observed, c)
    total = sum(scores.values())
    posterior = {c: s / total for c, s in scores.items()}
    best = max(posterior.values())
    if best - posterior[observed] <= 1e-12 * best:
        return observed, posterior
    label = next(c for c in m.labels if posterior[c] == best)
    return label, posterior


class Status(enum.Enum):
    EMPTY = "E"
    INCORRECT = "IC"
    REFINED = "R_IC"
    CORRECT = "C"
    DUPLICATED = "D"
    PRECISE = "P"
    GENERATED = "G"


@dataclass
class Landmark:
    """Semantic side of a map landmark; its position lives in the factor graph."""

    key: object
    label_set: list
    extent: np.ndarray = field(default_factory=lambda: np.full(3, 0.2))
    status: Status = Status.CORRECT
    primary_label: str = ""
    posterior: dict = field(default_factory=dict)
    created_frame: int = -1

    def __post_init__(self):
        self.extent = np.asarray(self.extent, dtype=float)
        if not self.primary_label:
            self.primary_label = self.label_set[0]
        if self.primary_label not in self.label_set:
            self.label_set.insert(0, self.primary_label)

    def add_labels(self, labels) -> list:
        added = [lab for lab in labels if lab not in self.label_set]
        self.label_set.extend(added)
        return added


class LabelDatabase:
    """Ordered, duplicate-free set of labels handed to the detector."""

    def __init__(self, labels=()):
        self._labels: dict[str, None] = {}
        for label in labels:
            self.add(label)

    def add(self, label: str) -> bool:
        if label in self._labels:
            return False
        self._labels[label] = None
        return True

    def __contains__(self, label):
        return label in self._labels

    def __iter__(self):
        return iter(self._labels)

    def __len__(self):
        return len(self._labels)

    def to_list(self) -> list:
        return list(self._labels)


def box_iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def find_duplicate_pairs(
    landmarks: dict,
    positions: dict,
    pose: Pose,
    k: CameraIntrinsics,
    iou_threshold: float = 0.90,
    distance_threshold: float = 0.10,
) -> list:
    """Landmark pairs whose projected boxes overlap (IoU) and whose centers nearly coincide."""
    boxes = {}
    for key in sorted(landmarks, key=lambda k_: k_.index):
        box = project_box(positions[key], landmarks[key].extent, pose, k)
        if box is not None:
            boxes[key] = box
    keys = list(boxes)
    pairs = []
    for i, a in enumerate(keys):
        for b in keys[i + 1 :]:
            if np.linalg.norm(positions[a] - positions[b]) >= distance_threshold:
                continue
            if box_iou(boxes[a], boxes[b]) > iou_threshold:
                pairs.append((a, b))
    return pairs


@dataclass(frozen=True)
class Merge:
    removed: object
    survivor: object
    precise_label: str
    duplicate_label: str


def resolve_duplicates(pairs, d_matrix: ConfusionMatrix, landmarks: dict) -> list:
    """Decide which member of each duplicate pair to drop using the duplicates matrix.

    The landmark whose primary label D records as the duplicate (strict count
    majority) is dropped and its labels merge into the survivor. Ties and
    missing evidence keep both. Mutates survivors' label sets; the caller
    removes the dropped landmarks from the graph.
    """
    merges = []
    gone = set()
    for a, b in pairs:
        if a in gone or b in gone:
            continue
        la, lb = landmarks[a].primary_label, landmarks[b].primary_label
        ab, ba = d_matrix.count(la, lb), d_matrix.count(lb, la)
        if ab > ba:
            survivor, removed = a, b
        elif ba > ab:
            survivor, removed = b, a
        else:
            continue
        landmarks[survivor].add_labels(landmarks[removed].label_set)
        gone.add(removed)
        merges.append(
            Merge(removed, survivor, landmarks[survivor].primary_label, landmarks[removed].primary_label)
        )
    return merges
