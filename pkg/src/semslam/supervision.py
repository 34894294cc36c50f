"""Map supervision by an external evaluator.

The current map is projected into the camera as numbered boxes (a composite),
rendered into two prompts (landmark evaluation and descriptive label
generation), and the textual verdicts are parsed and applied to the graph,
the confusion matrices and the label database.
"""
from __future__ import annotations

import ast
import json
import logging
import re
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .geometry import CameraIntrinsics, Pose, clip_box, project_box, transform_to_frame
from .graph import FactorGraph, OptimizerConfig
from .semantics import ConfusionMatrix, LabelDatabase, Status

log = logging.getLogger(__name__)


class MalformedResponse(ValueError):
    pass


class MisalignedCorrection(MalformedResponse):
    pass


class StaleComposite(LookupError):
    """A composite refers to a landmark that no longer exists."""


@dataclass(frozen=True)
class OverlayEntry:
    key: object
    number: int
    box: tuple
    label: str
    crop_box: tuple
    position: tuple = ()
    label_set: tuple = ()


@dataclass
class CompositeSpec:
    frame_id: int
    entries: list
    width: int
    height: int

    def __len__(self):
        return len(self.entries)

    def key_of(self, number: int):
        for e in self.entries:
            if e.number == number:
                return e.key
        raise StaleComposite(f"display number {number} is not in composite {self.frame_id}")

    def to_wire(self) -> list:
        return [
            {"number": e.number, "box": [int(round(v)) for v in e.box], "label": e.label}
            for e in self.entries
        ]


def build_composite(
    landmarks: dict,
    positions: dict,
    pose: Pose,
    k: CameraIntrinsics,
    frame_id: int,
    max_overlays: int = 25,
) -> CompositeSpec:
    """Project every landmark box into the camera and number the visible ones.

    Numbers follow ascending landmark key order starting at 1. When more than
    ``max_overlays`` landmarks are visible the nearest ones are kept.
    """
    visible = []
    for key in sorted(landmarks, key=lambda k_: k_.index):
        lm = landmarks[key]
        hull = project_box(positions[key], lm.extent, pose, k)
        if hull is None:
            continue
        box = clip_box(hull, k)
        if box is None:
            continue
        depth = transform_to_frame(pose, positions[key])[2]
        visible.append((depth, key, box))
    if len(visible) > max_overlays:
        visible = sorted(visible, key=lambda v: (v[0], v[1].index))[:max_overlays]
        visible.sort(key=lambda v: v[1].index)
    entries = []
    for number, (_, key, box) in enumerate(visible, start=1):
        lm = landmarks[key]
        pad_u = 0.1 * (box[2] - box[0])
        pad_v = 0.1 * (box[3] - box[1])
        crop = clip_box((box[0] - pad_u, box[1] - pad_v, box[2] + pad_u, box[3] + pad_v), k)
        entries.append(
            OverlayEntry(
                key=key,
                number=number,
                box=box,
                label=lm.primary_label,
                crop_box=crop,
                position=tuple(float(x) for x in positions[key]),
                label_set=tuple(lm.label_set),
            )
        )
    return CompositeSpec(frame_id, entries, k.width, k.height)


# -- prompts ---------------------------------------------------------------------

LANDMARK_EVAL_TEMPLATE = """\
You are an assistant that identifies incorrect tags. You respond according to the given steps.
Step 1. Verify that each tag matches the object in its bounding box.
   example 1:
   Tag 1 (bag): Incorrect. It is empty
   Tag 4 (apple): Incorrect. It contains <object name>
   Tag 5 (apple): Correct
   Tag 6 (soccer ball): Correct
   Tag 7 (ball): Correct
   Tag 8 (ball): Correct
   Tag 11 (chair): Incorrect. It contains <object name>

Step 2. Determine if there are multiple tags pointing to the same object among the tags identified as correct in Step 1. Return Tags [number of multiple tags]. If there are no multiple tags for one object, return "no multiple tag".
   example 1:
   Tags[6, 7, 8] : ball, soccer ball, ball are visually pointing to the same object, which is a blue ball under the desk . <describe the look of an object>

Step 3. If there are multiple tags for one object from the response of Step 2, identify which tag is the most accurate. Choose one most precise tag.
   example 1:
   Tag [6]: object name "soccer ball" is more precise. So, precise_tag = [7]

Step 4. Provide lists, <empty | incorrect | corrected | duplicated | precise_tags_in_duplicated>_tags =[], results from Steps 1 and 3. [] if No tag.
   example 1:
   empty_tags = [1]
   incorrect_tags = [4, 11]
   corrected_tags = ['<object name>', '<object name>']
   duplicated_tags = [(6, 7, 8), ()]
   precise_tags_in_duplicated = [7]
"""

CLASS_LABEL_GEN_TEMPLATE = """\
Step 1: Identify the features of the object inside the bounding box for each tag number. Use the cropped images for reference. If there are multiple objects of the same category, list each object with its unique color separately.

 1. Color: What is the primary color of the <object>?
 2. Shape: What shape or structural features does the <object> have?
 3. Distinguishing Features: What features most effectively distinguish this <object> from similar objects?
Example:
 <object>: 1. brown color, 2. rectangle shape, 3. brown color, with a handle

Step 2: Create a descriptive tag for each <object> based on your answers. If multiple objects are identified, create separate tags for each. Use the format: tag_<tag_number> = []

Example:
 tag_<tag_number> = ['green <object>', 'rectangular shape <object>', 'green <object> with a handle']
 tag_<tag_number> = ['brown <object>', 'rectangular shape <object>', 'brown <object> with a handle']
"""


def _tag_lines(spec: CompositeSpec) -> str:
    return "\n".join(f"Tag {e.number} ({e.label})" for e in spec.entries)


def render_landmark_eval_prompt(spec: CompositeSpec) -> str:
    return f"{LANDMARK_EVAL_TEMPLATE}\nTags in the image:\n{_tag_lines(spec)}\n"


def render_class_label_gen_prompt(spec: CompositeSpec) -> str:
    return f"{CLASS_LABEL_GEN_TEMPLATE}\nTags in the image:\n{_tag_lines(spec)}\n"


# -- responses -----------------------------------------------------------------------


@dataclass
class EvalFeedback:
    empty: list = field(default_factory=list)
    incorrect: list = field(default_factory=list)
    corrected: list = field(default_factory=list)
    duplicated: list = field(default_factory=list)  # tuples of display numbers
    precise_in_duplicated: list = field(default_factory=list)

    def is_empty(self) -> bool:
        return not (self.empty or self.incorrect or self.duplicated)


@dataclass
class GenFeedback:
    labels: dict = field(default_factory=dict)  # display number -> [label, ...]


def _bracket_span(text: str, start: int) -> int:
    """Index one past the bracket that closes ``text[start]``."""
    closing = {"[": "]", "(": ")"}
    stack = []
    quote = None
    i = start
    while i < len(text):
        ch = text[i]
        if quote:
            if ch == "\\":
                i += 1
            elif ch == quote:
                quote = None
        elif ch in "'\"":
            quote = ch
        elif ch in closing:
            stack.append(closing[ch])
        elif ch in ")]":
            if not stack or stack.pop() != ch:
                raise MalformedResponse(f"mismatched {ch!r} at offset {i}")
            if not stack:
                return i + 1
        i += 1
    raise MalformedResponse(f"unbalanced bracket opened at offset {start}")


def _split_top_level(body: str) -> list:
    parts, depth, quote, cur = [], 0, None, []
    for ch in body:
        if quote:
            cur.append(ch)
            if ch == quote:
                quote = None
            continue
        if ch in "'\"":
            quote = ch
        elif ch in "[(":
            depth += 1
        elif ch in ")]":
            depth -= 1
        elif ch == "," and depth == 0:
            parts.append("".join(cur).strip())
            cur = []
            continue
        cur.append(ch)
    tail = "".join(cur).strip()
    if tail:
        parts.append(tail)
    return parts


def _literal(fragment: str):
    """Evaluate a bracketed list; bare words fall back to plain strings."""
    try:
        value = ast.literal_eval(fragment)
    except (ValueError, SyntaxError):
        inner = fragment.strip()[1:-1]
        value = []
        for part in _split_top_level(inner):
            if part[:1] in "[(":
                value.append(tuple(_literal(part)))
            elif re.fullmatch(r"-?\d+", part):
                value.append(int(part))
            else:
                value.append(part.strip("'\" "))
    if isinstance(value, tuple):
        value = list(value)
    if not isinstance(value, list):
        raise MalformedResponse(f"expected a list, got {fragment!r}")
    return value


def _named_list(text: str, stem: str, suffix: str = ""):
    pattern = re.compile(rf"\b{stem}_(?:tags?|labels?){suffix}\s*=\s*\[")
    matches = list(pattern.finditer(text))
    if not matches:
        raise MalformedResponse(f"missing list {stem}_tags{suffix}")
    start = matches[-1].end() - 1
    end = _bracket_span(text, start)
    return _literal(text[start:end])


def _as_numbers(values, name) -> list:
    out = []
    for v in values:
        if isinstance(v, bool) or not isinstance(v, (int, str)) or not re.fullmatch(r"\d+", str(v).strip()):
            raise MalformedResponse(f"{name}: {v!r} is not a tag number")
        out.append(int(v))
    return out


def parse_landmark_eval(text: str) -> EvalFeedback:
    empty = _as_numbers(_named_list(text, "empty"), "empty")
    incorrect = _as_numbers(_named_list(text, "incorrect"), "incorrect")
    corrected = [str(v).strip() for v in _named_list(text, "corrected")]
    raw_dup = _named_list(text, "duplicated")
    precise = _as_numbers(_named_list(text, "precise", "_in_duplicated"), "precise")

    if raw_dup and all(isinstance(v, (int, str)) and not isinstance(v, bool) for v in raw_dup):
        raw_dup = [tuple(raw_dup)]
    groups = []
    for g in raw_dup:
        if isinstance(g, (int, str)):
            g = (g,)
        g = tuple(_as_numbers(g, "duplicated"))
        if g:
            groups.append(g)
    if len(corrected) < len(incorrect):
        raise MisalignedCorrection(
            f"{len(incorrect)} incorrect tags but only {len(corrected)} corrections"
        )
    if len(precise) != len(groups) or any(p not in g for p, g in zip(precise, groups)):
        raise MalformedResponse(f"precise tags {precise} do not match duplicate groups {groups}")
    return EvalFeedback(empty, incorrect, corrected, groups, precise)


def parse_class_label_gen(text: str) -> GenFeedback:
    labels: dict[int, list] = {}

    def put(number, values):
        vals = [str(v).strip() for v in values if str(v).strip()]
        if vals:
            bucket = labels.setdefault(number, [])
            bucket.extend(v for v in vals if v not in bucket)

    for m in re.finditer(r"\btag_(\d+)\s*=\s*\[", text):
        start = m.end() - 1
        put(int(m.group(1)), _literal(text[start : _bracket_span(text, start)]))
    for m in re.finditer(r"\bdescriptive_labels?\s*=\s*\[", text):
        numbers = re.findall(r"\[\s*(\d+)\s*\]", text[: m.start()])
        start = m.end() - 1
        values = _literal(text[start : _bracket_span(text, start)])
        if not numbers:
            log.warning("descriptive label without a preceding tag number: %s", values)
            continue
        put(int(numbers[-1]), values)
    return GenFeedback(labels)


def render_landmark_eval_response(fb: EvalFeedback) -> str:
    def ints(xs):
        return "[" + ", ".join(str(int(x)) for x in xs) + "]"

    groups = ", ".join(repr(tuple(int(x) for x in g)) for g in fb.duplicated)
    return (
        f"empty_tags = {ints(fb.empty)}\n"
        f"incorrect_tags = {ints(fb.incorrect)}\n"
        f"corrected_tags = [{', '.join(repr(str(c)) for c in fb.corrected)}]\n"
        f"duplicated_tags = [{groups}]\n"
        f"precise_tags_in_duplicated = {ints(fb.precise_in_duplicated)}\n"
    )


def render_class_label_gen_response(gen: GenFeedback) -> str:
    return "".join(
        f"tag_{n} = [{', '.join(repr(str(v)) for v in gen.labels[n])}]\n" for n in sorted(gen.labels)
    )


# -- oracles ----------------------------------------------------------------------------


class Oracle(Protocol):
    def landmark_eval(self, spec: CompositeSpec, prompt: str) -> str | None: ...

    def class_label_gen(self, spec: CompositeSpec, prompt: str) -> str | None: ...


class HttpOracle:
    """Posts composites to a remote evaluator; failures skip the round."""

    def __init__(self, url: str, timeout: float = 30.0, image_path: str | None = None):
        self.url = url.rstrip("/")
        self.timeout = timeout
        self.image_path = image_path

    def _post(self, endpoint: str, spec: CompositeSpec, prompt: str):
        payload = {"frame_id": spec.frame_id, "prompt": prompt, "overlays": spec.to_wire()}
        if self.image_path is not None:
            payload["image_path"] = self.image_path
        req = urllib.request.Request(
            f"{self.url}/{endpoint}",
            data=json.dumps(payload).encode("utf-8"),
            headers={"Content-Type": "application/json"},
            method="POST",
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                if resp.status != 200:
                    log.warning("oracle %s returned HTTP %s; skipping round", endpoint, resp.status)
                    return None
                body = json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, TimeoutError, OSError, ValueError) as exc:
            log.warning("oracle %s unavailable (%s); skipping round", endpoint, exc)
            return None
        text = body.get("text") if isinstance(body, dict) else None
        if not isinstance(text, str):
            log.warning("oracle %s response lacks a text field; skipping round", endpoint)
            return None
        return text

    def landmark_eval(self, spec, prompt):
        return self._post("landmark_eval", spec, prompt)

    def class_label_gen(self, spec, prompt):
        return self._post("class_label_gen", spec, prompt)


# -- applying feedback ------------------------------------------------------------------


@dataclass
class EditEntry:
    frame: int
    action: str
    landmark: int
    detail: dict = field(default_factory=dict)

    def to_dict(self):
        return {"frame": self.frame, "action": self.action, "landmark": self.landmark, **self.detail}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        return cls(d.pop("frame"), d.pop("action"), d.pop("landmark"), d)


class EditLog(list):
    """Ordered record of every map mutation plus skipped (stale) verdicts."""

    def add(self, frame, action, key, **detail):
        self.append(EditEntry(frame, action, key.index if hasattr(key, "index") else int(key), detail))

    @property
    def mutations(self) -> list:
        return [e for e in self if e.action != "stale"]


def _remove_landmark(graph: FactorGraph, landmarks: dict, key) -> int:
    landmarks.pop(key, None)
    return graph.remove_landmark_factors(key)


def apply_feedback(
    spec: CompositeSpec,
    evaluation: EvalFeedback | None,
    generation: GenFeedback | None,
    graph: FactorGraph,
    landmarks: dict,
    m: ConfusionMatrix,
    d: ConfusionMatrix,
    labeldb: LabelDatabase,
    optimizer: OptimizerConfig | None = None,
) -> EditLog:
    """Apply one round of verdicts: removals, corrections, merges, then label generation."""
    edits = EditLog()
    frame = spec.frame_id
    evaluation = evaluation or EvalFeedback()
    generation = generation or GenFeedback()

    def resolve(number, why):
        try:
            key = spec.key_of(number)
        except StaleComposite:
            edits.add(frame, "stale", -1, number=number, reason=why)
            return None
        if key not in landmarks or not graph.has(key):
            edits.add(frame, "stale", key, number=number, reason=why)
            return None
        return key

    removed_any = False
    for number in evaluation.empty:
        key = resolve(number, "empty")
        if key is None:
            continue
        landmarks[key].status = Status.EMPTY
        n = _remove_landmark(graph, landmarks, key)
        removed_any = True
        edits.add(frame, "remove_empty", key, number=number, factors=n)

    flagged = set()
    for number, new_label in zip(evaluation.incorrect, evaluation.corrected):
        key = resolve(number, "incorrect")
        if key is None:
            continue
        lm = landmarks[key]
        old = lm.primary_label
        m.record(new_label, old)
        lm.primary_label = new_label
        lm.label_set = [new_label]
        lm.status = Status.REFINED
        flagged.add(key)
        edits.add(frame, "relabel", key, number=number, old=old, new=new_label)

    for group, precise_number in zip(evaluation.duplicated, evaluation.precise_in_duplicated):
        keeper = resolve(precise_number, "precise")
        if keeper is None:
            continue
        survivor = landmarks[keeper]
        for number in group:
            if number == precise_number:
                continue
            key = resolve(number, "duplicated")
            if key is None or key == keeper:
                continue
            dup = landmarks[key]
            d.record(survivor.primary_label, dup.primary_label)
            survivor.add_labels(dup.label_set)
            dup.status = Status.DUPLICATED
            n = _remove_landmark(graph, landmarks, key)
            removed_any = True
            edits.add(
                frame, "merge_duplicate", key, number=number, into=keeper.index,
                precise=survivor.primary_label, duplicate=dup.primary_label, factors=n,
            )
        survivor.status = Status.PRECISE

    for number in sorted(generation.labels):
        key = resolve(number, "generated")
        if key is None or key in flagged:
            continue
        lm = landmarks[key]
        added = lm.add_labels(generation.labels[number])
        for label in generation.labels[number]:
            labeldb.add(label)
        lm.status = Status.GENERATED
        if added:
            edits.add(frame, "generate_label", key, number=number, labels=added)

    if removed_any and graph.factors:
        graph.optimize(optimizer)
    return edits
