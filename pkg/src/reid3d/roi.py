"""Detection filtering, species gating and detection-quality evaluation.

Boxes are (x1, y1, x2, y2) in continuous pixel coordinates with x1 < x2
and y1 < y2; areas are plain products of the side lengths.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import httpx
import numpy as np

from .errors import GateError, InputError, MetricError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Detection:
    image_id: str
    bbox: tuple[float, float, float, float]
    score: float
    label: str = "animal"

    def __post_init__(self):
        x1, y1, x2, y2 = (float(v) for v in self.bbox)
        if not (x1 < x2 and y1 < y2):
            raise InputError(f"invalid box {self.bbox}")
        if not 0.0 <= float(self.score) <= 1.0:
            raise InputError(f"score {self.score} outside [0, 1]")
        object.__setattr__(self, "bbox", (x1, y1, x2, y2))
        object.__setattr__(self, "score", float(self.score))

    def to_json(self) -> dict:
        return {"image": self.image_id, "bbox": list(self.bbox), "score": self.score, "label": self.label}

    @classmethod
    def from_json(cls, d: dict) -> "Detection":
        try:
            return cls(str(d["image"]), tuple(d["bbox"]), d["score"], d.get("label", "animal"))
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"malformed detection record {d!r}: {exc}") from exc


def read_detections(path) -> list[Detection]:
    out = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if line.strip():
            try:
                out.append(Detection.from_json(json.loads(line)))
            except json.JSONDecodeError as exc:
                raise InputError(f"{path}:{n}: {exc}") from exc
    return out


def write_detections(path, dets) -> None:
    lines = [json.dumps(d.to_json(), sort_keys=True) for d in dets]
    Path(path).write_text("".join(line + "\n" for line in lines))


def area(box) -> float:
    x1, y1, x2, y2 = box
    return max(0.0, x2 - x1) * max(0.0, y2 - y1)


def intersection(a, b) -> float:
    w = min(a[2], b[2]) - max(a[0], b[0])
    h = min(a[3], b[3]) - max(a[1], b[1])
    return max(0.0, w) * max(0.0, h)


def iou(a, b) -> float:
    inter = intersection(a, b)
    union = area(a) + area(b) - inter
    return inter / union if union > 0 else 0.0


def filter_detections(dets, conf_thresh: float = 0.83, nest_iou: float = 0.3,
                      containment: float = 0.9) -> list[Detection]:
    """Drop low-confidence boxes, then boxes nested inside another kept box.

    A box A is nested in B when B covers at least `containment` of A's
    area while their IoU stays below `nest_iou` (A is much smaller than B).
    Detections are compared only within the same image.
    """
    confident = [d for d in dets if not d.score < conf_thresh]
    kept = []
    for a in confident:
        nested = False
        for b in confident:
            if b is a or b.image_id != a.image_id:
                continue
            if intersection(a.bbox, b.bbox) >= containment * area(a.bbox) and iou(a.bbox, b.bbox) < nest_iou:
                nested = True
                break
        if not nested:
            kept.append(a)
    return kept


# --------------------------------------------------------------------------
# species gate


@dataclass(frozen=True)
class SpeciesPrediction:
    labels: tuple[str, ...]
    scores: tuple[float, ...]

    @classmethod
    def from_json(cls, payload) -> "SpeciesPrediction":
        try:
            preds = payload["predictions"]
            pairs = [(str(p["label"]), float(p["score"])) for p in preds]
        except (KeyError, TypeError, ValueError) as exc:
            raise GateError(f"malformed species response: {exc}") from exc
        if not pairs:
            raise GateError("species service returned no predictions")
        # stable sort keeps service order among equal scores
        pairs.sort(key=lambda p: -p[1])
        return cls(tuple(p[0] for p in pairs), tuple(p[1] for p in pairs))

    @property
    def top(self) -> str:
        return self.labels[0]


class SpeciesClient(Protocol):
    def predict(self, image_path) -> SpeciesPrediction: ...


class StubSpeciesClient:
    """Reads `<stem>.species.json` next to each image (or in `directory`)."""

    def __init__(self, directory=None):
        self.directory = None if directory is None else Path(directory)

    def predict(self, image_path) -> SpeciesPrediction:
        image_path = Path(image_path)
        base = self.directory or image_path.parent
        side = base / (image_path.stem + ".species.json")
        try:
            payload = json.loads(side.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise GateError(f"species stub unreadable for {image_path.name}: {exc}") from exc
        return SpeciesPrediction.from_json(payload)


class HttpSpeciesClient:
    """POSTs image bytes to a classification endpoint returning
    {"predictions": [{"label": ..., "score": ...}, ...]}."""

    def __init__(self, url: str, timeout: float = 10.0, transport: httpx.BaseTransport | None = None):
        self.url = url
        self.timeout = timeout
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def predict(self, image_path) -> SpeciesPrediction:
        try:
            data = Path(image_path).read_bytes()
            resp = self._client.post(self.url, content=data, headers={"Content-Type": "application/octet-stream"})
            resp.raise_for_status()
            payload = resp.json()
        except (OSError, httpx.HTTPError, ValueError) as exc:
            raise GateError(f"species service failed for {Path(image_path).name}: {exc}") from exc
        return SpeciesPrediction.from_json(payload)

    def close(self) -> None:
        self._client.close()


def species_gate(image_path, client: SpeciesClient, target: str, fail_open: bool = False) -> bool:
    """True iff the top-ranked species is `target`; its score is ignored."""
    try:
        pred = client.predict(image_path)
    except GateError:
        if fail_open:
            log.warning("species gate failed open for %s", image_path)
            return True
        raise
    return pred.top == target


def gate_many(paths, client: SpeciesClient, target: str, fail_open: bool = False,
              max_workers: int = 4) -> list[bool]:
    """Gate several images with bounded concurrency; results follow input order."""
    paths = list(paths)
    if max_workers <= 1 or len(paths) <= 1:
        return [species_gate(p, client, target, fail_open) for p in paths]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(lambda p: species_gate(p, client, target, fail_open), paths))


# --------------------------------------------------------------------------
# evaluation


@dataclass
class PRCurve:
    precision: np.ndarray
    recall: np.ndarray
    scores: np.ndarray
    tp: np.ndarray
    ap: float
    n_gt: int = 0
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"ap": self.ap, "n_gt": self.n_gt, "precision": self.precision.tolist(),
                "recall": self.recall.tolist(), "scores": self.scores.tolist()}


def match_detections(dets, ground_truth, match_iou: float = 0.5) -> np.ndarray:
    """Greedy matching by descending score (ties by input order).

    `ground_truth` maps image id to a list of boxes, or is a plain list of
    boxes when every detection belongs to one image.  Returns the TP flag
    of each detection in ranked order.
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    if not isinstance(ground_truth, dict):
        ground_truth = {None: list(ground_truth)}
        key = lambda d: None  # noqa: E731
    else:
        key = lambda d: d.image_id  # noqa: E731
    used = {k: np.zeros(len(v), bool) for k, v in ground_truth.items()}
    tp = np.zeros(len(dets), bool)
    for rank, i in enumerate(order):
        gts = ground_truth.get(key(dets[i]), [])
        best, best_j = match_iou, -1
        for j, g in enumerate(gts):
            if used[key(dets[i])][j]:
                continue
            o = iou(dets[i].bbox, g)
            if o >= best and (best_j < 0 or o > best):
                best, best_j = o, j
        if best_j >= 0:
            used[key(dets[i])][best_j] = True
            tp[rank] = True
    return tp


def average_precision(tp, n_gt: int) -> tuple[float, np.ndarray, np.ndarray]:
    """Area under the precision envelope for ranked TP flags.

    The envelope is the running maximum of precision from the right.  It is
    integrated over recall piecewise-linearly between consecutive distinct
    recall levels, starting from recall 0 at the envelope's maximum.
    """
    if n_gt <= 0:
        raise MetricError("average precision is undefined without ground truth")
    tp = np.asarray(tp, bool)
    if len(tp) == 0:
        return 0.0, np.zeros(0), np.zeros(0)
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(tp) + 1)
    recall = ctp / n_gt
    env = np.maximum.accumulate(precision[::-1])[::-1]
    # envelope value at each distinct recall level
    levels, first = np.unique(recall, return_index=True)
    pts_r = np.concatenate([[0.0], levels])
    pts_p = np.concatenate([[env[0]], env[first]])
    if levels[0] == 0.0:
        pts_r, pts_p = pts_r[1:], pts_p[1:]
        pts_r[0] = 0.0
    ap = float(np.sum(np.diff(pts_r) * (pts_p[1:] + pts_p[:-1]) / 2))
    return ap, precision, recall


def eval_detections(dets, ground_truth, match_iou: float = 0.5) -> PRCurve:
    n_gt = sum(len(v) for v in ground_truth.values()) if isinstance(ground_truth, dict) else len(ground_truth)
    if n_gt == 0:
        raise MetricError("average precision is undefined without ground truth")
    tp = match_detections(dets, ground_truth, match_iou)
    ap, precision, recall = average_precision(tp, n_gt)
    scores = np.array(sorted((d.score for d in dets), reverse=True), float)
    return PRCurve(precision, recall, scores, tp, ap, n_gt)
