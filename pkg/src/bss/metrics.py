"""Detection evaluation: IoU matching, P/R/F1, all-point AP and mAP.

Boxes are normalised (cx, cy, w, h) on disk and converted to corner form
for IoU. Matching is greedy per class and image in descending score order;
each ground-truth box can be consumed by at most one detection.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._parallel import pmap
from .errors import ConfigError, FormatError

DEFAULT_IOU = 0.5


@dataclass(frozen=True)
class GTRecord:
    image: str
    cls: int
    box: tuple  # cx, cy, w, h (normalised)


@dataclass(frozen=True)
class DetRecord:
    image: str
    cls: int
    box: tuple
    score: float


@dataclass
class PRCurve:
    recall: np.ndarray
    precision: np.ndarray
    scores: np.ndarray
    n_gt: int

    @property
    def envelope(self):
        """Precision replaced by its running maximum from the right."""
        if self.precision.size == 0:
            return self.precision
        return np.maximum.accumulate(self.precision[::-1])[::-1]

    def to_csv(self):
        lines = ["recall,precision"]
        lines += [f"{r!r},{p!r}" for r, p in zip(self.recall.tolist(), self.precision.tolist())]
        return "\n".join(lines) + "\n"


@dataclass
class ClassResult:
    cls: int
    name: str
    n_gt: int
    n_det: int
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    ap: float | None
    f1_max: dict
    curve: PRCurve = field(repr=False, default=None)

    def to_dict(self):
        return {
            "class": self.cls, "name": self.name, "gt": self.n_gt, "detections": self.n_det,
            "tp": self.tp, "fp": self.fp, "fn": self.fn,
            "precision": self.precision, "recall": self.recall, "f1": self.f1,
            "ap": self.ap, "ap_defined": self.ap is not None, "f1_max": self.f1_max,
        }


@dataclass
class EvalReport:
    classes: list
    iou_thresh: float
    num_classes: int

    @property
    def evaluated(self):
        return [c for c in self.classes if c.ap is not None]

    @property
    def map(self):
        ev = self.evaluated
        return mean_ap([c.ap for c in ev]) if ev else 0.0

    def macro(self, key):
        ev = self.evaluated
        return float(np.mean([getattr(c, key) for c in ev])) if ev else 0.0

    def to_dict(self):
        flags = []
        for c in self.classes:
            if c.ap is None:
                flags.append(f"class {c.cls} ({c.name}) has no ground truth; excluded from mAP")
            elif c.tp + c.fp == 0:
                flags.append(f"class {c.cls} ({c.name}) has no detections; precision set to 0")
        return {
            "config": {"iou_threshold": self.iou_thresh, "classes": self.num_classes},
            "per_class": [c.to_dict() for c in self.classes],
            "overall": {
                "mAP": self.map,
                "precision": self.macro("precision"),
                "recall": self.macro("recall"),
                "f1": self.macro("f1"),
                "classes_evaluated": len(self.evaluated),
                "operating_point": "all detections",
            },
            "flags": flags,
        }


# --------------------------------------------------------------------------
# primitives


def to_corners(box):
    cx, cy, w, h = box
    return (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def iou(a, b):
    """IoU of two corner-form boxes (x1, y1, x2, y2), continuous coordinates."""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def prf(tp, fp, fn):
    """Precision, recall, F1 with 0/0 taken as 0."""
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


def score_order(dets):
    """Indices by descending score, ties kept in input order."""
    return sorted(range(len(dets)), key=lambda i: -dets[i].score)


def match_detections(dets, gts, iou_thresh=DEFAULT_IOU):
    """Label each detection TP/FP and count unmatched ground truth per class.

    Returns (is_tp list aligned with `dets`, {class: fn}).
    """
    pool = {}
    for g in gts:
        pool.setdefault((g.image, g.cls), []).append(to_corners(g.box))
    used = {k: [False] * len(v) for k, v in pool.items()}
    is_tp = [False] * len(dets)
    for i in score_order(dets):
        d = dets[i]
        key = (d.image, d.cls)
        boxes = pool.get(key, ())
        corners = to_corners(d.box)
        best, best_j = -1.0, -1
        for j, gb in enumerate(boxes):
            if used[key][j]:
                continue
            v = iou(corners, gb)
            if v > best:
                best, best_j = v, j
        if best_j >= 0 and best >= iou_thresh:
            used[key][best_j] = True
            is_tp[i] = True
    fn = {}
    for (image, cls), flags in used.items():
        fn[cls] = fn.get(cls, 0) + flags.count(False)
    return is_tp, fn


def pr_curve(labels, scores, n_gt):
    """Sweep detections already sorted by descending score."""
    labels = np.asarray(labels, dtype=bool)
    ctp = np.cumsum(labels)
    cfp = np.cumsum(~labels)
    recall = ctp / n_gt if n_gt else np.zeros(labels.size)
    with np.errstate(invalid="ignore"):
        precision = np.where(ctp + cfp > 0, ctp / np.maximum(ctp + cfp, 1), 0.0)
    return PRCurve(recall.astype(np.float64), precision.astype(np.float64),
                   np.asarray(scores, dtype=np.float64), int(n_gt))


def average_precision(curve):
    """All-point interpolated area under the monotone precision envelope."""
    if curve.n_gt <= 0:
        raise ConfigError("AP is undefined for a class with no ground truth")
    if curve.recall.size == 0:
        return 0.0
    env = curve.envelope
    prev = np.concatenate([[0.0], curve.recall[:-1]])
    return float(np.sum((curve.recall - prev) * env))


def mean_ap(per_class_ap):
    aps = list(per_class_ap)
    if not aps:
        raise ConfigError("mAP of an empty class list")
    return math.fsum(aps) / len(aps)


# --------------------------------------------------------------------------
# ingestion


def _clip_box(cx, cy, w, h):
    x1, y1 = max(0.0, cx - w / 2), max(0.0, cy - h / 2)
    x2, y2 = min(1.0, cx + w / 2), min(1.0, cy + h / 2)
    return ((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)


def _check_box(vals, num_classes, cls, path, lineno):
    if not all(math.isfinite(v) for v in vals):
        raise FormatError("non-finite box coordinate", path, lineno)
    cx, cy, w, h = vals
    if w <= 0 or h <= 0:
        raise FormatError("box width and height must be positive", path, lineno)
    if not 0 <= cls < num_classes:
        raise FormatError(f"unknown class id {cls} (classes: {num_classes})", path, lineno)
    box = _clip_box(cx, cy, w, h)
    if box[2] <= 0 or box[3] <= 0:
        raise FormatError("box lies outside the image", path, lineno)
    return box


def _parse_int(tok, path, lineno):
    try:
        v = float(tok)
    except ValueError:
        raise FormatError(f"bad class id {tok!r}", path, lineno) from None
    if not v.is_integer():
        raise FormatError(f"bad class id {tok!r}", path, lineno)
    return int(v)


def read_gt_file(path, num_classes, image=None):
    path = Path(path)
    image = image or path.stem
    try:
        text = path.read_text()
    except (OSError, UnicodeDecodeError) as exc:
        raise FormatError(f"cannot read: {exc}", path) from exc
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        toks = line.split()
        if not toks:
            continue
        if len(toks) != 5:
            raise FormatError(f"expected 'class cx cy w h', got {len(toks)} fields", path, lineno)
        cls = _parse_int(toks[0], path, lineno)
        try:
            vals = [float(t) for t in toks[1:]]
        except ValueError:
            raise FormatError("non-numeric box coordinate", path, lineno) from None
        out.append(GTRecord(image, cls, _check_box(vals, num_classes, cls, path, lineno)))
    return out


def read_gt_dir(directory, num_classes):
    """One <image>.txt per image; image id is the file stem."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FormatError("ground-truth directory not found", directory)
    gts = []
    for p in sorted(directory.glob("*.txt")):
        gts.extend(read_gt_file(p, num_classes))
    return gts


def read_detections(path, num_classes):
    """JSON lines: {"image": str, "class": int, "bbox": [cx, cy, w, h], "score": float}."""
    path = Path(path)
    try:
        text = path.read_text()
    except (OSError, UnicodeDecodeError) as exc:
        raise FormatError(f"cannot read: {exc}", path) from exc
    dets = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"invalid JSON: {exc.msg}", path, lineno) from None
        if not isinstance(obj, dict):
            raise FormatError("detection must be a JSON object", path, lineno)
        try:
            image = obj["image"]
            cls = obj["class"]
            bbox = obj["bbox"]
            score = obj["score"]
        except KeyError as exc:
            raise FormatError(f"missing field {exc.args[0]!r}", path, lineno) from None
        if not isinstance(image, str):
            raise FormatError("'image' must be a string", path, lineno)
        if isinstance(cls, bool) or not isinstance(cls, int):
            raise FormatError("'class' must be an integer", path, lineno)
        if not (isinstance(bbox, list) and len(bbox) == 4
                and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in bbox)):
            raise FormatError("'bbox' must be four numbers", path, lineno)
        if isinstance(score, bool) or not isinstance(score, (int, float)) \
                or not math.isfinite(score) or not 0 <= score <= 1:
            raise FormatError("'score' must be a finite number in [0, 1]", path, lineno)
        box = _check_box([float(v) for v in bbox], num_classes, cls, path, lineno)
        dets.append(DetRecord(image, cls, box, float(score)))
    return dets


# --------------------------------------------------------------------------
# dataset evaluation


def _f1_max(curve):
    if curve.recall.size == 0:
        return {"score": None, "precision": 0.0, "recall": 0.0, "f1": 0.0}
    p, r = curve.precision, curve.recall
    with np.errstate(invalid="ignore", divide="ignore"):
        f1 = np.where(p + r > 0, 2 * p * r / (p + r), 0.0)
    i = int(np.argmax(f1))
    return {"score": float(curve.scores[i]), "precision": float(p[i]), "recall": float(r[i]), "f1": float(f1[i])}


def evaluate_class(cls, dets, gts, iou_thresh=DEFAULT_IOU, name=None):
    dets = [d for d in dets if d.cls == cls]
    gts = [g for g in gts if g.cls == cls]
    is_tp, fn = match_detections(dets, gts, iou_thresh)
    order = score_order(dets)
    labels = [is_tp[i] for i in order]
    scores = [dets[i].score for i in order]
    curve = pr_curve(labels, scores, len(gts))
    tp = sum(labels)
    fp = len(labels) - tp
    fn_count = fn.get(cls, 0)
    p, r, f1 = prf(tp, fp, fn_count)
    ap = average_precision(curve) if gts else None
    return ClassResult(cls, name or str(cls), len(gts), len(dets), tp, fp, fn_count,
                       p, r, f1, ap, _f1_max(curve), curve)


def evaluate(dets, gts, num_classes, iou_thresh=DEFAULT_IOU, names=None, threads=1):
    if num_classes < 1:
        raise ConfigError("need at least one class")
    names = list(names) if names else [str(q) for q in range(num_classes)]
    if len(names) != num_classes:
        raise ConfigError(f"{len(names)} class names for {num_classes} classes")
    results = pmap(lambda q: evaluate_class(q, dets, gts, iou_thresh, names[q]), range(num_classes), threads)
    return EvalReport(results, float(iou_thresh), num_classes)


def eval_dataset(gt_dir, det_file, iou_thresh=DEFAULT_IOU, num_classes=4, names=None, threads=1):
    gts = read_gt_dir(gt_dir, num_classes)
    dets = read_detections(det_file, num_classes)
    return evaluate(dets, gts, num_classes, iou_thresh, names, threads)
