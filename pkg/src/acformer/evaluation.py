"""Centroid matching and detection/classification F-scores."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

MATCH_RADIUS = 6.0


class PairingError(ValueError):
    pass


@dataclass
class EvalConfig:
    radius: float = MATCH_RADIUS
    averaging: str = "micro"

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        if self.averaging not in ("micro", "macro"):
            raise ValueError("averaging must be 'micro' or 'macro'")


@dataclass
class EvalCounts:
    num_classes: int
    tp_d: int = 0
    fp_d: int = 0
    fn_d: int = 0
    tp_c: np.ndarray = None
    fp_c: np.ndarray = None
    fn_c: np.ndarray = None

    def __post_init__(self):
        for name in ("tp_c", "fp_c", "fn_c"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(self.num_classes, dtype=np.int64))

    def __add__(self, other: "EvalCounts") -> "EvalCounts":
        return EvalCounts(
            self.num_classes,
            self.tp_d + other.tp_d,
            self.fp_d + other.fp_d,
            self.fn_d + other.fn_d,
            self.tp_c + other.tp_c,
            self.fp_c + other.fp_c,
            self.fn_c + other.fn_c,
        )

    def as_dict(self) -> dict:
        return {
            "TP_d": self.tp_d,
            "FP_d": self.fp_d,
            "FN_d": self.fn_d,
            "TP_c": self.tp_c.tolist(),
            "FP_c": self.fp_c.tolist(),
            "FN_c": self.fn_c.tolist(),
        }


def match_detections(pred_xy, gt_xy, radius: float = MATCH_RADIUS):
    """Hungarian pairing on Euclidean distance, then pairs farther than ``radius`` are voided.

    Returns ``(pairs, unmatched_pred, unmatched_gt)`` with ``pairs`` an ``(P, 2)`` int array.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    pred_xy = np.asarray(pred_xy, dtype=float).reshape(-1, 2)
    gt_xy = np.asarray(gt_xy, dtype=float).reshape(-1, 2)
    pairs = np.zeros((0, 2), dtype=np.int64)
    if len(pred_xy) and len(gt_xy):
        dist = cdist(pred_xy, gt_xy)
        rows, cols = linear_sum_assignment(dist)
        ok = dist[rows, cols] <= radius
        pairs = np.stack([rows[ok], cols[ok]], axis=1).astype(np.int64)
    unmatched_pred = np.setdiff1d(np.arange(len(pred_xy)), pairs[:, 0])
    unmatched_gt = np.setdiff1d(np.arange(len(gt_xy)), pairs[:, 1])
    return pairs, unmatched_pred, unmatched_gt


def count_image(pred_xy, pred_cat, gt_xy, gt_cat, num_classes: int, radius: float = MATCH_RADIUS) -> EvalCounts:
    pairs, up, ug = match_detections(pred_xy, gt_xy, radius)
    counts = EvalCounts(num_classes, tp_d=len(pairs), fp_d=len(up), fn_d=len(ug))
    pred_cat = np.asarray(pred_cat, dtype=np.int64)
    gt_cat = np.asarray(gt_cat, dtype=np.int64)
    for p, g in pairs:
        kp, kg = pred_cat[p], gt_cat[g]
        if kp == kg:
            counts.tp_c[kp] += 1
        else:
            counts.fp_c[kp] += 1
            counts.fn_c[kg] += 1
    return counts


def detection_fscore(counts: EvalCounts) -> float | None:
    """``2 TP / (2 TP + FP + FN)``; ``None`` when there is nothing to evaluate."""
    denom = 2 * counts.tp_d + counts.fp_d + counts.fn_d
    if denom == 0:
        return None
    return 2 * counts.tp_d / denom


def classification_fscore(counts: EvalCounts, k: int) -> float:
    denom = 2 * (counts.tp_c[k] + counts.fp_c[k] + counts.fn_c[k]) + counts.fp_d + counts.fn_d
    if denom == 0:
        return 0.0
    return float(2 * counts.tp_c[k] / denom)


@dataclass
class Report:
    categories: list[str]
    counts: EvalCounts
    per_image: dict[str, EvalCounts] = field(default_factory=dict)
    averaging: str = "micro"

    @property
    def f_d(self) -> float | None:
        if self.averaging == "micro":
            return detection_fscore(self.counts)
        vals = [detection_fscore(c) for c in self.per_image.values()]
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def f_c(self) -> dict[str, float]:
        if self.averaging == "micro":
            return {name: classification_fscore(self.counts, k) for k, name in enumerate(self.categories)}
        per = list(self.per_image.values())
        return {
            name: float(np.mean([classification_fscore(c, k) for c in per])) if per else 0.0
            for k, name in enumerate(self.categories)
        }

    @property
    def mean_fc(self) -> float:
        vals = list(self.f_c.values())
        return float(np.mean(vals)) if vals else 0.0

    def zero_denominators(self) -> list[str]:
        c = self.counts
        return [
            name
            for k, name in enumerate(self.categories)
            if 2 * (c.tp_c[k] + c.fp_c[k] + c.fn_c[k]) + c.fp_d + c.fn_d == 0
        ]

    def to_json(self) -> dict:
        return {
            "F_d": self.f_d,
            "F_c": self.f_c,
            "mean_Fc": self.mean_fc,
            "counts": self.counts.as_dict(),
            "averaging": self.averaging,
            "empty_evaluation": self.f_d is None,
            "zero_denominator_categories": self.zero_denominators(),
        }

    def table(self) -> str:
        rows = [("metric", "value")]
        rows.append(("F_d", "n/a" if self.f_d is None else f"{self.f_d:.4f}"))
        rows += [(f"F_c[{name}]", f"{v:.4f}") for name, v in self.f_c.items()]
        rows.append(("mean F_c", f"{self.mean_fc:.4f}"))
        c = self.counts
        rows += [("TP_d", str(c.tp_d)), ("FP_d", str(c.fp_d)), ("FN_d", str(c.fn_d))]
        width = max(len(r[0]) for r in rows)
        return "\n".join(f"{a.ljust(width)}  {b}" for a, b in rows)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            header = ["image_id", "TP_d", "FP_d", "FN_d"]
            for name in self.categories:
                header += [f"TP_c[{name}]", f"FP_c[{name}]", f"FN_c[{name}]"]
            writer.writerow(header)
            for image_id, c in self.per_image.items():
                row = [image_id, c.tp_d, c.fp_d, c.fn_d]
                for k in range(len(self.categories)):
                    row += [int(c.tp_c[k]), int(c.fp_c[k]), int(c.fn_c[k])]
                writer.writerow(row)


def evaluate_dataset(
    predictions: dict[str, list[dict]],
    ground_truth: dict[str, list[dict]],
    categories: list[str],
    radius: float = MATCH_RADIUS,
    averaging: str = "micro",
) -> Report:
    """Both inputs map image id -> list of ``{"x", "y", "category", ...}``.

    ``micro`` pools counts over images before computing F-scores; ``macro`` averages
    per-image F-scores.
    """
    if averaging not in ("micro", "macro"):
        raise ValueError("averaging must be 'micro' or 'macro'")
    pred_ids, gt_ids = set(predictions), set(ground_truth)
    if pred_ids != gt_ids:
        raise PairingError(
            f"image ids differ: only in predictions {sorted(pred_ids - gt_ids)}, "
            f"only in ground truth {sorted(gt_ids - pred_ids)}"
        )
    K = len(categories)
    total = EvalCounts(K)
    per_image = {}
    for image_id in sorted(gt_ids):
        preds, gts = predictions[image_id], ground_truth[image_id]
        c = count_image(
            [(d["x"], d["y"]) for d in preds],
            [d["category"] for d in preds],
            [(g["x"], g["y"]) for g in gts],
            [g["category"] for g in gts],
            K,
            radius,
        )
        per_image[image_id] = c
        total = total + c
    return Report(list(categories), total, per_image, averaging)


def load_prediction_file(path) -> dict[str, list[dict]]:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != 1:
        raise ValueError(f"{path}: unsupported prediction file version {doc.get('version')!r}")
    return {str(img["id"]): list(img["detections"]) for img in doc["images"]}


def write_prediction_file(path, detections: dict[str, list[dict]]) -> None:
    doc = {"version": 1, "images": [{"id": k, "detections": v} for k, v in detections.items()]}
    Path(path).write_text(json.dumps(doc, indent=1))
