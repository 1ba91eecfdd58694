"""Sliding-window whole-image inference with the global network."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor

from .detector import PointDetector, PredictionSet, final_set


@dataclass
class WindowSpec:
    window: int = 64
    stride: int | None = None  # defaults to window // 2
    score_threshold: float = 0.5
    max_detections: int = 1000
    merge_radius: float = 3.0  # <= 0 disables cross-window merging

    def __post_init__(self):
        if self.stride is None:
            self.stride = max(1, self.window // 2)
        if not 0 < self.stride <= self.window:
            raise ValueError(f"stride must lie in (0, window], got {self.stride}")
        if not 0.0 <= self.score_threshold <= 1.0:
            raise ValueError("score_threshold must lie in [0, 1]")


@dataclass(frozen=True)
class Detection:
    u: float  # row, pixels
    v: float  # column, pixels
    category: int
    confidence: float

    @property
    def x(self) -> float:
        return self.v

    @property
    def y(self) -> float:
        return self.u

    def to_json(self) -> dict:
        return {"x": self.x, "y": self.y, "category": self.category, "confidence": self.confidence}


def threshold_and_label(pred: PredictionSet, score_threshold: float, max_detections: int,
                        height: int, width: int) -> list[Detection]:
    """Keep proposals scoring at least ``score_threshold``, at most ``max_detections``
    of them by descending confidence (ties keep proposal order)."""
    real = pred.scores[..., :-1].detach()
    conf, label = real.max(dim=-1)
    coords = pred.pixel_coords(height, width).detach()
    keep = (conf >= score_threshold).nonzero().flatten().tolist()
    keep.sort(key=lambda i: -float(conf[i]))  # stable
    return [
        Detection(float(coords[i, 0]), float(coords[i, 1]), int(label[i]), float(conf[i]))
        for i in keep[:max_detections]
    ]


def window_starts(length: int, window: int, stride: int) -> list[int]:
    """Window offsets covering ``[0, length)``; the last window is snapped to the edge."""
    if length <= window:
        return [0]
    starts = list(range(0, length - window + 1, stride))
    if starts[-1] != length - window:
        starts.append(length - window)
    return starts


def merge_detections(dets: list[Detection], radius: float) -> list[Detection]:
    """Greedy suppression: same-category detections within ``radius`` keep the most confident."""
    if radius <= 0:
        return list(dets)
    kept: list[Detection] = []
    for d in sorted(dets, key=lambda d: (-d.confidence, d.u, d.v, d.category)):
        if all(
            k.category != d.category or (k.u - d.u) ** 2 + (k.v - d.v) ** 2 > radius * radius
            for k in kept
        ):
            kept.append(d)
    return kept


@torch.no_grad()
def predict_window(model: PointDetector, tile: Tensor, spec: WindowSpec) -> list[Detection]:
    H, W = tile.shape[-2:]
    sets = model(tile.unsqueeze(0))
    return threshold_and_label(final_set(sets).select(0), spec.score_threshold, spec.max_detections, H, W)


@torch.no_grad()
def sliding_window_predict(image: Tensor, model: PointDetector, spec: WindowSpec | None = None) -> list[Detection]:
    """Detect centroids over a ``(3, H, W)`` image of any size ``>= 1``."""
    spec = spec or WindowSpec()
    model.eval()
    H, W = image.shape[-2:]
    pad_h, pad_w = max(0, spec.window - H), max(0, spec.window - W)
    if pad_h or pad_w:
        mode = "reflect" if pad_h < H and pad_w < W else "replicate"
        image = F.pad(image.unsqueeze(0), (0, pad_w, 0, pad_h), mode=mode)[0]
    PH, PW = image.shape[-2:]
    dets: list[Detection] = []
    for top in window_starts(PH, spec.window, spec.stride):
        for left in window_starts(PW, spec.window, spec.stride):
            tile = image[:, top : top + spec.window, left : left + spec.window]
            for d in predict_window(model, tile, spec):
                dets.append(Detection(d.u + top, d.v + left, d.category, d.confidence))
    dets = [d for d in dets if 0 <= d.u <= H and 0 <= d.v <= W]
    dets = merge_detections(dets, spec.merge_radius)
    dets.sort(key=lambda d: -d.confidence)
    return dets[: spec.max_detections]
