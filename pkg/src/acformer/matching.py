"""Bipartite assignment, focal classification loss, set loss and the dual-branch objective."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment
from torch import Tensor

from .detector import PredictionSet
from .geometry import align_points

LOG_EPS = 1e-8


class InfeasibleAssignmentError(ValueError):
    pass


@dataclass
class LossWeights:
    alpha: float = 0.1
    beta_dist: float = 5.0
    beta_cls: float = 2.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    w_coord: float = 5.0
    w_pos: float = 1.0
    w_neg: float = 1.0
    global_threshold: float = 0.3

    def __post_init__(self):
        for name, value in vars(self).items():
            if value < 0:
                raise ValueError(f"loss weight {name} must be >= 0, got {value}")


@dataclass
class TargetSet:
    """Ground-truth or pseudo-label targets: normalized coords and category vectors.

    ``labels`` has one slot per real category plus the trailing empty slot.
    """

    coords: Tensor
    labels: Tensor

    def __len__(self) -> int:
        return self.coords.shape[0]

    @classmethod
    def from_categories(cls, coords: Tensor, categories: Tensor, num_classes: int) -> "TargetSet":
        labels = torch.nn.functional.one_hot(categories.long(), num_classes + 1).to(coords.dtype)
        return cls(coords, labels)

    @classmethod
    def from_predictions(cls, pred: PredictionSet) -> "TargetSet":
        return cls(pred.coords.detach(), pred.scores.detach())


@dataclass
class MatchResult:
    pairs: np.ndarray  # (T, 2) rows of (proposal index, target index), sorted by target
    negatives: np.ndarray

    @property
    def proposals(self) -> np.ndarray:
        return self.pairs[:, 0]

    @property
    def targets(self) -> np.ndarray:
        return self.pairs[:, 1]


def focal_loss(scores: Tensor, target: Tensor, weights: LossWeights | None = None,
               focal_alpha: float | None = None, focal_gamma: float | None = None) -> Tensor:
    """Mean over category slots of ``-a (1 - c*t)^g t log(c)``, broadcast over leading dims."""
    w = weights or LossWeights()
    a = w.focal_alpha if focal_alpha is None else focal_alpha
    g = w.focal_gamma if focal_gamma is None else focal_gamma
    modulator = (1 - scores * target).clamp_min(0) ** g
    per_slot = -a * modulator * target * torch.log(scores.clamp_min(LOG_EPS))
    return per_slot.mean(dim=-1)


def cost_matrix(pred: PredictionSet, targets: TargetSet, weights: LossWeights | None = None) -> Tensor:
    """``(C, T)`` matrix of ``beta_dist * |p_c - p_t|^2 + beta_cls * focal(c_c, c_t)``."""
    w = weights or LossWeights()
    dist = ((pred.coords[:, None, :] - targets.coords[None, :, :]) ** 2).sum(-1)
    cls = focal_loss(pred.scores[:, None, :], targets.labels[None, :, :], w)
    return w.beta_dist * dist + w.beta_cls * cls


def hungarian_match(cost) -> MatchResult:
    cost = cost.detach().cpu().numpy() if isinstance(cost, Tensor) else np.asarray(cost, dtype=float)
    C, T = cost.shape
    if C < T:
        raise InfeasibleAssignmentError(f"{T} targets cannot be assigned to {C} proposals")
    rows, cols = linear_sum_assignment(cost)
    order = np.argsort(cols)
    pairs = np.stack([rows[order], cols[order]], axis=1).astype(np.int64).reshape(-1, 2)
    negatives = np.setdiff1d(np.arange(C), pairs[:, 0])
    return MatchResult(pairs, negatives)


def set_loss(pred: PredictionSet, targets: TargetSet, match: MatchResult,
             weights: LossWeights | None = None) -> Tensor:
    """Hungarian set loss over one prediction set.

    Positives pay squared coordinate error and focal loss against their target;
    negatives pay focal loss against the empty category.  Normalized by ``max(T, 1)``.
    """
    w = weights or LossWeights()
    T = len(targets)
    p = torch.as_tensor(match.proposals, dtype=torch.long)
    t = torch.as_tensor(match.targets, dtype=torch.long)
    neg = torch.as_tensor(match.negatives, dtype=torch.long)
    coord = ((pred.coords[p] - targets.coords[t]) ** 2).sum()
    pos_cls = focal_loss(pred.scores[p], targets.labels[t], w).sum()
    empty = torch.zeros_like(pred.scores[:1])
    empty[..., -1] = 1
    neg_cls = focal_loss(pred.scores[neg], empty, w).sum()
    return (w.w_coord * coord + w.w_pos * pos_cls + w.w_neg * neg_cls) / max(T, 1)


def matched_set_loss(pred: PredictionSet, targets: TargetSet, weights: LossWeights | None = None) -> Tensor:
    w = weights or LossWeights()
    match = hungarian_match(cost_matrix(pred, targets, w))
    return set_loss(pred, targets, match, w)


def filter_global_predictions(pred: PredictionSet, threshold: float) -> PredictionSet:
    keep = pred.confidence >= threshold
    return PredictionSet(pred.coords[keep], pred.scores[keep], pred.source)


def align_targets(targets: TargetSet, A: Tensor) -> TargetSet:
    """Carry normalized targets into a warped view; out-of-view targets are dropped."""
    coords, labels, _ = align_points(targets.coords, A, payload=targets.labels)
    return TargetSet(coords, labels)


def overall_loss(
    local_sets: list[list[PredictionSet]],
    ground_truth: list[TargetSet],
    global_targets: list[list[TargetSet]] | None,
    weights: LossWeights | None = None,
    alpha: float | None = None,
) -> Tensor:
    """Dual-branch objective for one image.

    ``local_sets[i][j]`` is the j-th set predicted on warp i, ``ground_truth[i]`` the
    ground truth aligned with warp i, ``global_targets[i][j]`` the filtered j-th
    global set aligned with warp i.  ``alpha`` overrides ``weights.alpha``.
    """
    w = weights or LossWeights()
    a = w.alpha if alpha is None else alpha
    M = len(local_sets)
    total = local_sets[0][0].coords.new_zeros(())
    for i in range(M):
        for j, pred in enumerate(local_sets[i]):
            total = total + matched_set_loss(pred, ground_truth[i], w)
            if a > 0 and global_targets is not None:
                total = total + a * matched_set_loss(pred, global_targets[i][j], w)
    return total / M


def build_targets(
    gt: TargetSet,
    global_sets: list[PredictionSet] | None,
    matrices: Tensor,
    threshold: float,
) -> tuple[list[TargetSet], list[list[TargetSet]] | None]:
    """Align ground truth and filtered global predictions with each warp (stop-gradient)."""
    matrices = matrices.detach()
    gts = [align_targets(gt, A) for A in matrices]
    if global_sets is None:
        return gts, None
    filtered = [TargetSet.from_predictions(filter_global_predictions(s, threshold)) for s in global_sets]
    glob = [[align_targets(f, A) for f in filtered] for A in matrices]
    return gts, glob
