"""Dual-branch training: AAT warping, local optimization, EMA global network."""
from __future__ import annotations

import copy
import json
import logging
import os
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn

from .aat import AATConfig, AdaptiveAffineTransformer
from .detector import DetectorConfig, PointDetector
from .geometry import bilinear_sample_points, warp_image
from .matching import LossWeights, TargetSet, build_targets, matched_set_loss

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LR_READINGS = {"decimal": 2e-4, "power": 2.0**-4}


class CheckpointError(RuntimeError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float | None = None
    lr_reading: str = "decimal"
    weight_decay: float = 1e-4
    # the affine transformer's learning rate relative to the detector's
    aat_lr_scale: float = 0.1
    grad_clip: float = 0.1
    ema_momentum: float = 0.999
    warmup_steps: int = 500
    total_steps: int = 5000
    batch_size: int = 2
    size_min: int = 64
    size_max: int = 96
    seed: int = 0
    log_every: int = 10
    checkpoint_every: int = 1000

    def __post_init__(self):
        if not 0.0 <= self.ema_momentum < 1.0:
            raise ValueError(f"ema_momentum must lie in [0, 1), got {self.ema_momentum}")
        if self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps cannot exceed total_steps")
        if self.lr_reading not in LR_READINGS:
            raise ValueError(f"lr_reading must be one of {sorted(LR_READINGS)}")
        if self.size_min > self.size_max:
            raise ValueError("size_min > size_max")
        if self.aat_lr_scale < 0:
            raise ValueError("aat_lr_scale must be non-negative")

    @property
    def learning_rate(self) -> float:
        return self.lr if self.lr is not None else LR_READINGS[self.lr_reading]


@dataclass
class DualModelState:
    local: PointDetector
    aat: AdaptiveAffineTransformer
    global_: PointDetector
    optimizer: torch.optim.Optimizer | None = None
    step: int = 0
    configs: dict = field(default_factory=dict)

    @classmethod
    def create(cls, det_cfg: DetectorConfig, aat_cfg: AATConfig, train_cfg: TrainConfig) -> "DualModelState":
        torch.manual_seed(train_cfg.seed)
        local = PointDetector(det_cfg)
        aat = AdaptiveAffineTransformer(aat_cfg)
        global_ = copy.deepcopy(local)
        global_.requires_grad_(False)
        lr = train_cfg.learning_rate
        opt = torch.optim.AdamW(
            [
                {"params": list(local.parameters())},
                {"params": list(aat.parameters()), "lr": lr * train_cfg.aat_lr_scale},
            ],
            lr=lr,
            weight_decay=train_cfg.weight_decay,
        )
        configs = {"detector": asdict(det_cfg), "aat": asdict(aat_cfg), "train": asdict(train_cfg)}
        return cls(local, aat, global_, opt, 0, configs)

    def trainable_parameters(self):
        return list(self.local.parameters()) + list(self.aat.parameters())


@torch.no_grad()
def ema_update(global_model: nn.Module, local_model: nn.Module, momentum: float) -> None:
    """In place ``g <- m * g + (1 - m) * l`` over all parameters and floating buffers."""
    g_state = global_model.state_dict()
    l_state = local_model.state_dict()
    if g_state.keys() != l_state.keys():
        raise ValueError("EMA requires identically structured networks")
    for name, g in g_state.items():
        l = l_state[name]
        if g.shape != l.shape:
            raise ValueError(f"EMA shape mismatch at {name}: {tuple(g.shape)} vs {tuple(l.shape)}")
        if g.is_floating_point():
            g.mul_(momentum).add_(l, alpha=1 - momentum)
        else:
            g.copy_(l)


def resize_image(image: Tensor, height: int, width: int) -> Tensor:
    """Bilinear resize that maps pixel coordinate ``i`` to ``i * new / old``."""
    H, W = image.shape[-2:]
    uu, vv = torch.meshgrid(
        torch.arange(height, dtype=image.dtype) * (H / height),
        torch.arange(width, dtype=image.dtype) * (W / width),
        indexing="ij",
    )
    u = uu.reshape(-1).clamp(max=H - 1)
    v = vv.reshape(-1).clamp(max=W - 1)
    return bilinear_sample_points(image, u, v).reshape(*image.shape[:-2], height, width)


def draw_size(size_range: tuple[int, int], rng: np.random.Generator, multiple: int = 1) -> int:
    lo, hi = size_range
    choices = [s for s in range(lo, hi + 1) if s % multiple == 0] or [lo]
    return int(rng.choice(choices))


def multiscale_resize(
    image: Tensor,
    points: Tensor,
    size_range: tuple[int, int],
    seed: int | np.random.Generator,
    multiple: int = 1,
) -> tuple[Tensor, Tensor]:
    """Resize so the shorter side takes a size drawn uniformly from ``size_range``.

    ``points`` are ``(N, 2)`` pixel ``(u, v)`` coordinates and are scaled per axis.
    ``multiple`` restricts both output sides to multiples of that value.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    H, W = image.shape[-2:]
    short = draw_size(size_range, rng, multiple)
    scale = short / min(H, W)
    new_h = max(multiple, int(round(H * scale / multiple)) * multiple)
    new_w = max(multiple, int(round(W * scale / multiple)) * multiple)
    factors = points.new_tensor([new_h / H, new_w / W])
    return resize_image(image, new_h, new_w), points * factors


def _loss_terms(local_sets, gts, globs, weights: LossWeights):
    gt_term = local_sets[0][0].coords.new_zeros(())
    global_term = gt_term.clone()
    for i, sets in enumerate(local_sets):
        for j, pred in enumerate(sets):
            gt_term = gt_term + matched_set_loss(pred, gts[i], weights)
            if globs is not None:
                global_term = global_term + matched_set_loss(pred, globs[i][j], weights)
    M = len(local_sets)
    return gt_term / M, global_term / M


def compute_loss(
    state: DualModelState,
    images: Tensor,
    targets: list[TargetSet],
    weights: LossWeights,
    warmup: bool,
):
    """Forward both branches on a batch; returns ``(loss, parts, matrices)``.

    ``targets`` hold normalized coordinates of the unwarped images.
    """
    B = images.shape[0]
    matrices = state.aat(images)  # (B, M, 2, 3)
    M = matrices.shape[1]
    warped = warp_image(
        images.unsqueeze(1).expand(-1, M, -1, -1, -1).reshape(B * M, *images.shape[1:]),
        matrices.reshape(B * M, 2, 3),
    )
    local_out = state.local(warped)
    global_out = None
    if not warmup and weights.alpha > 0:
        with torch.no_grad():
            global_out = state.global_(images)
    total = images.new_zeros(())
    gt_sum = images.new_zeros(())
    glob_sum = images.new_zeros(())
    kept = total_gt = 0
    for b in range(B):
        local_sets = [[s.select(b * M + i) for s in local_out] for i in range(M)]
        g_sets = None if global_out is None else [s.select(b) for s in global_out]
        gts, globs = build_targets(targets[b], g_sets, matrices[b], weights.global_threshold)
        kept += sum(len(g) for g in gts)
        total_gt += M * len(targets[b])
        gt_term, glob_term = _loss_terms(local_sets, gts, globs, weights)
        total = total + gt_term + (weights.alpha * glob_term if globs is not None else 0.0)
        gt_sum = gt_sum + gt_term.detach()
        glob_sum = glob_sum + glob_term.detach()
    identity = torch.eye(2, 3, dtype=matrices.dtype)
    parts = {
        "loss_gt": float(gt_sum) / B,
        "loss_global": float(glob_sum) / B,
        # fraction of ground-truth points still inside the warped views
        "kept_fraction": kept / total_gt if total_gt else 1.0,
        "warp_drift": float((matrices.detach() - identity).abs().mean()),
    }
    return total / B, parts, matrices


def train_step(
    state: DualModelState,
    images: Tensor,
    targets: list[TargetSet],
    weights: LossWeights,
    cfg: TrainConfig,
) -> tuple[float, dict]:
    warmup = state.step < cfg.warmup_steps
    state.local.train()
    state.aat.train()
    loss, parts, matrices = compute_loss(state, images, targets, weights, warmup)
    if not torch.isfinite(loss):
        raise TrainingDivergedError(
            f"non-finite loss at step {state.step} (seed {cfg.seed}); matrices={matrices.detach().tolist()}"
        )
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(state.trainable_parameters(), cfg.grad_clip)
    state.optimizer.step()
    ema_update(state.global_, state.local, cfg.ema_momentum)
    state.step += 1
    parts["warmup"] = warmup
    return loss.item(), parts


# -- checkpoints ---------------------------------------------------------------


def _manifest(sd: dict) -> dict:
    return {k: list(v.shape) for k, v in sd.items()}


def save_checkpoint(state: DualModelState, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "step": state.step,
        "configs": state.configs,
        "local": state.local.state_dict(),
        "aat": state.aat.state_dict(),
        "global": state.global_.state_dict(),
        "manifest": {
            "local": _manifest(state.local.state_dict()),
            "aat": _manifest(state.aat.state_dict()),
        },
    }
    if state.optimizer is not None:
        payload["optimizer"] = state.optimizer.state_dict()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    os.close(fd)
    try:
        torch.save(payload, tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def load_checkpoint(path) -> DualModelState:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError as exc:
        raise CheckpointError(f"checkpoint {path} does not exist") from exc
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format_version") != CHECKPOINT_VERSION:
        found = payload.get("format_version") if isinstance(payload, dict) else None
        raise CheckpointError(f"checkpoint {path} has format version {found}, expected {CHECKPOINT_VERSION}")
    try:
        cfgs = payload["configs"]
        det_cfg = DetectorConfig(**cfgs["detector"])
        aat_cfg = AATConfig(**cfgs["aat"])
        train_cfg = TrainConfig(**cfgs["train"])
        state = DualModelState.create(det_cfg, aat_cfg, train_cfg)
        state.local.load_state_dict(payload["local"])
        state.aat.load_state_dict(payload["aat"])
        state.global_.load_state_dict(payload["global"])
        if "optimizer" in payload:
            state.optimizer.load_state_dict(payload["optimizer"])
        state.step = int(payload["step"])
    except (KeyError, TypeError, RuntimeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint {path} is inconsistent: {exc}") from exc
    return state


# -- loop -------------------------------------------------------------------------


class TrainingLog:
    """Append-only JSON-lines log."""

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, record: dict) -> None:
        if self.path is None:
            return
        with self.path.open("a") as fh:
            fh.write(json.dumps(record) + "\n")


def sample_batch(images, points, categories, rng, cfg: TrainConfig, patch_size: int, num_classes: int):
    """Draw a batch, resize it to one multi-scale size, return (images, normalized targets)."""
    idx = rng.choice(len(images), size=cfg.batch_size, replace=len(images) < cfg.batch_size)
    short = draw_size((cfg.size_min, cfg.size_max), rng, patch_size)
    batch, targets = [], []
    for i in idx:
        img, pts = multiscale_resize(images[i], points[i], (short, short), rng, patch_size)
        H, W = img.shape[-2:]
        norm = pts / pts.new_tensor([float(H), float(W)])
        batch.append(img)
        targets.append(TargetSet.from_categories(norm, categories[i], num_classes))
    return torch.stack(batch), targets


def train(
    images: list[Tensor],
    points: list[Tensor],
    categories: list[Tensor],
    det_cfg: DetectorConfig,
    aat_cfg: AATConfig,
    train_cfg: TrainConfig,
    weights: LossWeights,
    out_dir=None,
    state: DualModelState | None = None,
    progress: bool = False,
) -> tuple[DualModelState, list[float]]:
    """Run ``train_cfg.total_steps`` steps; ``points`` are pixel ``(u, v)`` per image."""
    state = state or DualModelState.create(det_cfg, aat_cfg, train_cfg)
    state.configs["loss"] = asdict(weights)
    rng = np.random.default_rng(train_cfg.seed)
    out_dir = Path(out_dir) if out_dir is not None else None
    logger = TrainingLog(out_dir / "train_log.jsonl" if out_dir else None)
    losses = []
    t0 = time.time()
    while state.step < train_cfg.total_steps:
        batch, targets = sample_batch(
            images, points, categories, rng, train_cfg, aat_cfg.patch_size, det_cfg.num_classes
        )
        loss, parts = train_step(state, batch, targets, weights, train_cfg)
        losses.append(loss)
        if state.step % train_cfg.log_every == 0 or state.step == train_cfg.total_steps:
            record = {
                "step": state.step,
                "loss": loss,
                **parts,
                "lr": state.optimizer.param_groups[0]["lr"],
                "ema_momentum": train_cfg.ema_momentum,
                "elapsed": round(time.time() - t0, 2),
            }
            logger.write(record)
            if progress:
                log.info("step %d loss %.4f", state.step, loss)
        if out_dir and train_cfg.checkpoint_every and state.step % train_cfg.checkpoint_every == 0:
            save_checkpoint(state, out_dir / "checkpoint.pt")
    if out_dir:
        save_checkpoint(state, out_dir / "checkpoint.pt")
    return state, losses
