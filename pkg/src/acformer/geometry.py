"""Differentiable affine geometry: point transforms, bilinear warping, annotation alignment.

Affine matrices are ``(..., 2, 3)`` tensors holding the two live rows
``[[t11, t12, t13], [t21, t22, t23]]``; the homogeneous row ``(0, 0, 1)`` is implicit.
Matrices act on normalized coordinates ``(u, v) in [0, 1]^2`` where ``u`` runs along
the image height (rows) and ``v`` along the width (columns).  Pixel coordinates are
``(u * H, v * W)``; integer pixel coordinates sit exactly on stored pixel values.
"""
from __future__ import annotations

import torch
from torch import Tensor

# (low, high) per entry, row-major over the 2x3 live block
CLAMP_LOW = (0.2, -1.0, -0.5, -1.0, 0.2, -0.5)
CLAMP_HIGH = (2.0, 1.0, 0.5, 1.0, 2.0, 0.5)
ENTRY_NAMES = ("t11", "t12", "t13", "t21", "t22", "t23")
IDENTITY_PARAMS = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0)
DET_EPS = 1e-6


class SingularTransformError(ValueError):
    pass


def identity(dtype: torch.dtype = torch.float32) -> Tensor:
    return torch.tensor(IDENTITY_PARAMS, dtype=dtype).view(2, 3)


def clamp_affine(raw: Tensor) -> Tensor:
    """Clamp ``(..., 6)`` raw parameters entrywise and reshape to ``(..., 2, 3)``.

    Hard clamp: gradient is zero for entries outside their range.
    """
    raw = torch.as_tensor(raw)
    if raw.shape[-1] != 6:
        raise ValueError(f"expected 6 raw affine parameters, got trailing dim {raw.shape[-1]}")
    finite = torch.isfinite(raw)
    if not bool(finite.all()):
        bad = (~finite).nonzero()[0]
        entry = ENTRY_NAMES[int(bad[-1])]
        raise ValueError(f"non-finite affine parameter {entry} at index {tuple(bad.tolist())}")
    low = raw.new_tensor(CLAMP_LOW)
    high = raw.new_tensor(CLAMP_HIGH)
    return torch.clamp(raw, low, high).reshape(*raw.shape[:-1], 2, 3)


def transform_points(points: Tensor, A: Tensor) -> Tensor:
    """Apply ``A`` to ``(N, 2)`` points: ``(u', v') = (t11 u + t12 v + t13, t21 u + t22 v + t23)``."""
    return points @ A[..., :2].transpose(-1, -2) + A[..., 2].unsqueeze(-2)


def transform_point(u: float, v: float, A: Tensor) -> tuple[float, float]:
    p = transform_points(torch.tensor([[u, v]], dtype=A.dtype), A)[0]
    return float(p[0]), float(p[1])


def determinant(A: Tensor) -> Tensor:
    return A[..., 0, 0] * A[..., 1, 1] - A[..., 0, 1] * A[..., 1, 0]


def invert_affine(A: Tensor, eps: float = DET_EPS) -> Tensor:
    """Inverse of the affine map (not re-clamped)."""
    det = determinant(A)
    if bool((det.abs() <= eps).any()):
        raise SingularTransformError(f"affine determinant {det.detach().abs().min().item():.3g} <= {eps}")
    a, b, c = A[..., 0, 0], A[..., 0, 1], A[..., 0, 2]
    d, e, f = A[..., 1, 0], A[..., 1, 1], A[..., 1, 2]
    inv_a, inv_b = e / det, -b / det
    inv_d, inv_e = -d / det, a / det
    inv_c = -(inv_a * c + inv_b * f)
    inv_f = -(inv_d * c + inv_e * f)
    row0 = torch.stack([inv_a, inv_b, inv_c], dim=-1)
    row1 = torch.stack([inv_d, inv_e, inv_f], dim=-1)
    return torch.stack([row0, row1], dim=-2)


def compose(A: Tensor, B: Tensor) -> Tensor:
    """Affine matrix of ``x -> A(B(x))``."""
    lin = A[..., :2] @ B[..., :2]
    trans = (A[..., :2] @ B[..., 2:]).squeeze(-1) + A[..., 2]
    return torch.cat([lin, trans.unsqueeze(-1)], dim=-1)


def to_pixel_affine(A: Tensor, height: int, width: int) -> Tensor:
    """Express a normalized-coordinate affine in pixel coordinates.

    Built entrywise so the identity maps to the exact pixel identity.
    """
    scale = A.new_tensor([[1.0, height / width, height], [width / height, 1.0, width]])
    return A * scale


def _gather(image: Tensor, iu: Tensor, iv: Tensor) -> Tensor:
    # image (..., C, H, W); iu, iv (..., P) integer; zero outside the image
    H, W = image.shape[-2:]
    inside = (iu >= 0) & (iu < H) & (iv >= 0) & (iv < W)
    flat = (iu.clamp(0, H - 1) * W + iv.clamp(0, W - 1))
    values = image.flatten(-2).gather(-1, flat.unsqueeze(-2).expand(*image.shape[:-2], flat.shape[-1]))
    return values * inside.unsqueeze(-2).to(values.dtype)


def bilinear_sample_points(image: Tensor, u: Tensor, v: Tensor) -> Tensor:
    """Sample ``image (..., C, H, W)`` at pixel coordinates ``u, v (..., P)``, returns ``(..., C, P)``.

    Weights are the fractional parts of ``(u, v)``; samples outside the image read zero.
    """
    u0 = torch.floor(u)
    v0 = torch.floor(v)
    fu = (u - u0).unsqueeze(-2)
    fv = (v - v0).unsqueeze(-2)
    iu, iv = u0.long(), v0.long()
    v00 = _gather(image, iu, iv)
    v01 = _gather(image, iu, iv + 1)
    v10 = _gather(image, iu + 1, iv)
    v11 = _gather(image, iu + 1, iv + 1)
    top = (1 - fv) * v00 + fv * v01
    bottom = (1 - fv) * v10 + fv * v11
    return (1 - fu) * top + fu * bottom


def bilinear_sample(image: Tensor, u, v) -> Tensor:
    """Per-channel value of ``image (C, H, W)`` at a single pixel coordinate."""
    u = torch.as_tensor(u, dtype=image.dtype).reshape(1)
    v = torch.as_tensor(v, dtype=image.dtype).reshape(1)
    return bilinear_sample_points(image, u, v)[..., 0]


def warp_image(image: Tensor, A: Tensor) -> Tensor:
    """Warp ``image (C, H, W)`` or ``(B, C, H, W)`` by ``A`` (``(2, 3)`` or ``(B, 2, 3)``).

    Each output pixel ``(u', v')`` pulls the source value at ``A^-1 (u', v')``.
    Gradients reach ``A`` through the sampling coordinates.
    """
    H, W = image.shape[-2:]
    inv = to_pixel_affine(invert_affine(A), H, W)
    uu, vv = torch.meshgrid(
        torch.arange(H, dtype=image.dtype), torch.arange(W, dtype=image.dtype), indexing="ij"
    )
    grid = torch.stack([uu.reshape(-1), vv.reshape(-1)], dim=-1)
    src = transform_points(grid, inv)
    out = bilinear_sample_points(image, src[..., 0], src[..., 1])
    return out.reshape(image.shape)


def align_points(
    points: Tensor,
    A: Tensor,
    bounds: tuple[int, int] | None = None,
    payload: Tensor | None = None,
) -> tuple[Tensor, Tensor | None, Tensor]:
    """Map ``(N, 2)`` points through ``A`` and drop those leaving the image.

    With ``bounds=(H, W)`` points are in pixels and kept inside ``[0, H] x [0, W]``;
    without it they are normalized and kept inside ``[0, 1]^2``.
    Returns ``(kept_points, kept_payload, keep_mask)`` with input order preserved.
    """
    if bounds is not None:
        H, W = bounds
        scale = points.new_tensor([float(H), float(W)])
        mapped = transform_points(points / scale, A) * scale
        hi = scale
    else:
        mapped = transform_points(points, A)
        hi = mapped.new_ones(2)
    keep = ((mapped >= 0) & (mapped <= hi)).all(dim=-1)
    kept_payload = payload[keep] if payload is not None else None
    return mapped[keep], kept_payload, keep
