"""Numeric primitives shared by every other module.

Everything here is a pure function of its inputs: cosine similarity,
temperature softmax, InfoNCE, KL divergence, softplus, single-sample ROI
align, bilinear grid resampling, and the central-difference gradient oracle
used to verify every analytic gradient in the project.

Functions accept torch tensors and preserve dtype; verification code runs
them in float64, training in float32.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch


class NumericsError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    """Axis-aligned region in continuous coordinates, (x0, y0) inclusive top-left."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (0.0 <= self.x0 < self.x1 and 0.0 <= self.y0 < self.y1):
            raise NumericsError(f"degenerate or negative box {self}")

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return self.width * self.height

    def scaled(self, factor: float) -> "Box":
        return Box(self.x0 * factor, self.y0 * factor, self.x1 * factor, self.y1 * factor)

    def iou(self, other: "Box") -> float:
        ix0, iy0 = max(self.x0, other.x0), max(self.y0, other.y0)
        ix1, iy1 = min(self.x1, other.x1), min(self.y1, other.y1)
        if ix0 >= ix1 or iy0 >= iy1:
            return 0.0
        inter = (ix1 - ix0) * (iy1 - iy0)
        return inter / (self.area + other.area - inter)

    def intersection_area(self, other: "Box") -> float:
        ix0, iy0 = max(self.x0, other.x0), max(self.y0, other.y0)
        ix1, iy1 = min(self.x1, other.x1), min(self.y1, other.y1)
        if ix0 >= ix1 or iy0 >= iy1:
            return 0.0
        return (ix1 - ix0) * (iy1 - iy0)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x0, self.y0, self.x1, self.y1)


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def l2_normalize(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Normalize to unit L2 norm; zero vectors are an error, never NaN."""
    x = _as_tensor(x)
    norms = torch.linalg.vector_norm(x, dim=dim)
    if torch.any(norms == 0):
        raise NumericsError("cannot normalize a zero vector")
    return x / norms.unsqueeze(dim)


def cosine_sim(a, b) -> torch.Tensor:
    """Cosine similarity of two vectors; zero-norm inputs raise."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape or a.dim() != 1:
        raise NumericsError(f"cosine_sim expects equal-dim vectors, got {a.shape} vs {b.shape}")
    na, nb = torch.linalg.vector_norm(a), torch.linalg.vector_norm(b)
    if na == 0 or nb == 0:
        raise NumericsError("cosine of a zero vector is undefined")
    return (a @ b) / (na * nb)


def cosine_sim_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise cosine similarities between rows of ``a`` and rows of ``b``."""
    a, b = _as_tensor(a), _as_tensor(b)
    return l2_normalize(a, dim=-1) @ l2_normalize(b, dim=-1).transpose(-1, -2)


def softmax(scores, tau: float = 1.0, dim: int = -1) -> torch.Tensor:
    """Temperature softmax with max subtraction for stability."""
    if tau <= 0:
        raise NumericsError(f"temperature must be positive, got {tau}")
    scores = _as_tensor(scores)
    if not torch.isfinite(scores).all():
        raise NumericsError("softmax over non-finite scores")
    z = scores / tau
    z = z - z.max(dim=dim, keepdim=True).values
    e = torch.exp(z)
    return e / e.sum(dim=dim, keepdim=True)


def info_nce(a: torch.Tensor, b: torch.Tensor, tau: float) -> torch.Tensor:
    """InfoNCE over a batch of paired vectors, row j positive against all of b.

    Value is -mean_j log softmax_l(sim(a_j, b_l)/tau)[j]; computed via
    logsumexp so small temperatures stay finite.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.dim() != 2 or b.dim() != 2 or a.shape[0] != b.shape[0] or a.shape[0] == 0:
        raise NumericsError(f"info_nce expects equal nonempty batches, got {a.shape}, {b.shape}")
    if tau <= 0:
        raise NumericsError(f"temperature must be positive, got {tau}")
    logits = cosine_sim_matrix(a, b) / tau
    log_prob = logits.diagonal() - torch.logsumexp(logits, dim=1)
    return -log_prob.mean()


def kl_divergence(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """KL(p || q) with 0*log 0 := 0 and q floored at 1e-12 before the log.

    The floor keeps early random-init training away from -inf when the
    student distribution underflows.
    """
    p, q = _as_tensor(p), _as_tensor(q)
    if p.shape != q.shape:
        raise NumericsError(f"KL dimension mismatch: {p.shape} vs {q.shape}")
    q = torch.clamp(q, min=1e-12)
    ratio = torch.where(p > 0, p / q, torch.ones_like(p))
    terms = torch.where(p > 0, p * torch.log(ratio), torch.zeros_like(p))
    return terms.sum(dim=-1).mean() if p.dim() > 1 else terms.sum()


def softplus(x) -> torch.Tensor:
    """ln(1 + e^x), linear for large x and e^x for very negative x."""
    x = _as_tensor(x)
    if not torch.isfinite(x).all():
        raise NumericsError("softplus of non-finite input")
    return torch.nn.functional.softplus(x)


def bilinear_sample(grid: torch.Tensor, ys: torch.Tensor, xs: torch.Tensor) -> torch.Tensor:
    """Sample a (H, W, C) grid at continuous points, half-pixel convention.

    A cell's value lives at its center (r + 0.5, c + 0.5); sample points are
    clamped to the center lattice, so sampling exactly at every cell center
    reproduces the grid.  Differentiable in ``grid``.
    """
    h, w = grid.shape[0], grid.shape[1]
    ys = torch.clamp(ys - 0.5, 0.0, float(h - 1))
    xs = torch.clamp(xs - 0.5, 0.0, float(w - 1))
    y0 = torch.clamp(ys.floor().long(), 0, h - 1)
    x0 = torch.clamp(xs.floor().long(), 0, w - 1)
    y1 = torch.clamp(y0 + 1, 0, h - 1)
    x1 = torch.clamp(x0 + 1, 0, w - 1)
    wy = (ys - y0.to(ys.dtype)).unsqueeze(-1)
    wx = (xs - x0.to(xs.dtype)).unsqueeze(-1)
    top = grid[y0, x0] * (1 - wx) + grid[y0, x1] * wx
    bot = grid[y1, x0] * (1 - wx) + grid[y1, x1] * wx
    return top * (1 - wy) + bot * wy


def roi_align(grid: torch.Tensor, box: Box, out_h: int, out_w: int) -> torch.Tensor:
    """Resample the box region of a (H, W, C) grid to (out_h, out_w, C).

    One bilinear sample per output cell, taken at the cell center inside the
    box.  Differentiable in ``grid``; the box is data, not a parameter.
    """
    if out_h < 1 or out_w < 1:
        raise NumericsError("roi_align output dims must be >= 1")
    grid = _as_tensor(grid)
    if grid.dim() == 2:
        grid = grid.unsqueeze(-1)
    h, w = grid.shape[0], grid.shape[1]
    if box.x1 > w + 1e-9 or box.y1 > h + 1e-9:
        raise NumericsError(f"box {box} outside grid extent {h}x{w}")
    cell_h = box.height / out_h
    cell_w = box.width / out_w
    ys = box.y0 + (torch.arange(out_h, dtype=grid.dtype) + 0.5) * cell_h
    xs = box.x0 + (torch.arange(out_w, dtype=grid.dtype) + 0.5) * cell_w
    yy = ys.view(out_h, 1).expand(out_h, out_w)
    xx = xs.view(1, out_w).expand(out_h, out_w)
    return bilinear_sample(grid, yy.reshape(-1), xx.reshape(-1)).view(out_h, out_w, -1)


def resize_grid_bilinear(grid: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Resize a (H, W, C) grid with the same sampling rules as roi_align."""
    h, w = grid.shape[0], grid.shape[1]
    return roi_align(grid, Box(0.0, 0.0, float(w), float(h)), out_h, out_w)


def finite_diff_grad(
    f: Callable[[torch.Tensor], float],
    theta: torch.Tensor,
    eps: float = 1e-4,
    coords: Sequence[int] | None = None,
) -> torch.Tensor:
    """Central-difference gradient estimate of a scalar function.

    ``theta`` is flattened; each coordinate (or the given subset) is
    perturbed by +-eps and the symmetric difference quotient recorded.
    This is the independent oracle every analytic gradient in the project
    is checked against, so it deliberately calls nothing but ``f``.
    """
    theta = _as_tensor(theta).detach().clone().double()
    flat = theta.reshape(-1)
    n = flat.numel()
    idx = range(n) if coords is None else coords
    grad = torch.zeros(n, dtype=torch.float64)
    for i in idx:
        orig = flat[i].item()
        flat[i] = orig + eps
        f_plus = float(f(theta.reshape(theta.shape)))
        flat[i] = orig - eps
        f_minus = float(f(theta.reshape(theta.shape)))
        flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericsError(f"non-finite function value at coordinate {i}")
        grad[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad.reshape(theta.shape)
