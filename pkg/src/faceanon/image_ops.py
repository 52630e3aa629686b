"""Differentiable crop / resample / paste-back over ``(C, H, W)`` tensors.

All sampling uses the align-corners convention: a grid over a box puts its
first and last points exactly on the box edges, and integer coordinates hit
pixel centers, so an identity grid reproduces its source bit for bit.
"""

from __future__ import annotations

import math

import torch

from .core_data import Box


def enlarge_box(box: Box, factor: float, bounds: tuple[int, int]) -> Box:
    """Scale box sides by ``factor`` about the center, then clip to an ``(h, w)`` image."""
    if factor <= 0:
        raise ValueError(f"enlargement factor must be positive, got {factor}")
    h, w = bounds
    cx, cy = box.center
    half_w = box.width * factor / 2
    half_h = box.height * factor / 2
    x1 = min(max(cx - half_w, 0.0), w - 1.0)
    x2 = min(max(cx + half_w, 0.0), w - 1.0)
    y1 = min(max(cy - half_h, 0.0), h - 1.0)
    y2 = min(max(cy + half_h, 0.0), h - 1.0)
    if not (x1 < x2 and y1 < y2):
        raise ValueError(f"box {box} collapses to zero area inside a {h}x{w} image")
    return Box(x1, y1, x2, y2)


def _axis(lo: float, hi: float, n: int) -> torch.Tensor:
    if n == 1:
        return torch.tensor([(lo + hi) / 2], dtype=torch.float64)
    i = torch.arange(n, dtype=torch.float64)
    # multiply before dividing so integer spans land on exact integers
    return lo + i * (hi - lo) / (n - 1)


def make_crop_grid(box: Box, out_size: tuple[int, int]) -> torch.Tensor:
    """``(out_h, out_w, 2)`` float64 grid of ``(x, y)`` source coordinates spanning ``box``."""
    out_h, out_w = out_size
    xs = _axis(box.x1, box.x2, out_w)
    ys = _axis(box.y1, box.y2, out_h)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx, gy], dim=-1)


def make_crop_grids(boxes: torch.Tensor, out_size: tuple[int, int]) -> torch.Tensor:
    """Batched :func:`make_crop_grid` for an ``(N, 4)`` tensor of boxes -> ``(N, h, w, 2)``."""
    out_h, out_w = out_size
    dt = boxes.dtype
    tx = torch.linspace(0, 1, out_w, dtype=dt) if out_w > 1 else torch.full((1,), 0.5, dtype=dt)
    ty = torch.linspace(0, 1, out_h, dtype=dt) if out_h > 1 else torch.full((1,), 0.5, dtype=dt)
    x1, y1, x2, y2 = boxes.unbind(-1)
    gx = x1[:, None] + (x2 - x1)[:, None] * tx[None, :]
    gy = y1[:, None] + (y2 - y1)[:, None] * ty[None, :]
    n = boxes.shape[0]
    return torch.stack(
        [gx[:, None, :].expand(n, out_h, out_w), gy[:, :, None].expand(n, out_h, out_w)],
        dim=-1,
    )


def grid_sample(image: torch.Tensor, grid: torch.Tensor) -> torch.Tensor:
    """Bilinear sampling of a ``(C, H, W)`` image at ``grid[..., (x, y)]``.

    Out-of-range coordinates are clamped to the border. Returns ``(C, *grid.shape[:-1])``.
    Gradients flow to the image (and, where not clamped, to the grid).
    """
    c, h, w = image.shape
    grid = grid.to(image.dtype)
    x = grid[..., 0].clamp(0, w - 1)
    y = grid[..., 1].clamp(0, h - 1)
    x0 = x.detach().floor().clamp(max=max(w - 2, 0)).long()
    y0 = y.detach().floor().clamp(max=max(h - 2, 0)).long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)
    wx = x - x0.to(image.dtype)
    wy = y - y0.to(image.dtype)

    flat = image.reshape(c, h * w)
    shape = x.shape

    def gather(yy, xx):
        return flat[:, (yy * w + xx).reshape(-1)].reshape(c, *shape)

    return (
        gather(y0, x0) * ((1 - wx) * (1 - wy))
        + gather(y0, x1) * (wx * (1 - wy))
        + gather(y1, x0) * ((1 - wx) * wy)
        + gather(y1, x1) * (wx * wy)
    )


def crop(image: torch.Tensor, box: Box, out_size: tuple[int, int]) -> torch.Tensor:
    return grid_sample(image, make_crop_grid(box, out_size))


def pixel_extent(box: Box) -> tuple[int, int, int, int]:
    """Integer pixel rectangle ``(c0, r0, c1, r1)`` (inclusive) covering ``box``, rounded outward."""
    return (
        math.floor(box.x1),
        math.floor(box.y1),
        math.ceil(box.x2),
        math.ceil(box.y2),
    )


def integer_box(box: Box) -> Box:
    c0, r0, c1, r1 = pixel_extent(box)
    return Box(float(c0), float(r0), float(c1), float(r1))


def paste_composite(frame: torch.Tensor, box: Box, patch: torch.Tensor) -> torch.Tensor:
    """Return ``frame`` with the region under ``box`` replaced by ``patch`` resampled onto it.

    The resampling is the exact inverse of :func:`make_crop_grid`: a target pixel at
    ``(c, r)`` reads the patch at the position the crop grid assigned to ``(c, r)``.
    Nothing outside the rounded-outward box changes.
    """
    _, h, w = frame.shape
    c0, r0, c1, r1 = pixel_extent(box)
    if c0 < 0 or r0 < 0 or c1 > w - 1 or r1 > h - 1:
        raise ValueError(f"box {box} extends outside a {h}x{w} frame")
    ph, pw = patch.shape[-2:]
    cols = torch.arange(c0, c1 + 1, dtype=torch.float64)
    rows = torch.arange(r0, r1 + 1, dtype=torch.float64)
    u = (cols - box.x1) * (pw - 1) / box.width
    v = (rows - box.y1) * (ph - 1) / box.height
    gv, gu = torch.meshgrid(v, u, indexing="ij")
    resampled = grid_sample(patch.to(frame.dtype), torch.stack([gu, gv], dim=-1))
    out = frame.clone()
    out[:, r0 : r1 + 1, c0 : c1 + 1] = resampled
    return out
