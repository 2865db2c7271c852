"""Deterministic raster renderer for the shape-product world.

Scenes are float32 (H, W, 3) images in [0, 1]: a smooth procedural
background with product glyphs drawn at integer-aligned boxes.  Rendering is
pure numpy with no global state, so re-rendering with the same arguments is
bitwise identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numerics import Box
from ..seeding import rng_for
from .catalog import ItemSpec


class RenderError(ValueError):
    pass


@dataclass
class Scene:
    image: np.ndarray                      # (H, W, 3) float32 in [0, 1]
    placements: list[tuple[int, Box]]      # (spu, box) in draw order


def _glyph_mask(glyph: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    # u, v in [-1, 1] over the box; shapes keep >= 50% fill so crops stay colorful
    if glyph == 0:    # circle
        return u * u + v * v <= 1.0
    if glyph == 1:    # square
        return np.maximum(np.abs(u), np.abs(v)) <= 0.92
    if glyph == 2:    # triangle
        return (v >= -0.95) & (np.abs(u) <= (0.95 - v) / 1.9 * 2.0)
    if glyph == 3:    # diamond
        return np.abs(u) + np.abs(v) <= 1.0
    if glyph == 4:    # ring
        r2 = u * u + v * v
        return (r2 <= 1.0) & (r2 >= 0.2)
    if glyph == 5:    # cross
        return (np.abs(u) <= 0.36) | (np.abs(v) <= 0.36)
    if glyph == 6:    # bar
        return np.abs(v) <= 0.5
    if glyph == 7:    # wedge
        return (u >= -0.95) & (np.abs(v) <= (u + 1.0) / 2.0)
    raise RenderError(f"unknown glyph id {glyph}")


def _pattern_mask(pattern: int, u: np.ndarray, v: np.ndarray, phase: float) -> np.ndarray:
    # True = primary color, False = darker shade
    if pattern == 0:  # solid
        return np.ones_like(u, dtype=bool)
    if pattern == 1:  # striped
        return np.floor(u * 2.5 + phase * 2.0).astype(np.int64) % 2 == 0
    if pattern == 2:  # dotted
        gu = (u * 2.0 + phase) % 1.0 - 0.5
        gv = (v * 2.0 + phase) % 1.0 - 0.5
        return gu * gu + gv * gv > 0.09
    if pattern == 3:  # checker
        cu = np.floor(u * 2.0 + phase).astype(np.int64)
        cv = np.floor(v * 2.0 + phase).astype(np.int64)
        return (cu + cv) % 2 == 0
    raise RenderError(f"unknown pattern id {pattern}")


def draw_item(image: np.ndarray, item: ItemSpec, box: Box, brightness: float = 1.0) -> None:
    """Paint one product glyph in place; box coordinates must be integral."""
    x0, y0, x1, y1 = (int(round(c)) for c in box.as_tuple())
    if x1 - x0 < 2 or y1 - y0 < 2:
        raise RenderError(f"box {box} too small to draw")
    h, w = y1 - y0, x1 - x0
    ys = (np.arange(h) + 0.5) / h * 2.0 - 1.0
    xs = (np.arange(w) + 0.5) / w * 2.0 - 1.0
    v, u = np.meshgrid(ys, xs, indexing="ij")
    mask = _glyph_mask(item.glyph, u, v)
    pat = _pattern_mask(item.pattern, u, v, item.pattern_phase)
    color = np.clip(item.rgb() * brightness, 0.03, 1.0).astype(np.float32)
    shade = np.clip(color * 0.45, 0.02, 1.0).astype(np.float32)
    patch = image[y0:y1, x0:x1]
    patch[mask & pat] = color
    patch[mask & ~pat] = shade


def render_background(height: int, width: int, style: int, seed: int) -> np.ndarray:
    """Smooth low-frequency field in a muted range, keyed by (seed, style)."""
    rng = rng_for(seed, "background", style)
    coarse = rng.uniform(0.12, 0.42, size=(4, 4, 3))
    ys = np.linspace(0, 3, height)
    xs = np.linspace(0, 3, width)
    y0 = np.floor(ys).astype(np.int64).clip(0, 2)
    x0 = np.floor(xs).astype(np.int64).clip(0, 2)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = coarse[np.ix_(y0, x0)] * (1 - wx) + coarse[np.ix_(y0, x0 + 1)] * wx
    bot = coarse[np.ix_(y0 + 1, x0)] * (1 - wx) + coarse[np.ix_(y0 + 1, x0 + 1)] * wx
    field = top * (1 - wy) + bot * wy
    speckle = rng.uniform(-0.015, 0.015, size=(height, width, 1))
    return np.clip(field + speckle, 0.0, 1.0).astype(np.float32)


def render_scene(items_with_boxes: list[tuple[ItemSpec, Box]], size_px: int,
                 bg_style: int, seed: int) -> Scene:
    """Render items over a procedural background; placements returned verbatim.

    Items are drawn in list order (later entries over earlier ones), so
    callers put the primary subject last.
    """
    for _, box in items_with_boxes:
        if box.width < 2 or box.height < 2:
            raise RenderError(f"degenerate layout box {box}")
    image = render_background(size_px, size_px, bg_style, seed)
    rng = rng_for(seed, "lighting", bg_style)
    placements = []
    for item, box in items_with_boxes:
        # mild lighting variance: enough to separate views of one product,
        # small enough that per-product color identity survives it
        brightness = float(rng.uniform(0.92, 1.08))
        draw_item(image, item, box, brightness=brightness)
        placements.append((item.spu, box))
    return Scene(image=image, placements=placements)


def sample_box(rng: np.random.Generator, size_px: int, lo: int, hi: int) -> Box:
    """Random integer box with side length in [lo, hi], fully inside the scene."""
    side = int(rng.integers(lo, hi + 1))
    side = min(side, size_px - 2)
    x0 = int(rng.integers(1, size_px - side))
    y0 = int(rng.integers(1, size_px - side))
    return Box(float(x0), float(y0), float(x0 + side), float(y0 + side))


def sample_layout(rng: np.random.Generator, n: int, size_px: int, lo: int, hi: int,
                  existing: list[Box] | None = None, iou_cap: float = 0.05,
                  retries: int = 50) -> list[Box]:
    """Rejection-sample up to n boxes keeping pairwise IoU under the cap."""
    placed = list(existing) if existing else []
    out = []
    for _ in range(n):
        for _ in range(retries):
            cand = sample_box(rng, size_px, lo, hi)
            if all(cand.iou(b) <= iou_cap for b in placed):
                placed.append(cand)
                out.append(cand)
                break
    return out
