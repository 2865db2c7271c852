"""Product catalog generation.

Each product (SPU) gets a primary category, a leaf category, four discrete
appearance attributes (glyph, palette color, pattern, size class), and a
per-product continuous jitter on color and pattern phase that makes every
SPU visually unique even when the discrete attributes collide.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..seeding import rng_for
from .vocab import BRANDS, COLOR_TABLE, GLYPHS, PATTERNS, SIZES, Vocab


class CatalogError(ValueError):
    pass


@dataclass(frozen=True)
class ItemSpec:
    spu: int
    primary: int
    leaf: int
    glyph: int
    color: int
    pattern: int
    size_cls: int
    brand: int
    color_jitter: tuple[float, float, float]
    pattern_phase: float
    title: tuple[int, ...]

    def rgb(self) -> np.ndarray:
        base = np.array(COLOR_TABLE[self.color][1])
        return np.clip(base + np.array(self.color_jitter), 0.05, 1.0)

    def title_ids(self) -> np.ndarray:
        return np.array(self.title, dtype=np.int64)


def gen_catalog(n_primary: int, leaf_per_cat: int, n_items: int, seed: int,
                vocab: Vocab) -> list[ItemSpec]:
    """Deterministic catalog with every primary category holding >= 2 items."""
    if n_primary < 1 or leaf_per_cat < 1 or n_items < 1:
        raise CatalogError("catalog counts must be >= 1")
    if n_items < 2 * n_primary:
        raise CatalogError(
            f"{n_items} items over {n_primary} primaries cannot give every "
            "category the >= 2 items cross-category sampling needs")
    items = []
    for spu in range(n_items):
        primary = spu % n_primary  # round-robin keeps categories populated
        rng = rng_for(seed, "item", spu)
        leaf = int(rng.integers(leaf_per_cat))
        glyph = int(rng.integers(len(GLYPHS)))
        color = int(rng.integers(len(COLOR_TABLE)))
        pattern = int(rng.integers(len(PATTERNS)))
        size_cls = int(rng.integers(len(SIZES)))
        brand = int(rng.integers(len(BRANDS)))
        jitter = tuple(rng.uniform(-0.16, 0.16, size=3).tolist())
        phase = float(rng.uniform(0.0, 1.0))
        title = tuple(int(t) for t in vocab.title_ids(
            brand, primary, leaf, size_cls, pattern, color, glyph))
        items.append(ItemSpec(
            spu=spu, primary=primary, leaf=leaf, glyph=glyph, color=color,
            pattern=pattern, size_cls=size_cls, brand=brand,
            color_jitter=jitter, pattern_phase=phase, title=title,
        ))
    return items
