"""Token vocabulary for the synthetic product world.

Titles are short templated token sequences: brand filler, primary-category
word, leaf word, then the four appearance attributes.  The vocabulary is a
pure function of the world dimensions, so every component (data generation,
training, the heatmap CLI) can rebuild it from the config alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GLYPHS = ["circle", "square", "triangle", "diamond", "ring", "cross", "bar", "wedge"]
PATTERNS = ["solid", "striped", "dotted", "checker"]
SIZES = ["small", "medium", "large"]
BRANDS = [f"brand-{c}" for c in "abcdefghijklmnop"]

# (name, base RGB); rendered color adds a per-product jitter on top
COLOR_TABLE = [
    ("red", (0.85, 0.18, 0.18)),
    ("green", (0.18, 0.75, 0.25)),
    ("blue", (0.22, 0.35, 0.90)),
    ("yellow", (0.90, 0.85, 0.18)),
    ("magenta", (0.85, 0.22, 0.80)),
    ("cyan", (0.18, 0.80, 0.85)),
    ("orange", (0.95, 0.55, 0.12)),
    ("white", (0.92, 0.92, 0.92)),
]
COLORS = [name for name, _ in COLOR_TABLE]

PRIMARY_NAMES = [
    "apparel", "footwear", "bags", "beauty", "electronics", "appliances",
    "toys", "sports", "garden", "kitchen", "office", "jewelry",
    "grocery", "pets", "tools", "furniture",
]


class VocabError(ValueError):
    pass


@dataclass(frozen=True)
class Vocab:
    words: tuple[str, ...]
    n_primary: int
    leaf_per_cat: int

    def __post_init__(self):
        object.__setattr__(self, "_index", {w: i for i, w in enumerate(self.words)})

    def __len__(self) -> int:
        return len(self.words)

    def id(self, word: str) -> int:
        try:
            return self._index[word]
        except KeyError:
            raise VocabError(f"unknown word {word!r}") from None

    def word(self, token_id: int) -> str:
        return self.words[token_id]

    def primary_word(self, primary: int) -> str:
        return primary_name(primary)

    def leaf_word(self, primary: int, leaf: int) -> str:
        return f"{primary_name(primary)}-style-{leaf}"

    def title_ids(self, brand: int, primary: int, leaf: int, size_cls: int,
                  pattern: int, color: int, glyph: int) -> np.ndarray:
        words = [
            BRANDS[brand % len(BRANDS)],
            self.primary_word(primary),
            self.leaf_word(primary, leaf),
            SIZES[size_cls],
            PATTERNS[pattern],
            COLORS[color],
            GLYPHS[glyph],
        ]
        return np.array([self.id(w) for w in words], dtype=np.int64)

    def decode(self, ids) -> list[str]:
        return [self.word(int(i)) for i in ids]

    def encode_words(self, words: list[str]) -> np.ndarray:
        return np.array([self.id(w) for w in words], dtype=np.int64)


def primary_name(primary: int) -> str:
    if primary < len(PRIMARY_NAMES):
        return PRIMARY_NAMES[primary]
    return f"vertical-{primary}"


def build_vocab(n_primary: int, leaf_per_cat: int, vocab_size: int = 256) -> Vocab:
    """Assemble the fixed vocabulary; errors if the world needs more tokens."""
    words = ["<pad>"]
    words += GLYPHS + COLORS + PATTERNS + SIZES + BRANDS
    words += [primary_name(p) for p in range(n_primary)]
    for p in range(n_primary):
        for leaf in range(leaf_per_cat):
            words.append(f"{primary_name(p)}-style-{leaf}")
    if len(words) > vocab_size:
        raise VocabError(
            f"world needs {len(words)} tokens but vocabulary is capped at {vocab_size}")
    return Vocab(words=tuple(words), n_primary=n_primary, leaf_per_cat=leaf_per_cat)


TITLE_LEN = 7
