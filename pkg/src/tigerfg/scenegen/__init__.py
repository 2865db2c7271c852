"""Synthetic shape-product world and the dataset construction pipeline."""

from .catalog import CatalogError, ItemSpec, gen_catalog
from .pipeline import (
    ClickRecord,
    PipelineGates,
    ProductViews,
    SplitBundle,
    SyntheticOracles,
    WorldConfig,
    build_splits,
    build_world,
    candidate_mining,
    category_balance,
    item_box_pairing,
    mosaic_synthesize,
    spu_dedup,
)
from .records import SampleRecord, load_manifest, read_pgm, write_manifests, write_pgm, write_ppm
from .render import Scene, render_scene, sample_layout
from .vocab import Vocab, build_vocab

__all__ = [
    "CatalogError", "ItemSpec", "gen_catalog",
    "ClickRecord", "PipelineGates", "ProductViews", "SplitBundle", "SyntheticOracles",
    "WorldConfig", "build_splits", "build_world", "candidate_mining", "category_balance",
    "item_box_pairing", "mosaic_synthesize", "spu_dedup",
    "SampleRecord", "load_manifest", "write_manifests", "write_ppm", "write_pgm", "read_pgm",
    "Scene", "render_scene", "sample_layout",
    "Vocab", "build_vocab",
]
