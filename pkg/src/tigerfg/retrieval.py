"""Gallery indexing, exact ranking, metrics, and heatmap export.

The index stores unit-norm item embeddings computed from the full image and
title only; item boxes never enter this path, by construction of the
encoding interface.  Retrieval is exact brute force with ties broken by
ascending candidate id, so two runs over the same checkpoint are identical.
"""

from __future__ import annotations

import math
import os
import warnings
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
import torch

from .checkpoint import save_tensors
from .encoders import crop_and_resize
from .model import TigerFG
from .scenegen.records import SampleRecord, write_pgm


class RetrievalError(ValueError):
    pass


@dataclass
class RetrievalIndex:
    ids: np.ndarray                 # (N,) int64, manifest order
    embeddings: np.ndarray          # (N, C) float32, unit rows
    categories: dict[int, int]

    def __post_init__(self):
        if len(set(self.ids.tolist())) != len(self.ids):
            raise RetrievalError("duplicate gallery ids")
        norms = np.linalg.norm(self.embeddings, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-5):
            raise RetrievalError("index rows must be unit norm")

    def save(self, out_dir: str | os.PathLike) -> None:
        out_dir = os.fspath(out_dir)
        os.makedirs(out_dir, exist_ok=True)
        save_tensors(os.path.join(out_dir, "embeddings.bin"),
                     OrderedDict(embeddings=self.embeddings))
        tmp = os.path.join(out_dir, "ids.txt.tmp")
        with open(tmp, "w", encoding="ascii") as fh:
            for gid in self.ids:
                fh.write(f"{int(gid)}\n")
        os.replace(tmp, os.path.join(out_dir, "ids.txt"))


def load_index(index_dir: str | os.PathLike,
               categories: dict[int, int] | None = None) -> RetrievalIndex:
    from .checkpoint import load_tensors
    index_dir = os.fspath(index_dir)
    emb = load_tensors(os.path.join(index_dir, "embeddings.bin"))["embeddings"]
    with open(os.path.join(index_dir, "ids.txt"), "r", encoding="ascii") as fh:
        ids = np.array([int(line) for line in fh if line.strip()], dtype=np.int64)
    if len(ids) != len(emb):
        raise RetrievalError("id sidecar and embedding table disagree on length")
    return RetrievalIndex(ids=ids, embeddings=emb, categories=categories or {})


@dataclass
class RankedResult:
    query_id: int
    ranked_ids: np.ndarray
    scores: np.ndarray
    relevant: frozenset

    def __post_init__(self):
        if not self.relevant:
            raise RetrievalError(f"query {self.query_id} has no relevant candidates")

    def relevant_ranks(self) -> list[int]:
        """1-based ranks of the relevant candidates that appear in the list."""
        pos = {int(gid): i + 1 for i, gid in enumerate(self.ranked_ids)}
        return sorted(pos[g] for g in self.relevant if g in pos)


# ---------------------------------------------------------------------------
# encoding


def encode_gallery(model: TigerFG, images: np.ndarray, titles: list[np.ndarray],
                   chunk: int = 64) -> np.ndarray:
    """Unit-norm item embeddings from (image, title) pairs only: no boxes."""
    dtype = next(model.parameters()).dtype
    out = []
    with torch.no_grad():
        for start in range(0, len(images), chunk):
            imgs = torch.as_tensor(images[start:start + chunk], dtype=dtype)
            batch_titles = titles[start:start + chunk]
            length = max(len(t) for t in batch_titles)
            ids = np.zeros((len(batch_titles), length), dtype=np.int64)
            mask = np.zeros((len(batch_titles), length), dtype=bool)
            for i, t in enumerate(batch_titles):
                ids[i, :len(t)] = t
                mask[i, :len(t)] = True
            fused = model.fuse_items(imgs, torch.from_numpy(ids), torch.from_numpy(mask))
            f_i = fused["f_i"]
            f_i = f_i / torch.linalg.vector_norm(f_i, dim=-1, keepdim=True)
            out.append(f_i.double().cpu().numpy())
    return np.concatenate(out, axis=0).astype(np.float32)


def encode_queries(model: TigerFG, records: list[SampleRecord], chunk: int = 64) -> np.ndarray:
    dtype = next(model.parameters()).dtype
    cp = model.cfg.crop_px
    crops = np.stack([crop_and_resize(r.query_image, r.query_box, cp, cp) for r in records])
    out = []
    with torch.no_grad():
        for start in range(0, len(crops), chunk):
            f_q = model.encode_query(torch.as_tensor(crops[start:start + chunk], dtype=dtype))
            f_q = f_q / torch.linalg.vector_norm(f_q, dim=-1, keepdim=True)
            out.append(f_q.double().cpu().numpy())
    return np.concatenate(out, axis=0).astype(np.float32)


def build_index(records: list[SampleRecord], model: TigerFG) -> RetrievalIndex:
    """Encode a gallery in manifest order; duplicate ids are an error."""
    images = np.stack([r.item_image for r in records])
    titles = [r.title for r in records]
    embeddings = encode_gallery(model, images, titles)
    ids = np.array([r.spu for r in records], dtype=np.int64)
    return RetrievalIndex(ids=ids, embeddings=embeddings,
                          categories={r.spu: r.primary for r in records})


# ---------------------------------------------------------------------------
# ranking and metrics


def query(index: RetrievalIndex, query_vec: np.ndarray, top_k: int,
          query_id: int = -1, relevant=None) -> RankedResult:
    """Exact cosine ranking with stable ascending-id tie-break."""
    if top_k > len(index.ids):
        warnings.warn(f"top_k={top_k} clamped to gallery size {len(index.ids)}")
        top_k = len(index.ids)
    scores = index.embeddings.astype(np.float64) @ np.asarray(query_vec, dtype=np.float64)
    order = np.lexsort((index.ids, -scores))[:top_k]
    return RankedResult(
        query_id=query_id,
        ranked_ids=index.ids[order],
        scores=scores[order],
        relevant=frozenset(relevant if relevant is not None else {query_id}),
    )


def _check_k(k: int) -> None:
    if k < 1:
        raise RetrievalError("K must be >= 1")


def recall_at_k(results: list[RankedResult], k: int) -> float:
    """Fraction of the relevant set retrieved in the top K, averaged over queries."""
    _check_k(k)
    vals = []
    for res in results:
        ranks = res.relevant_ranks()
        vals.append(sum(r <= k for r in ranks) / len(res.relevant))
    return float(np.mean(vals))


def mrr_at_k(results: list[RankedResult], k: int) -> float:
    """Reciprocal rank of the first relevant hit, zero when it falls past K."""
    _check_k(k)
    vals = []
    for res in results:
        ranks = res.relevant_ranks()
        first = ranks[0] if ranks else None
        vals.append(1.0 / first if first is not None and first <= k else 0.0)
    return float(np.mean(vals))


def ndcg_at_k(results: list[RankedResult], k: int) -> float:
    """Binary-gain NDCG with the ideal DCG over min(#relevant, K)."""
    _check_k(k)
    vals = []
    for res in results:
        dcg = sum(1.0 / math.log2(r + 1) for r in res.relevant_ranks() if r <= k)
        ideal = sum(1.0 / math.log2(i + 2) for i in range(min(len(res.relevant), k)))
        vals.append(dcg / ideal)
    return float(np.mean(vals))


def hitrate_at_k(results: list[RankedResult], k: int) -> float:
    """Indicator of at least one relevant candidate in the top K."""
    _check_k(k)
    vals = []
    for res in results:
        ranks = res.relevant_ranks()
        vals.append(1.0 if ranks and ranks[0] <= k else 0.0)
    return float(np.mean(vals))


def evaluate(records: list[SampleRecord], model: TigerFG, split_name: str,
             ks: tuple[int, ...] = (1, 4, 10),
             index: RetrievalIndex | None = None) -> list[dict]:
    """Encode queries, rank against the split's full gallery, aggregate metrics."""
    if index is None:
        index = build_index(records, model)
    queries = encode_queries(model, records)
    results = [query(index, q, top_k=len(index.ids), query_id=rec.spu)
               for q, rec in zip(queries, records)]
    rows = []
    for k in ks:
        rows.append({
            "split": split_name,
            "K": int(k),
            "recall": recall_at_k(results, k),
            "mrr": mrr_at_k(results, k),
            "ndcg": ndcg_at_k(results, k),
            "hitrate": hitrate_at_k(results, k),
            "n_queries": len(results),
        })
    return rows


# ---------------------------------------------------------------------------
# heatmap export


def heatmap_grid(model: TigerFG, item_image: np.ndarray, title: np.ndarray) -> np.ndarray:
    """Text-conditioned anchor scores reshaped to the visual feature grid."""
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        imgs = torch.as_tensor(item_image[None], dtype=dtype)
        ids = torch.as_tensor(np.asarray(title, dtype=np.int64)[None])
        fused = model.fuse_items(imgs, ids, torch.ones_like(ids, dtype=torch.bool))
        gh, gw = fused["visual"]["grid"]
        return fused["scores"][0].reshape(gh, gw).cpu().numpy()


def heatmap_export(model: TigerFG, item_image: np.ndarray, title: np.ndarray,
                   out_prefix: str | os.PathLike) -> dict:
    """Write the score grid as CSV and a min-max normalized PGM image."""
    grid = heatmap_grid(model, item_image, title)
    prefix = os.fspath(out_prefix)
    csv_path, pgm_path = prefix + ".csv", prefix + ".pgm"
    tmp = csv_path + ".tmp"
    with open(tmp, "w", encoding="ascii") as fh:
        for row in grid:
            fh.write(",".join(f"{v:.8f}" for v in row) + "\n")
    os.replace(tmp, csv_path)
    span = grid.max() - grid.min()
    if span > 0:
        norm = (grid - grid.min()) / span
    else:
        norm = np.zeros_like(grid)
    write_pgm(pgm_path, np.round(norm * 255.0).astype(np.uint8))
    return {"csv": csv_path, "pgm": pgm_path, "grid": grid}
