"""Sample records, JSONL manifests, image blobs, and PPM/PGM export.

A record is the shared six-part tuple: query image + query box, item image +
item box, title tokens, category.  Manifests are one JSON object per line;
the pixel data lives in a single blob container (the flat binary tensor
format) referenced by entry name, so a Mosaic record shares its source's
query image bit-for-bit instead of duplicating it.
"""

from __future__ import annotations

import json
import os
from collections import OrderedDict
from dataclasses import dataclass, replace

import numpy as np

from ..checkpoint import load_tensors, save_tensors
from ..numerics import Box

MANIFEST_FIELDS = (
    "split", "spu", "category", "leaf", "title_tokens",
    "query_blob", "query_box", "item_blob", "item_box", "mosaic_group",
)


class RecordError(ValueError):
    pass


@dataclass
class SampleRecord:
    spu: int
    primary: int
    leaf: int
    title: np.ndarray
    query_image: np.ndarray
    query_box: Box
    item_image: np.ndarray
    item_box: Box
    split: str = ""
    is_mosaic: bool = False
    mosaic_group: int | None = None

    def validate(self, vocab_size: int) -> None:
        for name, img, box in (("query", self.query_image, self.query_box),
                               ("item", self.item_image, self.item_box)):
            h, w = img.shape[0], img.shape[1]
            if img.ndim != 3 or img.shape[2] != 3:
                raise RecordError(f"{name} image must be (H, W, 3)")
            if box.x1 > w + 1e-9 or box.y1 > h + 1e-9:
                raise RecordError(f"{name} box {box} outside {h}x{w} image")
        if len(self.title) < 1:
            raise RecordError("empty title")
        if self.title.min() < 0 or self.title.max() >= vocab_size:
            raise RecordError("title token outside vocabulary")

    def with_mosaic(self, item_image: np.ndarray, item_box: Box,
                    mosaic_group: int | None) -> "SampleRecord":
        return replace(self, item_image=item_image, item_box=item_box,
                       is_mosaic=True, mosaic_group=mosaic_group)


def _box_list(box: Box) -> list[float]:
    return [float(c) for c in box.as_tuple()]


def write_manifests(out_dir: str | os.PathLike, splits: dict[str, list[SampleRecord]]) -> None:
    """Write one JSONL manifest per split plus the shared blob container."""
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    blobs: "OrderedDict[str, np.ndarray]" = OrderedDict()

    def blob_entry(name: str, image: np.ndarray) -> str:
        if name not in blobs:
            blobs[name] = np.asarray(image, dtype=np.float32)
        return name

    for split_name, records in splits.items():
        lines = []
        for rec in records:
            q_name = blob_entry(f"q{rec.spu}", rec.query_image)
            i_name = blob_entry(f"m{rec.spu}" if rec.is_mosaic else f"p{rec.spu}",
                                rec.item_image)
            row = {
                "split": split_name,
                "spu": int(rec.spu),
                "category": int(rec.primary),
                "leaf": int(rec.leaf),
                "title_tokens": [int(t) for t in rec.title],
                "query_blob": q_name,
                "query_box": _box_list(rec.query_box),
                "item_blob": i_name,
                "item_box": _box_list(rec.item_box),
                "mosaic_group": rec.mosaic_group,
            }
            lines.append(json.dumps(row, sort_keys=True))
        path = os.path.join(out_dir, f"{split_name}.jsonl")
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="ascii") as fh:
            fh.write("\n".join(lines) + ("\n" if lines else ""))
        os.replace(tmp, path)
    save_tensors(os.path.join(out_dir, "blobs.bin"), blobs)


def load_manifest(data_dir: str | os.PathLike, split: str,
                  blobs: "OrderedDict[str, np.ndarray] | None" = None) -> list[SampleRecord]:
    """Load one split; pass a preloaded blob dict to share across splits."""
    data_dir = os.fspath(data_dir)
    if blobs is None:
        blobs = load_tensors(os.path.join(data_dir, "blobs.bin"))
    records = []
    with open(os.path.join(data_dir, f"{split}.jsonl"), "r", encoding="ascii") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            records.append(SampleRecord(
                spu=int(row["spu"]),
                primary=int(row["category"]),
                leaf=int(row["leaf"]),
                title=np.array(row["title_tokens"], dtype=np.int64),
                query_image=blobs[row["query_blob"]],
                query_box=Box(*row["query_box"]),
                item_image=blobs[row["item_blob"]],
                item_box=Box(*row["item_box"]),
                split=row["split"],
                is_mosaic=row["item_blob"].startswith("m"),
                mosaic_group=row["mosaic_group"],
            ))
    return records


def write_ppm(path: str | os.PathLike, image: np.ndarray) -> None:
    """Binary PPM (P6) export of an (H, W, 3) float image in [0, 1]."""
    img = np.asarray(image)
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape[0], data.shape[1]
    with open(os.fspath(path), "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def write_pgm(path: str | os.PathLike, gray: np.ndarray) -> None:
    """Binary PGM (P5) export of an (H, W) uint8 array."""
    data = np.asarray(gray, dtype=np.uint8)
    h, w = data.shape
    with open(os.fspath(path), "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    """Reference P5 reader used to round-trip heatmap exports."""
    with open(os.fspath(path), "rb") as fh:
        raw = fh.read()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise RecordError("not a P5 PGM file")
    w, h = (int(x) for x in parts[1].split())
    if int(parts[2]) != 255:
        raise RecordError("unsupported maxval")
    data = np.frombuffer(parts[3][: w * h], dtype=np.uint8)
    return data.reshape(h, w).copy()
