"""Full retrieval model: asymmetric dual encoder with text-guided item fusion.

The query side is a visual encoder plus an MLP head over the CLS feature.
The item side runs the visual and text encoders, projects both into the
unified space, and fuses them through the slot module.  The same item
visual encoder also encodes the cropped target region for the alignment and
anchor losses; the anchor projection is frozen at initialization.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import torch
from torch import nn

from .checkpoint import load_tensors, save_tensors
from .encoders import ProjectionHeads, TextEncoder, VisualEncoder, seeded_init_
from .fusion import ItemFusion


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    c_v: int = 64
    c_t: int = 64
    c_u: int = 32
    c_a: int = 32
    blocks: int = 2
    heads: int = 2
    patch_px: int = 8
    scene_px: int = 64
    crop_px: int = 32
    n_slots: int = 8
    vocab_size: int = 256
    max_title: int = 8
    lambda_m: float = 0.5
    lambda_c: float = 0.5
    tau_p: float = 0.07

    def __post_init__(self):
        if self.scene_px % self.patch_px or self.crop_px % self.patch_px:
            raise ModelError("image sizes must be divisible by the patch size")


class TigerFG(nn.Module):
    """Query encoder, item encoders, projection heads, and the fusion module."""

    def __init__(self, cfg: ModelConfig, seed: int):
        super().__init__()
        self.cfg = cfg
        self.seed = seed
        self.query_visual = VisualEncoder(cfg.c_v, cfg.patch_px, cfg.crop_px,
                                          cfg.blocks, cfg.heads)
        self.item_visual = VisualEncoder(cfg.c_v, cfg.patch_px, cfg.scene_px,
                                         cfg.blocks, cfg.heads)
        self.text_encoder = TextEncoder(cfg.vocab_size, cfg.c_t, cfg.max_title,
                                        cfg.blocks, cfg.heads)
        self.heads = ProjectionHeads(cfg.c_v, cfg.c_t, cfg.c_u, cfg.c_a)
        self.fusion = ItemFusion(cfg.c_u, cfg.n_slots, cfg.heads,
                                 lambda_m=cfg.lambda_m, lambda_c=cfg.lambda_c,
                                 tau_p=cfg.tau_p)
        seeded_init_(self, seed, "model")

    # ------------------------------------------------------------------
    # forward paths

    def encode_query(self, crops: torch.Tensor) -> torch.Tensor:
        """Cropped query regions (B, h, w, 3) -> query embeddings (B, C_u)."""
        cls, _, _ = self.query_visual(crops)
        return self.heads.query_head(cls)

    def item_visual_unified(self, images: torch.Tensor):
        """Item scenes -> unified-space CLS and tokens plus the raw patch grid."""
        cls, tokens, (gh, gw) = self.item_visual(images)
        cls_u = self.heads.unified_v(cls)
        tokens_u = self.heads.unified_v(tokens)
        return {"cls_u": cls_u, "tokens_u": tokens_u, "raw_cls": cls,
                "raw_tokens": tokens, "grid": (gh, gw)}

    def text_unified(self, ids: torch.Tensor, mask: torch.Tensor | None = None):
        cls, tokens = self.text_encoder(ids, mask=mask)
        return {"cls_t": cls, "tokens_u": self.heads.unified_t(tokens)}

    def fuse_items(self, images: torch.Tensor, ids: torch.Tensor,
                   mask: torch.Tensor | None = None,
                   visual: dict | None = None) -> dict:
        """Text-guided fuse; pass a precomputed ``visual`` dict to re-fuse the
        same images with different titles without re-encoding pixels."""
        vis = visual if visual is not None else self.item_visual_unified(images)
        text = self.text_unified(ids, mask=mask)
        out = self.fusion(vis["tokens_u"], vis["cls_u"], text["tokens_u"], text_mask=mask)
        out.update({"visual": vis, "cls_t": text["cls_t"]})
        return out

    def item_embed_cls_only(self, images: torch.Tensor) -> torch.Tensor:
        """Plain dual-encoder item feature: unified visual CLS, no text path."""
        return self.item_visual_unified(images)["cls_u"]

    def encode_item_crop(self, crops: torch.Tensor) -> torch.Tensor:
        """CLS feature of the item visual encoder on cropped target regions."""
        cls, _, _ = self.item_visual(crops)
        return cls

    def anchor_embed(self, crop_cls: torch.Tensor) -> torch.Tensor:
        """Detached unit-norm target-region anchor through the frozen projection."""
        with torch.no_grad():
            raw = crop_cls.detach() @ self.heads.anchor_proj.T
            return raw / torch.linalg.vector_norm(raw, dim=-1, keepdim=True)

    # ------------------------------------------------------------------
    # serialization

    def named_tensors(self) -> "OrderedDict[str, np.ndarray]":
        out: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for name, param in self.named_parameters():
            out[name] = param.detach().cpu().numpy()
        return out

    def save(self, path) -> None:
        save_tensors(path, self.named_tensors())

    def load(self, path) -> None:
        tensors = load_tensors(path)
        params = dict(self.named_parameters())
        if set(tensors) != set(params):
            missing = set(params) - set(tensors)
            extra = set(tensors) - set(params)
            raise ModelError(f"checkpoint mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        with torch.no_grad():
            for name, arr in tensors.items():
                param = params[name]
                if tuple(param.shape) != arr.shape:
                    raise ModelError(f"shape mismatch for {name}: {tuple(param.shape)} vs {arr.shape}")
                param.copy_(torch.as_tensor(arr, dtype=param.dtype))
