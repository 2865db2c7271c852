"""Small trainable stand-ins for the production visual and text backbones.

Both encoders are two-block transformers with a learnable CLS token and
learned positional embeddings.  Every parameter is initialized from a
seeded uniform(-0.05, 0.05) draw keyed by its qualified name, so two
constructions with the same seed are bitwise identical and independent of
construction order.
"""

from __future__ import annotations

import copy
import math

import numpy as np
import torch
from torch import nn

from .numerics import Box, NumericsError, resize_grid_bilinear
from .seeding import rng_for


class EncoderError(ValueError):
    pass


def seeded_init_(module: nn.Module, seed: int, scope: str) -> None:
    """Seeded uniform init keyed by (seed, scope, parameter name).

    Linear weights and biases draw from U(-1/sqrt(fan_in), 1/sqrt(fan_in));
    everything else (CLS tokens, positional grids, embeddings, slots) from
    U(-0.05, 0.05).  A constant range on the matmul weights lets the bias
    constants drown the input-dependent signal after a few layers, which
    collapses every embedding onto one vector, so the fan-in scaling is
    load-bearing, not cosmetic.
    """
    bounds: dict[str, float] = {}
    norms: set[str] = set()
    for mod_name, mod in module.named_modules():
        prefix = mod_name + "." if mod_name else ""
        if isinstance(mod, nn.Linear):
            b = 1.0 / (mod.in_features ** 0.5)
            bounds[prefix + "weight"] = b
            bounds[prefix + "bias"] = b
        elif isinstance(mod, nn.LayerNorm):
            norms.add(prefix + "weight")
            norms.add(prefix + "bias")
        for suffix, b in getattr(mod, "init_bounds", {}).items():
            bounds[prefix + suffix] = b
    for name, param in module.named_parameters():
        with torch.no_grad():
            if name in norms:
                param.fill_(1.0 if name.endswith("weight") else 0.0)
                continue
            bound = bounds.get(name, 0.05)
            rng = rng_for(seed, "init", scope, name)
            values = rng.uniform(-bound, bound, size=tuple(param.shape))
            param.copy_(torch.as_tensor(values, dtype=param.dtype))


def masked_softmax(scores: torch.Tensor, key_mask: torch.Tensor | None) -> torch.Tensor:
    # key_mask True = attend, broadcastable to scores; rows need >= 1 valid key
    if key_mask is not None:
        scores = scores.masked_fill(~key_mask, float("-inf"))
    z = scores - scores.amax(dim=-1, keepdim=True)
    e = torch.exp(z)
    return e / e.sum(dim=-1, keepdim=True)


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with separate query and key/value inputs."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads != 0:
            raise EncoderError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = nn.Linear(dim, dim)
        self.wk = nn.Linear(dim, dim)
        self.wv = nn.Linear(dim, dim)
        self.wo = nn.Linear(dim, dim)

    def forward(self, q_in, kv_in, key_mask=None):
        b, nq, _ = q_in.shape
        nk = kv_in.shape[1]
        if nk == 0:
            raise EncoderError("attention over an empty context")

        def split(x, n):
            return x.view(b, n, self.heads, self.head_dim).transpose(1, 2)

        q = split(self.wq(q_in), nq)
        k = split(self.wk(kv_in), nk)
        v = split(self.wv(kv_in), nk)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        mask4 = key_mask.view(b, 1, 1, nk) if key_mask is not None else None
        attn = masked_softmax(scores, mask4)
        out = (attn @ v).transpose(1, 2).reshape(b, nq, self.dim)
        return self.wo(out)


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden_mult: int = 2):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden_mult * dim)
        self.fc2 = nn.Linear(hidden_mult * dim, dim)
        self.act = nn.GELU()

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class TransformerBlock(nn.Module):
    """Pre-norm residual block: x + attn(ln(x)), then x + mlp(ln(x))."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = FeedForward(dim)

    def forward(self, x, key_mask=None):
        h = self.ln1(x)
        x = x + self.attn(h, h, key_mask=key_mask)
        return x + self.mlp(self.ln2(x))


class VisualEncoder(nn.Module):
    """Patchify -> linear projection -> CLS + positions -> transformer blocks.

    The positional grid is learned at ``base_px`` resolution and bilinearly
    resampled when the encoder is applied to a smaller (or larger) input, so
    one encoder serves both full scenes and cropped regions.
    """

    def __init__(self, width: int, patch_px: int, base_px: int, blocks: int, heads: int):
        super().__init__()
        if base_px % patch_px != 0:
            raise EncoderError("base_px must be divisible by patch_px")
        self.width = width
        self.patch_px = patch_px
        self.base_grid = base_px // patch_px
        self.patch_proj = nn.Linear(patch_px * patch_px * 3, width)
        self.cls_token = nn.Parameter(torch.zeros(width))
        self.pos_cls = nn.Parameter(torch.zeros(width))
        self.pos_grid = nn.Parameter(torch.zeros(self.base_grid, self.base_grid, width))
        self.blocks = nn.ModuleList(TransformerBlock(width, heads) for _ in range(blocks))
        self.out_norm = nn.LayerNorm(width)

    def patchify(self, images: torch.Tensor) -> tuple[torch.Tensor, int, int]:
        if images.dim() != 4 or images.shape[-1] != 3:
            raise EncoderError(f"expected (B, H, W, 3) images, got {tuple(images.shape)}")
        b, h, w, _ = images.shape
        p = self.patch_px
        if h % p != 0 or w % p != 0:
            raise EncoderError(f"image dims {h}x{w} not divisible by patch size {p}")
        gh, gw = h // p, w // p
        x = images.view(b, gh, p, gw, p, 3).permute(0, 1, 3, 2, 4, 5)
        return x.reshape(b, gh * gw, p * p * 3), gh, gw

    def forward(self, images: torch.Tensor):
        """Return (cls (B, C), tokens (B, N, C), (gh, gw))."""
        patches, gh, gw = self.patchify(images)
        tokens = self.patch_proj(patches)
        if (gh, gw) == (self.base_grid, self.base_grid):
            pos = self.pos_grid
        else:
            pos = resize_grid_bilinear(self.pos_grid, gh, gw)
        tokens = tokens + pos.reshape(1, gh * gw, self.width)
        cls = (self.cls_token + self.pos_cls).view(1, 1, self.width).expand(len(images), 1, self.width)
        x = torch.cat([cls, tokens], dim=1)
        for block in self.blocks:
            x = block(x)
        x = self.out_norm(x)
        return x[:, 0], x[:, 1:], (gh, gw)

    def encode(self, image) -> dict:
        """Single-image inference API: {'cls': (C,), 'patches': (H_f, W_f, C)}."""
        img = torch.as_tensor(np.asarray(image))
        with torch.no_grad():
            cls, tokens, (gh, gw) = self.forward(
                img.unsqueeze(0).to(self.patch_proj.weight.dtype))
        return {"cls": cls[0], "patches": tokens[0].view(gh, gw, self.width)}


class TextEncoder(nn.Module):
    """Token embedding + CLS + positions -> transformer blocks."""

    def __init__(self, vocab_size: int, width: int, max_len: int, blocks: int, heads: int):
        super().__init__()
        self.vocab_size = vocab_size
        self.width = width
        self.max_len = max_len
        self.embed = nn.Parameter(torch.zeros(vocab_size, width))
        self.cls_token = nn.Parameter(torch.zeros(width))
        self.pos = nn.Parameter(torch.zeros(max_len + 1, width))
        self.blocks = nn.ModuleList(TransformerBlock(width, heads) for _ in range(blocks))
        self.out_norm = nn.LayerNorm(width)

    def forward(self, ids: torch.Tensor, mask: torch.Tensor | None = None):
        """ids (B, L) int64, mask (B, L) bool with True = real token.

        Returns (cls (B, C), tokens (B, L, C)).
        """
        if ids.dim() != 2:
            raise EncoderError(f"expected (B, L) token ids, got {tuple(ids.shape)}")
        b, length = ids.shape
        if length < 1 or length > self.max_len:
            raise EncoderError(f"sequence length {length} outside [1, {self.max_len}]")
        if ids.min() < 0 or ids.max() >= self.vocab_size:
            raise EncoderError("token id outside vocabulary")
        if mask is None:
            mask = torch.ones(b, length, dtype=torch.bool, device=ids.device)
        x = self.embed[ids] + self.pos[1:length + 1].unsqueeze(0)
        cls = (self.cls_token + self.pos[0]).view(1, 1, self.width).expand(b, 1, self.width)
        x = torch.cat([cls, x], dim=1)
        full_mask = torch.cat([torch.ones(b, 1, dtype=torch.bool, device=ids.device), mask], dim=1)
        for block in self.blocks:
            x = block(x, key_mask=full_mask)
        x = self.out_norm(x)
        return x[:, 0], x[:, 1:]

    def encode(self, token_ids) -> dict:
        """Single-sequence inference API: {'cls': (C,), 'tokens': (N_t, C)}."""
        ids = torch.as_tensor(np.asarray(token_ids, dtype=np.int64)).unsqueeze(0)
        with torch.no_grad():
            cls, tokens = self.forward(ids)
        return {"cls": cls[0], "tokens": tokens[0]}


class ProjectionHeads(nn.Module):
    """Projections into the unified (C_u) and alignment (C_a) spaces.

    ``anchor_proj`` plays the role of the detached target-region projection:
    it is frozen at initialization and no loss is allowed to update it.
    """

    def __init__(self, c_v: int, c_t: int, c_u: int, c_a: int):
        super().__init__()
        self.unified_v = nn.Linear(c_v, c_u)
        self.unified_t = nn.Linear(c_t, c_u)
        self.align_v = nn.Linear(c_v, c_a)
        self.align_t = nn.Linear(c_t, c_a)
        self.query_head = nn.Sequential(nn.Linear(c_v, c_u), nn.GELU(), nn.Linear(c_u, c_u))
        self.anchor_proj = nn.Parameter(torch.zeros(c_u, c_v), requires_grad=False)


def project_unified(features: torch.Tensor, layer: nn.Linear) -> torch.Tensor:
    """Affine map of (N, C_in) features into the unified space."""
    if features.shape[-1] != layer.in_features:
        raise EncoderError(
            f"feature dim {features.shape[-1]} does not match projection input {layer.in_features}")
    return layer(features)


def project_alignment(cls_vec: torch.Tensor, layer: nn.Linear) -> torch.Tensor:
    """Project a CLS vector into the alignment space and L2-normalize it."""
    out = layer(cls_vec)
    norm = torch.linalg.vector_norm(out, dim=-1, keepdim=True)
    if torch.any(norm == 0):
        raise EncoderError("alignment projection produced a zero vector")
    return out / norm


def crop_and_resize(image: np.ndarray, box: Box, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample of an (H, W, 3) image region to (out_h, out_w, 3).

    Uses the same half-pixel sampling convention as roi_align, so a full box
    at the native resolution reproduces the image.
    """
    image = np.asarray(image)
    h, w = image.shape[0], image.shape[1]
    if box.x1 > w + 1e-9 or box.y1 > h + 1e-9:
        raise NumericsError(f"box {box} outside image extent {h}x{w}")
    cell_h = box.height / out_h
    cell_w = box.width / out_w
    ys = np.clip(box.y0 + (np.arange(out_h) + 0.5) * cell_h - 0.5, 0.0, h - 1)
    xs = np.clip(box.x0 + (np.arange(out_w) + 0.5) * cell_w - 0.5, 0.0, w - 1)
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    img = image.astype(np.float64) if image.dtype != np.float64 else image
    top = img[np.ix_(y0, x0)] * (1 - wx) + img[np.ix_(y0, x1)] * wx
    bot = img[np.ix_(y1, x0)] * (1 - wx) + img[np.ix_(y1, x1)] * wx
    out = top * (1 - wy) + bot * wy
    return out.astype(image.dtype if image.dtype == np.float64 else np.float32)


def clone_frozen(module: nn.Module) -> nn.Module:
    """Deep-copy a module and freeze it; optimizers must never see its params."""
    frozen = copy.deepcopy(module)
    for p in frozen.parameters():
        p.requires_grad_(False)
    frozen.eval()
    frozen._tigerfg_frozen = True
    return frozen


def is_frozen(module: nn.Module) -> bool:
    return bool(getattr(module, "_tigerfg_frozen", False))
