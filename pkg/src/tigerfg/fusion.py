"""Text-guided item representation.

A bank of learnable slots first attends to the projected title tokens, then
to the projected visual tokens, and an MLP-weighted pooling collapses the
slots into the semantic feature f_m.  A complementary branch scores every
visual token against both f_m and the visual CLS, pools with a temperature
softmax, and a residual MLP merges the two branches into the item embedding.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .encoders import EncoderError, masked_softmax


class FusionError(ValueError):
    pass


class CrossAttentionStage(nn.Module):
    """One multi-head cross-attention layer with output projection.

    No residual path and no normalization inside the stage: the output is
    purely the attended values.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads != 0:
            raise FusionError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = nn.Linear(dim, dim)
        self.wk = nn.Linear(dim, dim)
        self.wv = nn.Linear(dim, dim)
        self.wo = nn.Linear(dim, dim)

    def forward(self, queries: torch.Tensor, context: torch.Tensor,
                context_mask: torch.Tensor | None = None) -> torch.Tensor:
        if queries.dim() != 3 or context.dim() != 3:
            raise FusionError("cross_attention expects (B, N, C) inputs")
        b, nq, _ = queries.shape
        nk = context.shape[1]
        if nk == 0:
            raise EncoderError("attention over an empty context")

        def split(x, n):
            return x.view(b, n, self.heads, self.head_dim).transpose(1, 2)

        q = split(self.wq(queries), nq)
        k = split(self.wk(context), nk)
        v = split(self.wv(context), nk)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        mask4 = context_mask.view(b, 1, 1, nk) if context_mask is not None else None
        attn = masked_softmax(scores, mask4)
        out = (attn @ v).transpose(1, 2).reshape(b, nq, self.dim)
        return self.wo(out)


def tokenwise_cosine(anchor: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
    """Cosine of one anchor (B, C) against every token (B, N, C) -> (B, N)."""
    an = torch.linalg.vector_norm(anchor, dim=-1, keepdim=True)
    tn = torch.linalg.vector_norm(tokens, dim=-1)
    if torch.any(an == 0) or torch.any(tn == 0):
        raise FusionError("cosine of a zero vector is undefined")
    return torch.einsum("bc,bnc->bn", anchor / an, tokens / tn.unsqueeze(-1))


def normalized_token_scores(anchor: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
    """Per-token cosine vector, rescaled to unit L2 norm over the tokens."""
    sims = tokenwise_cosine(anchor, tokens)
    norms = torch.linalg.vector_norm(sims, dim=-1, keepdim=True)
    if torch.any(norms == 0):
        raise FusionError("similarity vector has zero norm")
    return sims / norms


class ItemFusion(nn.Module):
    """Slot cross-attention, CLS-guided pooling, and the residual fuse."""

    def __init__(self, c_u: int, n_slots: int, heads: int,
                 lambda_m: float = 0.5, lambda_c: float = 0.5, tau_p: float = 0.07):
        super().__init__()
        if n_slots < 1:
            raise FusionError("need at least one slot")
        if lambda_m < 0 or lambda_c < 0 or abs(lambda_m + lambda_c - 1.0) > 1e-9:
            raise FusionError("mixing weights must be nonnegative and sum to 1")
        if tau_p <= 0:
            raise FusionError("pooling temperature must be positive")
        self.lambda_m = float(lambda_m)
        self.lambda_c = float(lambda_c)
        self.tau_p = float(tau_p)
        self.slots = nn.Parameter(torch.zeros(n_slots, c_u))
        # slots must start at the tokens' O(1) scale or the two attention
        # stages multiply their differences away and the slot bank collapses
        self.init_bounds = {"slots": 0.5}
        self.ca_text = CrossAttentionStage(c_u, heads)
        self.ca_visual = CrossAttentionStage(c_u, heads)
        self.slot_score = nn.Sequential(nn.Linear(c_u, c_u), nn.GELU(), nn.Linear(c_u, 1))
        self.residual_mlp = nn.Sequential(nn.Linear(c_u, c_u), nn.GELU(), nn.Linear(c_u, c_u))

    def text_guided_slots(self, text_tokens: torch.Tensor, visual_tokens: torch.Tensor,
                          text_mask: torch.Tensor | None = None):
        """Two-step slot attention and MLP-weighted slot pooling.

        Returns (slot_values (B, N_q, C), weights (B, N_q), f_m (B, C)).
        """
        b = text_tokens.shape[0]
        queries = self.slots.unsqueeze(0).expand(b, *self.slots.shape)
        conditioned = self.ca_text(queries, text_tokens, context_mask=text_mask)
        slot_values = self.ca_visual(conditioned, visual_tokens)
        logits = self.slot_score(slot_values).squeeze(-1)
        weights = masked_softmax(logits, None)
        f_m = torch.einsum("bn,bnc->bc", weights, slot_values)
        return slot_values, weights, f_m

    def anchor_scores(self, f_m: torch.Tensor, cls_u: torch.Tensor,
                      visual_tokens: torch.Tensor) -> torch.Tensor:
        """Blend the two unit-norm similarity vectors with lambda_m / lambda_c."""
        s_m = normalized_token_scores(f_m, visual_tokens)
        s_c = normalized_token_scores(cls_u, visual_tokens)
        return self.lambda_m * s_m + self.lambda_c * s_c

    def temperature_pool(self, visual_tokens: torch.Tensor, scores: torch.Tensor) -> torch.Tensor:
        weights = masked_softmax(scores / self.tau_p, None)
        return torch.einsum("bn,bnc->bc", weights, visual_tokens)

    def forward(self, visual_tokens: torch.Tensor, cls_u: torch.Tensor,
                text_tokens: torch.Tensor, text_mask: torch.Tensor | None = None) -> dict:
        """Full item-side fuse over already-projected (C_u) inputs.

        Returns the embedding plus every intermediate the losses and the
        heatmap export need.
        """
        slot_values, slot_weights, f_m = self.text_guided_slots(
            text_tokens, visual_tokens, text_mask=text_mask)
        scores = self.anchor_scores(f_m, cls_u, visual_tokens)
        f_a = self.temperature_pool(visual_tokens, scores)
        f_i = f_m + self.residual_mlp(f_a)
        return {
            "f_i": f_i,
            "f_m": f_m,
            "f_a": f_a,
            "scores": scores,
            "slot_values": slot_values,
            "slot_weights": slot_weights,
        }
