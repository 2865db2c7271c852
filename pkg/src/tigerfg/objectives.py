"""The five training losses and their weighted combination.

All functions take batched torch tensors and return scalar tensors that
autograd can differentiate; the finite-difference harness in the trainer
verifies those gradients tensor by tensor.  Tensors documented as detached
(the target-region anchors and every teacher output) must arrive without a
grad history; the losses never re-attach them.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import torch

from .numerics import Box, info_nce, kl_divergence, roi_align, softplus


class ObjectiveError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    """Loss mixing weights and temperatures.

    Defaults follow the published recipe: contrastive and distillation
    temperatures at 0.07, item-side weights (0.5, 0.1, 1.0), hard-negative
    weight 0.1, dual-encoder weights (1.0, 1.0), and unit group weights.
    """

    lambda_v2t: float = 0.5
    lambda_i2v: float = 0.1
    lambda_srd: float = 1.0
    lambda_h: float = 0.1
    lambda_q2i: float = 1.0
    lambda_sdd: float = 1.0
    lambda_dual: float = 1.0
    lambda_item: float = 1.0
    tau_v2t: float = 0.07
    tau_t2v: float = 0.07
    tau_i2v: float = 0.07
    tau_q2i: float = 0.07
    tau_i2q: float = 0.07
    tau_stu: float = 0.07
    tau_tea: float = 0.07
    k_hard: int = 1
    roi_h: int = 4
    roi_w: int = 4

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name.startswith("lambda_") and value < 0:
                raise ObjectiveError(f"{f.name} must be >= 0, got {value}")
            if f.name.startswith("tau_") and value <= 0:
                raise ObjectiveError(f"{f.name} must be > 0, got {value}")
        if self.k_hard < 0:
            raise ObjectiveError("k_hard must be >= 0")
        if self.roi_h < 1 or self.roi_w < 1:
            raise ObjectiveError("roi dims must be >= 1")


@dataclass(frozen=True)
class LossToggles:
    """Which components contribute; the query-item contrastive term is always on."""

    slots: bool = True        # S: slot fusion path (off -> CLS-only item feature)
    i2v: bool = True          # B: target-anchored fused-region alignment
    srd: bool = True          # R: spatial-relational distillation
    hard_negatives: bool = True  # H: mismatched-text negatives in both losses
    sdd: bool = True          # D: similarity-distribution distillation
    v2t: bool = True          # T: region-text contrastive alignment

    LETTERS = "SBRHDT"

    @classmethod
    def from_string(cls, letters: str) -> "LossToggles":
        letters = letters.strip().upper()
        unknown = set(letters) - set(cls.LETTERS) - {","}
        if unknown:
            raise ObjectiveError(f"unknown toggle letters {sorted(unknown)}")
        return cls(
            slots="S" in letters,
            i2v="B" in letters,
            srd="R" in letters,
            hard_negatives="H" in letters,
            sdd="D" in letters,
            v2t="T" in letters,
        )

    def to_string(self) -> str:
        flags = [self.slots, self.i2v, self.srd, self.hard_negatives, self.sdd, self.v2t]
        return "".join(c for c, on in zip(self.LETTERS, flags) if on)


@dataclass
class LossBundle:
    """Total loss plus each contributing component (None when disabled)."""

    total: torch.Tensor
    components: dict = field(default_factory=dict)

    def value(self, name: str) -> float:
        v = self.components.get(name)
        return float(v.detach()) if v is not None else 0.0

    def is_finite(self) -> bool:
        return bool(torch.isfinite(self.total.detach())) and all(
            v is None or bool(torch.isfinite(v.detach())) for v in self.components.values())

    def log_line(self, step: int, lr: float) -> str:
        parts = [f"step={step}", f"total={float(self.total.detach()):.6f}"]
        for name in ("v2t", "i2v", "srd", "q2i", "sdd"):
            parts.append(f"{name}={self.value(name):.6f}")
        parts.append(f"lr={lr:.8f}")
        return " ".join(parts)


def loss_v2t(z_b: torch.Tensor, z_t: torch.Tensor, tau_v2t: float, tau_t2v: float) -> torch.Tensor:
    """Bidirectional InfoNCE between region and text alignment embeddings."""
    if len(z_b) == 0:
        raise ObjectiveError("empty batch")
    return 0.5 * (info_nce(z_b, z_t, tau_v2t) + info_nce(z_t, z_b, tau_t2v))


def loss_i2v(f_i: torch.Tensor, f_b: torch.Tensor, f_i_neg: torch.Tensor | None,
             tau_i2v: float, lambda_h: float):
    """Anchor alignment: InfoNCE positive plus softplus penalty on mismatched fusions.

    ``f_b`` must be detached; gradient flows only into f_i and f_i_neg.
    With no negatives the hard term is zero, not an error.
    Returns (total, pos, hard).
    """
    pos = info_nce(f_i, f_b, tau_i2v)
    if f_i_neg is None or f_i_neg.numel() == 0:
        hard = torch.zeros((), dtype=f_i.dtype)
    else:
        neg = f_i_neg / torch.linalg.vector_norm(f_i_neg, dim=-1, keepdim=True)
        anc = f_b / torch.linalg.vector_norm(f_b, dim=-1, keepdim=True)
        sims = torch.einsum("bkc,bc->bk", neg, anc)
        hard = softplus(sims).mean()
    return pos + lambda_h * hard, pos, hard


def relation_matrix(grid: torch.Tensor, box: Box, roi_h: int, roi_w: int) -> torch.Tensor:
    """Row-softmaxed pairwise-cosine matrix of the ROI-pooled box region."""
    pooled = roi_align(grid, box, roi_h, roi_w).reshape(roi_h * roi_w, -1)
    normed = pooled / torch.linalg.vector_norm(pooled, dim=-1, keepdim=True)
    sims = normed @ normed.T
    z = sims - sims.amax(dim=-1, keepdim=True)
    e = torch.exp(z)
    return e / e.sum(dim=-1, keepdim=True)


def loss_srd_from_relations(student_grids: torch.Tensor, teacher_relations: torch.Tensor,
                            boxes: list[Box], roi_h: int, roi_w: int) -> torch.Tensor:
    """SRD against precomputed (frozen) teacher relation matrices."""
    if len(student_grids) == 0:
        raise ObjectiveError("empty batch")
    if len(student_grids) != len(teacher_relations) or len(boxes) != len(student_grids):
        raise ObjectiveError("student/teacher/box batch sizes disagree")
    per_sample = []
    for s_grid, a_t, box in zip(student_grids, teacher_relations, boxes):
        a_s = relation_matrix(s_grid, box, roi_h, roi_w)
        per_sample.append(kl_divergence(a_t, a_s))
    return torch.stack(per_sample).mean()


def loss_srd(student_grids: torch.Tensor, teacher_grids: torch.Tensor,
             boxes: list[Box], roi_h: int, roi_w: int) -> torch.Tensor:
    """Match box-region patch-similarity structure to the frozen teacher.

    KL rows are averaged within each sample and then across the batch.
    """
    if len(student_grids) != len(teacher_grids):
        raise ObjectiveError("student/teacher/box batch sizes disagree")
    relations = torch.stack([
        relation_matrix(t_grid, box, roi_h, roi_w)
        for t_grid, box in zip(teacher_grids, boxes)]) if len(boxes) else teacher_grids
    return loss_srd_from_relations(student_grids, relations, boxes, roi_h, roi_w)


def loss_q2i(f_q: torch.Tensor, f_i: torch.Tensor, f_i_neg: torch.Tensor | None,
             tau_q2i: float, tau_i2q: float) -> torch.Tensor:
    """Query-item contrastive loss with the mismatch negatives in the forward denominator."""
    b = len(f_q)
    if b == 0:
        raise ObjectiveError("empty batch")
    qn = f_q / torch.linalg.vector_norm(f_q, dim=-1, keepdim=True)
    inn = f_i / torch.linalg.vector_norm(f_i, dim=-1, keepdim=True)
    logits = qn @ inn.T / tau_q2i
    if f_i_neg is not None and f_i_neg.numel() > 0:
        neg = f_i_neg / torch.linalg.vector_norm(f_i_neg, dim=-1, keepdim=True)
        neg_logits = torch.einsum("bc,bkc->bk", qn, neg) / tau_q2i
        all_logits = torch.cat([logits, neg_logits], dim=1)
    else:
        all_logits = logits
    forward = -(logits.diagonal() - torch.logsumexp(all_logits, dim=1)).mean()
    reverse = info_nce(f_i, f_q, tau_i2q)
    return 0.5 * (forward + reverse)


def loss_sdd(f_i: torch.Tensor, f_q: torch.Tensor, g_i: torch.Tensor, g_q: torch.Tensor,
             tau_stu: float, tau_tea: float) -> torch.Tensor:
    """Align in-batch query-to-item similarity distributions with the frozen teacher.

    With a single candidate both distributions are the point mass (1), so the
    loss is exactly zero.
    """
    b = len(f_q)
    if b == 0:
        raise ObjectiveError("empty batch")
    if b == 1:
        return (f_i.sum() + f_q.sum()) * 0.0

    def row_dist(items, queries, tau):
        it = items / torch.linalg.vector_norm(items, dim=-1, keepdim=True)
        qu = queries / torch.linalg.vector_norm(queries, dim=-1, keepdim=True)
        logits = qu @ it.T / tau
        z = logits - logits.amax(dim=-1, keepdim=True)
        e = torch.exp(z)
        return e / e.sum(dim=-1, keepdim=True)

    p_s = row_dist(f_i, f_q, tau_stu)
    p_t = row_dist(g_i, g_q, tau_tea)
    return kl_divergence(p_t, p_s)


def total_loss(weights: LossWeights, toggles: LossToggles, *, q2i, v2t=None, i2v=None,
               srd=None, sdd=None) -> LossBundle:
    """Weighted joint objective over lazily computed components.

    Component arguments are zero-argument callables; disabled toggles are
    never invoked, so they contribute exactly 0 and compute nothing.
    """
    components: dict[str, torch.Tensor | None] = {
        "v2t": None, "i2v": None, "i2v_pos": None, "i2v_hard": None,
        "srd": None, "q2i": None, "sdd": None,
    }
    q2i_val = q2i()
    components["q2i"] = q2i_val
    dual = weights.lambda_q2i * q2i_val
    if toggles.sdd:
        if sdd is None:
            raise ObjectiveError("sdd enabled but no component supplied")
        components["sdd"] = sdd()
        dual = dual + weights.lambda_sdd * components["sdd"]

    item = None
    if toggles.v2t:
        if v2t is None:
            raise ObjectiveError("v2t enabled but no component supplied")
        components["v2t"] = v2t()
        item = weights.lambda_v2t * components["v2t"]
    if toggles.i2v:
        if i2v is None:
            raise ObjectiveError("i2v enabled but no component supplied")
        total_i2v, pos, hard = i2v()
        components["i2v"], components["i2v_pos"], components["i2v_hard"] = total_i2v, pos, hard
        term = weights.lambda_i2v * total_i2v
        item = term if item is None else item + term
    if toggles.srd:
        if srd is None:
            raise ObjectiveError("srd enabled but no component supplied")
        components["srd"] = srd()
        term = weights.lambda_srd * components["srd"]
        item = term if item is None else item + term

    total = weights.lambda_dual * dual
    if item is not None:
        total = total + weights.lambda_item * item
    return LossBundle(total=total, components=components)
