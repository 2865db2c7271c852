"""Batch assembly, the optimization loop, teachers, and gradient verification.

Batches enforce the hard-example rules: SPU-distinct records, a 1:1
raw/mosaic mix (whole mosaic cliques travel together so co-composed scenes
compete in-batch), and per-record mismatched titles drawn from other primary
categories.

The forward pass separates live computation from a ``DetachedCache`` holding
every stop-gradient quantity (target-region anchors, teacher features).  The
finite-difference harness reuses one cache across all perturbed evaluations,
which makes the numeric gradient agree with the stop-gradient semantics the
analytic backward implements.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from torch import nn

from .encoders import clone_frozen, crop_and_resize, is_frozen, project_alignment
from .model import ModelConfig, TigerFG
from .numerics import Box
from .objectives import LossBundle, LossToggles, LossWeights, loss_i2v, loss_q2i, \
    loss_sdd, loss_v2t, total_loss
from .scenegen.records import SampleRecord
from .seeding import derive_seed, rng_for


class TrainerError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    """Raised when a step produces a non-finite loss; message dumps components."""


@dataclass(frozen=True)
class TrainConfig:
    batch: int = 32
    steps: int = 2000
    lr: float = 1e-3
    weight_decay: float = 0.01
    warmup_frac: float = 0.05
    seed: int = 7
    weights: LossWeights = field(default_factory=LossWeights)
    toggles: LossToggles = field(default_factory=LossToggles)
    data_mix: str = "mix"
    precision: int = 32
    log_every: int = 50
    ckpt_every: int = 500
    teacher_steps: int = 2000
    teacher_lr: float = 2e-3

    def __post_init__(self):
        if self.batch < 2:
            raise TrainerError("batch size must be >= 2 for in-batch negatives")
        if self.steps < 1:
            raise TrainerError("steps must be >= 1")
        if self.data_mix not in ("raw", "mix"):
            raise TrainerError(f"data mix must be raw|mix, got {self.data_mix!r}")
        if self.precision not in (32, 64):
            raise TrainerError("precision must be 32 or 64")


def torch_dtype(precision: int) -> torch.dtype:
    return torch.float32 if precision == 32 else torch.float64


# ---------------------------------------------------------------------------
# training data and batch assembly


class TrainData:
    """Training split indexed for batch assembly."""

    def __init__(self, records: list[SampleRecord]):
        self.raw = [r for r in records if not r.is_mosaic]
        self.mosaic = [r for r in records if r.is_mosaic]
        if not self.raw:
            raise TrainerError("training split has no raw records")
        self.groups: dict[int, list[SampleRecord]] = {}
        synthetic_gid = -1
        for rec in self.mosaic:
            gid = rec.mosaic_group
            if gid is None:
                gid, synthetic_gid = synthetic_gid, synthetic_gid - 1
            self.groups.setdefault(gid, []).append(rec)
        self.titles_by_other_primary: dict[int, list[tuple[np.ndarray, int]]] = {}
        primaries = sorted({r.primary for r in self.raw})
        for primary in primaries:
            pool = [(r.title, r.primary) for r in self.raw if r.primary != primary]
            if not pool:
                raise TrainerError(
                    f"no cross-category titles available for primary {primary}")
            self.titles_by_other_primary[primary] = pool


@dataclass
class TrainBatch:
    records: list[SampleRecord]
    neg_titles: list[list[np.ndarray]]     # per record, K mismatched titles
    neg_primaries: list[list[int]]
    mix_mode: str

    def validate(self) -> None:
        spus = [r.spu for r in self.records]
        if len(set(spus)) != len(spus):
            raise TrainerError("batch violates SPU distinctness")
        for rec, prims in zip(self.records, self.neg_primaries):
            if any(p == rec.primary for p in prims):
                raise TrainerError("mismatched title shares the host's primary category")
        if self.mix_mode == "mix":
            n_mosaic = sum(r.is_mosaic for r in self.records)
            n_raw = len(self.records) - n_mosaic
            if abs(n_raw - n_mosaic) > 1:
                raise TrainerError(f"raw/mosaic mix {n_raw}:{n_mosaic} outside the 1:1 +-1 band")


def _pack_groups(group_ids: list[int], groups: dict[int, list], quota: int,
                 rng: np.random.Generator, restarts: int = 32) -> list[int]:
    """Pick whole mosaic groups summing to exactly ``quota`` records."""
    if sum(len(groups[g]) for g in group_ids) < quota:
        raise TrainerError(
            f"mosaic co-grouping unsatisfiable: fewer than {quota} mosaic records exist")
    for _ in range(restarts):
        order = [group_ids[i] for i in rng.permutation(len(group_ids))]
        chosen, total = [], 0
        for gid in order:
            size = len(groups[gid])
            if total + size <= quota:
                chosen.append(gid)
                total += size
            if total == quota:
                return chosen
        deficit = quota - total
        for gid in order:
            if gid not in chosen and len(groups[gid]) == deficit:
                return chosen + [gid]
        chosen_set = set(chosen)
        for out_gid in chosen:
            for in_gid in order:
                if in_gid in chosen_set:
                    continue
                if len(groups[in_gid]) - len(groups[out_gid]) == deficit:
                    return [g for g in chosen if g != out_gid] + [in_gid]
    raise TrainerError(
        f"cannot fill the mosaic half of the batch with whole groups summing to {quota} "
        "(mosaic groups must co-travel)")


def assemble_batch(data: TrainData, cfg: TrainConfig, step: int) -> TrainBatch:
    """Deterministic batch for (seed, step) satisfying every batch constraint."""
    rng = rng_for(cfg.seed, "batch", step)
    records: list[SampleRecord] = []
    if cfg.data_mix == "mix":
        if not data.groups:
            raise TrainerError("mix mode requested but the split has no mosaic records")
        quota = cfg.batch // 2
        for gid in _pack_groups(sorted(data.groups), data.groups, quota, rng):
            records.extend(data.groups[gid])
    used_spus = {r.spu for r in records}
    raw_quota = cfg.batch - len(records)
    candidates = [r for r in data.raw if r.spu not in used_spus]
    if len(candidates) < raw_quota:
        raise TrainerError(
            f"cannot draw {raw_quota} SPU-distinct raw records from {len(candidates)}")
    picks = rng.permutation(len(candidates))[:raw_quota]
    records.extend(candidates[int(i)] for i in picks)

    neg_titles, neg_primaries = [], []
    for rec in records:
        pool = data.titles_by_other_primary.get(rec.primary)
        if pool is None:
            pool = [(r.title, r.primary) for r in data.raw if r.primary != rec.primary]
            if not pool:
                raise TrainerError(
                    f"no cross-category titles available for primary {rec.primary}")
        idx = rng.integers(len(pool), size=cfg.weights.k_hard)
        neg_titles.append([pool[int(i)][0] for i in idx])
        neg_primaries.append([pool[int(i)][1] for i in idx])
    batch = TrainBatch(records=records, neg_titles=neg_titles,
                       neg_primaries=neg_primaries, mix_mode=cfg.data_mix)
    batch.validate()
    return batch


# ---------------------------------------------------------------------------
# batch tensors and the forward pass


@dataclass
class BatchTensors:
    query_crops: torch.Tensor
    item_images: torch.Tensor
    item_crops: torch.Tensor
    title_ids: torch.Tensor
    title_mask: torch.Tensor
    neg_ids: torch.Tensor | None
    neg_mask: torch.Tensor | None
    grid_boxes: list[Box]


def _pad_titles(titles: list[np.ndarray], max_len: int):
    length = max(1, max(len(t) for t in titles))
    if length > max_len:
        raise TrainerError(f"title length {length} exceeds encoder maximum {max_len}")
    ids = np.zeros((len(titles), length), dtype=np.int64)
    mask = np.zeros((len(titles), length), dtype=bool)
    for i, t in enumerate(titles):
        ids[i, :len(t)] = t
        mask[i, :len(t)] = True
    return torch.from_numpy(ids), torch.from_numpy(mask)


class FrozenFeatureMemo:
    """Per-record cache of everything immutable within a run.

    Resized crops and frozen-teacher outputs depend only on the record (and
    the frozen teachers), so a multi-epoch run computes each exactly once.
    Keys are record object identities held alive by the training data.
    """

    def __init__(self, mcfg: ModelConfig, teachers: "Teachers | None",
                 weights: LossWeights, dtype: torch.dtype):
        self.mcfg = mcfg
        self.teachers = teachers
        self.weights = weights
        self.dtype = dtype
        self._crop_q: dict[int, np.ndarray] = {}
        self._crop_i: dict[int, np.ndarray] = {}
        self._g_q: dict[int, torch.Tensor] = {}
        self._g_i: dict[int, torch.Tensor] = {}
        self._t_rel: dict[int, torch.Tensor] = {}

    def crops(self, records: list[SampleRecord]):
        cp = self.mcfg.crop_px
        for rec in records:
            key = id(rec)
            if key not in self._crop_q:
                self._crop_q[key] = crop_and_resize(rec.query_image, rec.query_box, cp, cp)
                self._crop_i[key] = crop_and_resize(rec.item_image, rec.item_box, cp, cp)
        q = np.stack([self._crop_q[id(r)] for r in records])
        i = np.stack([self._crop_i[id(r)] for r in records])
        return q, i

    def teacher_embeds(self, records: list[SampleRecord], bt: "BatchTensors"):
        missing = [j for j, r in enumerate(records) if id(r) not in self._g_q]
        if missing:
            with torch.no_grad():
                gq = self.teachers.sdd.embed(bt.query_crops[missing])
                gi = self.teachers.sdd.embed(bt.item_crops[missing])
            for row, j in enumerate(missing):
                self._g_q[id(records[j])] = gq[row]
                self._g_i[id(records[j])] = gi[row]
        g_q = torch.stack([self._g_q[id(r)] for r in records])
        g_i = torch.stack([self._g_i[id(r)] for r in records])
        return g_q, g_i

    def teacher_relations(self, records: list[SampleRecord], bt: "BatchTensors"):
        from .objectives import relation_matrix
        missing = [j for j, r in enumerate(records) if id(r) not in self._t_rel]
        if missing:
            with torch.no_grad():
                _, tokens, (gh, gw) = self.teachers.srd(bt.item_images[missing])
                grids = tokens.reshape(len(missing), gh, gw, -1)
            for row, j in enumerate(missing):
                rel = relation_matrix(grids[row], bt.grid_boxes[missing[row]],
                                      self.weights.roi_h, self.weights.roi_w)
                self._t_rel[id(records[j])] = rel
        return torch.stack([self._t_rel[id(r)] for r in records])


def batch_tensors(batch: TrainBatch, mcfg: ModelConfig, dtype: torch.dtype,
                  memo: FrozenFeatureMemo | None = None) -> BatchTensors:
    cp = mcfg.crop_px
    if memo is not None:
        q_crops, i_crops = memo.crops(batch.records)
    else:
        q_crops = np.stack([
            crop_and_resize(r.query_image, r.query_box, cp, cp) for r in batch.records])
        i_crops = np.stack([
            crop_and_resize(r.item_image, r.item_box, cp, cp) for r in batch.records])
    i_imgs = np.stack([r.item_image for r in batch.records])
    title_ids, title_mask = _pad_titles([r.title for r in batch.records], mcfg.max_title)
    if batch.neg_titles and batch.neg_titles[0]:
        flat = [t for per_record in batch.neg_titles for t in per_record]
        neg_ids, neg_mask = _pad_titles(flat, mcfg.max_title)
    else:
        neg_ids, neg_mask = None, None
    grid_boxes = [r.item_box.scaled(1.0 / mcfg.patch_px) for r in batch.records]
    to = lambda arr: torch.as_tensor(arr, dtype=dtype)
    return BatchTensors(
        query_crops=to(q_crops), item_images=to(i_imgs), item_crops=to(i_crops),
        title_ids=title_ids, title_mask=title_mask,
        neg_ids=neg_ids, neg_mask=neg_mask, grid_boxes=grid_boxes)


@dataclass
class Teachers:
    srd: nn.Module
    sdd: nn.Module
    sanity: dict = field(default_factory=dict)


@dataclass
class DetachedCache:
    """Every stop-gradient quantity of one batch, fixed across FD evaluations."""

    f_b: torch.Tensor | None = None
    g_q: torch.Tensor | None = None
    g_i: torch.Tensor | None = None
    teacher_relations: torch.Tensor | None = None
    grid_shape: tuple[int, int] | None = None


def build_cache(model: TigerFG, teachers: Teachers | None, bt: BatchTensors,
                toggles: LossToggles, weights: LossWeights,
                memo: FrozenFeatureMemo | None = None,
                records: list[SampleRecord] | None = None) -> DetachedCache:
    from .objectives import relation_matrix
    cache = DetachedCache()
    with torch.no_grad():
        if toggles.i2v:
            crop_cls = model.encode_item_crop(bt.item_crops)
            cache.f_b = model.anchor_embed(crop_cls)
        if toggles.srd:
            if teachers is None:
                raise TrainerError("srd enabled without a teacher")
            if memo is not None and records is not None:
                cache.teacher_relations = memo.teacher_relations(records, bt)
                gh = gw = model.item_visual.base_grid
            else:
                _, tokens, (gh, gw) = teachers.srd(bt.item_images)
                grids = tokens.reshape(len(tokens), gh, gw, -1)
                cache.teacher_relations = torch.stack([
                    relation_matrix(g, box, weights.roi_h, weights.roi_w)
                    for g, box in zip(grids, bt.grid_boxes)])
            cache.grid_shape = (gh, gw)
        if toggles.sdd:
            if teachers is None:
                raise TrainerError("sdd enabled without a teacher")
            if memo is not None and records is not None:
                cache.g_q, cache.g_i = memo.teacher_embeds(records, bt)
            else:
                cache.g_q = teachers.sdd.embed(bt.query_crops)
                cache.g_i = teachers.sdd.embed(bt.item_crops)
    return cache


def compute_batch_loss(model: TigerFG, teachers: Teachers | None, bt: BatchTensors,
                       weights: LossWeights, toggles: LossToggles,
                       cache: DetachedCache | None = None,
                       memo: FrozenFeatureMemo | None = None,
                       records: list[SampleRecord] | None = None):
    """Forward pass and weighted loss for one batch.

    Hard negatives re-fuse the already-encoded item images with mismatched
    titles, so they require the slot path; with the slot toggle off the
    hard-negative toggle is inert.
    """
    if cache is None:
        cache = build_cache(model, teachers, bt, toggles, weights,
                            memo=memo, records=records)
    b = len(bt.query_crops)
    f_q = model.encode_query(bt.query_crops)

    use_hard = toggles.hard_negatives and toggles.slots and bt.neg_ids is not None
    if toggles.slots:
        fused = model.fuse_items(bt.item_images, bt.title_ids, bt.title_mask)
        f_i = fused["f_i"]
        cls_t = fused["cls_t"]
        visual = fused["visual"]
    else:
        visual = model.item_visual_unified(bt.item_images)
        f_i = visual["cls_u"]
        cls_t = None

    f_i_neg = None
    if use_hard:
        k = bt.neg_ids.shape[0] // b
        rep_visual = {
            "tokens_u": visual["tokens_u"].repeat_interleave(k, dim=0),
            "cls_u": visual["cls_u"].repeat_interleave(k, dim=0),
        }
        neg_fused = model.fuse_items(None, bt.neg_ids, bt.neg_mask, visual=rep_visual)
        raw = neg_fused["f_i"]
        f_i_neg = (raw / torch.linalg.vector_norm(raw, dim=-1, keepdim=True)).view(b, k, -1)

    thunks: dict = {}
    if toggles.v2t:
        crop_cls = model.encode_item_crop(bt.item_crops)
        if cls_t is None:
            cls_t = model.text_unified(bt.title_ids, bt.title_mask)["cls_t"]
        z_b = project_alignment(crop_cls, model.heads.align_v)
        z_t = project_alignment(cls_t, model.heads.align_t)
        thunks["v2t"] = lambda: loss_v2t(z_b, z_t, weights.tau_v2t, weights.tau_t2v)
    if toggles.i2v:
        f_b = cache.f_b
        neg_for_i2v = f_i_neg if use_hard else None
        thunks["i2v"] = lambda: loss_i2v(f_i, f_b, neg_for_i2v,
                                         weights.tau_i2v, weights.lambda_h)
    if toggles.srd:
        from .objectives import loss_srd_from_relations
        student = visual["raw_tokens"].reshape(b, *cache.grid_shape, -1)
        thunks["srd"] = lambda: loss_srd_from_relations(
            student, cache.teacher_relations, bt.grid_boxes, weights.roi_h, weights.roi_w)
    if toggles.sdd:
        thunks["sdd"] = lambda: loss_sdd(f_i, f_q, cache.g_i, cache.g_q,
                                         weights.tau_stu, weights.tau_tea)

    neg_for_q2i = f_i_neg if use_hard else None
    bundle = total_loss(
        weights, toggles,
        q2i=lambda: loss_q2i(f_q, f_i, neg_for_q2i, weights.tau_q2i, weights.tau_i2q),
        **thunks)
    return bundle, cache


# ---------------------------------------------------------------------------
# teachers


class CropTeacher(nn.Module):
    """Crop-to-crop retrieval encoder used as the distribution teacher.

    Built at the scene-resolution positional grid so its backbone weights can
    seed the item and query encoders directly.
    """

    def __init__(self, mcfg: ModelConfig, seed: int):
        super().__init__()
        from .encoders import VisualEncoder, seeded_init_
        self.encoder = VisualEncoder(mcfg.c_v, mcfg.patch_px, mcfg.scene_px,
                                     mcfg.blocks, mcfg.heads)
        self.head = nn.Linear(mcfg.c_v, mcfg.c_u)
        seeded_init_(self, seed, "crop-teacher")

    def embed(self, crops: torch.Tensor) -> torch.Tensor:
        cls, _, _ = self.encoder(crops)
        out = self.head(cls)
        return out / torch.linalg.vector_norm(out, dim=-1, keepdim=True)


def transfer_encoder_weights(src, dst) -> None:
    """Copy encoder parameters, resizing the positional grid when bases differ."""
    from .numerics import resize_grid_bilinear
    src_params = dict(src.named_parameters())
    with torch.no_grad():
        for name, param in dst.named_parameters():
            value = src_params[name]
            if name == "pos_grid" and value.shape != param.shape:
                value = resize_grid_bilinear(value, param.shape[0], param.shape[1])
            param.copy_(value.to(param.dtype))


def warm_start_from(teachers: "Teachers", model: TigerFG) -> None:
    """Initialize both student visual branches from the pretrained crop backbone."""
    transfer_encoder_weights(teachers.sdd.encoder, model.item_visual)
    transfer_encoder_weights(teachers.sdd.encoder, model.query_visual)


def _teacher_probe_recall(teacher: CropTeacher, records: list[SampleRecord],
                          crop_px: int, dtype: torch.dtype) -> float:
    probe = records[:256]
    with torch.no_grad():
        q = teacher.embed(torch.as_tensor(np.stack([
            crop_and_resize(r.query_image, r.query_box, crop_px, crop_px)
            for r in probe]), dtype=dtype))
        g = teacher.embed(torch.as_tensor(np.stack([
            crop_and_resize(r.item_image, r.item_box, crop_px, crop_px)
            for r in probe]), dtype=dtype))
        hits = (q @ g.T).argmax(dim=1) == torch.arange(len(probe))
    return float(hits.double().mean())


def make_teachers(model: TigerFG, data: TrainData | None, cfg: TrainConfig,
                  mcfg: ModelConfig, warm_start: bool = True) -> Teachers:
    """Crop-contrastive pretraining, teachers, and the student initialization.

    The crop encoder is briefly pretrained on query/item crop pairs and
    frozen as the similarity-distribution teacher. With ``warm_start`` the
    same pretrained backbone also initializes both student visual encoders
    (the upstream recipe initializes both branches from one pretrained
    model), and the structure teacher is a frozen copy of the item encoder
    in exactly that pre-dual-training state.
    """
    dtype = torch_dtype(cfg.precision)
    sdd_raw = CropTeacher(mcfg, derive_seed(cfg.seed, "sdd-teacher")).to(dtype)
    sanity: dict = {}
    if data is not None and cfg.teacher_steps > 0:
        from .numerics import info_nce
        opt = torch.optim.AdamW(sdd_raw.parameters(), lr=cfg.teacher_lr, weight_decay=0.01)
        pool = data.raw
        cp = mcfg.crop_px
        q_all = torch.as_tensor(np.stack([
            crop_and_resize(r.query_image, r.query_box, cp, cp) for r in pool]), dtype=dtype)
        p_all = torch.as_tensor(np.stack([
            crop_and_resize(r.item_image, r.item_box, cp, cp) for r in pool]), dtype=dtype)
        for step in range(cfg.teacher_steps):
            rng = rng_for(cfg.seed, "teacher-batch", step)
            take = min(cfg.batch, len(pool))
            idx = torch.as_tensor(rng.permutation(len(pool))[:take].copy())
            zq, zp = sdd_raw.embed(q_all[idx]), sdd_raw.embed(p_all[idx])
            loss = 0.5 * (info_nce(zq, zp, 0.07) + info_nce(zp, zq, 0.07))
            opt.zero_grad()
            loss.backward()
            opt.step()
        sanity["probe_recall_at_1"] = _teacher_probe_recall(sdd_raw, pool, mcfg.crop_px, dtype)
        sanity["probe_chance"] = 1.0 / min(256, len(pool))
    pretrained = data is not None and cfg.teacher_steps > 0
    if pretrained:
        # the structure teacher is the pretrained backbone itself, so it is
        # identical whether a run starts fresh or resumes from a checkpoint
        srd = clone_frozen(sdd_raw.encoder)
        if warm_start:
            transfer_encoder_weights(sdd_raw.encoder, model.item_visual)
            transfer_encoder_weights(sdd_raw.encoder, model.query_visual)
    else:
        srd = clone_frozen(model.item_visual)
    sdd = clone_frozen(sdd_raw)
    return Teachers(srd=srd, sdd=sdd, sanity=sanity)


# ---------------------------------------------------------------------------
# optimization loop


def lr_factor(step: int, total_steps: int, warmup_frac: float) -> float:
    """Linear warmup then cosine decay to zero."""
    warmup = max(1, int(round(total_steps * warmup_frac)))
    if step < warmup:
        return (step + 1) / warmup
    if total_steps <= warmup:
        return 1.0
    progress = (step - warmup) / (total_steps - warmup)
    return 0.5 * (1.0 + math.cos(math.pi * progress))


def make_optimizer(module: nn.Module, cfg: TrainConfig) -> torch.optim.AdamW:
    """Optimizer over trainable parameters; refuses frozen clones outright."""
    if any(is_frozen(m) for m in module.modules()):
        raise TrainerError("refusing to build an optimizer over a frozen module")
    params = [p for p in module.parameters() if p.requires_grad]
    if not params:
        raise TrainerError("module has no trainable parameters")
    return torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)


@dataclass
class TrainResult:
    log_lines: list[str]
    final_step: int
    last_bundle: LossBundle | None


def train(model: TigerFG, teachers: Teachers, data: TrainData, cfg: TrainConfig,
          start_step: int = 0, optimizer: torch.optim.AdamW | None = None,
          on_step=None) -> TrainResult:
    """Run the optimization loop from ``start_step`` to ``cfg.steps``.

    Deterministic for a fixed (seed, thread count 1); a non-finite loss
    aborts immediately with the component values in the exception message.
    """
    torch.set_num_threads(1)
    dtype = torch_dtype(cfg.precision)
    opt = optimizer if optimizer is not None else make_optimizer(model, cfg)
    memo = FrozenFeatureMemo(model.cfg, teachers, cfg.weights, dtype)
    logs: list[str] = []
    bundle = None
    for step in range(start_step, cfg.steps):
        lr_now = cfg.lr * lr_factor(step, cfg.steps, cfg.warmup_frac)
        for group in opt.param_groups:
            group["lr"] = lr_now
        batch = assemble_batch(data, cfg, step)
        bt = batch_tensors(batch, model.cfg, dtype, memo=memo)
        bundle, _ = compute_batch_loss(model, teachers, bt, cfg.weights, cfg.toggles,
                                       memo=memo, records=batch.records)
        if not bundle.is_finite():
            raise TrainingDiverged(
                "non-finite loss at " + bundle.log_line(step, lr_now))
        opt.zero_grad(set_to_none=True)
        bundle.total.backward()
        opt.step()
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            logs.append(bundle.log_line(step, lr_now))
        if on_step is not None:
            on_step(step, model, opt, bundle)
    return TrainResult(log_lines=logs, final_step=cfg.steps, last_bundle=bundle)


# ---------------------------------------------------------------------------
# gradient verification harness


@dataclass
class GradCheckEntry:
    name: str
    kind: str              # trainable | frozen
    max_rel: float
    coords: int


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    threshold: float
    runtime_s: float

    @property
    def max_rel(self) -> float:
        checked = [e.max_rel for e in self.entries if e.kind == "trainable"]
        return max(checked) if checked else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel <= self.threshold

    def lines(self) -> list[str]:
        out = []
        for e in self.entries:
            out.append(f"{e.name:48s} {e.kind:9s} coords={e.coords:3d} max_rel={e.max_rel:.3e}")
        out.append(f"overall max_rel={self.max_rel:.3e} threshold={self.threshold:.1e} "
                   f"{'PASS' if self.passed else 'FAIL'} ({self.runtime_s:.1f}s)")
        return out


def tiny_model_config() -> ModelConfig:
    return ModelConfig(c_v=16, c_t=16, c_u=8, c_a=8, blocks=1, heads=2, patch_px=8,
                       scene_px=32, crop_px=16, n_slots=2, vocab_size=32, max_title=6)


def _tiny_batch(mcfg: ModelConfig, b: int, k: int, seed: int) -> BatchTensors:
    rng = rng_for(seed, "gradcheck-batch")
    sp, cp = mcfg.scene_px, mcfg.crop_px
    items = rng.uniform(0.0, 1.0, size=(b, sp, sp, 3))
    queries = rng.uniform(0.0, 1.0, size=(b, cp, cp, 3))
    crops = rng.uniform(0.0, 1.0, size=(b, cp, cp, 3))
    titles = torch.as_tensor(rng.integers(1, mcfg.vocab_size, size=(b, 5)))
    negs = torch.as_tensor(rng.integers(1, mcfg.vocab_size, size=(b * k, 5)))
    boxes = []
    g = sp // mcfg.patch_px
    for _ in range(b):
        x0 = float(rng.integers(0, g - 1))
        y0 = float(rng.integers(0, g - 1))
        boxes.append(Box(x0, y0, x0 + float(rng.integers(1, g - int(x0) + 1)),
                         y0 + float(rng.integers(1, g - int(y0) + 1))))
    as64 = lambda a: torch.as_tensor(a, dtype=torch.float64)
    ones = torch.ones(b, 5, dtype=torch.bool)
    return BatchTensors(
        query_crops=as64(queries), item_images=as64(items), item_crops=as64(crops),
        title_ids=titles, title_mask=ones, neg_ids=negs,
        neg_mask=torch.ones(b * k, 5, dtype=torch.bool), grid_boxes=boxes)


def grad_check(weights: LossWeights | None = None, toggles: LossToggles | None = None,
               threshold: float = 1e-3, coords_per_tensor: int = 8, eps: float = 1e-4,
               seed: int = 11, inject_fault: bool = False) -> GradCheckReport:
    """Compare autograd against central differences on a tiny 64-bit model.

    Every stop-gradient input is computed once and pinned, so the numeric
    gradient measures exactly the function the backward pass differentiates.
    The per-tensor error is max_i |a_i - fd_i| normalized by the largest
    gradient magnitude seen in that tensor.
    """
    t0 = time.time()
    weights = weights or LossWeights(roi_h=2, roi_w=2)
    toggles = toggles or LossToggles()
    mcfg = tiny_model_config()
    model = TigerFG(mcfg, seed).double()
    from .encoders import VisualEncoder, seeded_init_
    srd_src = VisualEncoder(mcfg.c_v, mcfg.patch_px, mcfg.scene_px, mcfg.blocks, mcfg.heads)
    seeded_init_(srd_src, seed + 1, "gradcheck-srd")
    teachers = Teachers(srd=clone_frozen(srd_src.double()),
                        sdd=clone_frozen(CropTeacher(mcfg, seed + 2).double()))
    bt = _tiny_batch(mcfg, b=4, k=1, seed=seed)

    bundle, cache = compute_batch_loss(model, teachers, bt, weights, toggles, cache=None)
    bundle.total.backward()

    def loss_at_current() -> float:
        with torch.no_grad():
            b2, _ = compute_batch_loss(model, teachers, bt, weights, toggles, cache=cache)
            return float(b2.total)

    rng = rng_for(seed, "gradcheck-coords")
    entries: list[GradCheckEntry] = []
    faulted = False
    all_params = list(model.named_parameters())
    for name, param in all_params:
        if not param.requires_grad:
            grad = param.grad
            if grad is not None and float(grad.abs().max()) != 0.0:
                entries.append(GradCheckEntry(name, "frozen", float("inf"), 0))
            else:
                entries.append(GradCheckEntry(name, "frozen", 0.0, 0))
            continue
        analytic = param.grad.detach().clone() if param.grad is not None \
            else torch.zeros_like(param)
        if inject_fault and not faulted and analytic.abs().max() > 0:
            analytic = -analytic
            faulted = True
        flat_a = analytic.reshape(-1)
        n = flat_a.numel()
        coords = {int(flat_a.abs().argmax())}
        while len(coords) < min(coords_per_tensor, n):
            coords.add(int(rng.integers(n)))
        flat_p = param.data.reshape(-1)
        max_abs_err = 0.0
        scale = float(flat_a.abs().max())
        for i in sorted(coords):
            orig = float(flat_p[i])
            flat_p[i] = orig + eps
            f_plus = loss_at_current()
            flat_p[i] = orig - eps
            f_minus = loss_at_current()
            flat_p[i] = orig
            fd = (f_plus - f_minus) / (2 * eps)
            scale = max(scale, abs(fd))
            max_abs_err = max(max_abs_err, abs(float(flat_a[i]) - fd))
        # floor keeps tensors whose true gradient sits below the central
        # difference's own noise (roundoff/2eps) from reporting pure noise
        rel = max_abs_err / max(scale, 1e-6)
        entries.append(GradCheckEntry(name, "trainable", rel, len(coords)))
    for name, param in list(teachers.srd.named_parameters()) + \
            list(teachers.sdd.named_parameters()):
        ok = param.grad is None or float(param.grad.abs().max()) == 0.0
        entries.append(GradCheckEntry(f"teacher.{name}", "frozen",
                                      0.0 if ok else float("inf"), 0))
    return GradCheckReport(entries=entries, threshold=threshold, runtime_s=time.time() - t0)


# ---------------------------------------------------------------------------
# ablation ladder

LADDER = (
    ("backbone", "", "raw"),
    ("+S", "S", "raw"),
    ("+B", "SB", "raw"),
    ("+R", "SBR", "raw"),
    ("+H", "SBRH", "raw"),
    ("+mosaic", "SBRH", "mix"),
    ("+D", "SBRHD", "mix"),
    ("+T", "SBRHDT", "mix"),
)


def run_ablation_ladder(train_records: list[SampleRecord],
                        eval_splits: dict[str, list[SampleRecord]],
                        mcfg: ModelConfig, base_cfg: TrainConfig,
                        seeds: tuple[int, ...] = (0, 1, 2),
                        ks: tuple[int, ...] = (1, 4, 10)) -> list[dict]:
    """Train and evaluate each cumulative ladder rung with shared seeds.

    Within a seed every rung shares the same pretrained initialization and
    the same frozen teachers, so rung-to-rung differences are attributable to
    the toggles and the data switch alone.  Returns one row per (rung, seed,
    split, K) in the metric-table schema extended with rung metadata.
    """
    from .retrieval import evaluate
    data = TrainData(train_records)
    rows: list[dict] = []
    for seed in seeds:
        model_seed = derive_seed(base_cfg.seed, "ladder-model", seed)
        run_cfg = replace(base_cfg, seed=derive_seed(base_cfg.seed, "ladder-run", seed))
        scratch = TigerFG(mcfg, model_seed).to(torch_dtype(run_cfg.precision))
        teachers = make_teachers(scratch, data, run_cfg, mcfg, warm_start=False)
        pretrained = bool(teachers.sanity)
        for rung_idx, (rung, letters, mix) in enumerate(LADDER):
            cfg = replace(run_cfg, toggles=LossToggles.from_string(letters), data_mix=mix)
            model = TigerFG(mcfg, model_seed).to(torch_dtype(cfg.precision))
            if pretrained:
                warm_start_from(teachers, model)
            train(model, teachers, data, cfg)
            for split_name, records in eval_splits.items():
                for row in evaluate(records, model, split_name, ks=ks):
                    row.update({"rung": rung_idx, "rung_name": rung,
                                "toggles": letters, "data": mix, "seed": seed})
                    rows.append(row)
    return rows
