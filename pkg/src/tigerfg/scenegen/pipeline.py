"""Dataset construction pipeline.

The flow mirrors a production mining stack with deterministic synthetic
oracles standing in for the learned components:

* grounding oracle  -> true placement lookup with injectable jitter/misses
* alignment oracle  -> fraction of title attribute tokens realized in a crop
* perceptual hash   -> quantized 8x8 downsample
* crop embedder     -> frozen random projection of a 16x16 resample

Stage 1 mines query tuples from product main/sub views and the synthetic
click log, stage 2 assigns item-side boxes by embedding similarity with a
[tau_low, tau_high] keep band, then SPU dedup and category balancing produce
the raw training pairs.  Mosaic synthesis rebuilds candidate images as
cluttered scenes while keeping the query side bit-exact.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from ..encoders import crop_and_resize
from ..numerics import Box
from ..seeding import derive_seed, rng_for
from .catalog import ItemSpec, gen_catalog
from .records import SampleRecord
from .render import Scene, draw_item, render_scene, sample_box, sample_layout
from .vocab import SIZES, Vocab, build_vocab


class PipelineError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineGates:
    tau_clip: float = 0.30
    tau_low: float = 0.80
    tau_high: float = 0.97
    max_distractors: int = 4
    max_retries: int = 50
    max_overlap_iou: float = 0.05

    def __post_init__(self):
        if not (0.0 < self.tau_low < self.tau_high <= 1.0):
            raise PipelineError(
                f"need 0 < tau_low < tau_high <= 1, got {self.tau_low}, {self.tau_high}")
        if self.max_distractors < 0 or self.max_retries < 1:
            raise PipelineError("bad distractor/retry limits")


@dataclass(frozen=True)
class WorldConfig:
    seed: int = 7
    n_primary: int = 16
    leaf_per_cat: int = 2
    n_items: int = 800
    clicklog_rate: float = 0.35
    identical_sub_rate: float = 0.04
    near_dup_rate: float = 0.05
    misground_rate: float = 0.06
    verifier_reject_rate: float = 0.0
    scene_px: int = 64
    crop_px: int = 32
    train_pairs: int = 512
    eval_pairs: int = 128
    mosaic_group_size: int = 4
    mosaic_scale_lo: float = 0.5
    mosaic_scale_hi: float = 1.0
    vocab_size: int = 256


@dataclass
class ProductViews:
    item: ItemSpec
    main: Scene
    sub: Scene


@dataclass
class ClickRecord:
    item: ItemSpec
    scene: Scene
    user_box: Box


@dataclass
class QueryTuple:
    item: ItemSpec
    query_scene: Scene
    query_box: Box
    item_scene: Scene
    source: str


@dataclass
class SplitBundle:
    train: list[SampleRecord]
    eval_normal: list[SampleRecord]
    eval_mosaic: list[SampleRecord]
    counts: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# synthetic oracles


class SyntheticOracles:
    """Deterministic stand-ins for the detector, CLIP filter, and embedder."""

    def __init__(self, seed: int, misground_rate: float = 0.0, embed_dim: int = 64):
        self.seed = seed
        self.misground_rate = misground_rate
        proj_rng = rng_for(seed, "embed-oracle")
        n_feat = 8 * 8 * 3 + 3  # centered cells plus mean color
        self.projection = proj_rng.standard_normal((embed_dim, n_feat)) / np.sqrt(n_feat)

    def phash(self, image: np.ndarray) -> bytes:
        """Quantized 8x8 block-mean hash."""
        h, w = image.shape[0], image.shape[1]
        small = image.reshape(8, h // 8, 8, w // 8, 3).mean(axis=(1, 3))
        levels = np.clip((small * 16).astype(np.int64), 0, 15).astype(np.uint8)
        return hashlib.blake2b(levels.tobytes(), digest_size=8).digest()

    def ground(self, scene: Scene, item: ItemSpec) -> Box:
        """Title-conditioned box proposal: true placement with injectable noise."""
        rng = rng_for(self.seed, "ground", item.spu)
        target = next((b for spu, b in scene.placements if spu == item.spu), None)
        if target is None:
            raise PipelineError(f"item {item.spu} not present in scene")
        size = int(scene.image.shape[0])
        if rng.uniform() < self.misground_rate:
            others = [b for spu, b in scene.placements if spu != item.spu]
            if others and rng.uniform() < 0.5:
                return others[int(rng.integers(len(others)))]
            return sample_box(rng, size, 10, 24)
        jx, jy = (int(rng.integers(-2, 3)) for _ in range(2))
        x0 = float(np.clip(target.x0 + jx, 0, size - 2))
        y0 = float(np.clip(target.y0 + jy, 0, size - 2))
        x1 = float(np.clip(target.x1 + jx, x0 + 2, size))
        y1 = float(np.clip(target.y1 + jy, y0 + 2, size))
        return Box(x0, y0, x1, y1)

    def alignment_score(self, scene: Scene, crop_box: Box, item: ItemSpec) -> float:
        """Fraction of the four appearance tokens visually realized in the crop.

        Glyph and color count as realized when the crop covers at least half
        of the item's true placement, pattern needs 0.7, and the size word
        needs the item nearly whole (0.9).
        """
        target = next((b for spu, b in scene.placements if spu == item.spu), None)
        if target is None:
            return 0.0
        coverage = target.intersection_area(crop_box) / target.area
        realized = sum((coverage >= 0.5, coverage >= 0.5, coverage >= 0.7, coverage >= 0.9))
        return realized / 4.0

    def embed(self, crop: np.ndarray) -> np.ndarray:
        """Frozen crop encoder: antialiased 8x8 resample -> random projection.

        The oversample-then-average pulls renders of one product at different
        scales together, standing in for the scale robustness of a trained
        embedding model.
        """
        h, w = crop.shape[0], crop.shape[1]
        over = crop_and_resize(crop.astype(np.float64), Box(0.0, 0.0, float(w), float(h)), 32, 32)
        small = over.reshape(8, 4, 8, 4, 3).mean(axis=(1, 3))
        flat = small.reshape(-1)
        # mean color keeps constant crops (flat background boxes) embeddable
        feats = np.concatenate([flat - flat.mean(), 0.25 * small.mean(axis=(0, 1))])
        vec = self.projection @ feats
        norm = np.linalg.norm(vec)
        if norm == 0:
            raise PipelineError("degenerate crop embedding")
        return vec / norm


def _crop_int(image: np.ndarray, box: Box) -> np.ndarray:
    x0, y0, x1, y1 = (int(round(c)) for c in box.as_tuple())
    return image[y0:y1, x0:x1]


# ---------------------------------------------------------------------------
# world generation


def _size_mult(item: ItemSpec) -> float:
    return (0.85, 1.0, 1.15)[item.size_cls % len(SIZES)]


def _render_product_scene(item: ItemSpec, catalog: list[ItemSpec], seed: int, view: str,
                          size_px: int, centered: bool) -> tuple[Scene, Box]:
    rng = rng_for(seed, "scene", view, item.spu)
    mult = _size_mult(item)
    if centered:
        # product shots: subject dominant and centered, distractors small and
        # occasional, so the clean split keeps its center bias
        side = int(np.clip(round(rng.integers(30, 45) * mult), 22, size_px - 8))
        cx = size_px // 2 + int(rng.integers(-5, 6))
        x0 = int(np.clip(cx - side // 2, 1, size_px - side - 1))
        y0 = int(np.clip(size_px // 2 + int(rng.integers(-5, 6)) - side // 2, 1, size_px - side - 1))
        target_box = Box(float(x0), float(y0), float(x0 + side), float(y0 + side))
        n_dist = int(rng.uniform() < 0.25)
    else:
        side_lo = max(14, int(16 * mult))
        side_hi = min(size_px - 6, int(36 * mult))
        target_box = sample_box(rng, size_px, side_lo, side_hi)
        n_dist = int(rng.integers(0, 3))
    dist_boxes = sample_layout(rng, n_dist, size_px, 8, 11, existing=[target_box])
    others = [c for c in catalog if c.spu != item.spu]
    draws = []
    for b in dist_boxes:
        draws.append((others[int(rng.integers(len(others)))], b))
    draws.append((item, target_box))  # subject drawn last, never occluded
    scene = render_scene(draws, size_px, bg_style=int(rng.integers(1 << 30)),
                         seed=derive_seed(seed, "render", view, item.spu))
    return scene, target_box


def build_world(cfg: WorldConfig, vocab: Vocab | None = None):
    """Catalog plus rendered product views and the synthetic click log."""
    vocab = vocab or build_vocab(cfg.n_primary, cfg.leaf_per_cat, cfg.vocab_size)
    catalog = gen_catalog(cfg.n_primary, cfg.leaf_per_cat, cfg.n_items, cfg.seed, vocab)
    products = []
    click_log = []
    for item in catalog:
        main, _ = _render_product_scene(item, catalog, cfg.seed, "main", cfg.scene_px, True)
        mode_rng = rng_for(cfg.seed, "viewmode", item.spu)
        mode = mode_rng.uniform()
        if mode < cfg.identical_sub_rate:
            sub = Scene(image=main.image.copy(), placements=list(main.placements))
        elif mode < cfg.identical_sub_rate + cfg.near_dup_rate:
            # same pixels around the target, one extra glyph elsewhere: survives
            # the hash gate, dies at the near-duplicate similarity gate
            sub_img = main.image.copy()
            target = next(b for spu, b in main.placements if spu == item.spu)
            extra = sample_layout(mode_rng, 1, cfg.scene_px, 8, 12, existing=[target],
                                  iou_cap=0.0, retries=100)
            placements = list(main.placements)
            if extra:
                others = [c for c in catalog if c.spu != item.spu]
                extra_item = others[int(mode_rng.integers(len(others)))]
                draw_item(sub_img, extra_item, extra[0])
                placements.append((extra_item.spu, extra[0]))
            sub = Scene(image=sub_img, placements=placements)
        else:
            sub, _ = _render_product_scene(item, catalog, cfg.seed, "sub", cfg.scene_px, False)
        products.append(ProductViews(item=item, main=main, sub=sub))

        click_rng = rng_for(cfg.seed, "click", item.spu)
        if click_rng.uniform() < cfg.clicklog_rate:
            scene, target = _render_product_scene(
                item, catalog, cfg.seed, "click", cfg.scene_px, False)
            jx, jy = (int(click_rng.integers(-1, 2)) for _ in range(2))
            size = cfg.scene_px
            user_box = Box(
                float(np.clip(target.x0 + jx, 0, size - 2)),
                float(np.clip(target.y0 + jy, 0, size - 2)),
                float(np.clip(target.x1 + jx, target.x0 + jx + 2, size)),
                float(np.clip(target.y1 + jy, target.y0 + jy + 2, size)),
            )
            click_log.append(ClickRecord(item=item, scene=scene, user_box=user_box))
    return catalog, products, click_log


# ---------------------------------------------------------------------------
# pipeline stages


def candidate_mining(products: list[ProductViews], click_log: list[ClickRecord],
                     gates: PipelineGates, oracles: SyntheticOracles):
    """Stage-1 mining: hash-gated main/sub pairs plus pass-through click logs.

    Returns (tuples, counts); filtered products are dropped, never an error.
    """
    tuples: list[QueryTuple] = []
    counts = {"source1": 0, "source2": 0, "dropped_identical_hash": 0,
              "dropped_low_alignment": 0}
    for views in products:
        if oracles.phash(views.main.image) == oracles.phash(views.sub.image):
            counts["dropped_identical_hash"] += 1
            continue
        query_box = oracles.ground(views.sub, views.item)
        if oracles.alignment_score(views.sub, query_box, views.item) < gates.tau_clip:
            counts["dropped_low_alignment"] += 1
            continue
        counts["source1"] += 1
        tuples.append(QueryTuple(item=views.item, query_scene=views.sub,
                                 query_box=query_box, item_scene=views.main,
                                 source="main_sub"))
    for click in click_log:
        product = next((p for p in products if p.item.spu == click.item.spu), None)
        if product is None:
            continue
        counts["source2"] += 1
        tuples.append(QueryTuple(item=click.item, query_scene=click.scene,
                                 query_box=click.user_box, item_scene=product.main,
                                 source="click_log"))
    counts["mined"] = len(tuples)
    return tuples, counts


def item_box_pairing(tuples: list[QueryTuple], oracles: SyntheticOracles,
                     gates: PipelineGates):
    """Stage-2 box assignment with the [tau_low, tau_high] similarity band.

    The argmax proposal wins; ties break toward the lowest placement index.
    Returns (records, counts).
    """
    records: list[SampleRecord] = []
    counts = {"dropped_no_proposals": 0, "dropped_sim_high": 0, "dropped_sim_low": 0}
    for tup in tuples:
        proposals = [box for _, box in tup.item_scene.placements]
        if not proposals:
            counts["dropped_no_proposals"] += 1
            continue
        query_vec = oracles.embed(_crop_int(tup.query_scene.image, tup.query_box))
        best_idx, best_sim = 0, -2.0
        for idx, box in enumerate(proposals):
            sim = float(query_vec @ oracles.embed(_crop_int(tup.item_scene.image, box)))
            if sim > best_sim:  # strict: keeps the earliest proposal on ties
                best_idx, best_sim = idx, sim
        if best_sim > gates.tau_high:
            counts["dropped_sim_high"] += 1
            continue
        if best_sim < gates.tau_low:
            counts["dropped_sim_low"] += 1
            continue
        records.append(SampleRecord(
            spu=tup.item.spu, primary=tup.item.primary, leaf=tup.item.leaf,
            title=tup.item.title_ids(),
            query_image=tup.query_scene.image, query_box=tup.query_box,
            item_image=tup.item_scene.image, item_box=proposals[best_idx],
        ))
    counts["gated"] = len(records)
    return records, counts


def spu_dedup(records: list[SampleRecord]) -> list[SampleRecord]:
    """Keep the first record per SPU in iteration order."""
    seen: set[int] = set()
    out = []
    for rec in records:
        if rec.spu in seen:
            continue
        seen.add(rec.spu)
        out.append(rec)
    return out


def category_balance(records: list[SampleRecord], n_target: int, seed: int) -> list[SampleRecord]:
    """Round-robin sampling without replacement over primary categories."""
    if n_target >= len(records):
        return list(records)
    by_primary: dict[int, list[SampleRecord]] = {}
    for rec in records:
        by_primary.setdefault(rec.primary, []).append(rec)
    rng = rng_for(seed, "balance")
    queues = {}
    for primary in sorted(by_primary):
        group = by_primary[primary]
        order = rng.permutation(len(group))
        queues[primary] = [group[i] for i in order]
    out: list[SampleRecord] = []
    while len(out) < n_target:
        progressed = False
        for primary in sorted(queues):
            if queues[primary]:
                out.append(queues[primary].pop(0))
                progressed = True
                if len(out) >= n_target:
                    break
        if not progressed:
            break
    return out


def _paste(canvas: np.ndarray, crop: np.ndarray, x0: int, y0: int, scale: float) -> Box:
    h, w = crop.shape[0], crop.shape[1]
    th = max(4, int(round(h * scale)))
    tw = max(4, int(round(w * scale)))
    if (th, tw) == (h, w):
        patch = crop.copy()
    else:
        patch = crop_and_resize(crop, Box(0.0, 0.0, float(w), float(h)), th, tw)
    canvas[y0:y0 + th, x0:x0 + tw] = patch.astype(canvas.dtype)
    return Box(float(x0), float(y0), float(x0 + tw), float(y0 + th))


def _place_box(rng: np.random.Generator, canvas_px: int, th: int, tw: int,
               existing: list[Box], iou_cap: float, retries: int) -> tuple[int, int] | None:
    for _ in range(retries):
        x0 = int(rng.integers(0, canvas_px - tw + 1))
        y0 = int(rng.integers(0, canvas_px - th + 1))
        cand = Box(float(x0), float(y0), float(x0 + tw), float(y0 + th))
        if all(cand.iou(b) <= iou_cap for b in existing):
            return x0, y0
    return None


def mosaic_synthesize(record: SampleRecord, bg_pool: list[SampleRecord],
                      distractor_pool: list[tuple[np.ndarray, int, int]],
                      gates: PipelineGates, seed: int,
                      n_distractors: int | None = None,
                      scale_range: tuple[float, float] = (0.5, 1.0),
                      mosaic_group: int | None = None) -> SampleRecord:
    """Re-synthesize the candidate image as a cluttered multi-object scene.

    The target crop is pasted last (pixel-verbatim at scale 1) onto a
    background drawn from a record whose SPU and primary category both
    differ; distractor crops must come from other primary categories.  The
    query side and title are carried over untouched.
    """
    rng = rng_for(seed, "mosaic", record.spu)
    bg_candidates = [r for r in bg_pool
                     if r.spu != record.spu and r.primary != record.primary]
    if not bg_candidates:
        raise PipelineError("no cross-category background available")
    bg_rec = bg_candidates[int(rng.integers(len(bg_candidates)))]
    canvas = bg_rec.item_image.copy()
    canvas_px = canvas.shape[0]

    usable = [(crop, primary, spu) for crop, primary, spu in distractor_pool
              if primary != record.primary and spu != record.spu]
    k = gates.max_distractors if n_distractors is None else n_distractors
    k = min(k, len(usable))

    target_crop = _crop_int(record.item_image, record.item_box)
    t_scale = float(rng.uniform(scale_range[0], scale_range[1]))
    # several objects plus the low overlap cap must fit, so pasted sides are
    # bounded by a fraction of the canvas; the sampled scale only shrinks
    max_target = max(6, int(0.42 * canvas_px))
    max_dist = max(6, int(0.34 * canvas_px))
    t_scale = min(t_scale, max_target / max(target_crop.shape[0], target_crop.shape[1]))
    th = max(4, int(round(target_crop.shape[0] * t_scale)))
    tw = max(4, int(round(target_crop.shape[1] * t_scale)))

    # the target claims space first (it must land); distractors fill around
    # it and are dropped one by one when their retries run out
    t_pos = _place_box(rng, canvas_px, th, tw, [], gates.max_overlap_iou,
                       gates.max_retries)
    if t_pos is None:
        raise PipelineError("could not place the target crop")
    target_box = Box(float(t_pos[0]), float(t_pos[1]),
                     float(t_pos[0] + tw), float(t_pos[1] + th))

    placed: list[Box] = [target_box]
    jobs = []  # (crop, x0, y0, scale) painted before the target
    chosen = [usable[i] for i in rng.choice(len(usable), size=k, replace=False)] if k else []
    placed_any_distractor = False
    for crop, _, _ in chosen:
        d_scale = float(rng.uniform(scale_range[0], scale_range[1]))
        d_scale = min(d_scale, max_dist / max(crop.shape[0], crop.shape[1]))
        dh = max(4, int(round(crop.shape[0] * d_scale)))
        dw = max(4, int(round(crop.shape[1] * d_scale)))
        pos = _place_box(rng, canvas_px, dh, dw, placed,
                         gates.max_overlap_iou, gates.max_retries)
        if pos is None:
            continue  # retries exhausted: proceed with one fewer distractor
        placed.append(Box(float(pos[0]), float(pos[1]), float(pos[0] + dw), float(pos[1] + dh)))
        jobs.append((crop, pos[0], pos[1], d_scale))
        placed_any_distractor = True
    if k > 0 and not placed_any_distractor:
        raise PipelineError("could not place any distractor")

    for crop, x0, y0, scale in jobs:
        _paste(canvas, crop, x0, y0, scale)
    new_box = _paste(canvas, target_crop, t_pos[0], t_pos[1], t_scale)
    twin = record.with_mosaic(canvas, new_box, mosaic_group)
    # provenance for audits; in-memory only, never serialized
    twin.mosaic_bg = (bg_rec.spu, bg_rec.primary)
    twin.mosaic_distractors = [(spu, primary) for _, primary, spu in chosen]
    twin.mosaic_scale = t_scale
    return twin


def _partition_cliques(records: list[SampleRecord], group_size: int, seed: int):
    """Group records so each clique has pairwise-distinct primary categories."""
    queues: dict[int, list[SampleRecord]] = {}
    rng = rng_for(seed, "cliques")
    order = rng.permutation(len(records))
    for i in order:
        queues.setdefault(records[int(i)].primary, []).append(records[int(i)])
    cliques = []
    while any(queues.values()):
        ranked = sorted(queues, key=lambda p: (-len(queues[p]), p))
        group = [queues[p].pop(0) for p in ranked[:group_size] if queues[p]]
        cliques.append(group)
    return cliques


def build_splits(cfg: WorldConfig, gates: PipelineGates | None = None,
                 vocab: Vocab | None = None) -> SplitBundle:
    """Run the full pipeline: train (raw + mosaic, 1:1), eval-normal, eval-mosaic."""
    gates = gates or PipelineGates()
    vocab = vocab or build_vocab(cfg.n_primary, cfg.leaf_per_cat, cfg.vocab_size)
    catalog, products, click_log = build_world(cfg, vocab)
    oracles = SyntheticOracles(cfg.seed, misground_rate=cfg.misground_rate)

    tuples, counts = candidate_mining(products, click_log, gates, oracles)
    paired, pair_counts = item_box_pairing(tuples, oracles, gates)
    counts.update(pair_counts)
    deduped = spu_dedup(paired)
    counts["deduped"] = len(deduped)

    verify_rng = rng_for(cfg.seed, "verifier")
    verified = [r for r in deduped if verify_rng.uniform() >= cfg.verifier_reject_rate]
    counts["verifier_rejected"] = len(deduped) - len(verified)

    eval_normal = category_balance(verified, cfg.eval_pairs, derive_seed(cfg.seed, "evalpick"))
    if len(eval_normal) < cfg.eval_pairs:
        raise PipelineError(
            f"world too small: requested {cfg.eval_pairs} eval pairs, "
            f"only {len(eval_normal)} survived the pipeline")
    eval_spus = {r.spu for r in eval_normal}
    train_pool = [r for r in deduped if r.spu not in eval_spus]
    train_raw = category_balance(train_pool, cfg.train_pairs, derive_seed(cfg.seed, "trainpick"))
    if len(train_raw) < cfg.train_pairs:
        raise PipelineError(
            f"world too small: requested {cfg.train_pairs} train pairs, "
            f"only {len(train_raw)} available after the eval split")
    counts["balanced"] = len(eval_normal) + len(train_raw)

    for rec in eval_normal:
        rec.split = "eval_normal"
    for rec in train_raw:
        rec.split = "train"

    # train-side mosaic twins: cliques of cross-category records donate each
    # other's crops, and the clique id keeps them co-batched during training
    cliques = _partition_cliques(train_raw, cfg.mosaic_group_size, cfg.seed)
    train_mosaic = []
    for group_id, clique in enumerate(cliques):
        for rec in clique:
            donors = [( _crop_int(r.item_image, r.item_box), r.primary, r.spu)
                      for r in clique if r.spu != rec.spu]
            twin = mosaic_synthesize(
                rec, train_raw, donors, gates, cfg.seed,
                n_distractors=len(donors),
                scale_range=(cfg.mosaic_scale_lo, cfg.mosaic_scale_hi),
                mosaic_group=group_id)
            twin.split = "train"
            train_mosaic.append(twin)
    counts["train_raw"] = len(train_raw)
    counts["train_mosaic"] = len(train_mosaic)

    eval_pool = [(_crop_int(r.item_image, r.item_box), r.primary, r.spu) for r in eval_normal]
    eval_mosaic = []
    for rec in eval_normal:
        twin = mosaic_synthesize(
            rec, eval_normal, eval_pool, gates, derive_seed(cfg.seed, "evalmosaic"),
            scale_range=(cfg.mosaic_scale_lo, cfg.mosaic_scale_hi))
        twin.split = "eval_mosaic"
        eval_mosaic.append(twin)
    counts["eval_normal"] = len(eval_normal)
    counts["eval_mosaic"] = len(eval_mosaic)

    train = train_raw + train_mosaic
    for rec in train + eval_normal + eval_mosaic:
        rec.validate(len(vocab))
    return SplitBundle(train=train, eval_normal=eval_normal,
                       eval_mosaic=eval_mosaic, counts=counts)
