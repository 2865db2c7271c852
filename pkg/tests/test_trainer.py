import math

import numpy as np
import pytest
import torch

from tigerfg.model import ModelConfig, TigerFG
from tigerfg.objectives import LossToggles, LossWeights
from tigerfg.scenegen import WorldConfig, build_splits
from tigerfg.trainer import (TrainConfig, TrainData, TrainerError, TrainingDiverged,
                             assemble_batch, batch_tensors, compute_batch_loss,
                             FrozenFeatureMemo, grad_check, lr_factor, make_optimizer,
                             make_teachers, tiny_model_config, torch_dtype, train)


@pytest.fixture(scope="module")
def world():
    return build_splits(WorldConfig(n_items=150, n_primary=4, leaf_per_cat=2, seed=6,
                                    train_pairs=48, eval_pairs=16))


@pytest.fixture(scope="module")
def data(world):
    return TrainData(world.train)


@pytest.fixture(scope="module")
def mcfg():
    return ModelConfig(c_v=32, c_t=32, c_u=16, c_a=16, blocks=1, heads=2,
                       n_slots=4, scene_px=64, crop_px=32)


def small_cfg(**kw):
    defaults = dict(batch=8, steps=3, seed=5, teacher_steps=0, log_every=1,
                    weights=LossWeights())
    defaults.update(kw)
    return TrainConfig(**defaults)


class TestAssembleBatch:
    def test_k_titles_per_record(self, data):
        cfg = small_cfg(weights=LossWeights(k_hard=1))
        batch = assemble_batch(data, cfg, step=0)
        assert all(len(t) == 1 for t in batch.neg_titles)
        cfg3 = small_cfg(weights=LossWeights(k_hard=3))
        batch3 = assemble_batch(data, cfg3, step=0)
        assert all(len(t) == 3 for t in batch3.neg_titles)

    def test_deterministic_per_seed_and_step(self, data):
        cfg = small_cfg()
        a = assemble_batch(data, cfg, step=7)
        b = assemble_batch(data, cfg, step=7)
        assert [r.spu for r in a.records] == [r.spu for r in b.records]
        assert [[t.tolist() for t in ts] for ts in a.neg_titles] == \
               [[t.tolist() for t in ts] for ts in b.neg_titles]
        c = assemble_batch(data, cfg, step=8)
        assert [r.spu for r in a.records] != [r.spu for r in c.records]

    def test_constraint_audit_over_many_batches(self, data):
        cfg = small_cfg()
        group_of = {}
        for rec in data.mosaic:
            group_of.setdefault(rec.mosaic_group, set()).add(rec.spu)
        for step in range(1000):
            batch = assemble_batch(data, cfg, step)
            batch.validate()
            spus = [r.spu for r in batch.records]
            assert len(set(spus)) == len(spus)
            n_mosaic = sum(r.is_mosaic for r in batch.records)
            assert abs((len(spus) - n_mosaic) - n_mosaic) <= 1
            present_groups = {r.mosaic_group for r in batch.records if r.is_mosaic}
            mosaic_spus = {r.spu for r in batch.records if r.is_mosaic}
            for gid in present_groups:
                assert group_of[gid] <= mosaic_spus, "mosaic group split across batches"
            for rec, prims in zip(batch.records, batch.neg_primaries):
                assert all(p != rec.primary for p in prims)

    def test_raw_mode_has_no_mosaic(self, data):
        batch = assemble_batch(data, small_cfg(data_mix="raw"), step=0)
        assert not any(r.is_mosaic for r in batch.records)

    def test_impossible_quota_errors(self, data):
        with pytest.raises(TrainerError):
            assemble_batch(data, small_cfg(batch=2 * len(data.raw) + 8), step=0)


class TestTrainingLoop:
    def test_zero_lr_leaves_params_bitwise(self, data, mcfg):
        model = TigerFG(mcfg, 3)
        cfg = small_cfg(lr=0.0, weight_decay=0.0, steps=2)
        teachers = make_teachers(model, None, cfg, mcfg)
        before = {n: p.detach().clone() for n, p in model.named_parameters()}
        train(model, teachers, data, cfg)
        for n, p in model.named_parameters():
            assert torch.equal(p, before[n]), n

    def test_single_step_bit_reproducible(self, data, mcfg):
        outs = []
        for _ in range(2):
            model = TigerFG(mcfg, 3)
            cfg = small_cfg(steps=1)
            teachers = make_teachers(model, None, cfg, mcfg)
            train(model, teachers, data, cfg)
            outs.append({n: p.detach().clone() for n, p in model.named_parameters()})
        for n in outs[0]:
            assert torch.equal(outs[0][n], outs[1][n]), n

    def test_loss_decreases_over_200_steps_median_of_3_seeds(self, world):
        # 64-record world, fused model, plain smoke check on the optimizer
        mcfg = ModelConfig(c_v=32, c_t=32, c_u=16, c_a=16, blocks=1, heads=2,
                           n_slots=4, scene_px=64, crop_px=32)
        data = TrainData(world.train)
        drops = []
        for seed in (0, 1, 2):
            model = TigerFG(mcfg, seed)
            cfg = small_cfg(steps=200, seed=seed, lr=1e-3, log_every=10)
            teachers = make_teachers(model, data, cfg, mcfg)
            res = train(model, teachers, data, cfg)
            first = float(res.log_lines[0].split()[1].split("=")[1])
            last_quarter = [float(l.split()[1].split("=")[1]) for l in res.log_lines[-5:]]
            drops.append(first - float(np.mean(last_quarter)))
        assert float(np.median(drops)) > 0.5

    def test_nonfinite_loss_aborts_with_component_dump(self, data, mcfg):
        model = TigerFG(mcfg, 3)
        cfg = small_cfg(steps=1)
        teachers = make_teachers(model, None, cfg, mcfg)
        with torch.no_grad():
            model.heads.query_head[0].weight.fill_(float("nan"))
        with pytest.raises(TrainingDiverged) as err:
            train(model, teachers, data, cfg)
        assert "q2i=" in str(err.value)

    def test_memoized_forward_matches_fresh(self, data, mcfg):
        model = TigerFG(mcfg, 3)
        cfg = small_cfg()
        teachers = make_teachers(model, None, cfg, mcfg)
        batch = assemble_batch(data, cfg, step=0)
        dtype = torch_dtype(cfg.precision)
        memo = FrozenFeatureMemo(mcfg, teachers, cfg.weights, dtype)
        bt_memo = batch_tensors(batch, mcfg, dtype, memo=memo)
        bt_plain = batch_tensors(batch, mcfg, dtype)
        b1, _ = compute_batch_loss(model, teachers, bt_memo, cfg.weights, cfg.toggles,
                                   memo=memo, records=batch.records)
        b2, _ = compute_batch_loss(model, teachers, bt_plain, cfg.weights, cfg.toggles)
        assert float(b1.total) == pytest.approx(float(b2.total), abs=1e-10)
        for name, v in b1.components.items():
            if v is not None:
                assert float(v) == pytest.approx(float(b2.components[name]), abs=1e-10)

    def test_lr_factor_warmup_then_cosine(self):
        assert lr_factor(0, 100, 0.05) == pytest.approx(1 / 5)
        assert lr_factor(4, 100, 0.05) == pytest.approx(1.0)
        assert lr_factor(99, 100, 0.05) == pytest.approx(
            0.5 * (1 + math.cos(math.pi * 94 / 95)))
        assert lr_factor(50, 100, 0.0) < 1.0


class TestTeachers:
    def test_teacher_identical_across_runs(self, data, mcfg):
        cfg = small_cfg(teacher_steps=30)
        t1 = make_teachers(TigerFG(mcfg, 3), data, cfg, mcfg)
        t2 = make_teachers(TigerFG(mcfg, 3), data, cfg, mcfg)
        for (n, a), (_, b) in zip(t1.sdd.named_parameters(), t2.sdd.named_parameters()):
            assert torch.equal(a, b), n
        for (n, a), (_, b) in zip(t1.srd.named_parameters(), t2.srd.named_parameters()):
            assert torch.equal(a, b), n

    def test_sdd_teacher_beats_ten_times_chance(self, data, mcfg):
        cfg = small_cfg(teacher_steps=200, batch=16)
        teachers = make_teachers(TigerFG(mcfg, 3), data, cfg, mcfg)
        sanity = teachers.sanity
        assert sanity["probe_recall_at_1"] >= 10 * sanity["probe_chance"]

    def test_teachers_frozen_through_training(self, data, mcfg):
        model = TigerFG(mcfg, 3)
        cfg = small_cfg(steps=5, teacher_steps=10)
        teachers = make_teachers(model, data, cfg, mcfg)
        before = {n: p.detach().clone() for n, p in teachers.srd.named_parameters()}
        before.update({"sdd." + n: p.detach().clone()
                       for n, p in teachers.sdd.named_parameters()})
        train(model, teachers, data, cfg)
        for n, p in teachers.srd.named_parameters():
            assert torch.equal(p, before[n])
        for n, p in teachers.sdd.named_parameters():
            assert torch.equal(p, before["sdd." + n])

    def test_optimizer_refuses_frozen(self, data, mcfg):
        teachers = make_teachers(TigerFG(mcfg, 3), None, small_cfg(), mcfg)
        with pytest.raises(TrainerError):
            make_optimizer(teachers.srd, small_cfg())


class TestGradCheck:
    def test_passes_tightly(self):
        report = grad_check(coords_per_tensor=4)
        assert report.passed
        assert report.max_rel <= 1e-4

    def test_reports_every_parameter_tensor(self):
        report = grad_check(coords_per_tensor=2)
        names = {e.name for e in report.entries}
        model = TigerFG(tiny_model_config(), 11)
        for n, _ in model.named_parameters():
            assert n in names
        assert any(n.startswith("teacher.") for n in names)

    def test_wrong_sign_injection_fails(self):
        report = grad_check(coords_per_tensor=2, inject_fault=True)
        assert not report.passed

    def test_all_toggles_off_zero_gradients(self):
        # only the base contrastive path remains; fusion/text/teacher tensors
        # must receive no gradient at all
        toggles = LossToggles(slots=False, i2v=False, srd=False,
                              hard_negatives=False, sdd=False, v2t=False)
        from tigerfg.trainer import _tiny_batch
        mcfg = tiny_model_config()
        model = TigerFG(mcfg, 11).double()
        bt = _tiny_batch(mcfg, 4, 1, 11)
        bundle, _ = compute_batch_loss(model, None, bt, LossWeights(roi_h=2, roi_w=2),
                                       toggles)
        bundle.total.backward()
        for name, p in model.named_parameters():
            if name.startswith(("fusion.", "text_encoder.")) or "align" in name:
                assert p.grad is None or float(p.grad.abs().max()) == 0.0, name

    def test_detached_tensors_exactly_zero(self):
        report = grad_check(coords_per_tensor=2)
        frozen = [e for e in report.entries if e.kind == "frozen"]
        assert frozen and all(e.max_rel == 0.0 for e in frozen)
        assert any(e.name == "heads.anchor_proj" for e in frozen)
