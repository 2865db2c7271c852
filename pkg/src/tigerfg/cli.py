"""Operator command line: data generation, training, verification, retrieval.

Commands are deterministic given (config, seed), write partial outputs to
temp paths with atomic renames, and guard each output directory with a lock
file against concurrent invocations.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
from collections import OrderedDict

import numpy as np
import torch

from .checkpoint import load_tensors, save_tensors
from .config import Config, ConfigError, load_config, parse_config
from .model import TigerFG
from .objectives import LossToggles
from .scenegen import build_splits, build_vocab, load_manifest, write_manifests, write_ppm
from .trainer import (TrainData, TrainingDiverged, grad_check, make_optimizer,
                      make_teachers, run_ablation_ladder, torch_dtype, train)


class CliError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# filesystem helpers


@contextlib.contextmanager
def output_lock(out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    lock_path = os.path.join(out_dir, ".lock")
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CliError(
            f"output directory {out_dir} is locked by another invocation "
            f"(remove {lock_path} if that process is gone)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        with contextlib.suppress(FileNotFoundError):
            os.remove(lock_path)


def write_text(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_json(path: str, obj) -> None:
    write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# model/optimizer checkpoint plumbing


def save_run_checkpoint(model: TigerFG, optimizer, step: int, cfg: Config, path: str) -> None:
    model.save(path)
    opt_tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    opt_tensors["meta.step"] = np.array(float(step), dtype=np.float32)
    name_of = {id(p): n for n, p in model.named_parameters()}
    for group in optimizer.param_groups:
        for p in group["params"]:
            state = optimizer.state.get(p)
            if not state:
                continue
            name = name_of[id(p)]
            opt_tensors[f"opt.{name}.step"] = np.array(float(state["step"]), dtype=np.float32)
            opt_tensors[f"opt.{name}.exp_avg"] = state["exp_avg"].detach().cpu().numpy()
            opt_tensors[f"opt.{name}.exp_avg_sq"] = state["exp_avg_sq"].detach().cpu().numpy()
    save_tensors(path + ".opt", opt_tensors)
    write_text(path + ".cfg", cfg.dump())


def load_run_checkpoint(path: str):
    """Returns (model, config, step, opt_tensors or None)."""
    cfg_path = path + ".cfg"
    if not os.path.exists(cfg_path):
        raise CliError(f"missing checkpoint sidecar config {cfg_path}")
    with open(cfg_path, "r", encoding="utf-8") as fh:
        cfg = parse_config(fh.read())
    model = TigerFG(cfg.model(), cfg["seed"]).to(torch_dtype(cfg["train.precision"]))
    model.load(path)
    step, opt_tensors = 0, None
    if os.path.exists(path + ".opt"):
        opt_tensors = load_tensors(path + ".opt")
        step = int(round(float(np.asarray(opt_tensors["meta.step"]).reshape(-1)[0])))
    return model, cfg, step, opt_tensors


def restore_optimizer(optimizer, model: TigerFG, opt_tensors, dtype) -> None:
    params = dict(model.named_parameters())
    for name, param in params.items():
        key = f"opt.{name}.exp_avg"
        if key not in opt_tensors:
            continue
        step_val = float(np.asarray(opt_tensors[f"opt.{name}.step"]).reshape(-1)[0])
        optimizer.state[param] = {
            "step": torch.tensor(step_val),
            "exp_avg": torch.as_tensor(opt_tensors[key], dtype=dtype),
            "exp_avg_sq": torch.as_tensor(opt_tensors[f"opt.{name}.exp_avg_sq"], dtype=dtype),
        }


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    out_dir = args.out
    with output_lock(out_dir):
        bundle = build_splits(cfg.world(), cfg.gates())
        write_manifests(out_dir, {
            "train": bundle.train,
            "eval_normal": bundle.eval_normal,
            "eval_mosaic": bundle.eval_mosaic,
        })
        write_json(os.path.join(out_dir, "counts.json"), bundle.counts)
        if args.ppm_samples:
            for rec in bundle.eval_normal[: args.ppm_samples]:
                write_ppm(os.path.join(out_dir, f"sample_q{rec.spu}.ppm"), rec.query_image)
                write_ppm(os.path.join(out_dir, f"sample_p{rec.spu}.ppm"), rec.item_image)
        for stage in ("mined", "gated", "deduped", "balanced"):
            print(f"{stage}: {bundle.counts[stage]}")
        for key in sorted(bundle.counts):
            if key not in ("mined", "gated", "deduped", "balanced"):
                print(f"  {key}: {bundle.counts[key]}")
    return 0


def _load_records(cfg: Config, split: str):
    data_dir = cfg["data.dir"]
    if not os.path.exists(os.path.join(data_dir, f"{split}.jsonl")):
        raise CliError(f"no manifest for split {split!r} under {data_dir} (run gen-data first)")
    return load_manifest(data_dir, split)


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    tcfg = cfg.train(toggles=args.toggles, data_mix=args.data)
    out_dir = args.out
    with output_lock(out_dir):
        records = _load_records(cfg, "train")
        data = TrainData(records)
        ckpt_path = os.path.join(out_dir, "checkpoint.ckpt")
        start_step = 0
        if args.resume:
            model, _, start_step, opt_tensors = load_run_checkpoint(args.resume)
            optimizer = make_optimizer(model, tcfg)
            if opt_tensors is not None:
                restore_optimizer(optimizer, model, opt_tensors, torch_dtype(tcfg.precision))
        else:
            model = TigerFG(cfg.model(), cfg["seed"]).to(torch_dtype(tcfg.precision))
            optimizer = make_optimizer(model, tcfg)
        teachers = make_teachers(model, data, tcfg, cfg.model(),
                                 warm_start=not args.resume)
        if teachers.sanity:
            print(f"sdd teacher probe recall@1: {teachers.sanity['probe_recall_at_1']:.3f} "
                  f"(chance {teachers.sanity['probe_chance']:.4f})")

        log_path = os.path.join(out_dir, "train_log.txt")
        all_lines: list[str] = []
        if args.resume and os.path.exists(log_path):
            with open(log_path, "r", encoding="utf-8") as fh:
                all_lines = [ln.rstrip("\n") for ln in fh if ln.strip()]

        def on_step(step, mdl, opt, bundle):
            if (step + 1) % tcfg.ckpt_every == 0 or step == tcfg.steps - 1:
                save_run_checkpoint(mdl, opt, step + 1, cfg, ckpt_path)

        try:
            result = train(model, teachers, data, tcfg, start_step=start_step,
                           optimizer=optimizer, on_step=on_step)
        except TrainingDiverged as exc:
            print(f"aborted: {exc}", file=sys.stderr)
            return 1
        all_lines.extend(result.log_lines)
        write_text(log_path, "\n".join(all_lines) + "\n")
        save_run_checkpoint(model, optimizer, result.final_step, cfg, ckpt_path)
        from .report import save_loss_figure
        save_loss_figure(all_lines, os.path.join(out_dir, "loss_curve.png"))
        print(f"trained to step {result.final_step}; checkpoint at {ckpt_path}")
    return 0


def cmd_grad_check(args) -> int:
    cfg = load_config(args.config)
    weights = cfg.loss_weights()
    from dataclasses import replace
    weights = replace(weights, roi_h=2, roi_w=2)
    toggles = LossToggles.from_string(cfg["train.toggles"])
    report = grad_check(weights=weights, toggles=toggles, seed=cfg["seed"],
                        inject_fault=args.inject_grad_fault)
    for line in report.lines():
        print(line)
    return 0 if report.passed else 1


def cmd_index(args) -> int:
    from .retrieval import build_index
    model, cfg, _, _ = load_run_checkpoint(args.checkpoint)
    records = _load_records(cfg, args.split)
    with output_lock(args.out):
        index = build_index(records, model)
        index.save(args.out)
        print(f"indexed {len(index.ids)} items from {args.split} into {args.out}")
    return 0


def cmd_eval(args) -> int:
    from .report import save_metrics_figure
    from .retrieval import evaluate, load_index
    model, cfg, _, _ = load_run_checkpoint(args.checkpoint)
    rows = []
    for split in args.split:
        records = _load_records(cfg, split)
        index = None
        if args.index:
            index = load_index(args.index, {r.spu: r.primary for r in records})
        rows.extend(evaluate(records, model, split, index=index))
    header = f"{'split':<14}{'K':>4}{'recall':>10}{'mrr':>10}{'ndcg':>10}{'hitrate':>10}{'n':>8}"
    lines = [header]
    for row in rows:
        lines.append(f"{row['split']:<14}{row['K']:>4}{row['recall']:>10.4f}"
                     f"{row['mrr']:>10.4f}{row['ndcg']:>10.4f}{row['hitrate']:>10.4f}"
                     f"{row['n_queries']:>8}")
    table = "\n".join(lines)
    print(table)
    if args.out:
        with output_lock(args.out):
            write_json(os.path.join(args.out, "metrics.json"), rows)
            write_text(os.path.join(args.out, "metrics.txt"), table + "\n")
            save_metrics_figure(rows, os.path.join(args.out, "metrics.png"))
    return 0


def cmd_ablate(args) -> int:
    from .report import save_ladder_figure
    cfg = load_config(args.config)
    seeds = tuple(int(s) for s in args.seeds.split(",") if s.strip())
    with output_lock(args.out):
        bundle = build_splits(cfg.world(), cfg.gates())
        rows = run_ablation_ladder(
            bundle.train,
            {"eval_normal": bundle.eval_normal, "eval_mosaic": bundle.eval_mosaic},
            cfg.model(), cfg.train(), seeds=seeds)
        write_json(os.path.join(args.out, "ladder.json"), rows)
        csv_lines = ["rung,rung_name,toggles,data,seed,split,K,recall,mrr,ndcg,hitrate,n_queries"]
        for r in rows:
            csv_lines.append(
                f"{r['rung']},{r['rung_name']},{r['toggles']},{r['data']},{r['seed']},"
                f"{r['split']},{r['K']},{r['recall']:.6f},{r['mrr']:.6f},{r['ndcg']:.6f},"
                f"{r['hitrate']:.6f},{r['n_queries']}")
        write_text(os.path.join(args.out, "ladder.csv"), "\n".join(csv_lines) + "\n")
        save_ladder_figure(rows, os.path.join(args.out, "ladder.png"))
        for line in csv_lines:
            print(line)
    return 0


def cmd_heatmap(args) -> int:
    from .report import save_heatmap_figure
    from .retrieval import heatmap_export
    model, cfg, _, _ = load_run_checkpoint(args.checkpoint)
    records = _load_records(cfg, args.split)
    matches = [r for r in records if r.spu == args.record_id]
    if not matches:
        raise CliError(f"record id {args.record_id} not found in split {args.split!r}")
    rec = matches[0]
    title = rec.title
    if args.title_override:
        vocab = build_vocab(cfg["world.primary_cats"], cfg["world.leaf_per_cat"],
                            cfg["enc.vocab"])
        words = args.title_override.replace(",", " ").split()
        title = vocab.encode_words(words)
    with output_lock(args.out):
        prefix = os.path.join(args.out, f"heatmap_{args.split}_{args.record_id}")
        result = heatmap_export(model, rec.item_image, title, prefix)
        save_heatmap_figure(result["grid"], prefix + ".png",
                            title=f"spu {args.record_id}")
        print(f"wrote {result['csv']}, {result['pgm']}, {prefix}.png")
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tigerfg",
        description="text-guided fine-grained item retrieval: data, training, evaluation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="construct the train/eval splits")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--ppm-samples", type=int, default=0,
                   help="export this many eval records as PPM images")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the dual encoder")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--toggles", default=None, help="component letters, subset of SBRHDT")
    p.add_argument("--data", default=None, choices=("raw", "mix"),
                   help="train on raw pairs only or the 1:1 raw+mosaic mix")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("grad-check", help="verify analytic gradients on a tiny model")
    p.add_argument("--config", default=None)
    p.add_argument("--inject-grad-fault", action="store_true",
                   help="flip one gradient tensor to prove the harness catches it")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("index", help="encode a split gallery to an embedding dump")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("eval", help="retrieval metrics on one or more splits")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", required=True, nargs="+")
    p.add_argument("--index", default=None, help="prebuilt index directory")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the cumulative ablation ladder")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default="0,1,2")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("heatmap", help="export a text-conditioned similarity grid")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--record-id", type=int, required=True)
    p.add_argument("--split", default="eval_normal")
    p.add_argument("--title-override", default=None,
                   help="replacement title words (space or comma separated)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_heatmap)
    return parser


def main(argv=None) -> int:
    torch.set_num_threads(1)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ConfigError, FileNotFoundError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
