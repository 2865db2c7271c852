"""Flat key=value configuration.

One ``key = value`` pair per line, ``#`` starts a comment.  Unknown keys are
rejected, every key has a validated default, and the whole run's randomness
flows from the single ``seed`` entry.  ``load_config`` honors the
TIGERFG_CONFIG environment variable when no explicit path is given.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

from .model import ModelConfig
from .objectives import LossToggles, LossWeights
from .scenegen.pipeline import PipelineGates, WorldConfig
from .trainer import TrainConfig

ENV_VAR = "TIGERFG_CONFIG"


class ConfigError(ValueError):
    pass


def _positive(x):
    return x > 0


def _non_negative(x):
    return x >= 0


def _fraction(x):
    return 0.0 <= x <= 1.0


# key -> (parser, default, validator, description)
SCHEMA: dict[str, tuple] = {
    "seed": (int, 7, _non_negative, "master seed for all derived randomness"),
    "data.dir": (str, "data", None, "dataset directory written by gen-data"),

    "world.primary_cats": (int, 16, _positive, "number of primary categories"),
    "world.leaf_per_cat": (int, 2, _positive, "leaf categories per primary"),
    "world.items": (int, 800, _positive, "catalog size (SPUs)"),
    "world.clicklog_rate": (float, 0.35, _fraction, "fraction of SPUs with a click-log tuple"),
    "world.identical_sub_rate": (float, 0.04, _fraction, "identical main/sub injection rate"),
    "world.near_dup_rate": (float, 0.05, _fraction, "near-duplicate sub-view injection rate"),
    "world.misground_rate": (float, 0.06, _fraction, "grounding oracle failure rate"),
    "world.verifier_reject_rate": (float, 0.0, _fraction, "eval verifier rejection rate"),
    "world.mosaic_group_size": (int, 4, lambda x: x >= 1, "records per mosaic clique"),
    "world.mosaic_scale_lo": (float, 0.5, _positive, "minimum mosaic paste scale"),
    "world.mosaic_scale_hi": (float, 1.0, _positive, "maximum mosaic paste scale"),

    "scene.px": (int, 64, lambda x: x >= 16, "scene resolution"),
    "scene.crop_px": (int, 32, lambda x: x >= 8, "query/region crop resolution"),

    "gates.tau_clip": (float, 0.30, _fraction, "alignment filter threshold"),
    "gates.tau_low": (float, 0.80, _fraction, "low similarity discard"),
    "gates.tau_high": (float, 0.97, _fraction, "near-duplicate discard"),
    "gates.max_distractors": (int, 4, _non_negative, "mosaic distractor cap"),
    "gates.max_retries": (int, 50, _positive, "placement rejection retries"),
    "gates.max_overlap_iou": (float, 0.05, _fraction, "pairwise placement IoU cap"),

    "split.train_pairs": (int, 512, _positive, "raw training pairs (mosaic doubles this)"),
    "split.eval_pairs": (int, 128, _positive, "eval-normal pairs (mosaic mirrors this)"),

    "enc.c_v": (int, 64, _positive, "visual width"),
    "enc.c_t": (int, 64, _positive, "text width"),
    "enc.c_u": (int, 32, _positive, "unified embedding width"),
    "enc.c_a": (int, 32, _positive, "alignment space width"),
    "enc.blocks": (int, 2, _positive, "transformer blocks per encoder"),
    "enc.heads": (int, 2, _positive, "attention heads"),
    "enc.patch": (int, 8, _positive, "patch size in pixels"),
    "enc.vocab": (int, 256, _positive, "token vocabulary size"),
    "enc.max_title": (int, 8, _positive, "maximum title length"),

    "fusion.slots": (int, 8, _positive, "learnable query slots"),
    "fusion.lambda_m": (float, 0.5, _fraction, "text-guided anchor weight"),
    "fusion.lambda_c": (float, 0.5, _fraction, "CLS anchor weight"),
    "fusion.tau_p": (float, 0.07, _positive, "token pooling temperature"),

    "loss.lambda_v2t": (float, 0.5, _non_negative, "region-text alignment weight"),
    "loss.lambda_i2v": (float, 0.1, _non_negative, "anchor alignment weight"),
    "loss.lambda_srd": (float, 1.0, _non_negative, "spatial-relational distillation weight"),
    "loss.lambda_h": (float, 0.1, _non_negative, "hard-negative penalty weight"),
    "loss.lambda_q2i": (float, 1.0, _non_negative, "query-item contrastive weight"),
    "loss.lambda_sdd": (float, 1.0, _non_negative, "similarity-distribution weight"),
    "loss.lambda_dual": (float, 1.0, _non_negative, "dual-encoder group weight"),
    "loss.lambda_item": (float, 1.0, _non_negative, "item-side group weight"),
    "loss.tau_v2t": (float, 0.07, _positive, "region-to-text temperature"),
    "loss.tau_t2v": (float, 0.07, _positive, "text-to-region temperature"),
    "loss.tau_i2v": (float, 0.07, _positive, "anchor InfoNCE temperature"),
    "loss.tau_q2i": (float, 0.07, _positive, "query-to-item temperature"),
    "loss.tau_i2q": (float, 0.07, _positive, "item-to-query temperature"),
    "loss.tau_stu": (float, 0.07, _positive, "student distribution temperature"),
    "loss.tau_tea": (float, 0.07, _positive, "teacher distribution temperature"),
    "loss.k_hard": (int, 1, _non_negative, "mismatched titles per record"),
    "loss.roi_h": (int, 4, _positive, "ROI align output height"),
    "loss.roi_w": (int, 4, _positive, "ROI align output width"),

    "train.batch": (int, 32, lambda x: x >= 2, "batch size"),
    "train.steps": (int, 2000, _positive, "optimization steps"),
    "train.lr": (float, 1e-3, _positive, "peak learning rate"),
    "train.weight_decay": (float, 0.01, _non_negative, "decoupled weight decay"),
    "train.warmup_frac": (float, 0.05, _fraction, "warmup fraction of total steps"),
    "train.toggles": (str, "SBRHDT", None, "enabled components (subset of SBRHDT)"),
    "train.data": (str, "mix", None, "training data: raw | mix"),
    "train.precision": (int, 32, lambda x: x in (32, 64), "float width for training"),
    "train.log_every": (int, 1, _positive, "log cadence in steps"),
    "train.ckpt_every": (int, 500, _positive, "checkpoint cadence in steps"),
    "train.teacher_steps": (int, 2000, _non_negative, "crop-teacher pretraining steps"),
    "train.teacher_lr": (float, 2e-3, _positive, "crop-teacher learning rate"),
}


@dataclass
class Config:
    values: dict

    def __getitem__(self, key: str):
        return self.values[key]

    def get(self, key: str, default=None):
        return self.values.get(key, default)

    # ------------------------------------------------------------------
    # typed views

    def world(self) -> WorldConfig:
        v = self.values
        return WorldConfig(
            seed=v["seed"], n_primary=v["world.primary_cats"],
            leaf_per_cat=v["world.leaf_per_cat"], n_items=v["world.items"],
            clicklog_rate=v["world.clicklog_rate"],
            identical_sub_rate=v["world.identical_sub_rate"],
            near_dup_rate=v["world.near_dup_rate"],
            misground_rate=v["world.misground_rate"],
            verifier_reject_rate=v["world.verifier_reject_rate"],
            scene_px=v["scene.px"], crop_px=v["scene.crop_px"],
            train_pairs=v["split.train_pairs"], eval_pairs=v["split.eval_pairs"],
            mosaic_group_size=v["world.mosaic_group_size"],
            mosaic_scale_lo=v["world.mosaic_scale_lo"],
            mosaic_scale_hi=v["world.mosaic_scale_hi"],
            vocab_size=v["enc.vocab"],
        )

    def gates(self) -> PipelineGates:
        v = self.values
        return PipelineGates(
            tau_clip=v["gates.tau_clip"], tau_low=v["gates.tau_low"],
            tau_high=v["gates.tau_high"], max_distractors=v["gates.max_distractors"],
            max_retries=v["gates.max_retries"], max_overlap_iou=v["gates.max_overlap_iou"])

    def model(self) -> ModelConfig:
        v = self.values
        return ModelConfig(
            c_v=v["enc.c_v"], c_t=v["enc.c_t"], c_u=v["enc.c_u"], c_a=v["enc.c_a"],
            blocks=v["enc.blocks"], heads=v["enc.heads"], patch_px=v["enc.patch"],
            scene_px=v["scene.px"], crop_px=v["scene.crop_px"],
            n_slots=v["fusion.slots"], vocab_size=v["enc.vocab"],
            max_title=v["enc.max_title"], lambda_m=v["fusion.lambda_m"],
            lambda_c=v["fusion.lambda_c"], tau_p=v["fusion.tau_p"])

    def loss_weights(self) -> LossWeights:
        v = self.values
        return LossWeights(
            lambda_v2t=v["loss.lambda_v2t"], lambda_i2v=v["loss.lambda_i2v"],
            lambda_srd=v["loss.lambda_srd"], lambda_h=v["loss.lambda_h"],
            lambda_q2i=v["loss.lambda_q2i"], lambda_sdd=v["loss.lambda_sdd"],
            lambda_dual=v["loss.lambda_dual"], lambda_item=v["loss.lambda_item"],
            tau_v2t=v["loss.tau_v2t"], tau_t2v=v["loss.tau_t2v"],
            tau_i2v=v["loss.tau_i2v"], tau_q2i=v["loss.tau_q2i"],
            tau_i2q=v["loss.tau_i2q"], tau_stu=v["loss.tau_stu"],
            tau_tea=v["loss.tau_tea"], k_hard=v["loss.k_hard"],
            roi_h=v["loss.roi_h"], roi_w=v["loss.roi_w"])

    def train(self, toggles: str | None = None, data_mix: str | None = None) -> TrainConfig:
        v = self.values
        return TrainConfig(
            batch=v["train.batch"], steps=v["train.steps"], lr=v["train.lr"],
            weight_decay=v["train.weight_decay"], warmup_frac=v["train.warmup_frac"],
            seed=v["seed"], weights=self.loss_weights(),
            toggles=LossToggles.from_string(
                toggles if toggles is not None else v["train.toggles"]),
            data_mix=data_mix if data_mix is not None else v["train.data"],
            precision=v["train.precision"], log_every=v["train.log_every"],
            ckpt_every=v["train.ckpt_every"], teacher_steps=v["train.teacher_steps"],
            teacher_lr=v["train.teacher_lr"])

    def dump(self) -> str:
        lines = [f"{key} = {self.values[key]}" for key in sorted(self.values)]
        return "\n".join(lines) + "\n"


def _parse_value(key: str, raw: str):
    parser, _, validator, _ = SCHEMA[key]
    try:
        value = parser(raw)
    except ValueError:
        raise ConfigError(f"cannot parse {key} = {raw!r} as {parser.__name__}") from None
    if validator is not None and not validator(value):
        raise ConfigError(f"value out of range for {key}: {raw!r}")
    return value


def _cross_validate(values: dict) -> None:
    if values["gates.tau_low"] >= values["gates.tau_high"]:
        raise ConfigError("gates.tau_low must be below gates.tau_high")
    if abs(values["fusion.lambda_m"] + values["fusion.lambda_c"] - 1.0) > 1e-9:
        raise ConfigError("fusion.lambda_m + fusion.lambda_c must equal 1")
    if values["scene.px"] % values["enc.patch"] or values["scene.crop_px"] % values["enc.patch"]:
        raise ConfigError("scene sizes must be divisible by enc.patch")
    if values["world.mosaic_scale_lo"] > values["world.mosaic_scale_hi"]:
        raise ConfigError("mosaic scale range inverted")
    if values["train.data"] not in ("raw", "mix"):
        raise ConfigError("train.data must be raw or mix")
    try:
        LossToggles.from_string(values["train.toggles"])
    except Exception as exc:
        raise ConfigError(str(exc)) from None


def parse_config(text: str) -> Config:
    values = {key: default for key, (_, default, _, _) in SCHEMA.items()}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, raw = (part.strip() for part in body.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, raw)
    _cross_validate(values)
    return Config(values=values)


def load_config(path: str | None = None) -> Config:
    """Load from an explicit path, else $TIGERFG_CONFIG, else all defaults."""
    if path is None:
        path = os.environ.get(ENV_VAR)
    if path is None:
        return parse_config("")
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())
