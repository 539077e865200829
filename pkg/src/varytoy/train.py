"""Stage runner: vocabulary generation, multi-task pretraining, and SFT."""

from __future__ import annotations

import enum
import json
import logging
import math
import time
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .data import MixtureSpec, TaskRecord, TemplateKind, check_token_budget, filter_corpora
from .data import render_parts, render_template, sample_mixture
from .model import Conversation, ConfigError, ModelConfig, MODEL_KINDS, VaryTiny, VaryToy, collate
from .model import VisionLanguageModel
from .optim import LrSchedule, OptimizerState, adamw_step, clip_grad_norm, cosine_lr
from .tensor import NumericError

log = logging.getLogger(__name__)

VISION_GROUPS = frozenset({"vocab", "clip"})


class Stage(str, enum.Enum):
    TINY_PLUS = "tiny_plus"
    PRETRAIN = "pretrain"
    SFT = "sft"


class TrainingAborted(RuntimeError):
    def __init__(self, step: int, reason: str):
        super().__init__(f"training aborted at step {step}: {reason}")
        self.step = step


class FrozenDriftError(AssertionError):
    """A frozen parameter group changed during a stage."""


# batch, epochs, initial lr, final lr
FULL_SCALE_PRESETS = {
    Stage.TINY_PLUS: (512, 2, 5e-5, 0.0),
    Stage.PRETRAIN: (512, 1, 5e-5, 0.0),
    Stage.SFT: (512, 1, 2e-5, 0.0),
}


def default_freeze(stage: Stage) -> frozenset[str]:
    return frozenset() if Stage(stage) is Stage.TINY_PLUS else VISION_GROUPS


@dataclass
class StageConfig:
    stage: Stage
    mixture: MixtureSpec
    batch_size: int = 8
    epochs: int = 1
    initial_lr: float = 5e-5
    final_lr: float = 0.0
    freeze: frozenset[str] | None = None
    seed: int = 0
    grad_accumulation: int = 4
    template: TemplateKind = TemplateKind.VICUNA_V1
    fix_template_typos: bool = False
    token_limit: int | None = None
    max_steps: int | None = None
    clip_norm: float = 1.0
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.95
    eval_every: int = 0

    def __post_init__(self):
        self.stage = Stage(self.stage)
        self.template = TemplateKind(self.template)
        if self.freeze is None:
            self.freeze = default_freeze(self.stage)
        self.freeze = frozenset(self.freeze)
        if self.freeze != default_freeze(self.stage):
            want = sorted(default_freeze(self.stage)) or "nothing"
            raise ConfigError(f"stage {self.stage.value} must freeze {want}, got {sorted(self.freeze)}")
        for name in ("batch_size", "epochs", "grad_accumulation"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps must be positive when set")

    @classmethod
    def full_scale(cls, stage: Stage, mixture: MixtureSpec, **overrides) -> "StageConfig":
        batch, epochs, lr0, lr1 = FULL_SCALE_PRESETS[Stage(stage)]
        kw = dict(batch_size=batch, epochs=epochs, initial_lr=lr0, final_lr=lr1, grad_accumulation=1)
        kw.update(overrides)
        return cls(Stage(stage), mixture, **kw)


@dataclass
class TrainReport:
    stage: str
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    wall_time: float = 0.0
    checkpoint_path: str | None = None
    eval_snapshots: list[dict] = field(default_factory=list)
    frozen_digests: dict[str, str] = field(default_factory=dict)

    def write_metrics(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for step, (loss, lr) in enumerate(zip(self.losses, self.lrs)):
                fh.write(json.dumps({"step": step, "loss": loss, "lr": lr}) + "\n")


def group_digests(model: VisionLanguageModel, groups) -> dict[str, str]:
    state = model.state_dict()
    return {g: ckpt_io.digest(state, g + ".") for g in sorted(groups)}


def to_conversation(record: TaskRecord, template, fix_template_typos: bool = False) -> Conversation:
    head, tail = render_parts(record, template, fix_template_typos)
    return Conversation(head, tail)


def budget_filter(model: VisionLanguageModel, cfg: StageConfig) -> Callable[[TaskRecord], bool]:
    limit = min(cfg.token_limit or model.cfg.max_seq_len, model.cfg.max_seq_len)

    def accept(rec: TaskRecord) -> bool:
        text = render_template(rec, cfg.template, cfg.fix_template_typos)
        return check_token_budget(text, model.tokenizer, model.cfg.n_img_tokens, limit).fits

    return accept


def planned_steps(cfg: StageConfig, usable: Mapping[str, Sequence[TaskRecord]]) -> int:
    epoch_records = sum(len(v) for v in usable.values())
    per_step = cfg.batch_size * cfg.grad_accumulation
    steps = cfg.epochs * math.ceil(epoch_records / per_step)
    return min(steps, cfg.max_steps) if cfg.max_steps else steps


def run_stage(
    cfg: StageConfig,
    model: VisionLanguageModel,
    corpora: Mapping[str, Sequence[TaskRecord]],
    checkpoint_path: str | Path | None = None,
    eval_fn: Callable[[VisionLanguageModel, int], dict] | None = None,
) -> TrainReport:
    """Train ``model`` in place over the seeded mixture stream.

    One epoch is as many records as the usable corpora hold in total.
    """
    t0 = time.perf_counter()
    accept = budget_filter(model, cfg)
    usable = filter_corpora(cfg.mixture, corpora, accept)
    total = planned_steps(cfg, usable)
    if total < 1:
        raise ConfigError("stage would take zero optimizer steps")

    model.freeze(cfg.freeze)
    model.template = cfg.template
    model.fix_template_typos = cfg.fix_template_typos
    before = group_digests(model, cfg.freeze)
    params = model.trainable_parameters()
    state = OptimizerState(cfg.beta1, cfg.beta2, weight_decay=cfg.weight_decay)
    schedule = LrSchedule(cfg.initial_lr, cfg.final_lr, max(total - 1, 1))
    stream = sample_mixture(cfg.mixture, usable)
    report = TrainReport(cfg.stage.value)

    for step in range(total):
        lr = cosine_lr(schedule, step)
        model.zero_grad()
        step_loss = 0.0
        for _ in range(cfg.grad_accumulation):
            recs = [next(stream) for _ in range(cfg.batch_size)]
            seqs = [
                model.encode(to_conversation(r, cfg.template, cfg.fix_template_typos), r.image is not None)
                for r in recs
            ]
            batch = collate(seqs)
            imgs = [r.image for r in recs if r.image is not None]
            keys = [r.meta.get("key") for r in recs if r.image is not None]
            try:
                loss = model.loss(batch, imgs, keys)
                (loss * (1.0 / cfg.grad_accumulation)).backward()
            except NumericError as exc:
                raise TrainingAborted(step, str(exc)) from exc
            step_loss += float(loss.data) / cfg.grad_accumulation
        if not math.isfinite(step_loss):
            raise TrainingAborted(step, "non-finite loss")
        clip_grad_norm(params, cfg.clip_norm)
        adamw_step(params, state, lr)
        report.losses.append(step_loss)
        report.lrs.append(lr)
        if step % 50 == 0 or step == total - 1:
            log.info("%s step %d/%d loss %.4f lr %.3g", cfg.stage.value, step, total, step_loss, lr)
        if eval_fn is not None and cfg.eval_every and (step + 1) % cfg.eval_every == 0:
            report.eval_snapshots.append({"step": step, **eval_fn(model, step)})

    after = group_digests(model, cfg.freeze)
    if after != before:
        drifted = sorted(g for g in before if before[g] != after[g])
        raise FrozenDriftError(f"frozen groups changed during {cfg.stage.value}: {drifted}")
    report.frozen_digests = after
    model.zero_grad()
    if checkpoint_path is not None:
        report.checkpoint_path = str(save_model(checkpoint_path, model, cfg.stage.value))
    report.wall_time = time.perf_counter() - t0
    return report


# ---------------------------------------------------------------------------
# persistence and composition
# ---------------------------------------------------------------------------


def save_model(path, model: VisionLanguageModel, stage: str) -> Path:
    extra = {
        "template": TemplateKind(model.template).value,
        "fix_template_typos": bool(getattr(model, "fix_template_typos", False)),
    }
    state = {k: v.copy() for k, v in model.state_dict().items()}
    return ckpt_io.save(path, ckpt_io.Checkpoint(model.kind, stage, model.cfg.to_dict(), state, extra))


def load_model(path) -> VisionLanguageModel:
    ck = ckpt_io.load(path)
    if ck.model_kind not in MODEL_KINDS:
        raise ConfigError(f"unknown model kind {ck.model_kind!r} in {path}")
    model = MODEL_KINDS[ck.model_kind](ModelConfig.from_dict(ck.config))
    init_from_checkpoint(model, ck, strict=True)
    model.template = TemplateKind(ck.extra.get("template", TemplateKind.VICUNA_V1.value))
    model.fix_template_typos = bool(ck.extra.get("fix_template_typos", False))
    return model


@dataclass
class LoadReport:
    loaded: list[str]
    skipped: list[str]  # present in the checkpoint, not used
    untouched: list[str]  # present in the model, not in the checkpoint


def init_from_checkpoint(model: VisionLanguageModel, ckpt: ckpt_io.Checkpoint, strict: bool = True) -> LoadReport:
    """Copy parameters by name. Strict mode requires identical name sets and shapes."""
    own = dict(model.named_parameters())
    theirs = ckpt.params
    mismatched = sorted(n for n in own.keys() & theirs.keys() if own[n].shape != theirs[n].shape)
    if strict:
        missing = sorted(own.keys() - theirs.keys())
        unexpected = sorted(theirs.keys() - own.keys())
        if missing or unexpected or mismatched:
            raise ConfigError(
                "strict checkpoint load failed: "
                f"missing={missing} unexpected={unexpected} shape_mismatch={mismatched}"
            )
    loaded = []
    for name in own:
        if name in theirs and name not in mismatched:
            own[name].data = theirs[name].astype(own[name].data.dtype, copy=True)
            loaded.append(name)
    model._feature_cache.clear()
    return LoadReport(
        loaded,
        sorted(set(theirs) - set(loaded)),
        sorted(set(own) - set(loaded)),
    )


GEOMETRY_KEYS = ("high_res", "n_img_tokens", "c_branch", "vocab_enc_dim", "vocab_enc_layers", "vocab_enc_heads")


def _subset(params: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {k: v for k, v in params.items() if k.startswith(prefix)}


def build_vary_toy(
    vocab_ckpt: ckpt_io.Checkpoint,
    clip_ckpt: ckpt_io.Checkpoint | None,
    lm_cfg: ModelConfig,
) -> VaryToy:
    """Compose a two-branch model: stage-1 vocabulary branch, a loaded or
    fresh crop branch, and new input-embedding layers and LM."""
    vc = vocab_ckpt.config
    diffs = [k for k in GEOMETRY_KEYS if vc.get(k) != getattr(lm_cfg, k)]
    if diffs:
        raise ConfigError(
            f"vocabulary checkpoint geometry differs on {diffs}: "
            f"checkpoint={ {k: vc.get(k) for k in GEOMETRY_KEYS} } "
            f"target={ {k: getattr(lm_cfg, k) for k in GEOMETRY_KEYS} }"
        )
    model = VaryToy(lm_cfg)
    vocab_params = _subset(vocab_ckpt.params, "vocab.")
    if not vocab_params:
        raise ConfigError("vocabulary checkpoint holds no vocab.* parameters")
    parts = {**vocab_params}
    if clip_ckpt is not None:
        clip_params = _subset(clip_ckpt.params, "clip.")
        if not clip_params:
            raise ConfigError("crop-branch checkpoint holds no clip.* parameters")
        parts.update(clip_params)
    rep = init_from_checkpoint(
        model, ckpt_io.Checkpoint(vocab_ckpt.model_kind, vocab_ckpt.stage, vc, parts), strict=False
    )
    if rep.skipped:
        raise ConfigError(f"checkpoint tensors do not fit the target model: {rep.skipped}")
    return model


def new_vary_tiny(cfg: ModelConfig) -> VaryTiny:
    return VaryTiny(cfg)
