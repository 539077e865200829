"""Command-line entry point.

Exit codes: 0 success, 2 usage, 3 configuration, 4 I/O, 5 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import synth
from .config import RunConfig, load_config
from .data import MixtureConfigError, TaskRecord, TemplateFormatError, denormalize_box, parse_box_text
from .data import prompt_requires_image, read_manifest, render_prompt, write_manifest
from .images import ImageError, read_ppm
from .metrics import METRICS, UNIMPLEMENTED, MetricError, eval_dataset, parse_prediction_box
from .model import ConfigError, FormatError, SequenceLengthError
from .tensor import NumericError
from .train import FrozenDriftError, Stage, TrainingAborted, build_vary_toy, group_digests, load_model
from .train import new_vary_tiny, run_stage

log = logging.getLogger("varytoy")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4, 5

GEN_KINDS = (*synth.CORPUS_KINDS, "rec-eval")
VOCAB_CKPT = "vocab.ckpt"
TOY_CKPT = "toy.ckpt"
SFT_CKPT = "sft.ckpt"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def corpus_path(cfg: RunConfig, kind: str, heldout: bool = False) -> Path:
    return cfg.corpus_dir / (f"{kind}.heldout" if heldout else kind)


def ensure_writable(directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    probe = directory / ".write-probe"
    probe.write_bytes(b"")
    probe.unlink()


def load_corpora(cfg: RunConfig, names) -> dict[str, list[TaskRecord]]:
    out = {}
    for name in names:
        path = corpus_path(cfg, name)
        if not (path / "manifest.jsonl").is_file():
            raise ConfigError(f"corpus {name!r} not found at {path}; run `varytoy gen-data --kind {name}` first")
        out[name] = read_manifest(path)
    return out


def finish_stage(cfg: RunConfig, name: str, report, stage: Stage) -> int:
    cfg.report_dir.mkdir(parents=True, exist_ok=True)
    report.write_metrics(cfg.report_dir / f"{name}.metrics.jsonl")
    summary = {
        "stage": stage.value,
        "steps": len(report.losses),
        "final_loss": report.losses[-1],
        "checkpoint": report.checkpoint_path,
        "frozen_digests": report.frozen_digests,
    }
    (cfg.report_dir / f"{name}.summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    print(f"{name}: {len(report.losses)} steps, final loss {report.losses[-1]:.4f}, {report.wall_time:.1f}s")
    print(f"checkpoint: {report.checkpoint_path}")
    if not math.isfinite(report.losses[-1]):
        print("final loss is not finite", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def print_boxes(text: str, width: int, height: int) -> None:
    try:
        boxes = parse_box_text(text)
    except ValueError:
        pred = parse_prediction_box(text, width, height)
        if pred is not None:
            print(f"box: ({pred.x1:g}, {pred.y1:g}, {pred.x2:g}, {pred.y2:g})")
        return
    for name, nb in boxes:
        b = denormalize_box(nb, width, height)
        print(f"box: {name} ({b.x1:g}, {b.y1:g}, {b.x2:g}, {b.y2:g})")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig, args) -> int:
    kinds = list(cfg.data) if args.kind == "all" else [args.kind]
    if args.kind == "all" and args.heldout:
        kinds = [k for k in kinds if cfg.data[k] > 0]
    dirs = {k: corpus_path(cfg, k, args.heldout or k == "rec-eval") for k in kinds}
    for d in dirs.values():
        ensure_writable(d)
    counts = Counter()
    for kind in kinds:
        count = args.count if args.count is not None else cfg.data.get(kind, 0)
        if count <= 0:
            if args.kind == "all":
                continue
            raise UsageError(f"--count must be positive for {kind!r}")
        if kind == "rec-eval":
            records = synth.build_rec_eval(count, cfg.seed)
        else:
            start = synth.HELDOUT_START if args.heldout else 0
            records = synth.build_corpus(kind, count, cfg.seed, start=start)
        write_manifest(dirs[kind], records)
        for r in records:
            counts[f"{kind}/{r.kind.value}"] += 1
    for key in sorted(counts):
        print(f"{key}: {counts[key]}")
    return EXIT_OK


def cmd_train_vocab(cfg: RunConfig, args) -> int:
    stage = cfg.stage_config(Stage.TINY_PLUS)
    corpora = load_corpora(cfg, [n for n, _ in stage.mixture.active])
    model = new_vary_tiny(cfg.model)
    path = cfg.checkpoint_dir / VOCAB_CKPT
    report = run_stage(stage, model, corpora, checkpoint_path=path)
    return finish_stage(cfg, "train-vocab", report, Stage.TINY_PLUS)


def cmd_train_toy(cfg: RunConfig, args) -> int:
    vocab_path = Path(args.vocab_checkpoint or cfg.checkpoint_dir / VOCAB_CKPT)
    if not vocab_path.is_file():
        raise ConfigError(f"stage-1 checkpoint {vocab_path} not found; run `varytoy train-vocab` first")
    clip = ckpt_io.load(args.clip_checkpoint) if args.clip_checkpoint else None
    model = build_vary_toy(ckpt_io.load(vocab_path), clip, cfg.model)
    stage = cfg.stage_config(Stage.PRETRAIN)
    corpora = load_corpora(cfg, [n for n, _ in stage.mixture.active])
    model.freeze(stage.freeze)
    before = group_digests(model, stage.freeze)
    report = run_stage(stage, model, corpora, checkpoint_path=cfg.checkpoint_dir / TOY_CKPT)
    for group in sorted(before):
        status = "PASS" if report.frozen_digests.get(group) == before[group] else "FAIL"
        print(f"frozen {group} checksum {before[group][:16]} {status}")
    return finish_stage(cfg, "train-toy", report, Stage.PRETRAIN)


def cmd_sft(cfg: RunConfig, args) -> int:
    src = Path(args.checkpoint or cfg.checkpoint_dir / TOY_CKPT)
    if not src.is_file():
        raise ConfigError(f"pretrained checkpoint {src} not found; run `varytoy train-toy` first")
    model = load_model(src)
    stage = cfg.stage_config(Stage.SFT)
    corpora = load_corpora(cfg, [n for n, _ in stage.mixture.active])
    report = run_stage(stage, model, corpora, checkpoint_path=cfg.checkpoint_dir / SFT_CKPT)
    return finish_stage(cfg, "sft", report, Stage.SFT)


def _default_checkpoint(cfg: RunConfig) -> Path:
    for name in (SFT_CKPT, TOY_CKPT, VOCAB_CKPT):
        if (cfg.checkpoint_dir / name).is_file():
            return cfg.checkpoint_dir / name
    raise ConfigError(f"no checkpoint in {cfg.checkpoint_dir}; pass --checkpoint")


def cmd_eval(cfg: RunConfig, args) -> int:
    if args.metric in UNIMPLEMENTED or args.metric not in METRICS:
        valid = ", ".join(m for m in METRICS if m not in UNIMPLEMENTED)
        raise UsageError(f"unknown or unimplemented metric {args.metric!r}; valid: {valid}")
    model = load_model(Path(args.checkpoint) if args.checkpoint else _default_checkpoint(cfg))
    data_dir = Path(args.dataset)
    if not (data_dir / "manifest.jsonl").is_file():
        data_dir = cfg.corpus_dir / args.dataset
    records = read_manifest(data_dir)
    if args.limit:
        records = records[: args.limit]
    name = args.name or data_dir.name
    report = eval_dataset(model, records, args.metric, dataset=name, max_new=args.max_new)
    out = report.write(cfg.report_dir)
    print(report.table())
    print(f"report: {out}")
    return EXIT_OK


def cmd_infer(cfg: RunConfig, args) -> int:
    image = read_ppm(args.image) if args.image else None
    if image is None and prompt_requires_image(args.prompt):
        raise FormatError("this prompt needs an image; pass --image")
    model = load_model(Path(args.checkpoint) if args.checkpoint else _default_checkpoint(cfg))
    text = model.generate(render_prompt(args.prompt, image is not None, model.template, model.fix_template_typos), image, args.max_new)
    print(text)
    if image is not None and args.prompt.startswith("Detect "):
        print_boxes(text, image.shape[1], image.shape[0])
    return EXIT_OK


def cmd_inspect(cfg: RunConfig | None, args) -> int:
    ck = ckpt_io.load(args.path)
    groups = Counter()
    for name, arr in ck.params.items():
        groups[name.split(".")[0]] += arr.size
    print(f"kind: {ck.model_kind}")
    print(f"stage: {ck.stage}")
    print(f"config: {json.dumps(ck.config, sort_keys=True)}")
    print(f"extra: {json.dumps(ck.extra, sort_keys=True)}")
    print(f"tensors: {len(ck.params)}  parameters: {sum(groups.values())}")
    for g in sorted(groups):
        print(f"  {g:<8} {groups[g]:>10}  sha256 {ckpt_io.digest(ck.params, g + '.')[:16]}")
    bad = [n for n, a in ck.params.items() if not np.isfinite(a).all()]
    if bad:
        print(f"non-finite tensors: {bad}")
    return EXIT_OK


def cmd_corpus_describe(cfg: RunConfig | None, args) -> int:
    records = read_manifest(args.path)
    kinds = Counter(r.kind.value for r in records)
    lengths = [len(r.response) for r in records]
    print(f"records: {len(records)}")
    for k in sorted(kinds):
        print(f"  {k}: {kinds[k]}")
    print(f"with image: {sum(r.image is not None for r in records)}")
    print(f"response chars: mean {np.mean(lengths):.1f} max {max(lengths)}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a config value")
    common.add_argument("--seed", type=int, help="global seed (required here or in the config)")
    common.add_argument("--output-dir", help="run directory (default from config)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="varytoy", description="Train and evaluate a desk-scale vision-language model.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic corpus manifest")
    g.add_argument("--kind", required=True, choices=[*GEN_KINDS, "all"])
    g.add_argument("--count", type=int, help="records to generate (default from [data])")
    g.add_argument("--heldout", action="store_true", help="draw from the held-out index range")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train-vocab", parents=[common], help="stage 1: train the vision vocabulary")
    t.set_defaults(func=cmd_train_vocab)

    t = sub.add_parser("train-toy", parents=[common], help="stage 2: multi-task pretraining with frozen branches")
    t.add_argument("--vocab-checkpoint", help="stage-1 checkpoint (default: <checkpoint_dir>/vocab.ckpt)")
    t.add_argument("--clip-checkpoint", help="checkpoint providing clip.* weights; fresh if omitted")
    t.set_defaults(func=cmd_train_toy)

    t = sub.add_parser("sft", parents=[common], help="stage 3: supervised fine-tuning")
    t.add_argument("--checkpoint", help="pretrained checkpoint (default: <checkpoint_dir>/toy.ckpt)")
    t.set_defaults(func=cmd_sft)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a manifest")
    e.add_argument("--dataset", required=True, help="manifest directory or corpus name")
    e.add_argument("--metric", required=True, help=f"one of {', '.join(m for m in METRICS if m not in UNIMPLEMENTED)}")
    e.add_argument("--checkpoint")
    e.add_argument("--name", help="dataset id used in the report")
    e.add_argument("--limit", type=int, default=0)
    e.add_argument("--max-new", type=int, default=256)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", parents=[common], help="answer one prompt")
    i.add_argument("--prompt", required=True)
    i.add_argument("--image", help="PPM image")
    i.add_argument("--checkpoint")
    i.add_argument("--max-new", type=int, default=256)
    i.set_defaults(func=cmd_infer)

    c = sub.add_parser("inspect-checkpoint", help="print checkpoint header and group checksums")
    c.add_argument("path")
    c.set_defaults(func=cmd_inspect, needs_config=False)

    cp = sub.add_parser("corpus", help="corpus utilities")
    csub = cp.add_subparsers(dest="corpus_command", required=True)
    d = csub.add_parser("describe", help="summarize a manifest directory")
    d.add_argument("path")
    d.set_defaults(func=cmd_corpus_describe, needs_config=False)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = None
        if getattr(args, "needs_config", True):
            overrides = list(args.set)
            if args.output_dir:
                overrides.append(f"run.output_dir={args.output_dir}")
            cfg = load_config(args.config, overrides, args.seed)
            cfg.output_dir.mkdir(parents=True, exist_ok=True)
            cfg.echo()
        return args.func(cfg, args)
    except (UsageError, MetricError, TemplateFormatError, FormatError, SequenceLengthError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, MixtureConfigError, ckpt_io.CheckpointError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingAborted, NumericError, FrozenDriftError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ImageError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
