"""Run configuration: an INI file with one section per stage.

Example::

    [run]
    seed = 0
    output_dir = runs/toy
    template = vicuna_v1

    [model]
    n_layers = 2

    [data]
    pages = 200
    scenes = 400

    [tiny_plus]
    mixture = pages:1
    max_steps = 1000

Values given on the command line (``--set section.key=value``) override the
file. The merged result is echoed as ``effective.ini`` into the output
directory so a run can be replayed with ``--config effective.ini``.

Seeds: the global ``seed`` drives everything. Corpus records use
``(seed, corpus kind, record index)``; a stage's mixture stream uses
``crc32(stage name) ^ seed``.
"""

from __future__ import annotations

import configparser
import io
import os
import zlib
from dataclasses import dataclass, field
from pathlib import Path

from .data import MixtureConfigError, MixtureSpec, TemplateKind
from .model import ConfigError, ModelConfig
from .synth import CORPUS_KINDS
from .train import Stage, StageConfig

OUTPUT_DIR_ENV = "VARYTOY_OUTPUT_DIR"

STAGE_KEYS = {
    "mixture": str,
    "batch_size": int,
    "epochs": int,
    "initial_lr": float,
    "final_lr": float,
    "grad_accumulation": int,
    "max_steps": int,
    "clip_norm": float,
    "weight_decay": float,
    "token_limit": int,
}

DEFAULT_STAGES: dict[Stage, dict[str, str]] = {
    Stage.TINY_PLUS: {
        "mixture": "pages:1",
        "batch_size": "16",
        "epochs": "1000",
        "initial_lr": "3e-3",
        "final_lr": "0",
        "grad_accumulation": "1",
        "max_steps": "1000",
        "weight_decay": "0.1",
    },
    Stage.PRETRAIN: {
        "mixture": "rec:2, scenes:1, captions:0.25, vqa:0.25, nlp:0.25",
        "batch_size": "16",
        "epochs": "1000",
        "initial_lr": "2e-3",
        "final_lr": "0",
        "grad_accumulation": "1",
        "max_steps": "1200",
    },
    Stage.SFT: {
        "mixture": "sft:1, vqa:1, captions:0.5, nlp:0.25",
        "batch_size": "16",
        "epochs": "1",
        "initial_lr": "1e-3",
        "final_lr": "0",
        "grad_accumulation": "1",
        "max_steps": "200",
    },
}

DEFAULT_DATA = {
    "pages": "200",
    "markdown": "100",
    "scenes": "400",
    "crowded": "50",
    "rec": "400",
    "captions": "200",
    "vqa": "200",
    "sft": "200",
    "nlp": "200",
}


def stage_seed(seed: int, stage: Stage | str) -> int:
    return zlib.crc32(Stage(stage).value.encode()) ^ int(seed)


def parse_mixture(text: str, seed: int) -> MixtureSpec:
    entries = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        name, sep, weight = part.partition(":")
        try:
            entries.append((name.strip(), float(weight) if sep else 1.0))
        except ValueError:
            raise ConfigError(f"bad mixture entry {part!r}; expected name:weight") from None
    if not entries:
        raise ConfigError("empty mixture")
    try:
        return MixtureSpec(tuple(entries), seed)
    except MixtureConfigError as exc:
        raise ConfigError(str(exc)) from exc


def format_mixture(spec: MixtureSpec) -> str:
    return ", ".join(f"{n}:{w:g}" for n, w in spec.entries)


def _as_bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {value!r}")


@dataclass
class RunConfig:
    seed: int
    output_dir: Path
    corpus_dir: Path
    checkpoint_dir: Path
    report_dir: Path
    template: TemplateKind = TemplateKind.VICUNA_V1
    fix_template_typos: bool = False
    model: ModelConfig = field(default_factory=ModelConfig)
    data: dict[str, int] = field(default_factory=dict)
    stages: dict[Stage, dict[str, str]] = field(default_factory=dict)

    def stage_config(self, stage: Stage | str) -> StageConfig:
        stage = Stage(stage)
        raw = self.stages[stage]
        kw = {}
        for key, value in raw.items():
            if key not in STAGE_KEYS:
                raise ConfigError(f"[{stage.value}] unknown key {key!r}")
            if key == "mixture":
                continue
            try:
                kw[key] = STAGE_KEYS[key](value)
            except ValueError:
                raise ConfigError(f"[{stage.value}] {key} = {value!r} is not a valid {STAGE_KEYS[key].__name__}") from None
        mixture = parse_mixture(raw["mixture"], stage_seed(self.seed, stage))
        unknown = [n for n, _ in mixture.entries if n not in CORPUS_KINDS]
        if unknown:
            raise ConfigError(f"[{stage.value}] unknown corpora {unknown}; choose from {list(CORPUS_KINDS)}")
        return StageConfig(
            stage,
            mixture,
            seed=self.seed,
            template=self.template,
            fix_template_typos=self.fix_template_typos,
            **kw,
        )

    def to_parser(self) -> configparser.ConfigParser:
        cp = configparser.ConfigParser(interpolation=None)
        cp["run"] = {
            "seed": str(self.seed),
            "output_dir": str(self.output_dir),
            "corpus_dir": str(self.corpus_dir),
            "checkpoint_dir": str(self.checkpoint_dir),
            "report_dir": str(self.report_dir),
            "template": self.template.value,
            "fix_template_typos": str(self.fix_template_typos).lower(),
        }
        cp["model"] = {k: str(v) for k, v in self.model.to_dict().items()}
        cp["data"] = {k: str(v) for k, v in self.data.items()}
        for stage in Stage:
            cp[stage.value] = dict(self.stages[stage])
        return cp

    def dumps(self) -> str:
        buf = io.StringIO()
        self.to_parser().write(buf)
        return buf.getvalue()

    def echo(self, directory: Path | None = None) -> Path:
        directory = Path(directory or self.output_dir)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / "effective.ini"
        path.write_text(self.dumps(), encoding="utf-8")
        return path


def apply_overrides(cp: configparser.ConfigParser, overrides: list[str]) -> None:
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or not name:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        if not cp.has_section(section):
            cp.add_section(section)
        cp[section][name.strip()] = value.strip()


def load_config(path: str | Path | None = None, overrides: list[str] = (), seed: int | None = None) -> RunConfig:
    """Merge defaults, the INI file, ``overrides`` and ``seed`` (highest wins)."""
    cp = configparser.ConfigParser(interpolation=None)
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        try:
            cp.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    apply_overrides(cp, list(overrides))
    if seed is not None:
        if not cp.has_section("run"):
            cp.add_section("run")
        cp["run"]["seed"] = str(seed)

    known = {"run", "model", "data", *(s.value for s in Stage)}
    extra = set(cp.sections()) - known
    if extra:
        raise ConfigError(f"unknown config sections {sorted(extra)}")

    run = dict(cp["run"]) if cp.has_section("run") else {}
    if "seed" not in run:
        raise ConfigError("a seed is required ([run] seed or --seed)")
    try:
        seed_value = int(run.pop("seed"))
    except ValueError:
        raise ConfigError("seed must be an integer") from None
    out = Path(os.environ.get(OUTPUT_DIR_ENV) or run.pop("output_dir", "runs/default"))
    run.pop("output_dir", None)
    corpus = Path(run.pop("corpus_dir", out / "corpus"))
    ckpts = Path(run.pop("checkpoint_dir", out / "checkpoints"))
    reports = Path(run.pop("report_dir", out / "reports"))
    try:
        template = TemplateKind(run.pop("template", TemplateKind.VICUNA_V1.value))
    except ValueError:
        raise ConfigError(f"unknown template; choose from {[t.value for t in TemplateKind]}") from None
    fix = _as_bool(run.pop("fix_template_typos", "false"))
    if run:
        raise ConfigError(f"[run] unknown keys {sorted(run)}")

    model_kw = dict(cp["model"]) if cp.has_section("model") else {}
    try:
        model = ModelConfig.from_dict({"seed": seed_value, **model_kw})
    except ValueError as exc:
        raise ConfigError(f"[model] {exc}") from exc

    data = dict(DEFAULT_DATA)
    if cp.has_section("data"):
        data.update(cp["data"])
    bad = set(data) - set(CORPUS_KINDS)
    if bad:
        raise ConfigError(f"[data] unknown corpora {sorted(bad)}")
    try:
        counts = {k: int(v) for k, v in data.items()}
    except ValueError as exc:
        raise ConfigError(f"[data] {exc}") from exc

    stages = {}
    for stage in Stage:
        merged = dict(DEFAULT_STAGES[stage])
        if cp.has_section(stage.value):
            merged.update(cp[stage.value])
        stages[stage] = merged

    cfg = RunConfig(seed_value, out, corpus, ckpts, reports, template, fix, model, counts, stages)
    for stage in Stage:
        cfg.stage_config(stage)  # validate every stage up front
    return cfg
