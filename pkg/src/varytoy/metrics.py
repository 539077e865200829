"""Evaluation metrics and dataset-level reports.

Conventions (the metric names alone leave these open):

* ANLS: lower-cased, whitespace-trimmed strings; normalised Levenshtein
  distance ``NL``; a gold scores ``1 - NL`` when ``NL < 0.5`` and 0 otherwise;
  the best gold counts.
* Relaxed accuracy: numeric answers within 5% of the gold (inclusive, exact
  match when the gold is 0), otherwise case-insensitive trimmed equality.
* acc@0.5: a prediction is correct when IoU with the gold box is >= 0.5.
  Unparseable predictions score 0 and are counted as failures.
"""

from __future__ import annotations

import json
import math
import re
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .data import BBox, BoxParseError, NormBox, TaskKind, TaskRecord, TemplateKind
from .data import denormalize_box, parse_box_text, render_prompt
from .model import ConfigError

ANLS_THRESHOLD = 0.5
RELAXED_TOLERANCE = 0.05
IOU_THRESHOLD = 0.5

METRICS = ("anls", "relaxed_accuracy", "iou_acc", "char_accuracy", "gpt4_score")
UNIMPLEMENTED = {"gpt4_score"}


class MetricError(ValueError):
    pass


def levenshtein(a: str, b: str) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def _nl(pred: str, gold: str) -> float:
    p, g = pred.strip().lower(), gold.strip().lower()
    longest = max(len(p), len(g))
    if longest == 0:
        return 0.0
    return levenshtein(p, g) / longest


def anls(prediction: str, golds: Sequence[str], threshold: float = ANLS_THRESHOLD) -> float:
    if isinstance(golds, str):
        golds = [golds]
    if not golds:
        raise MetricError("ANLS needs at least one gold answer")
    best = 0.0
    for g in golds:
        nl = _nl(prediction, g)
        best = max(best, 1.0 - nl if nl < threshold else 0.0)
    return best


def _as_number(s: str) -> float | None:
    s = s.strip()
    if s.endswith("%"):
        s = s[:-1]
    try:
        v = float(s)
    except ValueError:
        return None
    return v if math.isfinite(v) else None


def relaxed_accuracy(prediction: str, gold: str, tol: float = RELAXED_TOLERANCE) -> bool:
    p, g = _as_number(prediction), _as_number(gold)
    if p is not None and g is not None:
        if g == 0:
            return p == 0
        return abs(p - g) <= tol * abs(g)
    return prediction.strip().lower() == gold.strip().lower()


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter
    return inter / union


_BOX_ANYWHERE = re.compile(r"([^:\n]+): \[(\d{1,4}), (\d{1,4}), (\d{1,4}), (\d{1,4})\]")


def parse_prediction_box(text: str, width: float, height: float) -> BBox | None:
    """First well-formed box in ``text``, mapped back to pixels; None if absent."""
    for m in _BOX_ANYWHERE.finditer(text):
        try:
            nb = NormBox(*(int(v) for v in m.groups()[1:]))
            return denormalize_box(nb, width, height)
        except ValueError:
            continue
    return None


def char_accuracy(prediction: str, gold: str) -> float:
    """1 - edit distance / gold length, floored at 0."""
    if not gold:
        return 1.0 if not prediction else 0.0
    return max(0.0, 1.0 - levenshtein(prediction, gold) / len(gold))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    dataset: str
    metric: str
    scores: list[float]
    aggregate: float
    sample_count: int
    failure_count: int
    predictions: list[str] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)

    def table(self) -> str:
        rows = [
            ("dataset", self.dataset),
            ("metric", self.metric),
            ("samples", str(self.sample_count)),
            ("failures", str(self.failure_count)),
            ("aggregate", f"{self.aggregate:.4f}"),
            *((k, f"{v:.4f}" if isinstance(v, float) else str(v)) for k, v in sorted(self.extra.items())),
        ]
        w = max(len(k) for k, _ in rows)
        return "\n".join(f"{k.ljust(w)}  {v}" for k, v in rows)

    def write(self, directory: str | Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        stem = f"{self.dataset}.{self.metric}"
        (directory / f"{stem}.json").write_text(self.to_json() + "\n", encoding="utf-8")
        (directory / f"{stem}.txt").write_text(self.table() + "\n", encoding="utf-8")
        with open(directory / f"{stem}.predictions.jsonl", "w", encoding="utf-8") as fh:
            for i, (pred, score) in enumerate(zip(self.predictions, self.scores)):
                fh.write(json.dumps({"index": i, "prediction": pred, "score": score}) + "\n")
        return directory / f"{stem}.json"


def score_sample(metric: str, prediction: str, record: TaskRecord) -> tuple[float, bool, float | None]:
    """(score, parse_failed, iou) for one prediction."""
    if metric == "anls":
        golds = record.meta.get("answers") or [record.response]
        return anls(prediction, golds), False, None
    if metric == "relaxed_accuracy":
        return float(relaxed_accuracy(prediction, record.response)), False, None
    if metric == "char_accuracy":
        return char_accuracy(prediction, record.response), False, None
    if metric == "iou_acc":
        h, w = record.image.shape[:2]
        gold_name, gold_nb = parse_box_text(record.response)[0]
        gold = denormalize_box(gold_nb, w, h)
        pred = parse_prediction_box(prediction, w, h)
        if pred is None:
            return 0.0, True, 0.0
        v = iou(pred, gold)
        return float(v >= IOU_THRESHOLD), False, v
    raise MetricError(f"unknown metric {metric!r}")


def check_metric(metric: str) -> None:
    if metric in UNIMPLEMENTED:
        raise MetricError(f"metric {metric!r} is reserved but not implemented")
    if metric not in METRICS:
        raise MetricError(f"unknown metric {metric!r}; valid: {', '.join(m for m in METRICS if m not in UNIMPLEMENTED)}")


def eval_dataset(
    model,
    records: Sequence[TaskRecord],
    metric: str,
    dataset: str = "dataset",
    template: TemplateKind | None = None,
    max_new: int = 256,
    batch_size: int = 16,
) -> EvalReport:
    """Greedy generation per record, then ``metric`` against the record's gold.

    ``model`` needs ``generate_batch(prompts, images, max_new)`` and a
    ``template`` attribute.
    """
    check_metric(metric)
    model_template = TemplateKind(getattr(model, "template", TemplateKind.VICUNA_V1))
    if not records:
        raise MetricError("empty evaluation set")
    declared = {TemplateKind(template)} if template is not None else set()
    declared |= {TemplateKind(r.meta["template"]) for r in records if "template" in r.meta}
    for t in declared:
        if t is not model_template:
            raise ConfigError(
                f"records declare template {t.value} but the model was trained with {model_template.value}"
            )
    if metric == "iou_acc":
        for r in records:
            if r.kind not in (TaskKind.REC, TaskKind.DETECTION) or r.image is None:
                raise MetricError("iou_acc needs detection/REC records with images")
            try:
                parse_box_text(r.response)
            except BoxParseError as exc:
                raise MetricError(f"gold box unparseable: {exc}") from exc
    fix = bool(getattr(model, "fix_template_typos", False))
    preds: list[str] = []
    for i in range(0, len(records), batch_size):
        chunk = records[i : i + batch_size]
        prompts = [render_prompt(r.prompt, r.image is not None, model_template, fix) for r in chunk]
        outs = model.generate_batch(prompts, [r.image for r in chunk], max_new)
        preds.extend(text for text, _ in outs)
    scores, failures, ious = [], 0, []
    for pred, rec in zip(preds, records):
        s, failed, v = score_sample(metric, pred, rec)
        scores.append(s)
        failures += failed
        if v is not None:
            ious.append(v)
    extra = {}
    if ious:
        extra["mean_iou"] = sum(ious) / len(ious)
    return EvalReport(
        dataset=dataset,
        metric=metric,
        scores=scores,
        aggregate=sum(scores) / len(scores),
        sample_count=len(scores),
        failure_count=failures,
        predictions=preds,
        extra=extra,
    )
