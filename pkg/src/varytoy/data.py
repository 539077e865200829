"""Training-record construction: prompts, detection/REC reorganisation, box
text, chat templates, token budgets, mixture sampling, and corpus manifests.

Box text grammar (one object per line, input order preserved)::

    class_name: [x1, y1, x2, y2]

with integer coordinates in the 0..1000 normalised frame.

Manifest format: ``manifest.jsonl`` holds one JSON object per line with keys
``kind`` (a ``TaskKind`` value), ``prompt``, ``response``, ``image_path`` (path
relative to the manifest directory, or null) and ``meta`` (free-form
object). Lines are written with sorted keys and ASCII escaping so identical
corpora produce identical bytes. Images are binary PPM (P6) files.
"""

from __future__ import annotations

import enum
import json
import math
import re
from collections.abc import Callable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .images import read_ppm, validate_image, write_ppm
from .tokenizer import ByteTokenizer, IMAGE_PLACEHOLDER

OCR_PROMPT = "Provide the OCR results of this image."
MARKDOWN_PROMPT = "Convert the image to markdown format."
DETECT_ALL_PROMPT = "Detect all objects in this image"
CAPTION_PROMPT = "Describe the content of this image in a sentence."
VQA_SUFFIX = "Answer using a single word or phrase."
MAX_DETECTION_BOXES = 30
MAX_REC_CLASSES = 5
TOKEN_LIMIT = 4096


class SkipRecord(Exception):
    """The input cannot yield a training record (empty text, empty scene)."""


class TemplateFormatError(ValueError):
    pass


class BoxParseError(ValueError):
    def __init__(self, line_no: int, line: str):
        super().__init__(f"line {line_no}: cannot parse box from {line!r}")
        self.line_no = line_no
        self.line = line


class MixtureConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


class TaskKind(str, enum.Enum):
    PDF_OCR = "pdf_ocr"
    MARKDOWN = "markdown"
    DETECTION = "detection"
    REC = "rec"
    CAPTION = "caption"
    NLP = "nlp"
    VQA = "vqa"


class TemplateKind(str, enum.Enum):
    VICUNA_V1 = "vicuna_v1"
    QWEN_CHAT = "qwen_chat"


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box {self}")

    def within(self, width: float, height: float) -> bool:
        return self.x1 >= 0 and self.y1 >= 0 and self.x2 <= width and self.y2 <= height

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class NormBox:
    x1: int
    y1: int
    x2: int
    y2: int

    def __post_init__(self):
        vals = self.as_tuple()
        if any(not 0 <= v <= 1000 for v in vals) or self.x1 > self.x2 or self.y1 > self.y2:
            raise ValueError(f"invalid normalised box {vals}")

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class ObjectAnnotation:
    class_name: str
    box: BBox

    def __post_init__(self):
        if not self.class_name or ":" in self.class_name or "\n" in self.class_name:
            raise ValueError(f"invalid class name {self.class_name!r}")


@dataclass
class Scene:
    image: np.ndarray
    objects: list[ObjectAnnotation]

    def __post_init__(self):
        validate_image(self.image)
        for obj in self.objects:
            if not obj.box.within(self.width, self.height):
                raise ValueError(f"{obj} lies outside the {self.width}x{self.height} image")

    @property
    def width(self) -> int:
        return self.image.shape[1]

    @property
    def height(self) -> int:
        return self.image.shape[0]


@dataclass
class TaskRecord:
    kind: TaskKind
    prompt: str
    response: str
    image: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.kind = TaskKind(self.kind)
        if self.kind is TaskKind.NLP and self.image is not None:
            raise ValueError("NLP records carry no image")
        if self.kind is not TaskKind.NLP and self.image is None:
            raise ValueError(f"{self.kind.value} records need an image")


# ---------------------------------------------------------------------------
# record builders
# ---------------------------------------------------------------------------


def build_pdf_record(page_text: str, page_image, markdown: bool = False) -> TaskRecord:
    if not page_text.strip():
        raise SkipRecord("empty page text")
    if markdown:
        return TaskRecord(TaskKind.MARKDOWN, MARKDOWN_PROMPT, page_text, page_image)
    return TaskRecord(TaskKind.PDF_OCR, OCR_PROMPT, page_text, page_image)


def rec_prompt(classes: Sequence[str]) -> str:
    return f"Detect {', '.join(classes)} in this image"


_IMAGE_WORDS = re.compile(r"\b(image|picture|photo)\b", re.IGNORECASE)


def prompt_requires_image(prompt: str) -> bool:
    """Whether a prompt only makes sense with an image attached."""
    return bool(_IMAGE_WORDS.search(prompt)) or prompt.endswith(VQA_SUFFIX)


def build_rec_record(scene: Scene, classes: Sequence[str]) -> TaskRecord:
    wanted = set(classes)
    picked = [o for o in scene.objects if o.class_name in wanted]
    if not picked:
        raise SkipRecord("no objects of the requested classes")
    return TaskRecord(
        TaskKind.REC,
        rec_prompt(classes),
        render_box_text(picked, scene.width, scene.height),
        scene.image,
        {"width": scene.width, "height": scene.height, "classes": list(classes)},
    )


def reorganize_detection(
    scene: Scene,
    rng: np.random.Generator,
    max_boxes: int = MAX_DETECTION_BOXES,
    max_rec_classes: int = MAX_REC_CLASSES,
) -> TaskRecord:
    """Detection record for scenes with at most ``max_boxes`` objects, otherwise
    a REC record over a random class subset of size 1..``max_rec_classes``.

    Calling again with a different generator state yields a different subset,
    so crowded scenes can be emitted several times.
    """
    if not scene.objects:
        raise SkipRecord("scene has no objects")
    if len(scene.objects) <= max_boxes:
        return TaskRecord(
            TaskKind.DETECTION,
            DETECT_ALL_PROMPT,
            render_box_text(scene.objects, scene.width, scene.height),
            scene.image,
            {"width": scene.width, "height": scene.height},
        )
    present = list(dict.fromkeys(o.class_name for o in scene.objects))
    k = int(rng.integers(1, min(max_rec_classes, len(present)) + 1))
    chosen = [present[i] for i in sorted(rng.choice(len(present), size=k, replace=False))]
    return build_rec_record(scene, chosen)


# ---------------------------------------------------------------------------
# boxes
# ---------------------------------------------------------------------------


def _norm(v: float, extent: float) -> int:
    # round half up, then clamp
    return min(1000, max(0, math.floor(v * 1000 / extent + 0.5)))


def normalize_box(box: BBox, width: float, height: float) -> NormBox:
    return NormBox(
        _norm(box.x1, width), _norm(box.y1, height), _norm(box.x2, width), _norm(box.y2, height)
    )


def denormalize_box(nb: NormBox | Sequence[int], width: float, height: float) -> BBox:
    x1, y1, x2, y2 = nb.as_tuple() if isinstance(nb, NormBox) else nb
    return BBox(x1 * width / 1000, y1 * height / 1000, x2 * width / 1000, y2 * height / 1000)


def format_box_line(class_name: str, nb: NormBox) -> str:
    return f"{class_name}: [{nb.x1}, {nb.y1}, {nb.x2}, {nb.y2}]"


def render_box_text(objects: Sequence[ObjectAnnotation], width: float, height: float) -> str:
    return "\n".join(
        format_box_line(o.class_name, normalize_box(o.box, width, height)) for o in objects
    )


BOX_LINE = re.compile(r"^([^:\n]+): \[(\d{1,4}), (\d{1,4}), (\d{1,4}), (\d{1,4})\]$")


def parse_box_text(text: str) -> list[tuple[str, NormBox]]:
    """Exact inverse of ``render_box_text`` on the normalised frame."""
    out = []
    for i, line in enumerate(text.split("\n"), start=1):
        m = BOX_LINE.match(line)
        if m is None:
            raise BoxParseError(i, line)
        try:
            nb = NormBox(*(int(g) for g in m.groups()[1:]))
        except ValueError:
            raise BoxParseError(i, line) from None
        out.append((m.group(1), nb))
    return out


# ---------------------------------------------------------------------------
# templates
# ---------------------------------------------------------------------------

IMAGE_BLOCK = f'<img>"{IMAGE_PLACEHOLDER}"</img> '


def render_parts(
    record: TaskRecord, kind: TemplateKind, fix_template_typos: bool = False
) -> tuple[str, str]:
    """Split rendering: (everything up to the assistant text, the rest)."""
    kind = TemplateKind(kind)
    has_image = record.image is not None
    if has_image and not record.prompt:
        raise TemplateFormatError("image record with an empty prompt")
    block = IMAGE_BLOCK if has_image else ""
    if kind is TemplateKind.VICUNA_V1:
        assistant = "ASSISTANT" if fix_template_typos else "ASSITANT"
        head = f'USER: {block}"{record.prompt}" {assistant}: "'
        tail = f'{record.response}" </s>'
    else:
        head = (
            f'<|im_start|>user: {block}"{record.prompt}"<|im_end|> '
            '<|im_start|>assistant: "'
        )
        tail = f'{record.response}" <|im_end|>'
    return head, tail


def render_template(
    record: TaskRecord, kind: TemplateKind, fix_template_typos: bool = False
) -> str:
    head, tail = render_parts(record, kind, fix_template_typos)
    return head + tail


def render_prompt(
    prompt: str, has_image: bool, kind: TemplateKind, fix_template_typos: bool = False
) -> str:
    """Template text a model is asked to continue at inference time."""
    if has_image and not prompt:
        raise TemplateFormatError("image prompt is empty")
    block = IMAGE_BLOCK if has_image else ""
    if TemplateKind(kind) is TemplateKind.VICUNA_V1:
        assistant = "ASSISTANT" if fix_template_typos else "ASSITANT"
        return f'USER: {block}"{prompt}" {assistant}: "'
    return f'<|im_start|>user: {block}"{prompt}"<|im_end|> <|im_start|>assistant: "'


@dataclass(frozen=True)
class BudgetResult:
    fits: bool
    actual: int
    limit: int


def count_tokens(rendered: str, tokenizer: ByteTokenizer, n_img_tokens: int) -> int:
    ids = tokenizer.encode(rendered)
    ph = tokenizer.token_id(IMAGE_PLACEHOLDER)
    n_ph = ids.count(ph)
    return len(ids) + n_ph * (n_img_tokens - 1)


def check_token_budget(
    rendered: str, tokenizer: ByteTokenizer, n_img_tokens: int, limit: int = TOKEN_LIMIT
) -> BudgetResult:
    """Inclusive bound: a sequence of exactly ``limit`` tokens fits."""
    n = count_tokens(rendered, tokenizer, n_img_tokens)
    return BudgetResult(n <= limit, n, limit)


# ---------------------------------------------------------------------------
# mixtures
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MixtureSpec:
    entries: tuple[tuple[str, float], ...]
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple((str(c), float(w)) for c, w in self.entries))
        if any(w < 0 or not math.isfinite(w) for _, w in self.entries):
            raise MixtureConfigError("mixture weights must be finite and non-negative")
        if not any(w > 0 for _, w in self.entries):
            raise MixtureConfigError("mixture needs at least one positive weight")

    @property
    def active(self) -> list[tuple[str, float]]:
        return [(c, w) for c, w in self.entries if w > 0]


def filter_corpora(
    spec: MixtureSpec,
    corpora: Mapping[str, Sequence[TaskRecord]],
    accept: Callable[[TaskRecord], bool] | None = None,
) -> dict[str, list[TaskRecord]]:
    out = {}
    for cid, _ in spec.active:
        if cid not in corpora:
            raise MixtureConfigError(f"unknown corpus id {cid!r}; known: {sorted(corpora)}")
        recs = [r for r in corpora[cid] if accept is None or accept(r)]
        if not recs:
            raise MixtureConfigError(f"corpus {cid!r} has no usable records")
        out[cid] = recs
    return out


def sample_mixture(
    spec: MixtureSpec,
    corpora: Mapping[str, Sequence[TaskRecord]],
    accept: Callable[[TaskRecord], bool] | None = None,
) -> Iterator[TaskRecord]:
    """Endless stream: each draw picks a corpus with probability proportional
    to its weight, then that corpus's next record in a per-pass shuffle."""
    usable = filter_corpora(spec, corpora, accept)
    ids = [c for c, _ in spec.active]
    p = np.array([w for _, w in spec.active], dtype=np.float64)
    p /= p.sum()
    rng = np.random.default_rng(spec.seed)
    orders = {c: rng.permutation(len(usable[c])) for c in ids}
    cursor = dict.fromkeys(ids, 0)
    while True:
        for k in rng.choice(len(ids), size=1024, p=p):
            cid = ids[k]
            recs = usable[cid]
            if cursor[cid] == len(recs):
                orders[cid] = rng.permutation(len(recs))
                cursor[cid] = 0
            yield recs[orders[cid][cursor[cid]]]
            cursor[cid] += 1


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

MANIFEST_NAME = "manifest.jsonl"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def write_manifest(directory: str | Path, records: Sequence[TaskRecord], image_dir: str = "images") -> Path:
    directory = Path(directory)
    (directory / image_dir).mkdir(parents=True, exist_ok=True)
    path = directory / MANIFEST_NAME
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        for i, rec in enumerate(records):
            rel = None
            if rec.image is not None:
                rel = f"{image_dir}/{i:06d}.ppm"
                write_ppm(directory / rel, rec.image)
            line = {
                "kind": rec.kind.value,
                "prompt": rec.prompt,
                "response": rec.response,
                "image_path": rel,
                "meta": _jsonable(rec.meta),
            }
            fh.write(json.dumps(line, sort_keys=True, ensure_ascii=True) + "\n")
    return path


def read_manifest(directory: str | Path) -> list[TaskRecord]:
    directory = Path(directory)
    path = directory / MANIFEST_NAME if directory.is_dir() else directory
    base = path.parent
    records = []
    with open(path, encoding="ascii") as fh:
        for n, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
                image = read_ppm(base / obj["image_path"]) if obj.get("image_path") else None
                meta = obj.get("meta") or {}
                records.append(
                    TaskRecord(TaskKind(obj["kind"]), obj["prompt"], obj["response"], image, meta)
                )
            except (KeyError, ValueError) as exc:
                raise ValueError(f"{path}:{n}: bad manifest line ({exc})") from exc
    return records
