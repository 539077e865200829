"""Deterministic synthetic corpora: glyph-grid pages, shape scenes, captions,
VQA, SFT descriptions and text-only conversations.

Every record is a pure function of ``(seed, corpus kind, index)``. Held-out
records use indices starting at ``HELDOUT_START`` so they never collide with
training indices.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from . import data as D
from .data import BBox, ObjectAnnotation, Scene, TaskKind, TaskRecord
from .font import CHARSET, GLYPH_H, GLYPH_W, GLYPHS

HELDOUT_START = 1_000_000


class GenerationError(RuntimeError):
    pass


def record_rng(seed: int, kind: str, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(kind.encode()), index])


# ---------------------------------------------------------------------------
# documents
# ---------------------------------------------------------------------------

WORDS = """
THE OF AND TO IN IS IT YOU THAT HE WAS FOR ON ARE AS WITH HIS THEY AT BE THIS
HAVE FROM OR ONE HAD BY WORD BUT NOT WHAT ALL WERE WE WHEN YOUR CAN SAID THERE
USE AN EACH WHICH SHE DO HOW THEIR IF WILL UP OTHER ABOUT OUT MANY THEN THEM
THESE SO SOME HER WOULD MAKE LIKE HIM INTO TIME HAS LOOK TWO MORE WRITE GO SEE
NUMBER NO WAY COULD PEOPLE MY THAN FIRST WATER BEEN CALL WHO OIL ITS NOW FIND
LONG DOWN DAY DID GET COME MADE MAY PART OVER NEW SOUND TAKE ONLY LITTLE WORK
KNOW PLACE YEAR LIVE ME BACK GIVE MOST VERY AFTER THING OUR JUST NAME GOOD
SENTENCE MAN THINK SAY GREAT WHERE HELP THROUGH MUCH BEFORE LINE RIGHT TOO MEAN
OLD ANY SAME TELL BOY FOLLOW CAME WANT SHOW ALSO AROUND FORM THREE SMALL SET PUT
END DOES ANOTHER WELL LARGE MUST BIG EVEN SUCH BECAUSE TURN HERE WHY ASK WENT MEN
READ NEED LAND DIFFERENT HOME US MOVE TRY KIND HAND PICTURE AGAIN CHANGE OFF PLAY
SPELL AIR AWAY ANIMAL HOUSE POINT PAGE LETTER MOTHER ANSWER FOUND STUDY STILL
LEARN SHOULD WORLD HIGH EVERY NEAR ADD FOOD BETWEEN OWN BELOW COUNTRY PLANT LAST
SCHOOL FATHER KEEP TREE NEVER START CITY EARTH EYE LIGHT THOUGHT HEAD UNDER STORY
""".split()


@dataclass(frozen=True)
class DocumentConfig:
    # 4x4 cells of 16px on a 64px page: one glyph per image token of the toy model
    cols: int = 4
    rows: int = 4
    scale: int = 2
    pad_x: int = 3
    pad_y: int = 1
    min_words: int = 3
    max_words: int = 6
    max_word_len: int = 6

    @property
    def cell_w(self) -> int:
        return (GLYPH_W + self.pad_x) * self.scale

    @property
    def cell_h(self) -> int:
        return (GLYPH_H + self.pad_y) * self.scale

    @property
    def width(self) -> int:
        return self.cols * self.cell_w

    @property
    def height(self) -> int:
        return self.rows * self.cell_h

    @property
    def capacity(self) -> int:
        return self.cols * self.rows


def render_text(text: str, cfg: DocumentConfig = DocumentConfig()) -> np.ndarray:
    """Black glyphs on white, filled row-major one character per cell."""
    if len(text) > cfg.capacity:
        raise GenerationError(f"{len(text)} characters do not fit a {cfg.cols}x{cfg.rows} page")
    bad = set(text) - CHARSET
    if bad:
        raise GenerationError(f"no glyphs for {sorted(bad)}")
    page = np.ones((cfg.height, cfg.width), dtype=bool)
    s = cfg.scale
    ox = (cfg.pad_x * s) // 2
    oy = (cfg.pad_y * s) // 2
    for i, ch in enumerate(text):
        r, c = divmod(i, cfg.cols)
        glyph = np.kron(GLYPHS[ch], np.ones((s, s), dtype=bool))
        y, x = r * cfg.cell_h + oy, c * cfg.cell_w + ox
        page[y : y + GLYPH_H * s, x : x + GLYPH_W * s] &= ~glyph
    img = np.where(page, 255, 0).astype(np.uint8)
    return np.repeat(img[:, :, None], 3, axis=2)


def read_glyphs(img: np.ndarray, cfg: DocumentConfig = DocumentConfig()) -> str:
    """Recover the text from a rendered page by exact bitmap matching."""
    ink = img[:, :, 0] < 128
    s = cfg.scale
    ox = (cfg.pad_x * s) // 2
    oy = (cfg.pad_y * s) // 2
    lookup = {g.tobytes(): ch for ch, g in GLYPHS.items()}
    chars = []
    for r in range(cfg.rows):
        for c in range(cfg.cols):
            y, x = r * cfg.cell_h + oy, c * cfg.cell_w + ox
            cell = ink[y : y + GLYPH_H * s : s, x : x + GLYPH_W * s : s]
            chars.append(lookup.get(np.ascontiguousarray(cell).tobytes(), "�"))
    return "".join(chars).rstrip(" ")


def gen_document(rng: np.random.Generator, cfg: DocumentConfig = DocumentConfig()):
    """Returns ``(text, markdown, image)``.

    ``text`` is the words joined by single spaces and wrapped character-wise
    over the page grid; trailing words that do not fit are dropped.
    ``markdown`` marks the first word as a heading and one later word as bold.
    """
    if cfg.min_words < 1 or cfg.max_words < cfg.min_words:
        raise GenerationError("invalid word-count range")
    pool = [w for w in WORDS if len(w) <= cfg.max_word_len]
    n = int(rng.integers(cfg.min_words, cfg.max_words + 1))
    words = [pool[i] for i in rng.integers(0, len(pool), size=n)]
    # drop trailing words that would overflow the page
    while len(words) > 1 and len(" ".join(words)) > cfg.capacity:
        words.pop()
    text = " ".join(words)
    image = render_text(text, cfg)
    md_words = list(words)
    if len(md_words) > 1:
        k = int(rng.integers(1, len(md_words)))
        md_words[k] = f"**{md_words[k]}**"
        markdown = f"# {md_words[0]}\n\n" + " ".join(md_words[1:])
    else:
        markdown = f"# {md_words[0]}"
    return text, markdown, image


# ---------------------------------------------------------------------------
# scenes
# ---------------------------------------------------------------------------

COLORS = {
    "red": (220, 40, 40),
    "green": (40, 170, 60),
    "blue": (40, 70, 220),
    "yellow": (230, 200, 30),
}
SHAPES = ("square", "circle", "triangle")
ALL_CLASSES = tuple(f"{c} {s}" for c in COLORS for s in SHAPES)
HELDOUT_CLASS = "yellow triangle"
TRAIN_CLASSES = tuple(c for c in ALL_CLASSES if c != HELDOUT_CLASS)
BACKGROUND = (245, 245, 245)


@dataclass(frozen=True)
class SceneRecipe:
    size: int = 64
    classes: tuple[str, ...] = TRAIN_CLASSES
    count_range: tuple[int, int] = (1, 5)
    size_range: tuple[int, int] = (12, 24)
    grid: int = 4
    max_iou: float = 0.0
    retries: int = 500


def box_iou(a: tuple, b: tuple) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def shape_mask(shape: str, w: int, h: int) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w] + 0.5
    if shape == "square":
        return np.ones((h, w), dtype=bool)
    if shape == "circle":
        return ((xs - w / 2) / (w / 2)) ** 2 + ((ys - h / 2) / (h / 2)) ** 2 <= 1.0
    if shape == "triangle":
        # apex at top centre, base along the bottom edge
        half = (np.floor(ys) + 1) / h * (w / 2)
        return np.abs(xs - w / 2) <= half
    raise ValueError(f"unknown shape {shape!r}")


def draw_scene(size: int, objects) -> np.ndarray:
    img = np.empty((size, size, 3), dtype=np.uint8)
    img[:] = BACKGROUND
    for obj in objects:
        color, shape = obj.class_name.split(" ")
        x1, y1, x2, y2 = (int(v) for v in obj.box.as_tuple())
        m = shape_mask(shape, x2 - x1, y2 - y1)
        img[y1:y2, x1:x2][m] = COLORS[color]
    return img


def gen_scene(rng: np.random.Generator, recipe: SceneRecipe, n_objects: int) -> Scene:
    """Place ``n_objects`` grid-aligned shapes; annotations are in reading order."""
    if n_objects < 1:
        raise GenerationError("a scene needs at least one object")
    g = recipe.grid
    lo, hi = recipe.size_range
    sizes = np.arange(lo, hi + 1, g)
    if sizes.size == 0 or sizes[-1] > recipe.size:
        raise GenerationError(f"size range {recipe.size_range} does not fit a {recipe.size}px scene")
    boxes: list[tuple[int, int, int, int]] = []
    for _ in range(n_objects):
        for _attempt in range(recipe.retries):
            w, h = (int(v) for v in rng.choice(sizes, size=2))
            x = int(rng.integers(0, (recipe.size - w) // g + 1)) * g
            y = int(rng.integers(0, (recipe.size - h) // g + 1)) * g
            cand = (x, y, x + w, y + h)
            if all(box_iou(cand, b) <= recipe.max_iou and not _contains(cand, b) for b in boxes):
                boxes.append(cand)
                break
        else:
            raise GenerationError(
                f"could not place object {len(boxes) + 1} of {n_objects} after {recipe.retries} tries"
            )
    names = [recipe.classes[int(i)] for i in rng.integers(0, len(recipe.classes), size=n_objects)]
    objs = [ObjectAnnotation(n, BBox(*b)) for n, b in zip(names, boxes)]
    objs.sort(key=lambda o: (o.box.y1, o.box.x1))
    return Scene(draw_scene(recipe.size, objs), objs)


def _contains(a, b) -> bool:
    return (a[0] <= b[0] and a[1] <= b[1] and a[2] >= b[2] and a[3] >= b[3]) or (
        b[0] <= a[0] and b[1] <= a[1] and b[2] >= a[2] and b[3] >= a[3]
    )


# ---------------------------------------------------------------------------
# text tasks over scenes
# ---------------------------------------------------------------------------

COUNT_QUESTIONS = (
    "How many {p}?",
    "How many {p} are there?",
    "How many {p} are in the image?",
    "What is the number of {p}?",
    "How many {p} can you see?",
    "How many {p} does the picture contain?",
    "Count the {p}.",
    "How many {p} appear here?",
    "Tell me how many {p} there are.",
    "How many {p} are shown?",
)
COLOR_QUESTIONS = (
    "What color is the leftmost object?",
    "Which color does the leftmost object have?",
    "What is the color of the leftmost object?",
    "Name the color of the leftmost object.",
    "What colour is the object furthest to the left?",
    "The leftmost object is what color?",
    "Tell me the color of the leftmost shape.",
    "What color is the shape on the far left?",
    "Which color is the leftmost shape?",
    "What is the leftmost object's color?",
)
LEFTMOST_QUESTIONS = (
    "What is the leftmost object?",
    "Which object is leftmost?",
    "Name the leftmost object.",
    "What object is furthest to the left?",
    "Which shape is on the far left?",
    "What is the object on the left edge?",
    "Identify the leftmost object.",
    "What is the first object from the left?",
    "Which object appears furthest left?",
    "Tell me the leftmost object.",
)


def plural(class_name: str) -> str:
    return class_name + "s"


def _leftmost(scene: Scene) -> ObjectAnnotation:
    return min(scene.objects, key=lambda o: (o.box.x1, o.box.y1))


def gen_vqa_sample(scene: Scene, rng: np.random.Generator) -> TaskRecord:
    qtype = int(rng.integers(0, 3))
    k = int(rng.integers(0, 10))
    if qtype == 0:
        present = sorted({o.class_name for o in scene.objects})
        cls = present[int(rng.integers(0, len(present)))]
        question = COUNT_QUESTIONS[k].format(p=plural(cls))
        answer = str(sum(o.class_name == cls for o in scene.objects))
    elif qtype == 1:
        question = COLOR_QUESTIONS[k]
        answer = _leftmost(scene).class_name.split(" ")[0]
    else:
        question = LEFTMOST_QUESTIONS[k]
        answer = _leftmost(scene).class_name
    return TaskRecord(TaskKind.VQA, f"{question} {D.VQA_SUFFIX}", answer, scene.image)


def _join(items: list[str]) -> str:
    if len(items) == 1:
        return items[0]
    return ", ".join(items[:-1]) + " and " + items[-1]


def describe_classes(scene: Scene) -> str:
    counts: dict[str, int] = {}
    for o in scene.objects:
        counts[o.class_name] = counts.get(o.class_name, 0) + 1
    return _join([f"a {c}" if n == 1 else f"{n} {plural(c)}" for c, n in counts.items()])


def gen_caption_sample(scene: Scene, rng: np.random.Generator | None = None) -> TaskRecord:
    return TaskRecord(
        TaskKind.CAPTION, D.CAPTION_PROMPT, f"An image of {describe_classes(scene)}.", scene.image
    )


DETAIL_PROMPTS = (
    "Describe this image in detail.",
    "Give a detailed description of the picture.",
    "What is shown in this image? Be specific.",
)


def _region(scene: Scene, box: BBox) -> str:
    cx = (box.x1 + box.x2) / 2 / scene.width
    cy = (box.y1 + box.y2) / 2 / scene.height
    row = ("top", "middle", "bottom")[min(2, int(cy * 3))]
    col = ("left", "center", "right")[min(2, int(cx * 3))]
    return "center" if (row, col) == ("middle", "center") else f"{row} {col}"


def gen_detail_sample(scene: Scene, rng: np.random.Generator) -> TaskRecord:
    """Instruction-style description used for the SFT stage."""
    n = len(scene.objects)
    head = "There is 1 object." if n == 1 else f"There are {n} objects."
    parts = [f"A {o.class_name} is at the {_region(scene, o.box)}." for o in scene.objects]
    prompt = DETAIL_PROMPTS[int(rng.integers(0, len(DETAIL_PROMPTS)))]
    return TaskRecord(TaskKind.CAPTION, prompt, " ".join([head, *parts]), scene.image)


def gen_nlp_sample(rng: np.random.Generator) -> TaskRecord:
    kind = int(rng.integers(0, 3))
    if kind == 0:
        a, b = (int(v) for v in rng.integers(0, 50, size=2))
        prompt, response = f"What is {a} plus {b}?", f"{a} plus {b} is {a + b}."
    elif kind == 1:
        words = " ".join(WORDS[int(i)] for i in rng.integers(0, len(WORDS), size=int(rng.integers(1, 4))))
        prompt, response = f"Repeat after me: {words}", words
    else:
        word = WORDS[int(rng.integers(0, len(WORDS)))]
        prompt, response = f"Spell the word {word}.", "-".join(word)
    return TaskRecord(TaskKind.NLP, prompt, response)


# ---------------------------------------------------------------------------
# corpora
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CorpusRecipes:
    document: DocumentConfig = field(default_factory=DocumentConfig)
    scene: SceneRecipe = field(default_factory=SceneRecipe)
    crowded: SceneRecipe = field(
        default_factory=lambda: SceneRecipe(count_range=(31, 36), size_range=(4, 8))
    )


CORPUS_KINDS = ("pages", "markdown", "scenes", "crowded", "rec", "captions", "vqa", "sft", "nlp")


def _scene(rng, recipe: SceneRecipe) -> Scene:
    lo, hi = recipe.count_range
    return gen_scene(rng, recipe, int(rng.integers(lo, hi + 1)))


def make_record(kind: str, seed: int, index: int, recipes: CorpusRecipes = CorpusRecipes()) -> TaskRecord:
    rng = record_rng(seed, kind, index)
    key = {"key": f"{kind}:{seed}:{index}"}
    if kind in ("pages", "markdown"):
        text, markdown, image = gen_document(rng, recipes.document)
        if kind == "pages":
            rec = D.build_pdf_record(text, image)
        else:
            rec = D.build_pdf_record(markdown, image, markdown=True)
    elif kind in ("scenes", "crowded"):
        recipe = recipes.scene if kind == "scenes" else recipes.crowded
        rec = D.reorganize_detection(_scene(rng, recipe), rng)
    elif kind == "rec":
        scene = _scene(rng, recipes.scene)
        obj = scene.objects[int(rng.integers(0, len(scene.objects)))]
        rec = D.build_rec_record(scene, [obj.class_name])
    elif kind == "captions":
        rec = gen_caption_sample(_scene(rng, recipes.scene), rng)
    elif kind == "vqa":
        rec = gen_vqa_sample(_scene(rng, recipes.scene), rng)
    elif kind == "sft":
        rec = gen_detail_sample(_scene(rng, recipes.scene), rng)
    elif kind == "nlp":
        rec = gen_nlp_sample(rng)
    else:
        raise ValueError(f"unknown corpus kind {kind!r}; choose from {CORPUS_KINDS}")
    rec.meta = {**key, **rec.meta}
    return rec


def build_corpus(
    kind: str, count: int, seed: int, start: int = 0, recipes: CorpusRecipes = CorpusRecipes()
) -> list[TaskRecord]:
    if count <= 0:
        raise ValueError("corpus size must be positive")
    return [make_record(kind, seed, start + i, recipes) for i in range(count)]


def build_rec_eval(
    count: int, seed: int, start: int = HELDOUT_START, recipe: SceneRecipe = SceneRecipe()
) -> list[TaskRecord]:
    """Single-box REC probes: each queries a class that occurs exactly once."""
    out = []
    i = start
    while len(out) < count:
        rng = record_rng(seed, "rec-eval", i)
        scene = _scene(rng, recipe)
        names = [o.class_name for o in scene.objects]
        unique = [n for n in dict.fromkeys(names) if names.count(n) == 1]
        if unique:
            cls = unique[int(rng.integers(0, len(unique)))]
            rec = D.build_rec_record(scene, [cls])
            rec.meta["key"] = f"rec-eval:{seed}:{i}"
            out.append(rec)
        i += 1
    return out
