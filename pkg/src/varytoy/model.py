"""Vision branches, vocabulary merge, and the decoder-only language model.

Two composite models share the language-model half:

* ``VaryTiny`` -- vocabulary branch + one input-embedding layer + LM. This is
  the small model trained to generate the vision vocabulary.
* ``VaryToy`` -- vocabulary branch + center-crop branch, one input-embedding
  layer per branch, channel concatenation, and a fresh LM.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import nn
from . import tensor as T
from .images import center_crop, resize_bilinear, to_chw, validate_image
from .tensor import DimensionError, Tensor
from .tokenizer import EOS, IM_END, IMAGE_PLACEHOLDER, VOCAB_SIZE, ByteTokenizer


class ConfigError(ValueError):
    pass


class FormatError(ValueError):
    """A conversation does not fit the template/image contract."""


class SequenceLengthError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    high_res: int = 64
    low_res: int = 32
    n_img_tokens: int = 16
    c_branch: int = 32
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    vocab_size: int = VOCAB_SIZE
    max_seq_len: int = 2048
    vocab_enc_dim: int = 32
    vocab_enc_layers: int = 1
    vocab_enc_heads: int = 2
    clip_layers: int = 1
    clip_heads: int = 2
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            if f.name != "seed" and getattr(self, f.name) <= 0:
                raise ConfigError(f"{f.name} must be positive, got {getattr(self, f.name)}")
        if self.d_model != 2 * self.c_branch:
            raise ConfigError(
                f"d_model ({self.d_model}) must equal 2 * c_branch ({self.c_branch})"
            )
        g = math.isqrt(self.n_img_tokens)
        if g * g != self.n_img_tokens:
            raise ConfigError(f"n_img_tokens={self.n_img_tokens} is not a perfect square")
        if self.max_seq_len < self.n_img_tokens + 2:
            raise ConfigError("max_seq_len must leave room for the image block and delimiters")
        if self.high_res % (4 * g):
            raise ConfigError(
                f"high_res={self.high_res} is not divisible by 4 * token grid ({4 * g})"
            )
        if self.low_res % g:
            raise ConfigError(f"low_res={self.low_res} is not divisible by token grid {g}")
        if self.c_branch % 2:
            raise ConfigError("c_branch must be even (first compression conv halves it)")

    @property
    def grid(self) -> int:
        return math.isqrt(self.n_img_tokens)

    @property
    def vocab_patch(self) -> int:
        return self.high_res // (4 * self.grid)

    @property
    def clip_patch(self) -> int:
        return self.low_res // self.grid

    def to_dict(self) -> dict[str, int]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**{k: int(v) for k, v in d.items()})


#: Shapes used by the full-size model. Only the output geometry matters here.
FULL_SCALE_CONFIG = ModelConfig(
    high_res=1024,
    low_res=224,
    n_img_tokens=256,
    c_branch=1024,
    d_model=2048,
    n_layers=1,
    n_heads=16,
    max_seq_len=4096,
    vocab_enc_dim=256,
    vocab_enc_layers=1,
    vocab_enc_heads=1,
    clip_layers=1,
    clip_heads=1,
)


def _positional(rng: np.random.Generator, n: int, d: int, sinusoid: float = 0.0) -> Tensor:
    table = rng.normal(0.0, 0.02, size=(n, d))
    if sinusoid:
        # learned table seeded with a sinusoidal pattern, so attending to a fixed
        # offset (output character -> image token) is easy to learn
        pos = np.arange(n)[:, None]
        freq = np.exp(-np.log(10000.0) * np.arange(0, d, 2) / d)
        table[:, 0::2] += sinusoid * np.sin(pos * freq)
        table[:, 1::2] += sinusoid * np.cos(pos * freq)
    return T.parameter(table)


# ---------------------------------------------------------------------------
# vision branches
# ---------------------------------------------------------------------------


class VocabularyBranch(nn.Module):
    """High-resolution branch: patch embedding, a global-attention encoder,
    and two stride-2 convolutions that compress to the token grid."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        e = cfg.vocab_enc_dim
        self.patch = nn.Conv2d(rng, 3, e, cfg.vocab_patch, cfg.vocab_patch)
        self.pos = _positional(rng, (4 * cfg.grid) ** 2, e)
        self.blocks = [nn.Block(rng, e, cfg.vocab_enc_heads, causal=False) for _ in range(cfg.vocab_enc_layers)]
        self.ln = nn.LayerNorm(e)
        self.down1 = nn.Conv2d(rng, e, cfg.c_branch // 2, 2, 2)
        self.down2 = nn.Conv2d(rng, cfg.c_branch // 2, cfg.c_branch, 2, 2)

    def preprocess(self, img) -> np.ndarray:
        img = validate_image(img)
        r = self.cfg.high_res
        return to_chw(resize_bilinear(img, r, r))

    def forward(self, pixels: np.ndarray) -> Tensor:
        """``pixels``: [b, 3, high_res, high_res] floats -> [b, n_img_tokens, c_branch]."""
        b = pixels.shape[0]
        g4 = 4 * self.cfg.grid
        e = self.cfg.vocab_enc_dim
        x = self.patch(Tensor(pixels))  # b, e, g4, g4
        x = x.reshape(b, e, g4 * g4).transpose(0, 2, 1) + self.pos
        for blk in self.blocks:
            x = blk(x)
        x = self.ln(x).transpose(0, 2, 1).reshape(b, e, g4, g4)
        x = self.down2(self.down1(x))  # b, c, g, g
        return x.reshape(b, self.cfg.c_branch, self.cfg.n_img_tokens).transpose(0, 2, 1)


class CropBranch(nn.Module):
    """Low-resolution branch fed a center crop; a small ViT whose patch
    geometry yields exactly ``n_img_tokens`` tokens."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        c = cfg.c_branch
        self.patch = nn.Conv2d(rng, 3, c, cfg.clip_patch, cfg.clip_patch)
        self.pos = _positional(rng, cfg.n_img_tokens, c)
        self.blocks = [nn.Block(rng, c, cfg.clip_heads, causal=False) for _ in range(cfg.clip_layers)]
        self.ln = nn.LayerNorm(c)

    def preprocess(self, img) -> np.ndarray:
        return to_chw(center_crop(img, self.cfg.low_res))

    def forward(self, pixels: np.ndarray) -> Tensor:
        b = pixels.shape[0]
        c, n = self.cfg.c_branch, self.cfg.n_img_tokens
        x = self.patch(Tensor(pixels)).reshape(b, c, n).transpose(0, 2, 1) + self.pos
        for blk in self.blocks:
            x = blk(x)
        return self.ln(x)


def encode_vocab_branch(branch: VocabularyBranch, img) -> Tensor:
    return branch(branch.preprocess(img)[None])[0]


def encode_clip_branch(branch: CropBranch, img) -> Tensor:
    return branch(branch.preprocess(img)[None])[0]


class VocabularyMerge(nn.Module):
    """Per-branch input-embedding layers followed by channel concatenation."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        c = cfg.c_branch
        self.embed_vocab = nn.Linear(rng, c, c)
        self.embed_clip = nn.Linear(rng, c, c)

    def forward(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise DimensionError(f"branch outputs differ: {a.shape} vs {b.shape}")
        return T.concat([self.embed_vocab(a), self.embed_clip(b)], axis=-1)


def merge_vocabularies(merge: VocabularyMerge, a: Tensor, b: Tensor) -> Tensor:
    return merge(a, b)


# ---------------------------------------------------------------------------
# language model
# ---------------------------------------------------------------------------


class DecoderLM(nn.Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.d_model
        self.tok = T.parameter(rng.normal(0.0, 0.02, size=(cfg.vocab_size, d)))
        self.pos = _positional(rng, cfg.max_seq_len, d, sinusoid=0.1)
        self.blocks = [nn.Block(rng, d, cfg.n_heads, causal=True) for _ in range(cfg.n_layers)]
        self.ln = nn.LayerNorm(d)
        self.head = nn.Linear(rng, d, cfg.vocab_size, bias=False, std=0.02)

    def embed(self, ids: np.ndarray, image_rows: Tensor | None, splice: np.ndarray | None) -> Tensor:
        """Token embeddings for ``ids`` [b, t]; positions flagged in ``splice``
        take consecutive rows of ``image_rows`` instead."""
        b, t = ids.shape
        if t > self.cfg.max_seq_len:
            raise SequenceLengthError(f"sequence length {t} exceeds max_seq_len {self.cfg.max_seq_len}")
        x = T.take_rows(self.tok, ids)
        if image_rows is not None:
            d = self.cfg.d_model
            flat = x.reshape(b * t, d)
            index = np.arange(b * t).reshape(b, t)
            index[splice] = b * t + np.arange(int(splice.sum()))
            x = T.take_rows(T.concat([flat, image_rows], axis=0), index, unique=True)
        return x + self.pos[:t]

    def forward(self, x: Tensor) -> Tensor:
        for blk in self.blocks:
            x = blk(x)
        return self.head(self.ln(x))


# ---------------------------------------------------------------------------
# sequence assembly
# ---------------------------------------------------------------------------

_ASSISTANT_MARKERS = ('ASSITANT: "', 'ASSISTANT: "', '<|im_start|>assistant: "')


@dataclass(frozen=True)
class Conversation:
    """A rendered conversation split at the start of the assistant text."""

    prompt: str
    response: str

    @property
    def text(self) -> str:
        return self.prompt + self.response


def split_conversation(conv: str | Conversation) -> Conversation:
    if isinstance(conv, Conversation):
        return conv
    hits = [(conv.find(m), m) for m in _ASSISTANT_MARKERS if m in conv]
    if not hits:
        raise FormatError("no assistant turn marker in conversation")
    pos, marker = min(hits)
    cut = pos + len(marker)
    return Conversation(conv[:cut], conv[cut:])


@dataclass
class TokenSeq:
    ids: np.ndarray
    loss_mask: np.ndarray
    image_slot: tuple[int, int] | None


def assemble_sequence(
    conv: str | Conversation,
    has_image: bool,
    tokenizer: ByteTokenizer,
    n_img_tokens: int,
) -> TokenSeq:
    """Tokenize and expand the image placeholder into ``n_img_tokens`` slots.

    The loss mask is true on assistant-response tokens, which run through the
    template's closing quote and end-of-turn token.
    """
    conv = split_conversation(conv)
    p_ids = tokenizer.encode(conv.prompt)
    r_ids = tokenizer.encode(conv.response)
    ph = tokenizer.token_id(IMAGE_PLACEHOLDER)
    if ph in r_ids:
        raise FormatError("image placeholder inside the assistant response")
    slots = [i for i, t in enumerate(p_ids) if t == ph]
    if has_image and len(slots) != 1:
        raise FormatError(f"expected exactly one {IMAGE_PLACEHOLDER} with an image, found {len(slots)}")
    if not has_image and slots:
        raise FormatError(f"{IMAGE_PLACEHOLDER} present but no image supplied")
    image_slot = None
    if slots:
        at = slots[0]
        p_ids = p_ids[:at] + [ph] * n_img_tokens + p_ids[at + 1 :]
        image_slot = (at, n_img_tokens)
    ids = np.asarray(p_ids + r_ids, dtype=np.int64)
    mask = np.zeros(len(ids), dtype=bool)
    mask[len(p_ids) :] = True
    return TokenSeq(ids, mask, image_slot)


def end_token_ids(tokenizer: ByteTokenizer) -> set[int]:
    return {tokenizer.token_id(EOS), tokenizer.token_id(IM_END)}


def strip_response(text: str) -> str:
    """Drop the template's closing quote and separator from generated text."""
    if text.endswith('" '):
        return text[:-2]
    if text.endswith('"'):
        return text[:-1]
    return text


# ---------------------------------------------------------------------------
# composite models
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    ids: np.ndarray  # b, t (right padded)
    targets: np.ndarray  # b, t
    loss_mask: np.ndarray  # b, t
    splice: np.ndarray  # b, t bool
    image_rows: list[int]  # batch row of each image, in order


def collate(seqs: Sequence[TokenSeq]) -> Batch:
    t = max(len(s.ids) for s in seqs)
    b = len(seqs)
    ids = np.zeros((b, t), dtype=np.int64)
    targets = np.zeros((b, t), dtype=np.int64)
    mask = np.zeros((b, t), dtype=bool)
    splice = np.zeros((b, t), dtype=bool)
    image_rows = []
    for i, s in enumerate(seqs):
        n = len(s.ids)
        ids[i, :n] = s.ids
        targets[i, : n - 1] = s.ids[1:]
        mask[i, : n - 1] = s.loss_mask[1:]
        if s.image_slot is not None:
            at, length = s.image_slot
            splice[i, at : at + length] = True
            image_rows.append(i)
    return Batch(ids, targets, mask, splice, image_rows)


class VisionLanguageModel(nn.Module):
    """Shared LM-side machinery; subclasses supply ``image_tokens``."""

    kind = "base"

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.tokenizer = ByteTokenizer()
        self._feature_cache: dict[str, np.ndarray] = {}
        self.template = "vicuna_v1"
        self.fix_template_typos = False

    # subclasses -----------------------------------------------------------
    def image_tokens(self, images: Sequence[np.ndarray], keys: Sequence[str] | None = None) -> Tensor:
        raise NotImplementedError

    def branch_groups(self) -> dict[str, nn.Module]:
        raise NotImplementedError

    # parameter groups ------------------------------------------------------
    def freeze(self, groups) -> None:
        for name, mod in self.branch_groups().items():
            mod.set_trainable(name not in groups)
        self._feature_cache.clear()

    def frozen_groups(self) -> set[str]:
        return {
            name
            for name, mod in self.branch_groups().items()
            if not any(p.requires_grad for p in mod.parameters())
        }

    # forward ---------------------------------------------------------------
    def forward_lm(self, ids: np.ndarray, image_rows: Tensor | None = None, splice=None) -> Tensor:
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        return self.lm(self.lm.embed(ids, image_rows, splice))

    def batch_logits(self, batch: Batch, images, keys=None) -> Tensor:
        rows = None
        if batch.image_rows:
            imgs = self.image_tokens(images, keys)
            rows = imgs.reshape(imgs.shape[0] * imgs.shape[1], imgs.shape[2])
        return self.forward_lm(batch.ids, rows, batch.splice)

    def loss(self, batch: Batch, images, keys=None) -> Tensor:
        logits = self.batch_logits(batch, images, keys)
        return T.softmax_cross_entropy(logits, batch.targets, batch.loss_mask)

    def encode(self, conv, has_image: bool) -> TokenSeq:
        return assemble_sequence(conv, has_image, self.tokenizer, self.cfg.n_img_tokens)

    # inference -------------------------------------------------------------
    def generate(self, prompt: str, image=None, max_new: int = 256) -> str:
        return self.generate_batch([prompt], [image], max_new)[0][0]

    def generate_batch(self, prompts: Sequence[str], images: Sequence, max_new: int = 256):
        """Greedy decoding for several prompts at once.

        Returns ``[(text, truncated), ...]``; ``text`` is the assistant text
        with the template's closing quote removed.
        """
        if max_new <= 0:
            return [("", False) for _ in prompts]
        stop = end_token_ids(self.tokenizer)
        seqs = [
            assemble_sequence(
                Conversation(p, ""), img is not None, self.tokenizer, self.cfg.n_img_tokens
            )
            for p, img in zip(prompts, images)
        ]
        with T.no_grad():
            with_img = [i for i, img in enumerate(images) if img is not None]
            rows = None
            if with_img:
                toks = self.image_tokens([images[i] for i in with_img])
                rows = toks.reshape(-1, toks.shape[-1])
            lengths = [len(s.ids) for s in seqs]
            limit = min(max(lengths) + max_new, self.cfg.max_seq_len)
            b = len(seqs)
            ids = np.zeros((b, limit), dtype=np.int64)
            splice = np.zeros((b, limit), dtype=bool)
            for i, s in enumerate(seqs):
                ids[i, : lengths[i]] = s.ids
                if s.image_slot is not None:
                    at, n = s.image_slot
                    splice[i, at : at + n] = True
            out: list[list[int]] = [[] for _ in range(b)]
            done = [False] * b
            truncated = [False] * b
            cur = list(lengths)
            while not all(done):
                active = [i for i in range(b) if not done[i]]
                width = max(cur)
                logits = self.forward_lm(ids[:, :width], rows, splice[:, :width]).data
                for i in active:
                    nxt = int(np.argmax(logits[i, cur[i] - 1]))
                    if nxt in stop:
                        done[i] = True
                        continue
                    out[i].append(nxt)
                    if len(out[i]) >= max_new or cur[i] >= self.cfg.max_seq_len:
                        done[i] = True
                        truncated[i] = True
                        continue
                    ids[i, cur[i]] = nxt
                    cur[i] += 1
        return [
            (strip_response(self.tokenizer.decode(o)), tr) for o, tr in zip(out, truncated)
        ]

    # preprocessing ---------------------------------------------------------
    def _branch_features(self, branch, images, keys) -> Tensor:
        frozen = not any(p.requires_grad for p in branch.parameters())
        if not frozen:
            return branch(np.stack([branch.preprocess(im) for im in images]))
        name = type(branch).__name__
        feats = []
        missing = []
        for i, im in enumerate(images):
            key = None if keys is None or keys[i] is None else f"{name}:{keys[i]}"
            hit = self._feature_cache.get(key) if key is not None else None
            feats.append(hit)
            if hit is None:
                missing.append(i)
        if missing:
            with T.no_grad():
                fresh = branch(np.stack([branch.preprocess(images[i]) for i in missing])).data
            for j, i in enumerate(missing):
                feats[i] = fresh[j]
                if keys is not None and keys[i] is not None:
                    self._feature_cache[f"{name}:{keys[i]}"] = fresh[j]
        return Tensor(np.stack(feats))


class VaryTiny(VisionLanguageModel):
    kind = "vary-tiny"

    def __init__(self, cfg: ModelConfig, seed: int | None = None):
        super().__init__(cfg)
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        self.vocab = VocabularyBranch(cfg, rng)
        self.embed = nn.Linear(rng, cfg.c_branch, cfg.d_model)
        self.lm = DecoderLM(cfg, rng)

    def branch_groups(self):
        return {"vocab": self.vocab}

    def image_tokens(self, images, keys=None) -> Tensor:
        return self.embed(self._branch_features(self.vocab, images, keys))


class VaryToy(VisionLanguageModel):
    kind = "vary-toy"

    def __init__(self, cfg: ModelConfig, seed: int | None = None):
        super().__init__(cfg)
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        self.vocab = VocabularyBranch(cfg, rng)
        self.clip = CropBranch(cfg, rng)
        self.merge = VocabularyMerge(cfg, rng)
        self.lm = DecoderLM(cfg, rng)

    def branch_groups(self):
        return {"vocab": self.vocab, "clip": self.clip}

    def image_tokens(self, images, keys=None) -> Tensor:
        a = self._branch_features(self.vocab, images, keys)
        b = self._branch_features(self.clip, images, keys)
        return self.merge(a, b)


MODEL_KINDS = {VaryTiny.kind: VaryTiny, VaryToy.kind: VaryToy}
