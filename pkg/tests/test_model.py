import math

import numpy as np
import pytest

from varytoy import tensor as T
from varytoy.data import TaskKind, TaskRecord, TemplateKind
from varytoy.model import (
    FULL_SCALE_CONFIG,
    ConfigError,
    CropBranch,
    FormatError,
    ModelConfig,
    SequenceLengthError,
    VaryTiny,
    VaryToy,
    VocabularyBranch,
    VocabularyMerge,
    assemble_sequence,
    collate,
    encode_clip_branch,
    merge_vocabularies,
    split_conversation,
)
from varytoy.tensor import Tensor, precision
from varytoy.tokenizer import ByteTokenizer
from varytoy.train import to_conversation

from helpers import gradcheck

# small enough for float64 finite differences
MICRO = ModelConfig(
    high_res=32, low_res=8, n_img_tokens=4, c_branch=8, d_model=16, n_layers=1, n_heads=2,
    max_seq_len=96, vocab_enc_dim=8, vocab_enc_layers=1, vocab_enc_heads=2, clip_layers=1, clip_heads=2,
)


def _img(h, w, seed=0):
    return np.random.default_rng(seed).integers(0, 256, size=(h, w, 3), dtype=np.uint8)


# --- config ---------------------------------------------------------------------


@pytest.mark.parametrize(
    "kw",
    [dict(d_model=63), dict(n_img_tokens=15), dict(high_res=60), dict(low_res=30), dict(n_layers=0), dict(max_seq_len=10)],
)
def test_config_rejects_bad_geometry(kw):
    with pytest.raises(ConfigError):
        ModelConfig(**kw)


def test_config_dict_round_trip():
    cfg = ModelConfig(seed=7)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError, match="unknown"):
        ModelConfig.from_dict({**cfg.to_dict(), "bogus": 1})


# --- vision branches ----------------------------------------------------------


def test_full_scale_branch_and_merge_shapes():
    rng = np.random.default_rng(0)
    cfg = FULL_SCALE_CONFIG
    with T.no_grad():
        vocab = VocabularyBranch(cfg, rng)
        clip = CropBranch(cfg, rng)
        merge = VocabularyMerge(cfg, rng)
        img = _img(300, 200)
        a = vocab(vocab.preprocess(img)[None])[0]
        b = encode_clip_branch(clip, img)
        out = merge_vocabularies(merge, a, b)
    assert a.shape == (256, 1024) and b.shape == (256, 1024)
    assert out.shape == (256, 2048)


def test_toy_branch_shapes_and_batch_consistency():
    model = VaryToy(ModelConfig())
    imgs = [_img(64, 64, s) for s in range(3)]
    with T.no_grad():
        batch = model.image_tokens(imgs).data
        single = model.image_tokens(imgs[1:2]).data
    assert batch.shape == (3, 16, 64)
    assert np.allclose(batch[1], single[0], atol=1e-5)


def test_branch_output_is_deterministic():
    img = _img(64, 48)
    outs = []
    for _ in range(2):
        with T.no_grad():
            outs.append(VaryToy(ModelConfig(seed=3)).image_tokens([img]).data)
    assert np.array_equal(outs[0], outs[1])


def test_center_crop_hides_pixels_outside_the_square():
    cfg = ModelConfig(low_res=32)
    branch = CropBranch(cfg, np.random.default_rng(0))
    base = np.full((224, 448, 3), 128, np.uint8)
    base[:, 112:336] = _img(224, 224, 1)
    poked = base.copy()
    # asymmetric sentinels outside the central 224x224 region
    poked[:, :100] = 255
    poked[:5, 340:] = 0
    poked[200:, 400:] = 17
    with T.no_grad():
        a = encode_clip_branch(branch, base).data
        b = encode_clip_branch(branch, poked).data
        poked[100:110, 200:210] = 0  # inside the crop
        c = encode_clip_branch(branch, poked).data
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_merge_with_identity_embeddings_is_concatenation():
    cfg = ModelConfig()
    merge = VocabularyMerge(cfg, np.random.default_rng(0))
    for lin in (merge.embed_vocab, merge.embed_clip):
        lin.weight.data = np.eye(cfg.c_branch, dtype=lin.weight.data.dtype)
        lin.bias.data[:] = 0
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((16, 32)), rng.standard_normal((16, 32))
    out = merge(Tensor(a), Tensor(b)).data
    assert np.allclose(out, np.concatenate([a, b], axis=-1), atol=1e-6)


def test_merge_rejects_mismatched_branches():
    merge = VocabularyMerge(ModelConfig(), np.random.default_rng(0))
    with pytest.raises(T.DimensionError):
        merge(Tensor(np.zeros((16, 32))), Tensor(np.zeros((9, 32))))


def test_bad_images_are_rejected():
    model = VaryTiny(ModelConfig())
    with pytest.raises(ValueError):
        model.image_tokens([np.zeros((8, 8), np.uint8)])
    with pytest.raises(ValueError):
        model.image_tokens([np.zeros((0, 8, 3), np.uint8)])


# --- sequence assembly --------------------------------------------------------


def _rec(kind=TaskKind.PDF_OCR, image=True):
    return TaskRecord(kind, "Provide the OCR results of this image.", "HELLO WORLD",
                      _img(64, 64) if image else None)


@pytest.mark.parametrize("template", list(TemplateKind))
def test_assembly_length_arithmetic(template):
    tok = ByteTokenizer()
    rec = _rec()
    conv = to_conversation(rec, template)
    seq = assemble_sequence(conv, True, tok, 16)
    assert len(seq.ids) == len(tok.encode(conv.text)) - 1 + 16
    at, n = seq.image_slot
    assert n == 16
    ph = tok.token_id("<image>")
    assert (seq.ids[at : at + n] == ph).all() and (seq.ids == ph).sum() == 16
    # the loss covers exactly the response tokens
    assert seq.loss_mask.sum() == len(tok.encode(conv.response))
    assert not seq.loss_mask[: at + n].any()


def test_assembly_errors():
    tok = ByteTokenizer()
    conv = to_conversation(_rec(), TemplateKind.VICUNA_V1)
    with pytest.raises(FormatError):
        assemble_sequence(conv, False, tok, 16)
    nlp = to_conversation(_rec(TaskKind.NLP, image=False), TemplateKind.VICUNA_V1)
    with pytest.raises(FormatError):
        assemble_sequence(nlp, True, tok, 16)
    assert assemble_sequence(nlp, False, tok, 16).image_slot is None
    with pytest.raises(FormatError):
        split_conversation("no marker here")


def test_over_length_sequence_is_rejected():
    model = VaryTiny(MICRO)
    with pytest.raises(SequenceLengthError, match="96"):
        model.forward_lm(np.zeros((1, 97), np.int64))


def test_collate_shifts_targets():
    tok = ByteTokenizer()
    seqs = [assemble_sequence(to_conversation(_rec(), TemplateKind.VICUNA_V1), True, tok, 4),
            assemble_sequence(to_conversation(_rec(TaskKind.NLP, False), TemplateKind.VICUNA_V1), False, tok, 4)]
    b = collate(seqs)
    n = len(seqs[0].ids)
    assert np.array_equal(b.targets[0, : n - 1], seqs[0].ids[1:])
    assert b.image_rows == [0] and b.splice[0].sum() == 4 and not b.splice[1].any()
    assert not b.loss_mask[1, len(seqs[1].ids) - 1 :].any()


# --- language model -----------------------------------------------------------


def test_decoder_is_causal():
    model = VaryTiny(MICRO)
    rng = np.random.default_rng(0)
    ids = rng.integers(0, 256, size=(1, 20))
    with T.no_grad():
        a = model.forward_lm(ids).data
        ids2 = ids.copy()
        ids2[0, 12:] = rng.integers(0, 256, size=8)
        b = model.forward_lm(ids2).data
    assert np.allclose(a[0, :12], b[0, :12], atol=1e-6)
    assert not np.allclose(a[0, 12:], b[0, 12:])


def test_image_tokens_reach_the_lm():
    model = VaryTiny(ModelConfig())
    tok = model.tokenizer
    seq = assemble_sequence(to_conversation(_rec(), TemplateKind.VICUNA_V1), True, tok, 16)
    b = collate([seq])
    with T.no_grad():
        a = model.batch_logits(b, [_img(64, 64, 1)]).data
        c = model.batch_logits(b, [_img(64, 64, 2)]).data
    at, n = seq.image_slot
    assert np.allclose(a[0, :at], c[0, :at], atol=1e-6)
    assert not np.allclose(a[0, at + n :], c[0, at + n :])


def test_initial_predictions_are_near_uniform():
    model = VaryToy(ModelConfig())
    ids = np.random.default_rng(0).integers(0, 256, size=(2, 40))
    with T.no_grad():
        probs = T.softmax(model.forward_lm(ids)).data.astype(np.float64)
    entropy = -(probs * np.log(probs)).sum(-1)
    target = math.log(ModelConfig().vocab_size)
    assert np.all(np.abs(entropy - target) < 0.2 * target)


def test_generate_zero_tokens_is_empty():
    model = VaryTiny(ModelConfig())
    assert model.generate('USER: hi ASSITANT: "', None, max_new=0) == ""


def test_generate_respects_max_new_and_batches_agree():
    model = VaryTiny(ModelConfig())
    prompt = 'USER: <img>"<image>"</img> "Provide the OCR results of this image." ASSITANT: "'
    img = _img(64, 64)
    out = model.generate_batch([prompt, prompt], [img, img], max_new=5)
    for text, truncated in out:
        assert truncated and 0 < len(text) <= 5
    assert out[0] == out[1]


# --- training-level checks ----------------------------------------------------


def test_overfits_a_single_sample():
    from varytoy.optim import OptimizerState, adamw_step

    model = VaryTiny(MICRO)
    tok = model.tokenizer
    rec = TaskRecord(TaskKind.PDF_OCR, "Provide the OCR results of this image.", "AB", _img(32, 32))
    seq = assemble_sequence(to_conversation(rec, TemplateKind.VICUNA_V1), True, tok, MICRO.n_img_tokens)
    batch = collate([seq])
    params = model.trainable_parameters()
    state = OptimizerState(0.9, 0.95, weight_decay=0.0)
    first = None
    for _ in range(100):
        model.zero_grad()
        loss = model.loss(batch, [rec.image])
        first = first if first is not None else float(loss.data)
        loss.backward()
        adamw_step(params, state, 1e-2)
    assert float(loss.data) < 0.05 < first
    assert model.generate(to_conversation(rec, TemplateKind.VICUNA_V1).prompt, rec.image, max_new=8) == "AB"


@pytest.mark.parametrize("kind", [VaryTiny, VaryToy])
def test_end_to_end_gradcheck(kind):
    rng = np.random.default_rng(0)
    with precision(np.float64):
        model = kind(MICRO)
        tok = model.tokenizer
        rec = TaskRecord(TaskKind.PDF_OCR, "Read.", "AB", _img(40, 24))
        seq = assemble_sequence(to_conversation(rec, TemplateKind.VICUNA_V1), True, tok, MICRO.n_img_tokens)
        batch = collate([seq])
        params = list(model.trainable_parameters().values())
        picked = [params[i] for i in sorted(rng.choice(len(params), size=8, replace=False))]
        gradcheck(lambda: model.loss(batch, [rec.image]), picked, rng, n=4)
