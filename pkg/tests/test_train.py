import math

import numpy as np
import pytest

from varytoy import checkpoint as ckpt_io
from varytoy import synth as S
from varytoy import train as TR
from varytoy.data import MixtureSpec
from varytoy.model import ConfigError, ModelConfig, VaryTiny, VaryToy
from varytoy.train import Stage, StageConfig

SMALL = ModelConfig(
    high_res=32, low_res=16, n_img_tokens=4, c_branch=8, d_model=16, n_layers=1, n_heads=2,
    max_seq_len=160, vocab_enc_dim=8, vocab_enc_heads=2, clip_heads=2,
)


@pytest.fixture(scope="module")
def corpora():
    return {
        "pages": S.build_corpus("pages", 8, 0),
        "scenes": S.build_corpus("scenes", 8, 0),
        "nlp": S.build_corpus("nlp", 8, 0),
    }


def _cfg(stage, steps=3, **kw):
    mix = MixtureSpec((("pages", 1.0), ("scenes", 1.0)), seed=1)
    return StageConfig(stage, mix, batch_size=2, grad_accumulation=1, initial_lr=1e-3, max_steps=steps, **kw)


def _tiny_ckpt(tmp_path, corpora):
    model = VaryTiny(SMALL)
    TR.run_stage(_cfg(Stage.TINY_PLUS), model, corpora, tmp_path / "vocab.ckpt")
    return ckpt_io.load(tmp_path / "vocab.ckpt"), model


# --- freeze policy -------------------------------------------------------------


def test_default_freeze_policy():
    assert _cfg(Stage.TINY_PLUS).freeze == frozenset()
    assert _cfg(Stage.PRETRAIN).freeze == {"vocab", "clip"}
    assert _cfg(Stage.SFT).freeze == {"vocab", "clip"}
    with pytest.raises(ConfigError, match="must freeze"):
        _cfg(Stage.PRETRAIN, freeze=frozenset({"vocab"}))
    with pytest.raises(ConfigError):
        _cfg(Stage.TINY_PLUS, freeze=frozenset({"vocab"}))


def test_stage_config_validation():
    with pytest.raises(ConfigError):
        _cfg(Stage.SFT, steps=0)
    with pytest.raises(ConfigError):
        StageConfig(Stage.SFT, MixtureSpec((("pages", 1.0),)), batch_size=0)
    full = StageConfig.full_scale(Stage.TINY_PLUS, MixtureSpec((("pages", 1.0),)))
    assert (full.batch_size, full.epochs, full.initial_lr, full.final_lr) == (512, 2, 5e-5, 0.0)


def test_planned_steps_counts_epochs():
    cfg = StageConfig(Stage.SFT, MixtureSpec((("a", 1.0),)), batch_size=4, grad_accumulation=2, epochs=3)
    assert TR.planned_steps(cfg, {"a": list(range(17))}) == 3 * 3


# --- stage runs ----------------------------------------------------------------


def test_tiny_plus_trains_everything_and_checkpoints(tmp_path, corpora):
    ck, model = _tiny_ckpt(tmp_path, corpora)
    assert ck.model_kind == "vary-tiny" and ck.stage == "tiny_plus"
    assert set(ck.params) == set(model.state_dict())
    assert all(p.requires_grad for p in model.parameters())


def test_pretrain_keeps_frozen_branches_bit_identical(tmp_path, corpora):
    ck, _ = _tiny_ckpt(tmp_path, corpora)
    toy = TR.build_vary_toy(ck, None, SMALL)
    before = TR.group_digests(toy, {"vocab", "clip"})
    lm_before = toy.lm.tok.data.copy()
    rep = TR.run_stage(_cfg(Stage.PRETRAIN), toy, corpora)
    assert rep.frozen_digests == before
    assert toy.frozen_groups() == {"vocab", "clip"}
    assert not np.array_equal(toy.lm.tok.data, lm_before)
    assert before["vocab"] == ckpt_io.digest(ck.params, "vocab.")


def test_drift_in_a_frozen_group_is_detected(monkeypatch, corpora):
    toy = VaryToy(SMALL)
    real = TR.adamw_step

    def leaky(params, state, lr):
        real(params, state, lr)
        toy.vocab.patch.kernel.data += 1e-3

    monkeypatch.setattr(TR, "adamw_step", leaky)
    with pytest.raises(TR.FrozenDriftError, match="vocab"):
        TR.run_stage(_cfg(Stage.PRETRAIN), toy, corpora)


def test_non_finite_loss_aborts(corpora):
    model = VaryTiny(SMALL)
    model.lm.head.weight.data[:] = np.nan
    with pytest.raises(TR.TrainingAborted) as info:
        TR.run_stage(_cfg(Stage.TINY_PLUS), model, corpora)
    assert info.value.step == 0


def test_lr_series_follows_cosine(corpora):
    model = VaryTiny(SMALL)
    mix = MixtureSpec((("nlp", 1.0),), seed=0)
    cfg = StageConfig(Stage.TINY_PLUS, mix, batch_size=1, grad_accumulation=1, epochs=20,
                      initial_lr=5e-5, max_steps=100)
    rep = TR.run_stage(cfg, model, corpora)
    want = [0.5 * 5e-5 * (1 + math.cos(math.pi * (s / 99))) for s in range(100)]
    assert len(rep.lrs) == 100 and rep.lrs[0] == 5e-5 and rep.lrs[-1] == 0.0
    assert rep.lrs == want


def test_runs_are_reproducible(tmp_path, corpora):
    for name in ("a", "b"):
        TR.run_stage(_cfg(Stage.TINY_PLUS), VaryTiny(SMALL), corpora, tmp_path / f"{name}.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_zero_step_stage_is_rejected(corpora):
    with pytest.raises(Exception):
        TR.run_stage(_cfg(Stage.TINY_PLUS), VaryTiny(SMALL), {"pages": [], "scenes": []})


# --- composition and persistence ---------------------------------------------


def test_build_vary_toy_copies_vocab_and_checks_geometry(tmp_path, corpora):
    ck, tiny = _tiny_ckpt(tmp_path, corpora)
    toy = TR.build_vary_toy(ck, None, SMALL)
    for name, arr in toy.vocab.state_dict().items():
        assert np.array_equal(arr, tiny.vocab.state_dict()[name])
    with pytest.raises(ConfigError, match="geometry"):
        TR.build_vary_toy(ck, None, ModelConfig())
    donor = VaryToy(SMALL, seed=9)
    clip = ckpt_io.Checkpoint("vary-toy", "x", SMALL.to_dict(), donor.state_dict())
    toy2 = TR.build_vary_toy(ck, clip, SMALL)
    assert np.array_equal(toy2.clip.patch.kernel.data, donor.clip.patch.kernel.data)
    with pytest.raises(ConfigError):
        TR.build_vary_toy(ckpt_io.Checkpoint("vary-tiny", "x", SMALL.to_dict(), {}), None, SMALL)


def test_checkpoint_round_trip_and_strict_load(tmp_path):
    model = VaryToy(SMALL, seed=4)
    model.template = "qwen_chat"
    path = TR.save_model(tmp_path / "m.ckpt", model, "sft")
    back = TR.load_model(path)
    assert type(back) is VaryToy and back.template.value == "qwen_chat"
    for name, arr in model.state_dict().items():
        assert np.array_equal(back.state_dict()[name], arr)
    ck = ckpt_io.load(path)
    del ck.params["lm.head.weight"]
    with pytest.raises(ConfigError, match="missing"):
        TR.init_from_checkpoint(VaryToy(SMALL), ck, strict=True)
    rep = TR.init_from_checkpoint(VaryToy(SMALL), ck, strict=False)
    assert rep.untouched == ["lm.head.weight"]


def test_corrupt_checkpoints_are_rejected(tmp_path):
    path = TR.save_model(tmp_path / "m.ckpt", VaryTiny(SMALL), "tiny_plus")
    raw = path.read_bytes()
    (tmp_path / "bad").write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(ckpt_io.CheckpointError):
        ckpt_io.load(tmp_path / "bad")
    (tmp_path / "short").write_bytes(raw[:-10])
    with pytest.raises(ckpt_io.CheckpointError, match="truncated"):
        ckpt_io.load(tmp_path / "short")


def test_frozen_feature_cache_matches_direct_encoding():
    toy = VaryToy(SMALL)
    toy.freeze({"vocab", "clip"})
    imgs = [S.build_corpus("scenes", 2, 0)[i].image for i in range(2)]
    direct = toy.image_tokens(imgs).data
    cached = toy.image_tokens(imgs, ["a", "b"]).data
    again = toy.image_tokens(imgs, ["a", "b"]).data
    assert np.array_equal(direct, cached) and np.array_equal(cached, again)
    assert len(toy._feature_cache) == 4
