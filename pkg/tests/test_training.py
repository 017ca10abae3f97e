import hashlib
from pathlib import Path

import numpy as np
import pytest

from vqsep import autodiff as ad
from vqsep.checkpoint import checkpoint_from, load_checkpoint, save_checkpoint
from vqsep.data import DatasetError, SongFolder, StereoTrack, SynthSpec, synthesize_song
from vqsep.training import (
    ChunkSource,
    NumericError,
    TrainConfig,
    TrainLog,
    StepRecord,
    alignment_loss,
    alignment_target,
    train_mixture_phase2,
    train_stem_phase1,
)
from vqsep.vqvae import ConfigError, ModelConfig, build_vqvae, encode

CFG = ModelConfig(latent_dim=8, codebook_size=32, width=8, depth=1, chunk_len=512)


@pytest.fixture(scope="module")
def songs():
    spec = SynthSpec(duration=1.0, seed=5)
    return [SongFolder(Path(f"song_{i}"), _tracks=synthesize_song(spec, i)) for i in range(3)]


def tc(**kw):
    return TrainConfig(**{"batch_size": 2, "steps": 30, "chunk_len": 512, "lr": 1e-3, "log_every": 0, **kw})


def digest(params):
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k]).tobytes())
    return h.hexdigest()


def test_zero_steps_returns_initialization(songs):
    model, log = train_stem_phase1(songs, "bass", CFG, tc(steps=0, seed=4))
    init = build_vqvae(CFG, 4).named_parameters()
    assert all(np.array_equal(model.named_parameters()[k].data, init[k].data) for k in init)
    assert log.records == []


def test_init_checkpoint_sets_starting_weights(songs, tmp_path):
    source = build_vqvae(CFG, 99)
    save_checkpoint(source, tmp_path / "init.svq", stem="mixture", role="FULL")
    model, _ = train_stem_phase1(songs, "drums", CFG, tc(steps=0, init_checkpoint=str(tmp_path / "init.svq")))
    assert digest({k: v.data for k, v in model.named_parameters().items()}) == digest({k: v.data for k, v in source.named_parameters().items()})


def test_init_checkpoint_architecture_mismatch(songs, tmp_path):
    save_checkpoint(build_vqvae(ModelConfig(latent_dim=4, codebook_size=32, width=8, depth=1, chunk_len=512), 0), tmp_path / "x.svq")
    with pytest.raises(ConfigError):
        train_stem_phase1(songs, "drums", CFG, tc(init_checkpoint=str(tmp_path / "x.svq")))


def test_phase1_is_deterministic_and_learns(songs):
    a, log_a = train_stem_phase1(songs, "vocals", CFG, tc(steps=60, seed=1))
    b, log_b = train_stem_phase1(songs, "vocals", CFG, tc(steps=60, seed=1))
    da = digest({k: v.data for k, v in a.named_parameters().items()})
    assert da == digest({k: v.data for k, v in b.named_parameters().items()})
    assert np.array_equal(log_a.losses(), log_b.losses())
    s = log_a.summary()
    assert s["last_median"] < s["first_median"]
    c, _ = train_stem_phase1(songs, "vocals", CFG, tc(steps=60, seed=2))
    assert digest({k: v.data for k, v in c.named_parameters().items()}) != da


def test_phase1_periodic_checkpoints_and_evals(songs, tmp_path):
    chunks = np.zeros((2, 1, 512), dtype=np.float32)
    _, log = train_stem_phase1(songs, "bass", CFG, tc(steps=20, checkpoint_every=10, checkpoint_dir=str(tmp_path)), chunks, eval_every=5)
    assert [Path(p).name for p in log.checkpoints] == ["bass.se.step10.svq", "bass.se.step20.svq"]
    assert load_checkpoint(log.checkpoints[-1]).step == 20
    assert [s for s, _ in log.evals] == [0, 5, 10, 15, 20]


def test_empty_dataset_and_bad_config(songs):
    with pytest.raises(DatasetError):
        train_stem_phase1([], "bass", CFG, tc())
    with pytest.raises(ConfigError):
        train_stem_phase1(songs, "bass", CFG, tc(chunk_len=500))
    with pytest.raises(ConfigError):
        train_stem_phase1(songs, "bass", CFG, tc(steps=-1))


def test_sample_rate_mismatch_is_rejected(songs):
    with pytest.raises(DatasetError, match="resample"):
        train_stem_phase1(songs, "bass", ModelConfig(latent_dim=8, codebook_size=32, width=8, depth=1, chunk_len=512, sample_rate=16000), tc())


def test_non_finite_loss_aborts(songs):
    bad = SongFolder(Path("bad"), _tracks={k: StereoTrack(np.full(2048, np.nan), np.full(2048, np.nan), 8000) for k in ("mixture", "drums", "bass", "vocals", "other")})
    with pytest.raises(NumericError, match="step 1"):
        train_stem_phase1([bad], "bass", CFG, tc())


@pytest.fixture(scope="module")
def stem_ckpt(songs):
    model, _ = train_stem_phase1(songs, "bass", CFG, tc(steps=20))
    return checkpoint_from(model, "bass", "SE", 20)


def test_phase2_freezes_stem_model(songs, stem_ckpt):
    before = digest(stem_ckpt.params)
    me, log = train_mixture_phase2(songs, "bass", stem_ckpt, CFG, tc(steps=40))
    assert digest(stem_ckpt.params) == before
    assert me.role == "ME" and set(me.params) == {k for k in stem_ckpt.params if k.startswith("encoder.")}
    s = log.summary()
    assert s["last_median"] < s["first_median"]


def test_phase2_is_deterministic(songs, stem_ckpt):
    a, _ = train_mixture_phase2(songs, "bass", stem_ckpt, CFG, tc(steps=10, seed=3))
    b, _ = train_mixture_phase2(songs, "bass", stem_ckpt, CFG, tc(steps=10, seed=3))
    assert digest(a.params) == digest(b.params)


def test_phase2_loss_zero_when_mixture_is_the_stem(stem_ckpt):
    """Other stems silent and ME equal to SE: nothing left to align."""
    se = stem_ckpt.encoder(role="SE")
    me = stem_ckpt.encoder(role="ME")
    x = np.random.default_rng(0).standard_normal((2, 1, 512)).astype(np.float32)
    assert alignment_loss(se, me, x, x) == 0.0


def test_phase2_rejects_mismatched_architecture(songs, stem_ckpt):
    other = ModelConfig(latent_dim=8, codebook_size=32, width=16, depth=1, chunk_len=512)
    with pytest.raises(ConfigError):
        train_mixture_phase2(songs, "bass", stem_ckpt, other, tc())


def test_quantized_alignment_target_uses_prototypes(stem_ckpt):
    se = stem_ckpt.encoder(role="SE")
    x = np.random.default_rng(1).standard_normal((1, 1, 512)).astype(np.float32)
    target = alignment_target(se, x, stem_ckpt.params["codebook"])
    frames = np.swapaxes(target, -1, -2).reshape(-1, 8)
    protos = {tuple(r) for r in stem_ckpt.params["codebook"]}
    assert all(tuple(f) in protos for f in frames)
    cont = alignment_target(se, x)
    with ad.no_grad():
        assert np.array_equal(cont, encode(se, x).values.data)


def test_chunk_source_batches(songs):
    src = ChunkSource(songs, 8000)
    x_st, x_mt = src.batch("other", 256, 3, np.random.default_rng(0))
    assert x_st.shape == x_mt.shape == (3, 1, 256) and x_st.dtype == np.float32


def test_train_log_requires_increasing_steps():
    log = TrainLog("phase1", "bass")
    log.append(StepRecord(1, 1.0))
    with pytest.raises(ValueError):
        log.append(StepRecord(1, 0.5))
