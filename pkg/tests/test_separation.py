import numpy as np
import pytest

from vqsep.checkpoint import checkpoint_from
from vqsep.data import StereoTrack
from vqsep.separation import SeparatorError, assemble_separator, chunk_plan, separate_chunk, separate_track
from vqsep.vqvae import ModelConfig, build_encoder, build_vqvae

STEMS = ("drums", "bass", "vocals", "other")
CFG = ModelConfig(latent_dim=8, codebook_size=16, width=8, depth=1, chunk_len=128)


def ckpts(config=CFG, seed=0):
    se = {s: checkpoint_from(build_vqvae(config, seed + i), s, "SE") for i, s in enumerate(STEMS)}
    me = {s: checkpoint_from(build_encoder(config, seed + 10 + i, role="ME"), s, "ME") for i, s in enumerate(STEMS)}
    return se, me


@pytest.fixture(scope="module")
def sep():
    return assemble_separator(*ckpts())


def track(n, seed=0):
    rng = np.random.default_rng(seed)
    return StereoTrack(rng.uniform(-0.5, 0.5, n), rng.uniform(-0.5, 0.5, n), 8000)


def test_assemble_four_stems(sep):
    assert sorted(sep.models) == sorted(STEMS)
    assert sep.chunk_len == 128 and sep.overlap == 0


def test_assemble_uses_mixture_encoder_and_stem_decoder():
    se, me = ckpts()
    sep = assemble_separator(se, me)
    model = sep.models["bass"]
    assert np.array_equal(model.encoder.params["encoder.out.weight"].data, me["bass"].params["encoder.out.weight"])
    assert np.array_equal(model.codebook.prototypes.data, se["bass"].params["codebook"])
    assert model.encoder.role == "ME"


def test_assemble_errors():
    se, me = ckpts()
    with pytest.raises(SeparatorError, match="other") as info:
        assemble_separator({k: v for k, v in se.items() if k != "other"}, me)
    assert info.value.stem == "other"
    with pytest.raises(SeparatorError, match="duplicate"):
        assemble_separator(list(se.values()) + [se["bass"]], me)
    wide = ModelConfig(latent_dim=4, codebook_size=16, width=8, depth=1, chunk_len=128)
    bad_me = dict(me, vocals=checkpoint_from(build_encoder(wide, 0, role="ME"), "vocals", "ME"))
    with pytest.raises(SeparatorError, match="vocals: config mismatch"):
        assemble_separator(se, bad_me)
    with pytest.raises(SeparatorError, match="expected an ME"):
        assemble_separator(se, dict(me, drums=se["drums"]))
    with pytest.raises(SeparatorError):
        assemble_separator(se, me, overlap=128)


def test_separate_chunk_contract(sep):
    x = np.random.default_rng(0).uniform(-1, 1, 128).astype(np.float32)
    y = separate_chunk(sep, "drums", x)
    assert y.shape == (128,)
    assert np.array_equal(y, separate_chunk(sep, "drums", x))
    assert np.all(np.isfinite(separate_chunk(sep, "bass", np.zeros(128))))
    with pytest.raises(SeparatorError):
        separate_chunk(sep, "drums", x[:100])


def test_length_preservation(sep):
    rng = np.random.default_rng(1)
    mix = track(5 * 128)
    for n in rng.integers(1, 5 * 128 + 1, 100):
        t = StereoTrack(mix.left[:n], mix.right[:n], 8000)
        out = separate_track(sep, t)
        assert all(len(out[s]) == n and out[s].sample_rate == 8000 for s in STEMS)


def test_two_chunks_equal_concatenated_chunks(sep):
    mix = track(256, 2)
    out = separate_track(sep, mix)
    for s in STEMS:
        expected = np.concatenate([separate_chunk(sep, s, mix.left[:128]), separate_chunk(sep, s, mix.left[128:])])
        assert np.array_equal(out[s].left, expected)


def test_short_input_padded_once(sep):
    mix = track(50, 3)
    out = separate_track(sep, mix)
    padded = np.zeros(128, dtype=np.float32)
    padded[:50] = mix.right
    assert np.array_equal(out["other"].right, separate_chunk(sep, "other", padded)[:50])


def test_channel_swap(sep):
    mix = track(300, 4)
    a = separate_track(sep, mix)
    b = separate_track(sep, mix.swapped())
    for s in STEMS:
        assert np.array_equal(a[s].left, b[s].right) and np.array_equal(a[s].right, b[s].left)


def test_overlap_on_silence_matches_plain():
    se, me = ckpts()
    for ck in se.values():
        # a decoder that is silent on silence
        ck.params["decoder.out.weight"][:] = 0
        ck.params["decoder.out.bias"][:] = 0
    plain = assemble_separator(se, me)
    lapped = assemble_separator(se, me, overlap=8 * 4)
    silent = StereoTrack(np.zeros(500), np.zeros(500), 8000)
    a, b = separate_track(plain, silent), separate_track(lapped, silent)
    for s in STEMS:
        assert np.array_equal(a[s].left, b[s].left) and not np.any(a[s].left)


def test_overlap_crossfade_is_partition_of_unity():
    from vqsep.separation import _crossfade_weights

    chunk, overlap = 16, 6
    starts, total = chunk_plan(40, chunk, overlap)
    acc = np.zeros(total)
    for i, s in enumerate(starts):
        acc[s : s + chunk] += _crossfade_weights(chunk, overlap, i == 0, i == len(starts) - 1)
    np.testing.assert_allclose(acc, 1.0)


def test_full_scale_single_chunk():
    starts, total = chunk_plan(393216, 393216, 0)
    assert starts == [0] and total == 393216


def test_sample_rate_mismatch(sep):
    with pytest.raises(SeparatorError, match="resample"):
        separate_track(sep, StereoTrack(np.zeros(10), np.zeros(10), 44100))
