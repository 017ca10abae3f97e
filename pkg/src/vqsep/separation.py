"""Deployment: mixture encoder + stem codebook/decoder, applied chunk-wise to whole tracks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint
from .data.musdb import STEMS
from .data.wav import StereoTrack
from .vqvae import MIXTURE_ROLE, ConfigError, VqVae, reconstruct


class SeparatorError(ValueError):
    def __init__(self, message: str, stem: str | None = None):
        super().__init__(message)
        self.stem = stem


@dataclass
class Separator:
    """One encoder-swapped VQ-VAE (ME_i + codebook_i + SD_i) per stem."""

    models: dict[str, VqVae]
    chunk_len: int
    overlap: int = 0

    def __post_init__(self):
        missing = [s for s in STEMS if s not in self.models]
        if missing:
            raise SeparatorError(f"missing stem: {missing[0]}", missing[0])
        extra = [s for s in self.models if s not in STEMS]
        if extra:
            raise SeparatorError(f"unknown stem: {extra[0]}", extra[0])
        if not 0 <= self.overlap < self.chunk_len:
            raise SeparatorError(f"overlap {self.overlap} must be in [0, chunk_len={self.chunk_len})")
        for stem, model in self.models.items():
            if self.chunk_len % model.hop_length:
                raise SeparatorError(f"stem {stem}: chunk_len {self.chunk_len} not a multiple of hop {model.hop_length}", stem)

    @property
    def sample_rate(self) -> int:
        return self.models[STEMS[0]].config.sample_rate


@dataclass
class SeparationResult:
    stems: dict[str, StereoTrack] = field(default_factory=dict)

    def __getitem__(self, stem: str) -> StereoTrack:
        return self.stems[stem]


def _by_stem(ckpts, kind: str) -> dict[str, Checkpoint]:
    if isinstance(ckpts, Mapping):
        items = list(ckpts.items())
    else:
        items = [(c.stem, c) for c in ckpts]
    out: dict[str, Checkpoint] = {}
    for stem, ckpt in items:
        if stem in out:
            raise SeparatorError(f"duplicate {kind} checkpoint for stem {stem}", stem)
        out[stem] = ckpt
    for stem in STEMS:
        if stem not in out:
            raise SeparatorError(f"missing {kind} checkpoint for stem: {stem}", stem)
    for stem in out:
        if stem not in STEMS:
            raise SeparatorError(f"unknown stem label {stem!r}", stem)
    return out


def assemble_separator(
    stem_ckpts: Mapping[str, Checkpoint] | Iterable[Checkpoint],
    mix_ckpts: Mapping[str, Checkpoint] | Iterable[Checkpoint],
    chunk_len: int | None = None,
    overlap: int = 0,
) -> Separator:
    """Pair each stem's codebook+decoder (from its phase-1 checkpoint) with its mixture encoder.

    The phase-1 stem encoder weights are not used.
    """
    stems = _by_stem(stem_ckpts, "stem")
    mixes = _by_stem(mix_ckpts, "mixture-encoder")
    models = {}
    for stem in STEMS:
        sc, mc = stems[stem], mixes[stem]
        if mc.role != MIXTURE_ROLE:
            raise SeparatorError(f"stem {stem}: expected an ME checkpoint, got role {mc.role}", stem)
        if sc.config.architecture() != mc.config.architecture():
            raise SeparatorError(
                f"stem {stem}: config mismatch between mixture encoder (latent_dim={mc.config.latent_dim}) "
                f"and stem decoder (latent_dim={sc.config.latent_dim})",
                stem,
            )
        if sc.config.sample_rate != mc.config.sample_rate:
            raise SeparatorError(f"stem {stem}: sample rates differ ({sc.config.sample_rate} vs {mc.config.sample_rate})", stem)
        try:
            base = sc.model()
        except Exception as exc:
            raise SeparatorError(f"stem {stem}: {exc}", stem) from exc
        models[stem] = base.with_encoder(mc.encoder(role=MIXTURE_ROLE))
    if len({m.config.sample_rate for m in models.values()}) != 1:
        raise SeparatorError("stems were trained at different sample rates")
    if chunk_len is None:
        chunk_len = models[STEMS[0]].config.chunk_len
    return Separator(models, int(chunk_len), int(overlap))


def separate_chunk(sep: Separator, stem: str, x: np.ndarray) -> np.ndarray:
    """``SD(quantize(ME(x)))`` for one mono chunk of exactly ``chunk_len`` samples."""
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 1 or len(x) != sep.chunk_len:
        raise SeparatorError(f"chunk must be mono with {sep.chunk_len} samples, got shape {x.shape}", stem)
    if stem not in sep.models:
        raise SeparatorError(f"unknown stem {stem!r}", stem)
    return reconstruct(sep.models[stem], x[None, :])[0]


def chunk_plan(length: int, chunk_len: int, overlap: int) -> tuple[list[int], int]:
    """Chunk start offsets and the zero-padded total length."""
    hop = chunk_len - overlap
    count = max(1, math.ceil(max(length - overlap, 1) / hop))
    return [i * hop for i in range(count)], (count - 1) * hop + chunk_len


def _crossfade_weights(chunk_len: int, overlap: int, first: bool, last: bool) -> np.ndarray:
    w = np.ones(chunk_len)
    if overlap:
        ramp = (np.arange(overlap) + 0.5) / overlap
        if not first:
            w[:overlap] = ramp
        if not last:
            w[chunk_len - overlap :] = 1.0 - ramp
    return w


def separate_channel(sep: Separator, stem: str, signal: np.ndarray) -> np.ndarray:
    n = len(signal)
    starts, padded_len = chunk_plan(n, sep.chunk_len, sep.overlap)
    padded = np.zeros(padded_len, dtype=np.float32)
    padded[:n] = signal
    if sep.overlap == 0:
        out = np.concatenate([separate_chunk(sep, stem, padded[s : s + sep.chunk_len]) for s in starts])
        return out[:n]
    out = np.zeros(padded_len, dtype=np.float64)
    for i, s in enumerate(starts):
        y = separate_chunk(sep, stem, padded[s : s + sep.chunk_len])
        out[s : s + sep.chunk_len] += _crossfade_weights(sep.chunk_len, sep.overlap, i == 0, i == len(starts) - 1) * y
    return out[:n].astype(np.float32)


def separate_track(sep: Separator, mixture: StereoTrack) -> SeparationResult:
    """All four stem estimates, each with the mixture's length and channel count."""
    if len(mixture) < 1:
        raise SeparatorError("mixture is empty")
    if mixture.sample_rate != sep.sample_rate:
        raise SeparatorError(f"mixture is {mixture.sample_rate} Hz but the separator expects {sep.sample_rate} Hz; resample upstream")
    result = SeparationResult()
    for stem in STEMS:
        left = separate_channel(sep, stem, mixture.left)
        right = separate_channel(sep, stem, mixture.right)
        result.stems[stem] = StereoTrack(left, right, mixture.sample_rate)
    return result
