"""Seeded four-stem synthetic corpus written in MUSDB18-HQ layout.

Each song has a tempo grid.  Drums are decaying white-noise bursts on that
grid, bass plays low tones, vocals sing vibrato tones with rests, and "other"
holds three-note chords.  The mixture is ``clip(0.5 * sum(stems))``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .musdb import STEMS
from .wav import StereoTrack, write_wav

SPEC_FILENAME = "synth.txt"


@dataclass
class SynthSpec:
    seed: int = 0
    songs: int = 16
    test_fraction: float = 0.25
    duration: float = 30.0
    sample_rate: int = 8000
    bits: int = 16
    tempo_min: float = 90.0
    tempo_max: float = 140.0
    drum_decay_min: float = 10.0
    drum_decay_max: float = 30.0
    drum_level: float = 0.75
    bass_min_hz: float = 40.0
    bass_max_hz: float = 120.0
    bass_level: float = 0.25
    vocal_min_hz: float = 200.0
    vocal_max_hz: float = 600.0
    vibrato_hz: float = 5.5
    vibrato_depth: float = 0.02
    vocal_level: float = 0.3
    chord_root_min_hz: float = 600.0
    chord_root_max_hz: float = 900.0
    other_level: float = 0.35

    @property
    def n_test(self) -> int:
        if self.songs <= 1:
            return 0
        return min(self.songs - 1, max(1, int(round(self.songs * self.test_fraction))))

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> "SynthSpec":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            if not sep or key not in types:
                raise ValueError(f"line {lineno}: unknown or malformed entry {raw!r}")
            kwargs[key] = int(value) if types[key] in ("int", int) else float(value)
        return cls(**kwargs)


def _envelope(n: int, sr: int, attack: float = 0.01, release: float = 0.02) -> np.ndarray:
    env = np.ones(n)
    a = min(n // 2, max(1, int(attack * sr)))
    r = min(n // 2, max(1, int(release * sr)))
    env[:a] = np.linspace(0.0, 1.0, a, endpoint=False)
    env[n - r :] = np.linspace(1.0, 0.0, r)
    return env


def _drums(spec: SynthSpec, rng, n: int, beat: int) -> np.ndarray:
    """Exponentially decaying white-noise bursts on an 8th-note grid."""
    out = np.zeros(n)
    step = beat // 2
    pattern = rng.random(8) < 0.55
    pattern[0] = pattern[4] = True
    decay = rng.uniform(spec.drum_decay_min, spec.drum_decay_max)
    burst_len = min(step, int(6.0 * spec.sample_rate / decay))
    t = np.arange(burst_len) / spec.sample_rate
    env = np.exp(-decay * t)
    for i, pos in enumerate(range(0, n, step)):
        if not pattern[i % 8]:
            continue
        gain = rng.uniform(0.6, 1.0)
        m = min(burst_len, n - pos)
        out[pos : pos + m] += gain * env[:m] * rng.uniform(-1.0, 1.0, m)
    return spec.drum_level * out

def _tone(freq: np.ndarray | float, n: int, sr: int, harmonics=(1.0,), phase: float = 0.0) -> np.ndarray:
    inst = np.broadcast_to(np.asarray(freq, dtype=float), (n,))
    ph = phase + 2 * np.pi * np.cumsum(inst) / sr
    return sum(a * np.sin((h + 1) * ph) for h, a in enumerate(harmonics))


def _bass(spec: SynthSpec, rng, n: int, beat: int) -> np.ndarray:
    out = np.zeros(n)
    sr = spec.sample_rate
    pos = 0
    while pos < n:
        length = min(n - pos, beat * int(rng.integers(1, 3)))
        f = rng.uniform(spec.bass_min_hz, spec.bass_max_hz)
        out[pos : pos + length] = _tone(f, length, sr, (1.0, 0.3), rng.uniform(0, 2 * np.pi)) * _envelope(length, sr)
        pos += length
    return spec.bass_level * out / 1.3


def _vocals(spec: SynthSpec, rng, n: int, beat: int) -> np.ndarray:
    out = np.zeros(n)
    sr = spec.sample_rate
    pos = 0
    while pos < n:
        length = min(n - pos, beat * int(rng.integers(1, 5)))
        if rng.random() < 0.25:
            pos += length
            continue
        f0 = rng.uniform(spec.vocal_min_hz, spec.vocal_max_hz)
        t = np.arange(length) / sr
        freq = f0 * (1.0 + spec.vibrato_depth * np.sin(2 * np.pi * spec.vibrato_hz * t + rng.uniform(0, 2 * np.pi)))
        out[pos : pos + length] = _tone(freq, length, sr, (1.0, 0.4, 0.15)) * _envelope(length, sr, 0.03, 0.05)
        pos += length
    return spec.vocal_level * out / 1.55


def _other(spec: SynthSpec, rng, n: int, beat: int) -> np.ndarray:
    out = np.zeros(n)
    sr = spec.sample_rate
    pos = 0
    while pos < n:
        length = min(n - pos, beat * 4)
        root = rng.uniform(spec.chord_root_min_hz, spec.chord_root_max_hz)
        third = 4 if rng.random() < 0.5 else 3
        chord = sum(_tone(root * 2 ** (k / 12), length, sr, (1.0,), rng.uniform(0, 2 * np.pi)) for k in (0, third, 7))
        out[pos : pos + length] = chord * _envelope(length, sr, 0.02, 0.05)
        pos += length
    return spec.other_level * out / 3.0


_GENERATORS = {"drums": _drums, "bass": _bass, "vocals": _vocals, "other": _other}


def synthesize_song(spec: SynthSpec, index: int) -> dict[str, StereoTrack]:
    """Stems plus mixture for song ``index``, as float tracks (before PCM quantization)."""
    rng = np.random.default_rng([spec.seed, index])
    sr = spec.sample_rate
    n = int(round(spec.duration * sr))
    beat = int(round(60.0 / rng.uniform(spec.tempo_min, spec.tempo_max) * sr))
    tracks = {}
    total = np.zeros((2, n))
    for stem in STEMS:
        mono = _GENERATORS[stem](spec, rng, n, beat)
        pan = rng.uniform(np.pi / 4 - 0.25, np.pi / 4 + 0.25)
        stereo = np.stack([np.cos(pan) * mono, np.sin(pan) * mono]) * np.sqrt(2.0)
        stereo = np.clip(stereo, -1.0, 1.0 - 2.0**-15)
        tracks[stem] = StereoTrack(stereo[0], stereo[1], sr)
        total += stereo
    mix = np.clip(0.5 * total, -1.0, 1.0)
    tracks["mixture"] = StereoTrack(mix[0], mix[1], sr)
    return tracks


def song_name(index: int) -> str:
    return f"song_{index:03d}"


def synthesize_corpus(spec: SynthSpec, out_root: str | os.PathLike) -> list[Path]:
    """Write every song to ``out_root/{train,test}/song_NNN/*.wav`` plus the corpus parameter file."""
    root = Path(out_root)
    n_train = spec.songs - spec.n_test
    written = []
    try:
        root.mkdir(parents=True, exist_ok=True)
        (root / SPEC_FILENAME).write_text(spec.to_text())
        for i in range(spec.songs):
            split = "train" if i < n_train else "test"
            folder = root / split / song_name(i)
            folder.mkdir(parents=True, exist_ok=True)
            for name, track in synthesize_song(spec, i).items():
                write_wav(track, folder / f"{name}.wav", spec.bits)
            written.append(folder)
    except OSError as exc:
        raise OSError(f"cannot write corpus under {root}: {exc}") from exc
    return written
