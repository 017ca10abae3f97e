"""MUSDB18-HQ style directory layout: ``root/{train,test}/<song>/<stem>.wav``."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .wav import StereoTrack, read_wav

log = logging.getLogger(__name__)

STEMS = ("drums", "bass", "vocals", "other")
TRACK_NAMES = ("mixture",) + STEMS
SPLITS = ("train", "test")


class DatasetError(Exception):
    """Layout or content problem in a song folder."""


class MissingStemError(DatasetError):
    def __init__(self, song: str, stem: str):
        super().__init__(f"song {song!r}: missing stem: {stem}")
        self.song = song
        self.stem = stem


@dataclass
class SongFolder:
    """One song directory; audio is read and validated on first access."""

    path: Path
    _tracks: Optional[dict[str, StereoTrack]] = field(default=None, repr=False)

    @property
    def name(self) -> str:
        return self.path.name

    @property
    def tracks(self) -> dict[str, StereoTrack]:
        if self._tracks is None:
            self._tracks = self._load()
        return self._tracks

    def _load(self) -> dict[str, StereoTrack]:
        for name in TRACK_NAMES:
            if not (self.path / f"{name}.wav").is_file():
                if name == "mixture":
                    raise DatasetError(f"song {self.name!r}: missing mixture.wav")
                raise MissingStemError(self.name, name)
        tracks = {name: read_wav(self.path / f"{name}.wav") for name in TRACK_NAMES}
        ref = tracks["mixture"]
        for name, t in tracks.items():
            if len(t) != len(ref):
                raise DatasetError(f"song {self.name!r}: {name} has {len(t)} samples, mixture has {len(ref)}")
            if t.sample_rate != ref.sample_rate:
                raise DatasetError(f"song {self.name!r}: {name} sample rate {t.sample_rate} != {ref.sample_rate}")
        return tracks

    def track(self, name: str) -> StereoTrack:
        if name not in TRACK_NAMES:
            raise KeyError(f"unknown track {name!r}; expected one of {TRACK_NAMES}")
        return self.tracks[name]

    @property
    def mixture(self) -> StereoTrack:
        return self.tracks["mixture"]

    @property
    def sample_rate(self) -> int:
        return self.mixture.sample_rate

    def __len__(self) -> int:
        return len(self.mixture)

    def unload(self) -> None:
        self._tracks = None


@dataclass
class DatasetSplit:
    train: list[SongFolder]
    test: list[SongFolder]

    def __post_init__(self):
        overlap = {s.path.resolve() for s in self.train} & {s.path.resolve() for s in self.test}
        if overlap:
            raise DatasetError(f"train and test share songs: {sorted(str(p) for p in overlap)[:3]}")

    def __getitem__(self, split: str) -> list[SongFolder]:
        if split not in SPLITS:
            raise KeyError(f"unknown split {split!r}")
        return getattr(self, split)


def load_musdb_layout(root: str | os.PathLike, split: str) -> list[SongFolder]:
    """List the song folders of one split, sorted by name.

    A missing or empty split directory yields an empty list and a warning.
    """
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
    base = Path(root) / split
    if not base.is_dir():
        log.warning("no %s split under %s", split, root)
        return []
    songs = [SongFolder(p) for p in sorted(base.iterdir()) if p.is_dir()]
    if not songs:
        log.warning("split %s under %s contains no songs", split, root)
    return songs


def load_dataset(root: str | os.PathLike) -> DatasetSplit:
    return DatasetSplit(load_musdb_layout(root, "train"), load_musdb_layout(root, "test"))


def sample_training_chunk(song: SongFolder, stem: str, chunk_len: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, str]:
    """Random aligned (stem, mixture) mono crops from one song.

    ``stem`` may also be ``"mixture"``, in which case both crops are the mixture.
    Returns ``(x_stem, x_mix, channel)`` with channel ``"L"`` or ``"R"``.
    """
    n = len(song)
    if n < chunk_len:
        raise DatasetError(f"song {song.name!r} has {n} samples, shorter than chunk_len {chunk_len}")
    start = int(rng.integers(0, n - chunk_len + 1))
    ch = int(rng.integers(0, 2))
    mix = song.mixture.channel(ch)[start : start + chunk_len]
    src = song.track(stem).channel(ch)[start : start + chunk_len]
    return src, mix, "LR"[ch]
