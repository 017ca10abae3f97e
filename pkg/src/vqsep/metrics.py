"""Whole-track SDR, total SDR, the scaled-mixture floor, and report rendering."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .data.musdb import STEMS
from .data.wav import StereoTrack

DEFAULT_EPS = 1e-12

# Table column order and labels (Drum, Bass, Other, Vocal, Total)
TABLE_COLUMNS = (("drums", "Drum"), ("bass", "Bass"), ("other", "Other"), ("vocals", "Vocal"))


def _energy(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.dot(x, x))


def sdr_stem(reference: StereoTrack, estimate: StereoTrack, eps: float = DEFAULT_EPS) -> float:
    """``10 log10((|s_L|^2 + |s_R|^2 + eps) / (|s_L - est_L|^2 + |s_R - est_R|^2 + eps))`` in dB."""
    if len(reference) != len(estimate):
        raise ValueError(f"length mismatch: reference {len(reference)} vs estimate {len(estimate)}")
    if reference.sample_rate != estimate.sample_rate:
        raise ValueError(f"sample rate mismatch: {reference.sample_rate} vs {estimate.sample_rate}")
    num = _energy(reference.left) + _energy(reference.right)
    den = _energy(np.subtract(reference.left, estimate.left, dtype=np.float64)) + _energy(
        np.subtract(reference.right, estimate.right, dtype=np.float64)
    )
    return 10.0 * math.log10((num + eps) / (den + eps))


def total_sdr(per_stem: Sequence[float] | Mapping[str, float]) -> float:
    """Mean of exactly four per-stem SDR values."""
    values = list(per_stem.values()) if isinstance(per_stem, Mapping) else list(per_stem)
    if len(values) != 4:
        raise ValueError(f"total SDR needs exactly 4 stem values, got {len(values)}")
    return float(sum(values) / 4.0)


def is_silent(track: StereoTrack) -> bool:
    return not (np.any(track.left) or np.any(track.right))


def scaled_mixture_baseline(mixture: StereoTrack, alpha: float = 0.25) -> dict[str, StereoTrack]:
    """Every stem estimated as ``alpha * mixture``."""
    if not math.isfinite(alpha):
        raise ValueError(f"alpha must be finite, got {alpha}")
    return {stem: mixture.scaled(alpha) for stem in STEMS}


@dataclass
class TrackScores:
    name: str
    sdr: dict[str, float]
    silent: list[str] = field(default_factory=list)

    @property
    def total(self) -> float:
        return total_sdr([self.sdr[s] for s in STEMS])


def score_track(name: str, references: Mapping[str, StereoTrack], estimates: Mapping[str, StereoTrack], eps: float = DEFAULT_EPS) -> TrackScores:
    """Per-stem SDR for one song; silent references are flagged (0 dB if the estimate is silent too)."""
    scores, silent = {}, []
    for stem in STEMS:
        ref, est = references[stem], estimates[stem]
        if is_silent(ref):
            silent.append(stem)
            scores[stem] = 0.0 if is_silent(est) else sdr_stem(ref, est, eps)
        else:
            scores[stem] = sdr_stem(ref, est, eps)
    return TrackScores(name, scores, silent)


@dataclass
class SdrReport:
    """Per-stem SDR averaged over tracks; ``total`` is the mean of the four stems."""

    stems: dict[str, float]
    tracks: list[TrackScores] = field(default_factory=list)
    label: str = "Separator"

    @property
    def total(self) -> float:
        return total_sdr([self.stems[s] for s in STEMS])

    @classmethod
    def from_tracks(cls, tracks: Sequence[TrackScores], label: str = "Separator") -> "SdrReport":
        if not tracks:
            raise ValueError("no tracks to aggregate")
        stems = {s: float(np.mean([t.sdr[s] for t in tracks])) for s in STEMS}
        return cls(stems, list(tracks), label)

    def to_keyvalue(self) -> str:
        lines = [f"{s}={self.stems[s]!r}" for s in STEMS]
        lines.append(f"total={self.total!r}")
        return "\n".join(lines) + "\n"


def parse_keyvalue_report(text: str) -> dict[str, float]:
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            key, _, value = line.partition("=")
            out[key.strip()] = float(value)
    return out


def render_table(reports: Sequence[SdrReport]) -> str:
    """Plain-text table with columns Method | Drum | Bass | Other | Vocal | Total."""
    header = ["Method"] + [label for _, label in TABLE_COLUMNS] + ["Total"]
    rows = [[r.label] + [f"{r.stems[s]:.3f}" for s, _ in TABLE_COLUMNS] + [f"{r.total:.3f}"] for r in reports]
    widths = [max(len(row[i]) for row in [header] + rows) for i in range(len(header))]
    fmt = lambda row: "| " + " | ".join(cell.ljust(w) for cell, w in zip(row, widths)) + " |"
    rule = "+-" + "-+-".join("-" * w for w in widths) + "-+"
    return "\n".join([rule, fmt(header), rule] + [fmt(r) for r in rows] + [rule]) + "\n"


def write_report(report: SdrReport, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(report.to_keyvalue())


def best_baseline(songs, alphas: Sequence[float] = tuple(np.round(np.arange(1, 11) * 0.1, 10))) -> tuple[float, SdrReport]:
    """Scaled-mixture floor with alpha tuned for the best total SDR over ``songs``."""
    best = None
    for alpha in alphas:
        tracks = [score_track(s.name, s.tracks, scaled_mixture_baseline(s.mixture, alpha)) for s in songs]
        report = SdrReport.from_tracks(tracks, label=f"ScaledMixture(a={alpha:g})")
        if best is None or report.total > best[1].total:
            best = (float(alpha), report)
    return best
