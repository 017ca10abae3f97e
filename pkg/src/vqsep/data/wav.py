"""PCM WAV reading and writing (16/24-bit, mono or stereo, little-endian RIFF)."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

__all__ = [
    "StereoTrack",
    "WavError",
    "NotPcmError",
    "BitDepthError",
    "MalformedWavError",
    "read_wav",
    "write_wav",
    "quantize_pcm",
]

WAVE_FORMAT_PCM = 0x0001
WAVE_FORMAT_EXTENSIBLE = 0xFFFE
_PCM_SUBFORMAT_TAIL = b"\x00\x00\x00\x00\x10\x00\x80\x00\x00\xaa\x00\x38\x9b\x71"


class WavError(Exception):
    """Base class for WAV decoding problems."""


class NotPcmError(WavError):
    pass


class BitDepthError(WavError):
    pass


class MalformedWavError(WavError):
    pass


@dataclass
class StereoTrack:
    """Two equal-length channels of float samples in [-1, 1)."""

    left: np.ndarray
    right: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.left = np.asarray(self.left)
        self.right = np.asarray(self.right)
        if self.left.ndim != 1 or self.right.ndim != 1:
            raise ValueError("channels must be 1-D")
        if len(self.left) != len(self.right):
            raise ValueError(f"channel lengths differ: {len(self.left)} vs {len(self.right)}")
        if self.sample_rate <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")

    @classmethod
    def from_array(cls, samples: np.ndarray, sample_rate: int) -> "StereoTrack":
        """Build from a ``[2, n]`` array (or ``[n]``, duplicated to both channels)."""
        samples = np.asarray(samples)
        if samples.ndim == 1:
            return cls(samples, samples.copy(), sample_rate)
        if samples.shape[0] != 2:
            raise ValueError(f"expected [2, n] samples, got {samples.shape}")
        return cls(samples[0], samples[1], sample_rate)

    def __len__(self) -> int:
        return len(self.left)

    @property
    def samples(self) -> np.ndarray:
        return np.stack([self.left, self.right])

    def channel(self, index: int) -> np.ndarray:
        return (self.left, self.right)[index]

    def scaled(self, alpha: float) -> "StereoTrack":
        return StereoTrack(self.left * alpha, self.right * alpha, self.sample_rate)

    def swapped(self) -> "StereoTrack":
        return StereoTrack(self.right, self.left, self.sample_rate)


def _read_chunks(blob: bytes, path) -> dict[bytes, bytes]:
    if len(blob) < 12 or blob[:4] != b"RIFF" or blob[8:12] != b"WAVE":
        raise MalformedWavError(f"{path}: not a RIFF/WAVE file")
    chunks: dict[bytes, bytes] = {}
    pos = 12
    while pos + 8 <= len(blob):
        cid, size = struct.unpack_from("<4sI", blob, pos)
        body = blob[pos + 8 : pos + 8 + size]
        if len(body) < size:
            raise MalformedWavError(f"{path}: chunk {cid!r} truncated ({len(body)} of {size} bytes)")
        chunks.setdefault(cid, body)
        pos += 8 + size + (size & 1)
    return chunks


def read_wav(path: str | os.PathLike) -> StereoTrack:
    """Decode a PCM WAV file into float samples; mono is duplicated to both channels."""
    with open(path, "rb") as fh:
        blob = fh.read()
    chunks = _read_chunks(blob, path)
    if b"fmt " not in chunks:
        raise MalformedWavError(f"{path}: missing fmt chunk")
    if b"data" not in chunks:
        raise MalformedWavError(f"{path}: missing data chunk")
    fmt = chunks[b"fmt "]
    if len(fmt) < 16:
        raise MalformedWavError(f"{path}: fmt chunk too short")
    tag, channels, rate, _, block_align, bits = struct.unpack_from("<HHIIHH", fmt)
    if tag == WAVE_FORMAT_EXTENSIBLE:
        if len(fmt) < 40 or fmt[26:40] != _PCM_SUBFORMAT_TAIL or struct.unpack_from("<H", fmt, 24)[0] != WAVE_FORMAT_PCM:
            raise NotPcmError(f"{path}: extensible WAV with non-PCM subformat")
    elif tag != WAVE_FORMAT_PCM:
        raise NotPcmError(f"{path}: format tag 0x{tag:04x} is not PCM")
    if bits not in (16, 24):
        raise BitDepthError(f"{path}: unsupported bit depth {bits}")
    if channels not in (1, 2):
        raise MalformedWavError(f"{path}: unsupported channel count {channels}")
    width = bits // 8
    if block_align != width * channels:
        raise MalformedWavError(f"{path}: block align {block_align} inconsistent with {channels}ch/{bits}-bit")
    data = chunks[b"data"]
    if len(data) % block_align:
        raise MalformedWavError(f"{path}: data chunk is not a whole number of frames")

    if bits == 16:
        ints = np.frombuffer(data, dtype="<i2").astype(np.int32)
    else:
        raw = np.frombuffer(data, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        ints = raw[:, 0] | (raw[:, 1] << 8) | (raw[:, 2] << 16)
        ints = np.where(ints >= 1 << 23, ints - (1 << 24), ints)
    samples = (ints / float(1 << (bits - 1))).astype(np.float32).reshape(-1, channels).T
    if channels == 1:
        return StereoTrack(samples[0], samples[0].copy(), rate)
    return StereoTrack(np.ascontiguousarray(samples[0]), np.ascontiguousarray(samples[1]), rate)


def quantize_pcm(samples: np.ndarray, bits: int) -> np.ndarray:
    """Clamp to the representable range and round half away from zero."""
    full = float(1 << (bits - 1))
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0 - 1.0 / full) * full
    return (np.sign(x) * np.floor(np.abs(x) + 0.5)).astype(np.int32)


def write_wav(track: StereoTrack, path: str | os.PathLike, bits: int = 16) -> None:
    if bits not in (16, 24):
        raise BitDepthError(f"unsupported bit depth {bits}")
    if not (np.all(np.isfinite(track.left)) and np.all(np.isfinite(track.right))):
        raise ValueError("cannot write non-finite samples")
    codes = quantize_pcm(np.stack([track.left, track.right], axis=1), bits)
    if bits == 16:
        payload = codes.astype("<i2").tobytes()
    else:
        u = (codes.reshape(-1) & 0xFFFFFF).astype("<u4")
        payload = u.view(np.uint8).reshape(-1, 4)[:, :3].tobytes()
    width = bits // 8
    header = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    header += b"fmt " + struct.pack("<IHHIIHH", 16, WAVE_FORMAT_PCM, 2, int(track.sample_rate), int(track.sample_rate) * 2 * width, 2 * width, bits)
    header += b"data" + struct.pack("<I", len(payload))
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(payload)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
