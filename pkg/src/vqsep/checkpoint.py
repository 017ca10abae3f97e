"""Binary ``.svq`` checkpoint format.

Little-endian throughout::

    "SVQ1"            magic, 4 bytes
    u32               version (1)
    str               stem label
    str               role tag: SE | ME | FULL
    u64               training step
    u32 + str*        model config as key=value lines
    u32               tensor count
    per tensor: str name, u32 ndim, u32 dims..., float32 data

where ``str`` is a u32 byte length followed by UTF-8 bytes.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .vqvae import ROLES, ConfigError, Encoder, ModelConfig, VqVae, decoder_shapes, encoder_shapes, model_from_params

MAGIC = b"SVQ1"
VERSION = 1


class CheckpointError(Exception):
    """Unreadable or inconsistent checkpoint."""


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    step: int = 0
    stem: str = ""
    role: str = "FULL"
    version: int = VERSION
    path: str | None = field(default=None, compare=False)

    def tensors(self) -> dict[str, ad.Tensor]:
        """Fresh trainable float32 tensors (copies) for every stored parameter."""
        return {k: ad.Tensor(v.astype(np.float32, copy=True), requires_grad=True) for k, v in self.params.items()}

    def has_full_model(self) -> bool:
        return "codebook" in self.params and any(k.startswith("decoder.") for k in self.params)

    def model(self) -> VqVae:
        if not self.has_full_model():
            raise CheckpointError(f"checkpoint {self.path or ''} ({self.role}) holds no codebook/decoder")
        return model_from_params(self.config, self.tensors(), role=self.role if self.role != "FULL" else "SE")

    def encoder(self, role: str | None = None) -> Encoder:
        enc = {k: v for k, v in self.tensors().items() if k.startswith("encoder.")}
        return Encoder(self.config, enc, role or ("ME" if self.role == "ME" else "SE"))


def checkpoint_from(obj: VqVae | Encoder, stem: str = "", role: str | None = None, step: int = 0) -> Checkpoint:
    if isinstance(obj, VqVae):
        params = obj.named_parameters()
        role = role or "FULL"
    elif isinstance(obj, Encoder):
        params = obj.params
        role = role or obj.role
    else:
        raise TypeError(f"cannot checkpoint {type(obj).__name__}")
    return Checkpoint(obj.config, {k: np.asarray(v.data, dtype=np.float32) for k, v in params.items()}, step, stem, role)


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    if ckpt.role not in ROLES:
        raise CheckpointError(f"unknown role tag {ckpt.role!r}")
    parts = [MAGIC, struct.pack("<I", VERSION), _pack_str(ckpt.stem), _pack_str(ckpt.role), struct.pack("<Q", int(ckpt.step))]
    items = ckpt.config.to_items()
    parts.append(struct.pack("<I", len(items)))
    parts.extend(_pack_str(f"{k}={v}") for k, v in items)
    parts.append(struct.pack("<I", len(ckpt.params)))
    for name, arr in ckpt.params.items():
        arr = np.asarray(arr)
        parts.append(_pack_str(name))
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(obj: VqVae | Encoder | Checkpoint, path: str | os.PathLike, stem: str = "", role: str | None = None, step: int = 0) -> None:
    ckpt = obj if isinstance(obj, Checkpoint) else checkpoint_from(obj, stem, role, step)
    blob = encode_checkpoint(ckpt)
    try:
        with open(path, "wb") as fh:
            fh.write(blob)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {os.fspath(path)}: {exc}") from exc


class _Reader:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise TruncatedCheckpointError(f"{self.path}: truncated at byte {len(self.blob)} (needed {self.pos + n})")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def text(self) -> str:
        raw = self.take(self.u32())
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"{self.path}: invalid UTF-8 string at byte {self.pos - len(raw)}") from exc


def decode_checkpoint(blob: bytes, path: str = "<bytes>") -> Checkpoint:
    r = _Reader(blob, path)
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    r.take(4)
    version = r.u32()
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported checkpoint version {version}")
    stem = r.text()
    role = r.text()
    if role not in ROLES:
        raise CheckpointError(f"{path}: unknown role tag {role!r}")
    step = r.u64()
    items = []
    for _ in range(r.u32()):
        key, sep, value = r.text().partition("=")
        if not sep:
            raise CheckpointError(f"{path}: malformed config line {key!r}")
        items.append((key, value))
    try:
        config = ModelConfig.from_items(items)
    except (ConfigError, ValueError, TypeError) as exc:
        raise CheckpointError(f"{path}: invalid model config: {exc}") from exc
    params: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.text()
        ndim = r.u32()
        dims = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        data = np.frombuffer(r.take(4 * count), dtype="<f4").astype(np.float32).reshape(dims)
        params[name] = data
    if r.pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - r.pos} trailing bytes")
    _check_shapes(config, params, role, path)
    return Checkpoint(config, params, step, stem, role, version, path)


def _check_shapes(config: ModelConfig, params: Mapping[str, np.ndarray], role: str, path: str) -> None:
    expected = dict(encoder_shapes(config))
    if role != "ME":
        expected["codebook"] = (config.codebook_size, config.latent_dim)
        expected.update(decoder_shapes(config))
    missing = [k for k in expected if k not in params]
    extra = [k for k in params if k not in expected]
    if missing or extra:
        raise CheckpointShapeError(f"{path}: parameters do not match config (missing {missing[:3]}, unexpected {extra[:3]})")
    for k, shape in expected.items():
        if tuple(params[k].shape) != shape:
            raise CheckpointShapeError(f"{path}: {k} has shape {tuple(params[k].shape)}, config implies {shape}")


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    path = os.fspath(path)
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(blob, path)
