"""Single-level VQ-VAE: dilated-conv encoder, nearest-prototype codebook, decoder.

Layout conventions: audio is ``[1, T]`` (or ``[B, 1, T]``) and latents are
channels-first ``[latent_dim, T / hop]`` (or ``[B, latent_dim, T / hop]``).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

STEM_ROLE = "SE"
MIXTURE_ROLE = "ME"
FULL_ROLE = "FULL"
ROLES = (STEM_ROLE, MIXTURE_ROLE, FULL_ROLE)


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    latent_dim: int = 64
    codebook_size: int = 2048
    n_down: int = 3
    stride: int = 2
    width: int = 32
    depth: int = 2
    dilation_growth: int = 3
    sample_rate: int = 8000
    chunk_len: int = 8192
    beta: float = 0.02

    @property
    def hop_length(self) -> int:
        return self.stride**self.n_down

    def validate(self) -> "ModelConfig":
        for name in ("latent_dim", "n_down", "stride", "width", "depth", "dilation_growth", "sample_rate", "chunk_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.codebook_size < 2:
            raise ConfigError(f"codebook_size must be >= 2, got {self.codebook_size}")
        if self.chunk_len % self.hop_length:
            raise ConfigError(f"chunk_len {self.chunk_len} is not a multiple of hop length {self.hop_length}")
        if not np.isfinite(self.beta) or self.beta < 0:
            raise ConfigError(f"beta must be finite and >= 0, got {self.beta}")
        return self

    def to_items(self) -> list[tuple[str, str]]:
        return [(f.name, repr(getattr(self, f.name))) for f in fields(self)]

    @classmethod
    def from_items(cls, items) -> "ModelConfig":
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, value in items:
            if key not in known:
                raise ConfigError(f"unknown model config key {key!r}")
            kwargs[key] = float(value) if key == "beta" else int(value)
        return cls(**kwargs).validate()

    def architecture(self) -> tuple:
        """Fields that determine parameter shapes and latent geometry."""
        return (self.latent_dim, self.codebook_size, self.n_down, self.stride, self.width, self.depth, self.dilation_growth)


def down_geometry(stride: int) -> tuple[int, int]:
    """Kernel size and padding for a strided conv that divides length exactly by ``stride``."""
    if stride % 2 == 0:
        return 2 * stride, stride // 2
    return stride, 0


# ---------------------------------------------------------------------------
# parameters


def _conv_shapes(config: ModelConfig, prefix: str, kind: str) -> list[tuple[str, tuple, int]]:
    """(name, shape, fan_in) for every parameter of the encoder or decoder."""
    w, d = config.width, config.latent_dim
    k_down, _ = down_geometry(config.stride)
    out: list[tuple[str, tuple, int]] = []

    def conv(name, c_out, c_in, k):
        out.append((f"{prefix}.{name}.weight", (c_out, c_in, k), c_in * k))
        out.append((f"{prefix}.{name}.bias", (c_out,), c_in * k))

    def convt(name, c_in, c_out, k):
        out.append((f"{prefix}.{name}.weight", (c_in, c_out, k), c_in * k))
        out.append((f"{prefix}.{name}.bias", (c_out,), c_in * k))

    def resnet(level):
        for j in range(config.depth):
            conv(f"level{level}.res{j}.conv", w, w, 3)
            conv(f"level{level}.res{j}.proj", w, w, 1)

    if kind == "encoder":
        for level in range(config.n_down):
            conv(f"level{level}.down", w, 1 if level == 0 else w, k_down)
            resnet(level)
        conv("out", d, w, 3)
    else:
        conv("in", w, d, 3)
        for level in reversed(range(config.n_down)):
            resnet(level)
            convt(f"level{level}.up", w, w, k_down)
        conv("out", 1, w, 3)
    return out


def _init_params(shapes, rng: np.random.Generator) -> dict[str, Tensor]:
    params = {}
    for name, shape, fan_in in shapes:
        bound = 1.0 / np.sqrt(fan_in)
        params[name] = ad.parameter(rng.uniform(-bound, bound, size=shape))
    return params


class _Network:
    kind = ""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        expected = {name: shape for name, shape, _ in _conv_shapes(config, self.kind, self.kind)}
        if set(expected) != set(params):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ConfigError(f"{self.kind} parameters do not match config (missing {missing[:3]}, unexpected {extra[:3]})")
        for name, shape in expected.items():
            if tuple(params[name].shape) != shape:
                raise ConfigError(f"{name}: expected shape {shape}, got {params[name].shape}")

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def _conv(self, h: Tensor, name: str, **geometry) -> Tensor:
        p = self.params
        return ad.conv1d(h, p[f"{self.kind}.{name}.weight"], p[f"{self.kind}.{name}.bias"], **geometry)

    def _resnet(self, h: Tensor, level: int, reverse: bool) -> Tensor:
        order = range(self.config.depth)
        for j in reversed(order) if reverse else order:
            dilation = self.config.dilation_growth**j
            r = ad.relu(h)
            r = self._conv(r, f"level{level}.res{j}.conv", dilation=dilation, padding=dilation)
            r = ad.relu(r)
            r = self._conv(r, f"level{level}.res{j}.proj")
            h = ad.add(h, r)
        return h


class Encoder(_Network):
    """Strided conv plus dilated residual stack per level, then a projection to latent_dim."""

    kind = "encoder"

    def __init__(self, config: ModelConfig, params: dict[str, Tensor], role: str = STEM_ROLE):
        super().__init__(config, params)
        if role not in ROLES:
            raise ConfigError(f"unknown encoder role {role!r}")
        self.role = role

    def __call__(self, x: Tensor) -> Tensor:
        _, pad = down_geometry(self.config.stride)
        h = x
        for level in range(self.config.n_down):
            h = self._conv(h, f"level{level}.down", stride=self.config.stride, padding=pad)
            h = self._resnet(h, level, reverse=False)
        return self._conv(h, "out", padding=1)


class Decoder(_Network):
    kind = "decoder"

    def __call__(self, z: Tensor) -> Tensor:
        _, pad = down_geometry(self.config.stride)
        p = self.params
        h = self._conv(z, "in", padding=1)
        for level in reversed(range(self.config.n_down)):
            h = self._resnet(h, level, reverse=True)
            h = ad.conv1d_transpose(h, p[f"decoder.level{level}.up.weight"], p[f"decoder.level{level}.up.bias"], stride=self.config.stride, padding=pad)
        return self._conv(h, "out", padding=1)


@dataclass
class Codebook:
    prototypes: Tensor

    @property
    def size(self) -> int:
        return self.prototypes.shape[0]

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]


@dataclass
class VqVae:
    encoder: Encoder
    codebook: Codebook
    decoder: Decoder
    config: ModelConfig

    @property
    def hop_length(self) -> int:
        return self.config.hop_length

    def named_parameters(self) -> dict[str, Tensor]:
        out = dict(self.encoder.params)
        out["codebook"] = self.codebook.prototypes
        out.update(self.decoder.params)
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def with_encoder(self, encoder: Encoder) -> "VqVae":
        """Same codebook and decoder behind a different encoder (the deployment swap)."""
        if encoder.config.architecture() != self.config.architecture():
            raise ConfigError("encoder architecture does not match this model's config")
        return dataclasses.replace(self, encoder=encoder)


@dataclass
class LatentSequence:
    values: Tensor
    indices: Optional[np.ndarray] = None

    @property
    def length(self) -> int:
        return self.values.shape[-1]

    @property
    def dim(self) -> int:
        return self.values.shape[-2]

    def frames(self) -> np.ndarray:
        """Time-major copy of the values, ``[..., length, dim]``."""
        return np.swapaxes(self.values.data, -1, -2).copy()


@dataclass
class Quantized:
    indices: np.ndarray
    quantized: LatentSequence
    codebook_loss: Tensor
    commit: Tensor
    latents: Optional[LatentSequence] = None


@dataclass
class LossBreakdown:
    recons: float
    codebook_loss: float
    commit: float
    total: float
    total_tensor: Optional[Tensor] = field(default=None, repr=False)
    quantized: Optional[Quantized] = field(default=None, repr=False)


def encoder_shapes(config: ModelConfig) -> dict[str, tuple]:
    return {name: shape for name, shape, _ in _conv_shapes(config, "encoder", "encoder")}


def decoder_shapes(config: ModelConfig) -> dict[str, tuple]:
    return {name: shape for name, shape, _ in _conv_shapes(config, "decoder", "decoder")}


def build_encoder(config: ModelConfig, seed: int, role: str = STEM_ROLE) -> Encoder:
    """Randomly initialized encoder; stem and mixture encoders draw from separate streams."""
    config.validate()
    rng = np.random.default_rng([seed, 1 if role != MIXTURE_ROLE else 4])
    return Encoder(config, _init_params(_conv_shapes(config, "encoder", "encoder"), rng), role)


def build_vqvae(config: ModelConfig, seed: int) -> VqVae:
    """Fresh model with deterministic seeded initialization."""
    config.validate()
    encoder = build_encoder(config, seed)
    rng = np.random.default_rng([seed, 2])
    bound = 1.0 / config.codebook_size
    codebook = Codebook(ad.parameter(rng.uniform(-bound, bound, size=(config.codebook_size, config.latent_dim))))
    rng = np.random.default_rng([seed, 3])
    decoder = Decoder(config, _init_params(_conv_shapes(config, "decoder", "decoder"), rng))
    return VqVae(encoder, codebook, decoder, config)


def model_from_params(config: ModelConfig, params: dict[str, Tensor], role: str = STEM_ROLE) -> VqVae:
    enc = {k: v for k, v in params.items() if k.startswith("encoder.")}
    dec = {k: v for k, v in params.items() if k.startswith("decoder.")}
    if "codebook" not in params:
        raise ConfigError("parameter set has no codebook")
    cb = params["codebook"]
    if cb.shape != (config.codebook_size, config.latent_dim):
        raise ConfigError(f"codebook: expected shape {(config.codebook_size, config.latent_dim)}, got {cb.shape}")
    return VqVae(Encoder(config, enc, role), Codebook(cb), Decoder(config, dec), config)


# ---------------------------------------------------------------------------
# forward pieces


def _as_audio(x, hop: int) -> Tensor:
    if not isinstance(x, Tensor):
        x = ad.tensor(x)
    if x.ndim == 1:
        x = Tensor(x.data[None], x.requires_grad)
    if x.ndim not in (2, 3) or x.shape[-2] != 1:
        raise ad.ShapeError(f"expected mono audio [1, T] or [B, 1, T], got {x.shape}")
    if x.shape[-1] % hop:
        raise ad.ShapeError(f"input length {x.shape[-1]} is not a multiple of hop length {hop}")
    return x


def encode(model: VqVae | Encoder, x) -> LatentSequence:
    """Continuous latents ``E(x)``; ``x`` length must be a multiple of the hop length."""
    encoder = model.encoder if isinstance(model, VqVae) else model
    x = _as_audio(x, encoder.config.hop_length)
    return LatentSequence(encoder(x))


def nearest_prototypes(prototypes: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Index of the euclidean-nearest prototype for each row, lowest index on ties.

    Distances come from the expanded form ``|c|^2 - 2 r.c`` in working
    precision; rows whose best and second-best candidates are within rounding
    error of each other are re-resolved exactly in float64.
    """
    rows = np.asarray(rows)
    cb = np.asarray(prototypes)
    n, dim = rows.shape
    cb_sq = np.einsum("kd,kd->k", cb, cb)
    # one gemm: [r, 1] . [-2c, |c|^2]
    lhs = np.empty((n, dim + 1), dtype=rows.dtype)
    lhs[:, :dim] = rows
    lhs[:, dim] = 1
    rhs = np.empty((dim + 1, len(cb)), dtype=cb.dtype)
    rhs[:dim] = -2 * cb.T
    rhs[dim] = cb_sq
    dist = lhs @ rhs
    order = np.arange(n)
    idx = np.argmin(dist, axis=1)
    best = dist[order, idx].copy()
    dist[order, idx] = np.inf
    second = dist.min(axis=1)
    dist[order, idx] = best
    row_sq = np.einsum("nd,nd->n", rows, rows)
    tol = 64 * np.finfo(dist.dtype).eps * (row_sq + cb_sq.max()) + np.finfo(dist.dtype).tiny
    ambiguous = np.flatnonzero(second - best <= tol)
    if ambiguous.size:
        cb64 = cb.astype(np.float64)
        for r in ambiguous:
            cand = np.flatnonzero(dist[r] <= best[r] + tol[r])
            diff = rows[r].astype(np.float64)[None, :] - cb64[cand]
            exact = np.sum(diff * diff, axis=1)
            idx[r] = cand[np.argmin(exact)]
    return idx


def quantize(codebook: Codebook, e: LatentSequence) -> Quantized:
    """Snap each latent frame to its nearest prototype.

    Returns the straight-through quantized latents (forward value = prototypes,
    gradient flows to ``e``), the codebook loss ``mse(detach(e), q)`` and the
    commitment loss ``mse(e, detach(q))``.
    """
    if e.dim != codebook.dim:
        raise ad.ShapeError(f"latent dim {e.dim} does not match codebook dim {codebook.dim}")
    values = e.values
    frames = np.swapaxes(values.data, -1, -2)
    lead = frames.shape[:-1]
    idx = nearest_prototypes(codebook.prototypes.data, frames.reshape(-1, codebook.dim)).reshape(lead)
    q_frames = ad.gather_rows(codebook.prototypes, idx)
    q = ad.transpose_last(q_frames)
    codebook_loss = ad.mse(ad.detach(values), q)
    commit = ad.mse(values, ad.detach(q))
    st = ad.straight_through(values, q)
    return Quantized(idx, LatentSequence(st, idx), codebook_loss, commit, e)


def lookup(codebook: Codebook, indices: np.ndarray) -> LatentSequence:
    """Latents made of the prototypes at ``indices`` (no gradient)."""
    q = codebook.prototypes.data[np.asarray(indices)]
    return LatentSequence(ad.Tensor(np.ascontiguousarray(np.swapaxes(q, -1, -2))), np.asarray(indices))


def decode(model: VqVae | Decoder, z: LatentSequence | Tensor) -> Tensor:
    decoder = model.decoder if isinstance(model, VqVae) else model
    values = z.values if isinstance(z, LatentSequence) else z
    if values.shape[-2] != decoder.config.latent_dim:
        raise ad.ShapeError(f"latent dim {values.shape[-2]} does not match decoder latent dim {decoder.config.latent_dim}")
    return decoder(values)


def forward_with_losses(model: VqVae, x) -> tuple[Tensor, LossBreakdown]:
    """Full pass ``y = D(quantize(E(x)))`` with ``L = recons + codebook + beta * commit``."""
    x = _as_audio(x, model.hop_length)
    e = encode(model, x)
    qz = quantize(model.codebook, e)
    y = decode(model, qz.quantized)
    recons = ad.mse(y, x)
    total = ad.add(ad.add(recons, qz.codebook_loss), ad.scale(qz.commit, model.config.beta))
    losses = LossBreakdown(recons.item(), qz.codebook_loss.item(), qz.commit.item(), total.item(), total, qz)
    return y, losses


def reconstruct(model: VqVae, x) -> np.ndarray:
    """Inference-only forward pass, returns the decoded audio array."""
    with ad.no_grad():
        e = encode(model, x)
        idx = nearest_prototypes(model.codebook.prototypes.data, np.swapaxes(e.values.data, -1, -2).reshape(-1, model.config.latent_dim))
        idx = idx.reshape(e.values.shape[:-2] + (e.length,))
        return decode(model, lookup(model.codebook, idx)).data
