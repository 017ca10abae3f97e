"""Two-phase training: per-stem VQ-VAE (phase 1) and mixture-encoder alignment (phase 2)."""

from __future__ import annotations

import logging
import math
import os
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint, checkpoint_from, load_checkpoint, save_checkpoint
from .data.musdb import STEMS, DatasetError, SongFolder, sample_training_chunk
from .vqvae import (
    MIXTURE_ROLE,
    STEM_ROLE,
    ConfigError,
    Encoder,
    ModelConfig,
    VqVae,
    build_encoder,
    build_vqvae,
    encode,
    forward_with_losses,
    nearest_prototypes,
    reconstruct,
)

log = logging.getLogger(__name__)

ALIGN_TARGETS = ("continuous", "quantized")


class NumericError(RuntimeError):
    """A loss or gradient became non-finite."""


@dataclass
class TrainConfig:
    batch_size: int = 4
    steps: int = 1000
    chunk_len: int = 8192
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    log_every: int = 100
    checkpoint_every: int = 1000
    init_checkpoint: Optional[str] = None
    grad_clip: float = 1.0
    dead_code_steps: int = 256
    align_target: str = "continuous"
    checkpoint_dir: Optional[str] = None

    def validate(self, model_config: ModelConfig | None = None) -> "TrainConfig":
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.chunk_len < 1:
            raise ConfigError(f"chunk_len must be >= 1, got {self.chunk_len}")
        if model_config is not None and self.chunk_len % model_config.hop_length:
            raise ConfigError(f"chunk_len {self.chunk_len} is not a multiple of hop length {model_config.hop_length}")
        if self.align_target not in ALIGN_TARGETS:
            raise ConfigError(f"align_target must be one of {ALIGN_TARGETS}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        return self


@dataclass
class StepRecord:
    step: int
    loss: float
    recons: float = math.nan
    codebook: float = math.nan
    commit: float = math.nan
    grad_norm: float = math.nan
    wall: float = 0.0


@dataclass
class TrainLog:
    phase: str
    stem: str
    records: list[StepRecord] = field(default_factory=list)
    evals: list[tuple[int, float]] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)

    def append(self, rec: StepRecord) -> None:
        if self.records and rec.step <= self.records[-1].step:
            raise ValueError(f"step {rec.step} does not follow {self.records[-1].step}")
        self.records.append(rec)

    def losses(self, key: str = "loss") -> np.ndarray:
        return np.array([getattr(r, key) for r in self.records])

    def summary(self) -> dict:
        if not self.records:
            return {"phase": self.phase, "stem": self.stem, "steps": 0}
        losses = self.losses()
        k = max(1, len(losses) // 10)
        return {
            "phase": self.phase,
            "stem": self.stem,
            "steps": self.records[-1].step,
            "first_median": float(np.median(losses[:k])),
            "last_median": float(np.median(losses[-k:])),
            "wall": self.records[-1].wall,
        }


class ChunkSource:
    """Random aligned training crops drawn from in-memory songs."""

    def __init__(self, songs: Sequence[SongFolder], sample_rate: int | None = None):
        self.songs = list(songs)
        if not self.songs:
            raise DatasetError("training dataset is empty")
        if sample_rate is not None:
            for s in self.songs:
                if s.sample_rate != sample_rate:
                    raise DatasetError(f"song {s.name!r} is {s.sample_rate} Hz but the model expects {sample_rate} Hz; resample upstream")

    def sample(self, stem: str, chunk_len: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        song = self.songs[int(rng.integers(len(self.songs)))]
        x_st, x_mt, _ = sample_training_chunk(song, stem, chunk_len, rng)
        return x_st, x_mt

    def batch(self, stem: str, chunk_len: int, batch_size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """``(x_stem, x_mix)``, each ``[B, 1, chunk_len]`` float32."""
        pairs = [self.sample(stem, chunk_len, rng) for _ in range(batch_size)]
        x_st = np.stack([p[0] for p in pairs])[:, None, :].astype(np.float32)
        x_mt = np.stack([p[1] for p in pairs])[:, None, :].astype(np.float32)
        return x_st, x_mt


def _as_source(dataset, sample_rate: int) -> ChunkSource:
    if isinstance(dataset, ChunkSource):
        return dataset
    return ChunkSource(list(dataset), sample_rate)


def _check_finite(step: int, **values: float) -> None:
    bad = {k: v for k, v in values.items() if not math.isfinite(v)}
    if bad:
        detail = ", ".join(f"{k}={v}" for k, v in values.items())
        raise NumericError(f"non-finite loss at step {step}: {detail}")


def _optimizer(params, cfg: TrainConfig) -> ad.Adam:
    return ad.Adam(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)


def _reset_dead_codes(model: VqVae, opt: ad.Adam, last_used: np.ndarray, step: int, frames: np.ndarray, patience: int, rng: np.random.Generator) -> int:
    dead = np.flatnonzero(step - last_used >= patience)
    if dead.size == 0:
        return 0
    pick = rng.choice(len(frames), size=dead.size, replace=dead.size > len(frames))
    cb = model.codebook.prototypes
    new = cb.data.copy()
    new[dead] = frames[pick]
    cb.data = new
    slot = next(i for i, p in enumerate(opt.params) if p is cb)
    if opt.state.m:
        opt.state.m[slot][dead] = 0
        opt.state.v[slot][dead] = 0
    last_used[dead] = step
    return int(dead.size)


def _initial_model(model_config: ModelConfig, cfg: TrainConfig) -> VqVae:
    if cfg.init_checkpoint is None:
        return build_vqvae(model_config, cfg.seed)
    ckpt = load_checkpoint(cfg.init_checkpoint)
    if ckpt.config.architecture() != model_config.architecture():
        raise ConfigError(f"init checkpoint {cfg.init_checkpoint} architecture does not match the model config")
    model = ckpt.model()
    model.config = model_config
    model.encoder.config = model_config
    model.decoder.config = model_config
    return model


def eval_recons(model: VqVae, chunks: np.ndarray) -> float:
    """Mean reconstruction MSE on fixed ``[N, 1, T]`` chunks (no gradient)."""
    y = reconstruct(model, chunks.astype(np.float32))
    return float(np.mean(np.square(y.astype(np.float64) - chunks)))


def fixed_eval_chunks(dataset, stem: str, chunk_len: int, count: int, seed: int) -> np.ndarray:
    source = dataset if isinstance(dataset, ChunkSource) else ChunkSource(list(dataset))
    rng = np.random.default_rng([seed, 900])
    return np.stack([source.sample(stem, chunk_len, rng)[0] for _ in range(count)])[:, None, :].astype(np.float32)


def train_stem_phase1(
    dataset,
    stem: str,
    model_config: ModelConfig,
    train_config: TrainConfig,
    eval_chunks: np.ndarray | None = None,
    eval_every: int = 0,
    until: Callable[[int, float], bool] | None = None,
) -> tuple[VqVae, TrainLog]:
    """Train encoder, codebook and decoder on isolated ``stem`` audio.

    ``stem`` may be ``"mixture"`` to pretrain a generic model on mixed audio.
    With ``eval_chunks`` and ``eval_every``, reconstruction error on those
    chunks is recorded in ``TrainLog.evals``; ``until(step, value)`` returning
    True stops training early.
    """
    model_config.validate()
    cfg = train_config.validate(model_config)
    source = _as_source(dataset, model_config.sample_rate)
    model = _initial_model(model_config, cfg)
    params = model.parameters()
    opt = _optimizer(params, cfg)
    rng = np.random.default_rng([cfg.seed, 100])
    reset_rng = np.random.default_rng([cfg.seed, 101])
    last_used = np.zeros(model_config.codebook_size, dtype=np.int64)
    tlog = TrainLog("phase1", stem)
    start = time.perf_counter()

    def evaluate(step: int) -> bool:
        if eval_chunks is None or not eval_every or step % eval_every:
            return False
        value = eval_recons(model, eval_chunks)
        tlog.evals.append((step, value))
        return bool(until and until(step, value))

    if evaluate(0):
        return model, tlog
    for step in range(1, cfg.steps + 1):
        x, _ = source.batch(stem, cfg.chunk_len, cfg.batch_size, rng)
        _, losses = forward_with_losses(model, x)
        _check_finite(step, recons=losses.recons, codebook=losses.codebook_loss, commit=losses.commit)
        ad.backward(losses.total_tensor)
        grads = [p.grad for p in params]
        gnorm = ad.clip_grad_norm(grads, cfg.grad_clip)
        _check_finite(step, grad_norm=gnorm)
        opt.step()
        opt.zero_grad()
        q = losses.quantized
        last_used[np.unique(q.indices)] = step
        if cfg.dead_code_steps > 0:
            frames = q.latents.frames().reshape(-1, model_config.latent_dim)
            _reset_dead_codes(model, opt, last_used, step, frames, cfg.dead_code_steps, reset_rng)
        tlog.append(StepRecord(step, losses.total, losses.recons, losses.codebook_loss, losses.commit, gnorm, time.perf_counter() - start))
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("phase1 %s step %d recons %.6f codebook %.6f commit %.6f", stem, step, losses.recons, losses.codebook_loss, losses.commit)
        if cfg.checkpoint_dir and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            path = Path(cfg.checkpoint_dir) / f"{stem}.se.step{step}.svq"
            save_checkpoint(model, path, stem=stem, role=STEM_ROLE, step=step)
            tlog.checkpoints.append(str(path))
        if evaluate(step):
            break
    return model, tlog


def train_mixture_phase2(
    dataset,
    stem: str,
    stem_ckpt: Checkpoint,
    model_config: ModelConfig,
    train_config: TrainConfig,
) -> tuple[Checkpoint, TrainLog]:
    """Fit a fresh mixture encoder so that ``ME(x_mix)`` matches the frozen ``SE(x_stem)``."""
    model_config.validate()
    cfg = train_config.validate(model_config)
    if stem_ckpt.config.architecture() != model_config.architecture():
        raise ConfigError(f"stem checkpoint for {stem!r} was trained with a different architecture than the mixture encoder config")
    if stem_ckpt.role == MIXTURE_ROLE:
        raise ConfigError("phase 2 needs a stem (SE) checkpoint, got a mixture encoder")
    source = _as_source(dataset, model_config.sample_rate)
    se = stem_ckpt.encoder(role=STEM_ROLE)
    for p in se.parameters():
        p.requires_grad = False
    prototypes = stem_ckpt.params["codebook"] if cfg.align_target == "quantized" else None
    if cfg.init_checkpoint:
        me = load_checkpoint(cfg.init_checkpoint).encoder(role=MIXTURE_ROLE)
        me.config = model_config
    else:
        me = build_encoder(model_config, cfg.seed, role=MIXTURE_ROLE)
    params = me.parameters()
    opt = _optimizer(params, cfg)
    rng = np.random.default_rng([cfg.seed, 200])
    tlog = TrainLog("phase2", stem)
    start = time.perf_counter()
    for step in range(1, cfg.steps + 1):
        x_st, x_mt = source.batch(stem, cfg.chunk_len, cfg.batch_size, rng)
        target = alignment_target(se, x_st, prototypes)
        e_mt = encode(me, x_mt).values
        loss = ad.mse(e_mt, ad.Tensor(target))
        value = loss.item()
        _check_finite(step, loss=value)
        ad.backward(loss)
        grads = [p.grad for p in params]
        gnorm = ad.clip_grad_norm(grads, cfg.grad_clip)
        opt.step()
        opt.zero_grad()
        tlog.append(StepRecord(step, value, grad_norm=gnorm, wall=time.perf_counter() - start))
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("phase2 %s step %d align mse %.6f", stem, step, value)
        if cfg.checkpoint_dir and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            path = Path(cfg.checkpoint_dir) / f"{stem}.me.step{step}.svq"
            save_checkpoint(me, path, stem=stem, role=MIXTURE_ROLE, step=step)
            tlog.checkpoints.append(str(path))
    return checkpoint_from(me, stem, MIXTURE_ROLE, cfg.steps), tlog


def alignment_target(se: Encoder, x_st: np.ndarray, prototypes: np.ndarray | None = None) -> np.ndarray:
    """Frozen-encoder latents ``SE(x_st)`` (optionally snapped to the codebook)."""
    with ad.no_grad():
        e_st = encode(se, x_st).values.data
    if prototypes is None:
        return e_st
    frames = np.swapaxes(e_st, -1, -2)
    idx = nearest_prototypes(prototypes, frames.reshape(-1, frames.shape[-1]))
    return np.ascontiguousarray(np.swapaxes(prototypes[idx].reshape(frames.shape), -1, -2))


def alignment_loss(se: Encoder, me: Encoder, x_st: np.ndarray, x_mt: np.ndarray) -> float:
    with ad.no_grad():
        e_mt = encode(me, x_mt).values
    return ad.mse(e_mt, ad.Tensor(alignment_target(se, x_st))).item()


# ---------------------------------------------------------------------------
# transfer experiment


@dataclass
class TransferResult:
    seed: int
    threshold: float
    scratch_evals: list[tuple[int, float]]
    finetune_evals: list[tuple[int, float]]
    steps_to_threshold: Optional[int]
    budget: int

    @property
    def passed(self) -> bool:
        return self.steps_to_threshold is not None and self.steps_to_threshold <= self.budget


def pretrain_generic(
    train_songs,
    model_config: ModelConfig,
    train_config: TrainConfig,
    path: str | os.PathLike,
    seed: int = 7919,
) -> Checkpoint:
    """Train one stem-agnostic model on mixtures (all stems sounding at once) and save it to ``path``."""
    import dataclasses

    cfg = dataclasses.replace(train_config, seed=seed, init_checkpoint=None, checkpoint_dir=None)
    generic, _ = train_stem_phase1(train_songs, "mixture", model_config, cfg)
    save_checkpoint(generic, path, stem="mixture", role="FULL", step=cfg.steps)
    return load_checkpoint(path)


def transfer_trial(
    train_songs,
    stem: str,
    model_config: ModelConfig,
    train_config: TrainConfig,
    seed: int,
    generic_checkpoint: str | os.PathLike,
    scratch_steps: int = 8000,
    budget: int = 4000,
    eval_every: int = 250,
    eval_count: int = 8,
) -> TransferResult:
    """Random init vs generic-pretrained init on one stem.

    The threshold is the scratch run's eval reconstruction error at
    ``scratch_steps``; the result records the first eval step at which the
    run initialized from ``generic_checkpoint`` reaches it.
    """
    import dataclasses

    source = _as_source(train_songs, model_config.sample_rate)
    chunks = fixed_eval_chunks(source, stem, train_config.chunk_len, eval_count, seed)
    base = dataclasses.replace(train_config, seed=seed, init_checkpoint=None, checkpoint_dir=None)

    _, scratch_log = train_stem_phase1(source, stem, model_config, dataclasses.replace(base, steps=scratch_steps), chunks, eval_every)
    threshold = scratch_log.evals[-1][1]

    ft_cfg = dataclasses.replace(base, steps=budget, init_checkpoint=str(generic_checkpoint))
    _, ft_log = train_stem_phase1(source, stem, model_config, ft_cfg, chunks, eval_every, until=lambda s, v: v <= threshold)
    hit = next((s for s, v in ft_log.evals if v <= threshold), None)
    return TransferResult(seed, threshold, scratch_log.evals, ft_log.evals, hit, budget)
