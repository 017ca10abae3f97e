"""``vqsep`` command line: synthesize data, train both phases, separate, evaluate, gradcheck.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import gradcheck
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data.musdb import STEMS, DatasetError, load_musdb_layout
from .data.synth import SynthSpec, synthesize_corpus
from .data.wav import WavError, read_wav, write_wav
from .metrics import SdrReport, best_baseline, render_table, score_track, write_report
from .separation import SeparatorError, assemble_separator, separate_track
from .training import NumericError, TrainConfig, train_mixture_phase2, train_stem_phase1
from .vqvae import FULL_ROLE, MIXTURE_ROLE, STEM_ROLE, ConfigError, ModelConfig

log = logging.getLogger("vqsep")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

MODEL_KEYS = tuple(f.name for f in dataclasses.fields(ModelConfig))
TRAIN_KEYS = ("lr", "batch_size", "steps", "seed")
CONFIG_KEYS = MODEL_KEYS + TRAIN_KEYS + ("overlap",)
FLOAT_KEYS = ("beta", "lr")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def parse_config_text(text: str, source: str = "<config>") -> dict[str, int | float]:
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    out: dict[str, int | float] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise UsageError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        if key not in CONFIG_KEYS:
            raise UsageError(f"{source}:{lineno}: unknown config key {key!r}")
        try:
            out[key] = float(value) if key in FLOAT_KEYS else int(value)
        except ValueError:
            raise UsageError(f"{source}:{lineno}: bad value for {key}: {value!r}") from None
    return out


def load_config(path: str | None) -> dict[str, int | float]:
    if path is None:
        return {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, path)


def _merged(args) -> dict[str, int | float]:
    values = load_config(getattr(args, "config", None))
    for key in CONFIG_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    return values


def model_config_from(values: dict) -> ModelConfig:
    return ModelConfig(**{k: v for k, v in values.items() if k in MODEL_KEYS}).validate()


def train_config_from(values: dict, model: ModelConfig, args) -> TrainConfig:
    kw = {k: v for k, v in values.items() if k in TRAIN_KEYS}
    kw["chunk_len"] = model.chunk_len
    for name in ("log_every", "checkpoint_every", "checkpoint_dir", "align_target"):
        if getattr(args, name, None) is not None:
            kw[name] = getattr(args, name)
    if getattr(args, "init", None):
        kw["init_checkpoint"] = args.init
    return TrainConfig(**kw).validate(model)


def _songs(root: str, split: str):
    songs = load_musdb_layout(root, split)
    if not songs:
        raise DataError(f"no songs in split {split!r} under {root}")
    return songs


def _add_config_flags(p: argparse.ArgumentParser, keys=CONFIG_KEYS) -> None:
    for key in keys:
        p.add_argument("--" + key.replace("_", "-"), dest=key, type=float if key in FLOAT_KEYS else int, default=None, help=argparse.SUPPRESS)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth_data(args) -> int:
    spec = SynthSpec(seed=args.seed, songs=args.songs)
    if args.sample_rate is not None:
        spec.sample_rate = args.sample_rate
    if args.duration is not None:
        spec.duration = args.duration
    if args.test_fraction is not None:
        spec.test_fraction = args.test_fraction
    if spec.songs < 1 or spec.duration <= 0 or spec.sample_rate < 1:
        raise UsageError("--songs, --duration and --sample-rate must be positive")
    folders = synthesize_corpus(spec, args.out)
    log.info("wrote %d songs (%d test) under %s", len(folders), spec.n_test, args.out)
    return EXIT_OK


def cmd_train_stem(args) -> int:
    values = _merged(args)
    model = model_config_from(values)
    cfg = train_config_from(values, model, args)
    if args.stem not in STEMS + ("mixture",):
        raise UsageError(f"--stem must be one of {', '.join(STEMS + ('mixture',))}")
    songs = _songs(args.data, "train")
    trained, tlog = train_stem_phase1(songs, args.stem, model, cfg)
    role = FULL_ROLE if args.stem == "mixture" else STEM_ROLE
    save_checkpoint(trained, args.out, stem=args.stem, role=role, step=cfg.steps)
    log.info("phase1 %s: %s", args.stem, tlog.summary())
    return EXIT_OK


def cmd_train_mix(args) -> int:
    values = _merged(args)
    model = model_config_from(values)
    cfg = train_config_from(values, model, args)
    if args.stem not in STEMS:
        raise UsageError(f"--stem must be one of {', '.join(STEMS)}")
    stem_ckpt = load_checkpoint(args.stem_ckpt)
    songs = _songs(args.data, "train")
    me, tlog = train_mixture_phase2(songs, args.stem, stem_ckpt, model, cfg)
    save_checkpoint(me, args.out, role=MIXTURE_ROLE, stem=args.stem, step=cfg.steps)
    log.info("phase2 %s: %s", args.stem, tlog.summary())
    return EXIT_OK


def _load_separator(ckpt_dir: str, overlap: int):
    root = Path(ckpt_dir)
    stem_ckpts, mix_ckpts = {}, {}
    for stem in STEMS:
        for kind, store in (("se", stem_ckpts), ("me", mix_ckpts)):
            path = root / f"{stem}.{kind}.svq"
            if not path.is_file():
                raise DataError(f"missing checkpoint for stem {stem}: {path}")
            store[stem] = load_checkpoint(path)
    return assemble_separator(stem_ckpts, mix_ckpts, overlap=overlap)


def cmd_separate(args) -> int:
    sep = _load_separator(args.ckpt_dir, args.overlap or 0)
    mixture = read_wav(args.mixture)
    result = separate_track(sep, mixture)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for stem in STEMS:
        write_wav(result[stem], out / f"{stem}.wav")
    log.info("wrote %s", ", ".join(f"{stem}.wav" for stem in STEMS))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    values = load_config(args.config)
    overlap = args.overlap if args.overlap is not None else int(values.get("overlap", 0))
    sep = _load_separator(args.ckpt_dir, overlap)
    songs = _songs(args.data, args.split)
    tracks = []
    for song in songs:
        result = separate_track(sep, song.mixture)
        tracks.append(score_track(song.name, song.tracks, result.stems))
        log.info("%s: %s", song.name, " ".join(f"{s}={v:.3f}" for s, v in tracks[-1].sdr.items()))
        song.unload()
    report = SdrReport.from_tracks(tracks, label="Separator")
    alpha, baseline = best_baseline(songs)
    write_report(report, args.report)
    sys.stdout.write(render_table([report, baseline]))
    log.info("best scaled-mixture alpha %g", alpha)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    ok = True
    for dtype in (np.float32, np.float64):
        for r in gradcheck.run_suite(dtype, seed=args.seed, count=args.count):
            status = "ok" if r.passed else "FAIL"
            print(f"{r.precision} {status} rel_err={r.rel_error:.3e} tol={r.tolerance:g} {r.name}")
            ok &= r.passed
    return EXIT_OK if ok else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vqsep", description="Two-phase VQ-VAE music source separation.")
    parser.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-data", help="write a seeded synthetic four-stem corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--songs", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sample-rate", type=int)
    p.add_argument("--duration", type=float, help="seconds per song")
    p.add_argument("--test-fraction", type=float)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train-stem", help="phase 1: train a VQ-VAE on one isolated stem")
    p.add_argument("--data", required=True)
    p.add_argument("--stem", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--init", help="initialize from this checkpoint")
    p.add_argument("--log-every", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--checkpoint-dir")
    _add_config_flags(p, MODEL_KEYS + TRAIN_KEYS)
    p.set_defaults(func=cmd_train_stem)

    p = sub.add_parser("train-mix", help="phase 2: fit a mixture encoder to a frozen stem encoder")
    p.add_argument("--data", required=True)
    p.add_argument("--stem", required=True)
    p.add_argument("--stem-ckpt", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--init", help="initialize the mixture encoder from this checkpoint")
    p.add_argument("--align-target", choices=("continuous", "quantized"))
    p.add_argument("--log-every", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--checkpoint-dir")
    _add_config_flags(p, MODEL_KEYS + TRAIN_KEYS)
    p.set_defaults(func=cmd_train_mix)

    p = sub.add_parser("separate", help="split a mixture WAV into four stem WAVs")
    p.add_argument("--mixture", required=True)
    p.add_argument("--ckpt-dir", required=True)
    p.add_argument("--out-dir", default="separated")
    p.add_argument("--overlap", type=int)
    p.set_defaults(func=cmd_separate)

    p = sub.add_parser("evaluate", help="separate a split and write SDR reports")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--ckpt-dir", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--config")
    p.add_argument("--overlap", type=int)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=10)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    root = logging.getLogger()
    root.addHandler(handler)
    root.setLevel(logging.WARNING if args.quiet else logging.INFO)
    try:
        return args.func(args)
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_USAGE
    except NumericError as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except (DataError, DatasetError, WavError, CheckpointError, SeparatorError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_DATA
    finally:
        root.removeHandler(handler)


def main() -> None:
    sys.exit(run())
