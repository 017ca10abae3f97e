"""Desk-scale end-to-end run driven through the command line."""

from __future__ import annotations

import os
import subprocess
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

STEMS = ("drums", "bass", "vocals", "other")

CONFIG = """\
# desk-scale separation run
sample_rate=8000
chunk_len=8192
width=32
lr=0.001
batch_size=2
seed=0
"""

PHASE1_STEPS = 8000
PHASE2_STEPS = 5000


def vqsep(*args: str) -> subprocess.CompletedProcess:
    cmd = [sys.executable, "-m", "vqsep", "-q", *args]
    return subprocess.run(cmd, capture_output=True, text=True)


def _check(proc: subprocess.CompletedProcess) -> None:
    if proc.returncode != 0:
        raise RuntimeError(f"exit {proc.returncode}: {proc.args}\n{proc.stderr}")


def _train(workdir: Path, stem: str, phase1: int, phase2: int) -> None:
    data, ckpt, cfg = workdir / "data", workdir / "ckpt", workdir / "run.cfg"
    se = ckpt / f"{stem}.se.svq"
    _check(vqsep("train-stem", "--data", str(data), "--stem", stem, "--config", str(cfg), "--out", str(se), "--steps", str(phase1)))
    _check(vqsep("train-mix", "--data", str(data), "--stem", stem, "--stem-ckpt", str(se), "--config", str(cfg),
                 "--out", str(ckpt / f"{stem}.me.svq"), "--steps", str(phase2)))


def run_pipeline(workdir: str | os.PathLike, phase1: int = PHASE1_STEPS, phase2: int = PHASE2_STEPS, jobs: int | None = None) -> dict:
    """Synthesize 12+4 songs, train both phases for every stem, evaluate on the test split.

    Stems train in parallel processes (up to the CPU count); each stem's run is
    independent, so the artifacts do not depend on ``jobs``.
    """
    workdir = Path(workdir)
    (workdir / "ckpt").mkdir(parents=True, exist_ok=True)
    (workdir / "run.cfg").write_text(CONFIG)
    start = time.perf_counter()
    _check(vqsep("synth-data", "--out", str(workdir / "data"), "--songs", "16", "--seed", "0"))
    jobs = jobs or min(len(STEMS), os.cpu_count() or 1)
    with ThreadPoolExecutor(jobs) as pool:
        list(pool.map(lambda s: _train(workdir, s, phase1, phase2), STEMS))
    report = workdir / "report.txt"
    proc = vqsep("evaluate", "--data", str(workdir / "data"), "--split", "test", "--ckpt-dir", str(workdir / "ckpt"), "--report", str(report))
    _check(proc)
    return {"report": report, "table": proc.stdout, "seconds": time.perf_counter() - start, "jobs": jobs}


if __name__ == "__main__":
    out = run_pipeline(sys.argv[1])
    print(out["table"])
    print(Path(out["report"]).read_text())
    print(f"{out['seconds']:.0f} s with {out['jobs']} jobs")
