"""Finite-difference gradient checks over small randomized graphs.

Analytic gradients come from :func:`autodiff.backward` in the requested
precision.  The reference is a central difference of the same forward
function evaluated in float64, with every stop-gradient value (and every
quantizer index) frozen at the base point, so that straight-through graphs
are checked against the derivative they are meant to have.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .vqvae import nearest_prototypes

FLOAT32_TOL = 1e-3
FLOAT64_TOL = 1e-6


class Frozen:
    """Stop-gradient hook: records detached values on the analytic pass and replays them on the numeric pass."""

    def __init__(self, values: dict | None = None):
        self.recording = values is None
        self.values = {} if values is None else values

    def detach(self, t: ad.Tensor, key: str) -> ad.Tensor:
        if self.recording:
            self.values[key] = t.data.astype(np.float64)
            return ad.detach(t)
        return ad.Tensor(self.values[key].astype(ad.get_dtype()))

    def straight_through(self, x: ad.Tensor, q: ad.Tensor, key: str) -> ad.Tensor:
        """``ad.straight_through`` on the analytic pass, ``x + frozen(q - x)`` on the numeric pass."""
        if self.recording:
            self.values[key] = q.data.astype(np.float64) - x.data.astype(np.float64)
            return ad.straight_through(x, q)
        return ad.add(x, ad.Tensor(self.values[key].astype(ad.get_dtype())))

    def indices(self, key: str, compute: Callable[[], np.ndarray]) -> np.ndarray:
        if self.recording:
            self.values[key] = compute()
        return self.values[key]


Builder = Callable[[dict, Frozen], ad.Tensor]


@dataclass
class GradcheckResult:
    name: str
    precision: str
    rel_error: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.rel_error) and self.rel_error < self.tolerance)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    num = np.linalg.norm(a - b)
    den = max(np.linalg.norm(a), np.linalg.norm(b), 1e-30)
    return float(num / den)


def analytic_gradients(build: Builder, params: dict[str, np.ndarray], dtype) -> tuple[dict[str, np.ndarray], Frozen]:
    with ad.precision(dtype):
        tensors = {k: ad.parameter(v) for k, v in params.items()}
        frozen = Frozen()
        loss = build(tensors, frozen)
        ad.backward(loss)
        return {k: t.grad.astype(np.float64) for k, t in tensors.items()}, frozen


def numeric_gradients(build: Builder, params: dict[str, np.ndarray], frozen: Frozen, h: float) -> dict[str, np.ndarray]:
    """Central differences in float64 with stop-gradient values held fixed."""
    replay = Frozen(frozen.values)

    def f(values):
        with ad.precision(np.float64), ad.no_grad():
            return build({k: ad.tensor(v) for k, v in values.items()}, replay).item()

    base = {k: v.astype(np.float64).copy() for k, v in params.items()}
    out = {}
    for name, arr in base.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = f(base)
            flat[i] = old - h
            fm = f(base)
            flat[i] = old
            gflat[i] = (fp - fm) / (2 * h)
        out[name] = g
    return out


def check(name: str, build: Builder, params: dict[str, np.ndarray], dtype=np.float64, h: float | None = None) -> GradcheckResult:
    dtype = np.dtype(dtype).type
    tol = FLOAT32_TOL if dtype is np.float32 else FLOAT64_TOL
    if h is None:
        h = 1e-3 if dtype is np.float32 else 1e-6
    # the numeric pass sees exactly the values the analytic pass used
    params = {k: np.asarray(v, dtype=dtype) for k, v in params.items()}
    start = time.perf_counter()
    analytic, frozen = analytic_gradients(build, params, dtype)
    numeric = numeric_gradients(build, params, frozen, h)
    a = np.concatenate([analytic[k].ravel() for k in params])
    n = np.concatenate([numeric[k].ravel() for k in params])
    return GradcheckResult(name, "float32" if dtype is np.float32 else "float64", relative_error(a, n), tol, time.perf_counter() - start)


# ---------------------------------------------------------------------------
# the randomized graph family


def _conv_graph(rng: np.random.Generator):
    c_in, c_out, k = rng.integers(1, 4), rng.integers(1, 4), int(rng.integers(1, 5))
    stride, dilation, padding = int(rng.integers(1, 4)), int(rng.integers(1, 3)), int(rng.integers(0, 3))
    t = dilation * (k - 1) + 1 + int(rng.integers(3, 10))
    params = {"x": rng.standard_normal((c_in, t)), "w": rng.standard_normal((c_out, c_in, k)), "b": rng.standard_normal(c_out)}
    t_out = ad.conv1d_output_length(t, k, stride, dilation, padding)
    target = rng.standard_normal((c_out, t_out))

    def build(p, fz):
        y = ad.conv1d(p["x"], p["w"], p["b"], stride=stride, dilation=dilation, padding=padding)
        return ad.mse(y, ad.tensor(target))

    return f"conv1d(k={k},s={stride},d={dilation},p={padding})", build, params


def _conv_transpose_graph(rng: np.random.Generator):
    c_in, c_out = rng.integers(1, 4), rng.integers(1, 4)
    stride = int(rng.integers(1, 4))
    k = stride + int(rng.integers(0, 3))
    padding = int(rng.integers(0, 2))
    t = int(rng.integers(3, 8))
    params = {"x": rng.standard_normal((2, c_in, t)), "w": rng.standard_normal((c_in, c_out, k)), "b": rng.standard_normal(c_out)}
    t_out = ad.conv1d_transpose_output_length(t, k, stride, padding)
    target = rng.standard_normal((2, c_out, t_out))

    def build(p, fz):
        y = ad.conv1d_transpose(p["x"], p["w"], p["b"], stride=stride, padding=padding)
        return ad.mse(y, ad.tensor(target))

    return f"conv1d_transpose(k={k},s={stride},p={padding})", build, params


def _pointwise_graph(rng: np.random.Generator):
    shape = (3, int(rng.integers(4, 9)))
    # keep relu inputs away from the kink
    a = rng.standard_normal(shape)
    a = np.where(np.abs(a) < 0.1, 0.1 * np.sign(a + 1e-12) + a, a)
    params = {"a": a, "b": rng.standard_normal(shape), "c": rng.standard_normal(shape)}
    target = rng.standard_normal(shape)
    c0 = float(rng.uniform(-2, 2))

    def build(p, fz):
        h = ad.relu(p["a"])
        h = ad.add(h, ad.multiply(p["b"], p["c"]))
        h = ad.subtract(ad.scale(h, c0), p["c"])
        h = ad.multiply(h, h)
        return ad.mse(h, ad.tensor(target))

    return "pointwise(relu,add,sub,scale,mul)", build, params


def _mse_graph(rng: np.random.Generator):
    shape = (int(rng.integers(1, 4)), int(rng.integers(2, 7)))
    params = {"a": rng.standard_normal(shape), "b": rng.standard_normal(shape)}

    def build(p, fz):
        return ad.mse(p["a"], p["b"])

    return "mse", build, params


def _encoder_graph(rng: np.random.Generator):
    """Strided conv, dilated residual block, transposed conv back up."""
    c, t = 3, 16
    params = {
        "x": rng.standard_normal((2, 1, t)),
        "w_down": rng.standard_normal((c, 1, 4)) * 0.5,
        "b_down": rng.standard_normal(c) * 0.1,
        "w_res": rng.standard_normal((c, c, 3)) * 0.3,
        "b_res": rng.standard_normal(c) * 0.1,
        "w_proj": rng.standard_normal((c, c, 1)) * 0.3,
        "b_proj": rng.standard_normal(c) * 0.1,
        "w_up": rng.standard_normal((c, 1, 4)) * 0.5,
        "b_up": rng.standard_normal(1) * 0.1,
    }
    target = rng.standard_normal((2, 1, t))

    def build(p, fz):
        h = ad.conv1d(p["x"], p["w_down"], p["b_down"], stride=2, padding=1)
        r = ad.relu(h)
        r = ad.conv1d(r, p["w_res"], p["b_res"], dilation=3, padding=3)
        r = ad.relu(r)
        r = ad.conv1d(r, p["w_proj"], p["b_proj"])
        h = ad.add(h, r)
        y = ad.conv1d_transpose(h, p["w_up"], p["b_up"], stride=2, padding=1)
        return ad.mse(y, ad.tensor(target))

    return "encoder-block(conv s2, dilated res, conv_transpose)", build, params


def _quantizer_graph(rng: np.random.Generator):
    """Encoder conv -> nearest prototype -> straight-through -> decoder conv, with all three VQ losses."""
    d, n_codes, t = 3, 5, 12
    params = {
        "w_enc": rng.standard_normal((d, 1, 4)),
        "b_enc": rng.standard_normal(d) * 0.1,
        "codebook": rng.standard_normal((n_codes, d)),
        "w_dec": rng.standard_normal((d, 1, 4)),
        "b_dec": rng.standard_normal(1) * 0.1,
    }
    x = rng.standard_normal((1, 1, t))
    beta = 0.25

    def build(p, fz):
        e = ad.conv1d(ad.tensor(x), p["w_enc"], p["b_enc"], stride=2, padding=1)
        frames = np.swapaxes(e.data, -1, -2)
        idx = fz.indices("idx", lambda: nearest_prototypes(p["codebook"].data, frames.reshape(-1, d)).reshape(frames.shape[:-1]))
        q = ad.transpose_last(ad.gather_rows(p["codebook"], idx))
        st = fz.straight_through(e, q, "st")
        y = ad.conv1d_transpose(st, p["w_dec"], p["b_dec"], stride=2, padding=1)
        recons = ad.mse(y, ad.tensor(x))
        codebook_loss = ad.mse(fz.detach(e, "e"), q)
        commit = ad.mse(e, fz.detach(q, "q"))
        return ad.add(ad.add(recons, codebook_loss), ad.scale(commit, beta))

    return "straight-through quantizer composite", build, params


GRAPH_FAMILY = (_conv_graph, _conv_transpose_graph, _pointwise_graph, _mse_graph, _encoder_graph, _quantizer_graph)


def random_graphs(seed: int = 0, count: int = 10):
    """``count`` graphs cycling through every graph kind, each with fresh random geometry and values."""
    rng = np.random.default_rng(seed)
    return [GRAPH_FAMILY[i % len(GRAPH_FAMILY)](rng) for i in range(count)]


def run_suite(dtype=np.float32, seed: int = 0, count: int = 10) -> list[GradcheckResult]:
    return [check(name, build, params, dtype) for name, build, params in random_graphs(seed, count)]
