"""Calibration of quantization steps and rounding variables against the full-precision teacher.

Two phases share one cosine learning-rate schedule: phase 1 tunes the (log-)steps
with nearest rounding, phase 2 freezes the steps, restarts the rounding variables
from the fractional parts and tunes them with the annealed rounding regularizer.
Weights are never modified.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from .nervlite import Adam, Checkpoint, cosine_lr, model_graph, render_all
from .quant import (
    QuantState,
    dequantize,
    hard_quantize,
    init_rounding,
    nearest_integers,
    rounding_reg_array,
    rounding_reg_grad,
    soft_dequant_partials,
)
from .video import VideoClip

logger = logging.getLogger(__name__)

SELECT_EVERY = 50
# mean-pixel distortion gives per-variable gradients near 1e-10 at high bitwidths;
# the usual 1e-8 would swamp them
ADAM_EPS = 1e-16
TRACE_FIELDS = ("iteration", "phase", "distortion", "regularizer", "beta", "lr", "loss")


class CalibrationError(RuntimeError):
    def __init__(self, message: str, last_good: Optional[QuantState] = None):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class CalibOptions:
    iterations: int = 21000
    lr: float = 3e-3
    batch: int = 2
    lam: float = 0.1
    beta_start: float = 20.0
    beta_end: float = 2.0
    phase1_frac: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.phase1_frac <= 1:
            raise ValueError("phase1_frac must lie in [0, 1]")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")

    @property
    def phase1_iters(self) -> int:
        return int(round(self.phase1_frac * self.iterations))

    def beta_at(self, k: int, n: int) -> float:
        if n <= 1:
            return self.beta_end
        return self.beta_start + (self.beta_end - self.beta_start) * k / (n - 1)


@dataclass
class TraceRow:
    iteration: int
    phase: int
    distortion: float
    regularizer: float
    beta: float
    lr: float
    loss: float


def distortion(teacher_out, student_out) -> float:
    a = np.asarray(teacher_out, dtype=np.float64)
    b = np.asarray(student_out, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def trace_csv(trace: Sequence[TraceRow]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(TRACE_FIELDS)
    for r in trace:
        wr.writerow([r.iteration, r.phase, repr(r.distortion), repr(r.regularizer), repr(r.beta), repr(r.lr), repr(r.loss)])
    return buf.getvalue()


class _FrameSampler:
    """Uniform batches without replacement within an epoch."""

    def __init__(self, n: int, batch: int, seed: int):
        self.n, self.batch = n, min(batch, n)
        self.rng = np.random.default_rng(seed)
        self.queue: List[int] = []

    def next(self) -> np.ndarray:
        if len(self.queue) < self.batch:
            self.queue.extend(self.rng.permutation(self.n).tolist())
        out, self.queue = self.queue[: self.batch], self.queue[self.batch :]
        return np.asarray(out)


def _reduce_channels(g: np.ndarray, n_steps: int) -> np.ndarray:
    cg = g.reshape(g.shape[0], -1).sum(axis=1)
    return cg if n_steps == cg.size else np.array([cg.sum()])


def quantized_weights(weights: Mapping[str, np.ndarray], state: QuantState, hard: bool = True) -> Dict[str, np.ndarray]:
    """Full weight set with the state's layers replaced by their (hard or soft) dequantized weights."""
    out = dict(weights)
    for n in state.layers:
        w = weights[n]
        if hard:
            out[n] = hard_quantize(w, state, n)[1]
        else:
            out[n] = soft_dequant_partials(w, state.steps[n], state.V[n], state.bits[n])[0]
    return out


class _Objective:
    """Distortion against a teacher for either the network output or one layer's output."""

    def __init__(self, ckpt: Checkpoint, teacher: np.ndarray, layer: Optional[str] = None):
        self.ckpt = ckpt
        self.mg = model_graph(ckpt.spec)
        self.teacher = teacher
        self.layer = layer

    def full_hard(self, base_weights, state: QuantState, layers) -> float:
        """Distortion over every frame with ``layers`` hard-quantized (nearest rounding)."""
        weights = dict(base_weights)
        for n in layers:
            w = self.ckpt.weights[n]
            weights[n] = dequantize(nearest_integers(w, state.steps[n], state.bits[n]), state.steps[n])
        return self.full(weights)

    def full(self, weights) -> float:
        frames = np.arange(self.teacher.shape[0])
        if self.layer is None:
            out = self.mg.render(weights, frames)
        else:
            out = self.mg.layer_output(weights, frames, self.layer)
        return distortion(self.teacher, out)

    def __call__(self, weights, idx):
        if self.layer is None:
            return self.mg.loss_and_grads(weights, idx, self.teacher[idx])
        return self.mg.layer_loss_and_grads(weights, idx, self.layer, self.teacher[idx])


def _run_two_phase(
    ckpt: Checkpoint,
    state: QuantState,
    base_weights: Dict[str, np.ndarray],
    layers: Sequence[str],
    objective: _Objective,
    opts: CalibOptions,
    iter_offset: int = 0,
) -> List[TraceRow]:
    """Optimize ``state`` in place for ``layers``; other weights come from ``base_weights``."""
    n_total = opts.iterations
    n1 = opts.phase1_iters
    n2 = n_total - n1
    sampler = _FrameSampler(ckpt.spec.frames, opts.batch, opts.seed)
    W = {n: ckpt.weights[n] for n in layers}
    trace: List[TraceRow] = []
    weights = dict(base_weights)
    lam = opts.lam

    last_good = state.copy()
    log_s = {n: np.log(state.steps[n]) for n in layers}
    opt = Adam(log_s, eps=ADAM_EPS)
    # the integer-constant surrogate is biased toward rescaling, so keep the best steps seen
    best = (objective.full_hard(base_weights, state, layers), {n: state.steps[n].copy() for n in layers})
    for i in range(n1):
        idx = sampler.next()
        ints = {}
        for n in layers:
            s = np.exp(log_s[n])
            ints[n] = nearest_integers(W[n], s, state.bits[n]).astype(np.float64)
            weights[n] = s.reshape((-1,) + (1,) * (W[n].ndim - 1)) * ints[n]
        dist, grads = objective(weights, idx)
        if not math.isfinite(dist):
            raise CalibrationError(f"distortion became {dist} at iteration {i}", last_good)
        gl = {n: _reduce_channels(grads[n] * ints[n], log_s[n].size) * np.exp(log_s[n]) for n in layers}
        lr = cosine_lr(opts.lr, i, n_total)
        opt.step(log_s, gl, lr)
        for n in layers:
            state.steps[n] = np.exp(log_s[n])
        if not all(np.all(np.isfinite(state.steps[n])) for n in layers):
            raise CalibrationError(f"steps became non-finite at iteration {i}", last_good)
        last_good = state.copy()
        trace.append(TraceRow(iter_offset + i, 1, dist, 0.0, 0.0, lr, dist))
        if (i + 1) % SELECT_EVERY == 0 or i == n1 - 1:
            d_full = objective.full_hard(base_weights, state, layers)
            if d_full < best[0]:
                best = (d_full, {n: state.steps[n].copy() for n in layers})
    if n1 > 0:
        for n in layers:
            state.steps[n] = best[1][n]

    if n2 <= 0:
        return trace
    for n in layers:
        state.V[n] = init_rounding(W[n], state.steps[n])
    V = {n: state.V[n] for n in layers}
    opt = Adam(V, eps=ADAM_EPS)
    for k in range(n2):
        i = n1 + k
        beta = opts.beta_at(k, n2)
        idx = sampler.next()
        dv = {}
        for n in layers:
            weights[n], dv[n], _ = soft_dequant_partials(W[n], state.steps[n], V[n], state.bits[n])
        dist, grads = objective(weights, idx)
        reg = sum(rounding_reg_array(V[n], beta) for n in layers)
        loss = dist + lam * reg
        if not math.isfinite(loss):
            raise CalibrationError(f"loss became {loss} at iteration {i}", last_good)
        gv = {n: grads[n] * dv[n] + lam * rounding_reg_grad(V[n], beta) for n in layers}
        lr = cosine_lr(opts.lr, i, n_total)
        trace.append(TraceRow(iter_offset + i, 2, dist, reg, beta, lr, loss))
        opt.step(V, gv, lr)
        if not all(np.all(np.isfinite(V[n])) for n in layers):
            raise CalibrationError(f"rounding variables became non-finite at iteration {i}", last_good)
        if k % 500 == 0:
            last_good = state.copy()
    state.beta = opts.beta_end
    return trace


def calibrate(ckpt: Checkpoint, state: QuantState, clip: VideoClip, opts: Optional[CalibOptions] = None, teacher=None):
    """Network-wise calibration; returns ``(calibrated_state, trace)``.

    The teacher is the full-precision model's rendering of every frame; ``clip``
    only fixes the frame count and dimensions.
    """
    opts = opts or CalibOptions()
    ckpt.spec.check_clip(*clip.dims)
    out = state.copy()
    if opts.iterations == 0:
        return out, []
    out.lam = opts.lam
    if teacher is None:
        teacher = render_all(ckpt.spec, ckpt.weights)
    obj = _Objective(ckpt, teacher)
    trace = _run_two_phase(ckpt, out, dict(ckpt.weights), out.layers, obj, opts)
    d0 = obj.full(quantized_weights(ckpt.weights, state, hard=True))
    d1 = obj.full(quantized_weights(ckpt.weights, out, hard=True))
    if d1 > d0:
        logger.warning("calibration ended above the starting distortion (%.3e > %.3e); keeping the input state", d1, d0)
        return state.copy(), trace
    return out, trace


def calibrate_layerwise_baseline(ckpt: Checkpoint, state: QuantState, clip: VideoClip, opts: Optional[CalibOptions] = None):
    """Calibrate one layer at a time against that layer's full-precision output.

    Upstream layers use their already-calibrated hard-quantized weights; each layer
    gets the full iteration budget.
    """
    opts = opts or CalibOptions()
    ckpt.spec.check_clip(*clip.dims)
    out = state.copy()
    if opts.iterations == 0:
        return out
    out.lam = opts.lam
    mg = model_graph(ckpt.spec)
    T = ckpt.spec.frames
    weights = dict(ckpt.weights)
    offset = 0
    for name in ckpt.layer_order:
        if name not in out.bits:
            continue
        teacher = np.concatenate([mg.layer_output(ckpt.weights, [t], name).copy() for t in range(T)], axis=0)
        _run_two_phase(ckpt, out, weights, [name], _Objective(ckpt, teacher, layer=name), opts, offset)
        offset += opts.iterations
        weights[name] = hard_quantize(ckpt.weights[name], out, name)[1]
    return out
