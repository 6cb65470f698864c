"""Uniform channel-wise weight quantization with learnable (soft) rounding.

A layer's weight tensor has its output channel on axis 0.  With step ``s`` per
channel, bitwidth ``b`` and rounding variable ``v`` per weight::

    w_soft = s * clip(floor(w / s) + h(v), -2**(b-1), 2**(b-1) - 1)
    h(v)   = clamp(sigmoid(v) * (ZETA - GAMMA) + GAMMA, 0, 1)
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

ZETA = 1.1
GAMMA = -0.1
STEP_FLOOR = 1e-8
MIN_BITS, MAX_BITS = 2, 8
INIT_FRAC_CLIP = (0.01, 0.99)
GRANULARITIES = ("channel", "layer")


def clip_bounds(b: int) -> Tuple[int, int]:
    return -(2 ** (b - 1)), 2 ** (b - 1) - 1


def _check_bits(b: int) -> int:
    b = int(b)
    if not MIN_BITS <= b <= MAX_BITS:
        raise ValueError(f"bitwidth {b} outside [{MIN_BITS}, {MAX_BITS}]")
    return b


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def rect_sigmoid(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return np.clip(_sigmoid(v) * (ZETA - GAMMA) + GAMMA, 0.0, 1.0)


def rect_sigmoid_grad(v) -> np.ndarray:
    """dh/dv; zero where the outer clamp is active."""
    v = np.asarray(v, dtype=np.float64)
    sg = _sigmoid(v)
    raw = sg * (ZETA - GAMMA) + GAMMA
    inside = (raw > 0.0) & (raw < 1.0)
    return np.where(inside, (ZETA - GAMMA) * sg * (1.0 - sg), 0.0)


def rect_sigmoid_inv(h) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    p = (h - GAMMA) / (ZETA - GAMMA)
    return np.log(p / (1.0 - p))


def channel_view(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    return w.reshape(w.shape[0], -1)


def _expand(steps: np.ndarray, w: np.ndarray) -> np.ndarray:
    # steps (C,) or (1,) -> broadcastable against w along axis 0
    steps = np.asarray(steps, dtype=np.float64)
    return steps.reshape((-1,) + (1,) * (w.ndim - 1))


def init_steps(weights, b: int, granularity: str = "channel") -> np.ndarray:
    """MinMax steps: (max - min) / (2**b - 1) per output channel (or for the whole layer)."""
    b = _check_bits(b)
    w = np.asarray(weights, dtype=np.float64)
    if w.size == 0 or w.ndim == 0:
        raise ValueError("cannot initialize steps for an empty layer")
    if granularity == "channel":
        cw = channel_view(w)
        if cw.shape[1] == 0:
            raise ValueError("empty channel")
        rng = cw.max(axis=1) - cw.min(axis=1)
    elif granularity == "layer":
        rng = np.array([w.max() - w.min()])
    else:
        raise ValueError(f"unknown step granularity {granularity!r}")
    steps = rng / (2**b - 1)
    return np.maximum(steps, STEP_FLOOR)


def _check_steps(steps) -> np.ndarray:
    steps = np.asarray(steps, dtype=np.float64)
    if not np.all(np.isfinite(steps)) or np.any(steps <= 0):
        raise ValueError("quantization steps must be positive and finite")
    return steps


def soft_dequant_array(w, steps, v, b: int) -> np.ndarray:
    steps = _check_steps(steps)
    w = np.asarray(w, dtype=np.float64)
    s = _expand(steps, w)
    lo, hi = clip_bounds(b)
    return s * np.clip(np.floor(w / s) + rect_sigmoid(v), lo, hi)


def soft_dequant_partials(w, steps, v, b: int):
    """Soft weights and local partials.

    Returns ``(w_soft, d_w_soft/d_v, n_soft)``, where ``n_soft`` is the clipped soft
    integer; with the floor held constant (straight-through), ``d w_soft / d s``
    equals ``n_soft`` inside the clip range and the clip bound outside it.
    """
    steps = _check_steps(steps)
    w = np.asarray(w, dtype=np.float64)
    s = _expand(steps, w)
    lo, hi = clip_bounds(b)
    pre = np.floor(w / s) + rect_sigmoid(v)
    n = np.clip(pre, lo, hi)
    inside = (pre >= lo) & (pre <= hi)
    dv = np.where(inside, s * rect_sigmoid_grad(v), 0.0)
    return s * n, dv, n


def hard_integers(w, steps, v, b: int) -> np.ndarray:
    steps = _check_steps(steps)
    w = np.asarray(w, dtype=np.float64)
    s = _expand(steps, w)
    lo, hi = clip_bounds(b)
    up = (rect_sigmoid(v) >= 0.5).astype(np.float64)
    return np.clip(np.floor(w / s) + up, lo, hi).astype(np.int64)


def nearest_integers(w, steps, b: int) -> np.ndarray:
    steps = _check_steps(steps)
    w = np.asarray(w, dtype=np.float64)
    s = _expand(steps, w)
    lo, hi = clip_bounds(b)
    q = w / s
    fl = np.floor(q)
    return np.clip(fl + (q - fl >= 0.5), lo, hi).astype(np.int64)


def dequantize(ints, steps) -> np.ndarray:
    ints = np.asarray(ints)
    return _expand(steps, ints) * ints.astype(np.float64)


def init_rounding(w, steps) -> np.ndarray:
    """V such that h(V) is the fractional part of w/s (clipped), i.e. nearest rounding at binarization."""
    w = np.asarray(w, dtype=np.float64)
    s = _expand(_check_steps(steps), w)
    q = w / s
    frac = np.clip(q - np.floor(q), *INIT_FRAC_CLIP)
    return rect_sigmoid_inv(frac)


def rounding_reg_array(v, beta: float) -> float:
    if not beta > 0:
        raise ValueError("beta must be positive")
    h = rect_sigmoid(v)
    return float(np.sum(1.0 - np.abs(2.0 * h - 1.0) ** beta))


def rounding_reg_grad(v, beta: float) -> np.ndarray:
    """Elementwise d/dv of 1 - |2h(v) - 1|**beta."""
    h = rect_sigmoid(v)
    u = 2.0 * h - 1.0
    dh = -beta * np.abs(u) ** (beta - 1.0) * np.sign(u) * 2.0
    return dh * rect_sigmoid_grad(v)


@dataclass
class QuantState:
    """Quantization parameters for every layer of one model.

    ``steps[name]`` has one entry per output channel, or a single entry when
    ``granularity == "layer"``.
    """

    bits: Dict[str, int]
    steps: Dict[str, np.ndarray]
    V: Dict[str, np.ndarray]
    beta: float = 20.0
    lam: float = 0.1
    granularity: str = "channel"

    def __post_init__(self):
        if set(self.bits) != set(self.steps) or set(self.bits) != set(self.V):
            raise ValueError("bits, steps and V must cover the same layers")
        for name, b in self.bits.items():
            self.bits[name] = _check_bits(b)
            self.steps[name] = _check_steps(np.array(self.steps[name], dtype=np.float64).reshape(-1))
            self.V[name] = np.array(self.V[name], dtype=np.float64)
            if not np.all(np.isfinite(self.V[name])):
                raise ValueError(f"rounding variables for {name!r} are not finite")
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"unknown granularity {self.granularity!r}")

    @property
    def layers(self) -> List[str]:
        return list(self.bits)

    def copy(self) -> "QuantState":
        return QuantState(
            dict(self.bits),
            {k: v.copy() for k, v in self.steps.items()},
            {k: v.copy() for k, v in self.V.items()},
            self.beta,
            self.lam,
            self.granularity,
        )

    def config(self, order: Sequence[str]) -> Tuple[int, ...]:
        return tuple(self.bits[n] for n in order)

    def n_steps(self) -> int:
        return sum(s.size for s in self.steps.values())

    def equals(self, other: "QuantState") -> bool:
        return (
            self.bits == other.bits
            and self.granularity == other.granularity
            and all(np.array_equal(self.steps[k], other.steps[k]) for k in self.bits)
            and all(np.array_equal(self.V[k], other.V[k]) for k in self.bits)
        )


def minmax_state(
    weights: Mapping[str, np.ndarray],
    bits: Mapping[str, int],
    granularity: str = "channel",
    lam: float = 0.1,
    beta: float = 20.0,
) -> QuantState:
    """MinMax-initialized state whose hard quantization is nearest rounding."""
    steps, V = {}, {}
    for name, b in bits.items():
        steps[name] = init_steps(weights[name], b, granularity)
        V[name] = init_rounding(weights[name], steps[name])
    return QuantState(dict(bits), steps, V, beta=beta, lam=lam, granularity=granularity)


def soft_dequant(w, state: QuantState, layer: str) -> np.ndarray:
    return soft_dequant_array(w, state.steps[layer], state.V[layer], state.bits[layer])


def hard_quantize(w, state: QuantState, layer: str) -> Tuple[np.ndarray, np.ndarray]:
    """Integer symbols (h(V) >= 0.5 rounds up) and the matching dequantized weights."""
    ints = hard_integers(w, state.steps[layer], state.V[layer], state.bits[layer])
    return ints, dequantize(ints, state.steps[layer])


def rounding_reg(state: QuantState, beta: Optional[float] = None) -> float:
    beta = state.beta if beta is None else beta
    return sum(rounding_reg_array(state.V[n], beta) for n in state.layers)


def fp16_steps(steps) -> np.ndarray:
    """Steps as stored in a bitstream: rounded to half precision, kept positive."""
    s16 = np.asarray(steps, dtype=np.float64).astype(np.float16)
    tiny = np.float16(2.0**-24)
    return np.maximum(s16, tiny).astype(np.float64)


@dataclass
class QuantizedModel:
    """Hard-quantized model as serialized: integer symbols, FP16 steps, bitwidths."""

    ints: Dict[str, np.ndarray]
    steps: Dict[str, np.ndarray]
    bits: Dict[str, int]

    def dequantized(self) -> Dict[str, np.ndarray]:
        return {n: dequantize(self.ints[n], self.steps[n]) for n in self.ints}


def finalize(weights: Mapping[str, np.ndarray], state: QuantState, order: Sequence[str]) -> QuantizedModel:
    """Binarize rounding and round steps to FP16 (the decodable model)."""
    ints, steps = {}, {}
    for n in order:
        ints[n] = hard_integers(weights[n], state.steps[n], state.V[n], state.bits[n])
        steps[n] = fp16_steps(state.steps[n])
    return QuantizedModel(ints, steps, {n: state.bits[n] for n in order})
