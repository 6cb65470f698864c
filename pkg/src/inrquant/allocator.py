"""Mixed-precision bit allocation under a model-size budget."""

from __future__ import annotations

import csv
import heapq
import io
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .nervlite import Checkpoint
from .quant import QuantState, dequantize, init_steps, minmax_state, nearest_integers
from .sensitivity import SensitivityReport, clip_loss, default_eps, hvp
from .video import VideoClip

logger = logging.getLogger(__name__)

DEFAULT_BITS = (3, 4, 5, 6, 7, 8)
EXHAUSTIVE_MAX_LAYERS = 12
DEFAULT_CAP = 200


class InfeasibleTarget(ValueError):
    def __init__(self, message: str, nearest: Sequence[int] = ()):
        super().__init__(message)
        self.nearest = tuple(nearest)


@dataclass(frozen=True)
class RateTarget:
    bits: float
    tol: float = 0.05

    def __post_init__(self):
        if not self.bits > 0:
            raise ValueError("target size must be positive")
        if not 0 <= self.tol < 1:
            raise ValueError("tolerance must lie in [0, 1)")

    @property
    def low(self) -> float:
        return self.bits * (1 - self.tol)

    @property
    def high(self) -> float:
        return self.bits * (1 + self.tol)

    def admits(self, size: float) -> bool:
        return abs(size - self.bits) <= self.tol * self.bits


@dataclass(frozen=True)
class BitConfig:
    bits: Tuple[int, ...]
    size_bits: int
    embedding_bits: int = 0

    @classmethod
    def of(cls, bits: Sequence[int], param_counts: Sequence[int], embedding_params: int = 0, b_e: int = 0):
        bits = tuple(int(b) for b in bits)
        return cls(bits, model_size_bits(param_counts, bits, embedding_params, b_e), embedding_params * b_e)

    def check(self, param_counts: Sequence[int]) -> None:
        if model_size_bits(param_counts, self.bits) + self.embedding_bits != self.size_bits:
            raise ValueError("stored size does not match the recomputed size")

    def label(self) -> str:
        return "-".join(str(b) for b in self.bits)


def model_size_bits(param_counts: Sequence[int], config, embedding_params: int = 0, b_e: int = 0) -> int:
    """Sum of Param(w_l) * b_l, plus the (here always empty) embedding term."""
    bits = config.bits if isinstance(config, BitConfig) else config
    if len(param_counts) != len(bits):
        raise ValueError(f"{len(param_counts)} layers but {len(bits)} bitwidths")
    return int(sum(int(p) * int(b) for p, b in zip(param_counts, bits))) + int(embedding_params) * int(b_e)


def _nearest_sizes(param_counts, cand, target: RateTarget) -> List[int]:
    total = sum(param_counts)
    uniform = sorted({total * b for b in cand}, key=lambda s: (abs(s - target.bits), s))
    return uniform[:2]


def _exhaustive(param_counts, cand, target: RateTarget):
    n = len(param_counts)
    lo_b, hi_b = cand[0], cand[-1]
    rest = [sum(param_counts[i:]) for i in range(n + 1)]
    out = []

    def rec(i, prefix, size):
        if size + rest[i] * lo_b > target.high or size + rest[i] * hi_b < target.low:
            return
        if i == n:
            if target.admits(size):
                out.append(tuple(prefix))
            return
        for b in cand:
            prefix.append(b)
            rec(i + 1, prefix, size + param_counts[i] * b)
            prefix.pop()

    rec(0, [], 0)
    return out


def _neighborhood(param_counts, cand, target: RateTarget, cap: int):
    # breadth-first single-layer +-1 moves from the uniform config nearest R
    total = sum(param_counts)
    start_b = min(cand, key=lambda b: (abs(total * b - target.bits), b))
    start = tuple([start_b] * len(param_counts))
    idx = {b: i for i, b in enumerate(cand)}
    seen = {start}
    found = []
    queue = deque([start])
    limit = max(50 * cap, 10000)
    step_max = max(param_counts) * (cand[-1] - cand[0])
    while queue and len(seen) < limit and len(found) < 4 * cap:
        cfg = queue.popleft()
        size = model_size_bits(param_counts, cfg)
        if target.admits(size):
            found.append(cfg)
        if size < target.low - step_max or size > target.high + step_max:
            continue
        for layer in range(len(cfg)):
            for delta in (-1, 1):
                j = idx[cfg[layer]] + delta
                if 0 <= j < len(cand):
                    nxt = cfg[:layer] + (cand[j],) + cfg[layer + 1 :]
                    nsize = model_size_bits(param_counts, nxt)
                    toward = abs(nsize - target.bits) <= abs(size - target.bits) or target.admits(nsize)
                    if nxt not in seen and toward:
                        seen.add(nxt)
                        queue.append(nxt)
    return found


def enumerate_configs(
    param_counts: Sequence[int],
    candidate_bits: Iterable[int] = DEFAULT_BITS,
    target: Optional[RateTarget] = None,
    cap: int = DEFAULT_CAP,
) -> List[BitConfig]:
    """Bit configurations whose size is within the target's tolerance.

    When more than ``cap`` exist, the ``cap`` closest to the target size are kept
    (ties: lexicographically smaller bits first).  Output is sorted by bits.
    """
    if target is None:
        raise ValueError("a rate target is required")
    if cap <= 0:
        raise ValueError("cap must be positive")
    cand = sorted({int(b) for b in candidate_bits})
    if not cand or cand[0] < 2 or cand[-1] > 8:
        raise ValueError(f"candidate bits must be a non-empty subset of [2, 8], got {cand}")
    param_counts = [int(p) for p in param_counts]
    if len(param_counts) <= EXHAUSTIVE_MAX_LAYERS:
        found = _exhaustive(param_counts, cand, target)
    else:
        found = _neighborhood(param_counts, cand, target, cap)
    found = sorted(set(found))
    if not found:
        near = _nearest_sizes(param_counts, cand, target)
        raise InfeasibleTarget(
            f"infeasible target {target.bits:.0f} bits (+-{100 * target.tol:g}%); "
            f"achievable range is [{sum(param_counts) * cand[0]}, {sum(param_counts) * cand[-1]}], "
            f"nearest uniform sizes {near}",
            near,
        )
    if len(found) > cap:
        keyed = [(abs(model_size_bits(param_counts, c) - target.bits), c) for c in found]
        found = sorted(c for _, c in heapq.nsmallest(cap, keyed))
    return [BitConfig.of(c, param_counts) for c in found]


def minmax_dequant(w, b: int, granularity: str = "channel") -> np.ndarray:
    s = init_steps(w, b, granularity)
    return dequantize(nearest_integers(w, s, b), s)


def perturbation_for(ckpt: Checkpoint, config: Sequence[int], granularity: str = "channel") -> np.ndarray:
    """MinMax (nearest-rounding) quantization error of every layer, flattened."""
    parts = []
    for name, b in zip(ckpt.layer_order, config):
        w = ckpt.weights[name]
        parts.append((minmax_dequant(w, b, granularity) - w).reshape(-1))
    return np.concatenate(parts)


@dataclass
class Allocation:
    config: BitConfig
    state: QuantState
    reports: List[SensitivityReport]
    w0_step_diag: Dict[str, float] = field(default_factory=dict)

    def to_csv(self) -> str:
        return scored_candidates_csv(self.reports)


def scored_candidates_csv(reports: Sequence[SensitivityReport]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["config", "size_bits", "omega", "first_order", "omega_w0"])
    for r in reports:
        wr.writerow(
            [
                "-".join(map(str, r.config)),
                r.size_bits,
                repr(r.omega),
                repr(r.first_order),
                "" if r.omega_w0 is None else repr(r.omega_w0),
            ]
        )
    return buf.getvalue()


def select(reports: Sequence[SensitivityReport]) -> SensitivityReport:
    valid = [r for r in reports if math.isfinite(r.omega)]
    if not valid:
        raise ValueError("no candidate has a finite sensitivity")
    return min(valid, key=lambda r: (r.omega, r.config, r.size_bits))


def score_configs(ckpt: Checkpoint, clip: VideoClip, configs: Sequence[BitConfig], granularity="channel", with_w0=False):
    """Sensitivity report for each configuration (gradient reference at the FP weights)."""
    loss_at = clip_loss(ckpt, clip.as_float())
    w = ckpt.flat()
    _, g = loss_at(w)
    gnorm = float(np.linalg.norm(g))
    w0 = None
    if with_w0:
        # Algorithm-1 variant: gradient reference at the 8-bit MinMax weights
        w0 = np.concatenate([minmax_dequant(ckpt.weights[n], 8, granularity).reshape(-1) for n in ckpt.layer_order])
    reports = []
    for cfg in configs:
        d = perturbation_for(ckpt, cfg.bits, granularity)
        eps = default_eps(w, d)
        try:
            om = float(d @ hvp(loss_at, w, d, eps))
        except FloatingPointError as exc:
            logger.warning("config %s disqualified: %s", cfg.label(), exc)
            om = math.nan
        if not math.isfinite(om):
            logger.warning("config %s has non-finite sensitivity; disqualified", cfg.label())
        om_w0 = None
        if w0 is not None:
            om_w0 = float(d @ hvp(loss_at, w0, d, default_eps(w0, d)))
        reports.append(SensitivityReport(cfg.bits, om, gnorm, eps, cfg.size_bits, float(g @ d), om_w0))
    return reports


def allocate(
    ckpt: Checkpoint,
    clip: VideoClip,
    target: RateTarget,
    candidate_bits: Iterable[int] = DEFAULT_BITS,
    cap: int = DEFAULT_CAP,
    granularity: str = "channel",
    lam: float = 0.1,
    with_w0: bool = False,
) -> Allocation:
    """Pick the feasible configuration with the smallest sensitivity and its MinMax state."""
    if "final_loss" not in ckpt.meta:
        logger.warning("checkpoint carries no training record; sensitivity assumes a converged model")
    configs = enumerate_configs(ckpt.param_counts(), candidate_bits, target, cap)
    reports = score_configs(ckpt, clip, configs, granularity, with_w0)
    best = select(reports)
    cfg = next(c for c in configs if c.bits == best.config)
    bits = dict(zip(ckpt.layer_order, cfg.bits))
    state = minmax_state(ckpt.weights, bits, granularity=granularity, lam=lam)
    diag = {n: float(init_steps(ckpt.weights[n], 8).mean()) for n in ckpt.layer_order}
    return Allocation(cfg, state, reports, diag)
