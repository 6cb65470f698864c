"""End-to-end rate-targeted quantization: allocate, calibrate, encode, measure."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import List, Optional, Sequence

from .allocator import DEFAULT_BITS, DEFAULT_CAP, Allocation, InfeasibleTarget, RateTarget, allocate
from .calibrate import CalibOptions, TraceRow, calibrate, calibrate_layerwise_baseline
from .codec import Bitstream, Bpp, DecodedStream, RDPoint, bpp, decode, encode
from .nervlite import Checkpoint, psnr, render_all
from .quant import QuantizedModel, QuantState, finalize
from .video import VideoClip

logger = logging.getLogger(__name__)

GRANULARITIES = ("network", "layer")
STEP_MODES = ("channel", "layer")


@dataclass
class QuantizeResult:
    allocation: Allocation
    state: QuantState
    model: QuantizedModel
    stream: Bitstream
    rate: Bpp
    point: RDPoint
    trace: List[TraceRow]


def evaluate_stream(decoded: DecodedStream, ckpt: Checkpoint, clip: VideoClip):
    """Render the decoded model; returns (mean PSNR, per-frame PSNR list)."""
    ckpt.spec.check_clip(*clip.dims)
    weights = dict(ckpt.weights)
    missing = [n for n in ckpt.layer_order if n not in decoded.model.ints]
    if missing:
        raise ValueError(f"stream lacks layers {missing}")
    for name, w in decoded.model.dequantized().items():
        if name not in weights or weights[name].shape != w.shape:
            raise ValueError(f"stream layer {name!r} does not fit the checkpoint architecture")
        weights[name] = w
    frames = render_all(ckpt.spec, weights)
    ref = clip.as_float()
    per_frame = [psnr(frames[t], ref[t]) for t in range(ref.shape[0])]
    return psnr(frames, ref), per_frame


def quantize(
    ckpt: Checkpoint,
    clip: VideoClip,
    avg_bits: float,
    opts: Optional[CalibOptions] = None,
    granularity: str = "network",
    steps: str = "channel",
    candidate_bits: Sequence[int] = DEFAULT_BITS,
    cap: int = DEFAULT_CAP,
    tol: float = 0.05,
) -> QuantizeResult:
    """Quantize ``ckpt`` to about ``avg_bits`` bits per parameter; the checkpoint is not modified."""
    if granularity not in GRANULARITIES:
        raise ValueError(f"granularity must be one of {GRANULARITIES}")
    if steps not in STEP_MODES:
        raise ValueError(f"steps must be one of {STEP_MODES}")
    opts = opts or CalibOptions()
    ckpt.spec.check_clip(*clip.dims)
    t0 = time.perf_counter()
    target = RateTarget(float(avg_bits) * ckpt.n_params, tol)
    alloc = allocate(ckpt, clip, target, candidate_bits, cap, granularity=steps, lam=opts.lam)
    trace: List[TraceRow] = []
    if granularity == "network":
        state, trace = calibrate(ckpt, alloc.state, clip, opts)
    else:
        state = calibrate_layerwise_baseline(ckpt, alloc.state, clip, opts)
    model = finalize(ckpt.weights, state, ckpt.layer_order)
    stream = encode(ckpt.spec.digest(), model, ckpt.layer_order)
    decoded = decode(stream.raw, ckpt.spec.digest())
    quality, _ = evaluate_stream(decoded, ckpt, clip)
    rate = bpp(stream, *clip.dims)
    point = RDPoint(
        target_bits=target.bits,
        actual_bits=alloc.config.size_bits,
        bpp=rate.total,
        psnr=quality,
        seconds=time.perf_counter() - t0,
        config=alloc.config.bits,
    )
    return QuantizeResult(alloc, state, model, stream, rate, point, trace)


def sweep(ckpt: Checkpoint, clip: VideoClip, avg_bits_list: Sequence[float], **kwargs) -> List[QuantizeResult]:
    """One result per feasible target, sorted by bpp; infeasible targets are skipped with a warning."""
    if len(avg_bits_list) < 2:
        raise ValueError("a sweep needs at least two targets")
    out = []
    for b in avg_bits_list:
        try:
            out.append(quantize(ckpt, clip, b, **kwargs))
        except InfeasibleTarget as exc:
            logger.warning("skipping target %s: %s", b, exc)
    return sorted(out, key=lambda r: r.point.bpp)
