"""Acceptance criteria, one test each; the terminal summary prints one PASS/FAIL line per criterion.

The calibration runs are expensive (several minutes each on one core), so the
runs shared between criteria are cached in module fixtures.
"""

import hashlib
import itertools

import numpy as np
import pytest
from scipy.stats import spearmanr

from inrquant.allocator import (
    InfeasibleTarget,
    RateTarget,
    enumerate_configs,
    minmax_dequant,
    model_size_bits,
    score_configs,
    select,
)
from inrquant.calibrate import CalibOptions, distortion, quantized_weights
from inrquant.codec import bpp, decode, empirical_entropy_bits, encode
from inrquant.nervlite import ModelSpec, TrainOptions, build_model, load_checkpoint, render_all, save_checkpoint, train
from inrquant.pipeline import quantize, sweep
from inrquant.quant import rect_sigmoid
from inrquant.sensitivity import SensitivityReport, clip_loss, explicit_hessian, hvp, omega, omega_quadratic_oracle
from inrquant.tensor import grad_check

from graphs import flat_loss, random_graph

pytestmark = pytest.mark.slow

SWEEP_BITS = (3, 4, 6, 8)
GRANULARITY_SEEDS = (0, 1, 2)
GRANULARITY_ITERS = CalibOptions().iterations
GRANULARITY_BITS = 4

_CORPUS = []  # every stream produced by the suite, for the codec criterion
_FINGERPRINTS = []  # (before, after) around every calibration run


def _track(ckpt, fn):
    before = {n: ckpt.weights[n].tobytes() for n in ckpt.layer_order}
    out = fn()
    after = {n: ckpt.weights[n].tobytes() for n in ckpt.layer_order}
    _FINGERPRINTS.append(before == after)
    results = out if isinstance(out, list) else [out]
    _CORPUS.extend((r, ckpt) for r in results)
    return out


@pytest.fixture(scope="module")
def checkpoint_file(desk_model, tmp_path_factory):
    path = tmp_path_factory.mktemp("acceptance") / "desk.ckpt"
    save_checkpoint(desk_model, path)
    return path


@pytest.fixture(scope="module")
def default_sweep(checkpoint_file, desk_clip):
    """Default-calibration sweep over 3, 4, 6, 8 average bits from one checkpoint file."""
    digest_before = hashlib.sha256(checkpoint_file.read_bytes()).hexdigest()
    ckpt = load_checkpoint(checkpoint_file)
    results = _track(ckpt, lambda: sweep(ckpt, desk_clip, SWEEP_BITS))
    digest_after = hashlib.sha256(checkpoint_file.read_bytes()).hexdigest()
    return ckpt, results, digest_before == digest_after


@pytest.fixture(scope="module")
def minmax_sweep(default_sweep, desk_clip):
    ckpt = default_sweep[0]
    return _track(ckpt, lambda: sweep(ckpt, desk_clip, SWEEP_BITS, opts=CalibOptions(iterations=0)))


def _by_avg(results, ckpt):
    return {round(r.point.target_bits / ckpt.n_params): r for r in results}


def f3(w):
    x, y = w
    return 4 * x * x + 2 * y * y + 5 * x * y, np.array([8 * x + 5 * y, 4 * y + 5 * x])


def test_criterion_01_toy_quadratic(acceptance):
    H = np.array([[8.0, 5.0], [5.0, 4.0]])
    errs = []
    for dw, expected in (([0.1, 0.1], 0.22), ([0.2, -0.2], 0.08)):
        errs.append(("oracle", abs(omega_quadratic_oracle(H, dw) - expected), 1e-6))
        errs.append(("hvp", abs(omega(f3, np.zeros(2), np.array(dw)) - expected), 1e-3))
    ok = all(e < tol for _, e, tol in errs)
    worst = {k: max(e for kk, e, _ in errs if kk == k) for k in ("oracle", "hvp")}
    acceptance(1, "toy quadratic 0.22 / 0.08", ok, f"max err oracle {worst['oracle']:.1e}, hvp {worst['hvp']:.1e}")
    assert ok


def test_criterion_02_hvp_vs_explicit_hessian(acceptance):
    rng = np.random.default_rng(2)
    worst, n = 0.0, 0
    while n < 25:
        g, b, root = random_graph(rng, max_params=200)
        loss_at, w0 = flat_loss(g, b, root)
        d = rng.normal(size=w0.size)
        ref = explicit_hessian(loss_at, w0) @ d
        got = hvp(loss_at, w0, d)
        worst = max(worst, np.linalg.norm(got - ref) / max(np.linalg.norm(ref), 1e-12))
        n += 1
    ok = worst < 1e-3
    acceptance(2, "HVP vs explicit Hessian", ok, f"{n} nets, worst rel err {worst:.2e}")
    assert ok


def test_criterion_03_gradient_correctness(acceptance):
    worst = 0.0
    for seed in range(50):
        g, b, root = random_graph(np.random.default_rng(10_000 + seed))
        loss_at, w0 = flat_loss(g, b, root)
        worst = max(worst, grad_check(loss_at, w0, 1e-5))
    ok = worst < 1e-4
    acceptance(3, "grad_check on 50 random graphs", ok, f"worst {worst:.2e}")
    assert ok


def test_criterion_04_allocator_oracle(acceptance):
    rng = np.random.default_rng(4)
    instances = mismatches = violations = 0
    subsets = [c for k in range(1, 5) for c in itertools.combinations(range(2, 9), k)]
    for n_layers in range(1, 6):
        for cand in subsets:
            counts = rng.integers(1, 300, size=n_layers).tolist()
            for avg in rng.uniform(min(cand) - 0.5, max(cand) + 0.5, size=2):
                target = RateTarget(float(avg) * sum(counts), 0.05)
                ref = [c for c in itertools.product(cand, repeat=n_layers) if target.admits(model_size_bits(counts, c))]
                instances += 1
                try:
                    got = [c.bits for c in enumerate_configs(counts, cand, target, cap=10**6)]
                except InfeasibleTarget:
                    got = []
                mismatches += got != sorted(ref)
                if got:
                    reports = [SensitivityReport(c, float(rng.random()), 0, 0, model_size_bits(counts, c)) for c in got]
                    chosen = select(reports)
                    violations += not abs(chosen.size_bits - target.bits) <= 0.05 * target.bits
    ok = mismatches == 0 and violations == 0
    acceptance(4, "allocator equals brute force, |size-R| <= 5% R", ok,
               f"{instances} instances, {mismatches} mismatches, {violations} rate violations")
    assert ok


def test_criterion_05_omega_ranking(acceptance, desk_model, desk_clip):
    ckpt = desk_model
    configs = enumerate_configs(ckpt.param_counts(), target=RateTarget(4 * ckpt.n_params), cap=20)
    reports = score_configs(ckpt, desk_clip, configs)
    loss_at = clip_loss(ckpt, desk_clip.as_float())
    base = loss_at(ckpt.flat())[0]
    true = []
    for cfg in configs:
        w = np.concatenate([minmax_dequant(ckpt.weights[n], b).reshape(-1) for n, b in zip(ckpt.layer_order, cfg.bits)])
        true.append(loss_at(w)[0] - base)
    om = [r.omega for r in reports]
    rho = spearmanr(om, true).correlation
    best = int(np.argmin(om))
    rank = int(np.sum(np.asarray(true) < true[best]))
    ok = len(configs) == 20 and rho >= 0.8 and rank < len(configs) / 4
    acceptance(5, "Omega ranking fidelity", ok, f"spearman {rho:.3f}, argmin rank {rank + 1}/{len(configs)}")
    assert ok


def test_criterion_06_calibration_gain(acceptance, default_sweep, minmax_sweep):
    ckpt, results, _ = default_sweep
    cal, mm = _by_avg(results, ckpt), _by_avg(minmax_sweep, ckpt)
    g4 = cal[4].point.psnr - mm[4].point.psnr
    g3 = cal[3].point.psnr - mm[3].point.psnr
    ok = g4 >= 0.3 and g3 >= 1.0
    acceptance(6, "calibration gain over MinMax", ok,
               f"4-bit {mm[4].point.psnr:.2f} -> {cal[4].point.psnr:.2f} dB (+{g4:.2f}), "
               f"3-bit {mm[3].point.psnr:.2f} -> {cal[3].point.psnr:.2f} dB (+{g3:.2f})")
    assert ok


def test_criterion_07_granularity_ordering(acceptance, desk_clip, default_sweep):
    opts = CalibOptions(iterations=GRANULARITY_ITERS)
    rows, net_wins, chan_wins = [], 0, 0
    for seed in GRANULARITY_SEEDS:
        ckpt = train(build_model(ModelSpec(), seed=seed), desk_clip, TrainOptions(epochs=300, seed=seed))
        if seed == 0 and GRANULARITY_ITERS == CalibOptions().iterations:
            # the desk model is the seed-0 model; reuse its default network-wise run
            net = _by_avg(default_sweep[1], default_sweep[0])[GRANULARITY_BITS].point.psnr
        else:
            net = _track(ckpt, lambda: quantize(ckpt, desk_clip, GRANULARITY_BITS, opts)).point.psnr
        lay = _track(ckpt, lambda: quantize(ckpt, desk_clip, GRANULARITY_BITS, opts, granularity="layer")).point.psnr
        lst = _track(ckpt, lambda: quantize(ckpt, desk_clip, GRANULARITY_BITS, opts, steps="layer")).point.psnr
        net_wins += net >= lay
        chan_wins += net >= lst
        rows.append(f"seed {seed}: net {net:.2f} vs layer-calib {lay:.2f}, channel {net:.2f} vs layer-steps {lst:.2f}")
    need = len(GRANULARITY_SEEDS) // 2 + 1
    ok = net_wins >= need and chan_wins >= need
    acceptance(7, "granularity ordering (majority of 3 seeds)", ok,
               f"network>=layer {net_wins}/3, channel>=layer-steps {chan_wins}/3; " + "; ".join(rows))
    assert ok


def test_criterion_08_rounding_convergence(acceptance, default_sweep):
    ckpt, results, _ = default_sweep
    parts = []
    ok = True
    for avg, r in sorted(_by_avg(results, ckpt).items()):
        h = np.concatenate([rect_sigmoid(r.state.V[n]).ravel() for n in r.state.layers])
        frac = float(np.mean(np.minimum(h, 1 - h) <= 1e-2))
        ok &= frac >= 0.99
        parts.append(f"{avg}-bit {100 * frac:.2f}%")
    acceptance(8, "h(V) within 1e-2 of {0,1}", ok, ", ".join(parts))
    assert ok


def test_soft_hard_consistency(default_sweep):
    # invariant of converged calibration (not a numbered criterion)
    ckpt, results, _ = default_sweep
    teacher = render_all(ckpt.spec, ckpt.weights)
    gaps = {}
    for avg, r in sorted(_by_avg(results, ckpt).items()):
        hard = distortion(teacher, render_all(ckpt.spec, quantized_weights(ckpt.weights, r.state)))
        soft = distortion(teacher, render_all(ckpt.spec, quantized_weights(ckpt.weights, r.state, hard=False)))
        gaps[avg] = abs(soft - hard) / hard
    assert all(g < 0.05 for g in gaps.values()), gaps


def test_criterion_10_variable_rate_sweep(acceptance, default_sweep):
    ckpt, results, unchanged = default_sweep
    pts = [r.point for r in results]
    rates = [p.bpp for p in pts]
    quality = [p.psnr for p in pts]
    increasing = len(pts) == 4 and all(b > a for a, b in zip(rates, rates[1:]))
    monotone = all(b >= a - 0.1 for a, b in zip(quality, quality[1:]))
    ok = increasing and monotone and unchanged
    acceptance(10, "variable-rate sweep from one checkpoint", ok,
               "; ".join(f"{p.bpp:.4f} bpp {p.psnr:.2f} dB" for p in pts) + f"; checkpoint hash unchanged {unchanged}")
    assert ok


def test_criterion_09_codec(acceptance, default_sweep, minmax_sweep):
    # runs after the calibration criteria so the corpus holds every stream they produced
    lossless = bounded = exact = 0
    for r, ckpt in _CORPUS:
        dec = decode(r.stream.raw, ckpt.spec.digest())
        same = all(
            np.array_equal(dec.model.ints[n], r.model.ints[n])
            and dec.model.steps[n].tobytes() == r.model.steps[n].tobytes()
            and dec.model.bits[n] == r.model.bits[n]
            for n in ckpt.layer_order
        )
        lossless += same and encode(dec.spec_digest, dec.model, dec.order).raw == r.stream.raw
        ok_bounds = True
        for rec in r.stream.layers:
            coded = 8 * len(rec.payload)
            ints = r.model.ints[rec.name].ravel()
            ok_bounds &= empirical_entropy_bits(ints) <= coded <= rec.bits * ints.size + 8 * len(rec.table)
        bounded += ok_bounds
        T, H, W = ckpt.spec.frames, ckpt.spec.height, ckpt.spec.width
        pix = T * H * W
        wbits = 8 * sum(len(l.payload) + len(l.table) for l in r.stream.layers)
        sbits = 16 * sum(l.steps.size for l in r.stream.layers)
        got = bpp(r.stream, T, H, W)
        exact += got.weights == wbits / pix and got.steps == sbits / pix and r.point.bpp == got.total
    n = len(_CORPUS)
    ok = n > 0 and lossless == bounded == exact == n
    acceptance(9, "codec lossless, bounded, exact bpp", ok, f"{n} streams: lossless {lossless}, bounds {bounded}, bpp {exact}")
    assert ok


def test_criterion_11_teacher_immutability(acceptance, default_sweep, minmax_sweep):
    ok = len(_FINGERPRINTS) > 0 and all(_FINGERPRINTS)
    acceptance(11, "teacher weights unchanged by calibration", ok, f"{sum(_FINGERPRINTS)}/{len(_FINGERPRINTS)} runs bit-identical")
    assert ok
