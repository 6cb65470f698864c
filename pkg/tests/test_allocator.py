import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from inrquant.allocator import (
    BitConfig,
    InfeasibleTarget,
    RateTarget,
    allocate,
    enumerate_configs,
    minmax_dequant,
    model_size_bits,
    scored_candidates_csv,
    select,
)
from inrquant.sensitivity import SensitivityReport, omega, omega_quadratic_oracle


def brute_force(counts, cand, target):
    return sorted(c for c in itertools.product(sorted(cand), repeat=len(counts)) if target.admits(model_size_bits(counts, c)))


instances = st.tuples(
    st.lists(st.integers(1, 400), min_size=1, max_size=5),
    st.sets(st.integers(2, 8), min_size=1, max_size=4),
    st.floats(2.0, 8.5),
    st.sampled_from([0.0, 0.01, 0.05, 0.2]),
)


class TestRateTarget:
    def test_band(self):
        t = RateTarget(1000, 0.05)
        assert t.admits(950) and t.admits(1050) and not t.admits(1051)

    @pytest.mark.parametrize("bits,tol", [(0, 0.05), (10, -0.1), (10, 1.0)])
    def test_invalid(self, bits, tol):
        with pytest.raises(ValueError):
            RateTarget(bits, tol)


class TestEnumerate:
    @given(instances)
    @settings(max_examples=300)
    def test_matches_brute_force(self, inst):
        counts, cand, avg, tol = inst
        target = RateTarget(avg * sum(counts), tol)
        ref = brute_force(counts, cand, target)
        if not ref:
            with pytest.raises(InfeasibleTarget):
                enumerate_configs(counts, cand, target, cap=10**6)
            return
        got = enumerate_configs(counts, cand, target, cap=10**6)
        assert [c.bits for c in got] == ref
        for c in got:
            c.check(counts)
            assert abs(c.size_bits - target.bits) <= tol * target.bits

    def test_uniform_eight_bit(self):
        counts = [10, 20, 30]
        got = enumerate_configs(counts, range(3, 9), RateTarget(8 * 60, 0.0))
        assert [c.bits for c in got] == [(8, 8, 8)]

    def test_infeasible_reports_nearest(self):
        counts = [100, 100]
        with pytest.raises(InfeasibleTarget) as err:
            enumerate_configs(counts, [3, 4], RateTarget(2000, 0.05))
        assert err.value.nearest == (800, 600)
        assert "achievable range is [600, 800]" in str(err.value)

    def test_cap_keeps_closest(self):
        counts = [5] * 6
        target = RateTarget(5.5 * 30, 0.2)
        full = enumerate_configs(counts, range(3, 9), target, cap=10**6)
        capped = enumerate_configs(counts, range(3, 9), target, cap=20)
        assert len(capped) == 20 and len(full) > 20
        worst = max(abs(c.size_bits - target.bits) for c in capped)
        dropped = [c for c in full if c not in capped]
        assert all(abs(c.size_bits - target.bits) >= worst for c in dropped)
        assert [c.bits for c in capped] == sorted(c.bits for c in capped)

    def test_many_layers_use_search(self):
        counts = [7] * 14
        target = RateTarget(5 * 98, 0.05)
        got = enumerate_configs(counts, range(3, 9), target, cap=30)
        assert 0 < len(got) <= 30
        assert all(target.admits(c.size_bits) for c in got)

    @pytest.mark.parametrize("cand", [[], [1, 4], [4, 9]])
    def test_bad_candidates(self, cand):
        with pytest.raises(ValueError):
            enumerate_configs([10], cand, RateTarget(40))

    def test_size_formula(self):
        assert model_size_bits([3, 5], (4, 2)) == 22
        assert BitConfig.of((4, 2), [3, 5]).size_bits == 22
        with pytest.raises(ValueError):
            model_size_bits([3], (4, 2))

    @given(st.lists(st.integers(1, 50), min_size=1, max_size=4), st.floats(3, 4))
    @settings(max_examples=50)
    def test_doubling_never_shrinks(self, counts, avg):
        total = sum(counts)
        try:
            a = enumerate_configs(counts, [2, 3, 4, 6, 8], RateTarget(avg * total, 0.05))
            b = enumerate_configs(counts, [2, 3, 4, 6, 8], RateTarget(2 * avg * total, 0.05))
        except InfeasibleTarget:
            return
        assert min(c.size_bits for c in b) >= max(c.size_bits for c in a)


def _quadratic_select(weights, curvature, configs):
    """Select by Omega on loss = sum_l a_l/2 |w_l - w_l*|^2 with the optimum at the FP weights."""
    w = np.concatenate([x.reshape(-1) for x in weights])
    a = np.concatenate([np.full(x.size, c) for x, c in zip(weights, curvature)])
    H = np.diag(a)

    def loss_at(v):
        return 0.5 * float((v - w) @ H @ (v - w)), H @ (v - w)

    reports, true = [], {}
    for cfg in configs:
        d = np.concatenate([(minmax_dequant(x, b) - x).reshape(-1) for x, b in zip(weights, cfg.bits)])
        reports.append(SensitivityReport(cfg.bits, omega(loss_at, w, d), 0.0, 0.0, cfg.size_bits))
        true[cfg.bits] = loss_at(w + d)[0]
        assert reports[-1].omega == pytest.approx(omega_quadratic_oracle(H, d), rel=1e-6)
    return select(reports), true


class TestSelection:
    def test_steep_bowl_gets_more_bits(self, rng):
        weights = [rng.normal(size=(4, 10)), rng.normal(size=(4, 10))]
        configs = enumerate_configs([40, 40], range(3, 9), RateTarget(5 * 80, 0.05))
        best, true = _quadratic_select(weights, [1.0, 100.0], configs)
        assert best.config[1] > best.config[0]
        assert best.config == min(true, key=lambda c: (true[c], c))

    @pytest.mark.parametrize("seed", range(5))
    def test_oracle_agreement(self, seed):
        r = np.random.default_rng(seed)
        weights = [r.normal(size=(2, 6)) for _ in range(3)]
        configs = enumerate_configs([12] * 3, [3, 4, 6, 8], RateTarget(5 * 36, 0.1))
        best, true = _quadratic_select(weights, r.uniform(0.1, 10, size=3), configs)
        assert best.config == min(true, key=lambda c: (true[c], c))

    def test_tie_break_lexicographic(self):
        reps = [SensitivityReport((5, 4), 1.0, 0, 0, 9), SensitivityReport((4, 5), 1.0, 0, 0, 9)]
        assert select(reps).config == (4, 5)

    def test_non_finite_disqualified(self):
        reps = [SensitivityReport((3,), float("nan"), 0, 0, 3), SensitivityReport((4,), 9.0, 0, 0, 4)]
        assert select(reps).config == (4,)
        with pytest.raises(ValueError):
            select(reps[:1])

    def test_csv_header(self):
        text = scored_candidates_csv([SensitivityReport((4, 5), 0.5, 0, 0, 9)])
        assert text.splitlines() == ["config,size_bits,omega,first_order,omega_w0", "4-5,9,0.5,0.0,"]


class TestAllocate:
    def test_tiny_model(self, tiny_spec):
        from inrquant.nervlite import TrainOptions, build_model, train
        from inrquant.video import synthetic_clip

        clip = synthetic_clip(0, 4, 4, 4)
        ck = train(build_model(tiny_spec), clip, TrainOptions(epochs=100))
        target = RateTarget(5 * ck.n_params)
        alloc = allocate(ck, clip, target, with_w0=True)
        assert target.admits(alloc.config.size_bits)
        assert alloc.state.bits == dict(zip(ck.layer_order, alloc.config.bits))
        assert alloc.reports and all(r.omega_w0 is not None for r in alloc.reports)
        assert allocate(ck, clip, target).config == alloc.config

    def test_single_layer_nearest(self):
        configs = enumerate_configs([100], range(3, 9), RateTarget(510, 0.05))
        assert [c.bits for c in configs] == [(5,)]
