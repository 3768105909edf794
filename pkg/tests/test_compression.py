import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedsl.compression import (
    DropoutSpec,
    PruneMask,
    QuantizerSpec,
    SparsitySchedule,
    apply_mask,
    build_mask,
    dropout_backward,
    dropout_forward,
    importance,
    quantization_range,
    quantize,
    sparsity,
    target_sparsity,
)
from fedsl.errors import DimensionError, InputError
from fedsl.nn import make_rng
from oracles import central_difference, grad_close, sorted_mask_oracle


class TestSchedule:
    def test_final_round_hits_rho_f(self):
        assert target_sparsity(SparsitySchedule(0.35, 100), 100) == 0.35

    def test_midpoint(self):
        assert target_sparsity(SparsitySchedule(0.35, 100), 50) == pytest.approx(0.30625, abs=1e-15)

    @pytest.mark.parametrize("t", [0, 101])
    def test_round_out_of_range(self, t):
        with pytest.raises(InputError):
            target_sparsity(SparsitySchedule(0.35, 100), t)

    @pytest.mark.parametrize("rho", [-0.1, 1.0])
    def test_rho_f_domain(self, rho):
        with pytest.raises(InputError):
            SparsitySchedule(rho, 10)

    @settings(max_examples=50, deadline=None)
    @given(rho=st.floats(0.0, 0.99), T=st.integers(1, 400))
    def test_monotone_bounded_and_sum_bound(self, rho, T):
        s = SparsitySchedule(rho, T)
        values = [s.target(t) for t in range(1, T + 1)]
        assert all(0.0 <= v <= rho for v in values)
        assert all(a <= b for a, b in zip(values, values[1:]))
        assert values[-1] == rho
        if T >= 2 and rho > 0:
            assert math.fsum(values) < T * rho


class TestImportance:
    def test_zero_weight(self):
        np.testing.assert_array_equal(importance(np.zeros((2, 2)), np.ones((2, 2))), 0.0)

    def test_scalar(self):
        assert importance(np.array([0.5]), np.array([-2.0]))[0] == 1.0

    def test_vector_and_ranking(self):
        scores = importance(np.array([[1.0, -2.0]]), np.array([[3.0, 0.5]]))
        np.testing.assert_array_equal(scores, [[3.0, 1.0]])
        kept = build_mask(scores, 0.5).bits
        np.testing.assert_array_equal(kept, [[True, False]])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            importance(np.ones((2, 2)), np.ones((2, 3)))


class TestBuildMask:
    def test_zero_target_keeps_existing(self):
        existing = PruneMask(np.array([[True, False], [True, True]]))
        assert build_mask(np.arange(4.0).reshape(2, 2), 0.0, existing) == existing

    def test_two_lowest(self):
        mask = build_mask(np.array([3.0, 1.0, 2.0, 4.0]), 0.5)
        np.testing.assert_array_equal(np.flatnonzero(~mask.bits), [1, 2])

    def test_ties_broken_by_index(self):
        mask = build_mask(np.array([1.0, 1.0, 1.0, 1.0]), 0.5)
        np.testing.assert_array_equal(np.flatnonzero(~mask.bits), [0, 1])

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_sort_oracle(self, seed):
        rng = np.random.default_rng(seed)
        # coarse values force plenty of ties
        scores = rng.integers(0, 20, size=(10, 10)).astype(float)
        target = float(rng.uniform(0, 0.95))
        mask = build_mask(scores, target)
        assert mask.sparsity >= target
        np.testing.assert_array_equal(mask.bits, sorted_mask_oracle(scores, target))

    def test_union_with_existing(self):
        rng = np.random.default_rng(4)
        scores = rng.random((6, 6))
        existing = PruneMask(rng.random((6, 6)) > 0.2)
        mask = build_mask(scores, 0.3, existing)
        assert not np.any(mask.bits & ~existing.bits)
        np.testing.assert_array_equal(mask.bits, sorted_mask_oracle(scores, 0.3, existing.bits))
        assert mask.sparsity >= 0.3

    def test_target_count_exact_for_awkward_products(self):
        # 0.35 * 20 and 0.7 * 10 are not exact in binary floating point
        for target, n in [(0.35, 20), (0.7, 10), (0.1, 30), (0.29, 100)]:
            mask = build_mask(np.arange(float(n)), target)
            assert mask.sparsity >= target
            assert (np.count_nonzero(~mask.bits) - 1) / n < target

    def test_invalid_target(self):
        with pytest.raises(InputError):
            build_mask(np.ones(4), 1.0)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            build_mask(np.ones((2, 2)), 0.5, PruneMask.ones((3, 3)))


class TestApplyMask:
    def test_all_ones_identity(self):
        x = np.random.default_rng(0).normal(size=(3, 4))
        np.testing.assert_array_equal(apply_mask(PruneMask.ones(x.shape), x), x)

    def test_all_zeros(self):
        x = np.random.default_rng(0).normal(size=(3, 4))
        out = apply_mask(PruneMask(np.zeros(x.shape, bool)), x)
        np.testing.assert_array_equal(out, 0.0)
        assert not np.any(np.signbit(out))

    def test_idempotent(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            x = rng.normal(size=(5, 5))
            m = PruneMask(rng.random((5, 5)) > 0.5)
            once = apply_mask(m, x)
            np.testing.assert_array_equal(apply_mask(m, once), once)
            assert sparsity(once) >= m.sparsity

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            apply_mask(PruneMask.ones((2, 2)), np.ones((2, 3)))


def knobs(g_min, g_max, q):
    step = (g_max - g_min) / (2**q - 1)
    return np.array([g_min + u * step for u in range(2**q - 1)] + [g_max])


class TestQuantize:
    def test_knob_values_pass_through(self):
        k = knobs(0.0, 1.0, 2)
        g = np.array([k[0], k[1], -k[2], k[3]])
        for seed in range(200):
            np.testing.assert_array_equal(quantize(g, QuantizerSpec(2), make_rng(seed)), g)

    def test_midpoint_splits_evenly(self):
        g = np.tile([0.0, 0.5, 1.0], (20000, 1))
        out = quantize(g, QuantizerSpec(2), make_rng(3))[:, 1]
        k = knobs(0.0, 1.0, 2)
        assert set(np.unique(out)) <= {k[1], k[2]}
        frac_up = np.mean(out == k[2])
        assert abs(frac_up - 0.5) < 4 * 0.5 / math.sqrt(len(out))

    def test_sign_preserved(self):
        g = np.random.default_rng(0).normal(size=(8, 8))
        out = quantize(g, QuantizerSpec(3), make_rng(0))
        assert np.all(np.sign(out) * np.sign(g) >= 0)

    def test_degenerate_range_unchanged(self):
        g = np.array([[-0.5, 0.5], [0.5, -0.5]])
        np.testing.assert_array_equal(quantize(g, QuantizerSpec(4), make_rng(0)), g)
        z = np.zeros((3, 3))
        np.testing.assert_array_equal(quantize(z, QuantizerSpec(4), make_rng(0)), z)

    def test_off_is_exact_copy(self):
        g = np.random.default_rng(2).normal(size=(4, 4))
        out = quantize(g, QuantizerSpec(0), make_rng(0))
        np.testing.assert_array_equal(out, g)
        assert out is not g

    def test_range_ignores_pruned_entries(self):
        rng = np.random.default_rng(5)
        g = rng.uniform(0.5, 1.0, size=(6, 6)) * rng.choice([-1, 1], size=(6, 6))
        support = rng.random((6, 6)) > 0.4
        g = np.where(support, g, 0.0)
        lo, hi = quantization_range(g, support)
        assert lo >= 0.5
        out = quantize(g, QuantizerSpec(2), make_rng(1), support=support)
        np.testing.assert_array_equal(out[~support], 0.0)
        grid = knobs(lo, hi, 2)
        assert np.all(np.isin(np.abs(out[support]), grid))

    @pytest.mark.parametrize("q", [1, 2, 4, 8])
    def test_error_bound_and_grid(self, q):
        rng = np.random.default_rng(q)
        for trial in range(20):
            g = rng.normal(size=(7, 5)) * rng.uniform(0.01, 10)
            lo, hi = quantization_range(g)
            step = (hi - lo) / (2**q - 1)
            out = quantize(g, QuantizerSpec(q), make_rng(trial, q))
            assert np.all(np.abs(out - g) <= step)
            grid = knobs(lo, hi, q)
            nearest = np.min(np.abs(np.abs(out).ravel()[:, None] - grid[None, :]), axis=1)
            assert np.all(nearest <= np.spacing(hi))

    def test_unbiased_small(self):
        g = np.random.default_rng(9).normal(size=6)
        n = 40000
        out = quantize(np.tile(g, (n, 1)), QuantizerSpec(2), make_rng(9))
        lo, hi = quantization_range(g)
        step = (hi - lo) / 3
        frac = (np.abs(g) - lo) / step % 1.0
        se = step * np.sqrt(frac * (1 - frac)) / math.sqrt(n)
        assert np.all(np.abs(out.mean(axis=0) - g) <= 4 * se + 1e-12)

    def test_deterministic_given_seed(self):
        g = np.random.default_rng(1).normal(size=(5, 5))
        a = quantize(g, QuantizerSpec(4), make_rng(77))
        b = quantize(g, QuantizerSpec(4), make_rng(77))
        np.testing.assert_array_equal(a, b)

    def test_spec(self):
        spec = QuantizerSpec(3)
        assert spec.knob_count == 8 and spec.interval_count == 7
        with pytest.raises(InputError):
            QuantizerSpec(-1)


class TestDropout:
    def test_p_zero_identity(self):
        a = np.random.default_rng(0).normal(size=(6, 3))
        out, keep = dropout_forward(a, DropoutSpec(0.0), make_rng(0))
        np.testing.assert_array_equal(out, a)
        assert keep.all()

    def test_kept_rows_scaled_dropped_rows_zero(self):
        a = np.tile([3.0, -1.0], (64, 1))
        out, keep = dropout_forward(a, DropoutSpec(0.5), make_rng(1))
        assert keep.any() and (~keep).any()
        np.testing.assert_array_equal(out[keep], np.tile([6.0, -2.0], (keep.sum(), 1)))
        np.testing.assert_array_equal(out[~keep], 0.0)

    @pytest.mark.parametrize("p", [0.3, 0.7])
    def test_unbiased_small(self, p):
        a = np.random.default_rng(2).normal(size=(1, 4))
        n = 40000
        out, _ = dropout_forward(np.repeat(a, n, axis=0), DropoutSpec(p), make_rng(5))
        se = np.abs(a[0]) * math.sqrt(p / (1 - p)) / math.sqrt(n)
        assert np.all(np.abs(out.mean(axis=0) - a[0]) <= 4 * se)

    def test_backward_identity_at_p_zero(self):
        g = np.random.default_rng(0).normal(size=(4, 3))
        np.testing.assert_array_equal(dropout_backward(g, np.ones(4, bool), DropoutSpec(0.0)), g)

    def test_backward_dropped_rows_zero(self):
        g = np.ones((3, 2))
        keep = np.array([True, False, True])
        out = dropout_backward(g, keep, DropoutSpec(0.5))
        np.testing.assert_array_equal(out, [[2.0, 2.0], [0.0, 0.0], [2.0, 2.0]])

    def test_backward_is_adjoint_under_frozen_mask(self):
        rng = np.random.default_rng(8)
        a = rng.normal(size=(10, 3))
        probe = rng.normal(size=(10, 3))
        spec = DropoutSpec(0.4)
        _, keep = dropout_forward(a, spec, make_rng(8))

        def loss():
            return float(np.sum(np.where(keep[:, None], a * spec.scale, 0.0) * probe))

        ok, worst = grad_close(dropout_backward(probe, keep, spec), central_difference(loss, a))
        assert ok, worst

    def test_backward_mask_shape(self):
        with pytest.raises(DimensionError):
            dropout_backward(np.ones((3, 2)), np.ones(4, bool), DropoutSpec(0.1))

    @pytest.mark.parametrize("p", [-0.1, 1.0])
    def test_p_domain(self, p):
        with pytest.raises(InputError):
            DropoutSpec(p)
