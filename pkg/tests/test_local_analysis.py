import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _util import cycle_table, positive_table, reference_mle
from decomp_ips.engines import AlreadyFittedError, find_alpha0, submodel_step
from decomp_ips.local_analysis import (
    alpha0_approx,
    alpha0_approx_terms,
    diagnose,
    epsilon_of,
    evaluate_F,
    figure1_curves,
    find_alpha1,
    find_alpha2,
    kl_decrease,
    perturb,
    repeat_until_fixed,
)
from decomp_ips.models import PerfectSequence, greedy_spanning
from decomp_ips.tables import DenseTable, Schema, kl_divergence, marginalize, normalize

PATH = PerfectSequence.from_order(["12", "23", "34"])


def _near_mle(seed: int, delta: float):
    rng = np.random.default_rng(seed)
    r, c = cycle_table(4, 2, rng)
    mle = reference_mle(r, c)
    return r, c, mle, perturb(mle, delta, rng)


def _kl_after(mle, p, r, alpha):
    return kl_divergence(mle, normalize(submodel_step(p, r, PATH, alpha)))


class TestEpsilon:
    def test_zero_cases(self):
        r, c, mle, _ = _near_mle(0, 0.01)
        assert epsilon_of(r, r, c) == 0
        u = DenseTable(r.schema, np.full(r.schema.shape, 1 / 16))
        assert epsilon_of(u, u, c, greedy_spanning(c)) == 0

    def test_scales_with_delta(self):
        r, c, mle, p = _near_mle(1, 1e-3)
        eps = epsilon_of(p, r, c, greedy_spanning(c))
        assert 1e-4 < eps < 1e-2


class TestAlpha0Approx:
    def test_mle_degenerate(self):
        r, c, mle, _ = _near_mle(2, 0.01)
        with pytest.raises(AlreadyFittedError):
            alpha0_approx(mle, r, PATH)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_forms_agree_and_numerator_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        s = Schema.of({"1": 2, "2": 3, "3": 2, "4": 2})
        r, p = positive_table(s, rng), positive_table(s, rng)
        num_t, den = alpha0_approx_terms(p, r, PATH)
        num_d, _ = alpha0_approx_terms(p, r, PATH, form="direct")
        assert num_t >= 0 and den >= 0
        assert num_t == pytest.approx(num_d, abs=1e-12)

    def test_close_to_exact_near_mle(self):
        r, c, mle, p = _near_mle(3, 1e-3)
        eps = epsilon_of(p, r, c)
        assert abs(alpha0_approx(p, r, PATH) - find_alpha0(p, r, PATH)) < eps


class TestF:
    def test_zero_and_linear(self):
        r, c, mle, p = _near_mle(4, 0.01)
        assert evaluate_F(0.0, mle, p, r, PATH) == 0
        assert evaluate_F(1.4, mle, p, r, PATH) == pytest.approx(2 * evaluate_F(0.7, mle, p, r, PATH), rel=1e-12)

    @pytest.mark.parametrize("alpha", [0.3, 1.0, 1.7])
    def test_decrease_is_exact_kl_drop(self, alpha):
        r, c, mle, p = _near_mle(5, 0.02)
        drop = kl_divergence(mle, p) - _kl_after(mle, p, r, alpha)
        assert kl_decrease(alpha, mle, p, r, PATH) == pytest.approx(drop, abs=1e-12)


class TestAlpha1:
    def test_beats_unit_and_alpha0(self):
        r, c, mle, p = _near_mle(6, 0.02)
        a1 = find_alpha1(mle, p, r, PATH)
        a0 = find_alpha0(p, r, PATH)
        assert kl_decrease(a1, mle, p, r, PATH) > 0
        assert _kl_after(mle, p, r, a1) <= _kl_after(mle, p, r, 1.0) + 1e-15
        assert _kl_after(mle, p, r, a1) <= _kl_after(mle, p, r, a0) + 1e-15

    def test_matches_grid_oracle(self):
        r, c, mle, p = _near_mle(7, 0.05)
        a0 = find_alpha0(p, r, PATH)
        grid = np.linspace(0, 4 * a0, 8001)
        vals = np.array([kl_decrease(a, mle, p, r, PATH) for a in grid])
        k = int(np.argmax(vals))
        # parabola through the neighbours of the best grid point
        coef = np.polyfit(grid[k - 2 : k + 3], vals[k - 2 : k + 3], 2)
        oracle = -coef[1] / (2 * coef[0])
        assert find_alpha1(mle, p, r, PATH) == pytest.approx(oracle, abs=1e-6)

    def test_fitted_member(self):
        r, c, mle, _ = _near_mle(8, 0.01)
        with pytest.raises(AlreadyFittedError):
            find_alpha1(mle, mle, r, PATH)


class TestAlpha2:
    def test_root_and_descent_range(self):
        r, c, mle, p = _near_mle(9, 0.01)
        a2 = find_alpha2(mle, p, r, PATH)
        assert abs(kl_decrease(a2, mle, p, r, PATH)) <= 1e-9
        assert 0 < find_alpha0(p, r, PATH) <= a2
        before = kl_divergence(mle, p)
        for frac in (0.5, 0.9):
            assert _kl_after(mle, p, r, frac * a2) < before


class TestCurves:
    def test_rows(self):
        r, c, mle, p = _near_mle(10, 0.01)
        a0 = find_alpha0(p, r, PATH)
        a2 = find_alpha2(mle, p, r, PATH)
        grid = np.concatenate([[0.0, a0], np.linspace(0.05, 0.95 * a2, 40)])
        rows = figure1_curves(mle, p, r, PATH, grid)
        assert rows[0] == (0.0, 0.0, 0.0)
        assert abs(rows[1][1]) <= 1e-12
        assert all(d > 0 for a, _, d in rows[2:])

    def test_log_g_convex(self):
        r, c, mle, p = _near_mle(11, 0.05)
        rows = figure1_curves(mle, p, r, PATH, np.linspace(0, 3, 61))
        lg = np.array([row[1] for row in rows])
        assert np.all(np.diff(lg, 2) >= -1e-12)

    def test_negative_grid(self):
        r, c, mle, p = _near_mle(12, 0.01)
        with pytest.raises(ValueError):
            figure1_curves(mle, p, r, PATH, [-0.1])


class TestDiagnose:
    def test_near_mle(self):
        r, c, mle, p = _near_mle(13, 0.01)
        d = diagnose(mle, p, r, c, PATH, greedy_spanning(c))
        assert all(v is not None and v >= 0 for v in d.to_dict().values())
        assert d.alpha2 == pytest.approx(2 * d.alpha0_exact, abs=0.1)

    def test_at_mle(self):
        r, c, mle, _ = _near_mle(14, 0.01)
        d = diagnose(mle, mle, r, c, PATH)
        assert d.alpha0_exact is None and d.alpha0_approx is None
        assert d.epsilon <= 1e-10


class TestPerturbAndRepeat:
    def test_perturb_normalized(self):
        r, c, mle, p = _near_mle(15, 0.1)
        assert p.total() == pytest.approx(1, abs=1e-14)
        assert np.max(np.abs(p.values / mle.values - 1)) < 0.25

    def test_repeat_limit_fits_member_and_is_closer(self):
        r, c, mle, p = _near_mle(16, 0.05)
        limit, steps = repeat_until_fixed(p, r, PATH)
        assert steps >= 1
        for g in PATH.order:
            np.testing.assert_allclose(marginalize(limit, g).values, marginalize(r, g).values, atol=1e-11)
        one = normalize(submodel_step(p, r, PATH, find_alpha0(p, r, PATH)))
        assert kl_divergence(mle, limit) <= kl_divergence(mle, one) + 1e-15
