import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import calc_M, rel_err
from sbsrl.kernel_gp import AffineMean, KernelSpec, PriorSpec, ZeroMean, gp_fit
from sbsrl.sampler import (
    BudgetInputs,
    ConservatismWarning,
    SmallBallConfig,
    clip_through_layers,
    draw_posterior_sample,
    draw_prior_sample,
    eval_sample,
    evaluate_samples,
    exploration_threshold,
    layer_bands,
    prior_layer,
    sample_budget,
    small_ball_draws,
    small_ball_exponent,
    tightening_delta,
    truncate_sample,
)

LN2 = math.log(2.0)


def se(ls=(1.0,), var=1.0):
    return KernelSpec("se", ls, var)


def prior(d_x=1, sigma_w=0.1, mean=None, scale=None):
    return PriorSpec(mean or ZeroMean(d_x), 1.0, sigma_w, scale)


def fitted(seed=0, n=6, d_x=2, sigma_w=0.1):
    rng = np.random.default_rng(seed)
    return gp_fit(prior(d_x, sigma_w), se((0.8,)), rng.uniform(-1, 1, (n, 1)), rng.normal(size=(n, d_x)))


class TestPriorSample:
    @pytest.mark.parametrize("mode", ["pathwise", "rff"])
    def test_degenerate_kernel_equals_mean(self, mode):
        mean = AffineMean([[2.0]], [0.5])
        s = draw_prior_sample(prior(1, mean=mean), se((1.0,), 1e-12), 3, mode=mode)
        Z = np.linspace(-2, 2, 9)[:, None]
        np.testing.assert_allclose(s(Z), mean(Z), atol=1e-5)

    def test_marginal_moments(self):
        n = 2000
        z = np.array([[0.3]])
        vals = np.array([draw_prior_sample(prior(), se(), seed)(z)[0, 0] for seed in range(n)])
        assert abs(vals.mean()) < 3 / math.sqrt(n)
        assert 0.85 <= vals.var(ddof=1) <= 1.15

    def test_joint_covariance(self):
        k = se((0.7,))
        z1, z2 = np.array([[0.0]]), np.array([[0.5]])
        pairs = []
        for seed in range(2000):
            s = draw_prior_sample(prior(), k, seed)
            a = s(z1)[0, 0]
            pairs.append((a, s(z2)[0, 0]))
        C = np.cov(np.array(pairs).T)
        want = np.array([[1.0, math.exp(-0.5 * (0.5 / 0.7) ** 2)]] * 2)
        want[1] = want[0][::-1]
        assert np.abs(C - want).max() < 0.1

    def test_rff_marginal_moments(self):
        vals = np.array([draw_prior_sample(prior(), se(), seed, mode="rff")([[0.2]])[0, 0]
                         for seed in range(2000)])
        assert abs(vals.mean()) < 3 / math.sqrt(2000)
        assert 0.85 <= vals.var(ddof=1) <= 1.15

    def test_repeat_query_identical(self):
        s = draw_prior_sample(prior(2), se(), 7)
        Z = np.array([[0.1], [0.4], [0.1]])
        first = s(Z)
        np.testing.assert_array_equal(first[0], first[2])
        np.testing.assert_array_equal(s(Z[::-1]), first[::-1])
        np.testing.assert_array_equal(eval_sample(s, [0.4]), first[1])

    def test_same_seed_same_function(self):
        Z = np.linspace(-1, 1, 5)[:, None]
        for mode in ("pathwise", "rff"):
            a = draw_prior_sample(prior(2), se(), 11, mode=mode)(Z)
            b = draw_prior_sample(prior(2), se(), 11, mode=mode)(Z)
            np.testing.assert_array_equal(a, b)

    def test_output_scale(self):
        vals = np.array([draw_prior_sample(prior(2, scale=(0.1, 2.0)), se(), seed)([[0.0]])[0]
                         for seed in range(1000)])
        sd = vals.std(0)
        assert 0.08 < sd[0] < 0.12 and 1.6 < sd[1] < 2.4


class TestPosteriorSample:
    def test_moments_match_posterior(self):
        gp = fitted(1, d_x=1)
        z = np.array([[0.25]])
        mu, sd = gp.predict(z)
        for mode in ("pathwise", "rff"):
            vals = np.array([draw_posterior_sample(gp, seed, mode=mode)(z)[0, 0] for seed in range(2000)])
            assert abs(vals.mean() - mu[0, 0]) < 4 * sd[0] / math.sqrt(2000)
            assert 0.85 <= vals.var(ddof=1) / sd[0] ** 2 <= 1.15

    def test_pathwise_joint_with_data(self):
        gp = fitted(2, d_x=1)
        Z = np.array([[-0.3], [0.6]])
        mu = gp.mean(Z)[:, 0]
        Ks = gp.predict(Z)
        vals = np.array([draw_posterior_sample(gp, s)(Z)[:, 0] for s in range(2000)])
        from sbsrl.kernel_gp import kernel_matrix
        K = kernel_matrix(gp.kernel, Z) - kernel_matrix(gp.kernel, Z, gp.Z) @ np.linalg.solve(
            kernel_matrix(gp.kernel, gp.Z) + 0.01 * np.eye(gp.n), kernel_matrix(gp.kernel, gp.Z, Z))
        assert np.abs(np.cov(vals.T) - K).max() < 0.1 * max(1.0, np.abs(K).max())
        assert np.abs(vals.mean(0) - mu).max() < 4 * Ks[1].max() / math.sqrt(2000)


class TestTruncation:
    def test_value_inside_band(self):
        gp = fitted(3)
        s = draw_prior_sample(gp.prior, gp.kernel, 5)
        truncate_sample(s, gp, 0.5)
        Z = np.linspace(-2, 2, 30)[:, None]
        v = s(Z)
        m, sd = gp.mean(Z), gp.std(Z)
        assert (v >= m - 0.5 * sd - 1e-12).all() and (v <= m + 0.5 * sd + 1e-12).all()

    @pytest.mark.parametrize("mode", ["pathwise", "rff"])
    def test_zero_width_band_gives_mean(self, mode):
        gp = fitted(4)
        s = draw_prior_sample(gp.prior, gp.kernel, 6, mode=mode).truncate(gp, 0.0)
        Z = np.linspace(-1, 1, 7)[:, None]
        np.testing.assert_array_equal(s(Z), gp.nested_predict(Z, [gp.n])[0][0])
        np.testing.assert_allclose(s(Z), gp.mean(Z), atol=1e-12)

    def test_inside_band_unchanged(self):
        gp = fitted(5)
        s = draw_prior_sample(gp.prior, gp.kernel, 8)
        Z = np.linspace(-1, 1, 11)[:, None]
        before = s(Z).copy()
        s.truncate(gp, 1e6)
        np.testing.assert_array_equal(s(Z), before)

    def test_clip_arithmetic(self):
        gp = fitted(6)
        Z = np.array([[0.2], [0.7]])
        m, sd = gp.mean(Z), gp.std(Z)
        b = 0.8
        out = clip_through_layers([(gp, b)], Z, m + 2 * b * sd)
        np.testing.assert_allclose(out, m + b * sd, atol=1e-12)
        out = clip_through_layers([(gp, b)], Z, m - 2 * b * sd)
        np.testing.assert_allclose(out, m - b * sd, atol=1e-12)

    def test_truncation_reclips_cache(self):
        gp = fitted(7)
        s = draw_prior_sample(gp.prior, gp.kernel, 9)
        Z = np.linspace(-1, 1, 11)[:, None]
        raw = s(Z).copy()
        s.truncate(gp, 0.3)
        np.testing.assert_allclose(s.cache_val, clip_through_layers([(gp, 0.3)], Z, raw))
        np.testing.assert_array_equal(s.raw(Z), raw)

    def test_two_layers_equal_intersection(self):
        rng = np.random.default_rng(8)
        p = prior(2)
        k = se((0.8,))
        Zd, Yd = rng.uniform(-1, 1, (8, 1)), rng.normal(size=(8, 2))
        g1 = gp_fit(p, k, Zd[:3], Yd[:3])
        g2 = gp_fit(p, k, Zd, Yd)
        Z = np.linspace(-1.5, 1.5, 40)[:, None]
        checked = 0
        for seed in range(20):
            s = draw_prior_sample(p, k, seed)
            vals = s(Z).copy()
            s.truncate(g1, 1.5).truncate(g2, 1.0)
            (m1, m2), (s1, s2) = [x for x in layer_bands([(g1, 1.5), (g2, 1.0)], Z)]
            lo = np.maximum(m1 - 1.5 * s1[:, None], m2 - 1.0 * s2[:, None])
            hi = np.minimum(m1 + 1.5 * s1[:, None], m2 + 1.0 * s2[:, None])
            ok = lo <= hi
            checked += ok.sum()
            np.testing.assert_allclose(s(Z)[ok], np.clip(vals, lo, hi)[ok], atol=1e-12)
        assert checked > 0

    def test_nesting(self):
        gp = fitted(9)
        s = draw_prior_sample(gp.prior, gp.kernel, 10).truncate(gp, 2.0)
        Z = np.linspace(-1, 1, 21)[:, None]
        before = s(Z).copy()
        m, sd = gp.mean(Z), gp.std(Z)
        inside = np.abs(before - m) <= 1.0 * sd
        s.truncate(gp, 1.0)
        np.testing.assert_array_equal(s(Z)[inside], before[inside])

    def test_band_containment_through_layers(self):
        rng = np.random.default_rng(11)
        p = prior(1)
        k = se((0.5,))
        Zd, Yd = rng.uniform(-1, 1, (9, 1)), rng.normal(size=(9, 1))
        layers = [(prior_layer(p, k), 2.0), (gp_fit(p, k, Zd[:3], Yd[:3]), 2.0), (gp_fit(p, k, Zd, Yd), 2.0)]
        for mode in ("pathwise", "rff"):
            s = draw_prior_sample(p, k, 12, mode=mode)
            for g, b in layers:
                s.truncate(g, b)
            Z = rng.uniform(-2, 2, (50, 1))
            v = s(Z)
            # the last layer is always satisfied; earlier ones wherever the bands intersect
            m, sd = layers[-1][0].mean(Z), layers[-1][0].std(Z)
            assert (np.abs(v - m) <= 2.0 * sd + 1e-12).all()

    def test_negative_radius(self):
        gp = fitted(12)
        with pytest.raises(ValueError):
            draw_prior_sample(gp.prior, gp.kernel, 0).truncate(gp, -1.0)

    def test_evaluate_samples_matches_individual(self):
        gp = fitted(13)
        ss = [draw_prior_sample(gp.prior, gp.kernel, i, mode="rff").truncate(gp, 1.0) for i in range(3)]
        ss.append(draw_prior_sample(gp.prior, gp.kernel, 9).truncate(gp, 1.0))
        Zs = [np.linspace(-1, 1, 5)[:, None] + 0.1 * i for i in range(4)]
        batch = evaluate_samples(ss, Zs)
        for s, Z, b in zip(ss, Zs, batch):
            np.testing.assert_allclose(b, s(Z), atol=1e-13)


class TestBudget:
    def test_hand_value_one(self):
        # d_x (B^2/2 + phi) = ln 2
        assert sample_budget(BudgetInputs(0.5, 0.1, 1.0, 1, LN2 - 0.5)) == 1

    def test_hand_value_four(self):
        assert sample_budget(BudgetInputs(0.1, 0.1, 1.0, 1, LN2 - 0.5)) == 4

    def test_vacuous_confidence(self):
        assert sample_budget(BudgetInputs(1.0, 0.1, 1.0, 1, 0.2)) == 1
        assert sample_budget(BudgetInputs(0.999999, 0.1, 0.01, 1, 0.0)) == 1

    def test_cap_warns(self):
        with pytest.warns(ConservatismWarning):
            assert sample_budget(BudgetInputs(0.1, 0.1, 3.0, 2, 2.0), cap=100) == 100

    def test_huge_exponent_is_stable(self):
        with pytest.warns(ConservatismWarning):
            assert sample_budget(BudgetInputs(0.1, 0.1, 50.0, 4, 0.0), cap=1000) == 1000

    def test_tiny_exponent(self):
        # 1 - exp(-x) ~ x for tiny x, so M ~ log(1/delta) / x... but the log is of a value close to 0
        M = sample_budget(BudgetInputs(0.1, 0.1, 1e-4, 1, 0.0))
        assert M == calc_M(0.1, 1e-4, 1, 0.0) == 1

    def test_invalid(self):
        with pytest.raises(ValueError):
            BudgetInputs(0.0, 0.1, 1.0, 1, 0.0)
        with pytest.raises(ValueError):
            BudgetInputs(0.5, 0.0, 1.0, 1, 0.0)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0.01, 0.99), st.floats(0.01, 3.0), st.integers(1, 4), st.floats(0.0, 3.0))
    def test_matches_calculator(self, delta, B, d_x, phi):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConservatismWarning)
            M = sample_budget(BudgetInputs(delta, 0.1, B, d_x, phi), cap=10**15)
        ref = calc_M(delta, B, d_x, phi)
        assert abs(M - ref) <= 1e-12 * ref


class TestSmallBall:
    CFG = SmallBallConfig(n_draws=4000, n_grid=64, lower=(0.0,), upper=(1.0,), seed=0)

    def test_large_zeta_is_zero(self):
        assert small_ball_exponent(se(), 1e6, self.CFG) == pytest.approx(0.0, abs=1e-12)

    def test_tiny_zeta_hits_floor(self):
        assert small_ball_exponent(se(), 1e-9, self.CFG) == pytest.approx(math.log(4001.0))

    def test_monotone(self):
        draws = small_ball_draws(se((0.3,)), self.CFG)
        vals = [small_ball_exponent(se((0.3,)), z, self.CFG, draws) for z in (0.1, 0.3, 0.6, 1.0, 2.0, 4.0)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_draw_marginals(self):
        draws = small_ball_draws(se((0.3,), 2.0), self.CFG)
        assert draws.shape == (4000, 64)
        assert 1.8 < draws[:, 10].var() < 2.2

    def test_invalid_zeta(self):
        with pytest.raises(ValueError):
            small_ball_exponent(se(), 0.0, self.CFG)


class TestSchedules:
    def test_tightening_hand(self):
        assert tightening_delta(0.01, 4, 10, 1.0, 0.1) == pytest.approx(20.0, rel=1e-14)

    def test_tightening_zero_and_linear(self):
        assert tightening_delta(0.0, 3, 10, 2.0, 0.1) == 0.0
        a = tightening_delta(0.003, 3, 7, 2.0, 0.1)
        assert tightening_delta(0.006, 3, 7, 2.0, 0.1) == pytest.approx(2 * a, rel=1e-14)

    def test_tightening_zero_noise(self):
        with pytest.raises(ValueError):
            tightening_delta(0.01, 1, 10, 1.0, 0.0)

    def test_threshold_hand(self):
        assert exploration_threshold(1.0, 0.1, 1.0, 10, 1.0) == pytest.approx(0.005, rel=1e-14)

    def test_threshold_zero_eps(self):
        assert exploration_threshold(0.0, 0.1, 1.0, 10, 1.0) == 0.0

    def test_threshold_halves(self):
        a = exploration_threshold(2.0, 0.1, 3.0, 10, 1.3)
        assert exploration_threshold(2.0, 0.1, 3.0, 10, 2.6) == pytest.approx(a / 2, rel=1e-14)
        assert exploration_threshold(2.0, 0.1, 3.0, 10, 2.6) < a

    @pytest.mark.parametrize("args", [(1.0, 0.1, 0.0, 10, 1.0), (1.0, 0.1, 1.0, 0, 1.0), (1.0, 0.1, 1.0, 10, 0.0)])
    def test_threshold_zero_denominator(self, args):
        with pytest.raises(ValueError):
            exploration_threshold(*args)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 3.0))
def test_truncation_preserves_close_sample(seed, beta):
    """A sample within zeta of f* stays within zeta after clipping to a band that holds f*."""
    rng = np.random.default_rng(seed)
    gp = fitted(seed % 7)
    Z = rng.uniform(-1, 1, (25, 1))
    m, sd = gp.mean(Z), gp.std(Z)
    f_star = m + beta * sd * rng.uniform(-1, 1, m.shape)
    zeta = 0.05
    sample_vals = f_star + zeta * rng.uniform(-0.999, 0.999, m.shape)
    out = clip_through_layers([(gp, beta)], Z, sample_vals)
    assert (np.abs(out - f_star) < zeta).all()


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-4, 1.0), st.integers(1, 6), st.integers(1, 50), st.floats(0.1, 10), st.floats(1e-3, 1.0))
def test_tightening_property(zeta, d_x, T, C_max, sigma_w):
    from oracles import calc_delta_zeta
    assert rel_err(tightening_delta(zeta, d_x, T, C_max, sigma_w), calc_delta_zeta(zeta, d_x, T, C_max, sigma_w)) < 1e-12
