import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from conftest import make_bank
from irtscale import (
    AbilityEstimate,
    ItemBank,
    ResponseMatrix,
    composite_reliability,
    conditional_reliability,
    cronbach_alpha,
    eap_marginal_reliability,
    empirical_reliability,
    score_eap,
    score_responses,
    simulate_responses,
    test_information,
    wright_map_data,
)
from irtscale.scoring import reliability_report

FINE = np.linspace(-10, 10, 10_001)


def fine_grid_eap(bank, y):
    """Posterior mean and SD by brute-force integration on 10,001 nodes."""
    y = np.asarray(y, dtype=float)
    obs = ~np.isnan(y)
    p = bank.c[obs] + (1 - bank.c[obs]) / (1 + np.exp(-bank.a[obs] * (FINE[:, None] - bank.b[obs])))
    like = np.prod(np.where(y[obs] == 1, p, 1 - p), axis=1)
    w = like * norm.pdf(FINE)
    w /= w.sum()
    mean = w @ FINE
    return mean, math.sqrt(w @ (FINE - mean) ** 2)


class TestScoreEAP:
    def test_all_missing_is_prior(self, aicos):
        est = score_eap(aicos, [np.nan] * len(aicos))
        assert est.theta_eap == pytest.approx(0.0, abs=1e-12)
        assert est.posterior_sd == pytest.approx(1.0, abs=0.01)
        assert est.n_answered == 0

    def test_all_correct_above_all_incorrect(self, aicos):
        hi = score_eap(aicos, np.ones(len(aicos)))
        lo = score_eap(aicos, np.zeros(len(aicos)))
        assert hi.theta_eap > lo.theta_eap

    def test_single_item_fine_grid(self):
        bank = make_bank([1.5], [0.5], kind="2PL")
        mean, sd = fine_grid_eap(bank, [1.0])
        est = score_eap(bank, [1.0])
        assert est.theta_eap == pytest.approx(mean, abs=1e-3)
        assert est.posterior_sd == pytest.approx(sd, abs=1e-3)

    def test_misaligned(self):
        with pytest.raises(ValueError):
            score_eap(make_bank([1.0, 1.0], [0.0, 0.0]), [1.0])

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 12))
    def test_flip_zero_to_one_increases_theta(self, seed, k):
        rng = np.random.default_rng(seed)
        bank = make_bank(rng.uniform(0.3, 2.5, k), rng.uniform(-3, 3, k), rng.uniform(0, 0.3, k))
        y = (rng.random(k) < 0.5).astype(float)
        zeros = np.flatnonzero(y == 0)
        if zeros.size == 0:
            y[0] = 0.0
            zeros = np.array([0])
        y2 = y.copy()
        y2[rng.choice(zeros)] = 1.0
        assert score_eap(bank, y2).theta_eap > score_eap(bank, y).theta_eap

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_sd_in_unit_interval_2pl(self, seed):
        # log-concave likelihood times a unit-variance normal prior
        rng = np.random.default_rng(seed)
        bank = make_bank(rng.uniform(0.3, 2.5, 6), rng.uniform(-3, 3, 6), kind="2PL")
        y = np.where(rng.random(6) < 0.2, np.nan, (rng.random(6) < 0.5).astype(float))
        est = score_eap(bank, y)
        assert 0 < est.posterior_sd <= 1.0 + 1e-9
        assert math.isfinite(est.theta_eap)

    def test_3pl_posterior_can_exceed_prior_sd(self):
        # guessing makes the likelihood non-log-concave; the fine grid agrees SD > 1 here
        bank = make_bank([2.32, 0.6, 2.46], [-1.4, 1.29, 2.19], [0.05, 0.17, 0.28])
        mean, sd = fine_grid_eap(bank, [1.0, 1.0, 1.0])
        est = score_eap(bank, [1.0, 1.0, 1.0])
        assert sd > 1.0
        assert est.posterior_sd == pytest.approx(sd, abs=1e-3)
        assert est.theta_eap == pytest.approx(mean, abs=1e-3)

    def test_score_responses_matches_single(self):
        rng = np.random.default_rng(1)
        bank = make_bank(rng.uniform(0.5, 2, 5), rng.uniform(-2, 2, 5), kind="2PL")
        data = simulate_responses(bank, rng.standard_normal(20), 1)
        ests = score_responses(bank, data)
        for e, row in zip(ests, data.data):
            single = score_eap(bank, row)
            assert e.theta_eap == pytest.approx(single.theta_eap, abs=1e-12)
            assert e.posterior_sd == pytest.approx(single.posterior_sd, abs=1e-12)


class TestMarginalReliability:
    def test_empty_bank(self):
        assert eap_marginal_reliability(ItemBank([])) == 0.0

    def test_strong_bank(self):
        bank = make_bank(np.full(200, 2.0), np.linspace(-3, 3, 200), kind="2PL")
        assert eap_marginal_reliability(bank) >= 0.95
        assert eap_marginal_reliability(bank, method="simulation", n_sim=5000) >= 0.95

    def test_methods_agree_on_aicos(self, aicos):
        info = eap_marginal_reliability(aicos)
        sim = eap_marginal_reliability(aicos, method="simulation", n_sim=5000)
        assert info == pytest.approx(sim, abs=0.02)
        assert 0 <= info <= 1

    def test_unknown_method(self, aicos):
        with pytest.raises(ValueError):
            eap_marginal_reliability(aicos, method="bogus")

    def test_adding_items_never_decreases(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            k = int(rng.integers(1, 15))
            a, b, c = rng.uniform(0.3, 2.5, k + 1), rng.uniform(-3, 3, k + 1), rng.uniform(0, 0.3, k + 1)
            small = make_bank(a[:k], b[:k], c[:k])
            big = make_bank(a, b, c)
            assert eap_marginal_reliability(big) >= eap_marginal_reliability(small)


class TestEmpiricalReliability:
    def test_zero_sd_limit(self):
        ests = [AbilityEstimate(i, t, 1e-9, 5) for i, t in enumerate([-1.0, 0.0, 0.5, 2.0])]
        assert empirical_reliability(ests) == pytest.approx(1.0, abs=1e-12)

    def test_identical_thetas(self):
        ests = [AbilityEstimate(i, 0.3, 0.5, 5) for i in range(4)]
        assert empirical_reliability(ests) == 0.0

    def test_zero_total_variance(self):
        ests = [AbilityEstimate(i, 0.3, 0.0, 5) for i in range(4)]
        with pytest.warns(RuntimeWarning):
            assert empirical_reliability(ests) == 0.0

    def test_formula(self):
        ests = [AbilityEstimate(0, -1.0, 0.5, 3), AbilityEstimate(1, 1.0, 0.3, 3)]
        var = 2.0  # sample variance of (-1, 1)
        assert empirical_reliability(ests) == pytest.approx(var / (var + (0.25 + 0.09) / 2))

    def test_aicos_simulation(self, aicos):
        rng = np.random.default_rng(514)
        data = simulate_responses(aicos, rng.standard_normal(514), 514)
        value = empirical_reliability(score_responses(aicos, data))
        assert 0.80 <= value <= 0.92

    def test_shrinkage(self, aicos):
        rng = np.random.default_rng(9)
        data = simulate_responses(aicos, rng.standard_normal(5000), 9)
        theta = np.array([e.theta_eap for e in score_responses(aicos, data)])
        assert theta.std(ddof=1) < 1.0


class TestConditionalReliability:
    def test_identities(self):
        # a=2 at theta=b gives I = 1
        assert conditional_reliability(make_bank([2.0], [0.0]), 0.0) == pytest.approx(0.5)
        assert conditional_reliability(ItemBank([]), 0.0) == 0.0

    def test_aicos_peak(self, aicos):
        assert conditional_reliability(aicos, 0.47) == pytest.approx(0.878, abs=0.01)

    def test_increasing_in_information(self, aicos):
        theta = np.linspace(-4, 4, 81)
        info = test_information(aicos, theta)
        rel = conditional_reliability(aicos, theta)
        order = np.argsort(info)
        assert np.all(np.diff(rel[order]) >= 0)


class TestCronbachAlpha:
    def test_identical_columns(self):
        col = np.array([0, 1, 1, 0, 1], dtype=float)
        assert cronbach_alpha(ResponseMatrix(np.column_stack([col, col]), ("a", "b"))) == pytest.approx(1.0)

    def test_independent_coins(self):
        rng = np.random.default_rng(3)
        data = (rng.random((5000, 20)) < 0.5).astype(float)
        ids = tuple(f"q{j}" for j in range(20))
        assert abs(cronbach_alpha(ResponseMatrix(data, ids))) < 0.05

    def test_two_item_covariance_oracle(self):
        # patterns chosen so both items have variance .25 and covariance .125 (population)
        data = np.array([[1, 1], [1, 1], [1, 1], [0, 0], [0, 0], [0, 0], [1, 0], [0, 1]], dtype=float)
        x = data - data.mean(axis=0)
        cov = x.T @ x / len(data)
        assert np.allclose(np.diag(cov), 0.25) and cov[0, 1] == pytest.approx(0.125)
        # the ddof factor cancels in the ratio
        assert cronbach_alpha(ResponseMatrix(data, ("a", "b"))) == pytest.approx(2 * (1 - 0.5 / 0.75))

    def test_constant_total(self):
        data = np.array([[1, 0], [0, 1], [1, 0]], dtype=float)
        with pytest.raises(ValueError, match="constant total score"):
            cronbach_alpha(ResponseMatrix(data, ("a", "b")))

    def test_listwise_deletion_warns(self):
        data = np.array([[1, 1], [0, 0], [1, np.nan], [1, 0], [0, 0]], dtype=float)
        with pytest.warns(RuntimeWarning, match="1 incomplete rows"):
            value = cronbach_alpha(ResponseMatrix(data, ("a", "b")))
        complete = np.delete(data, 2, axis=0)
        assert value == pytest.approx(cronbach_alpha(ResponseMatrix(complete, ("a", "b"))))

    def test_column_permutation_exact(self):
        rng = np.random.default_rng(4)
        data = (rng.random((300, 7)) < rng.uniform(0.2, 0.8, 7)).astype(float)
        ids = tuple("abcdefg")
        perm = rng.permutation(7)
        a = cronbach_alpha(ResponseMatrix(data, ids))
        b = cronbach_alpha(ResponseMatrix(data[:, perm], tuple(ids[j] for j in perm)))
        assert a == pytest.approx(b, rel=1e-14)


class TestCompositeReliability:
    def test_ea(self):
        assert composite_reliability([.41, .62, .66, .63, .63, .38]) == pytest.approx(0.73, abs=0.01)

    def test_ca(self):
        assert composite_reliability([.40, .30, .22, .49, .40, .63, .65]) == pytest.approx(0.64, abs=0.01)

    def test_unit_loading(self):
        assert composite_reliability([1.0]) == 1.0

    def test_empty(self):
        with pytest.raises(ValueError):
            composite_reliability([])

    @given(st.lists(st.floats(0.01, 0.99), min_size=1, max_size=12), st.randoms())
    def test_permutation_invariant(self, lam, rnd):
        shuffled = lam[:]
        rnd.shuffle(shuffled)
        assert composite_reliability(shuffled) == pytest.approx(composite_reliability(lam), rel=1e-12)

    @given(st.lists(st.floats(0.01, 0.9), min_size=1, max_size=12), st.data())
    def test_increasing_in_loading(self, lam, data):
        j = data.draw(st.integers(0, len(lam) - 1))
        bumped = lam[:]
        bumped[j] += 0.05
        assert composite_reliability(bumped) > composite_reliability(lam)


class TestWrightMap:
    def test_aicos_item_span(self, aicos):
        wm = wright_map_data(aicos, [])
        bs = [b for _, b in wm.items]
        assert min(bs) == pytest.approx(-2.84) and max(bs) == pytest.approx(3.34)
        assert bs == sorted(bs) and len(bs) == 51
        assert wm.person_counts.size == 0

    def test_counts_sum(self, aicos):
        rng = np.random.default_rng(5)
        data = simulate_responses(aicos, rng.standard_normal(300), 5)
        wm = wright_map_data(aicos, score_responses(aicos, data), bin_width=0.3)
        assert wm.person_counts.sum() == 300
        assert np.allclose(np.diff(wm.bin_edges), 0.3)
        assert sum(r["kind"] == "item" for r in wm.rows()) == 51

    def test_bad_width(self, aicos):
        with pytest.raises(ValueError):
            wright_map_data(aicos, [], bin_width=0.0)


class TestReliabilityReport:
    def test_entries(self, aicos):
        rng = np.random.default_rng(6)
        data = simulate_responses(aicos, rng.standard_normal(400), 6)
        rep = reliability_report(aicos, data)
        for value in (rep.eap_marginal, rep.empirical, rep.cronbach_alpha):
            assert value <= 1
        assert all(0 <= v <= 1 for v in rep.conditional.values())
        assert set(rep.composite) == {"AA", "CA", "DA", "EA", "GA", "UA"}
        assert rep.alpha_rows_deleted == 0
        assert rep.as_dict()["conditional"]["0"] == rep.conditional[0.0]


class TestFiveItemOracle:
    def test_exhaustive_patterns(self):
        rng = np.random.default_rng(7)
        bank = make_bank(rng.uniform(0.5, 2.5, 5), rng.uniform(-2, 2, 5), rng.uniform(0, 0.3, 5))
        for pattern in itertools.product([0.0, 1.0], repeat=5):
            mean, sd = fine_grid_eap(bank, pattern)
            est = score_eap(bank, pattern)
            assert abs(est.theta_eap - mean) < 1e-3
            assert abs(est.posterior_sd - sd) < 1e-3
