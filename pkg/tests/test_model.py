import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from scipy import integrate
from scipy.stats import norm

from conftest import make_bank
from irtscale import (
    ItemBank,
    ItemParameters,
    ResponseMatrix,
    ThetaGrid,
    irf,
    item_information,
    log_likelihood,
    simulate_responses,
    test_information,
    tif_summary,
)
from irtscale.model import CURVE_GRID, DEFAULT_GRID, normalize_model_kind

items = st.builds(
    lambda a, b, c: ItemParameters("x", a, b, c, "3PL"),
    st.floats(0.1, 4.0),
    st.floats(-4.0, 4.0),
    st.floats(0.0, 0.5),
)


class TestItemParameters:
    def test_rejects_nonpositive_slope(self):
        with pytest.raises(ValueError):
            ItemParameters("x", 0.0, 0.0, 0.0, "2PL")

    def test_rejects_guessing_for_2pl(self):
        with pytest.raises(ValueError):
            ItemParameters("x", 1.0, 0.0, 0.2, "2PL")

    def test_rejects_c_of_one(self):
        with pytest.raises(ValueError):
            ItemParameters("x", 1.0, 0.0, 1.0, "3PL")

    def test_rejects_nonfinite_b(self):
        with pytest.raises(ValueError):
            ItemParameters("x", 1.0, math.inf, 0.0, "3PL")

    def test_model_kind_aliases(self):
        assert normalize_model_kind("2pl") == "2PL"
        with pytest.raises(ValueError):
            normalize_model_kind("4PL")


class TestItemBank:
    def test_duplicate_ids_rejected(self):
        it = ItemParameters("x", 1.0, 0.0, 0.0, "2PL")
        with pytest.raises(ValueError, match="duplicate item id"):
            ItemBank([it, it])

    def test_lookup_and_subset(self):
        bank = make_bank([1.0, 1.5, 2.0], [0.0, 1.0, -1.0])
        assert bank["i1"].a == 1.5
        assert bank[2].item_id == "i2"
        assert bank.subset(["i2", "i0"]).ids == ["i0", "i2"]  # bank order kept
        assert bank.without(["i1"]).ids == ["i0", "i2"]

    def test_arrays_are_read_only(self):
        bank = make_bank([1.0, 1.5], [0.0, 1.0])
        with pytest.raises(ValueError):
            bank.a[0] = 3.0


class TestResponseMatrix:
    def test_rejects_invalid_cells(self):
        with pytest.raises(ValueError):
            ResponseMatrix(np.array([[0, 2]]), ("a", "b"))

    def test_missing_counted(self):
        r = ResponseMatrix(np.array([[0, np.nan], [1, 1]]), ("a", "b"))
        assert r.n_missing == 1
        assert r.complete_rows().n_persons == 1


class TestThetaGrid:
    def test_weights_normalized(self):
        g = ThetaGrid.normal(61, -6, 6)
        assert math.isclose(g.weights.sum(), 1.0, rel_tol=1e-12)
        assert len(DEFAULT_GRID) == 61 and len(CURVE_GRID) == 121

    def test_rejects_unsorted_nodes(self):
        with pytest.raises(ValueError):
            ThetaGrid(np.array([0.0, -1.0]), np.array([0.5, 0.5]))


class TestIRF:
    def test_midpoint(self):
        assert irf(ItemParameters("x", 1, 0, 0, "2PL"), 0.0) == 0.5

    def test_ua26_value(self):
        # oracle: 1 / (1 + exp(-1.63 * 0.65))
        expected = 1.0 / (1.0 + math.exp(-1.63 * 0.65))
        assert abs(expected - 0.742595) < 1e-6
        assert irf(ItemParameters("UA26", 1.63, -0.65, 0.0, "3PL"), 0.0) == pytest.approx(0.7426, abs=1e-4)

    def test_lower_asymptote(self):
        assert irf(ItemParameters("x", 2, 1, 0.2, "3PL"), -10.0) == pytest.approx(0.2, abs=1e-6)

    def test_bundled_inflection_identity(self, aicos):
        for it in aicos:
            assert irf(it, it.b) == pytest.approx((1 + it.c) / 2, abs=1e-15)

    @given(items, st.floats(-6, 6), st.floats(1e-3, 3))
    def test_monotone(self, item, t, dt):
        assert irf(item, t) < irf(item, t + dt) or irf(item, t + dt) == 1.0

    @given(st.floats(1.0, 4.0), st.floats(-2.0, 2.0), st.floats(0.0, 0.5))
    def test_asymptotes(self, a, b, c):
        # a * (12 - |b|) >= 10 keeps the logistic tail below 5e-5
        item = ItemParameters("x", a, b, c, "3PL")
        assert abs(irf(item, -12.0) - c) < 1e-4
        assert abs(irf(item, 12.0) - 1.0) < 1e-4

    def test_asymptotes_on_moderate_items(self):
        for a, b, c in [(1.0, 0.0, 0.2), (1.2, 1.5, 0.1), (2.0, -2.0, 0.3)]:
            item = ItemParameters("x", a, b, c, "3PL")
            assert abs(irf(item, -12.0) - c) < 1e-4
            assert abs(irf(item, 12.0) - 1.0) < 1e-4


class TestInformation:
    def test_peak_value(self):
        assert item_information(ItemParameters("x", 2, 0, 0, "2PL"), 0.0) == pytest.approx(1.0)

    def test_ua26_value(self):
        p = 1.0 / (1.0 + math.exp(-1.63 * 0.65))
        oracle = 1.63**2 * p * (1 - p)
        assert oracle == pytest.approx(0.50786, abs=1e-5)
        got = item_information(ItemParameters("UA26", 1.63, -0.65, 0.0, "3PL"), 0.0)
        assert got == pytest.approx(0.5079, abs=1e-3)

    def test_vanishes_at_asymptote(self):
        assert item_information(ItemParameters("x", 1, 0, 0.3, "3PL"), -10.0) == pytest.approx(0, abs=1e-6)

    @given(items, st.floats(-5, 5))
    def test_matches_textbook_form(self, item, t):
        # the textbook form cancels catastrophically in 1 - P far above b
        assume(item.a * abs(t - item.b) < 12)
        p = irf(item, t)
        q = 1 - p
        textbook = item.a**2 * (q / p) * ((p - item.c) / (1 - item.c)) ** 2
        assert item_information(item, t) == pytest.approx(textbook, rel=1e-7)

    def test_slope_identity_finite_differences(self):
        rng = np.random.default_rng(11)
        bank = make_bank(rng.uniform(0.3, 2.5, 50), rng.uniform(-3, 3, 50), kind="2PL")
        h = 1e-5
        for it in bank:
            for t in (-2.0, -0.3, 0.0, 1.1, 2.5):
                dp = (irf(it, t + h) - irf(it, t - h)) / (2 * h)
                p = irf(it, t)
                assert item_information(it, t) == pytest.approx(dp**2 / (p * (1 - p)), rel=1e-4)

    def test_additivity(self):
        rng = np.random.default_rng(3)
        bank = make_bank(rng.uniform(0.3, 2.5, 40), rng.uniform(-3, 3, 40), rng.uniform(0, 0.3, 40))
        theta = np.linspace(-4, 4, 17)
        total = sum(item_information(it, theta) for it in bank)
        np.testing.assert_allclose(test_information(bank, theta), total, rtol=1e-10)

    def test_empty_bank(self):
        assert test_information(ItemBank([]), 0.3) == 0.0

    def test_single_item(self):
        assert test_information(make_bank([2.0], [0.0]), 0.0) == pytest.approx(1.0)

    def test_aicos_at_peak(self, aicos):
        assert test_information(aicos, 0.47) == pytest.approx(7.21, abs=0.10)


class TestTIFSummary:
    def test_aicos_peak(self, aicos):
        s = tif_summary(aicos, ThetaGrid.normal(121, -6, 6))
        assert s.peak_value == pytest.approx(7.21, abs=0.10)
        assert s.peak_theta == pytest.approx(0.47, abs=0.06)

    def test_symmetric_item(self):
        s = tif_summary(make_bank([1.0], [0.0]), ThetaGrid.normal(41, -4, 4))
        assert s.peak_theta == 0.0

    def test_tie_goes_to_smaller_theta(self):
        # peaks at -1 and 1 with equal height; grid symmetric so both nodes tie
        bank = make_bank([1.5, 1.5], [-1.0, 1.0])
        grid = ThetaGrid(np.array([-1.0, 1.0]), np.array([1.0, 1.0]))
        assert tif_summary(bank, grid).peak_theta == -1.0

    def test_empty_grid(self):
        grid = ThetaGrid(np.array([]), np.array([]))
        with pytest.raises(ValueError, match="empty evaluation grid"):
            tif_summary(make_bank([1.0], [0.0]), grid)


class TestLogLikelihood:
    def test_all_half(self):
        bank = make_bank([1.0] * 4, [0.0] * 4)
        assert log_likelihood(bank, [1, 0, 1, 1], 0.0) == pytest.approx(4 * math.log(0.5))

    def test_all_missing(self):
        bank = make_bank([1.0] * 3, [0.0] * 3)
        assert log_likelihood(bank, [np.nan] * 3, 1.2) == 0.0

    def test_single(self):
        assert log_likelihood(make_bank([1.0], [0.0]), [1], 0.0) == pytest.approx(-0.6931, abs=1e-4)

    def test_clamped_not_infinite(self):
        bank = make_bank([5.0], [0.0])
        assert math.isfinite(log_likelihood(bank, [0], 200.0))


class TestSimulation:
    def test_high_theta_all_correct(self):
        bank = make_bank([1.0, 2.0, 0.7], [0.0, 1.0, -1.0])
        r = simulate_responses(bank, np.full(200, 10.0), seed=1)
        assert r.data.mean() > 0.99

    def test_fixed_theta_mean(self):
        r = simulate_responses(make_bank([1.0], [0.0]), np.zeros(100_000), seed=7)
        assert r.data.mean() == pytest.approx(0.5, abs=0.005)

    def test_deterministic(self):
        bank = make_bank([1.0, 2.0], [0.0, 1.0])
        th = np.linspace(-2, 2, 5000)
        a = simulate_responses(bank, th, seed=5)
        b = simulate_responses(bank, th, seed=5)
        np.testing.assert_array_equal(a.data, b.data)
        c = simulate_responses(bank, th, seed=6)
        assert not np.array_equal(a.data, c.data)

    def test_empty_thetas(self):
        r = simulate_responses(make_bank([1.0], [0.0]), [], seed=0)
        assert r.data.shape == (0, 1)

    def test_empty_bank(self):
        with pytest.raises(ValueError):
            simulate_responses(ItemBank([]), [0.0], seed=0)

    def test_column_means_match_integral(self):
        bank = make_bank([0.6, 1.2, 2.0, 1.0], [-1.0, 0.0, 1.5, 0.5], [0.0, 0.2, 0.1, 0.25])
        rng = np.random.default_rng(0)
        r = simulate_responses(bank, rng.standard_normal(50_000), seed=0)
        for j, it in enumerate(bank):
            oracle, _ = integrate.quad(lambda t: irf(it, t) * norm.pdf(t), -np.inf, np.inf)
            assert r.data[:, j].mean() == pytest.approx(oracle, abs=0.01)

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_cells_binary(self, seed):
        r = simulate_responses(make_bank([1.0, 1.5], [0.0, -0.5]), np.zeros(50), seed)
        assert set(np.unique(r.data)) <= {0.0, 1.0}
