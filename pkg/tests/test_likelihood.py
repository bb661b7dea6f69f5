import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmdfit.errors import DegenerateRange, InvalidConfig, OutOfRange, ParseError
from cmdfit.likelihood import (
    FieldRanges,
    PhotometryCatalog,
    StarState,
    cluster_log_density,
    combine_binary,
    field_log_density,
    predicted_magnitudes,
    read_photometry_csv,
    total_log_likelihood,
    write_photometry_csv,
)
from cmdfit.stellar_model import ClusterParams, ToyModelConfig, to_apparent, toy_magnitudes

from conftest import make_catalog

EQUAL_PAIR_OFFSET = 2.5 * math.log10(2.0)  # 0.752574989159953


class TestCombineBinary:
    def test_equal_magnitudes(self):
        assert combine_binary(10.0, 10.0) == pytest.approx(10.0 - EQUAL_PAIR_OFFSET, abs=1e-12)

    def test_infinite_secondary_is_identity(self):
        for g in (-3.0, 0.0, 12.0, 30.0):
            assert combine_binary(g, math.inf) == g
            assert combine_binary(math.inf, g) == g

    def test_both_infinite(self):
        assert combine_binary(math.inf, math.inf) == math.inf

    def test_frozen_value(self):
        # -2.5*log10(10**-4 + 10**-5), evaluated in 40-digit arithmetic
        assert combine_binary(10.0, 12.5) == pytest.approx(9.8965182871044374, abs=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(
        st.floats(min_value=-10, max_value=30),
        st.floats(min_value=-10, max_value=30),
    )
    def test_bounds(self, g1, g2):
        out = combine_binary(g1, g2)
        mn = min(g1, g2)
        assert mn - EQUAL_PAIR_OFFSET - 1e-12 <= out <= mn + 1e-12

    def test_printed_residual_form_matches(self):
        # the mixture density's residual written as x + 2.5*log10(sum of
        # luminosities) equals x - combined_magnitude
        rng = np.random.default_rng(3)
        for _ in range(100):
            g1, g2 = rng.uniform(-5, 25, 2)
            x = rng.uniform(-5, 25)
            direct = x + 2.5 * math.log10(10 ** (-g1 / 2.5) + 10 ** (-g2 / 2.5))
            assert direct == pytest.approx(x - combine_binary(g1, g2), abs=1e-12)


class TestPredicted:
    def test_zero_ratio_is_single_star(self, small_table, theta_mid):
        single = predicted_magnitudes(StarState(1.0, 0.0, 1), theta_mid, small_table)
        from cmdfit.stellar_model import interpolate_magnitudes

        expect = to_apparent(
            interpolate_magnitudes(small_table, 1.0, theta_mid.theta_age, theta_mid.theta_feh),
            theta_mid.theta_dm, theta_mid.theta_av, small_table.filters,
        )
        assert np.allclose(single, expect, atol=1e-12)

    def test_equal_mass_twin(self, small_table, theta_mid):
        single = predicted_magnitudes(StarState(1.0, 0.0, 1), theta_mid, small_table)
        twin = predicted_magnitudes(StarState(1.0, 1.0, 1), theta_mid, small_table)
        assert np.allclose(twin, single - EQUAL_PAIR_OFFSET, atol=1e-12)

    def test_binary_against_toy_closed_form(self, small_toy_config, small_table, theta_mid):
        # node masses and a grid age/feh make the interpolation exact, so
        # this checks the luminosity-sum composition against the closed form
        mass = small_table.tracks[1][5].mass
        m1, m2 = float(mass[40]), float(mass[30])
        theta = ClusterParams(float(small_table.age_grid[5]), float(small_table.feh_grid[1]),
                              0.0, theta_mid.theta_dm, theta_mid.theta_av)
        got = predicted_magnitudes(StarState(m1, m2 / m1, 1), theta, small_table)
        g1 = toy_magnitudes(small_toy_config, m1, theta.theta_age, theta.theta_feh)
        g2 = toy_magnitudes(small_toy_config, m2, theta.theta_age, theta.theta_feh)
        expect = to_apparent(
            combine_binary(g1, g2), theta.theta_dm, theta.theta_av, small_table.filters
        )
        assert np.allclose(got, expect, atol=1e-10)

    def test_propagates_out_of_range(self, small_table, theta_mid):
        with pytest.raises(OutOfRange):
            predicted_magnitudes(StarState(9.5, 0.0, 1), theta_mid, small_table)


class TestDensities:
    def test_cluster_zero_residual(self):
        got = cluster_log_density(np.array([5.0]), np.array([1.0]), np.array([5.0]))
        assert got == pytest.approx(-0.9189385332046727, abs=1e-12)

    def test_cluster_unit_residual(self):
        got = cluster_log_density(np.array([6.0]), np.array([1.0]), np.array([5.0]))
        assert got == pytest.approx(-1.4189385332046727, abs=1e-12)

    def test_missing_filters_skipped(self):
        full = cluster_log_density(np.array([5.0, np.nan]), np.array([1.0, np.nan]), np.array([5.0, 99.0]))
        only = cluster_log_density(np.array([5.0]), np.array([1.0]), np.array([5.0]))
        assert full == only

    def test_maximized_at_mean(self):
        x = np.array([5.0, 7.0])
        sd = np.array([0.1, 0.2])
        peak = cluster_log_density(x, sd, x)
        for j in range(2):
            for eps in (-1e-3, 1e-3):
                mu = x.copy()
                mu[j] += eps
                assert cluster_log_density(x, sd, mu) < peak

    def test_field_density_product(self):
        r = FieldRanges(np.array([0.0, 0.0]), np.array([10.0, 5.0]))
        assert field_log_density(np.array([5.0, 2.0]), r) == pytest.approx(math.log(1 / 50), abs=1e-12)

    def test_field_outside_support(self):
        r = FieldRanges(np.array([0.0]), np.array([10.0]))
        assert field_log_density(np.array([11.0]), r) == -math.inf

    def test_field_unit_width(self):
        r = FieldRanges(np.array([0.0]), np.array([1.0]))
        assert field_log_density(np.array([0.5]), r) == 0.0

    def test_degenerate_range(self):
        with pytest.raises(DegenerateRange):
            FieldRanges(np.array([1.0]), np.array([1.0]))


class TestTotalLikelihood:
    def _setup(self, small_table, theta_mid):
        states = [StarState(0.8, 0.0, 1), StarState(1.2, 0.5, 0), StarState(0.5, 0.0, 1)]
        mus = [predicted_magnitudes(s, theta_mid, small_table) for s in states]
        x = np.array([mus[0] + 0.01, [9.0, 10.0], mus[2] - 0.02])
        cat = make_catalog(x)
        ranges = FieldRanges(np.array([4.0, 4.0]), np.array([17.0, 19.0]))
        return cat, states, ranges

    def test_all_members(self, small_table, theta_mid):
        cat, states, ranges = self._setup(small_table, theta_mid)
        states = [StarState(s.m1, s.r, 1) for s in states]
        total = total_log_likelihood(cat, states, theta_mid, small_table, ranges)
        by_hand = sum(
            cluster_log_density(cat.x[i], cat.sigma[i], predicted_magnitudes(states[i], theta_mid, small_table))
            for i in range(3)
        )
        assert total == pytest.approx(by_hand, abs=1e-12)

    def test_all_field_constant_in_theta(self, small_table, theta_mid):
        cat, states, ranges = self._setup(small_table, theta_mid)
        states = [StarState(s.m1, s.r, 0) for s in states]
        a = total_log_likelihood(cat, states, theta_mid, small_table, ranges)
        other = ClusterParams(8.3, -0.4, 0.2, 0.5, 0.9)
        moved = [StarState(2.0, 0.9, 0) for _ in states]
        b = total_log_likelihood(cat, moved, other, small_table, ranges)
        assert a == b  # bitwise: field terms carry no parameters

    def test_mixed_term_by_term(self, small_table, theta_mid):
        cat, states, ranges = self._setup(small_table, theta_mid)
        total = total_log_likelihood(cat, states, theta_mid, small_table, ranges)
        expect = (
            cluster_log_density(cat.x[0], cat.sigma[0], predicted_magnitudes(states[0], theta_mid, small_table))
            + field_log_density(cat.x[1], ranges)
            + cluster_log_density(cat.x[2], cat.sigma[2], predicted_magnitudes(states[2], theta_mid, small_table))
        )
        assert total == pytest.approx(expect, abs=1e-12)


class TestCatalog:
    def test_invariants(self):
        with pytest.raises(InvalidConfig):
            make_catalog(np.array([[np.nan, np.nan]]))  # no observed filter
        with pytest.raises(InvalidConfig):
            PhotometryCatalog(["a"], ("V",), np.array([[5.0]]), np.array([[0.0]]), np.array([0.5]))
        with pytest.raises(InvalidConfig):
            make_catalog(np.array([[5.0, 6.0]]), pmember=1.5)
        with pytest.raises(InvalidConfig):
            PhotometryCatalog(["a", "a"], ("V",), np.full((2, 1), 5.0), np.full((2, 1), 0.1), np.full(2, 0.5))

    def test_state_validation(self):
        with pytest.raises(InvalidConfig):
            StarState(-1.0, 0.5, 1).validate()
        with pytest.raises(InvalidConfig):
            StarState(1.0, 1.5, 1).validate()
        with pytest.raises(InvalidConfig):
            StarState(1.0, 0.5, 2).validate()
        assert StarState(1.0, 0.5, 1).validate().m2 == 0.5

    def test_csv_round_trip(self, tmp_path):
        x = np.array([[10.0, np.nan], [11.5, 12.0]])
        cat = make_catalog(x, pmember=[0.9, np.nan])
        path = tmp_path / "phot.csv"
        write_photometry_csv(cat, path)
        back = read_photometry_csv(path)
        assert back.star_ids == cat.star_ids
        assert back.filter_names == cat.filter_names
        assert np.array_equal(back.x, cat.x, equal_nan=True)
        assert np.array_equal(back.sigma, cat.sigma, equal_nan=True)
        assert np.array_equal(back.pmember, cat.pmember, equal_nan=True)

    def test_parse_errors_cite_location(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("id,pmember,V_mag,V_sd\ns1,0.5,10.0,oops\n")
        with pytest.raises(ParseError) as err:
            read_photometry_csv(p)
        assert err.value.line == 2 and err.value.column == 4

        p.write_text("id,pmember,V_mag\ns1,0.5,10.0\n")
        with pytest.raises(ParseError):
            read_photometry_csv(p)

        p.write_text("id,pmember,V_mag,B_sd\ns1,0.5,10.0,0.1\n")
        with pytest.raises(ParseError, match="pair"):
            read_photometry_csv(p)

    def test_field_ranges_from_catalog_pad(self):
        x = np.array([[10.0, 12.0], [11.0, 13.0]])
        cat = make_catalog(x, sigma=[[0.1, 0.2], [0.3, 0.1]])
        r = FieldRanges.from_catalog(cat)
        assert r.lo[0] == pytest.approx(10.0 - 0.3)
        assert r.hi[0] == pytest.approx(11.0 + 0.3)
        assert r.lo[1] == pytest.approx(12.0 - 0.2)
        assert r.hi[1] == pytest.approx(13.0 + 0.2)
