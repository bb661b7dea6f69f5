import math

import numpy as np
import pytest
from scipy.special import logsumexp

from cmdfit.errors import InvalidConfig, TooLarge
from cmdfit.likelihood import FieldRanges, StarState, predicted_magnitudes
from cmdfit.priors import ClusterPriorSpec, log_mass_prior
from cmdfit.stellar_model import ClusterParams, MainSequenceLifetime
from cmdfit.synthetic import (
    Discretization,
    DiscretizedInstance,
    _naive_interp,
    _naive_predicted,
    brute_force_posterior,
    fixture_table,
    generate_cluster,
    pseudo_prior_invariance_check,
    read_truth_csv,
    run_grid_sampler,
    three_star_fixture,
    two_star_fixture,
    write_truth_csv,
)

from conftest import make_catalog


class TestGenerator:
    def _gen(self, table, seed=1, **kw):
        theta = ClusterParams(9.0, 0.0, 0.0, 2.0, 0.1)
        ranges = FieldRanges(np.array([5.0, 5.0]), np.array([17.0, 19.0]))
        args = dict(n_cluster=30, n_field=10, binary_fraction=0.5, noise_sd=0.03,
                    ranges=ranges, seed=seed, table=table)
        args.update(kw)
        return generate_cluster(theta, **args)

    def test_zero_binary_fraction(self, small_table):
        cat, truth = self._gen(small_table, binary_fraction=0.0)
        assert np.all(truth.r[truth.z == 1] == 0.0)

    def test_zero_noise_limit(self, small_table):
        cat, truth = self._gen(small_table, noise_sd=1e-12)
        members = truth.z == 1
        assert np.allclose(cat.x[members], truth.mags_true[members], atol=1e-9)

    def test_deterministic(self, small_table):
        a, ta = self._gen(small_table, seed=9)
        b, tb = self._gen(small_table, seed=9)
        assert np.array_equal(a.x, b.x)
        assert np.array_equal(ta.m1, tb.m1, equal_nan=True)
        assert ta.n_redraws == tb.n_redraws

    def test_field_stars_inside_ranges(self, small_table):
        cat, truth = self._gen(small_table, n_cluster=0, n_field=50)
        assert np.all(cat.x >= 5.0 - 1e-12)
        assert np.all(cat.x[:, 0] <= 17.0 + 1e-12)
        assert np.all(cat.x[:, 1] <= 19.0 + 1e-12)

    def test_field_separation(self, small_table):
        cat, truth = self._gen(small_table, n_cluster=0, n_field=40, field_sep_sigma=5.0)
        from cmdfit.synthetic import _locus_grid

        locus = _locus_grid(small_table, ClusterParams(9.0, 0.0, 0.0, 2.0, 0.1))
        for i in range(len(cat)):
            d = np.min(np.max(np.abs(cat.x[i] - locus) / 0.03, axis=1))
            assert d >= 5.0

    def test_noise_sd_recovered(self, default_table):
        cat, truth = self._gen(default_table, n_cluster=2000, n_field=0, seed=3)
        resid = cat.x - truth.mags_true
        sd = resid.std(ddof=1)
        assert abs(sd - 0.03) <= 0.1 * 0.03

    def test_bad_args(self, small_table):
        with pytest.raises(InvalidConfig):
            self._gen(small_table, binary_fraction=1.5)
        with pytest.raises(InvalidConfig):
            self._gen(small_table, n_cluster=-1)
        with pytest.raises(InvalidConfig):
            self._gen(small_table, noise_sd=0.0)

    def test_truth_round_trip(self, small_table, tmp_path):
        cat, truth = self._gen(small_table)
        path = tmp_path / "x.truth"
        write_truth_csv(truth, small_table.filters.names, path)
        back = read_truth_csv(path)
        assert back.theta == truth.theta
        assert back.star_ids == truth.star_ids
        assert np.array_equal(back.z, truth.z)
        assert np.array_equal(back.m1, truth.m1, equal_nan=True)
        assert np.array_equal(back.mags_true, truth.mags_true)


class TestNaiveModel:
    def test_matches_kernel_interpolation(self, small_table):
        from cmdfit._core import active_lane

        rng = np.random.default_rng(2)
        flat = small_table.flat()
        for _ in range(60):
            m = rng.uniform(0.12, 7.5)
            age = rng.uniform(8.0, 9.7)
            feh = rng.uniform(-0.5, 0.5)
            naive = _naive_interp(small_table, m, age, feh)
            lane_g, ok = active_lane().predict_absolute(
                *flat, feh, age, np.array([m]), np.zeros(1)
            )
            assert ok[0]
            assert np.allclose(naive, lane_g[0], atol=1e-10)

    def test_matches_predicted_magnitudes(self, small_table, theta_mid):
        got = _naive_predicted(small_table, 1.1, 0.6, theta_mid)
        expect = predicted_magnitudes(StarState(1.1, 0.6, 1), theta_mid, small_table)
        assert np.allclose(got, expect, atol=1e-10)


def one_star_instance(x_offset=(0.05, -0.05), pmember=0.5):
    table = fixture_table()
    theta = ClusterParams(8.8, 0.0, 0.0, 1.0, 0.1)
    mu = np.asarray(_naive_predicted(table, 0.8, 0.0, theta))
    cat = make_catalog(np.array([mu + np.asarray(x_offset)]), sigma=0.05, pmember=pmember)
    disc = Discretization(
        age_values=(8.6, 8.8, 9.0), feh_values=(0.0,), heh_values=(0.0,),
        dm_values=(0.8, 1.0, 1.2), av_values=(0.1,),
        m1_values=tuple(np.geomspace(0.4, 2.0, 5)), r_values=(0.0, 0.5, 1.0),
    )
    ranges = FieldRanges(np.array([4.0, 4.0]), np.array([14.0, 16.0]))
    spec = ClusterPriorSpec(feh=(0.0, 0.3), heh=(0.0, 0.3), dm=(1.0, 0.5), log_av=(math.log(0.1), 0.7))
    return DiscretizedInstance(table, cat, spec, disc, ranges=ranges)


class TestBruteForce:
    def test_normalization(self):
        inst = one_star_instance()
        post = brute_force_posterior(inst)
        assert post.p_theta_z.sum() == pytest.approx(1.0, abs=1e-12)
        assert post.p_theta.sum() == pytest.approx(1.0, abs=1e-12)
        # member + field mass marginals partition each star's mass
        total = post.member_mass[0].sum() + post.field_mass[0].sum()
        assert total == pytest.approx(1.0, abs=1e-10)
        assert post.member_mass[0].sum() == pytest.approx(post.p_z[0], abs=1e-10)

    def test_certain_field_star_gives_prior_on_theta(self):
        # pmember = 0: only the all-field membership vector has mass and
        # the theta posterior equals the (normalized) prior over cells
        inst = one_star_instance(pmember=0.0)
        post = brute_force_posterior(inst)
        lp = inst.theta_logprior - logsumexp(inst.theta_logprior)
        assert np.allclose(post.p_theta, np.exp(lp), atol=1e-12)
        assert post.p_z[0] == 0.0

    def test_two_cell_hand_posterior(self):
        # single star, one filter, two masses, everything else pinned:
        # posterior odds = Gaussian likelihood ratio times prior ratio
        table = fixture_table()
        theta = ClusterParams(8.8, 0.0, 0.0, 1.0, 0.1)
        m_a, m_b = 0.7, 0.9
        mu_a = _naive_predicted(table, m_a, 0.0, theta)[0]
        mu_b = _naive_predicted(table, m_b, 0.0, theta)[0]
        x = 0.3 * mu_a + 0.7 * mu_b
        sigma = 0.25
        cat = make_catalog(np.array([[x, np.nan]]), sigma=sigma, pmember=1.0)
        disc = Discretization(
            age_values=(8.8,), feh_values=(0.0,), heh_values=(0.0,),
            dm_values=(1.0,), av_values=(0.1,),
            m1_values=(m_a, m_b), r_values=(0.0,),
        )
        spec = ClusterPriorSpec(feh=(0.0, 0.3), heh=(0.0, 0.3), dm=(1.0, 0.5),
                                log_av=(math.log(0.1), 0.7))
        ranges = FieldRanges(np.array([4.0, 4.0]), np.array([14.0, 16.0]))
        inst = DiscretizedInstance(table, cat, spec, disc, ranges=ranges)
        post = brute_force_posterior(inst)
        odds = post.member_mass[0][0, 0] / post.member_mass[0][1, 0]
        lik_ratio = math.exp(
            -((x - mu_a) ** 2 - (x - mu_b) ** 2) / (2 * sigma**2)
        )
        prior_ratio = math.exp(float(log_mass_prior(m_a) - log_mass_prior(m_b)))
        assert odds == pytest.approx(lik_ratio * prior_ratio, rel=1e-10)

    def test_budget_guards(self):
        table = fixture_table()
        cat = make_catalog(np.full((5, 2), 10.0), sigma=0.1, pmember=0.5)
        disc = Discretization(
            age_values=(8.8,), feh_values=(0.0,), heh_values=(0.0,),
            dm_values=(1.0,), av_values=(0.1,), m1_values=(0.5, 1.0), r_values=(0.0,),
        )
        spec = ClusterPriorSpec(feh=(0.0, 0.3), heh=(0.0, 0.3), dm=(1.0, 0.5),
                                log_av=(math.log(0.1), 0.7))
        with pytest.raises(TooLarge):
            DiscretizedInstance(table, cat, spec, disc)


class TestInvariance:
    def test_identical_priors_no_discrepancy(self):
        table, catalog, spec, disc, ranges = three_star_fixture()
        shape = (len(disc.m1_values), len(disc.r_values))
        rep = pseudo_prior_invariance_check(
            table, catalog, spec, disc, np.zeros(shape), np.zeros(shape), ranges=ranges
        )
        assert rep.max_theta_z_diff == 0.0
        assert rep.max_member_mass_diff == 0.0
        assert rep.max_field_mass_diff == 0.0

    def test_different_priors_invariant_marginals(self):
        table, catalog, spec, disc, ranges = three_star_fixture()
        shape = (len(disc.m1_values), len(disc.r_values))
        peaked = np.full(shape, -50.0)
        peaked[0, 0] = 0.0
        rng = np.random.default_rng(0)
        bumpy = rng.normal(0.0, 1.0, shape)
        for other in (peaked, bumpy):
            rep = pseudo_prior_invariance_check(
                table, catalog, spec, disc, np.zeros(shape), other, ranges=ranges
            )
            assert rep.max_theta_z_diff <= 1e-10
            assert rep.max_member_mass_diff <= 1e-10
            assert rep.max_field_mass_diff > 1e-10  # the nuisance joint differs


class TestGridSamplerAgainstOracle:
    def test_one_star_membership_frequency(self):
        inst = one_star_instance()
        post = brute_force_posterior(inst)
        res = run_grid_sampler(inst, n_sweeps=40000, burn_in=4000, seed=11)
        z = abs(res.p_z[0] - post.p_z[0]) / max(res.p_z_se[0], 1e-12)
        assert z <= 3.0

    def test_three_star_marginals(self):
        table, catalog, spec, disc, ranges = three_star_fixture()
        inst = DiscretizedInstance(table, catalog, spec, disc, ranges=ranges)
        post = brute_force_posterior(inst)
        res = run_grid_sampler(inst, n_sweeps=40000, burn_in=4000, seed=5)
        z_theta = np.abs(res.p_theta - post.p_theta) / np.maximum(res.p_theta_se, 1e-12)
        z_z = np.abs(res.p_z - post.p_z) / np.maximum(res.p_z_se, 1e-12)
        assert float(z_theta.max()) <= 3.0
        assert float(z_z.max()) <= 3.0


class TestFixtures:
    def test_fixture_has_wd_rule(self):
        t = fixture_table()
        assert isinstance(t.ms_lifetime, MainSequenceLifetime)

    def test_two_star_fixture_is_ambiguous(self):
        table, catalog, spec, disc, ranges = two_star_fixture()
        inst = DiscretizedInstance(table, catalog, spec, disc, ranges=ranges)
        post = brute_force_posterior(inst)
        assert 0.1 <= post.p_z[1] <= 0.9
        assert post.p_z[0] >= 0.8
