import math

import numpy as np
import pytest

from cmdfit.errors import ConstantPredictor, InvalidConfig
from cmdfit.likelihood import FieldRanges, StarState, predicted_magnitudes
from cmdfit.priors import ClusterPriorSpec, PseudoPriorSpec
from cmdfit.sampler import (
    Model,
    SamplerRuntime,
    StepSizes,
    TransformSpec,
    initial_state,
)
from cmdfit.stellar_model import ClusterParams
from cmdfit.tuning import (
    TuningConfig,
    load_tuning,
    recentered_slope,
    run_tuning_schedule,
    save_tuning,
    zero_rule,
)

from conftest import make_catalog


class TestRecenteredSlope:
    def test_perfect_fit(self):
        x = np.linspace(0, 1, 20)
        slope, se = recentered_slope(2.0 * x, x)
        assert slope == pytest.approx(2.0, abs=1e-12)
        assert se == pytest.approx(0.0, abs=1e-12)

    def test_intercept_invariance(self):
        x = np.linspace(0, 1, 20)
        slope, _ = recentered_slope(5.0 + 2.0 * x, x + 100.0)
        assert slope == pytest.approx(2.0, abs=1e-10)

    def test_constant_predictor(self):
        with pytest.raises(ConstantPredictor):
            recentered_slope(np.arange(5.0), np.ones(5))

    def test_too_few_points(self):
        with pytest.raises(InvalidConfig):
            recentered_slope(np.array([1.0, 2.0]), np.array([0.0, 1.0]))

    def test_independent_noise_is_insignificant(self):
        rng = np.random.default_rng(12)
        hits = 0
        for _ in range(40):
            x = rng.standard_normal(100)
            y = rng.standard_normal(100)
            slope, se = recentered_slope(y, x)
            hits += abs(slope) >= 2 * se
        assert hits <= 6  # ~5% expected rate


class TestZeroRule:
    def test_insignificant_zeroed(self):
        assert zero_rule(0.1, 0.2) == 0.0

    def test_wrong_sign_zeroed(self):
        assert zero_rule(-3.0, 0.1, expected_sign=1) == 0.0

    def test_passes_both_gates(self):
        assert zero_rule(3.0, 0.1) == 3.0
        assert zero_rule(3.0, 0.1, expected_sign=1) == 3.0

    def test_threshold_scaling(self):
        assert zero_rule(0.5, 0.2, threshold=2.0) == 0.5
        assert zero_rule(0.5, 0.2, threshold=3.0) == 0.0


class TestTuningConfig:
    def test_validation(self):
        with pytest.raises(InvalidConfig):
            TuningConfig(burn_in_draws=0)
        with pytest.raises(InvalidConfig):
            TuningConfig(regression_thin=100, initial_run_draws=100)
        with pytest.raises(InvalidConfig):
            TuningConfig(expected_signs={"nope": 1})
        with pytest.raises(InvalidConfig):
            TuningConfig(expected_signs={"beta_r": 2})
        TuningConfig(expected_signs={"beta_r": -1})


def small_model(small_table, n=4, seed=0, sigma=0.05):
    rng = np.random.default_rng(seed)
    theta = ClusterParams(9.0, 0.0, 0.0, 2.0, 0.1)
    masses = rng.uniform(0.3, 1.8, n)
    x = np.array([predicted_magnitudes(StarState(m, 0.0, 1), theta, small_table) for m in masses])
    x += rng.normal(0, sigma, x.shape)
    cat = make_catalog(x, sigma=sigma, pmember=0.9)
    spec = ClusterPriorSpec(feh=(0.0, 0.2), heh=(0.0, 0.2), dm=(2.0, 0.4), log_av=(math.log(0.1), 0.6))
    return Model(small_table, cat, spec), theta


class TestPinnedRun:
    def test_pinned_coordinates_bitwise_constant(self, small_table):
        model, theta = small_model(small_table)
        state = initial_state(model, theta)
        rt = SamplerRuntime(model, state, StepSizes(model.n_stars), np.random.default_rng(2))
        rec = rt.run_block(300, thin=10, pinned=frozenset({"feh", "heh", "dm", "v"}))
        for name in ("feh", "heh", "dm", "av"):
            draws = getattr(rec, name)
            assert np.all(draws == draws[0])
        assert not np.all(rec.age == rec.age[0])  # age still moves


class TestSchedule:
    def _run(self, small_table, cfg, seed=5, n=4, sigma=0.05):
        model, theta = small_model(small_table, n=n, seed=seed, sigma=sigma)
        state = initial_state(model, theta)
        rt = SamplerRuntime(model, state, StepSizes(model.n_stars), np.random.default_rng(seed))
        out = run_tuning_schedule(rt, cfg)
        return model, rt, out

    def test_schedule_produces_all_artifacts(self, small_table):
        cfg = TuningConfig(burn_in_draws=300, initial_run_draws=250, regression_thin=10)
        model, rt, (transform, pseudo, steps) = self._run(small_table, cfg)
        assert isinstance(transform, TransformSpec)
        assert isinstance(pseudo, PseudoPriorSpec)
        assert len(pseudo) == model.n_stars
        assert transform.n_stars() == model.n_stars
        # anchors moved off their identity defaults
        assert transform.dm_hat != 0.0

    def test_independent_target_all_zeroed(self, small_table):
        # likelihood made uninformative: posterior factorizes into the
        # priors, so every fitted slope should be insignificant (the
        # 2-SE gate has a ~5% per-coefficient false-alarm rate, hence the
        # pinned seed)
        cfg = TuningConfig(burn_in_draws=400, initial_run_draws=300, regression_thin=10)
        model, rt, (transform, _, _) = self._run(small_table, cfg, seed=4, sigma=30.0)
        assert np.all(transform.beta_r == 0.0)
        assert np.all(transform.beta_age == 0.0)
        assert np.all(transform.beta_feh == 0.0)
        assert np.all(transform.beta_dm == 0.0)
        assert transform.gamma_feh == 0.0
        assert transform.gamma_dm == 0.0

    def test_infinite_threshold_keeps_identity_transform(self, small_table):
        cfg = TuningConfig(burn_in_draws=200, initial_run_draws=150, regression_thin=10,
                           zero_threshold=math.inf)
        model, rt, (transform, _, _) = self._run(small_table, cfg)
        assert np.all(transform.beta_r == 0.0) and transform.gamma_dm == 0.0

    def test_sign_gate_applies(self, small_table):
        # with a mandated negative sign for the mass-dm slope, a cluster
        # whose true coupling is positive gets that coefficient zeroed
        cfg = TuningConfig(burn_in_draws=300, initial_run_draws=250, regression_thin=10,
                           expected_signs={"beta_dm": -1})
        _, _, (tf_gated, _, _) = self._run(small_table, cfg, seed=5)
        cfg2 = TuningConfig(burn_in_draws=300, initial_run_draws=250, regression_thin=10)
        _, _, (tf_free, _, _) = self._run(small_table, cfg2, seed=5)
        pos = tf_free.beta_dm > 0
        assert np.all(tf_gated.beta_dm[pos] == 0.0)


class TestArtifactFile:
    def test_round_trip(self, tmp_path):
        transform = TransformSpec(
            beta_r=np.array([0.1, -0.2]), beta_age=np.array([0.0, 0.3]),
            beta_feh=np.array([0.05, 0.0]), beta_dm=np.array([1.2, -0.7]),
            gamma_feh=0.11, gamma_dm=-0.4,
            r_hat=np.array([0.2, 0.6]), age_hat=8.9, feh_hat=0.02, dm_hat=2.1,
        )
        pseudo = PseudoPriorSpec(
            m1_loc=np.array([0.8, 1.4]), m1_scale=np.array([0.2, 0.4]),
            r_loc=np.array([0.1, 0.5]), r_scale=np.array([0.3, 0.2]),
        )
        steps = StepSizes(2, u=0.07)
        steps.theta["dm"] = 0.33
        path = tmp_path / "tuned.txt"
        save_tuning(path, transform, pseudo, steps)
        t2, p2, s2 = load_tuning(path)
        assert np.array_equal(t2.beta_dm, transform.beta_dm)
        assert t2.gamma_feh == transform.gamma_feh
        assert np.array_equal(t2.r_hat, transform.r_hat)
        assert np.array_equal(p2.m1_loc, pseudo.m1_loc)
        assert np.array_equal(p2.log_trunc_m1, pseudo.log_trunc_m1)
        assert s2.theta["dm"] == 0.33
        assert np.array_equal(s2.u, steps.u)

    def test_no_pseudo(self, tmp_path):
        transform = TransformSpec.identity(1)
        path = tmp_path / "tuned.txt"
        save_tuning(path, transform, None, StepSizes(1))
        _, p2, _ = load_tuning(path)
        assert p2 is None
