import math

import numpy as np
import pytest

from cmdfit.errors import InvalidConfig, OutOfRange, ParseError
from cmdfit.stellar_model import (
    ClusterParams,
    FilterSet,
    IsochroneTable,
    MainSequenceLifetime,
    ToyModelConfig,
    Track,
    dm_to_distance,
    distance_to_dm,
    interpolate_magnitudes,
    read_isochrone_table,
    to_apparent,
    toy_magnitudes,
    toy_table,
    write_isochrone_table,
)

VB = FilterSet(("V", "B"), np.array([1.0, 1.32]))


def affine_table(feh_grid, age_grid, mass_grid):
    """g_j = 2*mass + 3*age + 1*feh in every filter; multilinear
    interpolation must reproduce it exactly."""
    tracks = []
    for feh in feh_grid:
        row = []
        for age in age_grid:
            mags = np.stack([2.0 * mass_grid + 3.0 * age + 1.0 * feh] * 2, axis=1)
            row.append(Track(np.asarray(mass_grid, dtype=float), mags))
        tracks.append(row)
    return IsochroneTable(VB, feh_grid, age_grid, tracks)


class TestInterpolation:
    def test_node_identity(self, small_table):
        t = small_table
        for i in (0, 1, len(t.feh_grid) - 1):
            for j in (0, 4, len(t.age_grid) - 1):
                trk = t.tracks[i][j]
                for k in (0, 7, len(trk.mass) - 1):
                    got = interpolate_magnitudes(
                        t, float(trk.mass[k]), float(t.age_grid[j]), float(t.feh_grid[i])
                    )
                    assert np.all(np.abs(got - trk.mags[k]) <= 1e-12)

    def test_affine_exact(self):
        t = affine_table([-1.0, 0.0, 1.0], [8.0, 9.0, 9.5], np.linspace(0.2, 3.0, 12))
        rng = np.random.default_rng(1)
        for _ in range(50):
            m = rng.uniform(0.2, 3.0)
            a = rng.uniform(8.0, 9.5)
            f = rng.uniform(-1.0, 1.0)
            got = interpolate_magnitudes(t, m, a, f)
            assert np.all(np.abs(got - (2 * m + 3 * a + f)) <= 1e-10)

    def test_spec_affine_point(self):
        t = affine_table([-1.0, 0.0, 1.0], [8.0, 9.0, 9.5], np.linspace(0.2, 3.0, 12))
        got = interpolate_magnitudes(t, 1.5, 9.0, 0.0)
        assert np.all(np.abs(got - 30.0) <= 1e-10)

    def test_continuity_at_shared_node(self, small_table):
        t = small_table
        left = IsochroneTable(t.filters, t.feh_grid[:2], t.age_grid, [t.tracks[0], t.tracks[1]])
        right = IsochroneTable(t.filters, t.feh_grid[1:3], t.age_grid, [t.tracks[1], t.tracks[2]])
        shared = float(t.feh_grid[1])
        for m in (0.3, 1.1):
            a = float(t.age_grid[3])
            assert np.all(
                np.abs(interpolate_magnitudes(left, m, a, shared)
                       - interpolate_magnitudes(right, m, a, shared)) <= 1e-12
            )

    def test_low_mass_extrapolation_by_hand(self):
        t = IsochroneTable(
            FilterSet(("V",), np.array([1.0])),
            [0.0], [9.0],
            [[Track(np.array([0.2, 0.4]), np.array([[10.0], [8.0]]))]],
        )
        got = interpolate_magnitudes(t, 0.1, 9.0, 0.0)
        assert got[0] == pytest.approx(11.0, abs=1e-12)

    def test_out_of_range(self, small_table):
        t = small_table
        with pytest.raises(OutOfRange):
            interpolate_magnitudes(t, 1.0, t.age_grid[0] - 0.1, 0.0)
        with pytest.raises(OutOfRange):
            interpolate_magnitudes(t, 1.0, 9.0, t.feh_grid[-1] + 0.1)
        with pytest.raises(OutOfRange):
            interpolate_magnitudes(t, float(t.tracks[0][0].mass[-1]) * 1.01, 9.0, 0.0)
        with pytest.raises(OutOfRange):
            interpolate_magnitudes(t, -1.0, 9.0, 0.0)


class TestApparent:
    def test_zero_offsets_identity(self):
        g = np.array([5.0, 6.0])
        out = to_apparent(g, 0.0, 1e-300, VB)
        assert np.allclose(out, g, atol=1e-12)

    def test_additive(self):
        out = to_apparent(np.array([5.0, 5.0]), 3.0, 0.2, VB)
        assert out[0] == pytest.approx(8.2, abs=1e-12)

    def test_extinction_ratio(self):
        out = to_apparent(np.array([5.0, 5.0]), 0.0, 0.1, VB)
        assert out[1] == pytest.approx(5.132, abs=1e-12)

    def test_monotone_in_dm_and_av(self):
        g = np.array([5.0, 6.0])
        base = to_apparent(g, 1.0, 0.1, VB)
        assert np.all(to_apparent(g, 1.01, 0.1, VB) > base)
        assert np.all(to_apparent(g, 1.0, 0.11, VB) > base)


class TestDistance:
    def test_anchors(self):
        assert dm_to_distance(0.0) == pytest.approx(10.0, rel=1e-12)
        assert dm_to_distance(5.0) == pytest.approx(100.0, rel=1e-12)

    def test_hyades_distance(self):
        # 151 light years at 3.2616 ly/pc
        assert dm_to_distance(3.328) == pytest.approx(151.0 / 3.2616, abs=0.05)

    def test_round_trip(self):
        for dm in (-3.0, 0.0, 2.5, 10.0):
            assert distance_to_dm(dm_to_distance(dm)) == pytest.approx(dm, rel=1e-10)


class TestToyModel:
    def test_main_sequence_anchor(self):
        cfg = ToyModelConfig()
        g = toy_magnitudes(cfg, 1.0, 9.0, 0.0)
        assert g[0] == pytest.approx(5.0, abs=1e-12)
        assert g[1] == pytest.approx(5.8, abs=1e-12)

    def test_wd_branch_fainter_than_main_sequence(self):
        cfg = ToyModelConfig()
        t = toy_table(cfg)
        for age in (8.5, 9.0, 9.7):
            j = int(np.argmin(np.abs(t.age_grid - age)))
            for i in (0, 3, len(t.feh_grid) - 1):
                trk = t.tracks[i][j]
                wd = cfg.lifetime.is_white_dwarf(trk.mass, float(t.age_grid[j]))
                assert np.any(wd) and np.any(~wd)
                # every white-dwarf node fainter than every main-sequence node
                assert np.all(np.min(trk.mags[wd], axis=0) > np.max(trk.mags[~wd], axis=0))

    def test_constants_change_values_not_shape(self):
        a = toy_table(ToyModelConfig())
        b = toy_table(ToyModelConfig(ms_intercept=(5.5, 6.3)))
        assert np.array_equal(a.feh_grid, b.feh_grid)
        assert np.array_equal(a.age_grid, b.age_grid)
        assert all(
            np.array_equal(a.tracks[i][j].mass, b.tracks[i][j].mass)
            for i in range(len(a.feh_grid))
            for j in range(len(a.age_grid))
        )
        assert not np.array_equal(a.tracks[0][0].mags, b.tracks[0][0].mags)

    def test_deterministic(self):
        a = toy_table(ToyModelConfig())
        b = toy_table(ToyModelConfig())
        assert np.array_equal(a.tracks[2][3].mags, b.tracks[2][3].mags)

    def test_bad_grids_rejected(self):
        with pytest.raises(InvalidConfig):
            toy_table(ToyModelConfig(mass_grid=(0.5, 0.4)))
        with pytest.raises(InvalidConfig):
            toy_table(ToyModelConfig(mass_grid=(-0.1, 0.4)))

    def test_turnoff_mass(self):
        rule = MainSequenceLifetime()
        assert rule.turnoff_mass(9.0) == pytest.approx(2.5118864315095801, rel=1e-12)
        assert rule.is_white_dwarf(3.0, 9.0)
        assert not rule.is_white_dwarf(2.0, 9.0)

    def test_final_mass_relation(self):
        cfg = ToyModelConfig()
        assert cfg.final_mass(2.0) == pytest.approx(0.4 + 0.077 * 2.0, rel=1e-12)


class TestTableValidation:
    def test_filterset_errors(self):
        with pytest.raises(InvalidConfig):
            FilterSet((), np.array([]))
        with pytest.raises(InvalidConfig):
            FilterSet(("V", "V"), np.array([1.0, 1.0]))
        with pytest.raises(InvalidConfig):
            FilterSet(("V",), np.array([-1.0]))

    def test_track_errors(self):
        with pytest.raises(InvalidConfig):
            IsochroneTable(VB, [0.0], [9.0],
                           [[Track(np.array([0.5]), np.array([[1.0, 1.0]]))]])
        with pytest.raises(InvalidConfig):
            IsochroneTable(VB, [0.0, -1.0], [9.0], [])

    def test_cluster_params_validate(self):
        with pytest.raises(InvalidConfig):
            ClusterParams(9.0, 0.0, 0.0, 0.0, -0.1).validate()
        ClusterParams(9.0, 0.0, 0.0, 0.0, 0.1).validate()


class TestTableFile:
    def test_round_trip(self, small_table, tmp_path):
        path = tmp_path / "toy.table"
        write_isochrone_table(small_table, path)
        back = read_isochrone_table(path)
        assert back.filters.names == small_table.filters.names
        assert np.array_equal(back.feh_grid, small_table.feh_grid)
        assert np.array_equal(back.age_grid, small_table.age_grid)
        for i in range(len(back.feh_grid)):
            for j in range(len(back.age_grid)):
                assert np.array_equal(back.tracks[i][j].mass, small_table.tracks[i][j].mass)
                assert np.array_equal(back.tracks[i][j].mags, small_table.tracks[i][j].mags)

    def _write(self, tmp_path, text):
        p = tmp_path / "bad.table"
        p.write_text(text)
        return p

    def test_non_ascending_mass_cites_line(self, tmp_path):
        p = self._write(
            tmp_path,
            "filters V\nkappa 1.0\n\nfeh 0.0\nage 9.0\nmass 0.5 1.0\nmass 0.4 2.0\n\n",
        )
        with pytest.raises(ParseError) as err:
            read_isochrone_table(p)
        assert err.value.line is not None

    def test_non_ascending_feh(self, tmp_path):
        p = self._write(
            tmp_path,
            "filters V\nkappa 1.0\n\n"
            "feh 0.5\nage 9.0\nmass 0.5 1.0\nmass 0.6 2.0\n\n"
            "feh -0.5\nage 9.0\nmass 0.5 1.0\nmass 0.6 2.0\n\n",
        )
        with pytest.raises(ParseError, match="ascending"):
            read_isochrone_table(p)

    def test_missing_header(self, tmp_path):
        p = self._write(tmp_path, "feh 0.0\nage 9.0\nmass 0.5 1.0\nmass 0.6 2.0\n\n")
        with pytest.raises(ParseError):
            read_isochrone_table(p)

    def test_bad_number(self, tmp_path):
        p = self._write(
            tmp_path, "filters V\nkappa 1.0\n\nfeh 0.0\nage 9.0\nmass 0.5 oops\nmass 0.6 2.0\n\n"
        )
        with pytest.raises(ParseError) as err:
            read_isochrone_table(p)
        assert err.value.line == 6

    def test_wrong_column_count(self, tmp_path):
        p = self._write(
            tmp_path, "filters V B\nkappa 1.0 1.3\n\nfeh 0.0\nage 9.0\nmass 0.5 1.0\nmass 0.6 2.0 3.0\n\n"
        )
        with pytest.raises(ParseError):
            read_isochrone_table(p)

    def test_incomplete_grid(self, tmp_path):
        p = self._write(
            tmp_path,
            "filters V\nkappa 1.0\n\n"
            "feh 0.0\nage 8.0\nmass 0.5 1.0\nmass 0.6 2.0\n\n"
            "feh 0.0\nage 9.0\nmass 0.5 1.0\nmass 0.6 2.0\n\n"
            "feh 1.0\nage 8.0\nmass 0.5 1.0\nmass 0.6 2.0\n\n",
        )
        with pytest.raises(ParseError, match="incomplete"):
            read_isochrone_table(p)

    def test_single_point_grids_parse(self, tmp_path):
        p = self._write(
            tmp_path, "filters V\nkappa 1.0\n\nfeh 0.0\nage 9.0\nmass 0.5 1.0\nmass 0.6 2.0\n"
        )
        t = read_isochrone_table(p)
        got = interpolate_magnitudes(t, 0.55, 9.0, 0.0)
        assert got[0] == pytest.approx(1.5, abs=1e-12)
