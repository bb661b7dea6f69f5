"""Tabulated stellar-evolution model: grids of per-filter absolute magnitudes
over (metallicity, log-age, initial mass), multilinear interpolation with
low-mass extrapolation, conversion to apparent magnitudes, and an analytic
toy model used to build exactly-known tables for testing.

Tables are immutable after construction and safe to share across threads;
every operation here is a pure function of its inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .errors import InvalidConfig, OutOfRange, ParseError
from ._core import active_lane

__all__ = [
    "FilterSet",
    "ClusterParams",
    "MainSequenceLifetime",
    "Track",
    "IsochroneTable",
    "interpolate_magnitudes",
    "to_apparent",
    "dm_to_distance",
    "distance_to_dm",
    "ToyModelConfig",
    "toy_magnitudes",
    "toy_table",
    "read_isochrone_table",
    "write_isochrone_table",
]


@dataclass(frozen=True)
class FilterSet:
    """Ordered photometric filters with per-filter extinction ratios.

    ``kappa[j]`` multiplies the V-band absorption when converting to
    apparent magnitudes; the V filter itself has kappa = 1.
    """

    names: tuple
    kappa: np.ndarray

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        kappa = np.asarray(self.kappa, dtype=float)
        object.__setattr__(self, "kappa", kappa)
        if len(names) == 0:
            raise InvalidConfig("filter set must not be empty")
        if len(set(names)) != len(names):
            raise InvalidConfig("filter names must be unique")
        if kappa.shape != (len(names),):
            raise InvalidConfig("one extinction ratio per filter is required")
        if not np.all(np.isfinite(kappa)) or np.any(kappa <= 0):
            raise InvalidConfig("extinction ratios must be finite and > 0")

    def __len__(self):
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise InvalidConfig(f"unknown filter {name!r}") from None


@dataclass(frozen=True)
class ClusterParams:
    """The five cluster-wide parameters: log10 age (yr), metallicity (dex),
    helium abundance (dex), distance modulus (mag), V-band absorption (mag)."""

    theta_age: float
    theta_feh: float
    theta_heh: float
    theta_dm: float
    theta_av: float

    def validate(self):
        vals = (self.theta_age, self.theta_feh, self.theta_heh, self.theta_dm, self.theta_av)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidConfig("cluster parameters must be finite")
        if self.theta_av <= 0:
            raise InvalidConfig("theta_av must be > 0")
        return self


@dataclass(frozen=True)
class MainSequenceLifetime:
    """Main-sequence lifetime rule log10 t(yr) = c0 + c1 * log10(M/Msun).

    Used to decide whether a star of a given initial mass has left the main
    sequence at a given cluster age (and hence sits on the white-dwarf
    branch). c1 must be negative: heavier stars live shorter.
    """

    c0: float = 10.0
    c1: float = -2.5

    def log10_lifetime(self, mass):
        return self.c0 + self.c1 * np.log10(mass)

    def turnoff_mass(self, theta_age: float) -> float:
        """Largest initial mass still on the main sequence at ``theta_age``."""
        return float(10.0 ** ((theta_age - self.c0) / self.c1))

    def is_white_dwarf(self, mass, theta_age):
        """True where a star of initial ``mass`` has evolved off the main
        sequence by ``theta_age``. Non-positive masses report False (they
        are outside the model and rejected elsewhere)."""
        with np.errstate(invalid="ignore", divide="ignore"):
            out = np.log10(mass) * self.c1 + self.c0 < theta_age
        return out


class Track(NamedTuple):
    """One (feh, age) cell: ascending initial masses with per-filter
    absolute magnitudes, shape (n_mass,) and (n_mass, n_filters)."""

    mass: np.ndarray
    mags: np.ndarray


class FlatTable(NamedTuple):
    """Array-of-arrays layout consumed by the evaluation kernels."""

    feh_grid: np.ndarray
    age_grid: np.ndarray
    cell_offset: np.ndarray
    cell_len: np.ndarray
    node_mass: np.ndarray
    node_mag: np.ndarray


def _check_ascending(name, grid):
    if len(grid) == 0:
        raise InvalidConfig(f"{name} grid must not be empty")
    if np.any(~np.isfinite(grid)):
        raise InvalidConfig(f"{name} grid must be finite")
    if np.any(np.diff(grid) <= 0):
        raise InvalidConfig(f"{name} grid must be strictly ascending")


class IsochroneTable:
    """Ragged grid of stellar-model magnitudes over (feh, age, initial mass).

    ``tracks[i][j]`` holds the mass track for ``feh_grid[i]`` and
    ``age_grid[j]``; track lengths may differ between cells. An optional
    main-sequence lifetime rule enables the white-dwarf binary exclusion in
    the priors; tables built by :func:`toy_table` carry it automatically.
    """

    def __init__(
        self,
        filters: FilterSet,
        feh_grid,
        age_grid,
        tracks: Sequence[Sequence[Track]],
        heh_grid=None,
        ms_lifetime: Optional[MainSequenceLifetime] = None,
    ):
        self.filters = filters
        self.feh_grid = np.asarray(feh_grid, dtype=float)
        self.age_grid = np.asarray(age_grid, dtype=float)
        self.heh_grid = None if heh_grid is None else np.asarray(heh_grid, dtype=float)
        self.ms_lifetime = ms_lifetime
        _check_ascending("feh", self.feh_grid)
        _check_ascending("age", self.age_grid)
        if self.heh_grid is not None:
            _check_ascending("heh", self.heh_grid)

        nf = len(filters)
        if len(tracks) != len(self.feh_grid):
            raise InvalidConfig("need one row of tracks per feh value")
        norm: list = []
        for i, row in enumerate(tracks):
            if len(row) != len(self.age_grid):
                raise InvalidConfig("need one track per (feh, age) pair")
            out_row = []
            for j, trk in enumerate(row):
                mass = np.ascontiguousarray(trk.mass, dtype=float)
                mags = np.ascontiguousarray(trk.mags, dtype=float)
                if mass.ndim != 1 or len(mass) < 2:
                    raise InvalidConfig(f"track ({i},{j}) needs >= 2 mass points")
                if np.any(mass <= 0) or np.any(np.diff(mass) <= 0):
                    raise InvalidConfig(f"track ({i},{j}) masses must be positive and ascending")
                if mags.shape != (len(mass), nf) or not np.all(np.isfinite(mags)):
                    raise InvalidConfig(f"track ({i},{j}) magnitudes malformed")
                out_row.append(Track(mass, mags))
            norm.append(out_row)
        self.tracks = norm
        self._flat: Optional[FlatTable] = None

    @property
    def n_filters(self) -> int:
        return len(self.filters)

    def track(self, i_feh: int, j_age: int) -> Track:
        return self.tracks[i_feh][j_age]

    def flat(self) -> FlatTable:
        """Flattened contiguous layout for the kernels (built once, cached)."""
        if self._flat is None:
            na = len(self.age_grid)
            lens = np.array(
                [len(self.tracks[i][j].mass) for i in range(len(self.feh_grid)) for j in range(na)],
                dtype=np.int64,
            )
            offsets = np.concatenate(([0], np.cumsum(lens)[:-1])).astype(np.int64)
            node_mass = np.concatenate(
                [self.tracks[i][j].mass for i in range(len(self.feh_grid)) for j in range(na)]
            )
            node_mag = np.concatenate(
                [self.tracks[i][j].mags for i in range(len(self.feh_grid)) for j in range(na)], axis=0
            )
            self._flat = FlatTable(
                np.ascontiguousarray(self.feh_grid),
                np.ascontiguousarray(self.age_grid),
                offsets,
                lens,
                np.ascontiguousarray(node_mass),
                np.ascontiguousarray(node_mag),
            )
        return self._flat

    def in_domain(self, theta_age: float, theta_feh: float) -> bool:
        """Whether (age, feh) lies inside the tabulated rectangle."""
        return (
            self.age_grid[0] <= theta_age <= self.age_grid[-1]
            and self.feh_grid[0] <= theta_feh <= self.feh_grid[-1]
        )


def interpolate_magnitudes(table: IsochroneTable, mass: float, theta_age: float, theta_feh: float) -> np.ndarray:
    """Absolute magnitudes of a single star of initial ``mass`` at the given
    age and metallicity.

    Piecewise linear in mass along each bracketing track, then bilinear
    across (feh, age). Masses below a track's minimum are linearly
    extrapolated from its two lowest nodes; masses above a bracketing
    track's maximum raise :class:`OutOfRange` (such a star would have
    evolved past the table).
    """
    if not table.in_domain(theta_age, theta_feh):
        raise OutOfRange(
            f"(age={theta_age}, feh={theta_feh}) outside table grid "
            f"[{table.age_grid[0]}, {table.age_grid[-1]}] x [{table.feh_grid[0]}, {table.feh_grid[-1]}]"
        )
    if not (mass > 0):
        raise OutOfRange(f"mass must be > 0, got {mass}")
    m1 = np.array([mass], dtype=float)
    r = np.zeros(1)
    gabs, ok = active_lane().predict_absolute(*table.flat(), theta_feh, theta_age, m1, r)
    if not ok[0]:
        raise OutOfRange(f"mass {mass} above the maximum of a bracketing track")
    return gabs[0]


def to_apparent(absolute, theta_dm: float, theta_av: float, filters: FilterSet) -> np.ndarray:
    """Apparent magnitudes m_j = G_j + theta_dm + kappa_j * theta_av."""
    absolute = np.asarray(absolute, dtype=float)
    return absolute + theta_dm + filters.kappa * theta_av


def dm_to_distance(theta_dm: float) -> float:
    """Distance in parsecs implied by a distance modulus."""
    return float(10.0 ** ((theta_dm + 5.0) / 5.0))


def distance_to_dm(distance_pc: float) -> float:
    """Inverse of :func:`dm_to_distance`."""
    return float(5.0 * math.log10(distance_pc) - 5.0)


# ---------------------------------------------------------------------------
# Analytic toy model
# ---------------------------------------------------------------------------

_DEF_MASS_GRID = tuple(np.geomspace(0.1, 8.0, 160))
_DEF_AGE_GRID = tuple(np.linspace(8.0, 9.7, 18))
_DEF_FEH_GRID = tuple(np.linspace(-2.0, 0.5, 8))


@dataclass(frozen=True)
class ToyModelConfig:
    """Constants and grids of the closed-form toy stellar model.

    Main sequence: G_j = ms_intercept_j - ms_mass_slope_j * log10(M)
    + ms_feh_slope_j * feh, valid while the cluster age is within the
    star's main-sequence lifetime. Past that, the star is a white dwarf
    with G_j = wd_intercept_j + wd_cool_slope_j * log10(max(t_cool, 1)),
    where t_cool is the time in years spent cooling. The white-dwarf mass
    follows a linear initial-final mass relation (it does not enter the
    magnitudes; it is exposed for completeness).
    """

    filter_names: tuple = ("V", "B")
    kappa: tuple = (1.0, 1.32)
    ms_intercept: tuple = (5.0, 5.8)
    ms_mass_slope: tuple = (6.0, 7.5)
    ms_feh_slope: tuple = (0.2, 0.3)
    wd_intercept: tuple = (10.0, 10.3)
    wd_cool_slope: tuple = (1.0, 1.05)
    lifetime: MainSequenceLifetime = MainSequenceLifetime()
    ifmr_intercept: float = 0.4
    ifmr_slope: float = 0.077
    mass_grid: tuple = _DEF_MASS_GRID
    age_grid: tuple = _DEF_AGE_GRID
    feh_grid: tuple = _DEF_FEH_GRID

    def filters(self) -> FilterSet:
        return FilterSet(self.filter_names, np.asarray(self.kappa, dtype=float))

    def final_mass(self, initial_mass):
        """White-dwarf mass from the toy initial-final mass relation."""
        return self.ifmr_intercept + self.ifmr_slope * np.asarray(initial_mass, dtype=float)


def toy_magnitudes(config: ToyModelConfig, mass, theta_age: float, theta_feh: float) -> np.ndarray:
    """Closed-form toy magnitudes; vectorized over ``mass``.

    This is the exact oracle the sampled tables are tested against.
    """
    scalar = np.isscalar(mass) or np.ndim(mass) == 0
    mass = np.atleast_1d(np.asarray(mass, dtype=float))
    if np.any(mass <= 0):
        raise InvalidConfig("toy model masses must be > 0")
    log_m = np.log10(mass)
    a = np.asarray(config.ms_intercept)
    b = np.asarray(config.ms_mass_slope)
    c = np.asarray(config.ms_feh_slope)
    e = np.asarray(config.wd_intercept)
    f = np.asarray(config.wd_cool_slope)

    ms = a - b * log_m[:, None] + c * theta_feh
    log_t_ms = config.lifetime.log10_lifetime(mass)
    t_cool = np.maximum(10.0 ** theta_age - 10.0 ** log_t_ms, 1.0)
    wd = e + f * np.log10(t_cool)[:, None]
    on_ms = (theta_age <= log_t_ms)[:, None]
    out = np.where(on_ms, ms, wd)
    return out[0] if scalar else out


def toy_table(config: ToyModelConfig = ToyModelConfig()) -> IsochroneTable:
    """Sample the toy model on its configured grids.

    Deterministic: the same config always produces a bit-identical table.
    """
    mass = np.asarray(config.mass_grid, dtype=float)
    ages = np.asarray(config.age_grid, dtype=float)
    fehs = np.asarray(config.feh_grid, dtype=float)
    for name, g in (("mass", mass), ("age", ages), ("feh", fehs)):
        if len(g) == 0 or np.any(np.diff(g) <= 0):
            raise InvalidConfig(f"toy {name} grid must be nonempty and ascending")
    if np.any(mass <= 0):
        raise InvalidConfig("toy masses must be positive")

    tracks = []
    for feh in fehs:
        row = []
        for age in ages:
            mags = toy_magnitudes(config, mass, float(age), float(feh))
            row.append(Track(mass.copy(), np.asarray(mags)))
        tracks.append(row)
    return IsochroneTable(
        config.filters(), fehs, ages, tracks, ms_lifetime=config.lifetime
    )


# ---------------------------------------------------------------------------
# Table text format
# ---------------------------------------------------------------------------
#
#   filters V B
#   kappa 1.0 1.32
#
#   feh -1.0
#   age 8.0
#   mass 0.5 7.2 8.1
#   mass 1.0 5.0 5.8
#   <blank line ends the block>
#
# Blocks must cover the full (feh, age) grid in ascending order.


def _parse_floats(tokens, lineno):
    try:
        return [float(t) for t in tokens]
    except ValueError as exc:
        raise ParseError(f"bad numeric value: {exc}", line=lineno) from None


def read_isochrone_table(path) -> IsochroneTable:
    """Parse the line-oriented table format; errors carry line numbers."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.readlines()

    filters = None
    kappa = None
    blocks = {}  # (feh, age) -> (mass list, mags list)
    feh_order: list = []
    age_order: list = []
    prev_pair = None
    cur_feh = None
    cur_age = None
    cur_mass: list = []
    cur_mags: list = []

    def close_block(lineno):
        nonlocal cur_feh, cur_age, cur_mass, cur_mags
        if cur_feh is None and cur_age is None and not cur_mass:
            return
        if cur_feh is None or cur_age is None:
            raise ParseError("block missing feh or age header", line=lineno)
        if len(cur_mass) < 2:
            raise ParseError("each block needs at least 2 mass rows", line=lineno)
        if any(b <= a for a, b in zip(cur_mass, cur_mass[1:])):
            raise ParseError("mass values must be strictly ascending", line=lineno)
        blocks[(cur_feh, cur_age)] = (cur_mass, cur_mags)
        cur_feh, cur_age, cur_mass, cur_mags = None, None, [], []

    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if line.startswith("#"):
            continue
        if not line:
            close_block(lineno)
            continue
        tokens = line.split()
        key, rest = tokens[0], tokens[1:]
        if key == "filters":
            if not rest:
                raise ParseError("filters line needs at least one name", line=lineno)
            filters = rest
        elif key == "kappa":
            kappa = _parse_floats(rest, lineno)
        elif key == "feh":
            if len(rest) != 1:
                raise ParseError("feh line takes exactly one value", line=lineno)
            if cur_feh is not None or cur_mass:
                raise ParseError("new feh header inside an open block (missing blank line?)", line=lineno)
            (cur_feh,) = _parse_floats(rest, lineno)
        elif key == "age":
            if cur_feh is None:
                raise ParseError("age line before feh line", line=lineno)
            if len(rest) != 1:
                raise ParseError("age line takes exactly one value", line=lineno)
            (cur_age,) = _parse_floats(rest, lineno)
            pair = (cur_feh, cur_age)
            if prev_pair is not None and pair <= prev_pair:
                raise ParseError(
                    f"blocks must be in ascending (feh, age) order: {pair} after {prev_pair}",
                    line=lineno,
                )
            prev_pair = pair
            if cur_feh not in feh_order:
                feh_order.append(cur_feh)
            if len(feh_order) == 1:
                age_order.append(cur_age)
            elif cur_age not in age_order:
                raise ParseError(
                    f"age {cur_age} not part of the grid of the first feh block", line=lineno
                )
        elif key == "mass":
            if filters is None or kappa is None:
                raise ParseError("mass row before filters/kappa headers", line=lineno)
            if cur_age is None:
                raise ParseError("mass row outside a feh/age block", line=lineno)
            vals = _parse_floats(rest, lineno)
            if len(vals) != 1 + len(filters):
                raise ParseError(
                    f"mass row needs 1 mass + {len(filters)} magnitudes, got {len(vals)} values",
                    line=lineno,
                )
            cur_mass.append(vals[0])
            cur_mags.append(vals[1:])
        else:
            raise ParseError(f"unknown directive {key!r}", line=lineno)
    close_block(len(lines))

    if filters is None or kappa is None:
        raise ParseError("missing filters/kappa headers", line=1)
    if not blocks:
        raise ParseError("no (feh, age) blocks found", line=len(lines))
    missing = [
        (f, a) for f in feh_order for a in age_order if (f, a) not in blocks
    ]
    if missing:
        raise ParseError(f"incomplete grid; missing block for (feh, age) = {missing[0]}", line=len(lines))

    tracks = [
        [
            Track(np.asarray(blocks[(f, a)][0]), np.asarray(blocks[(f, a)][1]))
            for a in age_order
        ]
        for f in feh_order
    ]
    try:
        fset = FilterSet(tuple(filters), np.asarray(kappa, dtype=float))
        return IsochroneTable(fset, feh_order, age_order, tracks)
    except InvalidConfig as exc:
        raise ParseError(str(exc), line=len(lines)) from exc


def write_isochrone_table(table: IsochroneTable, path) -> None:
    """Emit the table in the canonical text layout (round-trips exactly)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("filters " + " ".join(table.filters.names) + "\n")
        fh.write("kappa " + " ".join(repr(float(k)) for k in table.filters.kappa) + "\n")
        fh.write("\n")
        for i, feh in enumerate(table.feh_grid):
            for j, age in enumerate(table.age_grid):
                trk = table.tracks[i][j]
                fh.write(f"feh {float(feh)!r}\n")
                fh.write(f"age {float(age)!r}\n")
                for k in range(len(trk.mass)):
                    row = " ".join(repr(float(v)) for v in trk.mags[k])
                    fh.write(f"mass {float(trk.mass[k])!r} {row}\n")
                fh.write("\n")
