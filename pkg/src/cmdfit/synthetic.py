"""Synthetic catalogs with known truth, and a brute-force discretized
posterior used as an exact oracle.

The oracle enumerates a finite grid over the cluster parameters, every
star's (mass, ratio) pair, and all 2^N membership vectors, evaluating
prior times likelihood in log space with its own straightforward
(loop-based) interpolation and Gaussian formulas - deliberately
independent of the vectorized kernels the sampler uses. A lattice
random-walk sampler over the same discretized target bridges the MCMC
machinery to the oracle so their marginals can be compared cell by cell.
"""

from __future__ import annotations

import bisect
import itertools
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from ._core import active_lane
from .errors import InvalidConfig, OutOfRange, ParseError, TooLarge
from .likelihood import FieldRanges, PhotometryCatalog
from .priors import (
    log_cluster_prior,
    log_mass_prior,
    log_ratio_prior,
    sample_mass_prior,
    wd_binary_excluded,
)
from .sampler import metropolis_accept
from .stellar_model import ClusterParams, IsochroneTable, ToyModelConfig, toy_table

__all__ = [
    "TruthRecord",
    "generate_cluster",
    "write_truth_csv",
    "read_truth_csv",
    "Discretization",
    "DiscretizedInstance",
    "PosteriorTable",
    "brute_force_posterior",
    "GridChainResult",
    "run_grid_sampler",
    "pseudo_prior_invariance_check",
    "InvarianceReport",
    "fixture_table",
    "three_star_fixture",
    "two_star_fixture",
]

_LN10 = math.log(10.0)
_CELL_BUDGET = 10_000_000
_MAX_ORACLE_STARS = 4


# ---------------------------------------------------------------------------
# Generative model
# ---------------------------------------------------------------------------


@dataclass
class TruthRecord:
    """Ground truth behind a synthetic catalog. Field stars carry NaN
    masses/ratios; ``mags_true`` holds noiseless magnitudes for cluster
    stars and the drawn magnitudes for field stars."""

    theta: ClusterParams
    star_ids: list
    z: np.ndarray
    m1: np.ndarray
    r: np.ndarray
    mags_true: np.ndarray
    n_redraws: int = 0


def _locus_grid(table: IsochroneTable, theta: ClusterParams, n_mass=200):
    """Apparent-magnitude locus of the cluster model (single stars and
    binaries) used to measure how far a field star sits off the model."""
    flat = table.flat()
    lo = max(0.1, float(flat.node_mass.min()))
    hi = min(8.0, float(flat.node_mass.max()))
    masses = np.geomspace(lo, hi, n_mass)
    mus = []
    lane = active_lane()
    for ratio in (0.0, 0.5, 1.0):
        gabs, ok = lane.predict_absolute(
            *flat, theta.theta_feh, theta.theta_age, masses, np.full(n_mass, ratio)
        )
        mu = gabs[ok] + theta.theta_dm + table.filters.kappa * theta.theta_av
        mus.append(mu)
    return np.concatenate(mus, axis=0)


def generate_cluster(
    theta_true: ClusterParams,
    n_cluster: int,
    n_field: int,
    binary_fraction: float,
    noise_sd,
    ranges: FieldRanges,
    seed: int,
    table: IsochroneTable,
    pmember: Optional[float] = None,
    field_sep_sigma: float = 0.0,
    max_redraws: int = 100_000,
):
    """Draw a synthetic catalog: cluster masses from the mass prior,
    binaries with probability ``binary_fraction`` (ratio uniform on the
    unit interval), Gaussian noise on the predicted magnitudes; field-star
    magnitudes uniform over ``ranges``. Fully determined by ``seed``.

    Masses outside the interpolation domain (and excluded white-dwarf
    binaries) are redrawn and counted. ``field_sep_sigma`` > 0 redraws
    field stars until they sit at least that many noise SDs off the
    cluster locus in some filter.
    """
    if n_cluster < 0 or n_field < 0:
        raise InvalidConfig("star counts must be >= 0")
    if not (0.0 <= binary_fraction <= 1.0):
        raise InvalidConfig("binary fraction must be in [0, 1]")
    theta_true.validate()
    nf = table.n_filters
    sd = np.broadcast_to(np.asarray(noise_sd, dtype=float), (nf,)).copy()
    if np.any(sd <= 0):
        raise InvalidConfig("noise SDs must be > 0")

    rng = np.random.default_rng(seed)
    lane = active_lane()
    flat = table.flat()
    n_total = n_cluster + n_field
    if pmember is None:
        pmember = n_cluster / n_total if n_total else 0.5

    m1 = np.full(n_total, np.nan)
    ratio = np.full(n_total, np.nan)
    z = np.zeros(n_total, dtype=np.int8)
    mags_true = np.empty((n_total, nf))
    x = np.empty((n_total, nf))
    redraws = 0

    for i in range(n_cluster):
        for _ in range(max_redraws):
            m = float(sample_mass_prior(rng, 1)[0])
            rr = float(rng.uniform(0.0, 1.0)) if rng.random() < binary_fraction else 0.0
            if wd_binary_excluded(m, rr, theta_true.theta_age, table):
                redraws += 1
                continue
            gabs, ok = lane.predict_absolute(
                *flat, theta_true.theta_feh, theta_true.theta_age,
                np.array([m]), np.array([rr]),
            )
            if not ok[0]:
                redraws += 1
                continue
            break
        else:
            raise InvalidConfig("exceeded the redraw budget while drawing cluster stars")
        m1[i], ratio[i], z[i] = m, rr, 1
        mags_true[i] = gabs[0] + theta_true.theta_dm + table.filters.kappa * theta_true.theta_av
        x[i] = mags_true[i] + rng.normal(0.0, sd)

    locus = _locus_grid(table, theta_true) if (n_field and field_sep_sigma > 0) else None
    for i in range(n_cluster, n_total):
        for _ in range(max_redraws):
            draw = rng.uniform(ranges.lo, ranges.hi)
            if locus is not None:
                dist = np.min(np.max(np.abs(draw - locus) / sd, axis=1))
                if dist < field_sep_sigma:
                    redraws += 1
                    continue
            break
        else:
            raise InvalidConfig("exceeded the redraw budget while drawing field stars")
        mags_true[i] = draw
        x[i] = draw

    ids = [f"s{i:04d}" for i in range(n_total)]
    catalog = PhotometryCatalog(
        ids,
        table.filters.names,
        x,
        np.tile(sd, (n_total, 1)),
        np.full(n_total, float(pmember)),
    )
    truth = TruthRecord(theta_true, ids, z, m1, ratio, mags_true, n_redraws=redraws)
    return catalog, truth


_NA = "NA"


def write_truth_csv(truth: TruthRecord, filter_names, path) -> None:
    """Sidecar with the generating parameters (comment header) and one row
    per star: id, membership, masses, noiseless magnitudes."""
    th = truth.theta
    with open(path, "w", encoding="utf-8") as fh:
        for key in ("theta_age", "theta_feh", "theta_heh", "theta_dm", "theta_av"):
            fh.write(f"# {key} = {getattr(th, key)!r}\n")
        cols = ["id", "z", "m1", "r"] + [f"{f}_true" for f in filter_names]
        fh.write(",".join(cols) + "\n")
        for i, sid in enumerate(truth.star_ids):
            def num(v):
                return _NA if math.isnan(v) else repr(float(v))

            row = [sid, str(int(truth.z[i])), num(float(truth.m1[i])), num(float(truth.r[i]))]
            row += [repr(float(v)) for v in truth.mags_true[i]]
            fh.write(",".join(row) + "\n")


def read_truth_csv(path) -> TruthRecord:
    meta = {}
    rows = []
    header = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, val = line.lstrip("# ").partition("=")
                meta[key.strip()] = float(val.strip())
                continue
            parts = line.split(",")
            if header is None:
                header = parts
                continue
            if len(parts) != len(header):
                raise ParseError(f"expected {len(header)} fields", line=lineno)
            rows.append(parts)
    if header is None:
        raise ParseError("missing truth header", line=1)
    theta = ClusterParams(
        meta["theta_age"], meta["theta_feh"], meta["theta_heh"], meta["theta_dm"], meta["theta_av"]
    )
    ids = [r[0] for r in rows]

    def num(s):
        return float("nan") if s == _NA else float(s)

    z = np.array([int(r[1]) for r in rows], dtype=np.int8)
    m1 = np.array([num(r[2]) for r in rows])
    ratio = np.array([num(r[3]) for r in rows])
    mags = np.array([[float(v) for v in r[4:]] for r in rows])
    return TruthRecord(theta, ids, z, m1, ratio, mags)


# ---------------------------------------------------------------------------
# Oracle-side naive model evaluation (independent of the kernels)
# ---------------------------------------------------------------------------


def _naive_bracket(grid, v):
    n = len(grid)
    if n == 1:
        if v != grid[0]:
            raise OutOfRange(f"{v} outside single-point grid")
        return [(0, 1.0)]
    if v < grid[0] or v > grid[-1]:
        raise OutOfRange(f"{v} outside grid")
    i = bisect.bisect_left(grid, v)
    if i == 0:
        return [(0, 1.0)]
    w = (v - grid[i - 1]) / (grid[i] - grid[i - 1])
    out = []
    if 1.0 - w != 0.0:
        out.append((i - 1, 1.0 - w))
    if w != 0.0:
        out.append((i, w))
    return out


def _naive_interp(table: IsochroneTable, mass, age, feh):
    nf = table.n_filters
    out = [0.0] * nf
    for fi, wf in _naive_bracket(table.feh_grid, feh):
        for aj, wa in _naive_bracket(table.age_grid, age):
            w = wf * wa
            trk = table.tracks[fi][aj]
            tm, tg = trk.mass, trk.mags
            if mass > tm[-1]:
                raise OutOfRange("mass above bracketing track maximum")
            k = min(max(bisect.bisect_left(tm, mass), 1), len(tm) - 1)
            t = (mass - tm[k - 1]) / (tm[k] - tm[k - 1])
            for j in range(nf):
                out[j] += w * (tg[k - 1][j] + t * (tg[k][j] - tg[k - 1][j]))
    return out


def _naive_predicted(table, m1, ratio, theta: ClusterParams):
    g1 = _naive_interp(table, m1, theta.theta_age, theta.theta_feh)
    if ratio > 0.0:
        g2 = _naive_interp(table, ratio * m1, theta.theta_age, theta.theta_feh)
        comb = []
        for a, b in zip(g1, g2):
            mn = min(a, b)
            d = abs(a - b)
            comb.append(mn - (2.5 / _LN10) * math.log1p(math.exp(-d * (_LN10 / 2.5))))
        g1 = comb
    kap = table.filters.kappa
    return [g + theta.theta_dm + float(kap[j]) * theta.theta_av for j, g in enumerate(g1)]


def _naive_gauss(x_i, sigma_i, mu):
    total = 0.0
    for j in range(len(mu)):
        xv = float(x_i[j])
        if math.isnan(xv):
            continue
        s2 = float(sigma_i[j]) ** 2
        d = xv - mu[j]
        total += -0.5 * math.log(2.0 * math.pi * s2) - d * d / (2.0 * s2)
    return total


def _naive_field(x_i, ranges: FieldRanges):
    total = 0.0
    for j in range(len(x_i)):
        xv = float(x_i[j])
        if math.isnan(xv):
            continue
        if xv < float(ranges.lo[j]) or xv > float(ranges.hi[j]):
            return float("-inf")
        total -= math.log(float(ranges.hi[j]) - float(ranges.lo[j]))
    return total


# ---------------------------------------------------------------------------
# Discretized target
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Discretization:
    """Finite grids over the cluster parameters and the per-star mass and
    ratio; cluster axes may be singletons to pin a parameter."""

    age_values: tuple
    feh_values: tuple
    heh_values: tuple
    dm_values: tuple
    av_values: tuple
    m1_values: tuple
    r_values: tuple

    def __post_init__(self):
        for name in ("age_values", "feh_values", "heh_values", "dm_values",
                     "av_values", "m1_values", "r_values"):
            vals = tuple(float(v) for v in getattr(self, name))
            if len(vals) == 0 or any(b <= a for a, b in zip(vals, vals[1:])):
                raise InvalidConfig(f"{name} must be nonempty ascending")
            object.__setattr__(self, name, vals)

    @property
    def theta_axes(self):
        return (self.age_values, self.feh_values, self.heh_values, self.dm_values, self.av_values)

    @property
    def n_theta(self) -> int:
        return int(np.prod([len(a) for a in self.theta_axes]))

    def theta_cells(self):
        """Iterate (flat_index, ClusterParams) in row-major axis order."""
        for t, combo in enumerate(itertools.product(*self.theta_axes)):
            yield t, ClusterParams(*combo)


class DiscretizedInstance:
    """A fully discretized model: shared target definition (prior tables,
    membership priors, field constants) consumed by both the brute-force
    oracle and the lattice sampler. The likelihood is evaluated separately
    by each side."""

    def __init__(
        self,
        table: IsochroneTable,
        catalog: PhotometryCatalog,
        prior_spec,
        disc: Discretization,
        ranges: Optional[FieldRanges] = None,
        default_pmember: float = 0.5,
        field_logpmf=None,
        wd_exclusion: bool = True,
    ):
        n = len(catalog)
        if n > _MAX_ORACLE_STARS:
            raise TooLarge(f"oracle supports at most {_MAX_ORACLE_STARS} stars, got {n}")
        m, r = len(disc.m1_values), len(disc.r_values)
        cost = disc.n_theta * (2**n) + disc.n_theta * n * m * r
        if cost > _CELL_BUDGET:
            raise TooLarge(f"cell budget exceeded: {cost} > {_CELL_BUDGET}")
        self.table = table
        self.catalog = catalog
        self.prior_spec = prior_spec
        self.disc = disc
        self.ranges = ranges if ranges is not None else FieldRanges.from_catalog(catalog)
        self.wd_exclusion = wd_exclusion
        pm = np.where(np.isnan(catalog.pmember), default_pmember, catalog.pmember)
        with np.errstate(divide="ignore"):
            self.log_pm1 = np.log(pm)
            self.log_pm0 = np.log1p(-pm)

        mv = np.asarray(disc.m1_values)
        rv = np.asarray(disc.r_values)
        raw = log_mass_prior(mv)[:, None] + log_ratio_prior(rv)[None, :]
        self.member_logpmf = raw - logsumexp(raw)
        if field_logpmf is None:
            self.field_logpmf = self.member_logpmf.copy()
        else:
            fl = np.asarray(field_logpmf, dtype=float)
            if fl.shape != (m, r):
                raise InvalidConfig("field log-pmf must have shape (n_mass, n_ratio)")
            self.field_logpmf = fl - logsumexp(fl)

        self.theta_logprior = np.array(
            [log_cluster_prior(th, prior_spec) for _, th in disc.theta_cells()]
        )
        self.log_f0 = np.array([_naive_field(catalog.x[i], self.ranges) for i in range(n)])

        # white-dwarf binary support masks per age value (member branch only)
        self._excl_by_age = {}
        for ia, age in enumerate(disc.age_values):
            if wd_exclusion and table.ms_lifetime is not None:
                excl = wd_binary_excluded(
                    np.repeat(mv, len(rv)), np.tile(rv, len(mv)), age, table
                ).reshape(m, r)
            else:
                excl = np.zeros((m, r), dtype=bool)
            self._excl_by_age[ia] = excl

    @property
    def n_stars(self):
        return len(self.catalog)

    def member_support_mask(self, age_index: int):
        return self._excl_by_age[age_index]

    def age_index_of_cell(self, t: int) -> int:
        sizes = [len(a) for a in self.disc.theta_axes]
        return int(t // int(np.prod(sizes[1:])))


@dataclass
class PosteriorTable:
    """Exact discretized posterior: joint over (theta cell, membership
    vector) plus the derived marginals used by the tests."""

    disc: Discretization
    z_combos: list
    log_joint_tz: np.ndarray
    p_theta_z: np.ndarray
    p_theta: np.ndarray
    p_z: np.ndarray
    member_mass: np.ndarray  # (N, M, R): p(m, r, Z_i=1 | X)
    field_mass: np.ndarray  # (N, M, R): p(m, r, Z_i=0 | X)
    log_norm: float


def brute_force_posterior(instance: DiscretizedInstance) -> PosteriorTable:
    """Enumerate prior x likelihood over every grid cell and normalize.

    Likelihood values come from the oracle's own loop-based interpolation
    and Gaussian formulas. All reductions are ordered and in log space.
    """
    disc = instance.disc
    cat = instance.catalog
    table = instance.table
    n = instance.n_stars
    m, r = len(disc.m1_values), len(disc.r_values)
    big_t = disc.n_theta

    logf1 = np.full((big_t, n, m, r), -np.inf)
    for t, theta in disc.theta_cells():
        if instance.theta_logprior[t] == float("-inf"):
            continue
        for mi, mass in enumerate(disc.m1_values):
            for ri, ratio in enumerate(disc.r_values):
                try:
                    mu = _naive_predicted(table, mass, ratio, theta)
                except OutOfRange:
                    continue
                for i in range(n):
                    logf1[t, i, mi, ri] = _naive_gauss(cat.x[i], cat.sigma[i], mu)

    # per-star member weights with the support mask and the mass pmf
    logw1 = np.empty((big_t, n))
    for t in range(big_t):
        excl = instance.member_support_mask(instance.age_index_of_cell(t))
        pmf = np.where(excl, -np.inf, instance.member_logpmf)
        for i in range(n):
            logw1[t, i] = logsumexp(logf1[t, i] + pmf)
    logw0 = instance.log_f0  # proper pmf integrates to one

    combos = list(itertools.product((0, 1), repeat=n))
    log_joint = np.empty((big_t, len(combos)))
    for c, zs in enumerate(combos):
        contrib = instance.theta_logprior.copy()
        for i, zi in enumerate(zs):
            if zi:
                contrib = contrib + logw1[:, i] + instance.log_pm1[i]
            else:
                contrib = contrib + logw0[i] + instance.log_pm0[i]
        log_joint[:, c] = contrib

    log_norm = float(logsumexp(log_joint))
    if log_norm == float("-inf"):
        raise InvalidConfig("posterior has zero mass on the discretization")
    p_theta_z = np.exp(log_joint - log_norm)
    p_theta = p_theta_z.sum(axis=1)
    p_z = np.array(
        [sum(p_theta_z[:, c].sum() for c, zs in enumerate(combos) if zs[i]) for i in range(n)]
    )

    # mixture weight of each star at each theta cell, and leave-one-out sums
    logmix = np.logaddexp(
        logw1 + instance.log_pm1[None, :], logw0[None, :] + instance.log_pm0[None, :]
    )
    member_mass = np.empty((n, m, r))
    field_mass = np.empty((n, m, r))
    for i in range(n):
        loo = instance.theta_logprior.copy()
        for j in range(n):
            if j != i:
                loo = loo + logmix[:, j]
        stack_member = np.full((big_t, m, r), -np.inf)
        for t in range(big_t):
            if loo[t] == float("-inf"):
                continue
            excl = instance.member_support_mask(instance.age_index_of_cell(t))
            pmf = np.where(excl, -np.inf, instance.member_logpmf)
            stack_member[t] = loo[t] + instance.log_pm1[i] + logf1[t, i] + pmf
        member_mass[i] = np.exp(logsumexp(stack_member, axis=0) - log_norm)
        with np.errstate(invalid="ignore"):
            stack_field = loo[:, None, None] + instance.log_pm0[i] + logw0[i] + instance.field_logpmf[None, :, :]
            stack_field = np.where(np.isnan(stack_field), -np.inf, stack_field)
        field_mass[i] = np.exp(logsumexp(stack_field, axis=0) - log_norm)

    return PosteriorTable(
        disc, combos, log_joint, p_theta_z, p_theta, p_z, member_mass, field_mass, log_norm
    )


# ---------------------------------------------------------------------------
# Lattice sampler over the discretized target
# ---------------------------------------------------------------------------


def _reflect_index(i: int, n: int) -> int:
    if n == 1:
        return 0
    period = 2 * n
    t = i % period
    return t if t < n else period - 1 - t


@dataclass
class GridChainResult:
    p_theta: np.ndarray
    p_theta_se: np.ndarray
    p_z: np.ndarray
    p_z_se: np.ndarray
    n_draws: int
    accept_rate: float


def _lane_likelihood_tables(instance: DiscretizedInstance):
    """(T, N, M, R) member log likelihoods computed through the production
    kernel lane (the sampler side of the dual route)."""
    disc = instance.disc
    cat = instance.catalog
    table = instance.table
    n = instance.n_stars
    m, r = len(disc.m1_values), len(disc.r_values)
    lane = active_lane()
    flat = table.flat()
    kap = table.filters.kappa
    mrep = np.repeat(np.asarray(disc.m1_values), r)
    rtile = np.tile(np.asarray(disc.r_values), m)
    miss = cat.missing
    inv2var = np.where(miss, 0.0, 1.0 / (2.0 * cat.sigma**2))
    gconst = -0.5 * np.nansum(np.where(miss, 0.0, np.log(2 * np.pi * cat.sigma**2)), axis=1)
    xfill = np.where(miss, 0.0, cat.x)

    out = np.full((disc.n_theta, n, m, r), -np.inf)
    for t, theta in disc.theta_cells():
        if not table.in_domain(theta.theta_age, theta.theta_feh):
            continue
        gabs, ok = lane.predict_absolute(*flat, theta.theta_feh, theta.theta_age, mrep, rtile)
        mu = gabs + theta.theta_dm + kap * theta.theta_av  # (M*R, nf)
        for i in range(n):
            resid = xfill[i] - mu
            cl = gconst[i] - np.sum(inv2var[i] * resid * resid, axis=1)
            cl = np.where(ok, cl, -np.inf)
            out[t, i] = cl.reshape(m, r)
    return out


def run_grid_sampler(
    instance: DiscretizedInstance,
    n_sweeps: int,
    burn_in: int,
    seed: int,
    index_width: int = 1,
    n_batches: int = 50,
) -> GridChainResult:
    """Metropolis-within-Gibbs on the lattice: per-star mass and ratio
    indices, the five cluster-parameter indices, then membership flips,
    with index reflection at the grid edges. Targets exactly the
    distribution the brute-force oracle enumerates."""
    disc = instance.disc
    n = instance.n_stars
    if n_sweeps < n_batches:
        raise InvalidConfig("need at least one sweep per batch")
    rng = np.random.default_rng(seed)
    logf1 = _lane_likelihood_tables(instance)
    axes = [np.asarray(a) for a in disc.theta_axes]
    sizes = [len(a) for a in axes]
    strides = np.array([int(np.prod(sizes[k + 1 :])) for k in range(5)], dtype=int)
    m, r = len(disc.m1_values), len(disc.r_values)

    member_pmf = {
        ia: np.where(instance.member_support_mask(ia), -np.inf, instance.member_logpmf)
        for ia in range(sizes[0])
    }

    # start from the joint mode-ish center cells
    idx_theta = [s // 2 for s in sizes]
    im = np.full(n, m // 2, dtype=int)
    ir = np.full(n, r // 2, dtype=int)
    z = np.ones(n, dtype=np.int8)

    def tcell():
        return int(np.dot(idx_theta, strides))

    def member_piece(t, stars_m, stars_r):
        pmf = member_pmf[idx_theta[0]]
        return logf1[t, np.arange(n), stars_m, stars_r] + pmf[stars_m, stars_r] + instance.log_pm1

    def field_piece(stars_m, stars_r):
        return instance.log_f0 + instance.field_logpmf[stars_m, stars_r] + instance.log_pm0

    def total_logp():
        t = tcell()
        pieces = np.where(z.astype(bool), member_piece(t, im, ir), field_piece(im, ir))
        return float(instance.theta_logprior[t] + np.sum(pieces))

    if total_logp() == float("-inf"):
        # fall back to an all-field start, valid whenever the data sit
        # inside the field ranges
        z[:] = 0
        if total_logp() == float("-inf"):
            raise InvalidConfig("no valid starting cell for the lattice sampler")

    theta_counts = np.zeros(disc.n_theta)
    z_counts = np.zeros(n)
    batch_theta = np.zeros((n_batches, disc.n_theta))
    batch_z = np.zeros((n_batches, n))
    batch_len = np.zeros(n_batches)
    accepts = 0
    proposals = 0

    for sweep in range(n_sweeps + burn_in):
        t = tcell()
        # star mass indices (vectorized across stars; terms are disjoint)
        for arr, size in ((im, m), (ir, r)):
            if size == 1:
                continue
            prop = arr + rng.integers(-index_width, index_width + 1, n)
            prop = np.array([_reflect_index(int(v), size) for v in prop])
            if arr is im:
                new_m, new_r = prop, ir
            else:
                new_m, new_r = im, prop
            cur = np.where(z.astype(bool), member_piece(t, im, ir), field_piece(im, ir))
            new = np.where(z.astype(bool), member_piece(t, new_m, new_r), field_piece(new_m, new_r))
            with np.errstate(invalid="ignore"):
                acc = np.log(rng.random(n)) < (new - cur)
            arr[acc] = prop[acc]
            accepts += int(np.sum(acc))
            proposals += n
        # cluster parameter indices
        for k in range(5):
            if sizes[k] == 1:
                continue
            old = idx_theta[k]
            prop = _reflect_index(old + int(rng.integers(-index_width, index_width + 1)), sizes[k])
            lp_old = total_logp()
            idx_theta[k] = prop
            lp_new = total_logp()
            u = rng.random()
            if not metropolis_accept(lp_new, lp_old, u):
                idx_theta[k] = old
            else:
                accepts += 1
            proposals += 1
        # membership flips
        t = tcell()
        p1 = member_piece(t, im, ir)
        p0 = field_piece(im, ir)
        delta = np.where(z.astype(bool), p0 - p1, p1 - p0)
        with np.errstate(invalid="ignore"):
            acc = np.log(rng.random(n)) < delta
        z[acc] = 1 - z[acc]
        accepts += int(np.sum(acc))
        proposals += n

        if sweep >= burn_in:
            k = sweep - burn_in
            b = (k * n_batches) // n_sweeps
            tc = tcell()
            theta_counts[tc] += 1
            z_counts += z
            batch_theta[b, tc] += 1
            batch_z[b] += z
            batch_len[b] += 1

    p_theta = theta_counts / n_sweeps
    p_z = z_counts / n_sweeps
    bt = batch_theta / batch_len[:, None]
    bz = batch_z / batch_len[:, None]
    p_theta_se = np.std(bt, axis=0, ddof=1) / math.sqrt(n_batches)
    p_z_se = np.std(bz, axis=0, ddof=1) / math.sqrt(n_batches)
    return GridChainResult(p_theta, p_theta_se, p_z, p_z_se, n_sweeps, accepts / proposals)


# ---------------------------------------------------------------------------
# Appendix-style invariance check
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InvarianceReport:
    max_theta_z_diff: float
    max_member_mass_diff: float
    max_field_mass_diff: float


def pseudo_prior_invariance_check(
    table,
    catalog,
    prior_spec,
    disc: Discretization,
    field_logpmf_a,
    field_logpmf_b,
    ranges=None,
    default_pmember=0.5,
) -> InvarianceReport:
    """Exact posteriors under two different proper field-mass priors.

    The joint over (theta, membership vector) and the membership-
    conditional mass marginals must agree (the field-mass prior is a pure
    nuisance); the field-mass marginals themselves genuinely differ.
    """
    tables = []
    for pmf in (field_logpmf_a, field_logpmf_b):
        inst = DiscretizedInstance(
            table, catalog, prior_spec, disc,
            ranges=ranges, default_pmember=default_pmember, field_logpmf=pmf,
        )
        tables.append(brute_force_posterior(inst))
    pa, pb = tables
    max_tz = float(np.max(np.abs(pa.p_theta_z - pb.p_theta_z)))
    cond_diffs = []
    for i in range(len(catalog)):
        if pa.p_z[i] > 0 and pb.p_z[i] > 0:
            cond_diffs.append(
                np.max(np.abs(pa.member_mass[i] / pa.p_z[i] - pb.member_mass[i] / pb.p_z[i]))
            )
    max_mm = float(max(cond_diffs)) if cond_diffs else 0.0
    max_fm = float(np.max(np.abs(pa.field_mass - pb.field_mass)))
    return InvarianceReport(max_tz, max_mm, max_fm)


# ---------------------------------------------------------------------------
# Bundled desk-scale fixtures
# ---------------------------------------------------------------------------


def fixture_table() -> IsochroneTable:
    """Small deterministic toy table used by the oracle fixtures."""
    cfg = ToyModelConfig(
        mass_grid=tuple(np.geomspace(0.15, 4.0, 60)),
        age_grid=(8.4, 8.8, 9.2, 9.6),
        feh_grid=(-0.4, 0.0, 0.4),
    )
    return toy_table(cfg)


def _fixture_catalog(table, theta, specs):
    """Stars at hand-picked offsets from the model locus; specs are
    (m1, ratio, offsets-per-filter) with None meaning an off-locus star
    placed directly at given magnitudes."""
    xs = []
    for m1, ratio, off in specs:
        if m1 is None:
            xs.append(np.asarray(off, dtype=float))
        else:
            mu = np.asarray(_naive_predicted(table, m1, ratio, theta))
            xs.append(mu + np.asarray(off, dtype=float))
    x = np.vstack(xs)
    sd = np.full_like(x, 0.05)
    ids = [f"fx{i}" for i in range(len(xs))]
    return PhotometryCatalog(ids, table.filters.names, x, sd, np.full(len(xs), 0.5))


def _fixture_prior_spec():
    from .priors import ClusterPriorSpec

    return ClusterPriorSpec(
        feh=(0.0, 0.3), heh=(0.0, 0.3), dm=(1.0, 0.5), log_av=(math.log(0.1), 0.7)
    )


def three_star_fixture():
    """3-star instance for the invariance check: one clear member, one
    binary member, one star sitting off the locus."""
    table = fixture_table()
    theta = ClusterParams(8.8, 0.0, 0.0, 1.0, 0.1)
    catalog = _fixture_catalog(
        table,
        theta,
        [
            (0.8, 0.0, (0.03, -0.02)),
            (1.2, 0.8, (-0.04, 0.05)),
            (None, None, (9.5, 12.0)),
        ],
    )
    disc = Discretization(
        age_values=(8.6, 8.8, 9.0),
        feh_values=(0.0,),
        heh_values=(0.0,),
        dm_values=(0.8, 1.0, 1.2),
        av_values=(0.05, 0.1, 0.2),
        m1_values=tuple(np.geomspace(0.4, 2.4, 6)),
        r_values=(0.0, 0.4, 0.8, 1.0),
    )
    ranges = FieldRanges(lo=np.array([4.0, 4.0]), hi=np.array([14.0, 16.0]))
    return table, catalog, _fixture_prior_spec(), disc, ranges


def two_star_fixture():
    """2-star instance for the sampler-exactness check: one member-ish
    star and one genuinely ambiguous star."""
    table = fixture_table()
    theta = ClusterParams(8.8, 0.0, 0.0, 1.0, 0.1)
    catalog = _fixture_catalog(
        table,
        theta,
        [
            (0.9, 0.0, (0.02, -0.03)),
            (0.55, 0.0, (0.10, -0.10)),
        ],
    )
    disc = Discretization(
        age_values=(8.6, 8.8, 9.0),
        feh_values=(0.0,),
        heh_values=(0.0,),
        dm_values=(0.8, 1.0, 1.2),
        av_values=(0.05, 0.15),
        m1_values=tuple(np.geomspace(0.4, 2.0, 5)),
        r_values=(0.0, 0.5, 1.0),
    )
    ranges = FieldRanges(lo=np.array([4.0, 4.0]), hi=np.array([14.0, 16.0]))
    return table, catalog, _fixture_prior_spec(), disc, ranges
