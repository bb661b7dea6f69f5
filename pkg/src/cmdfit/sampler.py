"""Metropolis-within-Gibbs sampler.

The chain runs on transformed coordinates: each star's primary mass is
replaced by the residual u of a linear regression on (mass ratio, age,
metallicity, distance modulus), and the absorption by the residual v of a
regression on (metallicity, distance modulus). The map is affine with unit
Jacobian, so the transformed-coordinate target is simply the natural-space
posterior composed with the inverse map. Every scalar gets a reflective
uniform proposal whose half-width is adapted toward a 20-30% acceptance
band during burn-in and the initial runs, then frozen.

Update order within a sweep is fixed for reproducibility: star mass
residuals, star ratios, age, metallicity, helium, distance modulus,
absorption residual, then membership indicators (when enabled). The u and
ratio updates of different stars touch disjoint posterior terms, so they
are evaluated as one vectorized pass per sweep; this is equivalent to
updating them one at a time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from ._core import active_lane
from .errors import InvalidConfig
from .likelihood import FieldRanges, PhotometryCatalog, field_log_density
from .priors import (
    AGE_HI,
    AGE_LO,
    MASS_HI,
    MASS_LO,
    ClusterPriorSpec,
    PseudoPriorSpec,
    log_cluster_prior,
    log_mass_prior,
    log_ratio_prior,
    wd_binary_excluded,
)
from .stellar_model import ClusterParams, IsochroneTable

__all__ = [
    "TransformSpec",
    "StepSizes",
    "ChainState",
    "Model",
    "SamplerRuntime",
    "BlockRecord",
    "reflect",
    "metropolis_accept",
    "adapt_width",
    "to_natural",
    "from_natural",
    "initial_state",
    "update_membership",
    "gibbs_sweep",
    "run_chain",
    "THETA_KEYS",
]

THETA_KEYS = ("age", "feh", "heh", "dm", "v")

ADAPT_WINDOW = 200
ADAPT_LOW = 0.20
ADAPT_HIGH = 0.30
ADAPT_SHRINK = 0.8
ADAPT_GROW = 1.25


# ---------------------------------------------------------------------------
# Reparameterization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TransformSpec:
    """Slopes and anchors of the correlation-reducing affine map.

    m1_i = u_i + beta_r[i]*(r_i - r_hat[i]) + beta_age[i]*(age - age_hat)
           + beta_feh[i]*(feh - feh_hat) + beta_dm[i]*(dm - dm_hat)
    av   = v + gamma_feh*(feh - feh_hat) + gamma_dm*(dm - dm_hat)
    """

    beta_r: np.ndarray
    beta_age: np.ndarray
    beta_feh: np.ndarray
    beta_dm: np.ndarray
    gamma_feh: float
    gamma_dm: float
    r_hat: np.ndarray
    age_hat: float
    feh_hat: float
    dm_hat: float

    def __post_init__(self):
        for name in ("beta_r", "beta_age", "beta_feh", "beta_dm", "r_hat"):
            arr = np.asarray(getattr(self, name), dtype=float)
            object.__setattr__(self, name, arr)
            if not np.all(np.isfinite(arr)):
                raise InvalidConfig(f"{name} must be finite")
        n = len(self.beta_r)
        if not all(len(getattr(self, k)) == n for k in ("beta_age", "beta_feh", "beta_dm", "r_hat")):
            raise InvalidConfig("per-star transform arrays must share a length")
        for name in ("gamma_feh", "gamma_dm", "age_hat", "feh_hat", "dm_hat"):
            if not math.isfinite(getattr(self, name)):
                raise InvalidConfig(f"{name} must be finite")

    @classmethod
    def identity(cls, n_stars: int, age_hat=9.0, feh_hat=0.0, dm_hat=0.0) -> "TransformSpec":
        z = np.zeros(n_stars)
        return cls(z, z.copy(), z.copy(), z.copy(), 0.0, 0.0, z.copy(), age_hat, feh_hat, dm_hat)

    def n_stars(self) -> int:
        return len(self.beta_r)

    def mass_offset(self, r, age, feh, dm):
        """The non-u part of the mass map; vectorized over stars."""
        return (
            self.beta_r * (r - self.r_hat)
            + self.beta_age * (age - self.age_hat)
            + self.beta_feh * (feh - self.feh_hat)
            + self.beta_dm * (dm - self.dm_hat)
        )

    def av_offset(self, feh, dm):
        return self.gamma_feh * (feh - self.feh_hat) + self.gamma_dm * (dm - self.dm_hat)


def to_natural(state: "ChainState", spec: TransformSpec):
    """Natural-space view of a chain state: (masses, ratios, ClusterParams)."""
    m1 = state.u + spec.mass_offset(state.r, state.age, state.feh, state.dm)
    av = state.v + spec.av_offset(state.feh, state.dm)
    return m1, state.r.copy(), ClusterParams(state.age, state.feh, state.heh, state.dm, av)


def from_natural(m1, r, theta: ClusterParams, spec: TransformSpec):
    """(u, v) coordinates that map back to the given natural values."""
    u = np.asarray(m1, dtype=float) - spec.mass_offset(
        np.asarray(r, dtype=float), theta.theta_age, theta.theta_feh, theta.theta_dm
    )
    v = theta.theta_av - spec.av_offset(theta.theta_feh, theta.theta_dm)
    return u, float(v)


# ---------------------------------------------------------------------------
# Proposal machinery
# ---------------------------------------------------------------------------


def reflect(value, lo, hi):
    """Fold a value into [lo, hi] by repeated mirror reflection.

    Implemented with modular arithmetic so arbitrarily wide excursions
    fold in O(1); preserves proposal symmetry.
    """
    if not hi > lo:
        raise InvalidConfig("reflect needs hi > lo")
    width = hi - lo
    t = np.mod(np.asarray(value, dtype=float) - lo, 2.0 * width)
    out = lo + np.minimum(t, 2.0 * width - t)
    return float(out) if out.ndim == 0 else out


def metropolis_accept(log_target_new, log_target_old, uniform_draw) -> bool:
    """Symmetric-proposal Metropolis rule: accept iff
    log(uniform) < log_target_new - log_target_old."""
    if log_target_new == float("-inf"):
        return False
    return math.log(uniform_draw) < log_target_new - log_target_old


def adapt_width(width: float, accepted: int, proposals: int = ADAPT_WINDOW) -> float:
    """Step-width update once a 200-proposal window completes: shrink by
    0.8 below a 20% acceptance rate, grow by 1.25 above 30%."""
    rate = accepted / proposals
    if rate < ADAPT_LOW:
        return width * ADAPT_SHRINK
    if rate > ADAPT_HIGH:
        return width * ADAPT_GROW
    return width


class StepSizes:
    """Per-scalar uniform proposal half-widths with acceptance counters.

    Scalars are the per-star u and ratio coordinates plus the five cluster
    coordinates. Each counter covers a window of 200 proposals; when the
    window completes the width is adapted (if adaptation is enabled) and
    the counter resets.
    """

    def __init__(self, n_stars: int, u=0.1, r=0.1, age=0.05, feh=0.05, heh=0.05, dm=0.1, v=0.05):
        self.u = np.full(n_stars, float(u))
        self.r = np.full(n_stars, float(r))
        self.theta = {"age": float(age), "feh": float(feh), "heh": float(heh), "dm": float(dm), "v": float(v)}
        for key, w in self.theta.items():
            if w < 0:
                raise InvalidConfig(f"step width {key} must be >= 0")
        if np.any(self.u < 0) or np.any(self.r < 0):
            raise InvalidConfig("step widths must be >= 0")
        self._uprop = np.zeros(n_stars, dtype=np.int64)
        self._uacc = np.zeros(n_stars, dtype=np.int64)
        self._rprop = np.zeros(n_stars, dtype=np.int64)
        self._racc = np.zeros(n_stars, dtype=np.int64)
        self._tprop = {k: 0 for k in THETA_KEYS}
        self._tacc = {k: 0 for k in THETA_KEYS}

    def copy(self) -> "StepSizes":
        out = StepSizes(len(self.u))
        out.u = self.u.copy()
        out.r = self.r.copy()
        out.theta = dict(self.theta)
        return out

    def record_stars(self, key: str, accepted, adapt: bool):
        prop = self._uprop if key == "u" else self._rprop
        if prop.size == 0:
            return
        acc = self._uacc if key == "u" else self._racc
        widths = self.u if key == "u" else self.r
        prop += 1
        acc += accepted
        if prop[0] >= ADAPT_WINDOW:
            if adapt:
                rate = acc / prop
                widths[rate < ADAPT_LOW] *= ADAPT_SHRINK
                widths[rate > ADAPT_HIGH] *= ADAPT_GROW
            prop[:] = 0
            acc[:] = 0

    def record_theta(self, key: str, accepted: bool, adapt: bool):
        self._tprop[key] += 1
        self._tacc[key] += int(accepted)
        if self._tprop[key] >= ADAPT_WINDOW:
            if adapt:
                self.theta[key] = adapt_width(self.theta[key], self._tacc[key], self._tprop[key])
            self._tprop[key] = 0
            self._tacc[key] = 0


# ---------------------------------------------------------------------------
# Model context and chain state
# ---------------------------------------------------------------------------


class Model:
    """Immutable-by-convention evaluation context of one fit: table,
    catalog arrays prepared for the kernels, priors, field constants, the
    current transform and pseudo-prior, and policy toggles.

    The transform and pseudo-prior slots are replaced (not mutated) by the
    tuning schedule via :meth:`set_transform` and :meth:`set_pseudo`;
    both installers leave any live chain state to be refreshed by the
    caller.
    """

    def __init__(
        self,
        table: IsochroneTable,
        catalog: PhotometryCatalog,
        prior_spec: ClusterPriorSpec,
        ranges: Optional[FieldRanges] = None,
        default_pmember: float = 0.5,
        wd_exclusion: bool = True,
    ):
        if tuple(catalog.filter_names) != tuple(table.filters.names):
            raise InvalidConfig(
                f"catalog filters {catalog.filter_names} do not match table filters {table.filters.names}"
            )
        if not (0.0 <= default_pmember <= 1.0):
            raise InvalidConfig("default_pmember must be in [0, 1]")
        self.table = table
        self.catalog = catalog
        self.prior_spec = prior_spec
        self.ranges = ranges if ranges is not None else FieldRanges.from_catalog(catalog)
        self.wd_exclusion = wd_exclusion
        self.n_stars = len(catalog)
        self.kappa = np.ascontiguousarray(table.filters.kappa)
        self.flat = table.flat()

        miss = catalog.missing
        self.xfill = np.ascontiguousarray(np.where(miss, 0.0, catalog.x))
        with np.errstate(invalid="ignore"):
            inv2var = np.where(miss, 0.0, 1.0 / (2.0 * catalog.sigma**2))
        self.inv2var = np.ascontiguousarray(inv2var)
        with np.errstate(invalid="ignore", divide="ignore"):
            logvar = np.where(miss, 0.0, np.log(2.0 * math.pi * catalog.sigma**2))
        self.gauss_const = np.ascontiguousarray(-0.5 * np.sum(logvar, axis=1))

        self.log_f0 = np.array(
            [field_log_density(catalog.x[i], self.ranges) for i in range(self.n_stars)]
        )
        pm = np.where(np.isnan(catalog.pmember), default_pmember, catalog.pmember)
        self.pmember = pm
        with np.errstate(divide="ignore"):
            self.log_pm1 = np.log(pm)
            self.log_pm0 = np.log1p(-pm)

        self.transform = TransformSpec.identity(self.n_stars)
        self.pseudo: Optional[PseudoPriorSpec] = None

    # transform / pseudo installers -------------------------------------

    def set_transform(self, spec: TransformSpec):
        if spec.n_stars() != self.n_stars:
            raise InvalidConfig("transform size does not match the catalog")
        self.transform = spec

    def set_pseudo(self, pseudo: Optional[PseudoPriorSpec]):
        if pseudo is not None and len(pseudo) != self.n_stars:
            raise InvalidConfig("pseudo-prior size does not match the catalog")
        self.pseudo = pseudo

    # posterior pieces ---------------------------------------------------

    def member_prior_rows(self, m1, r, age):
        lp = log_mass_prior(m1) + log_ratio_prior(r)
        if self.wd_exclusion:
            excl = wd_binary_excluded(m1, r, age, self.table)
            if np.any(excl):
                lp = np.where(excl, -np.inf, lp)
        return lp

    def field_prior_rows(self, m1, r):
        if self.pseudo is None:
            return log_mass_prior(m1) + log_ratio_prior(r)
        return self.pseudo.log_density(m1, r)

    def theta_log_prior(self, age, feh, heh, dm, av) -> float:
        return log_cluster_prior(ClusterParams(age, feh, heh, dm, av), self.prior_spec)

    def predict(self, age, feh, dm, av, m1, r):
        """(gabs, ok, cl) at one cluster-parameter point; cl rows are -inf
        outside the table domain or above a bracketing track maximum.
        One entry of (m1, r) per catalog star."""
        n = len(m1)
        if n != self.n_stars:
            raise InvalidConfig("predict needs one (m1, r) pair per star")
        if not self.table.in_domain(age, feh):
            return np.zeros((n, self.flat.node_mag.shape[1])), np.zeros(n, dtype=bool), np.full(n, -np.inf)
        lane = active_lane()
        gabs, ok = lane.predict_absolute(*self.flat, feh, age, m1, r)
        cl = lane.gauss_rows(self.xfill, self.inv2var, self.gauss_const, gabs, dm, av, self.kappa)
        if not ok.all():
            cl = np.where(ok, cl, -np.inf)
        return gabs, ok, cl

    def gauss_only(self, gabs, ok, domain_ok, dm, av):
        """Re-evaluate the Gaussian rows for new (dm, av) with cached
        absolute magnitudes."""
        if not domain_ok:
            return np.full(len(gabs), -np.inf)
        cl = active_lane().gauss_rows(self.xfill, self.inv2var, self.gauss_const, gabs, dm, av, self.kappa)
        if not ok.all():
            cl = np.where(ok, cl, -np.inf)
        return cl


@dataclass
class ChainState:
    """Current chain position in transformed coordinates plus caches of
    everything the posterior needs (natural masses/absorption, combined
    absolute magnitudes, per-star log-density rows)."""

    u: np.ndarray
    r: np.ndarray
    z: np.ndarray
    age: float
    feh: float
    heh: float
    dm: float
    v: float
    # caches (populated by Model.refresh / incremental updates)
    m1: np.ndarray = field(default=None, repr=False)
    av: float = 0.0
    domain_ok: bool = True
    gabs: np.ndarray = field(default=None, repr=False)
    ok: np.ndarray = field(default=None, repr=False)
    cl: np.ndarray = field(default=None, repr=False)
    lp1: np.ndarray = field(default=None, repr=False)
    lp0: np.ndarray = field(default=None, repr=False)
    theta_lp: float = 0.0

    def theta(self) -> ClusterParams:
        return ClusterParams(self.age, self.feh, self.heh, self.dm, self.av)

    def pieces(self, model: Model) -> np.ndarray:
        zb = self.z.astype(bool)
        return np.where(
            zb,
            self.cl + self.lp1 + model.log_pm1,
            model.log_f0 + self.lp0 + model.log_pm0,
        )

    def log_post(self, model: Model) -> float:
        return float(np.sum(self.pieces(model)) + self.theta_lp)

    def copy(self) -> "ChainState":
        out = replace(self)
        for name in ("u", "r", "z", "m1", "gabs", "ok", "cl", "lp1", "lp0"):
            arr = getattr(self, name)
            if arr is not None:
                setattr(out, name, arr.copy())
        return out


def refresh(model: Model, state: ChainState) -> ChainState:
    """Rebuild every cache of ``state`` from its coordinates."""
    spec = model.transform
    state.m1 = state.u + spec.mass_offset(state.r, state.age, state.feh, state.dm)
    state.av = float(state.v + spec.av_offset(state.feh, state.dm))
    state.domain_ok = model.table.in_domain(state.age, state.feh)
    state.gabs, state.ok, state.cl = model.predict(
        state.age, state.feh, state.dm, state.av, state.m1, state.r
    )
    state.lp1 = model.member_prior_rows(state.m1, state.r, state.age)
    state.lp0 = model.field_prior_rows(state.m1, state.r)
    state.theta_lp = model.theta_log_prior(state.age, state.feh, state.heh, state.dm, state.av)
    return state


def initial_state(model: Model, theta0: ClusterParams, z0=None) -> ChainState:
    """Deterministic starting point.

    Masses: for each star, the table node (from the tracks bracketing the
    initial age/metallicity) whose single-star predicted magnitude in the
    star's brightest observed filter is nearest the observation. Ratios
    start at 0, memberships at the supplied vector or at
    pmember >= 0.5.
    """
    theta0.validate()
    if not model.table.in_domain(theta0.theta_age, theta0.theta_feh):
        raise InvalidConfig("initial age/feh outside the table grid")
    n = model.n_stars

    # candidate masses: nodes of the bracketing tracks, clipped to the prior
    flat = model.flat
    from ._core.py_kernels import _bracket  # shared bracketing helper

    f0, f1, _ = _bracket(flat.feh_grid, theta0.theta_feh)
    a0, a1, _ = _bracket(flat.age_grid, theta0.theta_age)
    n_age = len(flat.age_grid)
    nodes = []
    for fi in (f0, f1):
        for aj in (a0, a1):
            cell = fi * n_age + aj
            off, ln = int(flat.cell_offset[cell]), int(flat.cell_len[cell])
            nodes.append(flat.node_mass[off : off + ln])
    cand = np.unique(np.concatenate(nodes))
    cand = cand[(cand >= MASS_LO) & (cand <= MASS_HI)]
    if len(cand) == 0:
        cand = np.array([1.0])

    lane = active_lane()
    gabs, ok = lane.predict_absolute(
        *model.flat, theta0.theta_feh, theta0.theta_age, cand, np.zeros(len(cand))
    )
    cand, gabs = cand[ok], gabs[ok]
    if len(cand) == 0:
        raise InvalidConfig("no usable mass nodes at the initial age/metallicity")
    mu = gabs + theta0.theta_dm + model.kappa * theta0.theta_av  # (n_cand, nf)
    m1 = np.empty(n)
    x = model.catalog.x
    for i in range(n):
        jstar = int(np.nanargmin(x[i]))
        m1[i] = cand[np.argmin(np.abs(mu[:, jstar] - x[i, jstar]))]

    if z0 is None:
        z = (model.pmember >= 0.5).astype(np.int8)
    else:
        z = np.asarray(z0, dtype=np.int8)
        if z.shape != (n,) or np.any((z != 0) & (z != 1)):
            raise InvalidConfig("z0 must be a vector of 0/1 per star")
    r = np.zeros(n)
    u, v = from_natural(m1, r, theta0, model.transform)
    state = ChainState(u=u, r=r, z=z, age=theta0.theta_age, feh=theta0.theta_feh,
                       heh=theta0.theta_heh, dm=theta0.theta_dm, v=v)
    return refresh(model, state)


# ---------------------------------------------------------------------------
# Updates
# ---------------------------------------------------------------------------


def _z_flip_delta(model: Model, state: ChainState) -> np.ndarray:
    """Per-star log posterior change of flipping each membership bit."""
    piece1 = state.cl + state.lp1 + model.log_pm1
    piece0 = model.log_f0 + state.lp0 + model.log_pm0
    zb = state.z.astype(bool)
    return np.where(zb, piece0 - piece1, piece1 - piece0)


def update_membership(model: Model, state: ChainState, i: int, uniform_draw: float) -> bool:
    """Propose flipping star ``i``'s membership; returns True on accept.

    The acceptance ratio holds (m1, r) fixed and compares likelihood times
    the normalized branch prior times the membership prior across the two
    branches; caches stay valid because no continuous coordinate moves.
    """
    delta = float(_z_flip_delta(model, state)[i])
    if delta == float("-inf"):
        return False
    if math.log(uniform_draw) < delta:
        state.z[i] = 1 - state.z[i]
        return True
    return False


def _star_pass(model: Model, state: ChainState, rng, steps: StepSizes, key: str, adapt: bool):
    """One vectorized Metropolis pass over all stars' u (or ratio)
    coordinates; per-star terms are disjoint so simultaneous independent
    accept/reject equals a sequential scan."""
    n = model.n_stars
    widths = steps.u if key == "u" else steps.r
    d = rng.uniform(-1.0, 1.0, n) * widths
    unif = rng.random(n)
    spec = model.transform

    if key == "u":
        u_new, r_new = state.u + d, state.r
    else:
        u_new = state.u
        r_new = reflect(state.r + d, 0.0, 1.0)
    m1_new = u_new + spec.mass_offset(r_new, state.age, state.feh, state.dm)

    if state.domain_ok:
        lane = active_lane()
        gabs_new, ok_new = lane.predict_absolute(*model.flat, state.feh, state.age, m1_new, r_new)
        cl_new = lane.gauss_rows(
            model.xfill, model.inv2var, model.gauss_const, gabs_new, state.dm, state.av, model.kappa
        )
        if not ok_new.all():
            cl_new = np.where(ok_new, cl_new, -np.inf)
    else:
        gabs_new = state.gabs
        ok_new = state.ok
        cl_new = np.full(n, -np.inf)
    lp1_new = model.member_prior_rows(m1_new, r_new, state.age)
    lp0_new = model.field_prior_rows(m1_new, r_new)

    zb = state.z.astype(bool)
    piece_old = np.where(zb, state.cl + state.lp1, model.log_f0 + state.lp0)
    piece_new = np.where(zb, cl_new + lp1_new, model.log_f0 + lp0_new)
    with np.errstate(invalid="ignore"):
        delta = piece_new - piece_old
    acc = np.log(unif) < delta  # -inf delta rejects; NaN compares False

    if np.any(acc):
        if key == "u":
            state.u[acc] = u_new[acc]
        else:
            state.r[acc] = r_new[acc]
        state.m1[acc] = m1_new[acc]
        if state.domain_ok:
            state.gabs[acc] = gabs_new[acc]
            state.ok[acc] = ok_new[acc]
        state.cl[acc] = cl_new[acc]
        state.lp1[acc] = lp1_new[acc]
        state.lp0[acc] = lp0_new[acc]
    steps.record_stars(key, acc, adapt)
    return int(np.sum(acc))


def _theta_update(model: Model, state: ChainState, rng, steps: StepSizes, key: str, adapt: bool) -> bool:
    w = steps.theta[key]
    d = rng.uniform(-w, w)
    unif = rng.random()
    spec = model.transform

    age, feh, heh, dm, v = state.age, state.feh, state.heh, state.dm, state.v
    if key == "age":
        age = reflect(age + d, AGE_LO, AGE_HI)
    elif key == "feh":
        feh = feh + d
    elif key == "heh":
        heh = heh + d
    elif key == "dm":
        dm = dm + d
    else:
        v = v + d

    cur_lp = state.log_post(model)

    if key == "heh":
        theta_lp = model.theta_log_prior(age, feh, heh, dm, state.av)
        new_lp = cur_lp - state.theta_lp + theta_lp
        if metropolis_accept(new_lp, cur_lp, unif):
            state.heh = heh
            state.theta_lp = theta_lp
            steps.record_theta(key, True, adapt)
            return True
        steps.record_theta(key, False, adapt)
        return False

    if key == "v":
        av = float(v + spec.av_offset(feh, dm))
        theta_lp = model.theta_log_prior(age, feh, heh, dm, av)
        if theta_lp == float("-inf"):
            steps.record_theta(key, False, adapt)
            return False
        cl = model.gauss_only(state.gabs, state.ok, state.domain_ok, dm, av)
        zb = state.z.astype(bool)
        pieces = np.where(zb, cl + state.lp1 + model.log_pm1,
                          model.log_f0 + state.lp0 + model.log_pm0)
        new_lp = float(np.sum(pieces) + theta_lp)
        if metropolis_accept(new_lp, cur_lp, unif):
            state.v, state.av, state.cl, state.theta_lp = v, av, cl, theta_lp
            steps.record_theta(key, True, adapt)
            return True
        steps.record_theta(key, False, adapt)
        return False

    # age / feh / dm: full recompute
    m1 = state.u + spec.mass_offset(state.r, age, feh, dm)
    av = float(v + spec.av_offset(feh, dm))
    theta_lp = model.theta_log_prior(age, feh, heh, dm, av)
    if theta_lp == float("-inf"):
        steps.record_theta(key, False, adapt)
        return False
    gabs, ok, cl = model.predict(age, feh, dm, av, m1, state.r)
    lp1 = model.member_prior_rows(m1, state.r, age)
    lp0 = model.field_prior_rows(m1, state.r)
    zb = state.z.astype(bool)
    pieces = np.where(zb, cl + lp1 + model.log_pm1, model.log_f0 + lp0 + model.log_pm0)
    new_lp = float(np.sum(pieces) + theta_lp)
    if metropolis_accept(new_lp, cur_lp, unif):
        state.age, state.feh, state.heh, state.dm, state.v = age, feh, heh, dm, v
        state.m1, state.av = m1, av
        state.domain_ok = model.table.in_domain(age, feh)
        state.gabs, state.ok, state.cl = gabs, ok, cl
        state.lp1, state.lp0, state.theta_lp = lp1, lp0, theta_lp
        steps.record_theta(key, True, adapt)
        return True
    steps.record_theta(key, False, adapt)
    return False


def gibbs_sweep(
    model: Model,
    state: ChainState,
    rng: np.random.Generator,
    steps: StepSizes,
    update_z: bool = False,
    adapt: bool = False,
    pinned=frozenset(),
    counters=None,
):
    """One full scan: star coordinates, cluster coordinates, memberships.

    ``pinned`` names cluster coordinates excluded from updating (used when
    a tuning run conditions on fixed values). ``counters`` is an optional
    dict accumulating (proposals, accepts) per proposal type.
    """
    n = model.n_stars
    na = _star_pass(model, state, rng, steps, "u", adapt)
    if counters is not None:
        counters.add("u", n, na)
    na = _star_pass(model, state, rng, steps, "r", adapt)
    if counters is not None:
        counters.add("r", n, na)
    for key in THETA_KEYS:
        if key in pinned:
            continue
        accepted = _theta_update(model, state, rng, steps, key, adapt)
        if counters is not None:
            counters.add(key, 1, int(accepted))
    if update_z:
        unif = rng.random(n)
        delta = _z_flip_delta(model, state)
        with np.errstate(invalid="ignore"):
            acc = np.log(unif) < delta
        if np.any(acc):
            state.z[acc] = 1 - state.z[acc]
        if counters is not None:
            counters.add("z", n, int(np.sum(acc)))
    return state


# ---------------------------------------------------------------------------
# Chain driver
# ---------------------------------------------------------------------------


class _Counters:
    def __init__(self):
        self.proposals = {}
        self.accepts = {}

    def add(self, key, nprop, nacc):
        self.proposals[key] = self.proposals.get(key, 0) + nprop
        self.accepts[key] = self.accepts.get(key, 0) + nacc

    def rates(self):
        return {
            k: (self.accepts.get(k, 0) / p if p else float("nan"))
            for k, p in self.proposals.items()
        }


@dataclass
class BlockRecord:
    """Thinned draws of one sampling block. Cluster coordinates are always
    recorded; per-star draws when requested."""

    age: np.ndarray
    feh: np.ndarray
    heh: np.ndarray
    dm: np.ndarray
    av: np.ndarray
    v: np.ndarray
    logpost: np.ndarray
    u: Optional[np.ndarray] = None
    r: Optional[np.ndarray] = None
    m1: Optional[np.ndarray] = None
    z: Optional[np.ndarray] = None
    accept_rates: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.age)


class SamplerRuntime:
    """One chain: model + state + step sizes + RNG stream."""

    def __init__(self, model: Model, state: ChainState, steps: StepSizes, rng: np.random.Generator):
        self.model = model
        self.state = state
        self.steps = steps
        self.rng = rng

    def run_block(
        self,
        n_sweeps: int,
        thin: int = 1,
        update_z: bool = False,
        adapt: bool = False,
        pinned=frozenset(),
        record_stars: bool = True,
    ) -> BlockRecord:
        """Run ``n_sweeps`` full scans, keeping every ``thin``-th state
        (the state after sweep k is kept when k % thin == 0, k starting
        at 1). Aborts when the starting log posterior is -inf."""
        if n_sweeps < 0 or thin < 1:
            raise InvalidConfig("need n_sweeps >= 0 and thin >= 1")
        model, state = self.model, self.state
        start_lp = state.log_post(model)
        if start_lp == float("-inf"):
            raise InvalidConfig("log posterior is -inf at the starting state")
        counters = _Counters()
        n_keep = n_sweeps // thin
        n = model.n_stars
        rec = BlockRecord(
            *(np.empty(n_keep) for _ in range(7)),
            u=np.empty((n_keep, n)) if record_stars else None,
            r=np.empty((n_keep, n)) if record_stars else None,
            m1=np.empty((n_keep, n)) if record_stars else None,
            z=np.empty((n_keep, n), dtype=np.int8) if record_stars else None,
        )
        k = 0
        for sweep in range(1, n_sweeps + 1):
            gibbs_sweep(model, state, self.rng, self.steps, update_z=update_z,
                        adapt=adapt, pinned=pinned, counters=counters)
            if sweep % thin == 0:
                rec.age[k] = state.age
                rec.feh[k] = state.feh
                rec.heh[k] = state.heh
                rec.dm[k] = state.dm
                rec.av[k] = state.av
                rec.v[k] = state.v
                rec.logpost[k] = state.log_post(model)
                if record_stars:
                    rec.u[k] = state.u
                    rec.r[k] = state.r
                    rec.m1[k] = state.m1
                    rec.z[k] = state.z
                k += 1
        rec.accept_rates = counters.rates()
        return rec


def run_chain(
    model: Model,
    state: ChainState,
    steps: StepSizes,
    rng: np.random.Generator,
    n_draws: int,
    thin: int = 1,
    update_z: bool = True,
    record_stars: bool = True,
) -> BlockRecord:
    """Main sampling run: frozen step widths, memberships sampled unless
    disabled. Deterministic given the RNG state."""
    runtime = SamplerRuntime(model, state, steps, rng)
    return runtime.run_block(
        n_draws, thin=thin, update_z=update_z, adapt=False, record_stars=record_stars
    )
