"""Prior densities: the truncated log-normal initial-mass prior, the flat
mass-ratio prior, Gaussian cluster-parameter priors (log-normal for the
absorption), membership priors, and the per-star truncated t pseudo-prior
assigned to the masses of stars while they are classified as field stars.

All log densities are properly normalized over their stated supports, so
membership flips can compare the two branches directly. The mass prior is
a density with respect to mass itself (not its log), hence the
1/(m ln 10) change-of-variable factor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, ndtr
from scipy.stats import t as student_t

from .errors import DegenerateSample, InvalidConfig
from .stellar_model import ClusterParams, IsochroneTable

__all__ = [
    "MASS_LO",
    "MASS_HI",
    "AGE_LO",
    "AGE_HI",
    "ClusterPriorSpec",
    "PseudoPriorSpec",
    "log_mass_prior",
    "log_ratio_prior",
    "log_cluster_prior",
    "log_membership_prior",
    "fit_pseudo_prior",
    "log_state_prior",
    "wd_binary_excluded",
    "sample_mass_prior",
]

_LN10 = math.log(10.0)
_LOG_2PI = math.log(2.0 * math.pi)

# Log-normal initial-mass-function fit: mean and SD of log10(M/Msun).
IMF_LOG10_MEAN = -1.02
IMF_LOG10_SD = 0.677

# Truncation range of the primary mass (solar masses): below ~0.1 Msun no
# hydrogen burning starts; above ~8 Msun the star is long gone.
MASS_LO = 0.1
MASS_HI = 8.0

# Fixed flat prior window on log10 age.
AGE_LO = 8.0
AGE_HI = 9.7

# Mass of the log10-normal inside the truncation window.
_MASS_TRUNC_NORM = float(
    ndtr((math.log10(MASS_HI) - IMF_LOG10_MEAN) / IMF_LOG10_SD)
    - ndtr((math.log10(MASS_LO) - IMF_LOG10_MEAN) / IMF_LOG10_SD)
)

# Student-t with 6 degrees of freedom, standardized form.
T_DF = 6.0
_LOG_T6_CONST = float(
    gammaln((T_DF + 1.0) / 2.0) - gammaln(T_DF / 2.0) - 0.5 * math.log(T_DF * math.pi)
)


def log_mass_prior(m1):
    """Normalized log density of the primary-mass prior on [0.1, 8] Msun.

    Gaussian in log10 mass with the initial-mass-function constants,
    truncated and expressed as a density over mass. -inf outside the range.
    Vectorized over ``m1``.
    """
    m = np.asarray(m1, dtype=float)
    scalar = m.ndim == 0
    m = np.atleast_1d(m)
    out = np.full(m.shape, -np.inf)
    ok = (m >= MASS_LO) & (m <= MASS_HI)
    if np.any(ok):
        z = (np.log10(m[ok]) - IMF_LOG10_MEAN) / IMF_LOG10_SD
        out[ok] = (
            -0.5 * z * z
            - 0.5 * _LOG_2PI
            - math.log(IMF_LOG10_SD)
            - np.log(m[ok] * _LN10)
            - math.log(_MASS_TRUNC_NORM)
        )
    return float(out[0]) if scalar else out


def log_ratio_prior(r):
    """Uniform prior on the unit interval for the mass ratio."""
    r = np.asarray(r, dtype=float)
    out = np.where((r >= 0.0) & (r <= 1.0), 0.0, -np.inf)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class ClusterPriorSpec:
    """Gaussian (mean, sd) priors for metallicity, helium, distance modulus
    and the natural log of the absorption; the age prior is flat on the
    fixed window [8.0, 9.7] in log10 years."""

    feh: tuple
    heh: tuple
    dm: tuple
    log_av: tuple

    def __post_init__(self):
        for name in ("feh", "heh", "dm", "log_av"):
            mean, sd = getattr(self, name)
            if not (math.isfinite(mean) and sd > 0):
                raise InvalidConfig(f"{name} prior needs finite mean and sd > 0")


def _normal_logpdf(x, mean, sd):
    z = (x - mean) / sd
    return -0.5 * z * z - 0.5 * _LOG_2PI - math.log(sd)


def log_cluster_prior(theta: ClusterParams, spec: ClusterPriorSpec) -> float:
    """Joint log prior density of the five cluster parameters."""
    if not (AGE_LO <= theta.theta_age <= AGE_HI):
        return float("-inf")
    if not (theta.theta_av > 0):
        return float("-inf")
    lp = _normal_logpdf(theta.theta_feh, *spec.feh)
    lp += _normal_logpdf(theta.theta_heh, *spec.heh)
    lp += _normal_logpdf(theta.theta_dm, *spec.dm)
    # log-normal absorption: Gaussian in ln(av) plus the 1/av Jacobian
    lp += _normal_logpdf(math.log(theta.theta_av), *spec.log_av) - math.log(theta.theta_av)
    return float(lp)


def log_membership_prior(z, p):
    """z*log(p) + (1-z)*log(1-p), with the 0*log(0) conventions."""
    if not (0.0 <= p <= 1.0):
        raise InvalidConfig("membership probability must be in [0, 1]")
    if z == 1:
        return math.log(p) if p > 0 else float("-inf")
    return math.log1p(-p) if p < 1 else float("-inf")


def _t6_log_density(x, loc, scale, lo, hi, log_trunc):
    """Truncated location-scale t6 log density; array-friendly."""
    z = (x - loc) / scale
    out = (
        _LOG_T6_CONST
        - 0.5 * (T_DF + 1.0) * np.log1p(z * z / T_DF)
        - np.log(scale)
        - log_trunc
    )
    return np.where((x >= lo) & (x <= hi), out, -np.inf)


def _t6_log_trunc(loc, scale, lo, hi):
    return np.log(
        student_t.cdf((hi - loc) / scale, T_DF) - student_t.cdf((lo - loc) / scale, T_DF)
    )


@dataclass(frozen=True)
class PseudoPriorSpec:
    """Per-star independent truncated t6 densities on (m1, r), used as the
    proper prior for the masses of stars currently classified as field
    stars. Normalization constants are precomputed at construction."""

    m1_loc: np.ndarray
    m1_scale: np.ndarray
    r_loc: np.ndarray
    r_scale: np.ndarray
    log_trunc_m1: np.ndarray = field(init=False)
    log_trunc_r: np.ndarray = field(init=False)

    def __post_init__(self):
        for name in ("m1_loc", "m1_scale", "r_loc", "r_scale"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        if not (self.m1_loc.shape == self.m1_scale.shape == self.r_loc.shape == self.r_scale.shape):
            raise InvalidConfig("pseudo-prior parameter arrays must share a shape")
        if np.any(self.m1_scale <= 0) or np.any(self.r_scale <= 0):
            raise InvalidConfig("pseudo-prior scales must be > 0")
        lt_m = _t6_log_trunc(self.m1_loc, self.m1_scale, MASS_LO, MASS_HI)
        lt_r = _t6_log_trunc(self.r_loc, self.r_scale, 0.0, 1.0)
        if np.any(~np.isfinite(lt_m)) or np.any(~np.isfinite(lt_r)):
            raise InvalidConfig("pseudo-prior normalization is not finite")
        object.__setattr__(self, "log_trunc_m1", lt_m)
        object.__setattr__(self, "log_trunc_r", lt_r)

    def __len__(self):
        return len(self.m1_loc)

    def log_density(self, m1, r, star=None):
        """Joint log density of (m1, r); vectorized across stars when
        ``star`` is None (inputs then align with the spec arrays)."""
        idx = slice(None) if star is None else star
        lp_m = _t6_log_density(
            m1, self.m1_loc[idx], self.m1_scale[idx], MASS_LO, MASS_HI, self.log_trunc_m1[idx]
        )
        lp_r = _t6_log_density(
            r, self.r_loc[idx], self.r_scale[idx], 0.0, 1.0, self.log_trunc_r[idx]
        )
        return lp_m + lp_r


def fit_pseudo_prior(m1_draws, r_draws) -> PseudoPriorSpec:
    """Fit the per-star pseudo-prior from sampled (m1, r) draws.

    Location is the sample mean; scale is the sample SD shrunk by
    sqrt((df-2)/df) so the untruncated t6 variance matches the sample
    variance. Draw matrices have shape (n_draws, n_stars).
    """
    m1_draws = np.atleast_2d(np.asarray(m1_draws, dtype=float))
    r_draws = np.atleast_2d(np.asarray(r_draws, dtype=float))
    if m1_draws.shape != r_draws.shape:
        raise InvalidConfig("m1 and r draw matrices must have the same shape")
    if m1_draws.shape[0] < 10:
        raise DegenerateSample("need at least 10 draws per star")
    sd_m = np.std(m1_draws, axis=0, ddof=1)
    sd_r = np.std(r_draws, axis=0, ddof=1)
    if np.any(sd_m == 0) or np.any(sd_r == 0):
        raise DegenerateSample("zero sample variance; cannot fit a scale")
    shrink = math.sqrt((T_DF - 2.0) / T_DF)
    return PseudoPriorSpec(
        m1_loc=np.mean(m1_draws, axis=0),
        m1_scale=sd_m * shrink,
        r_loc=np.mean(r_draws, axis=0),
        r_scale=sd_r * shrink,
    )


def wd_binary_excluded(m1, r, theta_age, table: IsochroneTable):
    """True where a member state pairs a white-dwarf primary with a real
    secondary (>= 0.1 Msun); such binaries are outside the model.

    Requires the table to carry a main-sequence lifetime rule; without one
    the exclusion is inactive.
    """
    rule = table.ms_lifetime
    if rule is None:
        return np.zeros(np.shape(m1), dtype=bool) if np.ndim(m1) else False
    m1 = np.asarray(m1, dtype=float)
    r = np.asarray(r, dtype=float)
    out = rule.is_white_dwarf(m1, theta_age) & (r * m1 >= MASS_LO)
    return bool(out) if out.ndim == 0 else out


def log_state_prior(state, pseudo, theta: ClusterParams, table: IsochroneTable, star: int = 0) -> float:
    """Log prior of one star's (m1, r) given its membership indicator.

    Members get the mass prior times the flat ratio prior, with white-dwarf
    binaries excluded; field stars get the star's pseudo-prior (or, before
    one has been fitted, the same density as the member branch, which is a
    valid proper choice). Both branches are normalized, so membership flips
    can use their ratio directly.
    """
    if state.z == 1:
        if wd_binary_excluded(state.m1, state.r, theta.theta_age, table):
            return float("-inf")
        return float(log_mass_prior(state.m1) + log_ratio_prior(state.r))
    if pseudo is None:
        return float(log_mass_prior(state.m1) + log_ratio_prior(state.r))
    return float(pseudo.log_density(state.m1, state.r, star=star))


def sample_mass_prior(rng: np.random.Generator, size: int) -> np.ndarray:
    """Draw primary masses from the truncated mass prior (inverse CDF)."""
    from scipy.special import ndtri

    lo = ndtr((math.log10(MASS_LO) - IMF_LOG10_MEAN) / IMF_LOG10_SD)
    hi = ndtr((math.log10(MASS_HI) - IMF_LOG10_MEAN) / IMF_LOG10_SD)
    u = rng.uniform(lo, hi, size)
    return 10.0 ** (IMF_LOG10_MEAN + IMF_LOG10_SD * ndtri(u))
