"""Photometric likelihood: Gaussian measurement errors around the model
prediction for cluster members, binary-luminosity combination, a uniform
magnitude density for field stars, and the two-component mixture total.

Missing (star, filter) cells are encoded as NaN in the catalog arrays and
are skipped both in the Gaussian product and in the field-star support
checks.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from ._core import active_lane
from .errors import DegenerateRange, InvalidConfig, OutOfRange, ParseError
from .stellar_model import ClusterParams, IsochroneTable, to_apparent

__all__ = [
    "PhotometryCatalog",
    "FieldRanges",
    "StarState",
    "combine_binary",
    "predicted_magnitudes",
    "cluster_log_density",
    "field_log_density",
    "total_log_likelihood",
    "read_photometry_csv",
    "write_photometry_csv",
]

_LN10 = math.log(10.0)
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class StarState:
    """Per-star sampling state: primary mass (Msun), secondary-to-primary
    mass ratio in [0, 1], and the cluster-membership indicator."""

    m1: float
    r: float
    z: int

    def validate(self):
        if not (self.m1 > 0):
            raise InvalidConfig("m1 must be > 0")
        if not (0.0 <= self.r <= 1.0):
            raise InvalidConfig("r must be in [0, 1]")
        if self.z not in (0, 1):
            raise InvalidConfig("z must be 0 or 1")
        return self

    @property
    def m2(self) -> float:
        return self.r * self.m1


class PhotometryCatalog:
    """Observed magnitudes and known measurement SDs, one row per star.

    ``x`` and ``sigma`` are (N, n_filters) arrays with NaN marking missing
    cells; ``pmember`` holds prior cluster-membership probabilities with
    NaN meaning "not supplied" (a configured default is applied when the
    model is assembled).
    """

    def __init__(self, star_ids, filter_names, x, sigma, pmember):
        self.star_ids = list(star_ids)
        self.filter_names = tuple(filter_names)
        self.x = np.asarray(x, dtype=float)
        self.sigma = np.asarray(sigma, dtype=float)
        self.pmember = np.asarray(pmember, dtype=float)
        n, nf = len(self.star_ids), len(self.filter_names)
        if len(set(self.star_ids)) != n:
            raise InvalidConfig("star ids must be unique")
        if self.x.shape != (n, nf) or self.sigma.shape != (n, nf):
            raise InvalidConfig("x and sigma must be (n_stars, n_filters)")
        if self.pmember.shape != (n,):
            raise InvalidConfig("pmember must have one entry per star")
        miss = np.isnan(self.x)
        if np.any(np.isnan(self.sigma) != miss):
            raise InvalidConfig("sigma must be missing exactly where x is missing")
        if np.any(self.sigma[~miss] <= 0):
            raise InvalidConfig("sigma must be > 0 wherever observed")
        if n and np.any(miss.all(axis=1)):
            raise InvalidConfig("every star needs at least one observed filter")
        with np.errstate(invalid="ignore"):
            bad = ~np.isnan(self.pmember) & ((self.pmember < 0) | (self.pmember > 1))
        if np.any(bad):
            raise InvalidConfig("pmember must lie in [0, 1]")

    def __len__(self):
        return len(self.star_ids)

    @property
    def n_filters(self):
        return len(self.filter_names)

    @property
    def missing(self):
        return np.isnan(self.x)

    def subset(self, keep) -> "PhotometryCatalog":
        """New catalog with the boolean/index selection ``keep`` applied."""
        keep = np.asarray(keep)
        idx = np.flatnonzero(keep) if keep.dtype == bool else keep
        return PhotometryCatalog(
            [self.star_ids[i] for i in idx],
            self.filter_names,
            self.x[idx],
            self.sigma[idx],
            self.pmember[idx],
        )


@dataclass(frozen=True)
class FieldRanges:
    """Per-filter (min, max) magnitude bounds of the uniform field model."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise DegenerateRange("lo/hi must be matching 1-d arrays")
        if np.any(~np.isfinite(lo)) or np.any(~np.isfinite(hi)) or np.any(hi <= lo):
            raise DegenerateRange("each filter needs max > min")

    @classmethod
    def from_catalog(cls, catalog: PhotometryCatalog, pad_sigma: bool = True) -> "FieldRanges":
        """Data min/max per filter, widened by that filter's largest
        measurement SD on each side so every observed star stays inside
        the support."""
        x, s = catalog.x, catalog.sigma
        if np.any(np.all(np.isnan(x), axis=0)):
            raise DegenerateRange("a filter with no observations has no data range")
        lo = np.nanmin(x, axis=0)
        hi = np.nanmax(x, axis=0)
        if pad_sigma:
            pad = np.nanmax(s, axis=0)
            lo = lo - pad
            hi = hi + pad
        if np.any(hi <= lo):
            # all stars identical in some filter and pad disabled
            raise DegenerateRange("degenerate data range; supply explicit bounds")
        return cls(lo, hi)

    @property
    def log_widths(self):
        return np.log(self.hi - self.lo)


def combine_binary(g1, g2):
    """Magnitudes of the summed luminosity of two components.

    +infinity encodes zero luminosity, so ``combine_binary(g, inf) == g``
    exactly. Computed as min - 2.5*log10(1 + 10**(-|g1-g2|/2.5)) to stay
    stable for faint magnitudes.
    """
    g1 = np.asarray(g1, dtype=float)
    g2 = np.asarray(g2, dtype=float)
    mn = np.minimum(g1, g2)
    with np.errstate(invalid="ignore"):
        d = np.abs(g1 - g2)
        out = mn - (2.5 / _LN10) * np.log1p(np.exp(-d * (_LN10 / 2.5)))
    # both infinite: keep +inf (zero total luminosity), avoid inf-inf NaN
    out = np.where(np.isinf(mn), mn, out)
    return out if out.ndim else float(out)


def predicted_magnitudes(state: StarState, theta: ClusterParams, table: IsochroneTable) -> np.ndarray:
    """Apparent magnitudes of a (possibly binary) system, combining the
    interpolated component magnitudes and applying distance modulus and
    absorption."""
    if not table.in_domain(theta.theta_age, theta.theta_feh):
        raise OutOfRange(
            f"(age={theta.theta_age}, feh={theta.theta_feh}) outside the table grid"
        )
    m1 = np.array([state.m1], dtype=float)
    r = np.array([state.r], dtype=float)
    gabs, ok = active_lane().predict_absolute(
        *table.flat(), theta.theta_feh, theta.theta_age, m1, r
    )
    if not ok[0]:
        raise OutOfRange(f"primary mass {state.m1} above a bracketing track maximum")
    return to_apparent(gabs[0], theta.theta_dm, theta.theta_av, table.filters)


def cluster_log_density(x_i, sigma_i, mu_i) -> float:
    """Gaussian log density of the observed magnitudes around the model
    prediction, summed over the star's non-missing filters."""
    x_i = np.asarray(x_i, dtype=float)
    sigma_i = np.asarray(sigma_i, dtype=float)
    mu_i = np.asarray(mu_i, dtype=float)
    m = ~np.isnan(x_i)
    if not np.any(m):
        return 0.0
    var = sigma_i[m] ** 2
    resid = x_i[m] - mu_i[m]
    return float(np.sum(-0.5 * (_LOG_2PI + np.log(var)) - resid * resid / (2.0 * var)))


def field_log_density(x_i, ranges: FieldRanges) -> float:
    """Log of the uniform field-star density; -inf outside the support.

    Missing filters contribute neither a width factor nor a support check.
    """
    x_i = np.asarray(x_i, dtype=float)
    m = ~np.isnan(x_i)
    if np.any((x_i[m] < ranges.lo[m]) | (x_i[m] > ranges.hi[m])):
        return float("-inf")
    return float(-np.sum(ranges.log_widths[m]))


def total_log_likelihood(catalog, states, theta, table, ranges) -> float:
    """Mixture log likelihood over all stars, with membership indicators
    selecting the cluster or field term per star.

    Reference implementation built from the public per-star operations;
    the sampler uses the cached kernel path, which is tested against this.
    """
    total = 0.0
    for i, st in enumerate(states):
        if st.z == 1:
            mu = predicted_magnitudes(st, theta, table)
            total += cluster_log_density(catalog.x[i], catalog.sigma[i], mu)
        else:
            total += field_log_density(catalog.x[i], ranges)
    return total


# ---------------------------------------------------------------------------
# Photometry CSV
# ---------------------------------------------------------------------------
#
# Header: id,pmember,<filter>_mag,<filter>_sd,...  one row per star,
# missing values as the token NA. Lines starting with '#' are comments.

_NA = "NA"


def _expected_header(filter_names):
    cols = ["id", "pmember"]
    for f in filter_names:
        cols += [f"{f}_mag", f"{f}_sd"]
    return cols


def read_photometry_csv(path) -> PhotometryCatalog:
    """Parse a photometry CSV; errors cite row and column."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        rows = [
            (lineno, row)
            for lineno, row in enumerate(csv.reader(fh), start=1)
            if row and not row[0].lstrip().startswith("#")
        ]
    if not rows:
        raise ParseError("empty photometry file", line=1)
    header_line, header = rows[0]
    header = [h.strip() for h in header]
    if len(header) < 4 or header[0] != "id" or header[1] != "pmember":
        raise ParseError("header must start with id,pmember", line=header_line)
    mag_cols = header[2:]
    if len(mag_cols) % 2:
        raise ParseError("filters need paired <name>_mag,<name>_sd columns", line=header_line)
    filter_names = []
    for k in range(0, len(mag_cols), 2):
        a, b = mag_cols[k], mag_cols[k + 1]
        if not a.endswith("_mag") or b != a[: -len("_mag")] + "_sd":
            raise ParseError(f"bad filter column pair {a!r},{b!r}", line=header_line)
        filter_names.append(a[: -len("_mag")])

    ids, xs, sds, pms = [], [], [], []
    for lineno, row in rows[1:]:
        if len(row) != len(header):
            raise ParseError(
                f"expected {len(header)} fields, got {len(row)}", line=lineno
            )
        ids.append(row[0].strip())
        pm_txt = row[1].strip()
        try:
            pms.append(float("nan") if pm_txt == _NA else float(pm_txt))
        except ValueError:
            raise ParseError(f"bad pmember value {pm_txt!r}", line=lineno, column=2) from None
        xrow, srow = [], []
        for k, txt in enumerate(row[2:], start=3):
            txt = txt.strip()
            try:
                xrow.append(float("nan") if txt == _NA else float(txt))
            except ValueError:
                raise ParseError(
                    f"bad numeric value {txt!r} in column {header[k - 1]!r}",
                    line=lineno,
                    column=k,
                ) from None
        xs.append(xrow[0::2])
        sds.append(xrow[1::2])
    try:
        return PhotometryCatalog(ids, filter_names, np.array(xs), np.array(sds), np.array(pms))
    except InvalidConfig as exc:
        raise ParseError(str(exc), line=rows[-1][0]) from exc


def write_photometry_csv(catalog: PhotometryCatalog, path, header_comments=()) -> None:
    """Emit a catalog in the CSV layout accepted by read_photometry_csv."""

    def fmt(v):
        return _NA if (isinstance(v, float) and math.isnan(v)) else repr(float(v))

    with open(path, "w", encoding="utf-8", newline="") as fh:
        for c in header_comments:
            fh.write(f"# {c}\n")
        w = csv.writer(fh)
        w.writerow(_expected_header(catalog.filter_names))
        for i, sid in enumerate(catalog.star_ids):
            row = [sid, fmt(float(catalog.pmember[i]))]
            for j in range(catalog.n_filters):
                row.append(fmt(float(catalog.x[i, j])))
                row.append(fmt(float(catalog.sigma[i, j])))
            w.writerow(row)
