"""Posterior summaries and chain-health reports: moments, central
quantiles, autocorrelations, effective sample size, per-star membership
probabilities with membership-conditional mass summaries, and the
faint-magnitude-cut sweep."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import InsufficientStars, InvalidConfig
from .likelihood import PhotometryCatalog
from .sampler import BlockRecord

__all__ = [
    "ParamSummary",
    "StarSummary",
    "ChainSummary",
    "summarize",
    "autocorrelations",
    "effective_sample_size",
    "magnitude_cut_sweep",
    "summary_to_csv",
    "membership_to_csv",
    "read_summary_csv",
    "sweep_to_csv",
]

QUANTILES = (0.025, 0.16, 0.50, 0.84, 0.975)
MAX_LAG = 50

CLUSTER_PARAM_NAMES = ("theta_age", "theta_feh", "theta_heh", "theta_dm", "theta_av")
_REC_FIELD = {"theta_age": "age", "theta_feh": "feh", "theta_heh": "heh",
              "theta_dm": "dm", "theta_av": "av"}


def autocorrelations(x, max_lag: int = MAX_LAG) -> np.ndarray:
    """Sample autocorrelations rho_1..rho_K (K = min(max_lag, n-1)).

    A zero-variance chain gets all-zero autocorrelations by convention.
    """
    x = np.asarray(x, dtype=float)
    n = len(x)
    if n < 2:
        raise InvalidConfig("need at least 2 draws")
    k_max = min(max_lag, n - 1)
    xc = x - np.mean(x)
    denom = float(np.dot(xc, xc))
    if denom == 0.0:
        return np.zeros(k_max)
    return np.array([float(np.dot(xc[:-k], xc[k:])) / denom for k in range(1, k_max + 1)])


def effective_sample_size(x, max_lag: int = MAX_LAG) -> float:
    """ESS via the initial-positive-sequence rule: sum paired
    autocorrelations (rho_2m-1 + rho_2m) until the first negative pair,
    then n / (1 + 2 * sum of the kept autocorrelations). Capped at n."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    rho = autocorrelations(x, max_lag)
    acc = 0.0
    k = 0
    while k + 1 < len(rho):
        pair = rho[k] + rho[k + 1]
        if pair <= 0.0:
            break
        acc += pair
        k += 2
    tau = 1.0 + 2.0 * acc
    return float(min(n, n / max(tau, 1.0)))


@dataclass(frozen=True)
class ParamSummary:
    mean: float
    sd: float
    quantiles: tuple
    lag1: float
    ess: float
    acf: np.ndarray = field(repr=False, default=None)


@dataclass(frozen=True)
class StarSummary:
    star_id: str
    p_member: float
    m1_mean: float
    m1_sd: float
    r_mean: float
    r_sd: float
    n_member_draws: int


@dataclass
class ChainSummary:
    n_draws: int
    params: dict
    accept_rates: dict
    stars: list
    empty_conditional_ids: list


def _param_summary(x) -> ParamSummary:
    x = np.asarray(x, dtype=float)
    acf = autocorrelations(x)
    return ParamSummary(
        mean=float(np.mean(x)),
        sd=float(np.std(x, ddof=1)),
        quantiles=tuple(float(q) for q in np.quantile(x, QUANTILES)),
        lag1=float(acf[0]) if len(acf) else 0.0,
        ess=effective_sample_size(x),
        acf=acf,
    )


def summarize(record: BlockRecord, star_ids=None) -> ChainSummary:
    """Standard chain summaries of the cluster parameters plus, when the
    record carries per-star draws, membership probabilities and mass
    summaries conditional on membership.

    Stars with no member-classified draws are reported in
    ``empty_conditional_ids`` (their conditional columns become NaN)
    rather than failing the whole summary.
    """
    if len(record) < 2:
        raise InvalidConfig("need at least 2 retained draws")
    params = {
        name: _param_summary(getattr(record, _REC_FIELD[name])) for name in CLUSTER_PARAM_NAMES
    }
    params["logpost"] = _param_summary(record.logpost)

    stars = []
    empty = []
    if record.z is not None:
        n = record.z.shape[1]
        ids = list(star_ids) if star_ids is not None else [f"star{i}" for i in range(n)]
        for i in range(n):
            member = record.z[:, i] == 1
            p = float(np.mean(member))
            k = int(np.sum(member))
            if k == 0:
                empty.append(ids[i])
                stars.append(StarSummary(ids[i], p, math.nan, math.nan, math.nan, math.nan, 0))
                continue
            m1 = record.m1[member, i]
            r = record.r[member, i]
            stars.append(
                StarSummary(
                    ids[i],
                    p,
                    float(np.mean(m1)),
                    float(np.std(m1, ddof=1)) if k > 1 else 0.0,
                    float(np.mean(r)),
                    float(np.std(r, ddof=1)) if k > 1 else 0.0,
                    k,
                )
            )
    return ChainSummary(
        n_draws=len(record),
        params=params,
        accept_rates=dict(record.accept_rates),
        stars=stars,
        empty_conditional_ids=empty,
    )


def magnitude_cut_sweep(
    catalog: PhotometryCatalog,
    cuts,
    filter_name: str,
    fit_fn: Callable[[PhotometryCatalog, int], ChainSummary],
    base_seed: int = 0,
):
    """Re-fit after dropping stars observed fainter than each threshold in
    the given filter (stars missing that filter are kept). Each entry runs
    with the derived seed base_seed + cut_index. Returns a list of
    (cut, n_stars, ChainSummary)."""
    try:
        j = catalog.filter_names.index(filter_name)
    except ValueError:
        raise InvalidConfig(f"unknown filter {filter_name!r}") from None
    out = []
    for idx, cut in enumerate(cuts):
        with np.errstate(invalid="ignore"):
            keep = ~(catalog.x[:, j] > cut)  # NaN compares False -> kept
        sub = catalog.subset(keep)
        if len(sub) < 2:
            raise InsufficientStars(f"cut {cut} leaves {len(sub)} stars")
        out.append((float(cut), len(sub), fit_fn(sub, base_seed + idx)))
    return out


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------

_SUMMARY_HEADER = ["parameter", "mean", "sd", "q2.5", "q16", "q50", "q84", "q97.5", "ess", "lag1"]


def summary_to_csv(summary: ChainSummary, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_SUMMARY_HEADER)
        for name in CLUSTER_PARAM_NAMES:
            p = summary.params[name]
            row = [name, repr(p.mean), repr(p.sd)]
            row += [repr(q) for q in p.quantiles]
            row += [repr(p.ess), repr(p.lag1)]
            w.writerow(row)


def read_summary_csv(path) -> dict:
    out = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            out[row["parameter"]] = {k: float(v) for k, v in row.items() if k != "parameter"}
    return out


def membership_to_csv(summary: ChainSummary, path) -> None:
    def fmt(v):
        return "NA" if (isinstance(v, float) and math.isnan(v)) else repr(float(v))

    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "p_member_posterior", "m1_mean", "m1_sd", "r_mean", "r_sd"])
        for s in summary.stars:
            w.writerow([s.star_id, fmt(s.p_member), fmt(s.m1_mean), fmt(s.m1_sd),
                        fmt(s.r_mean), fmt(s.r_sd)])


def sweep_to_csv(entries, path) -> None:
    """One row per (cut, parameter): posterior mean and SD, the data
    behind depth-sensitivity plots."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cut", "n_stars", "parameter", "mean", "sd"])
        for cut, n_stars, summary in entries:
            for name in CLUSTER_PARAM_NAMES:
                p = summary.params[name]
                w.writerow([repr(cut), n_stars, name, repr(p.mean), repr(p.sd)])
