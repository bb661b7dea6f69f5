"""The initial-run schedule that calibrates the sampler.

Two passes of seven runs each (memberships held fixed in the first pass,
sampled in the second): a burn-in, four regression runs that estimate the
transform slopes (mass residual on ratio, then on age with the other
cluster parameters pinned at their current estimates, then on distance
modulus, then on metallicity, with absorption-residual regressions riding
along on the last two), a run whose draws fit the field-star pseudo-prior
moments, and a pure step-width fine-tuning run. Step widths adapt
continuously throughout and are frozen afterwards; slopes that are
insignificant (or conflict with a configured expected sign) are zeroed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConstantPredictor, DegenerateSample, InvalidConfig, ParseError
from .priors import PseudoPriorSpec, fit_pseudo_prior
from .sampler import (
    THETA_KEYS,
    ChainState,
    Model,
    SamplerRuntime,
    StepSizes,
    TransformSpec,
    from_natural,
    refresh,
)
from .stellar_model import ClusterParams

__all__ = [
    "TuningConfig",
    "recentered_slope",
    "zero_rule",
    "run_tuning_schedule",
    "save_tuning",
    "load_tuning",
]

COEFFICIENTS = ("beta_r", "beta_age", "beta_feh", "beta_dm", "gamma_feh", "gamma_dm")


@dataclass(frozen=True)
class TuningConfig:
    """Knobs of the schedule; defaults follow the standard recipe
    (30k burn-in, 10k per initial run, regressions on every 50th draw,
    2-standard-error significance gate, no sign gating)."""

    burn_in_draws: int = 30000
    initial_run_draws: int = 10000
    regression_thin: int = 50
    zero_threshold: float = 2.0
    expected_signs: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.burn_in_draws <= 0 or self.initial_run_draws <= 0 or self.regression_thin <= 0:
            raise InvalidConfig("tuning draw counts must be positive")
        if self.regression_thin >= self.initial_run_draws:
            raise InvalidConfig("regression thin must be smaller than the run length")
        if self.zero_threshold < 0:
            raise InvalidConfig("zero threshold must be >= 0")
        bad = set(self.expected_signs) - set(COEFFICIENTS)
        if bad:
            raise InvalidConfig(f"unknown expected-sign keys: {sorted(bad)}")
        for k, v in self.expected_signs.items():
            if v not in (-1, 1):
                raise InvalidConfig(f"expected sign for {k} must be -1 or +1")


def recentered_slope(y, x):
    """OLS slope (and its standard error) of y on the recentered predictor
    x - mean(x), with an intercept."""
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    n = len(y)
    if n < 3 or len(x) != n:
        raise InvalidConfig("need >= 3 paired draws")
    xc = x - np.mean(x)
    sxx = float(np.sum(xc * xc))
    if sxx == 0.0:
        raise ConstantPredictor("predictor draws are constant")
    slope = float(np.dot(xc, y) / sxx)
    resid = y - np.mean(y) - slope * xc
    rss = float(np.sum(resid * resid))
    se = math.sqrt(max(rss, 0.0) / (n - 2) / sxx)
    return slope, se


def zero_rule(slope, se, expected_sign=None, threshold: float = 2.0):
    """Zero out slopes that are statistically insignificant or disagree
    with an expected sign; otherwise pass the slope through."""
    if se < 0:
        raise InvalidConfig("standard error must be >= 0")
    if abs(slope) < threshold * se:
        return 0.0
    if expected_sign is not None and slope != 0.0 and (1 if slope > 0 else -1) != expected_sign:
        return 0.0
    return slope


def _slope_se_inflation(x, resid, max_lag=50):
    """Bartlett-style variance inflation for an OLS slope computed on
    autocorrelated draws: 1 + 2 * sum of rho_x(k) * rho_e(k). Thinned
    chain draws are far from independent, and the plain OLS standard
    error would wave spurious slopes through the significance gate."""
    from .diagnostics import autocorrelations

    rx = autocorrelations(x, max_lag)
    re_ = autocorrelations(resid, max_lag)
    k = min(len(rx), len(re_))
    return math.sqrt(max(1.0, 1.0 + 2.0 * float(np.sum(rx[:k] * re_[:k]))))


def _gated_increment(y, x, cfg: TuningConfig, coef: str):
    try:
        slope, se = recentered_slope(y, x)
    except ConstantPredictor:
        return 0.0
    xc = x - np.mean(x)
    resid = y - np.mean(y) - slope * xc
    se_eff = se * _slope_se_inflation(x, resid)
    return zero_rule(slope, se_eff, expected_sign=cfg.expected_signs.get(coef),
                     threshold=cfg.zero_threshold)


def _per_star_increments(u_draws, x_draws, cfg: TuningConfig, coef: str):
    """Gated regression increments of each star's u draws on a predictor;
    x_draws is (k,) for a shared cluster predictor or (k, n) per star."""
    k, n = u_draws.shape
    out = np.zeros(n)
    for i in range(n):
        x = x_draws if x_draws.ndim == 1 else x_draws[:, i]
        out[i] = _gated_increment(u_draws[:, i], x, cfg, coef)
    return out


def _scalar_increment(v_draws, x_draws, cfg: TuningConfig, coef: str):
    return _gated_increment(v_draws, x_draws, cfg, coef)


def _fit_pseudo_floored(m1_draws, r_draws, m1_floor=0.05, r_floor=0.05) -> PseudoPriorSpec:
    """Pseudo-prior from per-star moments, with a small scale floor so a
    star whose draws happened not to move (short runs, hard-stuck ratio)
    still gets a proper, usable density."""
    shrink = math.sqrt(4.0 / 6.0)
    m1_sd = np.maximum(np.std(m1_draws, axis=0, ddof=1), m1_floor)
    r_sd = np.maximum(np.std(r_draws, axis=0, ddof=1), r_floor)
    return PseudoPriorSpec(
        m1_loc=np.mean(m1_draws, axis=0),
        m1_scale=m1_sd * shrink,
        r_loc=np.mean(r_draws, axis=0),
        r_scale=r_sd * shrink,
    )


def _install_transform(runtime: SamplerRuntime, spec: TransformSpec):
    """Swap the transform while keeping the natural-space state fixed."""
    st = runtime.state
    theta = ClusterParams(st.age, st.feh, st.heh, st.dm, st.av)
    st.u, st.v = from_natural(st.m1, st.r, theta, spec)
    runtime.model.set_transform(spec)
    refresh(runtime.model, st)


def _pin_cluster_values(runtime: SamplerRuntime, feh, heh, dm, av) -> bool:
    """Move the chain to the given cluster values (clamped into the table
    domain), preserving the natural masses, ready for a run that holds
    them fixed. Returns False (and restores the previous position) when
    the posterior is degenerate there, so the caller can run unpinned."""
    st = runtime.state
    model = runtime.model
    grid = model.table.feh_grid
    feh = min(max(feh, float(grid[0])), float(grid[-1]))
    saved = st.copy()
    theta = ClusterParams(st.age, feh, heh, dm, av)
    st.feh, st.heh, st.dm = feh, heh, dm
    st.u, st.v = from_natural(st.m1, st.r, theta, model.transform)
    refresh(model, st)
    if st.log_post(model) == float("-inf"):
        runtime.state = saved
        return False
    return True


def _run(runtime, label, draws, thin, update_z, adapt=True, pinned=frozenset(), record=True, progress=None):
    if progress:
        progress(f"{label}: {draws} draws" + (f", pinned={sorted(pinned)}" if pinned else ""))
    try:
        return runtime.run_block(
            draws, thin=thin, update_z=update_z, adapt=adapt, pinned=pinned, record_stars=record
        )
    except InvalidConfig as exc:
        raise InvalidConfig(f"{label} aborted: {exc}") from exc


def run_tuning_schedule(runtime: SamplerRuntime, cfg: TuningConfig = TuningConfig(), progress=None):
    """Execute both tuning passes; returns (TransformSpec, PseudoPriorSpec,
    StepSizes) with the step widths frozen at their final values.

    The runtime's model and state are updated in place; the chain ends
    positioned where the main run should start.
    """
    model = runtime.model
    draws, thin = cfg.initial_run_draws, cfg.regression_thin

    for pass_idx, sample_z in enumerate((False, True)):
        tag = f"pass {pass_idx + 1}"
        _run(runtime, f"{tag} burn-in", cfg.burn_in_draws, cfg.burn_in_draws, sample_z,
             record=False, progress=progress)

        # ratio slopes
        rec = _run(runtime, f"{tag} run 1 (ratio)", draws, thin, sample_z, progress=progress)
        spec = model.transform
        spec = replace(
            spec,
            beta_r=spec.beta_r + _per_star_increments(rec.u, rec.r, cfg, "beta_r"),
            r_hat=np.mean(rec.r, axis=0),
        )
        _install_transform(runtime, spec)
        best = {
            "feh": float(np.mean(rec.feh)),
            "heh": float(np.mean(rec.heh)),
            "dm": float(np.mean(rec.dm)),
            "av": float(np.mean(rec.av)),
        }

        # age slopes, other cluster parameters held at their estimates
        pinned_ok = _pin_cluster_values(runtime, best["feh"], best["heh"], best["dm"], best["av"])
        if not pinned_ok and progress:
            progress(f"{tag} run 2: pinned values degenerate, running unpinned")
        rec = _run(runtime, f"{tag} run 2 (age)", draws, thin, sample_z,
                   pinned=frozenset({"feh", "heh", "dm", "v"}) if pinned_ok else frozenset(),
                   progress=progress)
        spec = model.transform
        spec = replace(
            spec,
            beta_age=spec.beta_age + _per_star_increments(rec.u, rec.age, cfg, "beta_age"),
            age_hat=float(np.mean(rec.age)),
        )
        _install_transform(runtime, spec)

        # distance-modulus slopes
        rec = _run(runtime, f"{tag} run 3 (distance modulus)", draws, thin, sample_z, progress=progress)
        spec = model.transform
        spec = replace(
            spec,
            beta_dm=spec.beta_dm + _per_star_increments(rec.u, rec.dm, cfg, "beta_dm"),
            gamma_dm=spec.gamma_dm + _scalar_increment(rec.v, rec.dm, cfg, "gamma_dm"),
            dm_hat=float(np.mean(rec.dm)),
        )
        _install_transform(runtime, spec)

        # metallicity slopes
        rec = _run(runtime, f"{tag} run 4 (metallicity)", draws, thin, sample_z, progress=progress)
        spec = model.transform
        spec = replace(
            spec,
            beta_feh=spec.beta_feh + _per_star_increments(rec.u, rec.feh, cfg, "beta_feh"),
            gamma_feh=spec.gamma_feh + _scalar_increment(rec.v, rec.feh, cfg, "gamma_feh"),
            feh_hat=float(np.mean(rec.feh)),
        )
        _install_transform(runtime, spec)

        # pseudo-prior moments for field-star masses
        rec = _run(runtime, f"{tag} run 5 (pseudo-prior)", draws, thin, sample_z, progress=progress)
        try:
            pseudo = fit_pseudo_prior(rec.m1, rec.r)
        except DegenerateSample:
            pseudo = _fit_pseudo_floored(rec.m1, rec.r)
        model.set_pseudo(pseudo)
        refresh(model, runtime.state)

        # step fine-tuning only; its draws refresh the anchors
        rec = _run(runtime, f"{tag} run 6 (step tuning)", draws, thin, sample_z, progress=progress)
        spec = model.transform
        spec = replace(
            spec,
            r_hat=np.mean(rec.r, axis=0),
            age_hat=float(np.mean(rec.age)),
            feh_hat=float(np.mean(rec.feh)),
            dm_hat=float(np.mean(rec.dm)),
        )
        _install_transform(runtime, spec)

    return model.transform, model.pseudo, runtime.steps


# ---------------------------------------------------------------------------
# Persistence of the tuned artifact (key = value text, arrays as
# comma-joined floats in catalog order)
# ---------------------------------------------------------------------------


def _fmt_arr(a):
    return ",".join(repr(float(v)) for v in np.asarray(a, dtype=float))


def save_tuning(path, transform: TransformSpec, pseudo, steps: StepSizes) -> None:
    lines = [
        "# tuned sampler artifact",
        f"n_stars = {transform.n_stars()}",
        f"gamma_feh = {transform.gamma_feh!r}",
        f"gamma_dm = {transform.gamma_dm!r}",
        f"age_hat = {transform.age_hat!r}",
        f"feh_hat = {transform.feh_hat!r}",
        f"dm_hat = {transform.dm_hat!r}",
        f"beta_r = {_fmt_arr(transform.beta_r)}",
        f"beta_age = {_fmt_arr(transform.beta_age)}",
        f"beta_feh = {_fmt_arr(transform.beta_feh)}",
        f"beta_dm = {_fmt_arr(transform.beta_dm)}",
        f"r_hat = {_fmt_arr(transform.r_hat)}",
        f"step_u = {_fmt_arr(steps.u)}",
        f"step_r = {_fmt_arr(steps.r)}",
    ]
    for key in THETA_KEYS:
        lines.append(f"step_{key} = {steps.theta[key]!r}")
    lines.append(f"has_pseudo = {'true' if pseudo is not None else 'false'}")
    if pseudo is not None:
        lines += [
            f"pseudo_m1_loc = {_fmt_arr(pseudo.m1_loc)}",
            f"pseudo_m1_scale = {_fmt_arr(pseudo.m1_scale)}",
            f"pseudo_r_loc = {_fmt_arr(pseudo.r_loc)}",
            f"pseudo_r_scale = {_fmt_arr(pseudo.r_scale)}",
        ]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_tuning(path):
    """Inverse of :func:`save_tuning`; returns (transform, pseudo, steps)."""
    kv = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ParseError("expected 'key = value'", line=lineno)
            key, _, val = line.partition("=")
            kv[key.strip()] = val.strip()

    def arr(key):
        return np.array([float(t) for t in kv[key].split(",")])

    try:
        n = int(kv["n_stars"])
        transform = TransformSpec(
            beta_r=arr("beta_r"),
            beta_age=arr("beta_age"),
            beta_feh=arr("beta_feh"),
            beta_dm=arr("beta_dm"),
            gamma_feh=float(kv["gamma_feh"]),
            gamma_dm=float(kv["gamma_dm"]),
            r_hat=arr("r_hat"),
            age_hat=float(kv["age_hat"]),
            feh_hat=float(kv["feh_hat"]),
            dm_hat=float(kv["dm_hat"]),
        )
        steps = StepSizes(n)
        steps.u = arr("step_u")
        steps.r = arr("step_r")
        for key in THETA_KEYS:
            steps.theta[key] = float(kv[f"step_{key}"])
        pseudo = None
        if kv.get("has_pseudo") == "true":
            pseudo = PseudoPriorSpec(
                m1_loc=arr("pseudo_m1_loc"),
                m1_scale=arr("pseudo_m1_scale"),
                r_loc=arr("pseudo_r_loc"),
                r_scale=arr("pseudo_r_scale"),
            )
    except KeyError as exc:
        raise ParseError(f"missing key {exc}", line=1) from exc
    if transform.n_stars() != n:
        raise ParseError("inconsistent n_stars", line=1)
    return transform, pseudo, steps
