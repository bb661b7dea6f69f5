"""Configuration parsing, run orchestration, persistence, and the
command-line interface.

Configuration files are `key = value` lines with `#` comment lines;
unknown keys are rejected with their line number. Every run writes a
manifest (resolved config, input checksums, versions) sufficient to
reproduce it bit for bit. The output directory can be overridden with the
CMDFIT_OUTPUT_DIR environment variable; everything else comes from the
config file and flags.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from ._core import BACKEND
from .diagnostics import (
    CLUSTER_PARAM_NAMES,
    magnitude_cut_sweep,
    membership_to_csv,
    summarize,
    summary_to_csv,
    sweep_to_csv,
)
from .errors import (
    CmdfitError,
    DegenerateRange,
    InsufficientStars,
    InvalidConfig,
    ParseError,
    TooLarge,
    ValidationError,
)
from .likelihood import (
    FieldRanges,
    PhotometryCatalog,
    read_photometry_csv,
    write_photometry_csv,
)
from .priors import ClusterPriorSpec
from .sampler import BlockRecord, Model, SamplerRuntime, StepSizes, initial_state, run_chain
from .stellar_model import (
    ClusterParams,
    IsochroneTable,
    MainSequenceLifetime,
    read_isochrone_table,
)
from .synthetic import (
    DiscretizedInstance,
    brute_force_posterior,
    generate_cluster,
    pseudo_prior_invariance_check,
    run_grid_sampler,
    three_star_fixture,
    two_star_fixture,
    write_truth_csv,
)
from .tuning import TuningConfig, run_tuning_schedule, save_tuning

__all__ = ["RunConfig", "parse_config", "emit_config", "load_config", "main", "cli_dispatch"]


# ---------------------------------------------------------------------------
# RunConfig
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    # paths
    table_path: str = ""
    photometry_path: str = ""
    output_dir: str = "cmdfit-run"
    # sampling
    seed: int = 0
    chains: int = 1
    burn_in: int = 30000
    tuning_draws: int = 10000
    tuning_thin: int = 50
    main_draws: int = 10000
    main_thin: int = 1
    zero_threshold: float = 2.0
    sample_membership: bool = True
    per_star_output: bool = False
    # priors
    feh_prior_mean: float = 0.0
    feh_prior_sd: float = 0.3
    heh_prior_mean: float = 0.0
    heh_prior_sd: float = 0.3
    dm_prior_mean: float = 0.0
    dm_prior_sd: float = 1.0
    log_av_prior_mean: float = math.log(0.1)
    log_av_prior_sd: float = 1.0
    default_pmember: float = 0.5
    # starting point
    init_age: float = 9.0
    init_feh: float = 0.0
    init_heh: float = 0.0
    init_dm: float = 0.0
    init_av: float = 0.1
    # white-dwarf binary policy
    wd_exclusion: bool = True
    attach_wd_lifetime: bool = False
    wd_lifetime_c0: float = 10.0
    wd_lifetime_c1: float = -2.5
    # proposal widths
    step_u: float = 0.1
    step_r: float = 0.1
    step_age: float = 0.05
    step_feh: float = 0.05
    step_heh: float = 0.05
    step_dm: float = 0.1
    step_v: float = 0.05
    # expected signs of transform slopes (0 = no gate)
    expected_sign_beta_r: int = 0
    expected_sign_beta_age: int = 0
    expected_sign_beta_feh: int = 0
    expected_sign_beta_dm: int = 0
    expected_sign_gamma_feh: int = 0
    expected_sign_gamma_dm: int = 0
    # magnitude cut / sweep
    max_mag_filter: str = ""
    max_mag_value: float = math.inf
    sweep_filter: str = ""
    sweep_cuts: tuple = ()
    # synthetic generation
    sim_n_cluster: int = 100
    sim_n_field: int = 20
    sim_binary_fraction: float = 0.5
    sim_noise_sd: float = 0.03
    sim_field_sep_sigma: float = 0.0
    sim_field_lo: tuple = ()
    sim_field_hi: tuple = ()
    true_age: float = 9.0
    true_feh: float = 0.0
    true_heh: float = 0.0
    true_dm: float = 0.0
    true_av: float = 0.1


def _parse_bool(s: str) -> bool:
    if s == "true":
        return True
    if s == "false":
        return False
    raise ValueError("expected true or false")


def _parse_floats_tuple(s: str) -> tuple:
    s = s.strip()
    if not s:
        return ()
    return tuple(float(t) for t in s.split(","))


_PARSERS = {int: int, float: float, str: lambda s: s, bool: _parse_bool, tuple: _parse_floats_tuple}


def _field_types():
    return {f.name: f.type for f in dataclasses.fields(RunConfig)}


def parse_config(text: str) -> RunConfig:
    """Parse `key = value` configuration text into a validated RunConfig."""
    values = {}
    types = _field_types()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError("expected 'key = value'", line=lineno)
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if key not in types:
            raise ParseError(f"unknown key {key!r}", line=lineno)
        if key in values:
            raise ParseError(f"duplicate key {key!r}", line=lineno)
        type_name = types[key]
        pytype = {"int": int, "float": float, "str": str, "bool": bool, "tuple": tuple}[
            type_name if isinstance(type_name, str) else type_name.__name__
        ]
        try:
            values[key] = _PARSERS[pytype](val)
        except ValueError as exc:
            raise ValidationError(str(exc) or f"bad value {val!r}", field=key) from None
    config = RunConfig(**values)
    validate_config(config)
    return config


def validate_config(config: RunConfig) -> RunConfig:
    def require(cond, field, msg):
        if not cond:
            raise ValidationError(msg, field=field)

    for f in ("burn_in", "tuning_draws", "tuning_thin", "main_draws", "main_thin", "chains"):
        require(getattr(config, f) > 0, f, "must be positive")
    require(config.tuning_thin < config.tuning_draws, "tuning_thin", "must be < tuning_draws")
    require(config.main_thin <= config.main_draws, "main_thin", "must be <= main_draws")
    for f in ("feh_prior_sd", "heh_prior_sd", "dm_prior_sd", "log_av_prior_sd"):
        require(getattr(config, f) > 0, f, "must be > 0")
    require(0.0 <= config.default_pmember <= 1.0, "default_pmember", "must be in [0, 1]")
    require(config.init_av > 0, "init_av", "must be > 0")
    require(0.0 <= config.sim_binary_fraction <= 1.0, "sim_binary_fraction", "must be in [0, 1]")
    require(config.sim_noise_sd > 0, "sim_noise_sd", "must be > 0")
    require(config.sim_n_cluster >= 0 and config.sim_n_field >= 0, "sim_n_cluster", "counts must be >= 0")
    require(config.zero_threshold >= 0, "zero_threshold", "must be >= 0")
    for f in ("step_u", "step_r", "step_age", "step_feh", "step_heh", "step_dm", "step_v"):
        require(getattr(config, f) > 0, f, "must be > 0")
    for f in (
        "expected_sign_beta_r", "expected_sign_beta_age", "expected_sign_beta_feh",
        "expected_sign_beta_dm", "expected_sign_gamma_feh", "expected_sign_gamma_dm",
    ):
        require(getattr(config, f) in (-1, 0, 1), f, "must be -1, 0, or +1")
    for f in ("table_path", "photometry_path"):
        p = getattr(config, f)
        require(not p or os.path.exists(p), f, f"path does not exist: {p}")
    return config


def emit_config(config: RunConfig) -> str:
    """Canonical text form; parse_config(emit_config(c)) == c."""
    lines = []
    for f in dataclasses.fields(RunConfig):
        v = getattr(config, f.name)
        if isinstance(v, bool):
            txt = "true" if v else "false"
        elif isinstance(v, float):
            txt = repr(v)
        elif isinstance(v, tuple):
            txt = ",".join(repr(float(t)) for t in v)
        else:
            txt = str(v)
        lines.append(f"{f.name} = {txt}")
    return "\n".join(lines) + "\n"


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


# ---------------------------------------------------------------------------
# Pipeline pieces
# ---------------------------------------------------------------------------


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, config: RunConfig, inputs: dict) -> None:
    """Config snapshot + input checksums + versions; no timestamps, so two
    identical runs produce identical manifests."""
    lines = [
        "# cmdfit run manifest",
        f"cmdfit_version = {__version__}",
        f"kernel_backend = {BACKEND}",
        f"numpy_version = {np.__version__}",
    ]
    for name, p in sorted(inputs.items()):
        lines.append(f"sha256_{name} = {_sha256(p)}")
    body = "\n".join(lines) + "\n# resolved configuration\n" + emit_config(config)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(body)


def load_table_for_config(config: RunConfig) -> IsochroneTable:
    table = read_isochrone_table(config.table_path)
    if table.ms_lifetime is None and config.attach_wd_lifetime:
        table.ms_lifetime = MainSequenceLifetime(config.wd_lifetime_c0, config.wd_lifetime_c1)
    return table


def apply_max_mag(config: RunConfig, catalog: PhotometryCatalog) -> PhotometryCatalog:
    if not config.max_mag_filter or math.isinf(config.max_mag_value):
        return catalog
    try:
        j = catalog.filter_names.index(config.max_mag_filter)
    except ValueError:
        raise ValidationError(f"unknown filter {config.max_mag_filter!r}", field="max_mag_filter") from None
    with np.errstate(invalid="ignore"):
        keep = ~(catalog.x[:, j] > config.max_mag_value)
    return catalog.subset(keep)


def prior_spec_from_config(config: RunConfig) -> ClusterPriorSpec:
    return ClusterPriorSpec(
        feh=(config.feh_prior_mean, config.feh_prior_sd),
        heh=(config.heh_prior_mean, config.heh_prior_sd),
        dm=(config.dm_prior_mean, config.dm_prior_sd),
        log_av=(config.log_av_prior_mean, config.log_av_prior_sd),
    )


def theta0_from_config(config: RunConfig) -> ClusterParams:
    return ClusterParams(config.init_age, config.init_feh, config.init_heh,
                         config.init_dm, config.init_av)


def tuning_config_from_config(config: RunConfig) -> TuningConfig:
    signs = {}
    for coef in ("beta_r", "beta_age", "beta_feh", "beta_dm", "gamma_feh", "gamma_dm"):
        v = getattr(config, f"expected_sign_{coef}")
        if v:
            signs[coef] = v
    return TuningConfig(
        burn_in_draws=config.burn_in,
        initial_run_draws=config.tuning_draws,
        regression_thin=config.tuning_thin,
        zero_threshold=config.zero_threshold,
        expected_signs=signs,
    )


def steps_from_config(config: RunConfig, n_stars: int) -> StepSizes:
    return StepSizes(
        n_stars,
        u=config.step_u, r=config.step_r, age=config.step_age,
        feh=config.step_feh, heh=config.step_heh, dm=config.step_dm, v=config.step_v,
    )


def fit_single_chain(config: RunConfig, table, catalog, seed: int, progress=None):
    """Tune then sample one chain; returns (record, model, tuned triple)."""
    model = Model(
        table, catalog, prior_spec_from_config(config),
        default_pmember=config.default_pmember, wd_exclusion=config.wd_exclusion,
    )
    state = initial_state(model, theta0_from_config(config))
    steps = steps_from_config(config, len(catalog))
    rng = np.random.default_rng(seed)
    runtime = SamplerRuntime(model, state, steps, rng)
    transform, pseudo, steps = run_tuning_schedule(
        runtime, tuning_config_from_config(config), progress=progress
    )
    record = run_chain(
        model, state, steps, rng,
        config.main_draws, thin=config.main_thin,
        update_z=config.sample_membership, record_stars=True,
    )
    return record, model, (transform, pseudo, steps)


def fit_summary_fn(config: RunConfig, table):
    """Catalog -> summary closure used by the magnitude-cut sweep."""

    def fit_fn(catalog, seed):
        record, _, _ = fit_single_chain(config, table, catalog, seed)
        return summarize(record, star_ids=catalog.star_ids)

    return fit_fn


# ---------------------------------------------------------------------------
# Chain CSV
# ---------------------------------------------------------------------------

_CHAIN_HEADER = ["iter", "logpost", "theta_age", "theta_feh", "theta_heh", "theta_dm", "theta_av"]


def write_chain_csv(path, record: BlockRecord, star_ids, thin: int, per_star: bool) -> None:
    header = list(_CHAIN_HEADER)
    if per_star and record.z is not None:
        for sid in star_ids:
            header += [f"Z_{sid}", f"M1_{sid}", f"R_{sid}"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for k in range(len(record)):
            row = [
                str(thin * (k + 1)),
                repr(float(record.logpost[k])),
                repr(float(record.age[k])),
                repr(float(record.feh[k])),
                repr(float(record.heh[k])),
                repr(float(record.dm[k])),
                repr(float(record.av[k])),
            ]
            if per_star and record.z is not None:
                for i in range(len(star_ids)):
                    row += [
                        str(int(record.z[k, i])),
                        repr(float(record.m1[k, i])),
                        repr(float(record.r[k, i])),
                    ]
            w.writerow(row)


def read_chain_csv(path):
    """Parse a chain CSV back into (BlockRecord, star_ids); star arrays are
    present only when the file carries per-star columns."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if not rows:
        raise ParseError("empty chain file", line=1)
    header = rows[0]
    if header[: len(_CHAIN_HEADER)] != _CHAIN_HEADER:
        raise ParseError("unexpected chain header", line=1)
    star_ids = []
    extra = header[len(_CHAIN_HEADER):]
    if extra:
        if len(extra) % 3:
            raise ParseError("per-star columns must come in Z,M1,R triplets", line=1)
        for k in range(0, len(extra), 3):
            zc, mc, rc = extra[k: k + 3]
            if not (zc.startswith("Z_") and mc == f"M1_{zc[2:]}" and rc == f"R_{zc[2:]}"):
                raise ParseError(f"bad per-star column triplet at {zc!r}", line=1)
            star_ids.append(zc[2:])
    data = np.array([[float(v) for v in row] for row in rows[1:]], dtype=float)
    if data.size == 0:
        raise ParseError("chain file has no draws", line=2)
    n = len(star_ids)
    rec = BlockRecord(
        age=data[:, 2], feh=data[:, 3], heh=data[:, 4], dm=data[:, 5], av=data[:, 6],
        v=data[:, 6].copy(), logpost=data[:, 1],
    )
    if n:
        block = data[:, len(_CHAIN_HEADER):]
        rec.z = block[:, 0::3].astype(np.int8)
        rec.m1 = block[:, 1::3]
        rec.r = block[:, 2::3]
        rec.u = rec.m1.copy()
    return rec, (star_ids if n else None)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _resolve_outdir(config: RunConfig, args) -> Path:
    out = os.environ.get("CMDFIT_OUTPUT_DIR") or getattr(args, "out", None) or config.output_dir
    config.output_dir = str(out)
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _config_from_args(args) -> RunConfig:
    config = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    if getattr(args, "chains", None) is not None:
        config.chains = args.chains
    if getattr(args, "per_star", False):
        config.per_star_output = True
    if getattr(args, "max_mag", None):
        config.max_mag_filter = args.max_mag[0]
        try:
            config.max_mag_value = float(args.max_mag[1])
        except ValueError:
            raise ValidationError("max-mag value must be numeric", field="max_mag_value") from None
    if getattr(args, "table", None):
        config.table_path = args.table
    if getattr(args, "photometry", None):
        config.photometry_path = args.photometry
    validate_config(config)
    return config


def cmd_fit(args) -> int:
    config = _config_from_args(args)
    if not config.table_path:
        raise ValidationError("required for fit", field="table_path")
    if not config.photometry_path:
        raise ValidationError("required for fit", field="photometry_path")
    outdir = _resolve_outdir(config, args)
    table = load_table_for_config(config)
    catalog = apply_max_mag(config, read_photometry_csv(config.photometry_path))
    if len(catalog) < 2:
        raise InsufficientStars(f"{len(catalog)} stars after the magnitude cut")

    progress = (lambda msg: print(f"  {msg}")) if not args.quiet else None
    chain_means = {}
    for k in range(config.chains):
        seed = config.seed + k
        print(f"chain {k}: seed {seed}")
        record, model, (transform, pseudo, steps) = fit_single_chain(
            config, table, catalog, seed, progress=progress
        )
        save_tuning(outdir / f"tuning_{k:02d}.txt", transform, pseudo, steps)
        write_chain_csv(
            outdir / f"chain_{k:02d}.csv", record, catalog.star_ids,
            config.main_thin, config.per_star_output,
        )
        summary = summarize(record, star_ids=catalog.star_ids)
        summary_to_csv(summary, outdir / f"summary_{k:02d}.csv")
        membership_to_csv(summary, outdir / f"membership_{k:02d}.csv")
        for name in CLUSTER_PARAM_NAMES:
            p = summary.params[name]
            chain_means.setdefault(name, []).append((p.mean, p.sd))
            print(f"  {name}: {p.mean:.4f} +- {p.sd:.4f} (ess {p.ess:.0f})")
        if summary.empty_conditional_ids:
            print(f"  stars never classified as members: {len(summary.empty_conditional_ids)}")

    if config.chains > 1:
        with open(outdir / "between_chains.csv", "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["parameter", "chain", "mean", "sd"])
            for name, entries in chain_means.items():
                for k, (mean, sd) in enumerate(entries):
                    w.writerow([name, k, repr(mean), repr(sd)])
                means = np.array([m for m, _ in entries])
                w.writerow([name, "across", repr(float(np.mean(means))),
                            repr(float(np.std(means, ddof=1)))])

    write_manifest(
        outdir / "manifest.txt", config,
        {"table": config.table_path, "photometry": config.photometry_path},
    )
    print(f"outputs in {outdir}")
    return 0


def cmd_simulate(args) -> int:
    config = _config_from_args(args)
    if not config.table_path:
        raise ValidationError("required for simulate", field="table_path")
    outdir = _resolve_outdir(config, args)
    table = load_table_for_config(config)
    theta = ClusterParams(config.true_age, config.true_feh, config.true_heh,
                          config.true_dm, config.true_av)

    if config.sim_field_lo and config.sim_field_hi:
        ranges = FieldRanges(np.asarray(config.sim_field_lo), np.asarray(config.sim_field_hi))
    else:
        ranges = _auto_field_ranges(table, theta)
    catalog, truth = generate_cluster(
        theta, config.sim_n_cluster, config.sim_n_field, config.sim_binary_fraction,
        config.sim_noise_sd, ranges, config.seed, table,
        pmember=None, field_sep_sigma=config.sim_field_sep_sigma,
    )
    phot = outdir / "synthetic.csv"
    write_photometry_csv(catalog, phot)
    write_truth_csv(truth, table.filters.names, outdir / "synthetic.truth")
    write_manifest(outdir / "manifest.txt", config, {"table": config.table_path})
    print(f"wrote {phot} ({config.sim_n_cluster} cluster + {config.sim_n_field} field stars, "
          f"{truth.n_redraws} redraws)")
    return 0


def _auto_field_ranges(table: IsochroneTable, theta: ClusterParams, margin: float = 1.0) -> FieldRanges:
    """Field-magnitude box covering the cluster locus with a margin."""
    from .synthetic import _locus_grid

    locus = _locus_grid(table, theta)
    return FieldRanges(locus.min(axis=0) - margin, locus.max(axis=0) + margin)


def cmd_summarize(args) -> int:
    record, star_ids = read_chain_csv(args.chain)
    summary = summarize(record, star_ids=star_ids)
    outdir = Path(args.out or ".")
    outdir.mkdir(parents=True, exist_ok=True)
    summary_to_csv(summary, outdir / "summary.csv")
    for name in CLUSTER_PARAM_NAMES:
        p = summary.params[name]
        print(f"{name}: {p.mean:.4f} +- {p.sd:.4f} (ess {p.ess:.0f}, lag1 {p.lag1:.3f})")
    if star_ids:
        membership_to_csv(summary, outdir / "membership.csv")
    return 0


def cmd_check_table(args) -> int:
    table = read_isochrone_table(args.table)
    n_tracks = len(table.feh_grid) * len(table.age_grid)
    n_nodes = int(table.flat().node_mass.shape[0])
    print(
        f"ok: {len(table.filters)} filters {list(table.filters.names)}, "
        f"{len(table.feh_grid)} feh x {len(table.age_grid)} age = {n_tracks} tracks, "
        f"{n_nodes} mass nodes"
    )
    return 0


def cmd_oracle(args) -> int:
    if args.exactness:
        return _oracle_exactness(args)
    return _oracle_invariance(args)


def _peaked_logpmf(shape):
    out = np.full(shape, -50.0)
    out[0, 0] = 0.0
    return out


def _oracle_invariance(args) -> int:
    table, catalog, prior_spec, disc, ranges = three_star_fixture()
    shape = (len(disc.m1_values), len(disc.r_values))
    report = pseudo_prior_invariance_check(
        table, catalog, prior_spec, disc,
        field_logpmf_a=np.zeros(shape),
        field_logpmf_b=_peaked_logpmf(shape),
        ranges=ranges,
    )
    tol = 1e-10
    print(f"max |p(theta, Z | X) difference|        : {report.max_theta_z_diff:.3e}")
    print(f"max member-conditional mass difference : {report.max_member_mass_diff:.3e}")
    print(f"max field-mass joint difference        : {report.max_field_mass_diff:.3e}")
    invariant = report.max_theta_z_diff <= tol and report.max_member_mass_diff <= tol
    differs = report.max_field_mass_diff > tol
    print(f"invariance {'PASS' if invariant else 'FAIL'} (tolerance {tol:g}); "
          f"field-mass joint {'differs as expected' if differs else 'unexpectedly identical'}")
    return 0 if (invariant and differs) else 2


def _oracle_exactness(args) -> int:
    table, catalog, prior_spec, disc, ranges = two_star_fixture()
    inst = DiscretizedInstance(table, catalog, prior_spec, disc, ranges=ranges)
    oracle = brute_force_posterior(inst)
    result = run_grid_sampler(inst, n_sweeps=args.draws, burn_in=args.draws // 10,
                              seed=args.seed or 0)
    z_theta = np.abs(result.p_theta - oracle.p_theta) / np.maximum(result.p_theta_se, 1e-12)
    z_z = np.abs(result.p_z - oracle.p_z) / np.maximum(result.p_z_se, 1e-12)
    worst = float(max(z_theta.max(), z_z.max()))
    print(f"draws: {result.n_draws}, acceptance {result.accept_rate:.3f}")
    print(f"worst |z-score| over {len(z_theta)} theta cells and {len(z_z)} membership "
          f"probabilities: {worst:.2f}")
    ok = worst <= 3.0
    print("exactness PASS (within 3 Monte-Carlo SEs)" if ok else "exactness FAIL")
    return 0 if ok else 2


def cmd_sweep(args) -> int:
    config = _config_from_args(args)
    if not config.table_path:
        raise ValidationError("required for sweep", field="table_path")
    if not config.photometry_path:
        raise ValidationError("required for sweep", field="photometry_path")
    if not config.sweep_filter or not config.sweep_cuts:
        raise ValidationError("sweep needs sweep_filter and sweep_cuts", field="sweep_cuts")
    outdir = _resolve_outdir(config, args)
    table = load_table_for_config(config)
    catalog = read_photometry_csv(config.photometry_path)
    entries = magnitude_cut_sweep(
        catalog, config.sweep_cuts, config.sweep_filter,
        fit_summary_fn(config, table), base_seed=config.seed,
    )
    sweep_to_csv(entries, outdir / "sweep.csv")
    write_manifest(outdir / "manifest.txt", config,
                   {"table": config.table_path, "photometry": config.photometry_path})
    for cut, n_stars, summary in entries:
        age = summary.params["theta_age"]
        print(f"cut {cut}: {n_stars} stars, theta_age {age.mean:.4f} +- {age.sd:.4f}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing / dispatch
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cmdfit", description="Bayesian star-cluster fitting from photometry")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, table=False, photometry=False):
        p.add_argument("--config", help="path to a key = value configuration file")
        p.add_argument("--seed", type=int, help="base RNG seed (overrides config)")
        p.add_argument("--out", help="output directory (overrides config)")
        if table:
            p.add_argument("--table", help="isochrone table path (overrides config)")
        if photometry:
            p.add_argument("--photometry", help="photometry CSV path (overrides config)")

    p = sub.add_parser("fit", help="tune, sample, and summarize")
    common(p, table=True, photometry=True)
    p.add_argument("--chains", type=int, help="number of chains (seeds base+0..k-1)")
    p.add_argument("--per-star", action="store_true", dest="per_star",
                   help="include per-star membership/mass columns in the chain CSV")
    p.add_argument("--max-mag", nargs=2, metavar=("FILTER", "VALUE"),
                   help="drop stars fainter than VALUE in FILTER")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("simulate", help="generate a synthetic catalog with truth sidecar")
    common(p, table=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("summarize", help="re-summarize a stored chain CSV")
    p.add_argument("--chain", required=True, help="chain CSV path")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("oracle", help="brute-force posterior checks on bundled fixtures")
    p.add_argument("--invariance", action="store_true",
                   help="field-mass-prior invariance check (default)")
    p.add_argument("--exactness", action="store_true",
                   help="lattice sampler vs brute force on a 2-star instance")
    p.add_argument("--draws", type=int, default=20000)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("check-table", help="validate an isochrone table file")
    p.add_argument("table", help="table path")
    p.set_defaults(func=cmd_check_table)

    p = sub.add_parser("sweep", help="repeat the fit over faint-magnitude cuts")
    common(p, table=True, photometry=True)
    p.set_defaults(func=cmd_sweep)

    return parser


_VALIDATION_ERRORS = (ParseError, ValidationError, InvalidConfig, InsufficientStars,
                      DegenerateRange, TooLarge)


def cli_dispatch(argv) -> int:
    """Run one CLI invocation; returns the process exit status
    (0 success, 1 validation failure, 2 runtime failure)."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _VALIDATION_ERRORS as exc:
        print(parser.format_usage(), end="", file=sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except _VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except CmdfitError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


def main(argv=None) -> int:
    return cli_dispatch(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
