"""Command-line front end for batch estimation pipelines.

Subcommands: simulate, sample, direct, smooth, unit, assess, rank.  Every
command reads a JSON config (--config), writes per-area CSVs plus a
run-metadata JSON into --out, and is byte-identical across reruns for a
fixed seed.  Exit codes: 0 success (convergence warnings are recorded in
the metadata, not fatal), 2 validation error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import __version__, _kernels, arealevel, assess, dataio, direct, \
    mcmc, population, sampling, spatial, unitlevel


class ConfigError(ValueError):
    pass


def _load_config(path):
    if path is None:
        raise ConfigError("--config is required")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}")


def _config_hash(config):
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _write_metadata(out_dir, command, config, seed, diagnostics=None,
                    warnings=None):
    meta = {
        "command": command,
        "config": config,
        "config_sha256": _config_hash(config),
        "seed": seed,
        "versions": {
            "saekit": __version__,
            "numpy": np.__version__,
            "python": ".".join(str(v) for v in sys.version_info[:3]),
        },
        "kernel_backend": _kernels.BACKEND,
        "diagnostics": diagnostics or {},
        "warnings": warnings or [],
    }
    import scipy
    meta["versions"]["scipy"] = scipy.__version__
    path = os.path.join(out_dir, f"{command}_metadata.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _build_structure(adjacency_spec, base_dir="."):
    if isinstance(adjacency_spec, str):
        adjacency_spec = {"file": adjacency_spec}
    if not isinstance(adjacency_spec, dict):
        raise ConfigError("adjacency must be a path or an object")
    if "file" in adjacency_spec:
        path = adjacency_spec["file"]
        if not os.path.isabs(path):
            path = os.path.join(base_dir, path)
        if not os.path.exists(path):
            raise ConfigError(f"adjacency file not found: {path}")
        edges = spatial.read_edge_file(path)
    elif "grid" in adjacency_spec:
        rows, cols = adjacency_spec["grid"]
        edges = spatial.grid_edges(int(rows), int(cols))
    elif "path" in adjacency_spec:
        edges = spatial.path_edges(int(adjacency_spec["path"]))
    elif "random_planar" in adjacency_spec:
        sub = adjacency_spec["random_planar"]
        edges = spatial.random_planar_edges(int(sub["n"]),
                                            int(sub.get("seed", 0)))
    else:
        raise ConfigError(
            "adjacency needs one of: file, grid, path, random_planar")
    return spatial.build_adjacency(edges)


def _chain_config(config, seed_override, defaults=None):
    base = dict(defaults or {})
    base.update(config.get("mcmc") or {})
    if seed_override is not None:
        base["seed"] = seed_override
    allowed = {"n_iter", "burn_in", "thin", "n_chains", "seed",
               "target_acceptance", "adapt_window"}
    unknown = set(base) - allowed
    if unknown:
        raise ConfigError(f"unknown mcmc settings: {sorted(unknown)}")
    try:
        return mcmc.ChainConfig(**base)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid mcmc settings: {exc}")


def _priors(config):
    spec = config.get("priors") or {}
    kwargs = {}
    for key, field in (("sd", "sd"), ("phi", "phi"),
                       ("overdispersion", "overdispersion")):
        if key in spec:
            kwargs[field] = mcmc.PcPrior(float(spec[key]["U"]),
                                         float(spec[key]["alpha"]))
    for key in ("phi_uniform", "overdispersion_uniform"):
        if key in spec:
            kwargs[key] = bool(spec[key])
    if "fixed_effect_sd" in spec:
        kwargs["fixed_effect_sd"] = float(spec["fixed_effect_sd"])
    return mcmc.SmoothingPriors(**kwargs)


def _diag_from_fit(fit):
    diag = {
        "max_rhat": None if not np.isfinite(fit.max_rhat)
        else round(fit.max_rhat, 4),
        "acceptance": {k: round(v, 4) for k, v in fit.acceptance.items()},
        "n_kept": int(fit.chains.shape[1]),
        "n_chains": int(fit.chains.shape[0]),
    }
    warnings = []
    if np.isfinite(fit.max_rhat) and fit.max_rhat > 1.1:
        warnings.append(f"non-convergence: max rhat {fit.max_rhat:.3f} > 1.1")
    return diag, warnings


# ---------------------------------------------------------------------------

def cmd_simulate(config, out_dir, seed_override):
    pop_spec = config.get("population")
    if not isinstance(pop_spec, dict):
        raise ConfigError("config needs a 'population' object")
    required = ["areas", "adjacency", "intercept", "seed"]
    missing = [k for k in required if k not in pop_spec]
    if missing:
        raise ConfigError(f"population config missing keys: {missing}")
    structure = _build_structure(pop_spec["adjacency"],
                                 base_dir=os.path.dirname(out_dir) or ".")
    seed = seed_override if seed_override is not None else pop_spec["seed"]
    kwargs = {k: pop_spec[k] for k in (
        "intercept", "urban_log_odds", "area_effect_sd",
        "spatial_proportion", "cluster_effect_sd", "clusters_per_area",
        "households_low", "households_high", "urban_cluster_fraction",
        "persons_per_household") if k in pop_spec}
    if "covariate_effects" in pop_spec:
        kwargs["covariate_effects"] = tuple(pop_spec["covariate_effects"])
    try:
        cfg = population.PopulationConfig(
            areas=int(pop_spec["areas"]), adjacency=structure,
            seed=int(seed), **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid population config: {exc}")
    pop = population.generate_population(cfg)
    dataio.write_frame_csv(os.path.join(out_dir, "frame.csv"), pop.frame)
    dataio.write_population_csv(os.path.join(out_dir, "population.csv"),
                                pop)
    dataio.write_truth_csv(os.path.join(out_dir, "truth.csv"), pop)
    spatial.write_edge_file(
        os.path.join(out_dir, "adjacency.txt"),
        [(structure.nodes[i], structure.nodes[j])
         for i, j in structure.edges])
    _write_metadata(out_dir, "simulate", config, int(seed),
                    diagnostics={"areas": structure.n_areas,
                                 "clusters": len(pop.frame.clusters)})
    return 0


def cmd_sample(config, out_dir, seed_override):
    pop_path = config.get("population")
    if not pop_path or not os.path.exists(pop_path):
        raise ConfigError(f"population file not found: {pop_path}")
    design_spec = config.get("design")
    if not isinstance(design_spec, dict):
        raise ConfigError("config needs a 'design' object")
    pop = dataio.read_population_csv(pop_path)
    seed = (seed_override if seed_override is not None
            else design_spec.get("seed", 0))
    n_clusters = design_spec.get("n_clusters")
    if isinstance(n_clusters, dict):
        n_clusters = {k: int(v) for k, v in n_clusters.items()}
    elif n_clusters is not None:
        n_clusters = int(n_clusters)
    else:
        raise ConfigError("design needs n_clusters")
    try:
        design = sampling.TwoStageDesign(
            n_clusters=n_clusters,
            n_households=int(design_spec.get("n_households", 1)),
            seed=int(seed),
            nonresponse_rates=design_spec.get("nonresponse_rates"),
            integer_start=bool(design_spec.get("integer_start", False)))
        sample = sampling.draw_two_stage(pop, design)
    except ValueError as exc:
        raise ConfigError(f"invalid design: {exc}")
    dataio.write_sample_csv(os.path.join(out_dir, "sample.csv"), sample)
    _write_metadata(out_dir, "sample", config, int(seed),
                    diagnostics={"rows": len(sample)})
    return 0


def cmd_direct(config, out_dir, seed_override):
    if "counts" in config:
        path = config["counts"]
        if not os.path.exists(path):
            raise ConfigError(f"counts file not found: {path}")
        area_ids, pos, tested = dataio.read_counts_csv(path)
        rows = []
        for i, a in enumerate(area_ids):
            if tested[i] == 0:
                rows.append([a, None, None, 0, 0, None, None,
                             "no_sample"])
                continue
            est, se = direct.pooled_crude(pos[i], tested[i])
            if 0.0 < est < 1.0:
                z, zv = direct.logit_transform(est, se ** 2)
                rows.append([a, repr(est), repr(se), int(tested[i]), 0,
                             repr(z), repr(zv), "ok"])
            else:
                rows.append([a, repr(est), repr(se), int(tested[i]), 0,
                             None, None, "boundary"])
        nat_est, nat_se = direct.pooled_crude(pos, tested)
        rows.append(["_national", repr(nat_est), repr(nat_se),
                     int(tested.sum()), 0, None, None, "pooled"])
        dataio.write_csv(os.path.join(out_dir, "estimates.csv"),
                         ["area_id", "est", "se", "n", "n_clusters", "z",
                          "v_logit", "status"], rows)
        _write_metadata(out_dir, "direct", config,
                        seed_override if seed_override is not None else 0,
                        diagnostics={"areas": len(area_ids),
                                     "national_est": nat_est,
                                     "national_se": nat_se})
        return 0
    path = config.get("sample")
    if not path or not os.path.exists(path):
        raise ConfigError(f"sample file not found: {path}")
    sample = dataio.read_sample_csv(path)
    est = direct.direct_by_area(sample)
    dataio.write_estimates_csv(os.path.join(out_dir, "estimates.csv"), est)
    _write_metadata(out_dir, "direct", config,
                    seed_override if seed_override is not None else 0,
                    diagnostics={"areas": len(est.area_ids)})
    return 0


def cmd_smooth(config, out_dir, seed_override):
    est_path = config.get("estimates")
    if not est_path or not os.path.exists(est_path):
        raise ConfigError(f"estimates file not found: {est_path}")
    data = dataio.read_estimates_csv(est_path)
    data = _drop_pooled_rows(data)
    structure = _build_structure(config.get("adjacency"))
    X = None
    tag = "smoothed_direct"
    if config.get("covariates"):
        xmat, _ = dataio.read_area_covariates_csv(config["covariates"],
                                                  structure.nodes)
        X = np.hstack([np.ones((structure.n_areas, 1)), xmat])
        tag = "smoothed_direct_cov"
    cfg = _chain_config(config, seed_override,
                        defaults={"n_iter": 4000, "burn_in": 1500,
                                  "thin": 2})
    spec = arealevel.SmoothedDirectSpec(data=data, structure=structure,
                                        X=X, priors=_priors(config),
                                        mcmc=cfg)
    fit = arealevel.fit_smoothed_direct(spec)
    summ = arealevel.posterior_prevalence(fit)
    dataio.write_summaries_csv(os.path.join(out_dir, "smooth_summaries.csv"),
                               summ.area_ids, summ.median, summ.sd,
                               summ.lower, summ.upper, tag)
    if config.get("save_prevalence_draws"):
        dataio.write_prevalence_draws_csv(
            os.path.join(out_dir, "prevalence_draws.csv"),
            fit.area_ids, fit.prevalence)
    if config.get("save_parameter_draws"):
        dataio.write_parameter_draws_csv(
            os.path.join(out_dir, "parameter_draws.csv"), fit)
    diag, warns = _diag_from_fit(fit)
    _write_metadata(out_dir, "smooth", config, cfg.seed, diag, warns)
    return 0


def _drop_pooled_rows(data):
    keep = [i for i, s in enumerate(data.status) if s != "pooled"]
    if len(keep) == len(data.area_ids):
        return data
    from .direct import AreaDirectEstimates
    return AreaDirectEstimates(
        area_ids=[data.area_ids[i] for i in keep],
        est=data.est[keep], var=data.var[keep], n=data.n[keep],
        n_clusters=data.n_clusters[keep], z=data.z[keep],
        z_var=data.z_var[keep], status=[data.status[i] for i in keep])


def _load_cluster_data(config):
    if config.get("sample"):
        path = config["sample"]
        if not os.path.exists(path):
            raise ConfigError(f"sample file not found: {path}")
        return unitlevel.ClusterData.from_sample(
            dataio.read_sample_csv(path))
    path = config.get("clusters")
    if not path or not os.path.exists(path):
        raise ConfigError(f"cluster file not found: {path}")
    return dataio.read_cluster_csv(path)


def _load_urban_fractions(config):
    if config.get("urban_fractions"):
        path = config["urban_fractions"]
        if not os.path.exists(path):
            raise ConfigError(f"urban fractions file not found: {path}")
        return unitlevel.UrbanFractions(
            dataio.read_urban_fractions_csv(path))
    if config.get("frame"):
        frame = dataio.read_frame_csv(config["frame"])
        return unitlevel.UrbanFractions.from_frame(frame)
    raise ConfigError("need urban_fractions CSV or frame CSV")


UNIT_MODELS = {"bb_unadjusted": (False, False),
               "bb_urban": (True, False),
               "bb_urban_cov": (True, True)}


def cmd_unit(config, out_dir, seed_override):
    model = config.get("model", "bb_urban")
    data = _load_cluster_data(config)
    structure = _build_structure(config.get("adjacency"))
    cfg = _chain_config(config, seed_override,
                        defaults={"n_iter": 4000, "burn_in": 1500,
                                  "thin": 2})
    if model == "gp_continuous":
        if not config.get("pixels"):
            raise ConfigError("gp_continuous needs a pixels CSV")
        grid = dataio.read_pixel_csv(config["pixels"])
        fit = unitlevel.fit_gp_unit(data, mcmc=cfg,
                                    urban_effect=bool(
                                        config.get("urban_effect", False)))
        area_ids, draws = unitlevel.aggregate_continuous(fit, grid)
        qs = np.quantile(draws, [0.05, 0.5, 0.95], axis=0)
        dataio.write_summaries_csv(
            os.path.join(out_dir, "unit_summaries.csv"), area_ids, qs[1],
            draws.std(axis=0), qs[0], qs[2], "gp_continuous")
        if config.get("save_prevalence_draws"):
            dataio.write_prevalence_draws_csv(
                os.path.join(out_dir, "prevalence_draws.csv"),
                area_ids, draws)
        diag, warns = _diag_from_fit(fit)
        _write_metadata(out_dir, "unit", config, cfg.seed, diag, warns)
        return 0
    if model not in UNIT_MODELS:
        raise ConfigError(
            f"unknown unit model {model!r}; options: "
            f"{sorted(UNIT_MODELS) + ['gp_continuous']}")
    urban_effect, with_cov = UNIT_MODELS[model]
    X = None
    if with_cov:
        if not config.get("covariates"):
            raise ConfigError(f"{model} needs a covariates CSV")
        X, _ = dataio.read_area_covariates_csv(config["covariates"],
                                               structure.nodes)
    q = _load_urban_fractions(config)
    fit = unitlevel.fit_betabinomial(data, structure, q=q, X=X,
                                     urban_effect=urban_effect,
                                     priors=_priors(config), mcmc=cfg)
    qs = np.quantile(fit.prevalence, [0.05, 0.5, 0.95], axis=0)
    dataio.write_summaries_csv(
        os.path.join(out_dir, "unit_summaries.csv"), fit.area_ids, qs[1],
        fit.prevalence.std(axis=0), qs[0], qs[2], model)
    if config.get("save_prevalence_draws"):
        dataio.write_prevalence_draws_csv(
            os.path.join(out_dir, "prevalence_draws.csv"),
            fit.area_ids, fit.prevalence)
    if config.get("save_parameter_draws"):
        dataio.write_parameter_draws_csv(
            os.path.join(out_dir, "parameter_draws.csv"), fit)
    diag, warns = _diag_from_fit(fit)
    _write_metadata(out_dir, "unit", config, cfg.seed, diag, warns)
    return 0


def cmd_assess(config, out_dir, seed_override, threads=1):
    model = config.get("model", "smoothed_direct")
    est_path = config.get("estimates")
    if not est_path or not os.path.exists(est_path):
        raise ConfigError(f"estimates file not found: {est_path}")
    data = _drop_pooled_rows(dataio.read_estimates_csv(est_path))
    structure = _build_structure(config.get("adjacency"))
    cfg = _chain_config(config, seed_override,
                        defaults={"n_iter": 2500, "burn_in": 1000,
                                  "thin": 2, "n_chains": 1})
    kwargs = {}
    X = None
    if config.get("covariates"):
        xmat, _ = dataio.read_area_covariates_csv(config["covariates"],
                                                  structure.nodes)
        X = (np.hstack([np.ones((structure.n_areas, 1)), xmat])
             if model == "smoothed_direct" else xmat)
    if model == "betabinomial":
        kwargs["cluster_data"] = _load_cluster_data(config)
        kwargs["q"] = _load_urban_fractions(config)
        kwargs["urban_effect"] = bool(config.get("urban_effect", True))
    report = assess.loo_area_cv(data, model=model, structure=structure,
                                X=X, mcmc=cfg, threads=threads, **kwargs)
    dataio.write_cv_csv(os.path.join(out_dir, "cv_report.csv"), report)
    diagnostics = {
        "areas_evaluated": len(report.records),
        "coverage": report.coverage(),
        "mean_discrepancy": report.mean_discrepancy(),
        "skipped": report.skipped,
    }
    _write_metadata(out_dir, "assess", config, cfg.seed, diagnostics)
    return 0


def cmd_rank(config, out_dir, seed_override):
    path = config.get("prevalence_draws")
    if not path or not os.path.exists(path):
        raise ConfigError(f"prevalence draws file not found: {path}")
    area_ids, draws = dataio.read_prevalence_draws_csv(path)
    summary = assess.rank_distribution(draws, area_ids)
    dataio.write_rank_csv(os.path.join(out_dir, "rank_summary.csv"),
                          summary)
    _write_metadata(out_dir, "rank", config,
                    seed_override if seed_override is not None else 0,
                    diagnostics={"areas": len(area_ids),
                                 "draws": int(draws.shape[0])})
    return 0


# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="saekit",
        description="Small-area estimation pipelines over survey data")
    parser.add_argument("subcommand",
                        choices=["simulate", "sample", "direct", "smooth",
                                 "unit", "assess", "rank"])
    parser.add_argument("--config", required=True,
                        help="JSON configuration file")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    parser.add_argument("--out", default=".",
                        help="output directory (created if missing)")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker processes for per-area refits "
                             "(default: SAE_THREADS or 1)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    threads = args.threads
    if threads is None:
        threads = int(os.environ.get("SAE_THREADS", "1"))
    try:
        config = _load_config(args.config)
        os.makedirs(args.out, exist_ok=True)
        if args.subcommand == "simulate":
            return cmd_simulate(config, args.out, args.seed)
        if args.subcommand == "sample":
            return cmd_sample(config, args.out, args.seed)
        if args.subcommand == "direct":
            return cmd_direct(config, args.out, args.seed)
        if args.subcommand == "smooth":
            return cmd_smooth(config, args.out, args.seed)
        if args.subcommand == "unit":
            return cmd_unit(config, args.out, args.seed)
        if args.subcommand == "assess":
            return cmd_assess(config, args.out, args.seed, threads)
        if args.subcommand == "rank":
            return cmd_rank(config, args.out, args.seed)
        raise ConfigError(f"unknown subcommand {args.subcommand}")
    except (ConfigError, dataio.InputError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (np.linalg.LinAlgError, FloatingPointError,
            mcmc.PosteriorNaNError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
