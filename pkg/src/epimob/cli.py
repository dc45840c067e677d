"""Config-driven pipeline runner.

One YAML config describes a whole analysis: raw input paths, the week
calendar, imputation and model settings, seeds and an output directory.
Subcommands run individual stages (features, embed, impute, fit, pool,
diagnose), generate synthetic raw data (simulate), or chain every stage
(pipeline). Stages communicate through files in the output directory,
each stage writing a manifest with hashed inputs, resolved parameters
and library versions, so any artifact can be traced and reproduced.
"""

import argparse
import csv
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from datetime import date
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import yaml

from . import __version__
from .basis import SmoothSpec
from .embedding import (
    embed_and_align,
    read_connectedness_csv,
    read_coordinates_csv,
    write_coordinates_csv,
)
from .engine import Family, fit_model
from .features import (
    gini_series,
    read_colocation_csv,
    read_daily_csv,
    read_series_csv,
    weekly_average,
    weekly_standardize,
    write_series_csv,
)
from .imputation import (
    build_imputations,
    fit_delay_model,
    read_imputed_csv,
    write_imputed_csv,
)
from .panel import (
    WeekCalendar,
    aggregate_panel,
    assemble_model_frame,
    compute_rates,
    parse_line_list,
    read_population_csv,
    read_registry_csv,
)
from .pooling import (
    ResidualSet,
    average_residuals,
    average_rootograms,
    pool_fits,
    predicted_vs_observed,
    qq_outliers,
    rootogram,
    rq_residuals,
    write_pooled_json,
    write_residuals_csv,
    write_rootogram_csv,
)
from .simulator import (
    SimulationConfig,
    apply_missingness,
    simulate_line_list,
    simulate_panel,
    write_colocation_csv,
    write_connectedness_csv,
    write_daily_csv,
    write_line_list_csv,
    write_population_csv,
    write_registry_csv,
)
from .svgplot import render_svg

SUBCOMMANDS = ("features", "embed", "impute", "fit", "pool", "diagnose",
               "simulate", "pipeline")
PIPELINE_STAGES = ("features", "embed", "impute", "fit", "pool", "diagnose")

INPUT_KEYS = ("registry", "population", "line_list", "colocation", "daily",
              "connectedness")

SIM_KEYS = ("n_districts", "gender_effect", "age_effect", "interaction_effect",
            "ar_coef", "c", "phi", "tau_a", "tau_b", "feature_walk_sd",
            "delay_mean", "delay_age_effect", "delay_gender_effect",
            "delay_dispersion", "delay_shift", "n_states")


class CliError(RuntimeError):
    pass


class PipelineConfig:
    """Resolved settings for one run; paths are absolute."""

    def __init__(self, raw, base_dir, out=None, seed=None, workers=None):
        if not isinstance(raw, dict):
            raise CliError("config must be a mapping")
        self.raw = raw
        self.base = Path(base_dir)
        out = out or os.environ.get("EPIMOB_OUT") or raw.get("out")
        if not out:
            raise CliError("no output directory: set `out` in the config, "
                           "--out, or EPIMOB_OUT")
        self.out = (self.base / out).resolve() if not Path(out).is_absolute() \
            else Path(out)
        self.seed = int(seed if seed is not None else raw.get("seed", 0))
        self.workers = int(workers if workers is not None
                           else raw.get("workers", 1))
        if self.workers < 1:
            raise CliError("workers must be at least 1")

        week = raw.get("week") or {}
        anchor = week.get("anchor")
        if anchor is None:
            raise CliError("config needs week.anchor (an ISO date)")
        self.anchor = anchor if isinstance(anchor, date) \
            else date.fromisoformat(str(anchor))
        self.n_weeks = int(week.get("n_weeks", 0))
        if self.n_weeks < 2:
            raise CliError("config needs week.n_weeks >= 2")

        imp = raw.get("imputation") or {}
        self.K = int(imp.get("K", 5))
        if self.K < 2:
            raise CliError(f"imputation.K must be at least 2, got {self.K}")
        self.trend_k = imp.get("trend_k")

        model = raw.get("model") or {}
        self.family = str(model.get("family", "negative_binomial"))
        if self.family not in ("negative_binomial", "quasi"):
            raise CliError(f"unsupported family {self.family!r}")
        self.coord_k = int(model.get("coord_k", 20))
        self.social_k = int(model.get("social_k", 20))
        self.district_effects = bool(model.get("district_effects", True))
        self.last_week_effects = bool(model.get("last_week_effects", True))
        fixed_c = model.get("fixed_c")
        self.fixed_c = None if fixed_c is None else float(fixed_c)

        diag = raw.get("diagnose") or {}
        self.qq_threshold = float(diag.get("qq_threshold", 1.0))
        self.max_count = diag.get("max_count")

        self.inputs = {}
        for key, value in (raw.get("inputs") or {}).items():
            if key not in INPUT_KEYS:
                raise CliError(f"unknown input key {key!r}")
            p = Path(value)
            self.inputs[key] = p if p.is_absolute() else (self.base / p).resolve()

    @classmethod
    def from_file(cls, path, out=None, seed=None, workers=None):
        path = Path(path)
        if not path.exists():
            raise CliError(f"config file {path} does not exist")
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
        return cls(raw or {}, path.parent, out=out, seed=seed, workers=workers)

    def input_path(self, key, stage):
        try:
            p = self.inputs[key]
        except KeyError:
            raise CliError(f"{stage}: config has no inputs.{key} entry")
        if not p.exists():
            raise CliError(f"{stage}: missing {key} file {p}")
        return p

    def artifact(self, name, stage=None, must_exist=False):
        p = self.out / name
        if must_exist and not p.exists():
            raise CliError(f"{stage}: missing artifact {p}; "
                           "run the earlier stages first")
        return p

    def calendar(self):
        return WeekCalendar(self.anchor, self.n_weeks)

    def stage_seed(self, index):
        return [self.seed, index]


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return "sha256:" + h.hexdigest()


def _dump_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return [_jsonable(v) for v in x.tolist()]
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, date):
        return x.isoformat()
    return x


def _write_manifest(cfg, stage, parameters, inputs, outputs):
    mdir = cfg.out / "manifests"
    mdir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "stage": stage,
        "parameters": _jsonable(parameters),
        "inputs": {str(p): _sha256(p) for p in sorted(inputs, key=str)},
        "outputs": sorted(str(Path(p).relative_to(cfg.out)) for p in outputs),
        "versions": {
            "epimob": __version__,
            "numpy": np.__version__,
            "scipy": __import__("scipy").__version__,
            "python": ".".join(map(str, sys.version_info[:3])),
        },
    }
    _dump_json(manifest, mdir / f"{stage}.json")


def stage_simulate(cfg):
    sim = cfg.raw.get("simulate") or {}
    kwargs = {k: sim[k] for k in SIM_KEYS if k in sim}
    if "population_range" in sim:
        kwargs["population_range"] = tuple(sim["population_range"])
    if "week_effects" in sim:
        kwargs["week_effects"] = np.asarray(sim["week_effects"], dtype=float)
    if "feature_slopes" in sim:
        kwargs["feature_slopes"] = {k: np.asarray(v, dtype=float) if
                                    isinstance(v, list) else float(v)
                                    for k, v in sim["feature_slopes"].items()}
    config = SimulationConfig(n_weeks=cfg.n_weeks, anchor=cfg.anchor,
                              seed=cfg.seed, **kwargs)
    panel, truth = simulate_panel(config)
    records = simulate_line_list(panel, truth.registry, config)
    fraction = float(sim.get("missing_fraction", 0.0))
    if fraction > 0:
        records = apply_missingness(records, fraction,
                                    seed=np.random.SeedSequence(cfg.stage_seed(101)))

    data = cfg.out / "data"
    data.mkdir(parents=True, exist_ok=True)
    outputs = []

    def put(name, writer, *args):
        path = data / name
        writer(*args, path)
        outputs.append(path)

    put("registry.csv", write_registry_csv, truth.registry)
    put("population.csv", write_population_csv, truth.population, truth.registry)
    put("line_list.csv", write_line_list_csv, records)
    put("colocation.csv", write_colocation_csv, truth.colocations)
    put("daily.csv", write_daily_csv, truth.daily)
    put("connectedness.csv", write_connectedness_csv, truth.connectedness)

    truth_path = cfg.out / "truth.json"
    _dump_json({
        "week_effects": _jsonable(config.week_effects),
        "gender_effect": config.gender_effect,
        "age_effect": config.age_effect,
        "interaction_effect": config.interaction_effect,
        "feature_slopes": _jsonable(config.feature_slopes),
        "ar_coef": config.ar_coef,
        "c": config.c,
        "phi": config.phi,
        "tau_a": config.tau_a,
        "tau_b": config.tau_b,
        "missing_fraction": fraction,
        "a": _jsonable(truth.a),
        "b": _jsonable(truth.b),
    }, truth_path)
    outputs.append(truth_path)
    _write_manifest(cfg, "simulate",
                    {"simulate": sim, "seed": cfg.seed,
                     "week": {"anchor": cfg.anchor, "n_weeks": cfg.n_weeks}},
                    [], outputs)
    return outputs


def stage_features(cfg):
    registry_path = cfg.input_path("registry", "features")
    coloc_path = cfg.input_path("colocation", "features")
    daily_path = cfg.input_path("daily", "features")
    registry = read_registry_csv(registry_path)
    calendar = cfg.calendar()
    matrices = read_colocation_csv(coloc_path, registry.ids)
    daily = read_daily_csv(daily_path)
    gini = weekly_standardize(gini_series(matrices, list(registry.ids)))
    stay = weekly_standardize(weekly_average(daily, calendar, list(registry.ids)))
    out = cfg.artifact("features.csv")
    cfg.out.mkdir(parents=True, exist_ok=True)
    write_series_csv([gini, stay], out)
    _write_manifest(cfg, "features",
                    {"week": {"anchor": cfg.anchor, "n_weeks": cfg.n_weeks}},
                    [registry_path, coloc_path, daily_path], [out])
    return [out]


def stage_embed(cfg):
    registry_path = cfg.input_path("registry", "embed")
    sci_path = cfg.input_path("connectedness", "embed")
    registry = read_registry_csv(registry_path)
    C = read_connectedness_csv(sci_path, registry.ids)
    aligned, transform, distances, emb = embed_and_align(C, registry.coords())
    cfg.out.mkdir(parents=True, exist_ok=True)
    coords_path = cfg.artifact("coordinates.csv")
    write_coordinates_csv(coords_path, registry.ids, aligned)
    meta_path = cfg.artifact("embedding.json")
    _dump_json({
        "eigenvalues": _jsonable(emb.eigenvalues),
        "stress": float(emb.stress),
        "additive_constant": float(distances.additive_constant_applied),
        "alignment": {"rho": float(transform.rho),
                      "rotation": _jsonable(transform.rotation),
                      "translation": _jsonable(transform.translation),
                      "r_squared": float(transform.r_squared)},
    }, meta_path)
    _write_manifest(cfg, "embed", {}, [registry_path, sci_path],
                    [coords_path, meta_path])
    return [coords_path, meta_path]


def stage_impute(cfg):
    lines_path = cfg.input_path("line_list", "impute")
    registry_path = cfg.input_path("registry", "impute")
    population_path = cfg.input_path("population", "impute")
    registry = read_registry_csv(registry_path)
    population = read_population_csv(population_path)
    cases = parse_line_list(lines_path, registry=registry)
    trend = SmoothSpec("pspline", k=int(cfg.trend_k)) if cfg.trend_k else None
    model = fit_delay_model(cases, trend_spec=trend)
    datasets = build_imputations(
        cases, model, K=cfg.K,
        seed=np.random.SeedSequence(cfg.stage_seed(202)),
        registry=registry, population=population, calendar=cfg.calendar())

    imp_dir = cfg.out / "imputed"
    imp_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for ds in datasets:
        path = imp_dir / f"imputed_{ds.k:02d}.csv"
        write_imputed_csv(ds, path)
        outputs.append(path)
    model_path = cfg.artifact("delay_model.json")
    _dump_json({
        "fixed_names": list(model.fixed_names),
        "theta_mu": _jsonable(model.theta_mu),
        "se_mu": _jsonable(model.se_mu()),
        "theta_sigma": _jsonable(model.theta_sigma),
        "se_sigma": _jsonable(model.se_sigma()),
        "edf_mu": _jsonable(model.edf_mu),
        "edf_sigma": _jsonable(model.edf_sigma),
        "loglik": float(model.loglik),
        "cycles": int(model.cycles),
    }, model_path)
    outputs.append(model_path)
    _write_manifest(cfg, "impute",
                    {"K": cfg.K, "trend_k": cfg.trend_k, "seed": cfg.seed},
                    [lines_path, registry_path, population_path], outputs)
    return outputs


def _fit_payload(cfg, imputed_path):
    return {
        "imputed": str(imputed_path),
        "registry": str(cfg.input_path("registry", "fit")),
        "population": str(cfg.input_path("population", "fit")),
        "features": str(cfg.artifact("features.csv", "fit", must_exist=True)),
        "coordinates": str(cfg.artifact("coordinates.csv", "fit",
                                        must_exist=True)),
        "anchor": cfg.anchor.isoformat(),
        "n_weeks": cfg.n_weeks,
        "family": cfg.family,
        "coord_k": cfg.coord_k,
        "social_k": cfg.social_k,
        "district_effects": cfg.district_effects,
        "last_week_effects": cfg.last_week_effects,
        "fixed_c": cfg.fixed_c,
        "out_dir": str(cfg.out / "fits"),
    }


def _fit_one(payload):
    """Fit the model for one imputed dataset; runs inside worker processes."""
    registry = read_registry_csv(payload["registry"])
    population = read_population_csv(payload["population"])
    features = read_series_csv(payload["features"])
    embedding = read_coordinates_csv(payload["coordinates"])
    calendar = WeekCalendar(date.fromisoformat(payload["anchor"]),
                            payload["n_weeks"])
    k, records = read_imputed_csv(payload["imputed"])
    panel = compute_rates(aggregate_panel(records, registry, population,
                                          calendar), population)
    assembled = assemble_model_frame(
        panel, features, embedding, registry,
        coord_spec=SmoothSpec("thinplate", k=payload["coord_k"]),
        soc_spec=SmoothSpec("thinplate", k=payload["social_k"]),
        district_effects=payload["district_effects"],
        last_week_effects=payload["last_week_effects"])
    family = Family(payload["family"])
    fixed_c = payload["fixed_c"]
    fit = fit_model(assembled.frame, family, c=fixed_c,
                    profile=fixed_c is None)

    district_rows = None
    if payload["district_effects"]:
        sl = fit.term_slices["district_intercept"]
        coords = registry.coords()
        district_rows = [
            {"district_id": d, "lon": float(coords[i, 0]),
             "lat": float(coords[i, 1]),
             "effect": float(fit.theta[sl][i])}
            for i, d in enumerate(registry.ids)]

    out_dir = Path(payload["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"fit_{k:02d}.json"
    _dump_json({
        "k": k,
        "summary": fit.to_dict(),
        "names": list(fit.names),
        "theta": _jsonable(fit.theta),
        "covariance": _jsonable(fit.covariance),
        "c_hat": None if fit.c_hat is None else float(fit.c_hat),
        "c_se": None if fit.c_se is None else float(fit.c_se),
        "phi": float(fit.phi),
        "y": _jsonable(assembled.frame.y),
        "mu": _jsonable(fit.mu),
        "district_effects": district_rows,
    }, path)
    return str(path)


def stage_fit(cfg):
    imp_dir = cfg.out / "imputed"
    imputed = sorted(imp_dir.glob("imputed_*.csv"))
    if not imputed:
        raise CliError(f"fit: no imputed line lists under {imp_dir}; "
                       "run the impute stage first")
    payloads = [_fit_payload(cfg, p) for p in imputed]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            outputs = list(pool.map(_fit_one, payloads))
    else:
        outputs = [_fit_one(p) for p in payloads]
    inputs = set(imputed)
    for p in payloads:
        inputs.update(Path(p[k]) for k in
                      ("registry", "population", "features", "coordinates"))
    _write_manifest(cfg, "fit",
                    {"family": cfg.family, "coord_k": cfg.coord_k,
                     "social_k": cfg.social_k,
                     "district_effects": cfg.district_effects,
                     "last_week_effects": cfg.last_week_effects,
                     "fixed_c": cfg.fixed_c, "workers": cfg.workers},
                    sorted(inputs, key=str), outputs)
    return outputs


def _load_fits(cfg, stage):
    fits_dir = cfg.out / "fits"
    paths = sorted(fits_dir.glob("fit_*.json"))
    if not paths:
        raise CliError(f"{stage}: no fits under {fits_dir}; "
                       "run the fit stage first")
    fits = []
    for p in paths:
        with open(p, encoding="utf-8") as fh:
            d = json.load(fh)
        fits.append(SimpleNamespace(
            k=d["k"], names=list(d["names"]), theta=np.array(d["theta"]),
            covariance=np.array(d["covariance"]), c_hat=d["c_hat"],
            c_se=(np.nan if d["c_se"] is None else d["c_se"]),
            phi=d["phi"], y=np.array(d["y"]), mu=np.array(d["mu"]),
            family_kind=d["summary"]["family"],
            district_effects=d["district_effects"]))
    return paths, fits


def stage_pool(cfg):
    paths, fits = _load_fits(cfg, "pool")
    pooled, c_pooled = pool_fits(fits, pool_c=cfg.fixed_c is None)
    out = cfg.artifact("pooled.json")
    write_pooled_json(pooled, out, c_pooled=c_pooled)
    _write_manifest(cfg, "pool", {"fixed_c": cfg.fixed_c}, paths, [out])
    return [out]


def stage_diagnose(cfg):
    paths, fits = _load_fits(cfg, "diagnose")
    pooled_path = cfg.artifact("pooled.json", "diagnose", must_exist=True)
    inputs = list(paths) + [pooled_path]

    residual_sets = [
        rq_residuals(f, f.y, seed=np.random.SeedSequence(cfg.stage_seed(303 + i)))
        for i, f in enumerate(fits)]
    avg_res = average_residuals(residual_sets)
    avg_set = ResidualSet(avg_res, seed=cfg.seed)
    res_path = cfg.artifact("residuals.csv")
    write_residuals_csv(avg_set, res_path)

    max_count = cfg.max_count
    if max_count is None:
        max_count = int(max(f.y.max() for f in fits))
    roots = [rootogram(f, f.y, max_count=int(max_count)) for f in fits]
    root_path = cfg.artifact("rootogram.csv")
    write_rootogram_csv(average_rootograms(roots), root_path)

    corr = float(np.mean([predicted_vs_observed(f, f.y).correlation
                          for f in fits]))
    outliers = qq_outliers(avg_set, threshold=cfg.qq_threshold)
    diag_path = cfg.artifact("diagnostics.json")
    _dump_json({
        "K": len(fits),
        "n": int(len(avg_res)),
        "qq_outliers": int(outliers.sum()),
        "qq_threshold": cfg.qq_threshold,
        "log_scale_correlation": corr,
    }, diag_path)

    outputs = [res_path, root_path, diag_path]
    plots = cfg.out / "plots"
    plots.mkdir(parents=True, exist_ok=True)
    outputs.append(render_svg(res_path, "residual-qq",
                              plots / "residual_qq.svg"))
    outputs.append(render_svg(root_path, "rootogram", plots / "rootogram.svg"))
    outputs.append(render_svg(pooled_path, "coefficient-path",
                              plots / "coefficient_path.svg"))

    if fits[0].district_effects is not None:
        effs = np.mean([[row["effect"] for row in f.district_effects]
                        for f in fits], axis=0)
        map_path = cfg.artifact("map_effect.csv")
        with open(map_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["district_id", "lon", "lat", "effect"])
            for row, e in zip(fits[0].district_effects, effs):
                w.writerow([row["district_id"], repr(row["lon"]),
                            repr(row["lat"]), repr(float(e))])
        outputs.append(map_path)
        outputs.append(render_svg(map_path, "map-effect",
                                  plots / "map_effect.svg"))

    coords_path = cfg.out / "coordinates.csv"
    if coords_path.exists():
        inputs.append(coords_path)
        outputs.append(render_svg(coords_path, "embedding-scatter",
                                  plots / "embedding_scatter.svg"))

    _write_manifest(cfg, "diagnose",
                    {"qq_threshold": cfg.qq_threshold,
                     "max_count": int(max_count), "seed": cfg.seed},
                    inputs, outputs)
    return outputs


STAGES = {
    "simulate": stage_simulate,
    "features": stage_features,
    "embed": stage_embed,
    "impute": stage_impute,
    "fit": stage_fit,
    "pool": stage_pool,
    "diagnose": stage_diagnose,
}


def run_subcommand(name, config):
    """Run one subcommand; returns 0 or prints one error line and returns 1."""
    try:
        if name == "pipeline":
            for stage in PIPELINE_STAGES:
                STAGES[stage](config)
        elif name in STAGES:
            STAGES[name](config)
        else:
            raise CliError(f"unknown subcommand {name!r}")
    except Exception as err:  # single-line, machine-parsable contract
        msg = " ".join(str(err).split())
        print(f"error: {name}: {type(err).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="epimob",
        description="endemic-epidemic count model pipeline")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--out", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--workers", type=int, default=None)
    args = parser.parse_args(argv)
    try:
        config = PipelineConfig.from_file(args.config, out=args.out,
                                          seed=args.seed, workers=args.workers)
    except Exception as err:
        msg = " ".join(str(err).split())
        print(f"error: config: {type(err).__name__}: {msg}", file=sys.stderr)
        return 1
    return run_subcommand(args.subcommand, config)


if __name__ == "__main__":
    sys.exit(main())
