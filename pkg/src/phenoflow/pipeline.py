"""Command implementations behind the ``phenoflow`` CLI.

Each ``cmd_*`` function takes a ``PipelineConfig`` and returns a process exit
code; failures are reported through ``PipelineExit`` internally.

Exit codes:
    0  success
    1  invalid configuration or usage
    2  input missing or failed to ingest
    3  not enough usable fits (none converged, or fewer than 3 pass QC)
    4  MLP training diverged
    5  SHAP additivity violated beyond 1e-6
    6  unexpected internal error
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import data as dc
from . import explain as ex
from . import neural as nn
from . import plots
from .errors import NoConvergence, NonFiniteLoss, PhenoflowError, TooFewPoints
from .linstats import ols_fit, weeks_per_degC_to_days, write_linreg
from .phenology import extract_metrics, read_phenology, write_phenology
from .seasonfit import FitOptions, eval_double_logistic, fit_season, read_fits, write_fits

log = logging.getLogger("phenoflow")

EXIT_OK, EXIT_CONFIG, EXIT_INPUT, EXIT_FITS, EXIT_DIVERGED, EXIT_ADDITIVITY, EXIT_INTERNAL = 0, 1, 2, 3, 4, 5, 6
TARGETS = ("sos", "pos", "peak")
TARGET_UNITS = {"sos": "week", "pos": "week", "peak": "NDVI"}
ADDITIVITY_TOL = 1e-6


class PipelineExit(Exception):
    def __init__(self, code: int, message: str):
        self.code = code
        super().__init__(message)


@dataclass
class PipelineConfig:
    ndvi: str | None = None
    soil: str | None = None
    weather: str | None = None
    plots: str | None = None
    out_dir: str = "phenoflow_out"
    qc_threshold: float = 0.80
    lam: float = 10.0
    restarts: int = 4
    split_ratio: float = 0.8
    seed: int = 0
    tuning_budget: int = 8
    cv_folds: int = 5
    shap_budget: int = ex.DEFAULT_BUDGET
    background_cap: int = ex.DEFAULT_BACKGROUND_CAP
    explain_max_samples: int | None = None
    season_plots: bool = True
    targets: list = field(default_factory=lambda: list(TARGETS))
    synthetic: dict = field(default_factory=dict)

    @classmethod
    def from_json(cls, path) -> "PipelineConfig":
        with open(path) as fh:
            raw = json.load(fh)
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise PipelineExit(EXIT_CONFIG, f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**raw)

    def validate(self) -> None:
        if not 0 < self.qc_threshold <= 1:
            raise PipelineExit(EXIT_CONFIG, "qc_threshold must be in (0, 1]")
        if not 0 < self.split_ratio < 1:
            raise PipelineExit(EXIT_CONFIG, "split_ratio must be in (0, 1)")
        if self.tuning_budget < 1 or self.cv_folds < 2:
            raise PipelineExit(EXIT_CONFIG, "tuning_budget must be >= 1 and cv_folds >= 2")
        bad = set(self.targets) - set(TARGETS)
        if bad:
            raise PipelineExit(EXIT_CONFIG, f"unknown targets: {', '.join(sorted(bad))}")

    @property
    def out(self) -> Path:
        return Path(self.out_dir)

    def path(self, name: str) -> Path:
        value = getattr(self, name)
        default = {"ndvi": "ndvi.csv", "soil": "soil.csv", "weather": "weather_daily.csv", "plots": "plots.csv"}[name]
        return Path(value) if value else self.out / default

    def fit_options(self) -> FitOptions:
        return FitOptions(lam=self.lam, restarts=self.restarts, seed=self.seed)


def n_workers() -> int:
    raw = os.environ.get("PHENOFLOW_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise PipelineExit(EXIT_CONFIG, f"PHENOFLOW_THREADS must be an integer, got {raw!r}") from None
    return max(1, os.cpu_count() or 1) if n <= 0 else n


def _require(path: Path, what: str) -> None:
    if not path.exists():
        raise PipelineExit(EXIT_INPUT, f"{what} not found: {path}")


def _ingest(fn, path: Path, what: str):
    _require(path, what)
    try:
        return fn(path)
    except (PhenoflowError, OSError, ValueError) as exc:
        raise PipelineExit(EXIT_INPUT, f"failed to read {what} {path}: {exc}") from None


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _categories(cfg: PipelineConfig) -> dict[str, str]:
    p = cfg.path("plots")
    if not p.exists():
        return {}
    return {r.plot_id: r.category for r in _ingest(dc.ingest_plots, p, "plots file")}


# ------------------------------------------------------------------------ synth


def cmd_synth(cfg: PipelineConfig) -> int:
    syn = dict(cfg.synthetic)
    syn.setdefault("seed", cfg.seed)
    if "years" in syn:
        syn["years"] = tuple(syn["years"])
    if "peak_saturation" in syn:
        syn["peak_saturation"] = tuple(syn["peak_saturation"])
    try:
        scfg = dc.SyntheticConfig(**syn)
        ds = dc.generate_synthetic_dataset(scfg)
    except (TypeError, PhenoflowError) as exc:
        raise PipelineExit(EXIT_CONFIG, f"invalid synthetic config: {exc}") from None
    cfg.out.mkdir(parents=True, exist_ok=True)
    dc.write_ndvi(cfg.out / "ndvi.csv", ds.ndvi)
    dc.write_soil(cfg.out / "soil.csv", ds.soil)
    dc.write_weather_daily(cfg.out / "weather_daily.csv", ds.weather_daily)
    dc.write_plots(cfg.out / "plots.csv", ds.plots)
    with open(cfg.out / "truth.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["plot_id", "year", "a1", "a2", "b1", "b2", "c", "d", "p", "sos", "pos", "peak", "outlier"])
        for key in sorted(ds.truth):
            p = ds.truth[key]
            w.writerow(
                list(key)
                + [repr(v) for v in (p.a1, p.a2, p.b1, p.b2, p.c, p.d, p.p)]
                + [repr(v) for v in ds.truth_metrics[key]]
                + [int(key in ds.outliers)]
            )
    log.info("wrote synthetic dataset (%d plots, %d NDVI samples) to %s", len(ds.plots), len(ds.ndvi), cfg.out)
    return EXIT_OK


# -------------------------------------------------------------------------- fit


def _fit_one(args):
    key, xy, opts = args
    try:
        return fit_season(xy, opts, plot_id=key[0], year=key[1])
    except NoConvergence as exc:
        return getattr(exc, "fit", None)
    except TooFewPoints as exc:
        log.warning("skipping %s %s: %s", key[0], key[1], exc)
        return None


def fit_all(groups: dict, opts: FitOptions, workers: int = 1) -> list:
    jobs = [(key, np.array([(s.week, s.ndvi) for s in g]), opts) for key, g in groups.items()]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_fit_one, jobs, chunksize=8))
    else:
        results = [_fit_one(j) for j in jobs]
    return [r for r in results if r is not None]


def cmd_fit(cfg: PipelineConfig) -> int:
    path = cfg.path("ndvi")
    samples = _ingest(dc.ingest_ndvi, path, "NDVI file")
    if not samples:
        raise PipelineExit(EXIT_INPUT, f"NDVI file {path} contains no samples")
    groups = dc.group_by_plot_year(samples)
    fits = fit_all(groups, cfg.fit_options(), n_workers())
    cfg.out.mkdir(parents=True, exist_ok=True)
    write_fits(cfg.out / "fits.csv", fits)
    if cfg.season_plots:
        _season_plots(cfg, groups, fits)
    n_conv = sum(f.converged for f in fits)
    log.info("fitted %d plot-years, %d converged", len(fits), n_conv)
    if n_conv == 0:
        raise PipelineExit(EXIT_FITS, "no season fit converged")
    return EXIT_OK


def _season_plots(cfg: PipelineConfig, groups: dict, fits) -> None:
    from .phenology import estimate_sos

    pdir = cfg.out / "plots"
    pdir.mkdir(parents=True, exist_ok=True)
    grid = np.linspace(0.0, 52.0, 261)
    for f in fits:
        g = groups[(f.plot_id, f.year)]
        try:
            sos = estimate_sos(f)
        except PhenoflowError:
            sos = None
        svg = plots.season_svg(
            f"{f.plot_id} {f.year} (r2={f.r2:.3f})",
            [s.week for s in g],
            [s.ndvi for s in g],
            grid,
            eval_double_logistic(f.params, grid),
            sos,
            f.params.p,
        )
        (pdir / f"season_{f.plot_id}_{f.year}.svg").write_text(svg)


# ---------------------------------------------------------------------- analyze


def _round(v: float, nd: int) -> float | None:
    return None if not math.isfinite(v) else round(v, nd)


def _rounded(res) -> dict:
    # p-values keep 3 significant digits; everything else 3 decimals
    out = {}
    for k, v in res.as_dict().items():
        if k == "n":
            continue
        out[k] = float(f"{v:.3g}") if k.startswith("p_") else _round(v, 3)
    return out


def cmd_analyze(cfg: PipelineConfig) -> int:
    fits = _ingest(read_fits, cfg.out / "fits.csv", "fits file")
    soil = _ingest(dc.ingest_soil, cfg.path("soil"), "soil file")
    soil_mean = dc.soil_means(soil)
    metrics = [extract_metrics(f, cfg.qc_threshold) for f in fits]
    write_phenology(cfg.out / "phenology.csv", metrics)

    kept = [m for m in metrics if m.qc_pass and (m.plot_id, m.year) in soil_mean]
    n_excluded = sum(not m.qc_pass for m in metrics)
    if len(kept) < 3:
        raise PipelineExit(EXIT_FITS, f"only {len(kept)} plot-years pass QC; need at least 3")

    x = np.array([soil_mean[(m.plot_id, m.year)] for m in kept])
    results = {}
    report_targets = {}
    for target in TARGETS:
        y = np.array([getattr(m, target) for m in kept])
        res = ols_fit(x, y)
        results[target] = res
        entry = {"raw": res.as_dict(), "rounded": _rounded(res)}
        if target in ("sos", "pos") and res.slope != 0.0:
            days, deg = weeks_per_degC_to_days(res.slope)
            entry["days_per_degC"] = days
            entry["degC_per_week_shift"] = deg
            entry["rounded"]["days_per_degC"] = _round(days, 2)
            entry["rounded"]["degC_per_week_shift"] = _round(deg, 2)
        report_targets[target] = entry
    write_linreg(cfg.out / "linreg.csv", results)

    r2s = [f.r2 for f in fits]
    summary = {
        t: {"mean": float(np.mean([getattr(m, t) for m in kept])), "sd": float(np.std([getattr(m, t) for m in kept], ddof=1))}
        for t in TARGETS
    }
    report = {
        "n_fits": len(fits),
        "n_qc_pass": len(kept),
        "exclusion_rate": n_excluded / len(metrics),
        "qc_threshold": cfg.qc_threshold,
        "fit_r2": {"mean": float(np.mean(r2s)), "sd": float(np.std(r2s, ddof=1)) if len(r2s) > 1 else 0.0},
        "phenology": summary,
        "linreg": report_targets,
    }
    _write_json(cfg.out / "report.json", report)

    cats = _categories(cfg)
    pdir = cfg.out / "plots"
    pdir.mkdir(parents=True, exist_ok=True)
    for target, res in results.items():
        y = [getattr(m, target) for m in kept]
        svg = plots.regression_svg(
            f"{target.upper()} vs annual soil temperature",
            x,
            y,
            [cats.get(m.plot_id, "?") for m in kept],
            res.slope,
            res.intercept,
            f"{target.upper()} ({TARGET_UNITS[target]})",
        )
        (pdir / f"linreg_{target}.svg").write_text(svg)
    return EXIT_OK


# ------------------------------------------------------------------------ train


@dataclass
class TargetData:
    features: list
    y: np.ndarray
    train: list
    test: list
    y_train: np.ndarray
    y_test: np.ndarray


def target_data(cfg: PipelineConfig, target: str) -> TargetData:
    pheno = _ingest(read_phenology, cfg.out / "phenology.csv", "phenology file")
    weekly = _ingest(lambda p: dc.aggregate_weather_weekly(dc.ingest_weather_daily(p)), cfg.path("weather"), "weather file")
    soil = dc.soil_means(_ingest(dc.ingest_soil, cfg.path("soil"), "soil file"))
    rows = [m for m in pheno if m.qc_pass and (m.plot_id, m.year) in soil]
    try:
        feats = nn.build_features(weekly, soil, [(m.plot_id, m.year) for m in rows])
        yv = {(m.plot_id, m.year): getattr(m, target) for m in rows}
        train, test = nn.split_train_test(feats, cfg.split_ratio, cfg.seed)
    except PhenoflowError as exc:
        raise PipelineExit(EXIT_INPUT, str(exc)) from None
    return TargetData(
        features=feats,
        y=np.array([yv[(f.plot_id, f.year)] for f in feats]),
        train=train,
        test=test,
        y_train=np.array([yv[(f.plot_id, f.year)] for f in train]),
        y_test=np.array([yv[(f.plot_id, f.year)] for f in test]),
    )


def cmd_train(cfg: PipelineConfig, target: str) -> int:
    if target not in TARGETS:
        raise PipelineExit(EXIT_CONFIG, f"unknown target {target!r}")
    td = target_data(cfg, target)
    Xtr, Xte = nn.stack(td.train), nn.stack(td.test)
    try:
        best_hp, best_cv, trials = nn.hyperparam_search(Xtr, td.y_train, cfg.tuning_budget, cfg.seed, cfg.cv_folds)
        model = nn.train_mlp(Xtr, td.y_train, best_hp, cfg.seed)
    except NonFiniteLoss as exc:
        raise PipelineExit(EXIT_DIVERGED, str(exc)) from None
    report = nn.evaluate(model, Xte, td.y_test, float(td.y_train.mean()), best_cv)

    tdir = cfg.out / target
    tdir.mkdir(parents=True, exist_ok=True)
    model.save(tdir / "model.json")
    nn.write_tuning(tdir / "tuning.csv", trials)
    _write_json(
        tdir / "eval.json",
        {
            "target": target,
            **report.as_dict(),
            "best_hyperparams": asdict(best_hp),
            "n_train": len(td.train),
            "n_test": len(td.test),
            "train_mean": float(td.y_train.mean()),
        },
    )
    log.info("%s: test MSE %.4g (naive %.4g)", target, report.test_mse, report.naive_mse)
    return EXIT_OK


# ---------------------------------------------------------------------- explain


def cmd_explain(cfg: PipelineConfig, target: str) -> int:
    if target not in TARGETS:
        raise PipelineExit(EXIT_CONFIG, f"unknown target {target!r}")
    tdir = cfg.out / target
    model = _ingest(nn.MlpModel.load, tdir / "model.json", "model file")
    td = target_data(cfg, target)
    background = ex.select_background(td.train, cfg.background_cap, cfg.seed)

    feats = td.features
    if cfg.explain_max_samples is not None and len(feats) > cfg.explain_max_samples:
        idx = np.sort(np.random.default_rng(cfg.seed).choice(len(feats), cfg.explain_max_samples, replace=False))
        feats = [feats[i] for i in idx]

    expls = [
        ex.kernel_shap(model.predict, f, background, cfg.shap_budget, seed=cfg.seed + i)
        for i, f in enumerate(feats)
    ]
    worst = max(abs(e.reconstructed - e.prediction) for e in expls)

    ex.write_shap(tdir / "shap.csv", target, expls)
    rows = [ex.aggregate_weekly(e) for e in expls]
    cats = _categories(cfg)
    ex.write_aggregates(tdir / "aggregates.csv", ex.grouped_aggregates(target, rows, cats))

    soil_vals = [f.values[-1] for f in feats]
    try:
        r_soil = ex.shap_soil_correlation(soil_vals, [r.soil for r in rows])
    except PhenoflowError:
        r_soil = math.nan
    totals = ex.a_shap(rows)
    _write_json(
        tdir / "explain.json",
        {
            "target": target,
            "n_explained": len(expls),
            "background_rows": int(background.shape[0]),
            "shap_budget": cfg.shap_budget,
            "exact": all(e.exact for e in expls),
            "max_additivity_error": worst,
            "pearson_soil_vs_shap_soil": r_soil,
            "a_shap": totals,
        },
    )

    names = list(ex.VARIABLES)
    (tdir / "a_shap.svg").write_text(
        plots.bar_svg(
            f"Sum of absolute SHAP values ({target.upper()})",
            names,
            [totals[n] for n in names],
            [plots.VARIABLE_COLORS[n] for n in names],
            f"A_SHAP ({TARGET_UNITS[target]})",
        )
    )
    years = sorted({r.year for r in rows})
    for name in names:
        series = {}
        for cat in sorted(set(cats.get(r.plot_id, "?") for r in rows)):
            series[cat] = [
                float(np.sum([getattr(r, name) for r in rows if r.year == y and cats.get(r.plot_id, "?") == cat]))
                for y in years
            ]
        (tdir / f"shap_{name}_by_year.svg").write_text(
            plots.grouped_bar_svg(
                f"SHAP {name} per year and warming category ({target.upper()})",
                [str(y) for y in years],
                series,
                plots.CATEGORY_COLORS,
                f"summed SHAP ({TARGET_UNITS[target]})",
            )
        )
    if worst > ADDITIVITY_TOL:
        raise PipelineExit(EXIT_ADDITIVITY, f"additivity violated: max |base + sum(phi) - f(x)| = {worst:.3g}")
    return EXIT_OK


# -------------------------------------------------------------------------- all


def cmd_all(cfg: PipelineConfig) -> int:
    if not cfg.ndvi:
        cmd_synth(cfg)
    cmd_fit(cfg)
    cmd_analyze(cfg)
    for target in cfg.targets:
        cmd_train(cfg, target)
        cmd_explain(cfg, target)
    return EXIT_OK
