"""Nested chronological cross-validation and the end-to-end experiment driver.

Years are season-years: a date from July onwards belongs to the next year's
season, so a December-February winter is one unit. Outer folds are contiguous
blocks of season-years; the remaining years form the training pool, which is cut
into contiguous inner blocks for hyperparameter search.
"""

from __future__ import annotations

import dataclasses
import datetime as dt
import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import verify
from .calibrate import apply_mva, fit_mva
from .grid import EnsembleField, Field, Grid, from_epoch_days, latitude_weighted_mean, to_epoch_days
from .io.checkpoint import write_checkpoint
from .io.config import RunConfig
from .io.gfd import atomic_write_bytes, read_ensemble, read_field
from .io.tables import write_score_table
from .perturb import fit_residuals, perturb_ensemble
from .preprocess import (DAYS_PER_WEEK, ClimatologyModel, NormStats, deseasonalize_detrend, fit_climatology,
                         fit_normalization, fit_trend, lead_dates, regrid_bilinear, rolling_climatology,
                         weekly_average, weekly_series)
from .regressors import (FittedRegressor, MlrModel, SearchSpace, SmaAtUNet, TrainSpec, fit_fixed_epochs,
                         hyper_search, mlr_fit_closed_form, ridge_lambda, train)
from .regressors.smaat import reflect_padding
from .significance import bootstrap_delta

log = logging.getLogger(__name__)


class LayoutError(ValueError):
    pass


class LeakageError(AssertionError):
    pass


class StageError(RuntimeError):
    def __init__(self, fold: int | None, stage: str, cause: BaseException):
        where = "setup" if fold is None else f"fold {fold}"
        super().__init__(f"{where}, stage {stage}: {type(cause).__name__}: {cause}")
        self.fold, self.stage = fold, stage


def season_year(date: dt.date) -> int:
    return date.year + 1 if date.month >= 7 else date.year


def season_start(year: int) -> dt.date:
    return dt.date(year - 1, 7, 1)


# -- layout ------------------------------------------------------------------------

@dataclass(frozen=True)
class CvFold:
    index: int
    test_years: tuple[int, ...]
    train_years: tuple[int, ...]
    inner: tuple[tuple[tuple[int, ...], tuple[int, ...]], ...]  # (train, val) per inner fold


@dataclass(frozen=True)
class CvLayout:
    years: tuple[int, ...]
    folds: tuple[CvFold, ...]

    def __post_init__(self):
        seen: list[int] = []
        for f in self.folds:
            if set(f.test_years) & set(f.train_years):
                raise LayoutError(f"fold {f.index}: train and test years overlap")
            if set(f.test_years) | set(f.train_years) != set(self.years):
                raise LayoutError(f"fold {f.index}: train and test do not cover the study period")
            for tr, va in f.inner:
                if set(tr) & set(va) or set(tr) | set(va) != set(f.train_years):
                    raise LayoutError(f"fold {f.index}: inner split does not partition the training pool")
            seen.extend(f.test_years)
        if sorted(seen) != sorted(self.years):
            raise LayoutError("outer test blocks do not partition the study period exactly")

    def fold_of(self, date: dt.date) -> int | None:
        y = season_year(date)
        for f in self.folds:
            if y in f.test_years:
                return f.index
        return None


def _blocks(items: Sequence[int], k: int, what: str) -> list[tuple[int, ...]]:
    n = len(items)
    if k < 1 or n % k:
        raise LayoutError(f"{n} {what} years do not split into {k} equal blocks (remainder {n % k if k else n})")
    b = n // k
    return [tuple(items[i * b:(i + 1) * b]) for i in range(k)]


def build_layout(period, outer_k: int = 3, inner_k: int = 6) -> CvLayout:
    """``period`` is (first season-year, number of years) or an explicit year sequence."""
    if isinstance(period, tuple) and len(period) == 2 and all(isinstance(v, int) for v in period):
        years = tuple(range(period[0], period[0] + period[1]))
    else:
        years = tuple(int(y) for y in period)
    if list(years) != sorted(set(years)):
        raise LayoutError("study years must be strictly increasing")
    folds = []
    for i, test in enumerate(_blocks(years, outer_k, "study")):
        pool = tuple(y for y in years if y not in test)
        inner = tuple((tuple(y for y in pool if y not in va), va) for va in _blocks(pool, inner_k, "training-pool"))
        folds.append(CvFold(i, test, pool, inner))
    return CvLayout(years, tuple(folds))


# -- data preparation ----------------------------------------------------------------

def _window_days(starts: np.ndarray) -> set[int]:
    s = np.asarray(starts, dtype=np.int64).ravel()
    return set((s[:, None] + np.arange(DAYS_PER_WEEK)).ravel().tolist())


@dataclass
class Inputs:
    config: RunConfig
    layout: CvLayout
    x_daily: Field
    y_daily: Field
    hind_x: EnsembleField
    hind_y: EnsembleField | None
    clim_x: ClimatologyModel
    clim_y: ClimatologyModel
    clim_days: set
    sample_dates: list
    x_weekly: Field
    y_weekly: Field


def load_inputs(config: RunConfig) -> Inputs:
    config.require_paths()
    layout = build_layout((config.study_start_year, config.study_years), config.outer_folds, config.inner_folds)
    x = read_field(config.reanalysis_x)
    y = read_field(config.reanalysis_y)
    hx = read_ensemble(config.hindcast_x)
    hy = read_ensemble(config.hindcast_y) if config.hindcast_y else None
    gin, gout = config.grid("input_grid"), config.grid("target_grid")
    if gin is not None:
        x, hx = regrid_bilinear(x, gin), regrid_bilinear(hx, gin)
    if gout is not None:
        y = regrid_bilinear(y, gout)
        hy = regrid_bilinear(hy, gout) if hy is not None else None
    if hx.grid != x.grid:
        raise ValueError("hindcast predictor grid differs from the reanalysis predictor grid")
    if hy is not None and (hy.grid != y.grid or hy.inits != hx.inits or hy.n_lead != hx.n_lead):
        raise ValueError("target hindcasts must share grid with the target reanalysis and inits/leads with hindcast_x")
    start = season_start(config.study_start_year)
    clim_x = fit_climatology(x, config.climatology_years, before=start)
    clim_y = fit_climatology(y, config.climatology_years, before=start)
    clim_start = dt.date(start.year - config.climatology_years, start.month, start.day)
    clim_days = set(range((clim_start - dt.date(1970, 1, 1)).days, (start - dt.date(1970, 1, 1)).days))

    days_x = set(x.epoch_days.tolist()) & set(y.epoch_days.tolist())
    months = set(config.months)
    years = set(layout.years)
    stride = config.sample_stride_days
    samples = []
    for d in x.times:
        k = (d - start).days
        if k < 0 or k % stride or d.month not in months or season_year(d) not in years:
            continue
        e = (d - dt.date(1970, 1, 1)).days
        if all(e + i in days_x for i in range(DAYS_PER_WEEK)):
            samples.append(d)
    if not samples:
        raise ValueError("no training samples fall inside the study period and season filter")
    return Inputs(config, layout, x, y, hx, hy, clim_x, clim_y, clim_days, samples,
                  weekly_series(x, samples), weekly_series(y, samples))


# -- per-fold pipeline -----------------------------------------------------------------

def _fold_seed(seed: int, fold: int, salt: int) -> int:
    return int(np.random.SeedSequence([seed, fold, salt]).generate_state(1)[0])


def _crop_offsets(gin: Grid, gout: Grid, stages: int, out_shape) -> tuple[int, int] | None:
    """Offsets of the target grid inside the padded input grid when it sits on input gridpoints."""
    r = (gout.lat_start - gin.lat_start) / gin.lat_step
    c = (gout.lon_start - gin.lon_start) / gin.lon_step
    if not (np.isclose(gout.lat_step, gin.lat_step) and np.isclose(gout.lon_step, gin.lon_step)):
        return None
    if not (np.isclose(r, round(r)) and np.isclose(c, round(c))):
        return None
    (pt, pb), (pl, pr) = reflect_padding(gin.shape, stages)
    r, c = int(round(r)) + pt, int(round(c)) + pl
    if r < 0 or c < 0 or r + out_shape[0] > gin.n_lat + pt + pb or c + out_shape[1] > gin.n_lon + pl + pr:
        return None
    return r, c


def _make_model(kind: str, config: RunConfig, gin: Grid, gout: Grid, seed: int):
    if kind == "mlr":
        return MlrModel(gin.size, gout.size)
    offs = _crop_offsets(gin, gout, config.cnn_stages, gout.shape)
    return SmaAtUNet(gin.shape, gout.shape, config.cnn_stages, config.cnn_channels, crop_offsets=offs, seed=seed)


def _inputs_for(kind: str, x: np.ndarray, grid: Grid) -> np.ndarray:
    return x.reshape(-1, *grid.shape) if kind == "cnn" else x


@dataclass
class FoldOutput:
    index: int
    tables: list
    ssim_rows: list
    samples: dict                # name -> per-init arrays for the bootstrap
    search: dict
    files: dict
    leakage: dict
    train_days: np.ndarray = None    # epoch days seen in fitting (samples, MVA and climatology windows)
    test_days: np.ndarray = None     # epoch days verified in the test set


def _fit_model(kind: str, inp: Inputs, fold: CvFold, Xn: np.ndarray, Yn: np.ndarray, train_years: np.ndarray,
               seed: int):
    cfg = inp.config
    gin, gout = inp.x_weekly.grid, inp.y_weekly.grid
    inner = [(np.flatnonzero(np.isin(train_years, tr)), np.flatnonzero(np.isin(train_years, va)))
             for tr, va in fold.inner]
    inner = [(a, b) for a, b in inner if a.size and b.size]
    if kind == "mlr":
        space = SearchSpace((1.0, 1.0), tuple(cfg.mlr_weight_decay_range))

        def fit_eval(lr, wd, f):
            a, b = f
            m = mlr_fit_closed_form(Xn[a], Yn[a], ridge_lambda(wd, a.size, gout.size))
            return float(np.mean((m.forward(Xn[b]) - Yn[b]) ** 2)), 0
    else:
        space = SearchSpace(tuple(cfg.lr_range), tuple(cfg.weight_decay_range))

        def fit_eval(lr, wd, f):
            a, b = f
            model = _make_model(kind, cfg, gin, gout, seed)
            spec = TrainSpec(lr=lr, weight_decay=wd, epochs=cfg.epochs, batch_size=cfg.batch_size, seed=seed)
            _, tl = train(model, _inputs_for(kind, Xn[a], gin), Yn[a], _inputs_for(kind, Xn[b], gin), Yn[b], spec)
            return tl.best_val, tl.best_epoch

    res = hyper_search(space, inner, cfg.search_budget, fit_eval, seed=seed)
    if kind == "mlr":
        model = mlr_fit_closed_form(Xn, Yn, ridge_lambda(res.weight_decay, len(Xn), gout.size))
        epochs = 0
    else:
        epochs = max(1, int(round(float(np.mean(res.best_epochs)))))
        spec = TrainSpec(lr=res.lr, weight_decay=res.weight_decay, epochs=epochs, batch_size=cfg.batch_size,
                         seed=seed)
        model = fit_fixed_epochs(_make_model(kind, cfg, gin, gout, seed), _inputs_for(kind, Xn, gin), Yn, spec)
    summary = {"lr": res.lr if kind != "mlr" else None, "weight_decay": res.weight_decay, "score": res.score,
               "epochs": epochs, "trials": [list(t) for t in res.trials]}
    return model, summary


def _ens_tables(prefix: str, y: np.ndarray, ens: np.ndarray, ref_mse, ref_crps, grid: Grid, leads, literal: bool):
    mse = verify.mse_ensemble_mean(y, ens)
    crps = verify.crps_discrete(y, ens)
    out = [verify.ScoreTable(f"mse:{prefix}", mse, grid, leads),
           verify.ScoreTable(f"crps:{prefix}", crps, grid, leads),
           verify.ScoreTable(f"msss:{prefix}", verify.msss(mse, ref_mse), grid, leads),
           verify.ScoreTable(f"crpss:{prefix}", verify.crpss(crps, ref_crps), grid, leads)]
    if ens.shape[2] >= 2:
        out.append(verify.ScoreTable(f"ssr:{prefix}", verify.ssr(y, ens, literal), grid, leads))
    s = verify.ssim(y, ens)
    rows = [[prefix, str(lead), repr(float(s.ssim[i])), repr(float(s.luminance[i])), repr(float(s.contrast[i])),
             repr(float(s.structure[i])), str(bool(s.flagged[i]))] for i, lead in enumerate(leads)]
    return out, rows


def run_fold(inp: Inputs, fold: CvFold, fold_dir: Path, ssr_literal: bool = False) -> FoldOutput:
    cfg = inp.config
    k = fold.index
    stage = "split"
    try:
        sample_years = np.array([season_year(d) for d in inp.sample_dates])
        hind_years = np.array([season_year(d) for d in inp.hind_x.inits])
        test_init_idx = np.flatnonzero(np.isin(hind_years, fold.test_years)
                                       & np.isin([d.month for d in inp.hind_x.inits], cfg.months))
        train_init_idx = np.flatnonzero(np.isin(hind_years, fold.train_years)
                                        & np.isin([d.month for d in inp.hind_x.inits], cfg.months))
        test_sample_idx = np.flatnonzero(np.isin(sample_years, fold.test_years))
        if test_init_idx.size == 0:
            raise ValueError(f"no hindcast initializations in test years {fold.test_years}")
        L = inp.hind_x.n_lead
        test_days = (_window_days(inp.x_weekly.epoch_days[test_sample_idx])
                     | _window_days(lead_dates([inp.hind_x.inits[i] for i in test_init_idx], L)))
        # purge training windows that touch any test-evaluation day
        cand = np.flatnonzero(np.isin(sample_years, fold.train_years))
        e = inp.x_weekly.epoch_days
        keep = np.array([not (_window_days([e[i]]) & test_days) for i in cand], dtype=bool)
        train_idx = cand[keep]
        mva_idx = np.array([i for i in train_init_idx
                            if not (_window_days(lead_dates([inp.hind_x.inits[i]], L)) & test_days)], dtype=np.int64)
        train_days = _window_days(e[train_idx]) | _window_days(
            lead_dates([inp.hind_x.inits[i] for i in mva_idx], L)) if mva_idx.size else _window_days(e[train_idx])
        overlap = (train_days | inp.clim_days) & test_days
        if overlap:
            first = from_epoch_days([min(overlap)])[0]
            raise LeakageError(f"fold {k}: {len(overlap)} training/climatology days overlap the test set, first {first}")
        leakage = {"train_days": len(train_days), "test_days": len(test_days), "overlap": 0,
                   "purged_samples": int((~keep).sum())}

        stage = "preprocess"
        xtr, ytr = inp.x_weekly.select(train_idx), inp.y_weekly.select(train_idx)
        clim_x, clim_y = fit_trend(xtr, inp.clim_x), fit_trend(ytr, inp.clim_y)
        xa_tr, ya_tr = deseasonalize_detrend(xtr, clim_x), deseasonalize_detrend(ytr, clim_y)
        xs, ys = fit_normalization(xa_tr), fit_normalization(ya_tr)
        Xn = (xa_tr.values - xs.mu) / xs.sigma
        Yn = (ya_tr.values - ys.mu) / ys.sigma
        xte, yte = inp.x_weekly.select(test_sample_idx), inp.y_weekly.select(test_sample_idx)
        xa_te = deseasonalize_detrend(xte, clim_x).values
        y_offset_te = clim_y.lookup_days(yte.epoch_days) + clim_y.trend(yte.epoch_days)

        hx_te = inp.hind_x.select(test_init_idx)
        hxa_te = deseasonalize_detrend(hx_te, clim_x).values
        vd = lead_dates(hx_te.inits, L)
        y_off_ens = clim_y.lookup_days(vd) + clim_y.trend(vd)              # (T, L)
        truth = weekly_average(inp.y_daily, hx_te.inits, L).values[:, :, 0, :]
        gout = inp.y_weekly.grid
        leads = tuple(range(1, L + 1))

        stage = "reference"
        ref_members = np.stack([rolling_climatology(inp.y_daily, [from_epoch_days([d])[0] for d in vd[:, l]],
                                                    cfg.climatology_years) for l in range(L)], axis=1)
        ref_mse = verify.mse_ensemble_mean(truth, ref_members)
        ref_crps = verify.crps_discrete(truth, ref_members)
        clim_det = rolling_climatology(inp.y_daily, yte.times, cfg.climatology_years).mean(axis=1)
        tables = [verify.ScoreTable("mse_reanalysis:climatology", verify.mse_deterministic(yte.values, clim_det)[None],
                                    gout, (0,))]
        samples = {"se_reanalysis:climatology": ((yte.values - clim_det) ** 2)[:, None, :]}
        t, rows = _ens_tables("climatology", truth, ref_members, ref_mse, ref_crps, gout, leads, ssr_literal)
        tables += t
        ssim_rows = rows
        samples["crps:climatology"] = verify.crps_per_sample(truth, ref_members)
        samples["se:climatology"] = (truth - ref_members.mean(axis=2)) ** 2

        files = {}
        if inp.hind_y is not None:
            stage = "calibrate"
            hy_tr = inp.hind_y.select(mva_idx).values
            truth_tr = weekly_average(inp.y_daily, [inp.hind_y.inits[i] for i in mva_idx], L).values
            params = fit_mva(hy_tr, truth_tr)
            write_checkpoint(fold_dir / "mva.ckpt", params.to_arrays(), {"fold": k})
            files["mva.ckpt"] = fold_dir / "mva.ckpt"
            raw = inp.hind_y.select(test_init_idx).values
            for name, ens in (("dynamical_raw", raw), ("dynamical_mva", apply_mva(raw, params))):
                t, rows = _ens_tables(name, truth, ens, ref_mse, ref_crps, gout, leads, ssr_literal)
                tables += t
                ssim_rows += rows
                samples[f"crps:{name}"] = verify.crps_per_sample(truth, ens)
                samples[f"se:{name}"] = (truth - ens.mean(axis=2)) ** 2

        search = {}
        for kind in cfg.models:
            stage = f"train:{kind}"
            seed = _fold_seed(cfg.seed, k, 1 + cfg.models.index(kind))
            model, search[kind] = _fit_model(kind, inp, fold, Xn, Yn, np.array(sample_years[train_idx]), seed)
            stage = f"residuals:{kind}"
            reg = FittedRegressor(model, xs, ys)
            res = fit_residuals(ya_tr.values, reg.predict(xa_tr.values))
            reg.extras = res.to_arrays()
            reg.meta = {"fold": k, "kind": kind, "search": search[kind],
                        "clim_x_trend": [clim_x.slope, clim_x.intercept],
                        "clim_y_trend": [clim_y.slope, clim_y.intercept]}
            reg.save(fold_dir / f"{kind}.ckpt")
            files[f"{kind}.ckpt"] = fold_dir / f"{kind}.ckpt"

            stage = f"evaluate:{kind}"
            pred = reg.predict(xa_te) + y_offset_te[:, None]
            tables.append(verify.ScoreTable(f"mse_reanalysis:{kind}", verify.mse_deterministic(yte.values, pred)[None],
                                            gout, (0,)))
            samples[f"se_reanalysis:{kind}"] = ((yte.values - pred) ** 2)[:, None, :]

            stage = f"ensemble:{kind}"
            regressed = reg.predict(hxa_te) + y_off_ens[:, :, None, None]
            reg_ens = EnsembleField(gout, hx_te.inits, regressed, inp.y_daily.units)
            pert = perturb_ensemble(reg_ens, res, cfg.perturbations, _fold_seed(cfg.seed, k, 100 + cfg.models.index(kind)))
            for name, ens in ((kind, regressed), (f"{kind}_perturbed", pert.values)):
                t, rows = _ens_tables(name, truth, ens, ref_mse, ref_crps, gout, leads, ssr_literal)
                tables += t
                ssim_rows += rows
                samples[f"crps:{name}"] = verify.crps_per_sample(truth, ens)
                samples[f"se:{name}"] = (truth - ens.mean(axis=2)) ** 2

        stage = "write"
        write_score_table(fold_dir / "scores.csv", tables)
        _write_ssim(fold_dir / "ssim.csv", ssim_rows)
        files["scores.csv"] = fold_dir / "scores.csv"
        files["ssim.csv"] = fold_dir / "ssim.csv"
        return FoldOutput(k, tables, ssim_rows, samples, search, files, leakage,
                          np.array(sorted(train_days | inp.clim_days)), np.array(sorted(test_days)))
    except LeakageError:
        raise
    except Exception as exc:
        raise StageError(k, stage, exc) from exc


SSIM_COLUMNS = ["model", "lead", "ssim", "luminance", "contrast", "structure", "flagged"]


def _write_ssim(path: Path, rows) -> None:
    text = ",".join(SSIM_COLUMNS) + "\n" + "".join(",".join(r) + "\n" for r in rows)
    atomic_write_bytes(path, text.encode("utf-8"))


# -- fold aggregation and significance ----------------------------------------------

def average_tables(per_fold: list[list]) -> list:
    """Mean of each named table over folds; a cell flagged in any fold stays flagged."""
    out = []
    for tabs in zip(*per_fold):
        names = {t.name for t in tabs}
        if len(names) != 1:
            raise ValueError(f"folds disagree on table order: {sorted(names)}")
        flags = np.logical_or.reduce([t.flags for t in tabs])
        vals = np.mean([np.where(t.flags, 0.0, t.values) for t in tabs], axis=0)
        vals = np.where(flags, np.nan, vals)
        out.append(verify.ScoreTable(tabs[0].name, vals, tabs[0].grid, tabs[0].leads, flags))
    return out


# candidate vs benchmark pairs, by sample-array key suffix
COMPARISONS = (
    ("mlr", "climatology"), ("cnn", "climatology"), ("cnn", "mlr"),
    ("mlr", "dynamical_mva"), ("cnn", "dynamical_mva"),
    ("mlr_perturbed", "dynamical_mva"), ("cnn_perturbed", "dynamical_mva"),
    ("mlr_perturbed", "mlr"), ("cnn_perturbed", "cnn"),
)


def significance_tables(samples: dict, grid: Grid, n_replicates: int, seed: int) -> list:
    out = []

    def mean0(a):
        return a.mean(axis=0)

    def reduce(s):
        return latitude_weighted_mean(s, grid)

    for score in ("se_reanalysis", "se", "crps"):
        label = {"se_reanalysis": "mse_reanalysis", "se": "mse", "crps": "crps"}[score]
        for cand, bench in COMPARISONS:
            a, b = samples.get(f"{score}:{cand}"), samples.get(f"{score}:{bench}")
            if a is None or b is None:
                continue
            res = bootstrap_delta(mean0, (a,), (b,), n_replicates, seed, "negative", reduce=reduce)
            flags = ~np.isfinite(res.delta_median)
            leads = (0,) if score == "se_reanalysis" else tuple(range(1, a.shape[1] + 1))
            out.append(verify.ScoreTable(f"delta_{label}:{cand}-vs-{bench}",
                                         np.where(flags, np.nan, res.delta_median), grid, leads, flags,
                                         p_value=res.p_value, aggregate_values=res.aggregate_delta_median,
                                         aggregate_p_value=res.aggregate_p_value))
    return out


# -- driver ----------------------------------------------------------------------------

def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class RunResult:
    out_dir: Path
    manifest: dict
    folds: list = field(default_factory=list)


def run_experiment(config: RunConfig, out_dir, threads: int = 1, ssr_literal: bool = False,
                   extra_manifest: dict | None = None) -> RunResult:
    """Run every outer fold, then fold means and bootstrap significance on the pooled test inits.

    On failure a STALE marker naming the fold and stage is left in ``out_dir``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stale = out_dir / "STALE"
    atomic_write_bytes(stale, b"run in progress\n")
    try:
        try:
            inp = load_inputs(config)
        except Exception as exc:
            raise StageError(None, "load", exc) from exc
        atomic_write_bytes(out_dir / "config.cfg", config.to_text().encode("utf-8"))
        dirs = []
        for f in inp.layout.folds:
            d = out_dir / f"fold{f.index}"
            d.mkdir(exist_ok=True)
            dirs.append(d)
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                outs = list(pool.map(lambda fd: run_fold(inp, fd[0], fd[1], ssr_literal),
                                     zip(inp.layout.folds, dirs)))
        else:
            outs = [run_fold(inp, f, d, ssr_literal) for f, d in zip(inp.layout.folds, dirs)]

        grid = inp.y_weekly.grid
        mean_tables = average_tables([o.tables for o in outs])
        write_score_table(out_dir / "scores_mean.csv", mean_tables)
        pooled = {key: np.concatenate([o.samples[key] for o in outs], axis=0) for key in outs[0].samples}
        sig = significance_tables(pooled, grid, config.bootstrap_replicates, _fold_seed(config.seed, 999, 0))
        write_score_table(out_dir / "significance.csv", sig)

        files = {"config.cfg": out_dir / "config.cfg", "scores_mean.csv": out_dir / "scores_mean.csv",
                 "significance.csv": out_dir / "significance.csv"}
        for o, d in zip(outs, dirs):
            for name, p in o.files.items():
                files[f"{d.name}/{name}"] = p
        manifest = {
            "layout": [{"fold": f.index, "test_years": list(f.test_years), "train_years": list(f.train_years),
                        "inner": [{"train": list(a), "val": list(b)} for a, b in f.inner]}
                       for f in inp.layout.folds],
            "leakage": {f"fold{o.index}": o.leakage for o in outs},
            "search": {f"fold{o.index}": o.search for o in outs},
            "files": {name: _sha256(p) for name, p in sorted(files.items())},
        }
        if extra_manifest:
            manifest.update(extra_manifest)
        atomic_write_bytes(out_dir / "manifest.json", (json.dumps(manifest, indent=1, sort_keys=True) + "\n").encode())
    except BaseException as exc:
        atomic_write_bytes(stale, f"{type(exc).__name__}: {exc}\n".encode("utf-8"))
        raise
    stale.unlink()
    return RunResult(out_dir, manifest, outs)


def config_snapshot(config: RunConfig) -> dict:
    return dataclasses.asdict(config)
