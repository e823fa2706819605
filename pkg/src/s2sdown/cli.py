"""Command-line entry point: one subcommand per pipeline stage.

Exit codes: 0 success, 1 invalid input or arguments, 2 runtime failure.
Diagnostics go to stderr; results go to files only.
"""

from __future__ import annotations

import argparse
import datetime as dt
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .grid import DimensionError, EnsembleField, Field, Grid

log = logging.getLogger("s2sdown")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _grid_arg(text: str) -> Grid:
    parts = [p for p in text.split(",") if p.strip()]
    if len(parts) != 6:
        raise argparse.ArgumentTypeError("grid needs lat_start,lat_step,n_lat,lon_start,lon_step,n_lon")
    try:
        a, b, c, d, e, f = (float(p) for p in parts)
        return Grid(a, b, int(c), d, e, int(f))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _stages_arg(text: str) -> int:
    from .regressors import MAX_STAGES

    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 1 <= v <= MAX_STAGES:
        raise argparse.ArgumentTypeError(f"stages must lie in 1..{MAX_STAGES}, got {v}")
    return v


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _date_arg(text: str) -> dt.date:
    try:
        return dt.date.fromisoformat(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an ISO date: {text!r}") from None


def _check_outputs(args, inputs: list, outputs: list) -> None:
    ins = {Path(p).resolve() for p in inputs if p}
    for o in outputs:
        if o and Path(o).resolve() in ins:
            raise UsageError(f"output {o} would overwrite an input")


# -- commands ------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .io.gfd import write_gfd
    from .preprocess import weekly_average
    from .synth import benchmark_spec, default_inits, generate_ensembles, generate_truth, linear_floor, write_mini_dataset

    out = Path(args.out)
    if args.kind == "mini":
        cfg = write_mini_dataset(out, args.seed)
        log.info("wrote mini dataset and %s", cfg)
        return EXIT_OK
    spec = benchmark_spec(args.seed, args.days)
    truth = generate_truth(spec)
    out.mkdir(parents=True, exist_ok=True)
    write_gfd(out / "x.gfd", truth.x)
    write_gfd(out / "y.gfd", truth.y)
    inits = default_inits(spec)
    write_gfd(out / "ens_x.gfd", generate_ensembles(spec, truth.x, inits, args.deflation, stream=1))
    write_gfd(out / "ens_y.gfd", generate_ensembles(spec, truth.y, inits, args.deflation, stream=2))
    write_gfd(out / "truth_weekly_y.gfd", weekly_average(truth.y, inits, spec.n_leads))
    info = {"seed": spec.seed, "n_days": spec.n_days, "q": spec.q, "sigma_obs": spec.sigma_obs,
            "deflation": args.deflation, "linear_floor": linear_floor(spec).tolist()}
    (out / "benchmark.json").write_text(json.dumps(info, indent=1, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    from .io.gfd import read_gfd, write_gfd
    from .preprocess import deseasonalize_detrend, fit_climatology, fit_trend, regrid_bilinear, weekly_series

    _check_outputs(args, [args.input], [args.out])
    data = read_gfd(args.input)
    if args.grid is not None:
        data = regrid_bilinear(data, args.grid)
    if args.weekly_stride:
        if not isinstance(data, Field):
            raise UsageError("--weekly-stride applies to daily Fields only")
        last = data.times[-1] - dt.timedelta(days=6)
        starts = [d for i, d in enumerate(data.times) if d <= last and (d - data.times[0]).days % args.weekly_stride == 0]
        data = weekly_series(data, starts)
    if args.anomalies:
        if args.history is None or args.before is None:
            raise UsageError("--anomalies needs --history and --before")
        hist = read_gfd(args.history)
        if not isinstance(hist, Field):
            raise UsageError("--history must hold a Field")
        if args.grid is not None:
            hist = regrid_bilinear(hist, args.grid)
        clim = fit_trend(hist, fit_climatology(hist, args.climatology_years, before=args.before))
        data = deseasonalize_detrend(data, clim)
    write_gfd(args.out, data)
    return EXIT_OK


def _samples(path) -> Field:
    from .io.gfd import read_field

    return read_field(path)


def cmd_train(args) -> int:
    from .perturb import fit_residuals
    from .preprocess import fit_normalization
    from .regressors import (FittedRegressor, MlrModel, SmaAtUNet, TrainSpec, mlr_fit_closed_form, ridge_lambda,
                             train)

    _check_outputs(args, [args.x, args.y], [args.out])
    x, y = _samples(args.x), _samples(args.y)
    if x.times != y.times:
        raise UsageError("--x and --y must share the same sample dates")
    n = x.n_times
    n_val = int(round(n * args.val_fraction))
    if not 1 <= n_val < n - 1:
        raise UsageError(f"--val-fraction {args.val_fraction} leaves no usable train/validation split of {n} samples")
    # validation is the chronologically last block
    tr, va = slice(0, n - n_val), slice(n - n_val, n)
    xs, ys = fit_normalization(x.values[tr]), fit_normalization(y.values[tr])
    Xn, Yn = (x.values - xs.mu) / xs.sigma, (y.values - ys.mu) / ys.sigma
    meta = {"target_grid": list(y.grid.to_tuple()), "input_grid": list(x.grid.to_tuple()), "units": y.units}
    if args.model == "mlr":
        model = mlr_fit_closed_form(Xn[tr], Yn[tr], ridge_lambda(args.weight_decay, n - n_val, y.grid.size))
        val = float(np.mean((model.forward(Xn[va]) - Yn[va]) ** 2))
        meta["val_mse_normalized"] = val
    else:
        from .cv import _crop_offsets
        offs = _crop_offsets(x.grid, y.grid, args.stages, y.grid.shape)
        model = SmaAtUNet(x.grid.shape, y.grid.shape, args.stages, args.channels, crop_offsets=offs, seed=args.seed)
        spec = TrainSpec(lr=args.lr, weight_decay=args.weight_decay, epochs=args.epochs, batch_size=args.batch_size,
                         seed=args.seed)
        Xm = Xn.reshape(n, *x.grid.shape)
        model, tl = train(model, Xm[tr], Yn[tr], Xm[va], Yn[va], spec)
        meta.update(val_mse_normalized=tl.best_val, best_epoch=tl.best_epoch,
                    log={"train_mse": tl.train_mse, "val_mse": tl.val_mse})
    reg = FittedRegressor(model, xs, ys, meta=meta)
    res = fit_residuals(y.values[tr], reg.predict(x.values[tr]))
    reg.extras = res.to_arrays()
    reg.save(args.out)
    if args.log:
        from .io.gfd import atomic_write_bytes
        atomic_write_bytes(args.log, (json.dumps(meta, indent=1, sort_keys=True) + "\n").encode())
    return EXIT_OK


def _load_regressor(path):
    from .regressors import FittedRegressor

    reg = FittedRegressor.load(path)
    if "target_grid" not in reg.meta:
        raise UsageError(f"{path}: checkpoint has no target grid")
    a, b, c, d, e, f = reg.meta["target_grid"]
    return reg, Grid(a, b, int(c), d, e, int(f))


def cmd_regress(args) -> int:
    from .io.gfd import read_gfd, write_gfd

    _check_outputs(args, [args.model, args.input], [args.out])
    reg, gout = _load_regressor(args.model)
    data = read_gfd(args.input)
    if data.grid.size != reg.x_stats.mu.size:
        raise DimensionError(f"input has G={data.grid.size}, model expects {reg.x_stats.mu.size}")
    units = reg.meta.get("units", "")
    if isinstance(data, EnsembleField):
        out = EnsembleField(gout, data.inits, reg.predict(data.values), units)
    else:
        out = Field(gout, data.times, reg.predict(data.values), units)
    write_gfd(args.out, out)
    return EXIT_OK


def cmd_perturb(args) -> int:
    from .io.gfd import read_ensemble, write_gfd
    from .perturb import ResidualModel, perturb_ensemble

    _check_outputs(args, [args.model, args.ens], [args.out])
    reg, _ = _load_regressor(args.model)
    res = ResidualModel.from_arrays(reg.extras)
    ens = read_ensemble(args.ens)
    out = perturb_ensemble(ens, res, args.n, args.seed)
    if out.metadata.get("negative_values"):
        log.warning("%d negative values kept in the perturbed ensemble", out.metadata["negative_values"])
    write_gfd(args.out, out)
    return EXIT_OK


def cmd_calibrate(args) -> int:
    from .calibrate import MvaParams, apply_mva, fit_mva
    from .io.checkpoint import read_checkpoint, write_checkpoint
    from .io.gfd import read_ensemble, write_gfd

    _check_outputs(args, [args.train_ens, args.train_ref, args.ens, args.params], [args.out, args.params_out])
    if args.params:
        arrays, _ = read_checkpoint(args.params)
        params = MvaParams.from_arrays(arrays)
    else:
        if not (args.train_ens and args.train_ref):
            raise UsageError("give --params, or both --train-ens and --train-ref")
        params = fit_mva(read_ensemble(args.train_ens), read_ensemble(args.train_ref))
    ens = read_ensemble(args.ens) if args.ens else None
    if args.params_out:
        write_checkpoint(args.params_out, params.to_arrays(), {"kind": "mva"})
    if ens is not None:
        if not args.out:
            raise UsageError("--ens needs --out")
        write_gfd(args.out, apply_mva(ens, params))
    return EXIT_OK


def _truth_values(truth, ens: EnsembleField) -> np.ndarray:
    if isinstance(truth, EnsembleField):
        v = truth.deterministic()
    elif ens.n_lead == 1:
        v = truth.values[:, None, :]
    else:
        raise UsageError("a Field truth only aligns with single-lead ensembles; pass weekly truth as (T, L, 1, G)")
    if truth.grid != ens.grid or v.shape[0] != ens.n_inits:
        raise DimensionError("truth and ensemble grids or initializations differ")
    return v


SCORES = ("mse", "crps", "ssr", "ssim", "spread")


def cmd_verify(args) -> int:
    from . import verify
    from .cv import SSIM_COLUMNS
    from .io.gfd import atomic_write_bytes, read_ensemble, read_gfd
    from .io.tables import write_score_table

    scores = [s.strip() for s in args.scores.split(",") if s.strip()]
    bad = sorted(set(scores) - set(SCORES))
    if bad or not scores:
        raise UsageError(f"unknown scores {bad}; choose from {','.join(SCORES)}")
    _check_outputs(args, [args.ens, args.truth], [args.out])
    ens = read_ensemble(args.ens)
    y = _truth_values(read_gfd(args.truth), ens)
    leads = tuple(range(1, ens.n_lead + 1))
    tables, ssim_rows = [], []
    for s in scores:
        if s == "mse":
            tables.append(verify.ScoreTable("mse", verify.mse_ensemble_mean(y, ens.values), ens.grid, leads))
        elif s == "crps":
            tables.append(verify.ScoreTable("crps", verify.crps_discrete(y, ens.values), ens.grid, leads))
        elif s == "ssr":
            tables.append(verify.ScoreTable("ssr", verify.ssr(y, ens.values, args.ssr_literal), ens.grid, leads))
        elif s == "spread":
            tables.append(verify.ScoreTable("spread", verify.spread(ens.values, args.ssr_literal), ens.grid, leads))
        else:
            r = verify.ssim(y, ens.values)
            ssim_rows = [[Path(args.ens).stem, str(l), repr(float(r.ssim[i])), repr(float(r.luminance[i])),
                          repr(float(r.contrast[i])), repr(float(r.structure[i])), str(bool(r.flagged[i]))]
                         for i, l in enumerate(leads)]
    if tables:
        write_score_table(args.out, tables)
    if ssim_rows:
        path = Path(args.out).with_name(Path(args.out).stem + "_ssim.csv")
        text = ",".join(SSIM_COLUMNS) + "\n" + "".join(",".join(r) + "\n" for r in ssim_rows)
        atomic_write_bytes(path, text.encode())
    return EXIT_OK


def cmd_significance(args) -> int:
    from . import verify
    from .grid import latitude_weighted_mean
    from .io.gfd import read_ensemble, read_gfd
    from .io.tables import write_score_table
    from .significance import bootstrap_delta

    _check_outputs(args, [args.candidate, args.benchmark, args.truth], [args.out])
    cand, bench = read_ensemble(args.candidate), read_ensemble(args.benchmark)
    if cand.inits != bench.inits or cand.grid != bench.grid or cand.n_lead != bench.n_lead:
        raise DimensionError("candidate and benchmark must share inits, leads and grid")
    y = _truth_values(read_gfd(args.truth), cand)
    if args.score == "crps":
        a, b = verify.crps_per_sample(y, cand.values), verify.crps_per_sample(y, bench.values)
    else:
        a = (y - cand.values.mean(axis=2)) ** 2
        b = (y - bench.values.mean(axis=2)) ** 2
    res = bootstrap_delta(lambda s: s.mean(axis=0), (a,), (b,), args.replicates, args.seed, "negative",
                          reduce=lambda s: latitude_weighted_mean(s, cand.grid), literal_sign=args.literal_sign)
    flags = ~np.isfinite(res.delta_median)
    tab = verify.ScoreTable(f"delta_{args.score}", np.where(flags, np.nan, res.delta_median), cand.grid,
                            tuple(range(1, cand.n_lead + 1)), flags, p_value=res.p_value,
                            aggregate_values=res.aggregate_delta_median, aggregate_p_value=res.aggregate_p_value)
    write_score_table(args.out, [tab])
    return EXIT_OK


def cmd_cv_run(args) -> int:
    from .cv import run_experiment
    from .io.config import CONFIG_ENV, load_config

    overrides = {"seed": args.seed} if args.seed is not None else None
    cfg = load_config(args.config, overrides)
    src = args.config or os.environ.get(CONFIG_ENV)
    cfg_path = Path(src) if src else None
    out = Path(args.out) if args.out else (cfg_path.parent if cfg_path else Path(".")) / "runs" / f"seed{cfg.seed}"
    run_experiment(cfg, out, threads=args.threads, ssr_literal=args.ssr_literal)
    print(out, file=sys.stderr)
    return EXIT_OK


def describe(path) -> list[str]:
    """Human-readable summary lines of a GFD or checkpoint file."""
    from .io.checkpoint import MAGIC as CKPT_MAGIC, decode_blocks
    from .io.gfd import decode_gfd

    buf = Path(path).read_bytes()
    if buf[:4] == CKPT_MAGIC:
        arrays, meta = decode_blocks(buf)
        lines = [f"checkpoint {path}: {len(arrays)} blocks"]
        if meta:
            lines.append("meta: " + json.dumps(meta, sort_keys=True)[:400])
        for name, a in arrays.items():
            if isinstance(a, str):
                lines.append(f"  {name}: text ({len(a)} chars)")
            else:
                lines.append(f"  {name}: {a.dtype} {list(a.shape)}")
        return lines
    obj = decode_gfd(buf)
    g = obj.grid
    times = obj.times if isinstance(obj, Field) else obj.inits
    v = obj.values
    kind = "Field" if isinstance(obj, Field) else "EnsembleField"
    dims = f"T={v.shape[0]} G={g.size}" if isinstance(obj, Field) else \
        f"T={v.shape[0]} L={v.shape[1]} M={v.shape[2]} G={g.size}"
    return [f"{kind} {path}", f"dims: {dims}",
            f"grid: lat {g.lats[0]:g}..{g.lats[-1]:g} step {g.lat_step:g} ({g.n_lat}), "
            f"lon {g.lons_unwrapped[0]:g}..{g.lons_unwrapped[-1]:g} step {g.lon_step:g} ({g.n_lon})",
            f"units: {obj.units or '-'}",
            f"dates: {times[0].isoformat()} .. {times[-1].isoformat()}",
            f"stats: min {v.min():.6g} mean {v.mean():.6g} max {v.max():.6g} std {v.std():.6g}"]


def cmd_inspect(args) -> int:
    for line in describe(args.path):
        print(line)
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = _Parser(prog="s2sdown", description="Downscaling, perturbation and verification of ensemble forecasts.",
                formatter_class=fmt)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_, formatter_class=fmt)
        sp.set_defaults(func=fn)
        sp.add_argument("--threads", type=_positive_int, default=1, help="worker bound for parallel-safe stages")
        return sp

    s = add("synth", cmd_synth, "write a synthetic dataset")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--kind", choices=["mini", "benchmark"], default="mini", help="dataset to write")
    s.add_argument("--seed", type=int, default=0, help="generator seed")
    s.add_argument("--days", type=_positive_int, default=4000, help="benchmark length in days")
    s.add_argument("--deflation", type=float, default=0.5, help="benchmark ensemble spread deflation in (0, 1]")

    s = add("preprocess", cmd_preprocess, "regrid, weekly-average and remove climatology/trend")
    s.add_argument("--input", required=True, help="input GFD file")
    s.add_argument("--out", required=True, help="output GFD file")
    s.add_argument("--grid", type=_grid_arg, default=None,
                   help="target grid lat_start,lat_step,n_lat,lon_start,lon_step,n_lon")
    s.add_argument("--weekly-stride", type=_positive_int, default=None,
                   help="7-day forward means every N days (daily Fields)")
    s.add_argument("--anomalies", action="store_true", help="subtract climatology and linear trend")
    s.add_argument("--history", default=None, help="daily Field used to fit the climatology and trend")
    s.add_argument("--before", type=_date_arg, default=None, help="climatology window ends the day before this date")
    s.add_argument("--climatology-years", type=_positive_int, default=15, help="climatology window length")

    s = add("train", cmd_train, "fit a regressor on sample Fields")
    s.add_argument("--model", choices=["mlr", "cnn"], required=True, help="model family")
    s.add_argument("--x", required=True, help="predictor samples (Field GFD)")
    s.add_argument("--y", required=True, help="target samples (Field GFD), same dates as --x")
    s.add_argument("--out", required=True, help="output checkpoint")
    s.add_argument("--stages", type=_stages_arg, default=4, help="CNN downsampling stages (1..5)")
    s.add_argument("--channels", type=_positive_int, default=16, help="CNN base channels")
    s.add_argument("--epochs", type=_positive_int, default=200, help="CNN epoch budget")
    s.add_argument("--batch-size", type=_positive_int, default=32, help="CNN minibatch size")
    s.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate")
    s.add_argument("--weight-decay", type=float, default=0.0, help="L2 penalty coefficient added to the loss")
    s.add_argument("--val-fraction", type=float, default=0.2, help="chronologically last share used for validation")
    s.add_argument("--seed", type=int, default=0, help="initialization and shuffling seed")
    s.add_argument("--log", default=None, help="optional JSON training log")

    s = add("regress", cmd_regress, "apply a regressor member-wise to a Field or EnsembleField")
    s.add_argument("--model", required=True, help="checkpoint from train")
    s.add_argument("--input", required=True, help="predictor GFD (anomalies)")
    s.add_argument("--out", required=True, help="output GFD")

    s = add("perturb", cmd_perturb, "add Gaussian residual draws to every member")
    s.add_argument("--model", required=True, help="checkpoint holding the residual model")
    s.add_argument("--ens", required=True, help="regressed EnsembleField")
    s.add_argument("--n", type=_positive_int, default=20, help="perturbations per member")
    s.add_argument("--seed", type=int, default=0, help="noise seed")
    s.add_argument("--out", required=True, help="output GFD")

    s = add("calibrate", cmd_calibrate, "mean-variance adjustment of an ensemble")
    s.add_argument("--train-ens", default=None, help="training EnsembleField")
    s.add_argument("--train-ref", default=None, help="training reference, single-member EnsembleField")
    s.add_argument("--params", default=None, help="existing MVA parameter checkpoint")
    s.add_argument("--params-out", default=None, help="write fitted parameters here")
    s.add_argument("--ens", default=None, help="EnsembleField to calibrate")
    s.add_argument("--out", default=None, help="calibrated output GFD")

    s = add("verify", cmd_verify, "score an ensemble against verifying values")
    s.add_argument("--scores", default="mse,crps,ssr", help=f"comma list from {','.join(SCORES)}")
    s.add_argument("--ens", required=True, help="EnsembleField")
    s.add_argument("--truth", required=True, help="verifying values: (T, L, 1, G) EnsembleField or single-lead Field")
    s.add_argument("--out", required=True, help="score CSV; SSIM goes to <out>_ssim.csv")
    s.add_argument("--ssr-literal", action="store_true", help="use the squared-variance spread variant")

    s = add("significance", cmd_significance, "bootstrap relative score difference between two ensembles")
    s.add_argument("--score", choices=["crps", "mse"], default="crps", help="negatively oriented score")
    s.add_argument("--candidate", required=True, help="candidate EnsembleField")
    s.add_argument("--benchmark", required=True, help="benchmark EnsembleField")
    s.add_argument("--truth", required=True, help="verifying values")
    s.add_argument("--replicates", type=_positive_int, default=1000, help="bootstrap replicates")
    s.add_argument("--seed", type=int, default=0, help="resampling seed")
    s.add_argument("--literal-sign", action="store_true", help="count improving replicates instead (audit)")
    s.add_argument("--out", required=True, help="output CSV")

    s = add("cv-run", cmd_cv_run, "nested cross-validation experiment")
    s.add_argument("--config", default=None, help="config file (default: $S2SDOWN_CONFIG)")
    s.add_argument("--seed", type=int, default=None, help="override the config seed")
    s.add_argument("--out", default=None, help="run directory (default: runs/seed<seed> next to the config)")
    s.add_argument("--ssr-literal", action="store_true", help="use the squared-variance spread variant")

    s = add("inspect", cmd_inspect, "summarize a GFD or checkpoint file")
    s.add_argument("path", help="file to inspect")
    return p


def main(argv=None) -> int:
    from .cv import LayoutError, StageError
    from .io.config import ConfigError
    from .io.gfd import FormatError
    from .io.tables import CsvImportError

    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:       # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, FormatError, CsvImportError, LayoutError, DimensionError,
            FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except StageError as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
