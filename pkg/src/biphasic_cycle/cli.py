"""Command line interface: ``biphasic-cycle <subcommand> ...``.

Exit codes: 0 success, 2 input error, 3 numerical failure, 4 internal
invariant violation.  Failures print a JSON object on stderr.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import hashlib
import json
import os
import platform
import sys
import warnings
from typing import Optional

import numpy as np

from . import __version__
from .bench import run_benchmark
from .dataio import (ParseError, SchemaError, dump_json, load_csv, load_json, preprocess,
                     write_series_csv)
from .estimation import FitSpec, NonConvergence, Pooling, fit, fit_pooled
from .filtering import PhaseGrid, ZeroLikelihood, filter_series, smoothed_masses
from .model import ModelParams, Variant
from .onset import ConvolutionEngine, onset_distribution, point_predict
from .presets import preset
from .simulate import SafetyCap, SimConfig, simulate
from .stages import population_stage_stats, stage_lengths_from_probs, stage_stats_csv

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_INVARIANT = 0, 2, 3, 4


class InputError(Exception):
    pass


class InvariantViolation(Exception):
    pass


class NumericalFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise InputError(message)


# -- helpers ----------------------------------------------------------------

def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(path, command: str, args, inputs, outputs, seed=None, n_bins=None) -> None:
    import scipy
    import sklearn

    manifest = {
        "command": command,
        "inputs": [{"path": os.path.abspath(p), "sha256": _sha256(p)} for p in inputs if p],
        "outputs": [os.path.abspath(p) for p in outputs],
        "seed": seed,
        "n_bins": n_bins,
        "versions": {"biphasic_cycle": __version__, "numpy": np.__version__,
                     "scipy": scipy.__version__, "scikit-learn": sklearn.__version__,
                     "python": platform.python_version()},
        "replay": {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "manifest")},
        "timestamp": dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds"),
    }
    dump_json(manifest, path)


def _read_toml(path) -> dict:
    if not path:
        return {}
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise InputError(f"{path}: {exc}") from None


def _load_params(path: Optional[str], preset_name: Optional[str] = None) -> ModelParams:
    if preset_name:
        return preset(preset_name)
    if not path:
        raise InputError("either --params or --preset is required")
    d = load_json(path)
    if "params" in d:
        d = d["params"]
    elif "pools" in d:
        pools = d["pools"]
        if len(pools) != 1:
            raise InputError(f"{path} holds {len(pools)} pooled fits; pick one with the fit subcommand")
        d = next(iter(pools.values()))["params"]
    try:
        return ModelParams.from_dict(d)
    except (KeyError, TypeError) as exc:
        raise InputError(f"{path}: not a parameter file ({exc})") from None


def _load_series(path, include_open: bool = False):
    series, report = preprocess(load_csv(path), include_open=include_open)
    if not series:
        raise InputError(f"{path}: no usable cycles after preprocessing")
    return series, report


def _ensure_dir(path) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _params_from_config(cfg: dict) -> ModelParams:
    if "preset" in cfg:
        return preset(str(cfg["preset"]))
    p = cfg.get("params")
    if p is None:
        raise InputError("config needs a 'preset' or a [params] table")
    if "stage1" in p:
        return ModelParams.from_dict(p)
    keys = ("alpha1", "beta1", "alpha2", "beta2", "mu1", "sigma1", "mu2", "sigma2")
    try:
        return ModelParams.explicit(*(float(p[k]) for k in keys))
    except KeyError as exc:
        raise InputError(f"[params] is missing {exc}") from None


def _fit_spec(args, cfg: dict) -> FitSpec:
    d = dict(cfg.get("fit", cfg))
    for k in ("preset", "params"):
        d.pop(k, None)
    if getattr(args, "variant", None):
        d["variant"] = args.variant
    if getattr(args, "pooling", None):
        d["pooling"] = args.pooling
    if getattr(args, "n_bins", None):
        d["n_bins"] = args.n_bins
    if getattr(args, "max_evals", None):
        d["max_evals"] = args.max_evals
    if getattr(args, "no_ci", False):
        d["compute_ci"] = False
    try:
        return FitSpec(**d)
    except TypeError as exc:
        raise InputError(f"bad fit configuration: {exc}") from None


# -- subcommands ----------------------------------------------------------------

def cmd_preprocess(args) -> int:
    out = _ensure_dir(args.out)
    series, report = preprocess(load_csv(args.input), gap_threshold=args.gap_threshold)
    csv_path = os.path.join(out, "cycles.csv")
    rep_path = os.path.join(out, "report.json")
    write_series_csv(series, csv_path)
    dump_json(report.to_dict(), rep_path)
    _write_manifest(os.path.join(out, "manifest.json"), "preprocess", args, [args.input],
                    [csv_path, rep_path])
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _read_toml(args.config)
    sim = dict(cfg.get("simulate", cfg))
    params = _load_params(None, args.preset) if args.preset else _params_from_config(sim)
    for k in ("preset", "params"):
        sim.pop(k, None)
    if args.seed is not None:
        sim["seed"] = args.seed
    if args.n_cycles is not None:
        sim["n_cycles"] = args.n_cycles
    sim.setdefault("n_cycles", 100)
    try:
        config = SimConfig(params=params, **sim)
    except TypeError as exc:
        raise InputError(f"bad simulate configuration: {exc}") from None
    series = simulate(config)
    out = _ensure_dir(args.out)
    data_path = os.path.join(out, "series.csv")
    truth_path = os.path.join(out, "truth.csv")
    write_series_csv(series, data_path)
    with open(truth_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cycle_id", "day", "theta", "switch_day", "cycle_length"])
        for s in series:
            sw = s.meta["switch_days"][0] if s.meta["switch_days"] else ""
            L = s.meta["cycle_lengths"][0] if s.meta["cycle_lengths"] else ""
            for t, th in enumerate(s.theta):
                w.writerow([s.subject_id, t + 1, repr(float(th)), sw, L])
    cfg_path = os.path.join(out, "config.json")
    dump_json(config.to_dict(), cfg_path)
    _write_manifest(os.path.join(out, "manifest.json"), "simulate", args, [args.config],
                    [data_path, truth_path, cfg_path], seed=config.seed)
    return EXIT_OK


def cmd_fit(args) -> int:
    cfg = _read_toml(args.config)
    spec = _fit_spec(args, cfg)
    series, _ = _load_series(args.data)
    init = _load_params(args.init) if args.init else None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NonConvergence)
        if spec.pooling is Pooling.GLOBAL:
            result = fit(series, spec, init)
            payload = result.to_dict()
            converged = result.converged
        else:
            pools = fit_pooled(series, spec, init)
            payload = {"pools": {k: r.to_dict() for k, r in pools.items()}}
            converged = all(r.converged for r in pools.values())
    payload["spec"] = spec.to_dict()
    dump_json(payload, args.out)
    _write_manifest(args.out + ".manifest.json", "fit", args, [args.data, args.config, args.init],
                    [args.out], n_bins=spec.n_bins)
    if not converged and args.strict:
        raise NumericalFailure("optimizer budget exhausted before convergence")
    return EXIT_OK


def cmd_filter(args) -> int:
    params = _load_params(args.params, args.preset)
    series, _ = _load_series(args.series, include_open=True)
    out = _ensure_dir(args.out)
    grid = PhaseGrid(args.n_bins)
    dens_path = os.path.join(out, "densities.csv")
    sum_path = os.path.join(out, "filter.json")
    summary = []
    with open(dens_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["series_id", "day", "bin", "theta", "filtering", "smoothed"])
        for s in series:
            fo = filter_series(s, params, grid=grid)
            sm = smoothed_masses(fo, params)
            for t in range(fo.n_days):
                total = fo.filtering_masses[t].sum()
                if abs(total - 1.0) > 1e-8:
                    raise InvariantViolation(f"filtering mass {total} on day {t + 1} of {s.subject_id}")
            for t in range(fo.n_days):
                for i in range(grid.n_bins):
                    w.writerow([s.subject_id, t + 1, i, f"{grid.centers[i]:.10g}",
                                f"{fo.filtering_masses[t, i] / grid.width:.10g}",
                                f"{sm[t, i] / grid.width:.10g}"])
            summary.append({"series_id": s.subject_id, "loglik": fo.loglik,
                            "log_increments": fo.log_increments.tolist()})
    dump_json({"n_bins": grid.n_bins, "series": summary,
               "total_loglik": float(sum(d["loglik"] for d in summary))}, sum_path)
    _write_manifest(os.path.join(out, "manifest.json"), "filter", args, [args.params, args.series],
                    [dens_path, sum_path], n_bins=grid.n_bins)
    return EXIT_OK


def cmd_predict(args) -> int:
    params = _load_params(args.params, args.preset)
    series, _ = _load_series(args.series, include_open=True)
    if args.series_id:
        series = [s for s in series if s.subject_id == args.series_id]
        if not series:
            raise InputError(f"no cycle with id {args.series_id!r}")
    grid = PhaseGrid(args.n_bins)
    engine = ConvolutionEngine()
    preds = []
    for s in series:
        day = args.at_day if args.at_day is not None else s.n_days
        if day < 1 or day > s.n_days:
            preds.append({"series_id": s.subject_id, "day": day,
                          "error": f"series has {s.n_days} days"})
            continue
        fo = filter_series(s.truncated(day), params, grid=grid)
        h = onset_distribution(fo.filtering[-1], params, engine, args.k_max)
        if abs(h.probs.sum() + h.tail - 1.0) > 1e-6:
            raise InvariantViolation("onset distribution does not sum to one")
        preds.append({"series_id": s.subject_id, "day": day,
                      "onset_distribution": h.to_dict(), "point_prediction": point_predict(h)})
    payload = {"k_max": args.k_max, "n_bins": grid.n_bins, "predictions": preds}
    if args.out:
        dump_json(payload, args.out)
        _write_manifest(args.out + ".manifest.json", "predict", args, [args.params, args.series],
                        [args.out], n_bins=grid.n_bins)
    else:
        json.dump(payload, sys.stdout, indent=2, sort_keys=True)
        sys.stdout.write("\n")
    return EXIT_OK


def cmd_stages(args) -> int:
    params = _load_params(args.params, args.preset)
    series, _ = _load_series(args.series)
    out = _ensure_dir(args.out)
    from .filtering import batch_stage1_probabilities

    probs = batch_stage1_probabilities(series, params, PhaseGrid(args.n_bins), args.basis)
    summaries = []
    cyc_path = os.path.join(out, "cycles.csv")
    with open(cyc_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["series_id", "first_stage_length", "second_stage_length", "monophasic",
                    "monotone", "calls"])
        for s, p in zip(series, probs):
            if p is None:
                w.writerow([s.subject_id, "", "", "", "", "zero_likelihood"])
                continue
            # the last day is the next onset and belongs to the following cycle
            summ = stage_lengths_from_probs(p[:-1])
            summaries.append(summ)
            calls = "".join("1" if v >= 0.5 else "2" for v in p[:-1])
            w.writerow([s.subject_id, summ.first_stage_length, summ.second_stage_length,
                        int(summ.monophasic), int(summ.monotone), calls])
    if not summaries:
        raise NumericalFailure("no cycle could be filtered")
    stats = population_stage_stats(summaries)
    tab_path = os.path.join(out, "stage_stats.csv")
    with open(tab_path, "w", encoding="utf-8") as fh:
        stage_stats_csv(stats, fh)
    _write_manifest(os.path.join(out, "manifest.json"), "stages", args, [args.params, args.series],
                    [cyc_path, tab_path], n_bins=args.n_bins)
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _read_toml(args.config)
    spec = _fit_spec(args, cfg)
    spec = FitSpec(**{**spec.to_dict(), "compute_ci": False})
    train, _ = _load_series(args.train)
    test, _ = _load_series(args.test)
    models = [m.strip() for m in args.models.split(",") if m.strip()]
    for m in models:
        if m != "C":
            try:
                Variant(m)
            except ValueError:
                raise InputError(f"unknown model {m!r}") from None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NonConvergence)
        report = run_benchmark(train, test, models, spec, n_bins=spec.n_bins, k_max=args.k_max)
    out = _ensure_dir(args.out)
    csv_path = os.path.join(out, "rmse.csv")
    json_path = os.path.join(out, "bench.json")
    with open(csv_path, "w", encoding="utf-8") as fh:
        report.to_csv(fh)
    with open(json_path, "w", encoding="utf-8") as fh:
        fh.write(report.to_json() + "\n")
    _write_manifest(os.path.join(out, "manifest.json"), "bench", args,
                    [args.train, args.test, args.config], [csv_path, json_path], n_bins=spec.n_bins)
    return EXIT_OK


def cmd_replay(args) -> int:
    """Re-run the command recorded in a manifest with the same arguments."""
    m = load_json(args.manifest)
    try:
        command, recorded = m["command"], dict(m["replay"])
    except (KeyError, TypeError):
        raise InputError(f"{args.manifest}: not a run manifest") from None
    if command not in COMMANDS or command == "replay":
        raise InputError(f"{args.manifest}: unknown command {command!r}")
    ns = argparse.Namespace(**recorded)
    ns.command = command
    ns.func = COMMANDS[command]
    return ns.func(ns)


COMMANDS = {"preprocess": cmd_preprocess, "simulate": cmd_simulate, "fit": cmd_fit,
            "filter": cmd_filter, "predict": cmd_predict, "stages": cmd_stages,
            "bench": cmd_bench, "replay": cmd_replay}


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="biphasic-cycle", description="Biphasic menstrual cycle state-space model.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def params_args(q):
        q.add_argument("--params", help="FitResult or parameter JSON")
        q.add_argument("--preset", help="age-group preset such as 35-39")
        q.add_argument("--n-bins", type=int, default=512)

    q = sub.add_parser("preprocess", help="raw diary CSV to standardized cycles")
    q.add_argument("--input", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--gap-threshold", type=int, default=5)
    q.set_defaults(func=cmd_preprocess)

    q = sub.add_parser("simulate", help="synthetic cycles from a config")
    q.add_argument("--config")
    q.add_argument("--preset")
    q.add_argument("--seed", type=int)
    q.add_argument("--n-cycles", type=int)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_simulate)

    q = sub.add_parser("fit", help="maximum likelihood fit")
    q.add_argument("--data", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--config")
    q.add_argument("--init")
    q.add_argument("--variant", choices=[v.value for v in Variant])
    q.add_argument("--pooling", choices=[v.value for v in Pooling])
    q.add_argument("--n-bins", type=int)
    q.add_argument("--max-evals", type=int)
    q.add_argument("--no-ci", action="store_true")
    q.add_argument("--strict", action="store_true", help="exit 3 if the optimizer does not converge")
    q.set_defaults(func=cmd_fit)

    q = sub.add_parser("filter", help="filtering and smoothed phase densities")
    params_args(q)
    q.add_argument("--series", required=True)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_filter)

    q = sub.add_parser("predict", help="next-onset distribution")
    params_args(q)
    q.add_argument("--series", required=True)
    q.add_argument("--series-id")
    q.add_argument("--at-day", type=int)
    q.add_argument("--k-max", type=int, default=90)
    q.add_argument("--out")
    q.set_defaults(func=cmd_predict)

    q = sub.add_parser("stages", help="stage calls and stage-length statistics")
    params_args(q)
    q.add_argument("--series", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--basis", choices=["smoothed", "filtering"], default="smoothed")
    q.set_defaults(func=cmd_stages)

    q = sub.add_parser("bench", help="onset prediction RMSE by model and horizon")
    q.add_argument("--train", required=True)
    q.add_argument("--test", required=True)
    q.add_argument("--models", default="FE,RE,I1,I2,I3,C")
    q.add_argument("--config")
    q.add_argument("--n-bins", type=int)
    q.add_argument("--max-evals", type=int)
    q.add_argument("--k-max", type=int, default=90)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_bench)

    q = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    q.add_argument("manifest")
    q.set_defaults(func=cmd_replay)
    return p


def _fail(code: int, exc: BaseException, **extra) -> int:
    err = {"error": type(exc).__name__, "message": str(exc), "exit_code": code, **extra}
    sys.stderr.write(json.dumps(err, sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except ParseError as exc:
        return _fail(EXIT_INPUT, exc, rows=[list(e) for e in exc.errors])
    except (InputError, SchemaError, FileNotFoundError, IsADirectoryError, KeyError,
            ValueError, TypeError) as exc:
        return _fail(EXIT_INPUT, exc)
    except ZeroLikelihood as exc:
        return _fail(EXIT_NUMERIC, exc, day=exc.day, series_id=exc.series_id)
    except (NumericalFailure, SafetyCap, FloatingPointError, np.linalg.LinAlgError) as exc:
        return _fail(EXIT_NUMERIC, exc)
    except (InvariantViolation, AssertionError) as exc:
        return _fail(EXIT_INVARIANT, exc)


if __name__ == "__main__":
    sys.exit(main())
