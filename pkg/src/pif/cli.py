"""Command-line entry point.

Every command writes its tables as CSV next to a ``report.json`` manifest that
holds the fully resolved configuration.  Passing that manifest back through
``--config`` reruns the command with identical numerical output.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import CellSet, DataError, Dataset, holdout_split
from .experiment import (REPORT_COLUMNS, CompareSettings, aggregate, check_methods, compare,
                         fit_substitutes, outcome_inputs, run_cells, run_method, sensitivity_curve,
                         sensitivity_jobs, sweep_jobs)
from .factor import KINDS, fit_factor
from .metrics import MetricError, auc, baseline_rates, heldout_loglik, influence_mse
from .outcome import VARIANTS
from .ppc import DEFAULT_K_LIST, PPC_COLUMNS, ppc_table
from .simulate import LEVELS, SETTINGS, ConfigError, SimConfig, read_dataset, simulate, write_dataset
from .vi import ModelError

log = logging.getLogger("pif")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
THREADS_ENV = "PIF_THREADS"

AGGREGATE_COLUMNS = ("method", "setting", "level", "n_seeds", "mse_mean", "mse_se",
                     "mse_x1e3_mean", "mse_x1e3_se", "mean_beta_hat", "all_converged")
CURVE_COLUMNS = ("method", "strength", "n_seeds", "mse_mean", "mse_se", "mse_x1e3_mean",
                 "mse_x1e3_se", "mean_beta_hat", "all_converged")
SENSITIVITY_COLUMNS = REPORT_COLUMNS[:4] + ("strength",) + REPORT_COLUMNS[4:]
EVALUATE_COLUMNS = ("method", "heldout_loglik", "auc", "n_pos", "n_neg", "mse", "converged",
                    "runtime_s")
RUNTIME_FIELDS = ("runtime_s", "cell_runtime_s")


# --------------------------------------------------------------------------
# config plumbing

def load_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config: no such file {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: {path} is not valid JSON ({exc})") from None
    if not isinstance(d, dict):
        raise ConfigError("config: expected a JSON object")
    return d


def load_config(path, command: str) -> dict:
    """A plain config file, or the resolved config embedded in an earlier report."""
    if path is None:
        return {}
    d = load_json(path)
    if "command" in d and "config" in d:
        if d["command"] != command:
            raise ConfigError(f"command: manifest was written by {d['command']!r}, not {command!r}")
        return dict(d["config"])
    return d


def _pop_fit(d: dict) -> CompareSettings:
    return CompareSettings.from_dict(d.pop("fit", None))


def _pop_list(d: dict, key: str, default, cast=lambda v: v):
    v = d.pop(key, default)
    if isinstance(v, (str, int, float)):
        v = [v]
    if not isinstance(v, (list, tuple)):
        raise ConfigError(f"{key}: expected a list")
    try:
        return [cast(x) for x in v]
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: could not read {v!r}") from None


def parse_list(text, cast=str, key="list"):
    """Comma-separated values; integer ranges such as ``0-9`` expand."""
    out = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        if cast is int and "-" in part[1:]:
            lo, hi = part.split("-", 1)
            try:
                out.extend(range(int(lo), int(hi) + 1))
            except ValueError:
                raise ConfigError(f"{key}: bad range {part!r}") from None
            continue
        try:
            out.append(cast(part))
        except ValueError:
            raise ConfigError(f"{key}: could not read {part!r}") from None
    return out


def _pop_float(d: dict, key: str, default) -> float:
    v = d.pop(key, default)
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{key}: expected a number, got {v!r}")
    return float(v)


def _seed_list(v):
    if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 0:
        raise ValueError(v)
    return int(v)


def default_workers() -> int:
    raw = os.environ.get(THREADS_ENV, "").strip()
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV}: expected a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV}: expected a positive integer, got {raw!r}")
    return n


# --------------------------------------------------------------------------
# output

def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def write_csv(path, rows, columns) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in columns])


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.bool_,)):
        return bool(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else None
    return v


def write_report(out: Path, command: str, config: dict, extra=None) -> Path:
    man = {"command": command, "version": __version__, "config": config}
    if extra:
        man.update(extra)
    path = out / "report.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(man), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _outdir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_dataset(path):
    path = Path(path)
    if not path.is_dir():
        raise DataError(f"data: {path} is not a dataset directory")
    try:
        return read_dataset(path)
    except FileNotFoundError as exc:
        raise DataError(f"data: missing file {exc.filename}") from None


def _dataset_tags(man: dict) -> dict:
    cfg = man.get("config", {})
    return {"setting": cfg.get("setting", ""), "level": cfg.get("level", ""),
            "seed": man.get("seed", "")}


# --------------------------------------------------------------------------
# commands

def cmd_simulate(args) -> int:
    d = load_config(args.config, "simulate")
    if args.seed is not None:
        d["seed"] = args.seed
    violation = d.pop("violation", None)
    if violation is not None:
        if not isinstance(violation, dict):
            raise ConfigError("violation: expected an object")
        missing = {"frac_pairs", "n_shared_items", "strength"} - set(violation)
        if missing:
            raise ConfigError(f"violation.{sorted(missing)[0]}: required")
    cfg = SimConfig.from_dict(d)
    ds = simulate(cfg, violation=violation)
    resolved = cfg.to_dict()
    if violation is not None:
        resolved["violation"] = violation
    write_dataset(ds, args.out, cfg, extra={"command": "simulate", "version": __version__,
                                            "config": resolved})
    log.info("wrote %d persons x %d items to %s", ds.n_persons, ds.n_items, args.out)
    return EXIT_OK


def _data_config(args, command):
    d = load_config(args.config, command)
    if getattr(args, "data", None):
        d["data"] = str(args.data)
    if "data" not in d:
        raise ConfigError("data: a dataset directory is required")
    return d


def _check_empty(d: dict):
    if d:
        raise ConfigError(f"{sorted(d)[0]}: unknown config field")


def cmd_compare(args) -> int:
    d = _data_config(args, "compare")
    if args.methods is not None:
        d["methods"] = parse_list(args.methods, key="methods")
    data = d.pop("data")
    methods = check_methods(_pop_list(d, "methods", list(VARIANTS)))
    cs = _pop_fit(d)
    _check_empty(d)
    ds, man = _read_dataset(data)
    rows, posts = compare(ds, methods, cs, _dataset_tags(man))
    out = _outdir(args.out)
    write_csv(out / "compare.csv", rows, REPORT_COLUMNS)
    for method, post in posts.items():
        post.save(out / "fits" / method)
    write_report(out, "compare", {"data": data, "methods": methods, "fit": cs.to_dict()},
                 {"dataset": man})
    _log_rows(rows)
    return EXIT_OK


def _log_rows(rows):
    for r in rows:
        log.info("%-11s mse x1e3 %.4g  mean beta %.4g  converged %s", r["method"],
                 r["mse_x1e3"], r["mean_beta_hat"], r["converged"])


def _grid_base(d: dict) -> SimConfig:
    return SimConfig.from_dict(d)


def cmd_sweep(args) -> int:
    d = load_config(args.config, "sweep")
    for key, cast in (("settings", str), ("levels", str), ("seeds", int), ("methods", str)):
        v = getattr(args, key)
        if v is not None:
            d[key] = parse_list(v, cast, key)
    settings = _pop_list(d, "settings", list(SETTINGS), str)
    levels = _pop_list(d, "levels", list(LEVELS), str)
    seeds = _pop_list(d, "seeds", list(range(10)), _seed_list)
    methods = check_methods(_pop_list(d, "methods", list(VARIANTS), str))
    cs = _pop_fit(d)
    base = _grid_base(d)
    jobs = sweep_jobs(base, methods, cs, settings, levels, seeds)
    workers = args.workers or default_workers()
    log.info("sweep: %d cells on %d worker(s)", len(jobs), workers)
    rows = [r for cell in run_cells(jobs, workers) for r in cell]
    agg = aggregate(rows)
    out = _outdir(args.out)
    write_csv(out / "rows.csv", rows, REPORT_COLUMNS)
    write_csv(out / "aggregate.csv", agg, AGGREGATE_COLUMNS)
    base_d = base.to_dict()
    for k in ("setting", "level", "seed", "s_gamma", "s_alpha"):
        base_d.pop(k)
    config = dict(base_d, settings=settings, levels=levels, seeds=seeds, methods=methods,
                  fit=cs.to_dict())
    write_report(out, "sweep", config)
    return EXIT_OK


def cmd_sensitivity(args) -> int:
    d = load_config(args.config, "sensitivity")
    if args.strengths is not None:
        d["strengths"] = parse_list(args.strengths, float, "strengths")
    if args.seeds is not None:
        d["seeds"] = parse_list(args.seeds, int, "seeds")
    for key in ("frac_pairs", "n_shared_items", "method"):
        v = getattr(args, key)
        if v is not None:
            d[key] = v
    strengths = _pop_list(d, "strengths", [0.0, 0.5, 1.0, 2.0], float)
    seeds = _pop_list(d, "seeds", list(range(10)), _seed_list)
    frac_pairs = _pop_float(d, "frac_pairs", 0.3)
    n_shared = d.pop("n_shared_items", None)
    method = d.pop("method", "pif-joint")
    check_methods([method])
    cs = _pop_fit(d)
    base = _grid_base(d)
    if n_shared is None:
        n_shared = int(round(base.n_items / 3))
    if not isinstance(n_shared, int) or isinstance(n_shared, bool):
        raise ConfigError(f"n_shared_items: expected an integer, got {n_shared!r}")
    jobs = sensitivity_jobs(base, strengths, frac_pairs, n_shared, cs, seeds, method)
    workers = args.workers or default_workers()
    rows = [r for cell in run_cells(jobs, workers) for r in cell]
    curve, monotone = sensitivity_curve(rows)
    out = _outdir(args.out)
    write_csv(out / "rows.csv", rows, SENSITIVITY_COLUMNS)
    write_csv(out / "curve.csv", curve, CURVE_COLUMNS)
    base_d = base.to_dict()
    base_d.pop("seed")
    config = dict(base_d, strengths=strengths, seeds=seeds, frac_pairs=frac_pairs,
                  n_shared_items=n_shared, method=method, fit=cs.to_dict())
    write_report(out, "sensitivity", config, {"monotone": monotone})
    log.info("sensitivity: monotone trend %s", monotone)
    return EXIT_OK


def cmd_ppc(args) -> int:
    d = _data_config(args, "ppc")
    if args.K is not None:
        d["K"] = parse_list(args.K, int, "K")
    for key in ("model", "fraction", "replicates", "seed"):
        v = getattr(args, key)
        if v is not None:
            d[key] = v
    data = d.pop("data")
    model = d.pop("model", "joint")
    if model not in KINDS:
        raise ConfigError(f"model: expected one of {KINDS}, got {model!r}")
    K_list = _pop_list(d, "K", list(DEFAULT_K_LIST))
    if not K_list or any(not isinstance(K, int) or isinstance(K, bool) or K < 1 for K in K_list):
        raise ConfigError(f"K: expected positive integers, got {K_list!r}")
    fraction = _pop_float(d, "fraction", 0.1)
    if not 0 < fraction < 1:
        raise ConfigError(f"fraction: expected a value in (0, 1), got {fraction}")
    replicates = d.pop("replicates", 100)
    if not isinstance(replicates, int) or replicates < 1:
        raise ConfigError(f"replicates: expected a positive integer, got {replicates!r}")
    seed = _seed_or_fail(d.pop("seed", 0))
    cs = _pop_fit(d)
    _check_empty(d)
    ds, man = _read_dataset(data)
    rows = ppc_table(ds.adjacency, ds.x, model, K_list, fraction, replicates, seed,
                     cs.factor_prior, cs.opts, cs.backend)
    out = _outdir(args.out)
    write_csv(out / "ppc.csv", rows, PPC_COLUMNS)
    config = {"data": data, "model": model, "K": K_list, "fraction": fraction,
              "replicates": replicates, "seed": seed, "fit": cs.to_dict()}
    write_report(out, "ppc", config, {"dataset": man})
    for r in rows:
        log.info("K=%-3d %-9s p %.3f  mean score %.3f", r["K"], r["target"], r["p_value"],
                 r["mean_score"])
    return EXIT_OK


def _seed_or_fail(v) -> int:
    try:
        return _seed_list(v)
    except ValueError:
        raise ConfigError(f"seed: expected a nonnegative integer, got {v!r}") from None


def cmd_fit(args) -> int:
    d = _data_config(args, "fit")
    if args.model is not None:
        d["model"] = args.model
    data = d.pop("data")
    model = d.pop("model", "pif-joint")
    cs = _pop_fit(d)
    _check_empty(d)
    if model not in KINDS + VARIANTS:
        raise ConfigError(f"model: expected one of {KINDS + VARIANTS}, got {model!r}")
    ds, man = _read_dataset(data)
    out = _outdir(args.out)
    summary = {}
    if model in KINDS:
        size = cs.Q if model == "pmf" else cs.K
        fit = fit_factor(model, ds.adjacency, ds.x, size, cs.factor_prior, cs.opts, cs.backend)
        fit.save(out / "fit")
        summary = fit.manifest()
    else:
        subs = fit_substitutes(ds, [model], cs)
        for kind, fit in subs.items():
            fit.save(out / "substitutes" / kind)
        post = run_method(ds, model, subs, cs)
        post.save(out / "fit")
        summary = post.manifest()
        if ds.truth is not None:
            keep = ~post.no_peers
            summary["mse"] = influence_mse(post.beta_hat[keep], ds.truth.beta[keep])
    write_report(out, "fit", {"data": data, "model": model, "fit": cs.to_dict()},
                 {"dataset": man, "summary": summary})
    return EXIT_OK


def sample_negatives(y, n: int, rng: np.random.Generator) -> CellSet:
    """``n`` distinct cells where ``y`` is zero, drawn uniformly."""
    n_rows, n_cols = y.shape
    n_zero = n_rows * n_cols - y.nnz
    if n > n_zero:
        raise DataError(f"asked for {n} zero cells but only {n_zero} exist")
    taken = set(map(tuple, np.column_stack(y.triplets()[:2]).tolist()))
    rows, cols = [], []
    while len(rows) < n:
        r, c = rng.integers(n_rows), rng.integers(n_cols)
        if (r, c) not in taken:
            taken.add((r, c))
            rows.append(r)
            cols.append(c)
    return CellSet.build(np.array(rows, dtype=np.int64), np.array(cols, dtype=np.int64), y.shape)


def evaluate_methods(ds: Dataset, methods, cs: CompareSettings, fraction: float, seed: int):
    """Held-out log-likelihood and AUC of each method's rates, plus the 1/m_i baseline.

    A fraction of each person's nonzero outcomes is held out; an equal number of
    zero cells serves as negatives.  Held-out cells count as zeros in training.
    """
    split_seq, neg_seq = np.random.SeedSequence(seed).spawn(2)
    train_y, held = holdout_split(ds.y, fraction, np.random.default_rng(split_seq))
    if len(held) == 0:
        raise DataError("no outcomes could be held out; every person has at most one")
    neg = sample_negatives(ds.y, len(held), np.random.default_rng(neg_seq))
    rows_ = np.concatenate([held.rows, neg.rows])
    cols_ = np.concatenate([held.cols, neg.cols])
    counts = np.concatenate([held.values(ds.y), np.zeros(len(neg))])
    labels = counts > 0
    train = Dataset(ds.adjacency, ds.x, train_y, ds.truth)
    subs = fit_substitutes(train, methods, cs)
    out = []
    base = baseline_rates(ds.x)(rows_)
    out.append({"method": "baseline", "heldout_loglik": heldout_loglik(base, counts),
                "auc": auc(base, labels), "n_pos": len(held), "n_neg": len(neg),
                "mse": float("nan"), "converged": True, "runtime_s": 0.0})
    for method in methods:
        post = run_method(train, method, subs, cs)
        inputs = outcome_inputs(train, method, subs, cs.binarize_exposure)
        rates = post.rates(rows_, cols_, inputs)
        mse = float("nan")
        if ds.truth is not None:
            keep = ~post.no_peers
            mse = influence_mse(post.beta_hat[keep], ds.truth.beta[keep])
        out.append({"method": method, "heldout_loglik": heldout_loglik(rates, counts),
                    "auc": auc(rates, labels), "n_pos": len(held), "n_neg": len(neg),
                    "mse": mse, "converged": post.converged, "runtime_s": post.runtime})
    return out


def cmd_evaluate(args) -> int:
    d = _data_config(args, "evaluate")
    if args.methods is not None:
        d["methods"] = parse_list(args.methods, key="methods")
    for key in ("fraction", "seed"):
        v = getattr(args, key)
        if v is not None:
            d[key] = v
    data = d.pop("data")
    methods = _pop_list(d, "methods", ["unadjusted", "pif-net", "pif-joint"])
    methods = check_methods(methods)
    fraction = _pop_float(d, "fraction", 0.2)
    if not 0 < fraction < 1:
        raise ConfigError(f"fraction: expected a value in (0, 1), got {fraction}")
    seed = _seed_or_fail(d.pop("seed", 0))
    cs = _pop_fit(d)
    _check_empty(d)
    ds, man = _read_dataset(data)
    rows = evaluate_methods(ds, methods, cs, fraction, seed)
    out = _outdir(args.out)
    write_csv(out / "evaluate.csv", rows, EVALUATE_COLUMNS)
    write_report(out, "evaluate", {"data": data, "methods": methods, "fraction": fraction,
                                   "seed": seed, "fit": cs.to_dict()}, {"dataset": man})
    for r in rows:
        log.info("%-11s HOL %.4f  AUC %.4f", r["method"], r["heldout_loglik"], r["auc"])
    return EXIT_OK


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pif", description="Poisson influence factorization")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_, data=False):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=func)
        sp.add_argument("--config", help="JSON config, or a report.json to rerun")
        sp.add_argument("--out", required=True, help="output directory")
        if data:
            sp.add_argument("--data", help="dataset directory")
        return sp

    sp = add("simulate", cmd_simulate, "simulate a dataset")
    sp.add_argument("--seed", type=int)

    sp = add("compare", cmd_compare, "fit and score methods on one dataset", data=True)
    sp.add_argument("--methods", help=f"comma-separated subset of {','.join(VARIANTS)}")

    sp = add("sweep", cmd_sweep, "settings x levels x seeds grid")
    sp.add_argument("--settings")
    sp.add_argument("--levels")
    sp.add_argument("--seeds", help="e.g. 0-9 or 0,3,5")
    sp.add_argument("--methods")
    sp.add_argument("--workers", type=int, help=f"worker processes (default ${THREADS_ENV} or 1)")

    sp = add("sensitivity", cmd_sensitivity, "influence error against shared-preference strength")
    sp.add_argument("--strengths", help="e.g. 0,0.5,1,2")
    sp.add_argument("--frac-pairs", dest="frac_pairs", type=float)
    sp.add_argument("--n-shared-items", dest="n_shared_items", type=int)
    sp.add_argument("--method")
    sp.add_argument("--seeds")
    sp.add_argument("--workers", type=int)

    sp = add("ppc", cmd_ppc, "posterior predictive checks over model sizes", data=True)
    sp.add_argument("--model", choices=KINDS)
    sp.add_argument("--K", help="comma-separated model sizes (default 3,5,8,10)")
    sp.add_argument("--fraction", type=float)
    sp.add_argument("--replicates", type=int)
    sp.add_argument("--seed", type=int)

    sp = add("fit", cmd_fit, "fit one factor model or outcome variant", data=True)
    sp.add_argument("--model", help=f"one of {','.join(KINDS + VARIANTS)}")

    sp = add("evaluate", cmd_evaluate, "held-out log-likelihood and AUC", data=True)
    sp.add_argument("--methods")
    sp.add_argument("--fraction", type=float)
    sp.add_argument("--seed", type=int)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"pif: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ModelError, MetricError) as exc:
        print(f"pif: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"pif: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
