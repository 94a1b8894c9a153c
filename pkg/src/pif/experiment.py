"""Method comparison, grids and sensitivity runs on simulated datasets."""

from __future__ import annotations

import dataclasses
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import Dataset, DataError
from .factor import DEFAULT_PRIOR, FactorFit, fit_joint, fit_network, fit_pmf
from .metrics import influence_mse
from .outcome import VARIANTS, InfluencePosterior, OutcomeInputs, OutcomePriors, fit_mspf, fit_outcome
from .simulate import LEVELS, SETTINGS, ConfigError, SimConfig, simulate
from .vi import FitOptions, GammaPrior

# factor models each method needs
_NEEDS = {
    "oracle": (),
    "unadjusted": (),
    "mspf": (),
    "net-only": ("network",),
    "pif-net": ("network", "pmf"),
    "pif-joint": ("joint", "pmf"),
}

REPORT_COLUMNS = ("method", "setting", "level", "seed", "mse", "mse_x1e3", "mean_beta_hat",
                  "n_scored", "n_excluded", "converged", "runtime_s")


@dataclass
class CompareSettings:
    K: int = 5
    Q: int = 5
    factor_prior: GammaPrior = DEFAULT_PRIOR
    priors: OutcomePriors = field(default_factory=OutcomePriors)
    opts: FitOptions = field(default_factory=FitOptions)
    binarize_exposure: bool = False
    backend: Optional[str] = None

    def __post_init__(self):
        if self.K < 1 or self.Q < 1:
            raise ConfigError("K and Q must be positive integers")

    def to_dict(self) -> dict:
        return {"K": self.K, "Q": self.Q, "factor_prior": self.factor_prior.to_dict(),
                "priors": self.priors.to_dict(), "opts": self.opts.to_dict(),
                "binarize_exposure": self.binarize_exposure}

    @classmethod
    def from_dict(cls, d: dict) -> "CompareSettings":
        d = dict(d or {})
        kw = {}
        for name in ("K", "Q"):
            if name in d:
                v = d.pop(name)
                if not isinstance(v, int) or v < 1:
                    raise ConfigError(f"{name}: expected a positive integer, got {v!r}")
                kw[name] = v
        try:
            if "factor_prior" in d:
                kw["factor_prior"] = GammaPrior(**d.pop("factor_prior"))
            if "priors" in d:
                kw["priors"] = OutcomePriors.from_dict(d.pop("priors"))
            if "opts" in d:
                kw["opts"] = FitOptions.from_dict(d.pop("opts"))
        except (TypeError, KeyError, ValueError) as exc:
            raise ConfigError(f"fit settings: {exc}") from None
        if "binarize_exposure" in d:
            kw["binarize_exposure"] = bool(d.pop("binarize_exposure"))
        if d:
            raise ConfigError(f"{sorted(d)[0]}: unknown fit setting")
        return cls(**kw)


def check_methods(methods: Sequence[str]) -> list:
    methods = list(methods)
    if not methods:
        raise ConfigError("methods: at least one method is required")
    bad = [m for m in methods if m not in VARIANTS]
    if bad:
        raise ConfigError(f"methods: unknown method {bad[0]!r}; choose from {VARIANTS}")
    if len(set(methods)) != len(methods):
        raise ConfigError("methods: duplicate entries")
    return methods


def fit_substitutes(ds: Dataset, methods, cs: CompareSettings) -> dict:
    kinds = sorted({k for m in methods for k in _NEEDS[m]})
    out = {}
    for kind in kinds:
        if kind == "network":
            out[kind] = fit_network(ds.adjacency, cs.K, cs.factor_prior, cs.opts, backend=cs.backend)
        elif kind == "pmf":
            out[kind] = fit_pmf(ds.x, cs.Q, cs.factor_prior, cs.opts, backend=cs.backend)
        else:
            out[kind] = fit_joint(ds.adjacency, ds.x, cs.K, cs.factor_prior, cs.opts,
                                  backend=cs.backend)
    return out


def outcome_inputs(ds: Dataset, method: str, subs: dict, binarize=False) -> OutcomeInputs:
    u = w = None
    if method == "oracle":
        if ds.truth is None:
            raise DataError("oracle needs the true confounders, but the dataset has no truth files")
        u, w = ds.truth.person_confounders, ds.truth.item_confounders
    elif method == "net-only":
        u = subs["network"].c_hat
    elif method == "pif-net":
        u, w = subs["network"].c_hat, subs["pmf"].w_hat
    elif method == "pif-joint":
        u, w = subs["joint"].c_hat, subs["pmf"].w_hat
    return OutcomeInputs(ds.y, ds.adjacency, ds.x, u, w, binarize)


def run_method(ds: Dataset, method: str, subs: dict, cs: CompareSettings) -> InfluencePosterior:
    # counts that no component can explain only arise without adjustment
    # covariates; those observations are left out rather than aborting
    if method == "mspf":
        return fit_mspf(ds.y, ds.adjacency, ds.x, cs.K, cs.priors, cs.opts, cs.binarize_exposure,
                        on_unexplained="drop", backend=cs.backend)
    inputs = outcome_inputs(ds, method, subs, cs.binarize_exposure)
    policy = "drop" if method == "unadjusted" else "error"
    return fit_outcome(inputs, cs.priors, cs.opts, variant=method, on_unexplained=policy,
                       backend=cs.backend)


def score(post: InfluencePosterior, truth_beta: Optional[np.ndarray]) -> dict:
    keep = ~post.no_peers
    row = {"mean_beta_hat": float(post.beta_hat[keep].mean()) if keep.any() else float("nan"),
           "n_scored": int(keep.sum()), "n_excluded": int((~keep).sum()),
           "converged": bool(post.converged), "runtime_s": post.runtime}
    if truth_beta is not None and keep.any():
        mse = influence_mse(post.beta_hat[keep], truth_beta[keep])
        row.update(mse=mse, mse_x1e3=mse * 1e3)
    else:
        row.update(mse=float("nan"), mse_x1e3=float("nan"))
    return row


def compare(ds: Dataset, methods, cs: Optional[CompareSettings] = None, tags: Optional[dict] = None):
    """Fit every requested method on one dataset; returns (rows, posteriors)."""
    cs = cs or CompareSettings()
    methods = check_methods(methods)
    if "oracle" in methods and ds.truth is None:
        raise DataError("oracle needs the true confounders, but the dataset has no truth files")
    subs = fit_substitutes(ds, methods, cs)
    truth_beta = ds.truth.beta if ds.truth is not None else None
    rows, posts = [], {}
    for method in methods:
        post = run_method(ds, method, subs, cs)
        posts[method] = post
        row = {"method": method}
        row.update(tags or {})
        row.update(score(post, truth_beta))
        rows.append(row)
    return rows, posts


# --------------------------------------------------------------------------
# grids

def _cell_job(args):
    cfg_dict, methods, cs_dict, violation = args
    cfg = SimConfig.from_dict(cfg_dict)
    cs = CompareSettings.from_dict(cs_dict)
    t0 = time.perf_counter()
    ds = simulate(cfg, violation=violation)
    tags = {"setting": cfg.setting, "level": cfg.level, "seed": cfg.seed}
    if violation:
        tags["strength"] = violation["strength"]
    rows, _ = compare(ds, methods, cs, tags)
    for r in rows:
        r["cell_runtime_s"] = time.perf_counter() - t0
    return rows


def run_cells(jobs, n_workers: int = 1):
    """Run cell jobs in order; a process pool is used when ``n_workers > 1``."""
    if n_workers <= 1 or len(jobs) <= 1:
        return [_cell_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(_cell_job, jobs))


def sweep_jobs(base: SimConfig, methods, cs: CompareSettings, settings=SETTINGS,
               levels=tuple(LEVELS), seeds=range(10)):
    seeds = list(seeds)
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds: duplicate seeds")
    if not seeds:
        raise ConfigError("seeds: at least one seed is required")
    for s in settings:
        if s not in SETTINGS:
            raise ConfigError(f"settings: unknown setting {s!r}")
    for lv in levels:
        if lv not in LEVELS:
            raise ConfigError(f"levels: unknown level {lv!r}")
    methods = check_methods(methods)
    jobs = []
    for s in settings:
        for lv in levels:
            for seed in seeds:
                cfg = base.replace(setting=s, level=lv, seed=seed, s_gamma=None, s_alpha=None)
                jobs.append((cfg.to_dict(), methods, cs.to_dict(), None))
    return jobs


def aggregate(rows, keys=("method", "setting", "level")):
    """Mean and standard error of MSE per group, in first-seen order."""
    groups = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r)
    out = []
    for key, rs in groups.items():
        mse = np.array([r["mse"] for r in rs], dtype=float)
        beta = np.array([r["mean_beta_hat"] for r in rs], dtype=float)
        se = float(mse.std(ddof=1) / np.sqrt(mse.size)) if mse.size > 1 else float("nan")
        agg = dict(zip(keys, key))
        agg.update(n_seeds=len(rs), mse_mean=float(mse.mean()), mse_se=se,
                   mse_x1e3_mean=float(mse.mean()) * 1e3,
                   mse_x1e3_se=se * 1e3, mean_beta_hat=float(beta.mean()),
                   all_converged=all(r["converged"] for r in rs))
        out.append(agg)
    return out


def sensitivity_jobs(base: SimConfig, strengths, frac_pairs: float, n_shared_items: int,
                     cs: CompareSettings, seeds=range(10), method="pif-joint"):
    strengths = list(strengths)
    if not strengths:
        raise ConfigError("strengths: at least one strength is required")
    if any(s < 0 for s in strengths):
        raise ConfigError("strengths: must be nonnegative")
    if not 0 < frac_pairs <= 1:
        raise ConfigError("frac_pairs: expected a value in (0, 1]")
    if not 0 <= n_shared_items <= base.n_items:
        raise ConfigError("n_shared_items: must lie in [0, n_items]")
    seeds = list(seeds)
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds: duplicate seeds")
    jobs = []
    for st in strengths:
        for seed in seeds:
            cfg = base.replace(seed=seed)
            vio = {"frac_pairs": frac_pairs, "n_shared_items": n_shared_items, "strength": st}
            jobs.append((cfg.to_dict(), [method], cs.to_dict(), vio))
    return jobs


def sensitivity_curve(rows):
    """MSE per strength plus a flag for a nondecreasing trend."""
    agg = aggregate(rows, keys=("method", "strength"))
    agg.sort(key=lambda r: r["strength"])
    means = [r["mse_mean"] for r in agg]
    monotone = all(b >= a for a, b in zip(means, means[1:]))
    return agg, monotone
