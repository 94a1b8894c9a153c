"""Poisson outcome model for today's purchases and the influence estimators.

The rate of person i buying item k today is::

    lambda_ik = gamma_k . u_i  +  alpha_i . w_k  +  sum_j a_ij x_jk beta_j

with ``u`` per-person adjustment covariates and ``w`` per-item ones.  They are
fixed inputs (substitutes, true confounders, or absent), so every latent's
variational rate is known up front and only the shapes are iterated.  Each
positive count is split jointly over all components of its rate.

``fit_mspf`` is the comparison model in which the person factors ``z`` are
learned jointly with everything else instead of being supplied.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import gammaln

from . import _backend
from .data import CountMatrix, SparseAdjacency, save_grid
from .factor import csr_parts, _Factor, _Loop
from .vi import FitOptions, GammaPrior, GammaVariational, ModelError, gamma_kl_terms

VARIANTS = ("oracle", "unadjusted", "net-only", "mspf", "pif-net", "pif-joint")


@dataclass(frozen=True)
class OutcomePriors:
    """Gamma priors: ``coef`` for alpha/gamma (and mSPF's z), ``influence`` for beta."""

    coef: GammaPrior = GammaPrior(0.01, 10.0)
    influence: GammaPrior = GammaPrior(0.1, 0.1)

    def to_dict(self):
        return {"coef": self.coef.to_dict(), "influence": self.influence.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(GammaPrior(**d["coef"]), GammaPrior(**d["influence"]))


@dataclass
class ExposureIndex:
    """Peer exposures ``e_ikj = a_ij * x_jk`` for a set of (i, k) cells.

    Entries for cell ``t`` (``rows[t], cols[t]``) live in
    ``peers[ptr[t]:ptr[t + 1]]`` / ``values[ptr[t]:ptr[t + 1]]``.
    ``totals[j]`` is the sum over all cells of person j's exposures, i.e. the
    rate mass multiplying beta_j.
    """

    rows: np.ndarray
    cols: np.ndarray
    ptr: np.ndarray
    peers: np.ndarray
    values: np.ndarray
    totals: np.ndarray

    def __len__(self):
        return int(self.peers.size)

    def entries(self, i, k):
        t = np.flatnonzero((self.rows == i) & (self.cols == k))
        if t.size == 0:
            return []
        lo, hi = self.ptr[t[0]], self.ptr[t[0] + 1]
        return list(zip(self.peers[lo:hi].tolist(), self.values[lo:hi].tolist()))

    def as_dict(self):
        out = {}
        for t in range(self.rows.size):
            lo, hi = self.ptr[t], self.ptr[t + 1]
            for j, e in zip(self.peers[lo:hi].tolist(), self.values[lo:hi].tolist()):
                out[(int(self.rows[t]), int(self.cols[t]), j)] = e
        return out


def _exposure_matrix(x: CountMatrix, binarize: bool):
    m = x.csr.astype(np.float64)
    if binarize:
        m.data[:] = 1.0
    return m


def build_exposure(adj: SparseAdjacency, x: CountMatrix, binarize: bool = False,
                   cells=None, backend=None) -> ExposureIndex:
    """Index of peer exposures.

    ``cells`` restricts the index to given (rows, cols) arrays (e.g. the
    support of today's counts); by default every cell with at least one exposed
    peer is indexed.
    """
    if adj.n_persons != x.n_rows:
        raise ValueError("adjacency and purchases disagree on the number of persons")
    xm = _exposure_matrix(x, binarize)
    A = adj.csr
    deg = np.diff(A.indptr)
    totals = (deg * np.asarray(xm.sum(axis=1)).ravel()).astype(np.float64)
    if cells is None:
        reach = (A @ xm).tocsr()
        reach.eliminate_zeros()
        reach.sort_indices()
        rows = np.repeat(np.arange(x.n_rows, dtype=np.int64), np.diff(reach.indptr))
        cols = reach.indices.astype(np.int64)
    else:
        rows = np.ascontiguousarray(cells[0], dtype=np.int64)
        cols = np.ascontiguousarray(cells[1], dtype=np.int64)
    m = x.n_cols
    key = rows * m + cols
    order = None
    if key.size and np.any(np.diff(key) <= 0):
        order = np.argsort(key, kind="stable")
        if np.any(np.diff(key[order]) == 0):
            raise ValueError("exposure cells must be unique")
    r_sorted = rows if order is None else rows[order]
    c_sorted = cols if order is None else cols[order]
    rowptr = np.searchsorted(r_sorted, np.arange(x.n_rows + 1)).astype(np.int64)
    kern = _backend.get(backend)
    ptr, peers, vals = kern.exposure_index(
        A.indptr.astype(np.int64), A.indices.astype(np.int32), xm.indptr.astype(np.int64),
        xm.indices.astype(np.int32), xm.data, rowptr, c_sorted, m)
    if order is not None:
        # back to the caller's cell order
        lens = np.diff(ptr)
        inv_lens = np.empty_like(lens)
        inv_lens[order] = lens
        new_ptr = np.zeros_like(ptr)
        np.cumsum(inv_lens, out=new_ptr[1:])
        src_start = np.empty_like(lens)
        src_start[order] = ptr[:-1]
        seg = np.repeat(np.arange(lens.size), inv_lens)
        take = src_start[seg] + (np.arange(peers.size) - new_ptr[seg])
        ptr, peers, vals = new_ptr, peers[take], vals[take]
    return ExposureIndex(rows, cols, ptr, peers, vals, totals)


@dataclass
class OutcomeInputs:
    y: CountMatrix
    adj: SparseAdjacency
    x: CountMatrix
    u_bar: Optional[np.ndarray] = None
    w_bar: Optional[np.ndarray] = None
    binarize_exposure: bool = False

    def __post_init__(self):
        n, m = self.y.shape
        if self.x.shape != (n, m):
            raise ValueError(f"x has shape {self.x.shape}, y has {(n, m)}")
        if self.adj.n_persons != n:
            raise ValueError("adjacency size does not match the count matrices")
        for name, grid, rows in (("u_bar", self.u_bar, n), ("w_bar", self.w_bar, m)):
            if grid is None:
                continue
            grid = np.asarray(grid, dtype=np.float64)
            if grid.ndim != 2 or grid.shape[0] != rows:
                raise ValueError(f"{name} must have {rows} rows, got shape {grid.shape}")
            if np.any(grid < 0) or not np.all(np.isfinite(grid)):
                raise ValueError(f"{name} must be finite and nonnegative")
            setattr(self, name, grid)


@dataclass
class InfluencePosterior:
    beta: GammaVariational
    gamma: Optional[GammaVariational]
    alpha: Optional[GammaVariational]
    variant: str
    priors: OutcomePriors
    elbo_trace: list = field(default_factory=list)
    converged: bool = False
    n_sweeps: int = 0
    no_peers: Optional[np.ndarray] = None
    n_unexplained: int = 0
    z: Optional[GammaVariational] = None
    seed: int = 0
    runtime: float = 0.0

    @property
    def beta_hat(self) -> np.ndarray:
        return self.beta.mean

    def manifest(self) -> dict:
        return {
            "variant": self.variant,
            "priors": self.priors.to_dict(),
            "seed": self.seed,
            "elbo_final": self.elbo_trace[-1] if self.elbo_trace else None,
            "converged": self.converged,
            "n_sweeps": self.n_sweeps,
            "n_unexplained": self.n_unexplained,
            "n_no_peers": int(np.sum(self.no_peers)) if self.no_peers is not None else 0,
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        est = estimate_influence(self)
        with open(path / "influence.tsv", "w", encoding="utf-8", newline="\n") as fh:
            fh.write("#person\tbeta_hat\tno_peers\n")
            for p, b, f in est:
                fh.write(f"{p}\t{b!r}\t{int(f)}\n")
        with open(path / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(self.manifest(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path

    def rates(self, rows, cols, inputs: OutcomeInputs, exposure: Optional[ExposureIndex] = None):
        """Posterior-mean outcome rates at the given cells."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        lam = np.zeros(rows.size)
        if self.gamma is not None:
            u = self.z.mean if self.z is not None else inputs.u_bar
            lam += np.einsum("ij,ij->i", u[rows], self.gamma.mean[cols])
        if self.alpha is not None:
            lam += np.einsum("ij,ij->i", self.alpha.mean[rows], inputs.w_bar[cols])
        if exposure is None:
            exposure = build_exposure(inputs.adj, inputs.x, inputs.binarize_exposure, (rows, cols))
        seg = np.repeat(np.arange(rows.size), np.diff(exposure.ptr))
        contrib = exposure.values * self.beta.mean[exposure.peers]
        lam += np.bincount(seg, weights=contrib, minlength=rows.size)
        return lam


def estimate_influence(post: InfluencePosterior):
    """Per-person (person, posterior-mean influence, no-peer flag) triples."""
    beta = post.beta.shape / post.beta.rate
    flags = post.no_peers if post.no_peers is not None else np.zeros(beta.size, dtype=bool)
    return [(j, float(beta[j]), bool(flags[j])) for j in range(beta.size)]


# --------------------------------------------------------------------------

def _log_covariate(grid, n):
    if grid is None:
        return np.zeros((n, 0))
    with np.errstate(divide="ignore"):
        return np.ascontiguousarray(np.log(grid))


def _start(prior: GammaPrior, rate, rng):
    """Shapes start at prior + one pseudo-count (jittered); rates are final."""
    shape = prior.shape + 1.0 + rng.uniform(0.0, 0.1, size=rate.shape)
    return _Factor(GammaVariational(shape, rate))


class _OutcomeProblem:
    """Shared allocation machinery for the outcome model and mSPF."""

    def __init__(self, y: CountMatrix, adj: SparseAdjacency, x: CountMatrix,
                 binarize: bool, backend):
        self.kern = _backend.get(backend)
        self.y_parts = csr_parts(y.csr.astype(np.float64))
        yr = np.repeat(np.arange(y.n_rows), np.diff(y.csr.indptr))
        self.y_rows = yr
        self.y_cols = y.csr.indices.astype(np.int64)
        self.exposure = build_exposure(adj, x, binarize, (yr, self.y_cols), backend)
        self.log_fact_each = gammaln(self.y_parts[2] + 1.0)
        self.n, self.m = y.shape

    def allocate(self, logu, elog_gamma, elog_alpha, logw, elog_beta):
        Kc, Kw = logu.shape[1], logw.shape[1]
        gs = np.zeros((self.m, Kc))
        us = np.zeros((self.n, Kc))
        als = np.zeros((self.n, Kw))
        bs = np.zeros(self.n)
        tot = np.zeros(self.y_rows.size)
        indptr, indices, data = self.y_parts
        ll, n_empty, first = self.kern.outcome_allocate(
            indptr, indices, data,
            np.ascontiguousarray(logu), np.ascontiguousarray(elog_gamma),
            np.ascontiguousarray(elog_alpha), np.ascontiguousarray(logw),
            self.exposure.ptr, self.exposure.peers, self.exposure.values,
            np.ascontiguousarray(elog_beta), gs, us, als, bs, tot)
        return {"loglik": ll, "n_empty": n_empty, "first": first,
                "gamma": gs, "u": us, "alpha": als, "beta": bs, "obs_total": tot}

    def explained_log_fact(self, obs_total):
        return float(self.log_fact_each[obs_total > 0].sum())

    def check_unexplained(self, res, policy):
        if res["n_empty"] and policy == "error":
            e = res["first"]
            raise ModelError(
                f"observation (person {self.y_rows[e]}, item {self.y_cols[e]}) has a positive "
                f"count but no rate component; {res['n_empty']} such observations")


def _fit_loop(opts, step):
    """Drive sweeps; ``step`` returns the ELBO of the state it starts from."""
    loop = _Loop(opts)
    pending = True
    while True:
        elbo = step(final=False)
        if pending and loop.record(elbo):
            break
        step(final=True)
        loop.sweeps += 1
        pending = loop.due()
    return loop


def fit_outcome(inputs: OutcomeInputs, priors: OutcomePriors = OutcomePriors(),
                opts: Optional[FitOptions] = None, variant: str = "pif",
                on_unexplained: str = "error", backend=None) -> InfluencePosterior:
    """Coordinate-ascent fit of the outcome model with fixed adjustment covariates.

    ``on_unexplained`` decides what happens to positive counts whose rate has no
    component at all: ``"error"`` raises :class:`ModelError`, ``"drop"`` leaves
    them out of the likelihood and reports how many there were.
    """
    opts = opts or FitOptions()
    if on_unexplained not in ("error", "drop"):
        raise ValueError("on_unexplained must be 'error' or 'drop'")
    t0 = time.perf_counter()
    rng = np.random.default_rng(opts.seed)
    prob = _OutcomeProblem(inputs.y, inputs.adj, inputs.x, inputs.binarize_exposure, backend)
    n, m = inputs.y.shape
    a, c = priors.coef, priors.influence
    u, w = inputs.u_bar, inputs.w_bar
    Kc = 0 if u is None else u.shape[1]
    Kw = 0 if w is None else w.shape[1]
    logu, logw = _log_covariate(u, n), _log_covariate(w, m)
    usum = u.sum(axis=0) if Kc else np.zeros(0)
    wsum = w.sum(axis=0) if Kw else np.zeros(0)

    T = prob.exposure.totals
    beta = _start(c, np.full(n, c.rate) + T, rng)
    gamma = _start(a, np.broadcast_to(a.rate + usum, (m, Kc)).copy(), rng)
    alpha = _start(a, np.broadcast_to(a.rate + wsum, (n, Kw)).copy(), rng)
    state = {}

    def elbo_of(res):
        mass = float(np.sum(gamma.mean.sum(axis=0) * usum)) if Kc else 0.0
        mass += float(np.sum(alpha.mean.sum(axis=0) * wsum)) if Kw else 0.0
        mass += float(np.dot(beta.mean, T))
        val = res["loglik"] - prob.explained_log_fact(res["obs_total"]) - mass
        val += gamma_kl_terms(c, beta.freeze(), beta.elog, beta.mean)
        if Kc:
            val += gamma_kl_terms(a, gamma.freeze(), gamma.elog, gamma.mean)
        if Kw:
            val += gamma_kl_terms(a, alpha.freeze(), alpha.elog, alpha.mean)
        return val

    def step(final):
        if not final:
            res = prob.allocate(logu, gamma.elog, alpha.elog, logw, beta.elog)
            prob.check_unexplained(res, on_unexplained)
            state["res"] = res
            return elbo_of(res)
        res = state["res"]
        beta.set(c.shape + res["beta"], beta.rate)
        if Kc:
            gamma.set(a.shape + res["gamma"], gamma.rate)
        if Kw:
            alpha.set(a.shape + res["alpha"], alpha.rate)
        return None

    loop = _fit_loop(opts, step)
    return InfluencePosterior(
        beta=beta.freeze(), gamma=gamma.freeze() if Kc else None,
        alpha=alpha.freeze() if Kw else None, variant=variant, priors=priors,
        elbo_trace=loop.trace, converged=loop.converged, n_sweeps=loop.sweeps,
        no_peers=T == 0, n_unexplained=int(state["res"]["n_empty"]), seed=opts.seed,
        runtime=time.perf_counter() - t0)


def fit_mspf(y: CountMatrix, adj: SparseAdjacency, x: CountMatrix, K: int = 5,
             priors: OutcomePriors = OutcomePriors(), opts: Optional[FitOptions] = None,
             binarize_exposure: bool = False, on_unexplained: str = "error",
             backend=None) -> InfluencePosterior:
    """Social Poisson factorization conditioned on yesterday's purchases.

    Rate ``z_i . gamma_k + sum_j a_ij x_jk beta_j`` with ``z`` and ``gamma``
    both latent.  Each sweep updates z, then gamma and beta, re-splitting the
    counts before each block.
    """
    opts = opts or FitOptions()
    if K < 1:
        raise ValueError("K must be >= 1")
    if on_unexplained not in ("error", "drop"):
        raise ValueError("on_unexplained must be 'error' or 'drop'")
    t0 = time.perf_counter()
    rng = np.random.default_rng(opts.seed)
    prob = _OutcomeProblem(y, adj, x, binarize_exposure, backend)
    n, m = y.shape
    a, c = priors.coef, priors.influence
    T = prob.exposure.totals
    beta = _start(c, np.full(n, c.rate) + T, rng)
    z = _start(a, np.full((n, K), a.rate), rng)
    gamma = _start(a, np.full((m, K), a.rate), rng)
    z.set(z.shape, a.rate + np.broadcast_to(gamma.mean.sum(axis=0), (n, K)))
    gamma.set(gamma.shape, a.rate + np.broadcast_to(z.mean.sum(axis=0), (m, K)))
    none_n, none_m = np.zeros((n, 0)), np.zeros((m, 0))
    state = {}

    def elbo_of(res):
        mass = float(np.sum(gamma.mean.sum(axis=0) * z.mean.sum(axis=0)))
        mass += float(np.dot(beta.mean, T))
        val = res["loglik"] - prob.explained_log_fact(res["obs_total"]) - mass
        val += gamma_kl_terms(c, beta.freeze(), beta.elog, beta.mean)
        val += gamma_kl_terms(a, z.freeze(), z.elog, z.mean)
        val += gamma_kl_terms(a, gamma.freeze(), gamma.elog, gamma.mean)
        return val

    def step(final):
        if not final:
            res = prob.allocate(z.elog, gamma.elog, none_n, none_m, beta.elog)
            prob.check_unexplained(res, on_unexplained)
            state["res"] = res
            return elbo_of(res)
        res = state["res"]
        z.set(a.shape + res["u"], a.rate + np.broadcast_to(gamma.mean.sum(axis=0), (n, K)))
        res = prob.allocate(z.elog, gamma.elog, none_n, none_m, beta.elog)
        gamma.set(a.shape + res["gamma"], a.rate + np.broadcast_to(z.mean.sum(axis=0), (m, K)))
        beta.set(c.shape + res["beta"], beta.rate)
        return None

    loop = _fit_loop(opts, step)
    return InfluencePosterior(
        beta=beta.freeze(), gamma=gamma.freeze(), alpha=None, variant="mspf", priors=priors,
        elbo_trace=loop.trace, converged=loop.converged, n_sweeps=loop.sweeps,
        no_peers=T == 0, n_unexplained=int(state["res"]["n_empty"]), z=z.freeze(),
        seed=opts.seed, runtime=time.perf_counter() - t0)
