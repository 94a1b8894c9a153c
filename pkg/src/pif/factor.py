"""Gamma-Poisson factor models that produce substitute confounders.

* network: ``a_ij ~ Pois(c_i . c_j)`` over unordered pairs
* pmf:     ``x_ik ~ Pois(d_i . w_k)``
* joint:   both likelihoods sharing the person factors ``c``

All three are fit by coordinate ascent with Gamma variational factors.  The
network model couples every pair of persons through its rate term, so person
factors are updated one person at a time; item and PMF person factors are
conditionally independent given the other side and update as blocks.  Either
way every step is an exact coordinate maximization, so the ELBO never falls.

Cells listed in an optional ``mask`` are treated as missing: they contribute
neither counts nor rate mass.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.special import gammaln

from . import _backend
from .data import CellSet, CountMatrix, SparseAdjacency, load_grid, remove_cells, remove_pairs, save_grid
from .vi import (FitOptions, GammaPrior, GammaVariational, digamma, gamma_kl_terms,
                 init_variational)

DEFAULT_PRIOR = GammaPrior(0.1, 0.1)
KINDS = ("network", "pmf", "joint")


@dataclass
class FactorFit:
    kind: str
    K: int
    prior: GammaPrior
    c: Optional[GammaVariational] = None
    d: Optional[GammaVariational] = None
    w: Optional[GammaVariational] = None
    elbo_trace: list = field(default_factory=list)
    converged: bool = False
    n_sweeps: int = 0
    seed: int = 0
    runtime: float = 0.0

    @property
    def c_hat(self):
        return None if self.c is None else self.c.mean

    @property
    def d_hat(self):
        return None if self.d is None else self.d.mean

    @property
    def w_hat(self):
        return None if self.w is None else self.w.mean

    @property
    def person_hat(self):
        """Person loadings for the purchase side (c for joint, d for pmf)."""
        return self.d_hat if self.kind == "pmf" else self.c_hat

    def network_rates(self, rows, cols) -> np.ndarray:
        if self.c is None:
            raise ValueError(f"a {self.kind} fit has no network rates")
        c = self.c_hat
        return np.einsum("ij,ij->i", c[rows], c[cols])

    def purchase_rates(self, rows, cols) -> np.ndarray:
        if self.w is None:
            raise ValueError(f"a {self.kind} fit has no purchase rates")
        p = self.person_hat
        return np.einsum("ij,ij->i", p[rows], self.w_hat[cols])

    def manifest(self) -> dict:
        return {
            "kind": self.kind,
            "K": self.K,
            "prior": self.prior.to_dict(),
            "seed": self.seed,
            "converged": self.converged,
            "n_sweeps": self.n_sweeps,
            "elbo_final": self.elbo_trace[-1] if self.elbo_trace else None,
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        for name in ("c", "d", "w"):
            gv = getattr(self, name)
            if gv is not None:
                save_grid(gv.mean, path / f"{name}_hat.tsv")
                save_grid(gv.shape, path / f"{name}_shape.tsv")
                save_grid(gv.rate, path / f"{name}_rate.tsv")
        save_grid(np.asarray(self.elbo_trace)[:, None], path / "elbo_trace.tsv")
        with open(path / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(self.manifest(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path

    @classmethod
    def load(cls, path) -> "FactorFit":
        path = Path(path)
        with open(path / "manifest.json", encoding="utf-8") as fh:
            man = json.load(fh)
        parts = {}
        for name in ("c", "d", "w"):
            if (path / f"{name}_shape.tsv").exists():
                parts[name] = GammaVariational(load_grid(path / f"{name}_shape.tsv"),
                                               load_grid(path / f"{name}_rate.tsv"))
        trace = load_grid(path / "elbo_trace.tsv").ravel().tolist()
        return cls(kind=man["kind"], K=man["K"], prior=GammaPrior(**man["prior"]),
                   elbo_trace=trace, converged=man["converged"], n_sweeps=man["n_sweeps"],
                   seed=man["seed"], **parts)


# --------------------------------------------------------------------------
# helpers

def csr_parts(m: sp.csr_matrix):
    """(indptr int64, indices int32, data float64) views suitable for the kernels."""
    return (np.ascontiguousarray(m.indptr, dtype=np.int64),
            np.ascontiguousarray(m.indices, dtype=np.int32),
            np.ascontiguousarray(m.data, dtype=np.float64))


class _Factor:
    """Mutable Gamma factor with cached mean and E[log]."""

    def __init__(self, gv: GammaVariational):
        self.shape = np.ascontiguousarray(gv.shape, dtype=np.float64)
        self.rate = np.ascontiguousarray(gv.rate, dtype=np.float64)
        self.refresh()

    def refresh(self):
        self.mean = self.shape / self.rate
        self.elog = digamma(self.shape) - np.log(self.rate)

    def set(self, shape, rate):
        self.shape = np.ascontiguousarray(shape, dtype=np.float64)
        self.rate = np.ascontiguousarray(rate, dtype=np.float64)
        self.refresh()

    def freeze(self) -> GammaVariational:
        return GammaVariational(self.shape.copy(), self.rate.copy())


def _empty_csr(n, m):
    return sp.csr_matrix((n, m), dtype=np.float64)


def _upper(adj: SparseAdjacency) -> sp.csr_matrix:
    n = adj.n_persons
    m = sp.csr_matrix((np.ones(adj.n_edges), (adj.rows, adj.cols)), shape=(n, n))
    m.sort_indices()
    return m


def _pair_rate_mass(mean, rows, cols) -> float:
    """sum over the listed unordered pairs of c_i . c_j."""
    if rows.size == 0:
        return 0.0
    return float(np.einsum("ij,ij->", mean[rows], mean[cols]))


def _network_rate_mass(mean, mask: Optional[CellSet]) -> float:
    col = mean.sum(axis=0)
    total = 0.5 * float(np.sum(col * col - np.sum(mean * mean, axis=0)))
    if mask is not None:
        total -= _pair_rate_mass(mean, mask.rows, mask.cols)
    return total


def _cells_rate_mass(row_mean, col_mean, mask: Optional[CellSet]) -> float:
    total = float(np.sum(row_mean.sum(axis=0) * col_mean.sum(axis=0)))
    if mask is not None:
        total -= _pair_rate_mass_rect(row_mean, col_mean, mask)
    return total


def _pair_rate_mass_rect(row_mean, col_mean, mask: CellSet) -> float:
    if not len(mask):
        return 0.0
    return float(np.einsum("ij,ij->", row_mean[mask.rows], col_mean[mask.cols]))


def _mask_indicator(mask: Optional[CellSet], shape, symmetric=False) -> sp.csr_matrix:
    if mask is None or not len(mask):
        return _empty_csr(*shape)
    return mask.indicator(symmetric=symmetric)


# coordinate ascent never lowers the ELBO; a drop beyond rounding means divergence
_DIVERGE_TOL = 1e-6


class _Loop:
    """Sweep bookkeeping: ELBO checks, convergence and the trace."""

    def __init__(self, opts: FitOptions):
        self.opts = opts
        self.trace = []
        self.converged = False
        self.sweeps = 0

    def record(self, elbo: float) -> bool:
        """Append an ELBO value; True means stop."""
        if not np.isfinite(elbo):
            raise FloatingPointError(f"ELBO became {elbo} after {self.sweeps} sweeps")
        if self.trace and elbo < self.trace[-1] - _DIVERGE_TOL * max(1.0, abs(self.trace[-1])):
            raise FloatingPointError(f"ELBO fell from {self.trace[-1]} to {elbo} after "
                                     f"{self.sweeps} sweeps")
        self.trace.append(float(elbo))
        if len(self.trace) >= 2:
            prev = self.trace[-2]
            if abs((elbo - prev) / (abs(prev) + self.opts.rate_floor)) < self.opts.elbo_rel_tol:
                self.converged = True
                return True
        return self.sweeps >= self.opts.max_sweeps

    def due(self) -> bool:
        return self.sweeps % self.opts.elbo_check_every == 0 or self.sweeps >= self.opts.max_sweeps


# --------------------------------------------------------------------------
# network model

class NetworkState:
    """Variational state of the community model, exposed for single updates."""

    def __init__(self, adj: SparseAdjacency, K: int, prior: GammaPrior, c: GammaVariational,
                 mask: Optional[CellSet] = None, backend=None):
        if mask is not None and len(mask):
            adj = remove_pairs(adj, mask)
        self.adj = adj
        self.K = K
        self.prior = prior
        self.mask = mask if (mask is not None and len(mask)) else None
        self.kern = _backend.get(backend)
        self.c = _Factor(c)
        self.sym = csr_parts(adj.csr)
        self.upper = csr_parts(_upper(adj))
        n = adj.n_persons
        self.mask_sym = csr_parts(_mask_indicator(self.mask, (n, n), symmetric=True))

    def sweep(self, shape_extra=None, rate_extra=None):
        n, K = self.c.shape.shape
        if shape_extra is None:
            shape_extra = np.zeros((n, K))
        if rate_extra is None:
            rate_extra = np.zeros((n, K))
        indptr, indices, data = self.sym
        mptr, mind, _ = self.mask_sym
        c = self.c
        self.kern.network_sweep(indptr, indices, data, c.shape, c.rate, c.mean, c.elog,
                                self.prior.shape, self.prior.rate,
                                np.ascontiguousarray(shape_extra, dtype=np.float64),
                                np.ascontiguousarray(rate_extra, dtype=np.float64),
                                mptr, mind)

    def loglik_bound(self) -> float:
        """Collapsed expected log likelihood of the network (binary, so no factorial)."""
        indptr, indices, data = self.upper
        n, K = self.c.shape.shape
        rs, cs = np.zeros((n, K)), np.zeros((n, K))
        edge = self.kern.bipartite_allocate(indptr, indices, data, self.c.elog, self.c.elog, rs, cs)
        return edge - _network_rate_mass(self.c.mean, self.mask)

    def kl(self) -> float:
        return gamma_kl_terms(self.prior, GammaVariational(self.c.shape, self.c.rate),
                              self.c.elog, self.c.mean)

    def elbo(self) -> float:
        return self.loglik_bound() + self.kl()


def fit_network(adj: SparseAdjacency, K: int = 5, prior: GammaPrior = DEFAULT_PRIOR,
                opts: Optional[FitOptions] = None, mask: Optional[CellSet] = None,
                backend=None) -> FactorFit:
    """Fit the Poisson community model to an undirected network."""
    opts = opts or FitOptions()
    if K < 1:
        raise ValueError("K must be >= 1")
    t0 = time.perf_counter()
    rng = np.random.default_rng(opts.seed)
    state = NetworkState(adj, K, prior, init_variational(prior, (adj.n_persons, K), rng),
                         mask=mask, backend=backend)
    loop = _Loop(opts)
    loop.record(state.elbo())
    while True:
        state.sweep()
        loop.sweeps += 1
        if loop.due() and loop.record(state.elbo()):
            break
    return FactorFit(kind="network", K=K, prior=prior, c=state.c.freeze(),
                     elbo_trace=loop.trace, converged=loop.converged, n_sweeps=loop.sweeps,
                     seed=opts.seed, runtime=time.perf_counter() - t0)


# --------------------------------------------------------------------------
# Poisson matrix factorization

class PurchaseTerm:
    """Likelihood of a count matrix under row factors times column factors."""

    def __init__(self, x: CountMatrix, mask: Optional[CellSet] = None, backend=None):
        if mask is not None and len(mask):
            x = remove_cells(x, mask)
        self.x = x
        self.mask = mask if (mask is not None and len(mask)) else None
        self.parts = csr_parts(x.csr.astype(np.float64))
        self.mask_ind = _mask_indicator(self.mask, x.shape)
        self.log_fact = float(gammaln(x.csr.data.astype(np.float64) + 1.0).sum())
        self.kern = _backend.get(backend)

    def allocate(self, row: _Factor, col: _Factor):
        indptr, indices, data = self.parts
        rs = np.zeros_like(row.mean)
        cs = np.zeros_like(col.mean)
        ll = self.kern.bipartite_allocate(indptr, indices, data, row.elog, col.elog, rs, cs)
        return rs, cs, ll

    def row_rate(self, col_mean) -> np.ndarray:
        """Per-row, per-factor sum of column means over non-masked cells."""
        out = np.broadcast_to(col_mean.sum(axis=0), (self.x.n_rows, col_mean.shape[1])).copy()
        if self.mask is not None:
            out -= self.mask_ind @ col_mean
        return out

    def col_rate(self, row_mean) -> np.ndarray:
        out = np.broadcast_to(row_mean.sum(axis=0), (self.x.n_cols, row_mean.shape[1])).copy()
        if self.mask is not None:
            out -= self.mask_ind.T @ row_mean
        return out

    def loglik_bound(self, row: _Factor, col: _Factor) -> float:
        _, _, ll = self.allocate(row, col)
        return ll - _cells_rate_mass(row.mean, col.mean, self.mask) - self.log_fact


def _block_update(factor: _Factor, prior: GammaPrior, stats, rate_sums):
    factor.set(prior.shape + stats, np.maximum(prior.rate + rate_sums, prior.rate))


def fit_pmf(x: CountMatrix, Q: int = 5, prior: GammaPrior = DEFAULT_PRIOR,
            opts: Optional[FitOptions] = None, mask: Optional[CellSet] = None,
            backend=None) -> FactorFit:
    """Poisson matrix factorization by batch coordinate ascent."""
    opts = opts or FitOptions()
    if Q < 1:
        raise ValueError("Q must be >= 1")
    t0 = time.perf_counter()
    rng = np.random.default_rng(opts.seed)
    n, m = x.shape
    d = _Factor(init_variational(prior, (n, Q), rng))
    w = _Factor(init_variational(prior, (m, Q), rng))
    term = PurchaseTerm(x, mask, backend)

    def elbo():
        return term.loglik_bound(d, w) + gamma_kl_terms(prior, d.freeze(), d.elog, d.mean) \
            + gamma_kl_terms(prior, w.freeze(), w.elog, w.mean)

    loop = _Loop(opts)
    loop.record(elbo())
    while True:
        rs, _, _ = term.allocate(d, w)
        _block_update(d, prior, rs, term.row_rate(w.mean))
        _, cs, _ = term.allocate(d, w)
        _block_update(w, prior, cs, term.col_rate(d.mean))
        loop.sweeps += 1
        if loop.due() and loop.record(elbo()):
            break
    return FactorFit(kind="pmf", K=Q, prior=prior, d=d.freeze(), w=w.freeze(),
                     elbo_trace=loop.trace, converged=loop.converged, n_sweeps=loop.sweeps,
                     seed=opts.seed, runtime=time.perf_counter() - t0)


# --------------------------------------------------------------------------
# joint network + purchases model

class JointState:
    def __init__(self, adj, x, K, prior, c, w, mask_a=None, mask_x=None, backend=None):
        if adj.n_persons != x.n_rows:
            raise ValueError("adjacency and purchase matrix disagree on the number of persons")
        self.net = NetworkState(adj, K, prior, c, mask=mask_a, backend=backend)
        self.term = PurchaseTerm(x, mask_x, backend)
        self.w = _Factor(w)
        self.prior = prior

    @property
    def c(self):
        return self.net.c

    def sweep(self):
        rs, _, _ = self.term.allocate(self.c, self.w)
        self.net.sweep(shape_extra=rs, rate_extra=self.term.row_rate(self.w.mean))
        _, cs, _ = self.term.allocate(self.c, self.w)
        _block_update(self.w, self.prior, cs, self.term.col_rate(self.c.mean))

    def elbo_components(self) -> dict:
        c, w = self.c, self.w
        return {
            "network": self.net.loglik_bound(),
            "purchases": self.term.loglik_bound(c, w),
            "c_prior_entropy": self.net.kl(),
            "w_prior_entropy": gamma_kl_terms(self.prior, w.freeze(), w.elog, w.mean),
        }

    def elbo(self) -> float:
        return float(sum(self.elbo_components().values()))


def fit_joint(adj: SparseAdjacency, x: CountMatrix, K: int = 5,
              prior: GammaPrior = DEFAULT_PRIOR, opts: Optional[FitOptions] = None,
              mask_a: Optional[CellSet] = None, mask_x: Optional[CellSet] = None,
              backend=None) -> FactorFit:
    """Community model and purchase factorization sharing person factors."""
    opts = opts or FitOptions()
    if K < 1:
        raise ValueError("K must be >= 1")
    t0 = time.perf_counter()
    rng = np.random.default_rng(opts.seed)
    n, m = x.shape
    c0 = init_variational(prior, (n, K), rng)
    w0 = init_variational(prior, (m, K), rng)
    state = JointState(adj, x, K, prior, c0, w0, mask_a, mask_x, backend)
    loop = _Loop(opts)
    loop.record(state.elbo())
    while True:
        state.sweep()
        loop.sweeps += 1
        if loop.due() and loop.record(state.elbo()):
            break
    return FactorFit(kind="joint", K=K, prior=prior, c=state.c.freeze(), w=state.w.freeze(),
                     elbo_trace=loop.trace, converged=loop.converged, n_sweeps=loop.sweeps,
                     seed=opts.seed, runtime=time.perf_counter() - t0)


def fit_factor(kind: str, adj: SparseAdjacency, x: CountMatrix, K: int = 5,
               prior: GammaPrior = DEFAULT_PRIOR, opts: Optional[FitOptions] = None,
               backend=None) -> FactorFit:
    if kind == "network":
        return fit_network(adj, K, prior, opts, backend=backend)
    if kind == "pmf":
        return fit_pmf(x, K, prior, opts, backend=backend)
    if kind == "joint":
        return fit_joint(adj, x, K, prior, opts, backend=backend)
    raise ValueError(f"unknown factor model {kind!r}; choose from {KINDS}")
