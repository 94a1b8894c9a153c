"""Posterior predictive checks for the factor models.

Held-out cells are compared against replicates drawn at the posterior-mean
rates.  The discrepancy is the mean Poisson log-likelihood over the held-out
cells, and the p-value is the fraction of replicates whose discrepancy
exceeds the held-out one.  Values near 0.5 indicate a good fit.

The same comparison is also made person by person (each person's held-out
cells against the same replicates); the mean of those per-person p-values is
reported as ``mean_score``.  Per-person discrepancies tie often on sparse
data, so ties count one half there.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .data import CellSet, CountMatrix, SparseAdjacency, holdout_cells, holdout_pairs
from .factor import DEFAULT_PRIOR, KINDS, FactorFit, fit_joint, fit_network, fit_pmf
from .vi import RATE_FLOOR, FitOptions, GammaPrior, poisson_loglik

CALIBRATION_BAND = (0.1, 0.9)
DEFAULT_K_LIST = (3, 5, 8, 10)
PPC_COLUMNS = ("model", "K", "target", "p_value", "mean_score", "d_heldout", "d_rep_mean",
               "d_rep_sd", "in_band", "n_heldout", "converged", "runtime_s")


def heldout_mean_loglik(counts, rates) -> float:
    return float(np.mean(poisson_loglik(counts, rates, RATE_FLOOR)))


@dataclass
class PpcResult:
    p_value: float
    d_heldout: float
    d_rep: np.ndarray
    n_replicates: int
    discrepancy: str = "heldout_loglik"
    person_scores: Optional[np.ndarray] = None

    @property
    def mean_score(self) -> float:
        if self.person_scores is None or self.person_scores.size == 0:
            return float("nan")
        return float(self.person_scores.mean())

    @property
    def in_band(self) -> bool:
        lo, hi = CALIBRATION_BAND
        return lo <= self.p_value <= hi

    def summary(self) -> dict:
        d = self.d_rep
        return {"p_value": self.p_value, "d_heldout": self.d_heldout,
                "n_replicates": self.n_replicates, "discrepancy": self.discrepancy,
                "d_rep_mean": float(d.mean()), "d_rep_sd": float(d.std()),
                "d_rep_min": float(d.min()), "d_rep_max": float(d.max()),
                "in_band": self.in_band, "mean_score": self.mean_score}


def masked_rates(fit: FactorFit, data, mask: CellSet) -> np.ndarray:
    """Posterior-mean rates at the masked cells of the network or the purchases."""
    if isinstance(data, SparseAdjacency):
        return fit.network_rates(mask.rows, mask.cols)
    return fit.purchase_rates(mask.rows, mask.cols)


def _owner_sums(owners, ll, n_owners):
    cell, person = owners
    return np.bincount(person, weights=ll[cell], minlength=n_owners)


def ppc_from_rates(heldout, rates, n_replicates: int, rng: np.random.Generator,
                   discrepancy: Callable = heldout_mean_loglik, owners=None) -> PpcResult:
    """P-value of the held-out counts against Poisson replicates at ``rates``.

    ``owners`` optionally maps cells to persons as a pair of equal-length
    arrays (cell index, person); a cell may belong to several persons.
    """
    heldout = np.asarray(heldout, dtype=np.float64)
    rates = np.maximum(np.asarray(rates, dtype=np.float64), RATE_FLOOR)
    if heldout.size == 0:
        raise ValueError("the held-out mask is empty")
    if n_replicates < 1:
        raise ValueError("n_replicates must be >= 1")
    d_held = discrepancy(heldout, rates)
    per_held = wins = n_owners = None
    if owners is not None:
        owners = (np.asarray(owners[0], dtype=np.int64), np.asarray(owners[1], dtype=np.int64))
        n_owners = int(owners[1].max()) + 1 if owners[1].size else 0
        per_held = _owner_sums(owners, poisson_loglik(heldout, rates, RATE_FLOOR), n_owners)
        wins = np.zeros(n_owners)
    d_rep = np.empty(n_replicates)
    for r, g in enumerate(rng.spawn(n_replicates)):
        rep = g.poisson(rates).astype(np.float64)
        d_rep[r] = discrepancy(rep, rates)
        if owners is not None:
            per_rep = _owner_sums(owners, poisson_loglik(rep, rates, RATE_FLOOR), n_owners)
            wins += (per_rep > per_held) + 0.5 * (per_rep == per_held)
    p = float(np.count_nonzero(d_rep > d_held)) / n_replicates
    scores = None
    if owners is not None:
        has = np.bincount(owners[1], minlength=n_owners) > 0
        scores = wins[has] / n_replicates
    return PpcResult(p, float(d_held), d_rep, n_replicates, person_scores=scores)


def cell_owners(data, mask: CellSet):
    """Persons owning each held-out cell: the row, plus the column for network pairs."""
    idx = np.arange(len(mask))
    if isinstance(data, SparseAdjacency):
        return np.concatenate([idx, idx]), np.concatenate([mask.rows, mask.cols])
    return idx, mask.rows


def run_ppc(fit: FactorFit, data, mask: CellSet, n_replicates: int = 100,
            rng: Optional[np.random.Generator] = None, warn: bool = True) -> PpcResult:
    """Check ``fit`` (trained with ``mask`` held out) against the held-out cells of ``data``.

    ``data`` is the full network (:class:`SparseAdjacency`) or the full purchase
    matrix (:class:`CountMatrix`); a joint fit can be checked against either.
    """
    if mask is None or len(mask) == 0:
        raise ValueError("the held-out mask is empty")
    if not isinstance(data, (SparseAdjacency, CountMatrix)):
        raise TypeError("data must be a SparseAdjacency or a CountMatrix")
    rng = rng if rng is not None else np.random.default_rng(0)
    res = ppc_from_rates(mask.values(data), masked_rates(fit, data, mask), n_replicates, rng,
                         owners=cell_owners(data, mask))
    if warn and not res.in_band:
        warnings.warn(f"posterior predictive p-value {res.p_value:.3f} is outside "
                      f"{CALIBRATION_BAND}", RuntimeWarning, stacklevel=2)
    return res


def ppc_masks(adj: SparseAdjacency, x: CountMatrix, kind: str, fraction: float,
              rng: np.random.Generator):
    """Value-independent held-out masks: (network pairs or None, purchase cells or None)."""
    pairs = holdout_pairs(adj.n_persons, fraction, rng) if kind in ("network", "joint") else None
    cells = holdout_cells(x.n_rows, x.n_cols, fraction, rng) if kind in ("pmf", "joint") else None
    return pairs, cells


def ppc_table(adj: SparseAdjacency, x: CountMatrix, kind: str, K_list=DEFAULT_K_LIST,
              fraction: float = 0.1, n_replicates: int = 100, seed: int = 0,
              prior: GammaPrior = DEFAULT_PRIOR, opts: Optional[FitOptions] = None,
              backend=None) -> list:
    """One row per (K, checked data) with the model refit on the masked data.

    The masks are shared across K so that rows differ only in the model size.
    A joint model is checked against both the network and the purchases.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown factor model {kind!r}; choose from {KINDS}")
    K_list = list(K_list)
    if not K_list:
        raise ValueError("K list is empty")
    if any(not isinstance(K, (int, np.integer)) or K < 1 for K in K_list):
        raise ValueError(f"K values must be positive integers, got {K_list}")
    opts = opts or FitOptions(seed=seed)
    mask_seq, rep_seq = np.random.SeedSequence(seed).spawn(2)
    pairs, cells = ppc_masks(adj, x, kind, fraction, np.random.default_rng(mask_seq))
    rep_rngs = np.random.default_rng(rep_seq).spawn(len(K_list))
    rows = []
    for K, rng in zip(K_list, rep_rngs):
        K = int(K)
        if kind == "network":
            fit = fit_network(adj, K, prior, opts, mask=pairs, backend=backend)
        elif kind == "pmf":
            fit = fit_pmf(x, K, prior, opts, mask=cells, backend=backend)
        else:
            fit = fit_joint(adj, x, K, prior, opts, mask_a=pairs, mask_x=cells, backend=backend)
        targets = [("network", adj, pairs), ("purchases", x, cells)]
        for target, data, mask in targets:
            if mask is None:
                continue
            res = run_ppc(fit, data, mask, n_replicates, rng, warn=False)
            summ = res.summary()
            rows.append({"model": kind, "K": K, "target": target, "p_value": res.p_value,
                         "mean_score": res.mean_score, "d_heldout": res.d_heldout,
                         "d_rep_mean": summ["d_rep_mean"], "d_rep_sd": summ["d_rep_sd"],
                         "in_band": res.in_band, "n_heldout": len(mask),
                         "converged": fit.converged, "runtime_s": fit.runtime})
    return rows
