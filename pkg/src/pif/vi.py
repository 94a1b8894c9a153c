"""Gamma-Poisson variational machinery shared by every model in the package.

Everything here is a pure function of its arguments.  Grids are float64
numpy arrays; a :class:`GammaVariational` holds a shape grid and a rate grid
of identical shape.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

RATE_FLOOR = 1e-10

# Bernoulli-number coefficients of the asymptotic digamma series, in powers
# of 1/x^2 starting at 1/x^2.
_ASYMPTOTIC = (
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    5.0 / 660.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
)
_SHIFT_TO = 10.0


class ModelError(ValueError):
    """Raised when a model cannot explain its data or inputs are inconsistent."""


@dataclass(frozen=True)
class GammaPrior:
    shape: float
    rate: float

    def __post_init__(self):
        if not (self.shape > 0 and self.rate > 0):
            raise ValueError(f"Gamma prior needs shape > 0 and rate > 0, got {self}")
        object.__setattr__(self, "shape", float(self.shape))
        object.__setattr__(self, "rate", float(self.rate))

    @property
    def mean(self) -> float:
        return self.shape / self.rate

    def to_dict(self):
        return {"shape": self.shape, "rate": self.rate}


@dataclass
class GammaVariational:
    """Factorized Gamma variational posterior; entry (r, c) is Gam(shape, rate)."""

    shape: np.ndarray
    rate: np.ndarray

    def __post_init__(self):
        self.shape = np.asarray(self.shape, dtype=np.float64)
        self.rate = np.asarray(self.rate, dtype=np.float64)
        if self.shape.shape != self.rate.shape:
            raise ValueError("shape and rate grids differ in dimensions")

    def validate(self):
        for name, grid in (("shape", self.shape), ("rate", self.rate)):
            if not (np.all(np.isfinite(grid)) and np.all(grid > 0)):
                raise ValueError(f"variational {name} grid must be positive and finite")
        return self

    @classmethod
    def from_prior(cls, prior: GammaPrior, dims) -> "GammaVariational":
        return cls(np.full(dims, prior.shape), np.full(dims, prior.rate))

    @property
    def mean(self) -> np.ndarray:
        return gamma_mean(self)

    @property
    def elog(self) -> np.ndarray:
        return gamma_elog(self)

    def copy(self) -> "GammaVariational":
        return GammaVariational(self.shape.copy(), self.rate.copy())


@dataclass
class FitOptions:
    max_sweeps: int = 500
    elbo_rel_tol: float = 1e-4
    elbo_check_every: int = 5
    rate_floor: float = RATE_FLOOR
    seed: int = 0

    def __post_init__(self):
        if self.max_sweeps < 1:
            raise ValueError("max_sweeps must be >= 1")
        if self.elbo_check_every < 1:
            raise ValueError("elbo_check_every must be >= 1")
        if not (self.elbo_rel_tol > 0 and self.rate_floor > 0):
            raise ValueError("tolerances must be positive")

    def to_dict(self):
        return {
            "max_sweeps": self.max_sweeps,
            "elbo_rel_tol": self.elbo_rel_tol,
            "elbo_check_every": self.elbo_check_every,
            "rate_floor": self.rate_floor,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d) -> "FitOptions":
        keys = ("max_sweeps", "elbo_rel_tol", "elbo_check_every", "rate_floor", "seed")
        bad = sorted(set(d) - set(keys))
        if bad:
            raise ValueError(f"{bad[0]}: unknown fit option")
        return cls(**{k: d[k] for k in keys if k in d})


def _digamma_scalar(x: float) -> float:
    if not x > 0:
        raise ValueError(f"digamma is only defined here for x > 0, got {x}")
    acc = 0.0
    while x < _SHIFT_TO:
        acc -= 1.0 / x
        x += 1.0
    inv2 = 1.0 / (x * x)
    series = 0.0
    for coef in reversed(_ASYMPTOTIC):
        series = series * inv2 + coef
    return acc + math.log(x) - 0.5 / x - series * inv2


def digamma(x):
    """Digamma function for positive arguments.

    Shifts the argument above 10 with psi(x) = psi(x + 1) - 1/x, then sums the
    asymptotic expansion through the x^-14 term.  Accepts scalars or arrays.
    """
    if np.isscalar(x):
        return _digamma_scalar(float(x))
    x = np.array(x, dtype=np.float64)
    if np.any(~(x > 0)):
        raise ValueError("digamma is only defined here for x > 0")
    acc = np.zeros_like(x)
    small = x < _SHIFT_TO
    while np.any(small):
        acc[small] -= 1.0 / x[small]
        x[small] += 1.0
        small = x < _SHIFT_TO
    inv2 = 1.0 / (x * x)
    series = np.zeros_like(x)
    for coef in reversed(_ASYMPTOTIC):
        series = series * inv2 + coef
    return acc + np.log(x) - 0.5 / x - series * inv2


def gamma_mean(gv: GammaVariational) -> np.ndarray:
    return gv.shape / gv.rate


def gamma_elog(gv: GammaVariational) -> np.ndarray:
    """E[log theta] under Gam(shape, rate): digamma(shape) - log(rate)."""
    return digamma(gv.shape) - np.log(gv.rate)


def allocate_multinomial(count, log_scores) -> np.ndarray:
    """Multinomial proportions proportional to exp(log_scores).

    The expected allocation of ``count`` is ``count * phi``.  If every score is
    -inf the proportions fall back to uniform and a warning is emitted.
    """
    s = np.asarray(log_scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("log_scores must be nonempty")
    top = s.max()
    if top == -np.inf:
        warnings.warn("all allocation scores are -inf; using uniform proportions", RuntimeWarning)
        return np.full(s.shape, 1.0 / s.size)
    w = np.exp(s - top)
    return w / w.sum()


def poisson_loglik(y, lam, floor: float = RATE_FLOOR):
    """Poisson log pmf with the rate floored at ``floor``; vectorized."""
    y = np.asarray(y, dtype=np.float64)
    lam = np.maximum(np.asarray(lam, dtype=np.float64), floor)
    out = y * np.log(lam) - lam - gammaln(y + 1.0)
    return float(out) if out.ndim == 0 else out


def check_convergence(elbo_trace, opts: FitOptions, n_sweeps: int | None = None) -> bool:
    """True once the relative ELBO change drops below tolerance or sweeps run out.

    ``n_sweeps`` defaults to the trace length (one ELBO per sweep).
    """
    if len(elbo_trace) == 0:
        raise ValueError("empty ELBO trace")
    sweeps = len(elbo_trace) if n_sweeps is None else n_sweeps
    if sweeps >= opts.max_sweeps:
        return True
    if len(elbo_trace) < 2:
        return False
    prev, cur = elbo_trace[-2], elbo_trace[-1]
    return abs((cur - prev) / (abs(prev) + opts.rate_floor)) < opts.elbo_rel_tol


def gamma_kl_terms(prior: GammaPrior, gv: GammaVariational, elog=None, mean=None) -> float:
    """Sum over the grid of E_q[log p(theta)] - E_q[log q(theta)]."""
    if elog is None:
        elog = gamma_elog(gv)
    if mean is None:
        mean = gamma_mean(gv)
    a, b = prior.shape, prior.rate
    k, v = gv.shape, gv.rate
    logp = a * math.log(b) - math.lgamma(a) + (a - 1.0) * elog - b * mean
    logq = k * np.log(v) - gammaln(k) + (k - 1.0) * elog - v * mean
    return float(np.sum(logp - logq))


def init_variational(prior: GammaPrior, dims, rng: np.random.Generator, jitter: float = 0.1):
    """Prior-centred start with multiplicative shape jitter in [1, 1 + jitter)."""
    shape = prior.shape * (1.0 + rng.uniform(0.0, jitter, size=dims))
    return GammaVariational(shape, np.full(dims, prior.rate))
