"""Semi-synthetic purchase data with known influence and tunable confounding.

Persons and items carry a region and a group (one-hot ``r`` and ``v``).
Preferences and attributes are Gamma mixtures that favour the entity's own
region or group; the concentration parameters ``s_*`` control how strongly::

    rho_ip   ~ Gam(a, b) if r_i = p else Gam(a / s_rho, b)      (persons x regions)
    gamma_kp ~ Gam(a, b) if r_k = p else Gam(a / s_gamma, b)    (items x regions)
    tau_kp   ~ Gam(a, b) if v_k = p else Gam(a / s_tau, b)      (items x groups)
    alpha_ip ~ Gam(a, b) if v_i = p else Gam(a / s_alpha, b)    (persons x groups)

Yesterday ``x ~ Pois(mu)`` and today ``y ~ Pois(mu + sum_j a_ij beta_j x_jk)``
where ``mu`` is ``rho.gamma`` (homophily), ``alpha.tau`` (item) or their sum
(both).  Regions of persons come from the network's blocks, so region drives
both ties and purchases.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .data import (CountMatrix, DataError, Dataset, SparseAdjacency, drop_isolated, load_edgelist,
                   load_grid, save_counts, save_edgelist, snowball_sample, save_grid, load_counts)
from .vi import GammaPrior

SETTINGS = ("item", "homophily", "both")
LEVELS = {"low": 10.0, "med": 50.0, "high": 100.0}

# rng substreams; the order is part of the determinism contract
_STREAMS = ("network", "covariates", "latents", "purchases", "influence", "outcomes", "violation")


class ConfigError(ValueError):
    """Invalid simulation or experiment configuration."""


@dataclass
class NetworkSource:
    kind: str = "sbm"
    p_in: float = 0.1
    p_out: float = 0.004
    path: Optional[str] = None
    regions_path: Optional[str] = None

    def validate(self, where="network"):
        if self.kind == "sbm":
            if not (0 <= self.p_out < self.p_in <= 1):
                raise ConfigError(f"{where}: need 0 <= p_out < p_in <= 1, got p_in={self.p_in}, "
                                  f"p_out={self.p_out}")
        elif self.kind == "edgelist":
            if not self.path:
                raise ConfigError(f"{where}.path: required for an edgelist network")
        else:
            raise ConfigError(f"{where}.kind: expected 'sbm' or 'edgelist', got {self.kind!r}")


@dataclass
class SimConfig:
    n_persons: int = 300
    n_items: int = 300
    n_regions: int = 5
    n_groups: int = 5
    base_shape: float = 0.25
    base_rate: float = 0.5
    s_rho: float = 50.0
    s_gamma: Optional[float] = None
    s_tau: float = 50.0
    s_alpha: Optional[float] = None
    setting: str = "both"
    level: str = "med"
    zero_influence: bool = False
    influence_prior: GammaPrior = field(default_factory=lambda: GammaPrior(0.005, 0.1))
    network: NetworkSource = field(default_factory=NetworkSource)
    drop_isolated: bool = True
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("n_persons", "n_items"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 2:
                raise ConfigError(f"{name}: expected an integer >= 2, got {v!r}")
        for name in ("n_regions", "n_groups"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 2:
                raise ConfigError(f"{name}: expected an integer >= 2, got {v!r}")
        for name in ("base_shape", "base_rate", "s_rho", "s_tau"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and v > 0):
                raise ConfigError(f"{name}: expected a positive number, got {v!r}")
        for name in ("s_gamma", "s_alpha"):
            v = getattr(self, name)
            if v is not None and not (isinstance(v, (int, float)) and v > 0):
                raise ConfigError(f"{name}: expected a positive number, got {v!r}")
        if self.setting not in SETTINGS:
            raise ConfigError(f"setting: expected one of {SETTINGS}, got {self.setting!r}")
        if self.level not in LEVELS:
            raise ConfigError(f"level: expected one of {tuple(LEVELS)}, got {self.level!r}")
        if not isinstance(self.seed, (int, np.integer)) or self.seed < 0:
            raise ConfigError(f"seed: expected a nonnegative integer, got {self.seed!r}")
        self.network.validate()

    @property
    def strength_gamma(self) -> float:
        return float(self.s_gamma) if self.s_gamma is not None else LEVELS[self.level]

    @property
    def strength_alpha(self) -> float:
        return float(self.s_alpha) if self.s_alpha is not None else LEVELS[self.level]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["influence_prior"] = self.influence_prior.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        if not isinstance(d, dict):
            raise ConfigError("config: expected a JSON object")
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        aliases = {"n": "n_persons", "m": "n_items"}
        for short, long in aliases.items():
            if short in d:
                d[long] = d.pop(short)
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"{unknown[0]}: unknown config field")
        if "influence_prior" in d:
            ip = d["influence_prior"]
            try:
                d["influence_prior"] = GammaPrior(ip["shape"], ip["rate"])
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"influence_prior: {exc}") from None
        if "network" in d:
            net = d["network"]
            if not isinstance(net, dict):
                raise ConfigError("network: expected an object")
            nknown = {f.name for f in dataclasses.fields(NetworkSource)}
            bad = sorted(set(net) - nknown)
            if bad:
                raise ConfigError(f"network.{bad[0]}: unknown config field")
            d["network"] = NetworkSource(**net)
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def replace(self, **changes) -> "SimConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class SimTruth:
    rho: np.ndarray
    gamma: np.ndarray
    tau: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    r_person: np.ndarray
    r_item: np.ndarray
    v_person: np.ndarray
    v_item: np.ndarray
    shared: Optional[sp.csr_matrix] = None

    def mu(self, setting: str) -> np.ndarray:
        """Confounded base rates (persons x items), including any shared preferences."""
        if setting == "homophily":
            out = self.rho @ self.gamma.T
        elif setting == "item":
            out = self.alpha @ self.tau.T
        elif setting == "both":
            out = self.rho @ self.gamma.T + self.alpha @ self.tau.T
        else:
            raise ConfigError(f"setting: unknown {setting!r}")
        if self.shared is not None:
            out = out + self.shared.toarray()
        return out

    def take_persons(self, keep) -> "SimTruth":
        keep = np.asarray(keep)
        return dataclasses.replace(
            self, rho=self.rho[keep], alpha=self.alpha[keep], beta=self.beta[keep],
            r_person=self.r_person[keep], v_person=self.v_person[keep],
            shared=None if self.shared is None else self.shared[keep])

    @property
    def person_confounders(self) -> np.ndarray:
        return self.rho

    @property
    def item_confounders(self) -> np.ndarray:
        return self.tau

    def save(self, path) -> None:
        path = Path(path)
        reg_p, grp_p = self.r_person.argmax(1), self.v_person.argmax(1)
        person = np.column_stack([reg_p, grp_p, self.beta, self.rho, self.alpha])
        hdr_p = (["region", "group", "beta"] + [f"rho{p}" for p in range(self.rho.shape[1])]
                 + [f"alpha{p}" for p in range(self.alpha.shape[1])])
        save_grid(person, path / "truth_persons.tsv", hdr_p)
        reg_i, grp_i = self.r_item.argmax(1), self.v_item.argmax(1)
        item = np.column_stack([reg_i, grp_i, self.gamma, self.tau])
        hdr_i = (["region", "group"] + [f"gamma{p}" for p in range(self.gamma.shape[1])]
                 + [f"tau{p}" for p in range(self.tau.shape[1])])
        save_grid(item, path / "truth_items.tsv", hdr_i)

    @classmethod
    def load(cls, path, n_regions: int, n_groups: int) -> "SimTruth":
        path = Path(path)
        p = load_grid(path / "truth_persons.tsv")
        it = load_grid(path / "truth_items.tsv")
        R, G = n_regions, n_groups
        return cls(rho=p[:, 3:3 + R], alpha=p[:, 3 + R:3 + R + G], beta=p[:, 2],
                   gamma=it[:, 2:2 + R], tau=it[:, 2 + R:2 + R + G],
                   r_person=_onehot(p[:, 0].astype(int), R), v_person=_onehot(p[:, 1].astype(int), G),
                   r_item=_onehot(it[:, 0].astype(int), R), v_item=_onehot(it[:, 1].astype(int), G))


def _onehot(labels, n_classes) -> np.ndarray:
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def streams(seed: int) -> dict:
    """Independent named generators derived from one seed."""
    kids = np.random.SeedSequence(seed).spawn(len(_STREAMS))
    return {name: np.random.default_rng(s) for name, s in zip(_STREAMS, kids)}


# --------------------------------------------------------------------------

def generate_sbm(n: int, blocks: int, p_in: float, p_out: float, rng: np.random.Generator):
    """Stochastic block model with contiguous, evenly sized blocks.

    Returns the adjacency and each person's block id.
    """
    if not 0 <= p_out < p_in <= 1:
        raise ValueError("need 0 <= p_out < p_in <= 1")
    block = (np.arange(n) * blocks) // n
    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(block[iu] == block[ju], p_in, p_out)
    keep = rng.random(iu.size) < prob
    return SparseAdjacency(n, iu[keep], ju[keep]), block


def simulate_covariates(cfg: SimConfig, rng: np.random.Generator, person_regions=None):
    """One-hot regions and groups for persons and items."""
    n, m, R, G = cfg.n_persons, cfg.n_items, cfg.n_regions, cfg.n_groups
    if person_regions is None:
        person_regions = rng.integers(0, R, size=n)
    else:
        person_regions = np.asarray(person_regions) % R
    item_regions = rng.integers(0, R, size=m)
    person_groups = rng.integers(0, G, size=n)
    item_groups = rng.integers(0, G, size=m)
    return {
        "r_person": _onehot(person_regions, R),
        "r_item": _onehot(item_regions, R),
        "v_person": _onehot(person_groups, G),
        "v_item": _onehot(item_groups, G),
    }


def _mixture(onehot, a, b, s, rng):
    shape = np.where(onehot > 0, a, a / s)
    return rng.gamma(shape, 1.0 / b)


def simulate_latents(cfg: SimConfig, cov: dict, rng: np.random.Generator) -> SimTruth:
    a, b = cfg.base_shape, cfg.base_rate
    rho = _mixture(cov["r_person"], a, b, cfg.s_rho, rng)
    gamma = _mixture(cov["r_item"], a, b, cfg.strength_gamma, rng)
    tau = _mixture(cov["v_item"], a, b, cfg.s_tau, rng)
    alpha = _mixture(cov["v_person"], a, b, cfg.strength_alpha, rng)
    return SimTruth(rho=rho, gamma=gamma, tau=tau, alpha=alpha, beta=np.zeros(cfg.n_persons),
                    **cov)


def simulate_purchases(cfg: SimConfig, truth: SimTruth, rng: np.random.Generator) -> CountMatrix:
    return CountMatrix(rng.poisson(truth.mu(cfg.setting)))


def simulate_influence(cfg: SimConfig, rng: np.random.Generator) -> np.ndarray:
    draws = rng.gamma(cfg.influence_prior.shape, 1.0 / cfg.influence_prior.rate, size=cfg.n_persons)
    if cfg.zero_influence:
        return np.zeros(cfg.n_persons)
    return draws


def exposure_rates(truth: SimTruth, adj: SparseAdjacency, x: CountMatrix) -> np.ndarray:
    """sum_j a_ij beta_j x_jk as a dense persons x items array."""
    bx = sp.diags(truth.beta) @ x.csr.astype(np.float64)
    return np.asarray((adj.csr @ bx).todense())


def outcome_rates(cfg: SimConfig, truth: SimTruth, adj: SparseAdjacency, x: CountMatrix):
    return truth.mu(cfg.setting) + exposure_rates(truth, adj, x)


def simulate_outcomes(cfg: SimConfig, truth: SimTruth, adj: SparseAdjacency, x: CountMatrix,
                      rng: np.random.Generator) -> CountMatrix:
    return CountMatrix(rng.poisson(outcome_rates(cfg, truth, adj, x)))


def inject_violation(truth: SimTruth, adj: SparseAdjacency, frac_pairs: float, n_shared_items: int,
                     strength: float, rng: np.random.Generator, base_shape: float = 0.25,
                     base_rate: float = 0.5) -> SimTruth:
    """Give a random fraction of linked pairs a shared preference for random items.

    Each selected pair gets its own random item set; both endpoints' rates for
    those items rise by ``strength * base_shape / base_rate``.  The bump lives in
    ``truth.shared`` so the other latents stay untouched.
    """
    if not 0 <= frac_pairs <= 1:
        raise ValueError("frac_pairs must lie in [0, 1]")
    n, m = truth.rho.shape[0], truth.gamma.shape[0]
    if not 0 <= n_shared_items <= m:
        raise ValueError("n_shared_items must lie in [0, n_items]")
    n_sel = int(round(frac_pairs * adj.n_edges))
    chosen = np.sort(rng.choice(adj.n_edges, size=n_sel, replace=False)) if n_sel else np.zeros(0, int)
    bump = strength * base_shape / base_rate
    rows, cols = [], []
    for e in chosen.tolist():
        items = rng.choice(m, size=n_shared_items, replace=False)
        for p in (adj.rows[e], adj.cols[e]):
            rows.append(np.full(n_shared_items, p))
            cols.append(items)
    shared = truth.shared
    if rows and bump > 0 and n_shared_items > 0:
        extra = sp.csr_matrix((np.full(sum(r.size for r in rows), bump),
                               (np.concatenate(rows), np.concatenate(cols))), shape=(n, m))
        shared = extra if shared is None else (shared + extra).tocsr()
    out = dataclasses.replace(truth, shared=shared)
    out.selected_pairs = chosen
    return out


def network_for(cfg: SimConfig, rng: np.random.Generator):
    """Adjacency plus person regions (SBM blocks, or uniform draws for external graphs)."""
    net = cfg.network
    if net.kind == "sbm":
        return generate_sbm(cfg.n_persons, cfg.n_regions, net.p_in, net.p_out, rng)
    adj = load_edgelist(net.path)
    regions = None
    if net.regions_path:
        regions = np.loadtxt(net.regions_path, dtype=np.int64, ndmin=1)
    if adj.n_persons > cfg.n_persons:
        seed_node = int(rng.integers(adj.n_persons))
        adj, mapping = snowball_sample(adj, seed_node, cfg.n_persons, rng)
        if regions is not None:
            old = np.empty(len(mapping), dtype=np.int64)
            for o, nw in mapping.items():
                old[nw] = o
            regions = regions[old]
    elif adj.n_persons < cfg.n_persons:
        raise DataError(f"network has {adj.n_persons} persons, config asks for {cfg.n_persons}")
    return adj, regions


def simulate(cfg: SimConfig, violation: Optional[dict] = None) -> Dataset:
    """Full dataset for one configuration; bit-identical for identical configs.

    ``violation`` (keys ``frac_pairs``, ``n_shared_items``, ``strength``) adds
    shared pair preferences before any purchases are drawn.
    """
    rs = streams(cfg.seed)
    adj, regions = network_for(cfg, rs["network"])
    cov = simulate_covariates(cfg, rs["covariates"], regions)
    truth = simulate_latents(cfg, cov, rs["latents"])
    if violation:
        truth = inject_violation(truth, adj, violation["frac_pairs"], violation["n_shared_items"],
                                 violation["strength"], rs["violation"], cfg.base_shape,
                                 cfg.base_rate)
    x = simulate_purchases(cfg, truth, rs["purchases"])
    truth.beta = simulate_influence(cfg, rs["influence"])
    y = simulate_outcomes(cfg, truth, adj, x, rs["outcomes"])
    ds = Dataset(adj, x, y, truth)
    if cfg.drop_isolated:
        ds, _ = drop_isolated(ds)
    return ds


# --------------------------------------------------------------------------
# dataset directories

DATASET_FILES = ("manifest.json", "adjacency.tsv", "x.tsv", "y.tsv",
                 "truth_persons.tsv", "truth_items.tsv")


def write_dataset(ds: Dataset, path, cfg: Optional[SimConfig] = None, extra: Optional[dict] = None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    save_edgelist(ds.adjacency, path / "adjacency.tsv")
    save_counts(ds.x, path / "x.tsv")
    save_counts(ds.y, path / "y.tsv")
    if ds.truth is not None:
        ds.truth.save(path)
    man = {"n_persons": ds.n_persons, "n_items": ds.n_items, "n_edges": ds.adjacency.n_edges}
    if cfg is not None:
        man["config"] = cfg.to_dict()
        man["seed"] = cfg.seed
    if extra:
        man.update(extra)
    with open(path / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(man, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def read_dataset(path) -> tuple:
    """Load a dataset directory; returns (Dataset, manifest dict)."""
    path = Path(path)
    man = {}
    if (path / "manifest.json").exists():
        with open(path / "manifest.json", encoding="utf-8") as fh:
            man = json.load(fh)
    adj = load_edgelist(path / "adjacency.tsv")
    x = load_counts(path / "x.tsv")
    y = load_counts(path / "y.tsv", x.n_rows, x.n_cols)
    truth = None
    if (path / "truth_persons.tsv").exists() and "config" in man:
        cfg = man["config"]
        truth = SimTruth.load(path, cfg["n_regions"], cfg["n_groups"])
    return Dataset(adj, x, y, truth), man
