"""Sparse containers for networks and count matrices, plus TSV IO and subsampling.

File formats are tab separated with ``#`` comments.  An edgelist may carry an
``n=<int>`` header line; a triplet count file may carry ``shape=<rows>,<cols>``.
Whitespace other than tabs is accepted on read.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import numpy as np
import scipy.sparse as sp


class DataError(ValueError):
    """Malformed input data or inconsistent dimensions."""


class SparseAdjacency:
    """Undirected binary network over ``n_persons`` nodes.

    Edges are stored once as ``(i, j)`` with ``i < j``, sorted lexicographically.
    A symmetric CSR view (``csr``) is built lazily for neighbour queries.
    """

    __slots__ = ("n_persons", "_rows", "_cols", "_csr")

    def __init__(self, n_persons: int, rows=(), cols=()):
        n_persons = int(n_persons)
        if n_persons < 0:
            raise DataError("n_persons must be nonnegative")
        r = np.asarray(rows, dtype=np.int64).ravel()
        c = np.asarray(cols, dtype=np.int64).ravel()
        if r.shape != c.shape:
            raise DataError("edge endpoint arrays differ in length")
        if r.size:
            if np.any(r == c):
                bad = int(r[np.argmax(r == c)])
                raise DataError(f"self-loop on person {bad}")
            lo, hi = np.minimum(r, c), np.maximum(r, c)
            if lo.min() < 0 or hi.max() >= n_persons:
                raise DataError(f"edge index out of range for n_persons={n_persons}")
            key = np.unique(lo * n_persons + hi)
            r, c = key // n_persons, key % n_persons
        self.n_persons = n_persons
        self._rows = r
        self._cols = c
        self._rows.setflags(write=False)
        self._cols.setflags(write=False)
        self._csr = None

    @classmethod
    def from_edges(cls, n_persons: int, edges) -> "SparseAdjacency":
        edges = list(edges)
        if not edges:
            return cls(n_persons)
        arr = np.asarray(edges, dtype=np.int64)
        return cls(n_persons, arr[:, 0], arr[:, 1])

    @property
    def rows(self) -> np.ndarray:
        return self._rows

    @property
    def cols(self) -> np.ndarray:
        return self._cols

    @property
    def n_edges(self) -> int:
        return int(self._rows.size)

    @property
    def edges(self) -> set:
        return set(zip(self._rows.tolist(), self._cols.tolist()))

    @property
    def csr(self) -> sp.csr_matrix:
        if self._csr is None:
            n = self.n_persons
            data = np.ones(2 * self.n_edges, dtype=np.float64)
            ii = np.concatenate([self._rows, self._cols])
            jj = np.concatenate([self._cols, self._rows])
            m = sp.csr_matrix((data, (ii, jj)), shape=(n, n))
            m.sort_indices()
            self._csr = m
        return self._csr

    def degree(self) -> np.ndarray:
        deg = np.zeros(self.n_persons, dtype=np.int64)
        np.add.at(deg, self._rows, 1)
        np.add.at(deg, self._cols, 1)
        return deg

    def neighbors(self, i: int) -> np.ndarray:
        m = self.csr
        return m.indices[m.indptr[i]:m.indptr[i + 1]]

    def subgraph(self, keep) -> "SparseAdjacency":
        """Induced subgraph on ``keep`` (old ids), relabelled in the given order."""
        keep = np.asarray(keep, dtype=np.int64)
        new_id = np.full(self.n_persons, -1, dtype=np.int64)
        new_id[keep] = np.arange(keep.size)
        a, b = new_id[self._rows], new_id[self._cols]
        ok = (a >= 0) & (b >= 0)
        return SparseAdjacency(keep.size, a[ok], b[ok])

    def __eq__(self, other):
        if not isinstance(other, SparseAdjacency):
            return NotImplemented
        return (self.n_persons == other.n_persons
                and np.array_equal(self._rows, other._rows)
                and np.array_equal(self._cols, other._cols))

    def __repr__(self):
        return f"SparseAdjacency(n_persons={self.n_persons}, n_edges={self.n_edges})"


class CountMatrix:
    """Nonnegative integer matrix stored as canonical CSR (no zeros, no duplicates)."""

    __slots__ = ("_csr",)

    def __init__(self, matrix):
        m = sp.csr_matrix(matrix, dtype=np.int64, copy=True)
        m.sum_duplicates()
        m.eliminate_zeros()
        m.sort_indices()
        if m.nnz and m.data.min() < 0:
            raise DataError("counts must be nonnegative")
        m.data.setflags(write=False)
        self._csr = m

    @classmethod
    def from_triplets(cls, rows, cols, counts, shape) -> "CountMatrix":
        r = np.asarray(rows, dtype=np.int64)
        c = np.asarray(cols, dtype=np.int64)
        v = np.asarray(counts, dtype=np.int64)
        n_rows, n_cols = shape
        if r.size:
            if v.min() < 0:
                raise DataError("negative count")
            if r.min() < 0 or r.max() >= n_rows or c.min() < 0 or c.max() >= n_cols:
                raise DataError(f"entry index out of range for shape {shape}")
        return cls(sp.coo_matrix((v, (r, c)), shape=shape))

    @classmethod
    def zeros(cls, n_rows: int, n_cols: int) -> "CountMatrix":
        return cls(sp.csr_matrix((n_rows, n_cols), dtype=np.int64))

    @property
    def csr(self) -> sp.csr_matrix:
        return self._csr

    @property
    def shape(self):
        return self._csr.shape

    @property
    def n_rows(self) -> int:
        return self._csr.shape[0]

    @property
    def n_cols(self) -> int:
        return self._csr.shape[1]

    @property
    def nnz(self) -> int:
        return self._csr.nnz

    def triplets(self):
        coo = self._csr.tocoo()
        return coo.row.astype(np.int64), coo.col.astype(np.int64), coo.data.astype(np.int64)

    def entries(self):
        r, c, v = self.triplets()
        return list(zip(r.tolist(), c.tolist(), v.tolist()))

    def toarray(self) -> np.ndarray:
        return self._csr.toarray()

    def binarize(self) -> "CountMatrix":
        m = self._csr.copy()
        m.data = np.ones_like(m.data)
        return CountMatrix(m)

    def take_rows(self, rows) -> "CountMatrix":
        return CountMatrix(self._csr[np.asarray(rows, dtype=np.int64)])

    def row_nnz(self) -> np.ndarray:
        return np.diff(self._csr.indptr)

    def total(self) -> int:
        return int(self._csr.data.sum())

    def __eq__(self, other):
        if not isinstance(other, CountMatrix):
            return NotImplemented
        a, b = self._csr, other._csr
        return (a.shape == b.shape and np.array_equal(a.indptr, b.indptr)
                and np.array_equal(a.indices, b.indices) and np.array_equal(a.data, b.data))

    def __repr__(self):
        return f"CountMatrix(shape={self.shape}, nnz={self.nnz})"


@dataclass(frozen=True)
class CellSet:
    """A set of matrix cells, stored as sorted unique (row, col) arrays."""

    rows: np.ndarray
    cols: np.ndarray
    shape: tuple

    @classmethod
    def build(cls, rows, cols, shape) -> "CellSet":
        r = np.asarray(rows, dtype=np.int64)
        c = np.asarray(cols, dtype=np.int64)
        key = np.unique(r * shape[1] + c)
        return cls(key // shape[1], key % shape[1], tuple(shape))

    def __len__(self):
        return int(self.rows.size)

    def to_set(self) -> set:
        return set(zip(self.rows.tolist(), self.cols.tolist()))

    def values(self, m) -> np.ndarray:
        """Counts of ``m`` (CountMatrix or SparseAdjacency) at these cells."""
        csr = m.csr if isinstance(m, (CountMatrix, SparseAdjacency)) else sp.csr_matrix(m)
        if not len(self):
            return np.zeros(0, dtype=np.int64)
        return np.asarray(csr[self.rows, self.cols]).ravel().astype(np.int64)

    def indicator(self, symmetric: bool = False) -> sp.csr_matrix:
        data = np.ones(len(self), dtype=np.float64)
        r, c = self.rows, self.cols
        if symmetric:
            r, c, data = np.concatenate([r, c]), np.concatenate([c, r]), np.concatenate([data, data])
        m = sp.csr_matrix((data, (r, c)), shape=self.shape)
        m.sort_indices()
        return m


@dataclass
class Dataset:
    adjacency: SparseAdjacency
    x: CountMatrix
    y: CountMatrix
    truth: Optional[Any] = None

    def __post_init__(self):
        if self.x.shape != self.y.shape:
            raise DataError(f"x has shape {self.x.shape} but y has {self.y.shape}")
        if self.adjacency.n_persons != self.x.n_rows:
            raise DataError("adjacency size does not match the number of count rows")

    @property
    def n_persons(self) -> int:
        return self.x.n_rows

    @property
    def n_items(self) -> int:
        return self.x.n_cols


# --------------------------------------------------------------------------
# IO

def _data_lines(path):
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if body.startswith(("n=", "shape=")):
                    yield lineno, body, True
                continue
            yield lineno, line, line.startswith(("n=", "shape="))


def load_edgelist(path) -> SparseAdjacency:
    declared = None
    pairs = []
    for lineno, line, is_header in _data_lines(path):
        if is_header:
            try:
                declared = int(line.split("=", 1)[1])
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad header {line!r}") from None
            continue
        parts = line.split()
        if len(parts) != 2:
            raise DataError(f"{path}:{lineno}: expected 2 fields, got {len(parts)}")
        try:
            i, j = int(parts[0]), int(parts[1])
        except ValueError:
            raise DataError(f"{path}:{lineno}: non-integer index") from None
        if i < 0 or j < 0:
            raise DataError(f"{path}:{lineno}: negative index")
        if i == j:
            raise DataError(f"{path}:{lineno}: self-loop on person {i}")
        if declared is not None and max(i, j) >= declared:
            raise DataError(f"{path}:{lineno}: index {max(i, j)} overflows n={declared}")
        pairs.append((i, j))
    n = declared if declared is not None else (1 + max(max(p) for p in pairs) if pairs else 0)
    return SparseAdjacency.from_edges(n, pairs)


def save_edgelist(adj: SparseAdjacency, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"n={adj.n_persons}\n")
        for i, j in zip(adj.rows.tolist(), adj.cols.tolist()):
            fh.write(f"{i}\t{j}\n")


def load_counts(path, n_rows: int | None = None, n_cols: int | None = None) -> CountMatrix:
    shape = None
    rows, cols, vals = [], [], []
    for lineno, line, is_header in _data_lines(path):
        if is_header:
            if line.startswith("shape="):
                try:
                    r, c = line.split("=", 1)[1].split(",")
                    shape = (int(r), int(c))
                except ValueError:
                    raise DataError(f"{path}:{lineno}: bad header {line!r}") from None
            continue
        parts = line.split()
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: expected 3 fields, got {len(parts)}")
        try:
            r, c, v = (int(p) for p in parts)
        except ValueError:
            raise DataError(f"{path}:{lineno}: non-integer field") from None
        if v < 0:
            raise DataError(f"{path}:{lineno}: negative count {v}")
        if r < 0 or c < 0:
            raise DataError(f"{path}:{lineno}: negative index")
        rows.append(r)
        cols.append(c)
        vals.append(v)
    if n_rows is None:
        n_rows = shape[0] if shape else (max(rows) + 1 if rows else 0)
    if n_cols is None:
        n_cols = shape[1] if shape else (max(cols) + 1 if cols else 0)
    for r, c in zip(rows, cols):
        if r >= n_rows or c >= n_cols:
            raise DataError(f"{path}: entry ({r}, {c}) out of range for shape ({n_rows}, {n_cols})")
    return CountMatrix.from_triplets(rows, cols, vals, (n_rows, n_cols))


def save_counts(m: CountMatrix, path) -> None:
    r, c, v = m.triplets()
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"shape={m.n_rows},{m.n_cols}\n")
        for a, b, k in zip(r.tolist(), c.tolist(), v.tolist()):
            fh.write(f"{a}\t{b}\t{k}\n")


def save_grid(grid: np.ndarray, path, header=None) -> None:
    """Write a float grid as TSV; floats use repr so reads round-trip exactly."""
    grid = np.atleast_2d(np.asarray(grid))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if header:
            fh.write("#" + "\t".join(header) + "\n")
        for row in grid.tolist():
            fh.write("\t".join(repr(v) for v in row) + "\n")


def load_grid(path) -> np.ndarray:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                rows.append([float(v) for v in line.split("\t")])
    return np.asarray(rows, dtype=np.float64)


# --------------------------------------------------------------------------
# Subsampling and splits

def snowball_sample(adj: SparseAdjacency, seed_node: int, target_n: int,
                    rng: np.random.Generator):
    """Breadth-first subgraph of exactly ``target_n`` persons.

    Frontier layers are shuffled with ``rng`` and appended whole until the
    target is reached, then the last layer is truncated.  When a component is
    exhausted early, expansion restarts from a random unvisited person.
    Returns the induced subgraph and a dict mapping old ids to new ids.
    """
    n = adj.n_persons
    if not 0 <= seed_node < n:
        raise DataError(f"seed node {seed_node} not in [0, {n})")
    if target_n > n:
        raise DataError(f"graph has {n} persons, fewer than target {target_n}")
    if target_n < 1:
        raise DataError("target_n must be positive")
    csr = adj.csr
    visited = np.zeros(n, dtype=bool)
    order = []
    layer = [seed_node]
    visited[seed_node] = True
    while len(order) < target_n:
        if not layer:
            free = np.flatnonzero(~visited)
            nxt = int(rng.choice(free))
            visited[nxt] = True
            layer = [nxt]
        order.extend(layer)
        if len(order) >= target_n:
            break
        frontier = []
        for u in layer:
            for v in csr.indices[csr.indptr[u]:csr.indptr[u + 1]].tolist():
                if not visited[v]:
                    visited[v] = True
                    frontier.append(v)
        frontier = sorted(frontier)
        rng.shuffle(frontier)
        layer = frontier
    keep = np.asarray(order[:target_n], dtype=np.int64)
    mapping = {int(old): new for new, old in enumerate(keep.tolist())}
    return adj.subgraph(keep), mapping


def drop_isolated(ds: Dataset):
    """Remove persons without peers; returns the reduced dataset and kept old ids."""
    keep = np.flatnonzero(ds.adjacency.degree() > 0)
    if keep.size == 0:
        raise DataError("every person is isolated; nothing left to analyse")
    truth = ds.truth.take_persons(keep) if ds.truth is not None else None
    out = Dataset(ds.adjacency.subgraph(keep), ds.x.take_rows(keep), ds.y.take_rows(keep), truth)
    return out, keep


def remove_cells(m: CountMatrix, cells: CellSet) -> CountMatrix:
    """Copy of ``m`` with the given cells set to zero."""
    if not len(cells):
        return m
    mask = cells.indicator()
    keep = m.csr - m.csr.multiply(mask).astype(np.int64)
    return CountMatrix(keep)


def holdout_split(m: CountMatrix, fraction: float, rng: np.random.Generator):
    """Hold out ``ceil(fraction * nnz)`` nonzero entries per row.

    Rows with a single nonzero keep it.  Returns the training matrix and the
    held-out cells.
    """
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    if m.nnz == 0:
        raise DataError("cannot split an empty matrix")
    csr = m.csr
    hr, hc = [], []
    for i in range(m.n_rows):
        lo, hi = csr.indptr[i], csr.indptr[i + 1]
        k = hi - lo
        if k <= 1:
            continue
        take = math.ceil(fraction * k)
        pick = rng.choice(k, size=take, replace=False)
        hr.append(np.full(take, i, dtype=np.int64))
        hc.append(csr.indices[lo + np.sort(pick)].astype(np.int64))
    if hr:
        cells = CellSet.build(np.concatenate(hr), np.concatenate(hc), m.shape)
    else:
        cells = CellSet.build([], [], m.shape)
    return remove_cells(m, cells), cells


def holdout_cells(n_rows: int, n_cols: int, fraction: float, rng: np.random.Generator) -> CellSet:
    """Per row, ``ceil(fraction * n_cols)`` cells chosen without regard to their values."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    take = math.ceil(fraction * n_cols)
    rows = np.repeat(np.arange(n_rows, dtype=np.int64), take)
    cols = np.concatenate([rng.choice(n_cols, size=take, replace=False) for _ in range(n_rows)]) \
        if n_rows else np.zeros(0, dtype=np.int64)
    return CellSet.build(rows, cols, (n_rows, n_cols))


def holdout_pairs(n: int, fraction: float, rng: np.random.Generator) -> CellSet:
    """Person pairs (i < j) held out without regard to whether they are linked.

    Each person nominates ``ceil(fraction * (n - 1))`` others; the union of the
    nominated unordered pairs forms the mask.
    """
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    if n < 2:
        raise DataError("need at least two persons")
    take = math.ceil(fraction * (n - 1))
    rows, cols = [], []
    for i in range(n):
        others = rng.choice(n - 1, size=take, replace=False)
        others = others + (others >= i)
        rows.append(np.full(take, i, dtype=np.int64))
        cols.append(others.astype(np.int64))
    r, c = np.concatenate(rows), np.concatenate(cols)
    return CellSet.build(np.minimum(r, c), np.maximum(r, c), (n, n))


def remove_pairs(adj: SparseAdjacency, pairs: CellSet) -> SparseAdjacency:
    held = pairs.rows * adj.n_persons + pairs.cols
    key = adj.rows * adj.n_persons + adj.cols
    keep = ~np.isin(key, held)
    return SparseAdjacency(adj.n_persons, adj.rows[keep], adj.cols[keep])
