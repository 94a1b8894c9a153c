"""Pure Python/numpy implementations of the CAVI inner loops.

These are the reference versions of the routines in ``_ckernels.pyx``; both
modules expose the same functions with the same in-place semantics.
"""

import numpy as np

from .vi import digamma

NAME = "python"


def _logsumexp_rows(scores):
    top = scores.max(axis=1)
    safe = np.where(np.isfinite(top), top, 0.0)
    w = np.exp(scores - safe[:, None])
    tot = w.sum(axis=1)
    return w, tot, safe


def network_sweep(indptr, indices, data, shape, rate, mean, elog,
                  prior_shape, prior_rate, shape_extra, rate_extra,
                  mask_indptr, mask_indices):
    """One Gauss-Seidel pass over persons for the Poisson community model.

    For person i, edge allocations are recomputed from the current factors,
    then Gam(shape, rate) is set to the exact complete conditional.  The column
    totals of ``mean`` are kept current as each person changes.
    """
    n = shape.shape[0]
    colsum = mean.sum(axis=0)
    for i in range(n):
        lo, hi = indptr[i], indptr[i + 1]
        nb = indices[lo:hi]
        k = shape_extra[i] + prior_shape
        if hi > lo:
            scores = elog[i][None, :] + elog[nb]
            w, tot, _ = _logsumexp_rows(scores)
            k = k + (data[lo:hi] / tot) @ w
        r = prior_rate + rate_extra[i] + colsum - mean[i]
        mlo, mhi = mask_indptr[i], mask_indptr[i + 1]
        if mhi > mlo:
            r = r - mean[mask_indices[mlo:mhi]].sum(axis=0)
        r = np.maximum(r, prior_rate)
        old = mean[i].copy()
        shape[i] = k
        rate[i] = r
        mean[i] = k / r
        elog[i] = digamma(k) - np.log(r)
        colsum += mean[i] - old


def bipartite_allocate(indptr, indices, data, elog_row, elog_col, row_stats, col_stats):
    """Allocate each nonzero count over factors; accumulate expected counts.

    Returns sum over nonzeros of count * log(sum_q exp(elog_row + elog_col)).
    """
    n = indptr.shape[0] - 1
    nnz = indices.shape[0]
    if nnz == 0:
        return 0.0
    rows = np.repeat(np.arange(n), np.diff(indptr))
    scores = elog_row[rows] + elog_col[indices]
    w, tot, top = _logsumexp_rows(scores)
    phi = w * (data / tot)[:, None]
    K = elog_row.shape[1]
    row_stats += _row_reduce(phi, indptr, K)
    m = col_stats.shape[0]
    for q in range(K):
        col_stats[:, q] += np.bincount(indices, weights=phi[:, q], minlength=m)
    return float(np.sum(data * (np.log(tot) + top)))


def _row_reduce(vals, indptr, K):
    n = indptr.shape[0] - 1
    out = np.zeros((n, K))
    lens = np.diff(indptr)
    nz = lens > 0
    if np.any(nz):
        out[nz] = np.add.reduceat(vals, indptr[:-1][nz], axis=0)
    return out


def outcome_allocate(y_indptr, y_indices, y_data, logu, elog_gamma, elog_alpha, logw,
                     exp_ptr, exp_j, exp_val, elog_beta,
                     gamma_stats, u_stats, alpha_stats, beta_stats, obs_total):
    """Joint multinomial allocation of each positive outcome count.

    Components for observation (i, k): the person-covariate block
    ``elog_gamma[k] + logu[i]``, the item-covariate block
    ``elog_alpha[i] + logw[k]`` and one exposure entry per peer
    ``elog_beta[j] + log(exp_val)``.  Observations without any finite
    component are skipped.  Returns (loglik, n_skipped, first_skipped).
    """
    n = y_indptr.shape[0] - 1
    nnz = y_indices.shape[0]
    if nnz == 0:
        return 0.0, 0, -1
    rows = np.repeat(np.arange(n), np.diff(y_indptr))
    cols = y_indices
    Kc, Kw = logu.shape[1], logw.shape[1]
    top = np.full(nnz, -np.inf)
    sg = elog_gamma[cols] + logu[rows] if Kc else np.zeros((nnz, 0))
    sa = elog_alpha[rows] + logw[cols] if Kw else np.zeros((nnz, 0))
    if Kc:
        top = np.maximum(top, sg.max(axis=1))
    if Kw:
        top = np.maximum(top, sa.max(axis=1))
    n_exp = exp_j.shape[0]
    obs_of = np.repeat(np.arange(nnz), np.diff(exp_ptr))
    se = elog_beta[exp_j] + np.log(exp_val) if n_exp else np.zeros(0)
    if n_exp:
        np.maximum.at(top, obs_of, se)
    empty = ~np.isfinite(top)
    safe = np.where(empty, 0.0, top)
    tot = np.zeros(nnz)
    wg = np.exp(sg - safe[:, None])
    wa = np.exp(sa - safe[:, None])
    we = np.exp(se - safe[obs_of]) if n_exp else np.zeros(0)
    tot += wg.sum(axis=1) + wa.sum(axis=1)
    if n_exp:
        tot += np.bincount(obs_of, weights=we, minlength=nnz)
    scale = np.where(empty, 0.0, y_data / np.where(empty, 1.0, tot))
    pg = wg * scale[:, None]
    pa = wa * scale[:, None]
    pe = we * scale[obs_of] if n_exp else np.zeros(0)
    for q in range(Kc):
        gamma_stats[:, q] += np.bincount(cols, weights=pg[:, q], minlength=gamma_stats.shape[0])
    if Kc:
        u_stats += _row_reduce(pg, y_indptr, Kc)
    if Kw:
        alpha_stats += _row_reduce(pa, y_indptr, Kw)
    if n_exp:
        beta_stats += np.bincount(exp_j, weights=pe, minlength=beta_stats.shape[0])
    obs_total[:] = pg.sum(axis=1) + pa.sum(axis=1)
    if n_exp:
        obs_total += np.bincount(obs_of, weights=pe, minlength=nnz)
    ok = ~empty
    loglik = float(np.sum(y_data[ok] * (np.log(tot[ok]) + top[ok])))
    n_empty = int(empty.sum())
    first = int(np.argmax(empty)) if n_empty else -1
    return loglik, n_empty, first


def exposure_index(a_indptr, a_indices, x_indptr, x_indices, x_data, cell_rowptr, cell_cols,
                   n_cols, chunk=2_000_000):
    """Peer exposures for cells grouped by row (unique, sorted within a row).

    Returns (ptr, peers, values): cell ``t`` owns ``peers[ptr[t]:ptr[t+1]]``,
    listed in adjacency order.
    """
    n = cell_rowptr.shape[0] - 1
    rows = np.repeat(np.arange(n, dtype=np.int64), np.diff(cell_rowptr))
    cols = np.asarray(cell_cols, dtype=np.int64)
    n_x_rows = x_indptr.shape[0] - 1
    xkeys = np.repeat(np.arange(n_x_rows, dtype=np.int64), np.diff(x_indptr)) * n_cols + x_indices
    deg = np.diff(a_indptr)
    ncell = rows.size
    counts = np.zeros(ncell, dtype=np.int64)
    peers_out, vals_out = [], []
    lens = deg[rows] if ncell else np.zeros(0, dtype=np.int64)
    # cells are processed in slices of about ``chunk`` candidate peers
    first = np.concatenate([[0], np.cumsum(lens)[:-1]]) // chunk if ncell else lens
    edges = np.flatnonzero(np.diff(first)) + 1
    for start, stop in zip(np.concatenate([[0], edges]), np.concatenate([edges, [ncell]])):
        if stop <= start:
            continue
        r, c, ln = rows[start:stop], cols[start:stop], lens[start:stop]
        tot = int(ln.sum())
        if tot and xkeys.size:
            cell_of = np.repeat(np.arange(start, stop), ln)
            offs = np.repeat(a_indptr[r] - np.cumsum(np.concatenate([[0], ln[:-1]])), ln)
            j = np.asarray(a_indices)[offs + np.arange(tot)].astype(np.int64)
            key = j * n_cols + np.repeat(c, ln)
            pos = np.minimum(np.searchsorted(xkeys, key), xkeys.size - 1)
            hit = xkeys[pos] == key
            counts += np.bincount(cell_of[hit], minlength=ncell)
            peers_out.append(j[hit])
            vals_out.append(np.asarray(x_data)[pos[hit]])
    ptr = np.zeros(ncell + 1, dtype=np.int64)
    np.cumsum(counts, out=ptr[1:])
    peers = np.concatenate(peers_out) if peers_out else np.zeros(0, dtype=np.int64)
    vals = np.concatenate(vals_out).astype(np.float64) if vals_out else np.zeros(0)
    return ptr, peers.astype(np.int64), vals
