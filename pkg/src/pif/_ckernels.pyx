# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled CAVI inner loops; same contract as ``pif._pykernels``."""

import numpy as np

from libc.math cimport exp, log, INFINITY, isfinite

NAME = "cython"


cdef double _digamma(double x) noexcept nogil:
    cdef double acc = 0.0
    cdef double inv2, series
    while x < 10.0:
        acc -= 1.0 / x
        x += 1.0
    inv2 = 1.0 / (x * x)
    # asymptotic series through x^-14, Horner form
    series = (((((( (1.0 / 12.0) * inv2
                    - 691.0 / 32760.0) * inv2
                   + 5.0 / 660.0) * inv2
                  - 1.0 / 240.0) * inv2
                 + 1.0 / 252.0) * inv2
                - 1.0 / 120.0) * inv2
               + 1.0 / 12.0)
    return acc + log(x) - 0.5 / x - series * inv2


def digamma_c(double x):
    if not x > 0:
        raise ValueError("digamma is only defined here for x > 0")
    return _digamma(x)


def network_sweep(const long[::1] indptr, const int[::1] indices, const double[::1] data,
                  double[:, ::1] shape, double[:, ::1] rate, double[:, ::1] mean,
                  double[:, ::1] elog, double prior_shape, double prior_rate,
                  const double[:, ::1] shape_extra, const double[:, ::1] rate_extra,
                  const long[::1] mask_indptr, const int[::1] mask_indices):
    cdef Py_ssize_t n = shape.shape[0]
    cdef Py_ssize_t K = shape.shape[1]
    cdef Py_ssize_t i, e, q, j
    cdef double top, tot, s, r, old, k
    cdef double[::1] colsum = np.zeros(K)
    cdef double[::1] acc = np.zeros(K)
    cdef double[::1] w = np.zeros(K)
    cdef double[::1] msum = np.zeros(K)
    with nogil:
        for i in range(n):
            for q in range(K):
                colsum[q] += mean[i, q]
        for i in range(n):
            for q in range(K):
                acc[q] = 0.0
                msum[q] = 0.0
            for e in range(indptr[i], indptr[i + 1]):
                j = indices[e]
                top = -INFINITY
                for q in range(K):
                    w[q] = elog[i, q] + elog[j, q]
                    if w[q] > top:
                        top = w[q]
                tot = 0.0
                for q in range(K):
                    w[q] = exp(w[q] - top)
                    tot += w[q]
                s = data[e] / tot
                for q in range(K):
                    acc[q] += w[q] * s
            for e in range(mask_indptr[i], mask_indptr[i + 1]):
                j = mask_indices[e]
                for q in range(K):
                    msum[q] += mean[j, q]
            for q in range(K):
                k = prior_shape + shape_extra[i, q] + acc[q]
                r = prior_rate + rate_extra[i, q] + (colsum[q] - mean[i, q]) - msum[q]
                if r < prior_rate:
                    r = prior_rate
                old = mean[i, q]
                shape[i, q] = k
                rate[i, q] = r
                mean[i, q] = k / r
                elog[i, q] = _digamma(k) - log(r)
                colsum[q] += mean[i, q] - old


def bipartite_allocate(const long[::1] indptr, const int[::1] indices, const double[::1] data,
                       const double[:, ::1] elog_row, const double[:, ::1] elog_col,
                       double[:, ::1] row_stats, double[:, ::1] col_stats):
    cdef Py_ssize_t n = indptr.shape[0] - 1
    cdef Py_ssize_t K = elog_row.shape[1]
    cdef Py_ssize_t i, e, q, c
    cdef double top, tot, s
    cdef double loglik = 0.0
    cdef double[::1] w = np.zeros(max(K, 1))
    with nogil:
        for i in range(n):
            for e in range(indptr[i], indptr[i + 1]):
                c = indices[e]
                top = -INFINITY
                for q in range(K):
                    w[q] = elog_row[i, q] + elog_col[c, q]
                    if w[q] > top:
                        top = w[q]
                tot = 0.0
                for q in range(K):
                    w[q] = exp(w[q] - top)
                    tot += w[q]
                s = data[e] / tot
                for q in range(K):
                    row_stats[i, q] += w[q] * s
                    col_stats[c, q] += w[q] * s
                loglik += data[e] * (log(tot) + top)
    return loglik


cdef double _TINY = 1e-280


def outcome_allocate(const long[::1] y_indptr, const int[::1] y_indices, const double[::1] y_data,
                     const double[:, ::1] logu, const double[:, ::1] elog_gamma,
                     const double[:, ::1] elog_alpha, const double[:, ::1] logw,
                     const long[::1] exp_ptr, const long[::1] exp_j, const double[::1] exp_val,
                     const double[::1] elog_beta,
                     double[:, ::1] gamma_stats, double[:, ::1] u_stats,
                     double[:, ::1] alpha_stats, double[::1] beta_stats, double[::1] obs_total):
    cdef Py_ssize_t n = y_indptr.shape[0] - 1
    cdef Py_ssize_t Kc = logu.shape[1]
    cdef Py_ssize_t Kw = logw.shape[1]
    cdef Py_ssize_t i, e, k, q, t, j
    cdef double top, tot, s, v, alloc
    cdef double loglik = 0.0
    cdef long n_empty = 0
    cdef long first = -1
    cdef double[::1] wg = np.zeros(max(Kc, 1))
    cdef double[::1] wa = np.zeros(max(Kw, 1))
    # linear-scale factors; the fast path multiplies instead of exponentiating
    cdef double[:, ::1] eu = np.exp(np.asarray(logu))
    cdef double[:, ::1] eg = np.exp(np.asarray(elog_gamma))
    cdef double[:, ::1] ea = np.exp(np.asarray(elog_alpha))
    cdef double[:, ::1] ew = np.exp(np.asarray(logw))
    cdef double[::1] eb = np.exp(np.asarray(elog_beta))
    with nogil:
        for i in range(n):
            for e in range(y_indptr[i], y_indptr[i + 1]):
                k = y_indices[e]
                tot = 0.0
                for q in range(Kc):
                    wg[q] = eg[k, q] * eu[i, q]
                    tot += wg[q]
                for q in range(Kw):
                    wa[q] = ea[i, q] * ew[k, q]
                    tot += wa[q]
                for t in range(exp_ptr[e], exp_ptr[e + 1]):
                    tot += eb[exp_j[t]] * exp_val[t]
                if tot > _TINY and isfinite(tot):
                    s = y_data[e] / tot
                    top = 0.0
                    alloc = 0.0
                    for q in range(Kc):
                        gamma_stats[k, q] += wg[q] * s
                        u_stats[i, q] += wg[q] * s
                        alloc += wg[q] * s
                    for q in range(Kw):
                        alpha_stats[i, q] += wa[q] * s
                        alloc += wa[q] * s
                    for t in range(exp_ptr[e], exp_ptr[e + 1]):
                        j = exp_j[t]
                        v = eb[j] * exp_val[t] * s
                        beta_stats[j] += v
                        alloc += v
                    obs_total[e] = alloc
                    loglik += y_data[e] * log(tot)
                    continue
                # underflow or overflow: redo this observation in the log domain
                top = -INFINITY
                for q in range(Kc):
                    wg[q] = elog_gamma[k, q] + logu[i, q]
                    if wg[q] > top:
                        top = wg[q]
                for q in range(Kw):
                    wa[q] = elog_alpha[i, q] + logw[k, q]
                    if wa[q] > top:
                        top = wa[q]
                for t in range(exp_ptr[e], exp_ptr[e + 1]):
                    v = elog_beta[exp_j[t]] + log(exp_val[t])
                    if v > top:
                        top = v
                if not isfinite(top):
                    n_empty += 1
                    if first < 0:
                        first = e
                    obs_total[e] = 0.0
                    continue
                tot = 0.0
                for q in range(Kc):
                    wg[q] = exp(wg[q] - top)
                    tot += wg[q]
                for q in range(Kw):
                    wa[q] = exp(wa[q] - top)
                    tot += wa[q]
                for t in range(exp_ptr[e], exp_ptr[e + 1]):
                    tot += exp(elog_beta[exp_j[t]] + log(exp_val[t]) - top)
                s = y_data[e] / tot
                alloc = 0.0
                for q in range(Kc):
                    gamma_stats[k, q] += wg[q] * s
                    u_stats[i, q] += wg[q] * s
                    alloc += wg[q] * s
                for q in range(Kw):
                    alpha_stats[i, q] += wa[q] * s
                    alloc += wa[q] * s
                for t in range(exp_ptr[e], exp_ptr[e + 1]):
                    j = exp_j[t]
                    v = exp(elog_beta[j] + log(exp_val[t]) - top) * s
                    beta_stats[j] += v
                    alloc += v
                obs_total[e] = alloc
                loglik += y_data[e] * (log(tot) + top)
    return loglik, n_empty, first


def exposure_index(const long[::1] a_indptr, const int[::1] a_indices,
                   const long[::1] x_indptr, const int[::1] x_indices, const double[::1] x_data,
                   const long[::1] cell_rowptr, const long[::1] cell_cols, Py_ssize_t n_cols):
    cdef Py_ssize_t n = cell_rowptr.shape[0] - 1
    cdef Py_ssize_t ncell = cell_cols.shape[0]
    cdef Py_ssize_t i, c, a, j, e, slot
    cdef long[::1] marker = np.full(n_cols, -1, dtype=np.int64)
    cdef long[::1] ptr = np.zeros(ncell + 1, dtype=np.int64)
    cdef long[::1] fill
    cdef long[::1] peers
    cdef double[::1] vals
    with nogil:
        for i in range(n):
            for c in range(cell_rowptr[i], cell_rowptr[i + 1]):
                marker[cell_cols[c]] = c
            for a in range(a_indptr[i], a_indptr[i + 1]):
                j = a_indices[a]
                for e in range(x_indptr[j], x_indptr[j + 1]):
                    slot = marker[x_indices[e]]
                    if slot >= 0:
                        ptr[slot + 1] += 1
            for c in range(cell_rowptr[i], cell_rowptr[i + 1]):
                marker[cell_cols[c]] = -1
        for c in range(ncell):
            ptr[c + 1] += ptr[c]
    fill = np.asarray(ptr[:ncell]).copy()
    peers = np.empty(ptr[ncell], dtype=np.int64)
    vals = np.empty(ptr[ncell], dtype=np.float64)
    with nogil:
        for i in range(n):
            for c in range(cell_rowptr[i], cell_rowptr[i + 1]):
                marker[cell_cols[c]] = c
            for a in range(a_indptr[i], a_indptr[i + 1]):
                j = a_indices[a]
                for e in range(x_indptr[j], x_indptr[j + 1]):
                    slot = marker[x_indices[e]]
                    if slot >= 0:
                        peers[fill[slot]] = j
                        vals[fill[slot]] = x_data[e]
                        fill[slot] += 1
            for c in range(cell_rowptr[i], cell_rowptr[i + 1]):
                marker[cell_cols[c]] = -1
    return np.asarray(ptr), np.asarray(peers), np.asarray(vals)
