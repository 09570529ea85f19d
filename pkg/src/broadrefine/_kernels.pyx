# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled conjunctive-match kernel used by the search engine."""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def conjunctive_filter(const cnp.int64_t[::1] rows,
                       const cnp.int32_t[:, ::1] attr_codes,
                       const cnp.int64_t[::1] eq_cols,
                       const cnp.int32_t[::1] eq_vals,
                       const cnp.int64_t[::1] neg_cols,
                       const cnp.int32_t[::1] neg_vals,
                       const double[:, ::1] num,
                       const cnp.int64_t[::1] rng_cols,
                       const double[::1] lo,
                       const double[::1] hi,
                       const cnp.uint64_t[:, ::1] tag_bits,
                       const cnp.uint64_t[::1] req):
    cdef Py_ssize_t n = rows.shape[0]
    cdef Py_ssize_t n_eq = eq_cols.shape[0]
    cdef Py_ssize_t n_neg = neg_cols.shape[0]
    cdef Py_ssize_t n_rng = rng_cols.shape[0]
    cdef Py_ssize_t n_words = req.shape[0]
    cdef Py_ssize_t i, j, r, count = 0
    cdef double x
    cdef bint ok
    out = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] out_v = out
    for i in range(n):
        r = rows[i]
        ok = True
        for j in range(n_eq):
            if attr_codes[r, eq_cols[j]] != eq_vals[j]:
                ok = False
                break
        if not ok:
            continue
        for j in range(n_neg):
            if attr_codes[r, neg_cols[j]] == neg_vals[j]:
                ok = False
                break
        if not ok:
            continue
        for j in range(n_rng):
            x = num[r, rng_cols[j]]
            # NaN (missing value) fails both comparisons.
            if not (x >= lo[j] and x <= hi[j]):
                ok = False
                break
        if not ok:
            continue
        for j in range(n_words):
            if (tag_bits[r, j] & req[j]) != req[j]:
                ok = False
                break
        if ok:
            out_v[count] = r
            count += 1
    return out[:count]
