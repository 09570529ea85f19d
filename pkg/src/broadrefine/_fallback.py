"""Pure-Python (numpy) implementation of the compiled kernels."""

from __future__ import annotations

import numpy as np


def conjunctive_filter(rows, attr_codes, eq_cols, eq_vals, neg_cols, neg_vals,
                       num, rng_cols, lo, hi, tag_bits, req):
    mask = np.ones(len(rows), dtype=bool)
    if len(eq_cols) or len(neg_cols):
        codes = attr_codes[rows]
        for c, v in zip(eq_cols, eq_vals):
            mask &= codes[:, c] == v
        for c, v in zip(neg_cols, neg_vals):
            mask &= codes[:, c] != v
    if len(rng_cols):
        vals = num[rows]
        for c, a, b in zip(rng_cols, lo, hi):
            col = vals[:, c]
            mask &= (col >= a) & (col <= b)
    if np.any(req):
        mask &= np.all((tag_bits[rows] & req) == req, axis=1)
    return np.asarray(rows, dtype=np.int64)[mask]
