"""Simulated black-box product search engine.

Matching is strictly conjunctive: an item is returned only when it
satisfies the category and every constraint of the rewrite, with soft
descriptors looked up in structured tags alone. Results are truncated to a
per-request cap, which is what makes over-specified queries come back empty
and redundant rewrites crowd each other out.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import kernels
from .catalog import Catalog, DataError, Item
from .querylang import ATTR, NEG, RANGE, SOFT, ParsedQuery, RewriteSpec

logger = logging.getLogger(__name__)

__all__ = ["DEFAULT_LIMIT", "Index", "SearchRequest", "SearchResult", "SearchEngine",
           "build_index", "item_matches"]

DEFAULT_LIMIT = 20

_EMPTY = np.empty(0, dtype=np.int64)


@dataclass(frozen=True)
class SearchRequest:
    rewrite: RewriteSpec
    limit: int = DEFAULT_LIMIT
    offset: int = 0

    def __post_init__(self) -> None:
        if self.limit < 1:
            raise ValueError(f"limit must be >= 1, got {self.limit}")
        if self.offset < 0:
            raise ValueError(f"offset must be >= 0, got {self.offset}")


@dataclass(frozen=True)
class SearchResult:
    item_ids: tuple[int, ...]
    total_matches: int


@dataclass(frozen=True)
class Index:
    """Postings plus the dense encoded columns the match kernel scans.

    Rows are items in ascending id order, so row order is id order and
    every posting (stored as row numbers) is sorted.
    """

    ids: np.ndarray                      # row -> item id
    category_postings: dict[str, np.ndarray]
    attribute_postings: dict[tuple[str, str], np.ndarray]
    tag_postings: dict[str, np.ndarray]
    numeric_columns: dict[str, np.ndarray]
    attr_keys: dict[str, int]
    attr_values: dict[str, dict[str, int]]
    attr_codes: np.ndarray               # int32 [rows, keys], -1 when absent
    tag_bit: dict[str, int]
    tag_bits: np.ndarray                 # uint64 [rows, words]
    numeric_keys: dict[str, int]
    numeric: np.ndarray                  # float64 [rows, keys], NaN when absent

    def postings_ids(self, postings: np.ndarray) -> np.ndarray:
        return self.ids[postings]


def build_index(catalog: Catalog) -> Index:
    items = catalog.items
    seen: set[int] = set()
    for it in items:
        if it.id in seen:
            raise DataError(f"duplicate item id {it.id}")
        seen.add(it.id)
    n = len(items)
    ids = np.fromiter((it.id for it in items), dtype=np.int64, count=n)

    attr_keys: dict[str, int] = {}
    attr_values: dict[str, dict[str, int]] = {}
    tag_bit: dict[str, int] = {}
    numeric_keys: dict[str, int] = {}
    for it in items:
        for k, v in it.attributes.items():
            attr_keys.setdefault(k, len(attr_keys))
            vals = attr_values.setdefault(k, {})
            vals.setdefault(v, len(vals))
        for t in it.tags:
            tag_bit.setdefault(t, len(tag_bit))
        for k in it.numeric:
            numeric_keys.setdefault(k, len(numeric_keys))

    n_words = max(1, (len(tag_bit) + 63) // 64)
    attr_codes = np.full((n, max(1, len(attr_keys))), -1, dtype=np.int32)
    tag_bits = np.zeros((n, n_words), dtype=np.uint64)
    numeric = np.full((n, max(1, len(numeric_keys))), np.nan, dtype=np.float64)
    cat_post: dict[str, list[int]] = {}
    attr_post: dict[tuple[str, str], list[int]] = {}
    tag_post: dict[str, list[int]] = {}
    for row, it in enumerate(items):
        cat_post.setdefault(it.category, []).append(row)
        for k, v in it.attributes.items():
            attr_codes[row, attr_keys[k]] = attr_values[k][v]
            attr_post.setdefault((k, v), []).append(row)
        for t in it.tags:
            b = tag_bit[t]
            tag_bits[row, b // 64] |= np.uint64(1) << np.uint64(b % 64)
            tag_post.setdefault(t, []).append(row)
        for k, x in it.numeric.items():
            numeric[row, numeric_keys[k]] = x

    as_arr = lambda d: {k: np.asarray(v, dtype=np.int64) for k, v in d.items()}  # noqa: E731
    return Index(
        ids=ids,
        category_postings=as_arr(cat_post),
        attribute_postings=as_arr(attr_post),
        tag_postings=as_arr(tag_post),
        numeric_columns={k: numeric[:, j].copy() for k, j in numeric_keys.items()},
        attr_keys=attr_keys,
        attr_values=attr_values,
        attr_codes=attr_codes,
        tag_bit=tag_bit,
        tag_bits=tag_bits,
        numeric_keys=numeric_keys,
        numeric=numeric,
    )


def item_matches(item: Item, rewrite: ParsedQuery) -> bool:
    """Reference predicate for one item (tags only for soft descriptors)."""
    if item.category != rewrite.core:
        return False
    for c in rewrite.constraints:
        if c.kind == ATTR:
            if item.attributes.get(c.key) != c.value:
                return False
        elif c.kind == RANGE:
            x = item.numeric.get(c.key)
            if x is None or not (c.value[0] <= x <= c.value[1]):
                return False
        elif c.kind == NEG:
            if item.attributes.get(c.key) == c.value:
                return False
        elif c.kind == SOFT:
            if c.value not in item.tags:
                return False
    return True


class SearchEngine:
    """Conjunctive search over an immutable index.

    Matched items are ranked by the number of satisfied constraints
    (descending) and then by item id. Since matching is conjunctive every
    match satisfies all constraints, so the order reduces to ascending id.
    """

    def __init__(self, catalog: Catalog, backend: str | None = None, cache_size: int = 65536) -> None:
        self.index = build_index(catalog)
        self._filter = kernels.get_backend(backend).conjunctive_filter if backend else kernels.conjunctive_filter
        self._matches = lru_cache(maxsize=cache_size)(self._compute_matches)
        self.calls = 0

    def search(self, request: SearchRequest) -> SearchResult:
        self.calls += 1
        matched = self._matches(request.rewrite)
        page = matched[request.offset:request.offset + request.limit]
        return SearchResult(tuple(page.tolist()), int(matched.shape[0]))

    def count_matches(self, rewrite: ParsedQuery) -> int:
        return int(self._matches(rewrite).shape[0])

    def _compute_matches(self, rewrite: ParsedQuery) -> np.ndarray:
        idx = self.index
        cat_rows = idx.category_postings.get(rewrite.core)
        if cat_rows is None:
            return _EMPTY
        candidates = [cat_rows]
        eq_cols, eq_vals, neg_cols, neg_vals = [], [], [], []
        rng_cols, lo, hi = [], [], []
        req = np.zeros(idx.tag_bits.shape[1], dtype=np.uint64)
        for c in rewrite.constraints:
            if c.kind == ATTR:
                post = idx.attribute_postings.get((c.key, c.value))
                if post is None:
                    return _EMPTY
                candidates.append(post)
                eq_cols.append(idx.attr_keys[c.key])
                eq_vals.append(idx.attr_values[c.key][c.value])
            elif c.kind == NEG:
                code = idx.attr_values.get(c.key, {}).get(c.value)
                if code is not None:  # unseen value excludes nothing
                    neg_cols.append(idx.attr_keys[c.key])
                    neg_vals.append(code)
            elif c.kind == RANGE:
                col = idx.numeric_keys.get(c.key)
                if col is None:
                    return _EMPTY
                rng_cols.append(col)
                lo.append(c.value[0])
                hi.append(c.value[1])
            else:
                b = idx.tag_bit.get(c.value)
                if b is None:
                    return _EMPTY
                candidates.append(idx.tag_postings[c.value])
                req[b // 64] |= np.uint64(1) << np.uint64(b % 64)
        # Any posting is a superset of the result; scan the shortest one.
        rows = min(candidates, key=len)
        out = self._filter(
            rows, idx.attr_codes,
            np.asarray(eq_cols, dtype=np.int64), np.asarray(eq_vals, dtype=np.int32),
            np.asarray(neg_cols, dtype=np.int64), np.asarray(neg_vals, dtype=np.int32),
            idx.numeric, np.asarray(rng_cols, dtype=np.int64),
            np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64),
            idx.tag_bits, req,
        )
        # The category check is implicit when scanning a non-category posting.
        if rows is not cat_rows:
            out = out[np.isin(out, cat_rows, assume_unique=True)]
        ids = idx.ids[out]
        ids.setflags(write=False)
        return ids
