"""Independent reference implementations used as test oracles.

These are written from the definitions directly and deliberately share no
code with the package beyond the data types.
"""

import numpy as np

from broadrefine.catalog import text_tokens
from broadrefine.querylang import Constraint, ParsedQuery


def satisfies(item, c):
    if c.kind == "attr":
        return item.attributes.get(c.key) == c.value
    if c.kind == "neg":
        return item.attributes.get(c.key) != c.value
    if c.kind == "range":
        x = item.numeric.get(c.key)
        return x is not None and c.value[0] <= x <= c.value[1]
    return c.value in item.tags


def linear_scan(catalog, rewrite, limit, offset=0):
    """Brute-force search: predicate over every item, rank by (matched count desc, id asc)."""
    hits = []
    for item in catalog.items:
        if item.category != rewrite.core:
            continue
        matched = sum(satisfies(item, c) for c in rewrite.constraints)
        if matched == len(rewrite.constraints):
            hits.append((-matched, item.id))
    hits.sort()
    ids = [i for _, i in hits]
    return ids[offset:offset + limit], len(ids)


def truly_relevant(q, item, region="any", blocked=()):
    if item.category != q.core:
        return False
    words = set(item.tags) | set(text_tokens(item.review_text)) | set(text_tokens(item.ocr_text))
    for c in q.constraints:
        if c.kind == "soft":
            if c.value not in words:
                return False
        elif not satisfies(item, c):
            return False
    if region != "any" and item.region not in (region, "nationwide"):
        return False
    return not any(item.attributes.get(k) == v for k, v in blocked)


def random_rewrites(catalog, count, seed):
    """Rewrites built from real item values plus occasional unseen values."""
    rng = np.random.default_rng(seed)
    schema = catalog.schema
    out = []
    for _ in range(count):
        item = catalog.items[int(rng.integers(len(catalog)))]
        cs = []
        cat_schema = schema.categories[item.category]
        for key in sorted(item.attributes):
            r = rng.random()
            vocab = cat_schema.attributes[key]
            if r < 0.25:
                cs.append(Constraint.attr(key, item.attributes[key] if rng.random() < 0.8
                                          else vocab[int(rng.integers(len(vocab)))]))
            elif r < 0.35:
                cs.append(Constraint.neg(key, vocab[int(rng.integers(len(vocab)))]))
        if rng.random() < 0.4:
            p = item.numeric["price"]
            cs.append(Constraint.range("price", round(p * rng.uniform(0.3, 1.0)), round(p * rng.uniform(1.0, 2.0))))
        if rng.random() < 0.15:
            cs.append(Constraint.range("sales", 0, float(rng.integers(0, 5000))))
        for _ in range(int(rng.integers(0, 3))):
            tags = cat_schema.tags
            cs.append(Constraint.soft(tags[int(rng.integers(len(tags)))]))
        if rng.random() < 0.03:
            cs.append(Constraint.attr("material", "unobtainium"))
        if rng.random() < 0.03:
            cs.append(Constraint.soft("nonexistent-tag"))
        core = item.category if rng.random() > 0.02 else "spaceship"
        out.append(ParsedQuery(core, tuple(cs)))
    return out


def set_union_pool(lists):
    """(pre-dedup length, dedup order, provenance) by plain set logic."""
    seen, order, prov = set(), [], {}
    total = 0
    for i, ids in enumerate(lists):
        for x in ids:
            total += 1
            if x not in seen:
                seen.add(x)
                order.append(x)
                prov[x] = i
    return total, order, prov


def calibration_pairs(catalog, n_queries=1000, per_query=20, seed=0):
    """Balanced (query, item, truth) triples: half relevant, half not, per query."""
    rng = np.random.default_rng(seed)
    by_cat = catalog.by_category()
    out = []
    while len(out) < n_queries * per_query:
        anchor = catalog.items[int(rng.integers(len(catalog)))]
        key = sorted(anchor.attributes)[int(rng.integers(len(anchor.attributes)))]
        q = ParsedQuery(anchor.category, (Constraint.attr(key, anchor.attributes[key]),))
        pool = by_cat[anchor.category]
        pos, neg = [], []
        for k in rng.permutation(len(pool)):
            it = pool[int(k)]
            (pos if truly_relevant(q, it) else neg).append(it)
            if len(pos) >= per_query // 2 and len(neg) >= per_query // 2:
                break
        pos, neg = pos[:per_query // 2], neg[:per_query // 2]
        if len(pos) + len(neg) < per_query:
            continue
        out.extend((q, it, True) for it in pos)
        out.extend((q, it, False) for it in neg)
    return out
