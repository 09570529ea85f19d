import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from broadrefine import kernels
from broadrefine.catalog import Catalog, DataError
from broadrefine.engine import SearchEngine, SearchRequest, build_index
from broadrefine.querylang import Constraint, ParsedQuery, parse

from conftest import make_item
from oracles import linear_scan, random_rewrites


def test_three_blazers():
    cat = Catalog([make_item(7), make_item(3), make_item(5), make_item(9, category="dress")])
    res = SearchEngine(cat).search(SearchRequest(parse("cat:blazer"), 20))
    assert res.item_ids == (3, 5, 7) and res.total_matches == 3


def test_full_negation_exclusion():
    cat = Catalog([make_item(i, attributes={"color": "black"}) for i in range(4)])
    res = SearchEngine(cat).search(SearchRequest(parse("cat:blazer | neg:color=black")))
    assert res.item_ids == () and res.total_matches == 0


def test_offset_past_end(tiny_catalog):
    eng = SearchEngine(tiny_catalog)
    res = eng.search(SearchRequest(parse("cat:blazer"), 20, 10))
    assert res.item_ids == () and res.total_matches == 4


def test_unknown_category_and_values(tiny_catalog):
    eng = SearchEngine(tiny_catalog)
    assert eng.search(SearchRequest(parse("cat:spaceship"))).total_matches == 0
    assert eng.count_matches(parse("cat:blazer | attr:material=gold")) == 0
    assert eng.count_matches(parse("cat:blazer | soft:unknown")) == 0
    assert eng.count_matches(parse("cat:blazer | neg:material=gold")) == 4
    assert eng.count_matches(parse("cat:blazer | range:weight=1..2")) == 0


def test_soft_uses_tags_only(tiny_catalog):
    eng = SearchEngine(tiny_catalog)
    # item 3 mentions the descriptor only in OCR text
    res = eng.search(SearchRequest(parse("cat:blazer | soft:beach-wedding")))
    assert res.item_ids == (1, 5)


def test_request_validation():
    with pytest.raises(ValueError):
        SearchRequest(parse("cat:x"), 0)
    with pytest.raises(ValueError):
        SearchRequest(parse("cat:x"), 5, -1)


def test_index_invariants(ref_catalog):
    idx = build_index(ref_catalog)
    assert sum(len(p) for p in idx.category_postings.values()) == len(ref_catalog) == 10_000
    for postings in (idx.category_postings, idx.attribute_postings, idx.tag_postings):
        for p in postings.values():
            ids = idx.postings_ids(p)
            assert np.all(np.diff(ids) > 0)


def test_empty_index():
    idx = build_index(Catalog([]))
    assert idx.category_postings == {} and idx.ids.size == 0
    assert SearchEngine(Catalog([])).count_matches(parse("cat:x")) == 0


def test_duplicate_ids():
    class Fake:
        items = (make_item(1), make_item(1))
    with pytest.raises(DataError):
        build_index(Fake())


@pytest.mark.parametrize("backend", sorted(kernels.BACKENDS))
def test_oracle_equivalence_per_backend(ref_catalog, backend):
    eng = SearchEngine(ref_catalog, backend=backend)
    for r in random_rewrites(ref_catalog, 150, seed=backend == "python"):
        for limit, offset in ((20, 0), (7, 3)):
            res = eng.search(SearchRequest(r, limit, offset))
            ids, total = linear_scan(ref_catalog, r, limit, offset)
            assert list(res.item_ids) == ids and res.total_matches == total


def test_backends_agree(ref_catalog):
    engines = {b: SearchEngine(ref_catalog, backend=b) for b in kernels.BACKENDS}
    for r in random_rewrites(ref_catalog, 200, seed=99):
        results = {b: e.search(SearchRequest(r, 50)) for b, e in engines.items()}
        assert len(set(results.values())) == 1


def test_unknown_backend(ref_catalog):
    with pytest.raises(ValueError):
        kernels.get_backend("fortran")


def test_monotone_restriction(ref_catalog, ref_engine):
    extra = [Constraint.attr("color", "black"), Constraint.soft("quiet"), Constraint.range("price", 0, 300),
             Constraint.neg("material", "wool")]
    for r in random_rewrites(ref_catalog, 100, seed=4):
        base = ref_engine.count_matches(r)
        for c in extra:
            assert ref_engine.count_matches(ParsedQuery(r.core, r.constraints + (c,))) <= base


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 30))
def test_pagination_consistency(ref_catalog, ref_engine, seed, k):
    r = random_rewrites(ref_catalog, 1, seed)[0]
    total = ref_engine.count_matches(r)
    pages = []
    for p in range(-(-total // k)):
        pages.extend(ref_engine.search(SearchRequest(r, k, p * k)).item_ids)
    assert pages == linear_scan(ref_catalog, r, total + 1)[0]
    assert len(set(pages)) == len(pages)
