import json

import pytest

from broadrefine.catalog import Catalog
from broadrefine.engine import SearchEngine
from broadrefine.expander import enumerate_candidates
from broadrefine.posterior import (ScoredRewrite, SftRecord, build_sft_dataset, score_candidates,
                                   select_topk, write_sft_dataset)
from broadrefine.querylang import parse, serialize

from conftest import make_item
from oracles import linear_scan, truly_relevant


def brute_force_topk(q, catalog, k=4, limit=20):
    scored = []
    for r in enumerate_candidates(q):
        ids, _ = linear_scan(catalog, r, limit)
        s = sum(truly_relevant(q, catalog[x]) for x in ids) / len(ids) if ids else 0.0
        scored.append((-s, -len(ids), serialize(r), s))
    scored.sort()
    return [(t, s) for _, _, t, s in scored[:k]]


def test_zero_match_candidate_scores_zero(tiny_catalog):
    eng = SearchEngine(tiny_catalog)
    q = parse("cat:blazer | attr:material=gold")
    (sr,) = score_candidates(q, [q], eng, tiny_catalog)
    assert sr.score == 0.0 and sr.returned_count == 0


def test_core_only_forty_percent():
    items = [make_item(i, attributes={"color": "red" if i < 4 else "blue"}) for i in range(10)]
    cat = Catalog(items)
    q = parse("cat:blazer | attr:color=red")
    (sr,) = score_candidates(q, [parse("cat:blazer")], SearchEngine(cat), cat)
    assert sr.score == 0.4 and sr.returned_count == 10


def test_identity_scores_one_when_predicates_agree(tiny_catalog):
    q = parse("cat:blazer | attr:material=linen | soft:beach-wedding")
    (sr,) = score_candidates(q, [q], SearchEngine(tiny_catalog), tiny_catalog)
    assert sr.returned_count == 2 and sr.score == 1.0


def test_verification_uses_original_query(tiny_catalog):
    q = parse("cat:blazer | attr:material=linen | neg:color=black")
    relaxed = parse("cat:blazer | attr:material=linen")
    (sr,) = score_candidates(q, [relaxed], SearchEngine(tiny_catalog), tiny_catalog)
    assert sr.returned_count == 3 and sr.score == pytest.approx(2 / 3)


def test_empty_candidates(tiny_catalog):
    with pytest.raises(ValueError):
        score_candidates(parse("cat:blazer"), [], SearchEngine(tiny_catalog), tiny_catalog)


def _sr(text, s, n):
    return ScoredRewrite(parse(text), s, n)


def test_select_topk_tie_break():
    scored = [_sr("cat:a | soft:x", 0.9, 5), _sr("cat:a | soft:y", 0.4, 9), _sr("cat:a | soft:w", 0.9, 5)]
    top = select_topk(scored, 3)
    assert [s.text for s in top] == ["cat:a | soft:w", "cat:a | soft:x", "cat:a | soft:y"]
    more = [_sr("cat:a | soft:x", 0.9, 3), _sr("cat:a | soft:w", 0.9, 7)]
    assert [s.text for s in select_topk(more, 2)] == ["cat:a | soft:w", "cat:a | soft:x"]


def test_select_topk_all_zero_and_dedup():
    scored = [_sr(f"cat:a | soft:t{i}", 0.0, 0) for i in range(6)] + [_sr("cat:a | soft:t1", 0.0, 0)]
    top = select_topk(scored, 4)
    assert [s.text for s in top] == [f"cat:a | soft:t{i}" for i in range(4)]
    with pytest.raises(ValueError):
        select_topk(scored, 0)


def test_scored_invariant():
    with pytest.raises(ValueError):
        ScoredRewrite(parse("cat:a"), 0.5, 0)


def test_topk_matches_brute_force(ref_catalog, ref_engine, ref_queries):
    for q in ref_queries[:25]:
        top = select_topk(score_candidates(q, enumerate_candidates(q), ref_engine, ref_catalog), 4)
        assert [(s.text, s.score) for s in top] == brute_force_topk(q, ref_catalog)


def test_selected_dominate_rest(ref_catalog, ref_engine, ref_queries):
    for q in ref_queries[:25]:
        scored = score_candidates(q, enumerate_candidates(q), ref_engine, ref_catalog)
        top = select_topk(scored, 4)
        chosen = {s.text for s in top}
        worst = min(s.score for s in top)
        assert all(s.score <= worst for s in scored if s.text not in chosen)


def test_returned_count_monotone(ref_catalog, ref_engine, ref_queries):
    for q in ref_queries[:25]:
        scored = {s.text: s for s in score_candidates(q, enumerate_candidates(q), ref_engine, ref_catalog)}
        for s in scored.values():
            for j in range(len(s.rewrite.constraints)):
                smaller = s.rewrite.subset([i for i in range(len(s.rewrite.constraints)) if i != j])
                assert s.returned_count <= scored[serialize(smaller)].returned_count


def test_dropping_negation_can_cost_precision(ref_catalog, ref_engine, ref_queries):
    found = False
    for q in ref_queries:
        negs = [i for i, c in enumerate(q.constraints) if c.kind == "neg"]
        if not negs:
            continue
        keep = [i for i in range(len(q.constraints)) if i not in negs]
        (sr,) = score_candidates(q, [q.subset(keep)], ref_engine, ref_catalog)
        if 0 < sr.score < 1:
            found = True
            break
    assert found


def test_dataset_records_and_determinism(ref_catalog, ref_engine, ref_bench, tmp_path):
    bench = ref_bench[:15]
    a = build_sft_dataset(bench, ref_engine, ref_catalog)
    assert len(a) == len(bench)
    write_sft_dataset(a, tmp_path / "a.jsonl")
    write_sft_dataset(build_sft_dataset(bench, ref_engine, ref_catalog), tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    for line, rec in zip((tmp_path / "a.jsonl").read_text().splitlines(), bench):
        d = json.loads(line)
        assert set(d) == {"query", "rewrites", "scores", "target"}
        assert d["query"] == rec.query_text
        assert len(d["rewrites"]) == len(d["scores"]) == 4
        assert d["scores"] == sorted(d["scores"], reverse=True)
        assert d["target"] == " || ".join(d["rewrites"])


def test_dataset_empty():
    with pytest.raises(ValueError):
        build_sft_dataset([], None, None)


def test_record_target():
    r = SftRecord("cat:a | soft:x", ("cat:a | soft:x", "cat:a"), (1.0, 0.5))
    assert r.target == "cat:a | soft:x || cat:a"
