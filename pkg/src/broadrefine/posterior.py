"""Supervised rewrite data from observed search yield.

Every query is split into its category and constraint set; each candidate
rewrite over the power set of the constraints is sent to the engine and
scored by the fraction of its returned items the verifier accepts for the
ORIGINAL query. The best ``k`` rewrites become one JSONL training record.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .catalog import Catalog, DataError, QueryRecord
from .engine import DEFAULT_LIMIT, SearchEngine, SearchRequest
from .expander import DEFAULT_CAP, enumerate_candidates
from .querylang import ParsedQuery, RewriteSpec, parse, serialize
from .verifier import NEUTRAL_USER, UserContext, VerifierConfig, verify

logger = logging.getLogger(__name__)

__all__ = [
    "DEFAULT_TOP_K",
    "ScoredRewrite",
    "SftRecord",
    "score_candidates",
    "select_topk",
    "sft_record",
    "build_sft_dataset",
    "write_sft_dataset",
]

DEFAULT_TOP_K = 4
TARGET_SEPARATOR = " || "


@dataclass(frozen=True)
class ScoredRewrite:
    rewrite: RewriteSpec
    score: float
    returned_count: int

    def __post_init__(self) -> None:
        if self.returned_count == 0 and self.score != 0.0:
            raise ValueError("a rewrite that returns nothing scores 0")

    @property
    def text(self) -> str:
        return serialize(self.rewrite)


@dataclass(frozen=True)
class SftRecord:
    query: str
    rewrites: tuple[str, ...]
    scores: tuple[float, ...]

    @property
    def target(self) -> str:
        return TARGET_SEPARATOR.join(self.rewrites)

    def to_dict(self) -> dict:
        return {"query": self.query, "rewrites": list(self.rewrites), "scores": list(self.scores),
                "target": self.target}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def score_candidates(q: ParsedQuery, candidates: Sequence[RewriteSpec], engine: SearchEngine,
                     catalog: Catalog, vcfg: VerifierConfig | None = None,
                     u: UserContext = NEUTRAL_USER, limit: int = DEFAULT_LIMIT) -> list[ScoredRewrite]:
    """Relevant fraction of each candidate's first ``limit`` results, judged against ``q``."""
    if not candidates:
        raise ValueError("no candidates to score")
    vcfg = vcfg or VerifierConfig()
    labels: dict[int, bool] = {}
    out = []
    for r in candidates:
        ids = engine.search(SearchRequest(r, limit, 0)).item_ids
        for x in ids:
            if x not in labels:
                labels[x] = verify(q, catalog[x], u, vcfg).relevant
        hits = sum(labels[x] for x in ids)
        out.append(ScoredRewrite(r, hits / len(ids) if ids else 0.0, len(ids)))
    return out


def select_topk(scored: Iterable[ScoredRewrite], k: int = DEFAULT_TOP_K) -> list[ScoredRewrite]:
    """Best ``k`` by (score desc, returned count desc, canonical string asc), skipping equivalents."""
    if k < 1:
        raise ValueError("k must be >= 1")
    ranked = sorted(scored, key=lambda s: (-s.score, -s.returned_count, s.text))
    picked: list[ScoredRewrite] = []
    seen: set[str] = set()
    for s in ranked:
        if s.text in seen:
            continue
        seen.add(s.text)
        picked.append(s)
        if len(picked) == k:
            break
    return picked


def sft_record(q: ParsedQuery, engine: SearchEngine, catalog: Catalog, vcfg: VerifierConfig | None = None,
               u: UserContext = NEUTRAL_USER, k: int = DEFAULT_TOP_K, limit: int = DEFAULT_LIMIT,
               cap: int = DEFAULT_CAP) -> SftRecord:
    scored = score_candidates(q, enumerate_candidates(q, cap), engine, catalog, vcfg, u, limit)
    top = select_topk(scored, k)
    return SftRecord(serialize(q), tuple(s.text for s in top), tuple(s.score for s in top))


def build_sft_dataset(benchmark: Sequence[QueryRecord], engine: SearchEngine, catalog: Catalog,
                      vcfg: VerifierConfig | None = None, k: int = DEFAULT_TOP_K,
                      u: UserContext = NEUTRAL_USER, limit: int = DEFAULT_LIMIT) -> list[SftRecord]:
    """One record per benchmark query, in benchmark order."""
    if not benchmark:
        raise ValueError("benchmark is empty")
    out = []
    for idx, rec in enumerate(benchmark):
        try:
            q = parse(rec.query_text)
        except ValueError as exc:
            raise DataError(f"query {idx} (source item {rec.source_item}): {exc}") from exc
        out.append(sft_record(q, engine, catalog, vcfg, u, k, limit))
    return out


def write_sft_dataset(records: Sequence[SftRecord], path: str | Path) -> None:
    current = None
    try:
        with open(path, "w", encoding="utf-8") as fh:
            for r in records:
                current = r.query
                fh.write(r.to_json() + "\n")
    except OSError as exc:
        raise DataError(f"writing SFT data to {path} (query {current!r}): {exc}") from exc
