"""Online broaden-and-refine pipeline.

A session expands the query into a rewrite set, fetches the first page of
every rewrite from the engine and pools the results (first occurrence wins),
verifies the pooled items against the original query, reallocates the fetch
budget toward the rewrites that contributed verified items, and fetches
further pages while the display stays sparse.

The engine is used strictly through ``search(SearchRequest)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence, Union

from .catalog import Catalog
from .engine import DEFAULT_LIMIT, SearchRequest, SearchResult
from .expander import RewriteSet, expand_enumerative, expand_identity
from .querylang import ParsedQuery, serialize
from .rewards import RewardReport, low_result_rate, outcomes_from, reward_report
from .verifier import Judgment, UserContext, VerifierConfig, batch_verify

logger = logging.getLogger(__name__)

__all__ = [
    "SearchBackend",
    "CandidatePool",
    "PipelineConfig",
    "PageState",
    "PageResult",
    "SessionError",
    "broaden",
    "refine",
    "allocate_budget",
    "adaptive_page",
    "run_session",
    "lrr_from_reports",
]


class SearchBackend(Protocol):
    def search(self, request: SearchRequest) -> SearchResult: ...


Expander = Union[RewriteSet, Callable[[ParsedQuery], RewriteSet]]


class SessionError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException) -> None:
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class CandidatePool:
    """Pooled engine results.

    ``pre_dedup`` keeps every returned (item, rewrite index) pair,
    ``dedup`` the unique items in first-occurrence order and ``refined`` the
    verified-relevant subset of ``dedup`` in the same order.
    """

    pre_dedup: list[tuple[int, int]] = field(default_factory=list)
    dedup: list[int] = field(default_factory=list)
    refined: list[int] = field(default_factory=list)
    provenance: dict[int, int] = field(default_factory=dict)
    judgments: dict[int, Judgment] = field(default_factory=dict)

    def add(self, item_ids: Sequence[int], source: int) -> list[int]:
        """Append one rewrite's results; returns the newly seen items."""
        fresh = []
        for x in item_ids:
            self.pre_dedup.append((x, source))
            if x not in self.provenance:
                self.provenance[x] = source
                self.dedup.append(x)
                fresh.append(x)
        return fresh


@dataclass(frozen=True)
class PipelineConfig:
    n: int = 4
    limit: int = DEFAULT_LIMIT
    page_size: int = 20
    fill_ratio: float = 0.5
    max_refetch: int = 2
    alpha: float = 1.0
    reward_mode: str = "effective"
    verifier: VerifierConfig = field(default_factory=VerifierConfig)
    tau: int = 10
    batch_size: int = 20
    total_budget: int | None = None

    def __post_init__(self) -> None:
        if self.n < 1 or self.limit < 1 or self.page_size < 1 or self.batch_size < 1:
            raise ValueError("n, limit, page_size and batch_size must be positive")
        if self.page_size > self.n * self.limit:
            raise ValueError("page_size must not exceed n * limit")
        if not 0.0 < self.fill_ratio <= 1.0:
            raise ValueError("fill_ratio must lie in (0, 1]")
        if self.max_refetch < 0:
            raise ValueError("max_refetch must be >= 0")
        if self.tau < 1:
            raise ValueError("tau must be >= 1")

    @property
    def budget(self) -> int:
        return self.total_budget if self.total_budget is not None else self.n * self.limit

    def to_dict(self) -> dict:
        return {
            "n": self.n, "limit": self.limit, "page_size": self.page_size,
            "fill_ratio": self.fill_ratio, "max_refetch": self.max_refetch, "alpha": self.alpha,
            "reward_mode": self.reward_mode, "verifier": self.verifier.to_dict(), "tau": self.tau,
            "batch_size": self.batch_size, "total_budget": self.total_budget,
        }


def _resolve(expander: Expander, q: ParsedQuery) -> RewriteSet:
    return expander if isinstance(expander, RewriteSet) else expander(q)


@dataclass
class PageState:
    query: ParsedQuery
    rewrites: RewriteSet
    pool: CandidatePool
    page0: list[tuple[int, ...]]
    offsets: list[int]
    totals: list[int]
    quotas: list[int] = field(default_factory=list)
    page: int = 0
    refetch_count: int = 0

    def exhausted(self, i: int) -> bool:
        return self.offsets[i] >= self.totals[i]


def broaden(q: ParsedQuery, expander: Expander, engine: SearchBackend,
            cfg: PipelineConfig | None = None) -> PageState:
    """Fetch page 0 of every rewrite and pool the results."""
    cfg = cfg or PipelineConfig()
    rewrites = _resolve(expander, q)
    if len(rewrites) < 1:
        raise ValueError("expander produced no rewrites")
    pool = CandidatePool()
    page0, totals = [], []
    for i, r in enumerate(rewrites.rewrites):
        res = engine.search(SearchRequest(r, cfg.limit, 0))
        page0.append(res.item_ids)
        totals.append(res.total_matches)
        pool.add(res.item_ids, i)
    return PageState(q, rewrites, pool, page0, [cfg.limit] * len(rewrites), totals)


def refine(pool: CandidatePool, q: ParsedQuery, u: UserContext, vcfg: VerifierConfig,
           batch_size: int, catalog: Catalog) -> CandidatePool:
    """Verify pooled items not judged yet and rebuild ``refined``."""
    pending = [x for x in pool.dedup if x not in pool.judgments]
    if pending:
        for j in batch_verify(q, [catalog[x] for x in pending], u, vcfg, batch_size):
            pool.judgments[j.item_id] = j
    pool.refined = [x for x in pool.dedup if pool.judgments[x].relevant]
    return pool


def allocate_budget(contributions: Sequence[int], total_budget: int, alpha: float = 1.0) -> list[int]:
    """Split ``total_budget`` fetch slots across rewrites by smoothed contribution.

    Shares are ``budget * (c_i + alpha) / sum(c_j + alpha)``, apportioned by
    largest remainder so they sum exactly to the budget; every rewrite then
    keeps at least one slot.
    """
    n = len(contributions)
    if n == 0:
        return []
    if total_budget < n:
        raise ValueError(f"budget {total_budget} cannot give each of {n} rewrites a slot")
    weights = [c + alpha for c in contributions]
    s = sum(weights)
    exact = [total_budget * w / s for w in weights] if s > 0 else [total_budget / n] * n
    quotas = [math.floor(x) for x in exact]
    frac = [x - f for x, f in zip(exact, quotas)]
    for i in sorted(range(n), key=lambda i: (-frac[i], i))[: total_budget - sum(quotas)]:
        quotas[i] += 1
    # Floor of one slot: take it from the most over-served rewrite (largest
    # excess over its exact share). This keeps quotas monotone in c_i.
    for i in range(n):
        if quotas[i] == 0:
            donor = max((j for j in range(n) if quotas[j] > 1),
                        key=lambda j: (quotas[j] - exact[j], quotas[j], -j))
            quotas[donor] -= 1
            quotas[i] = 1
    return quotas


def _contributions(state: PageState) -> list[int]:
    c = [0] * len(state.rewrites)
    for x in state.pool.refined:
        c[state.pool.provenance[x]] += 1
    return c


def _displayed(state: PageState, cfg: PipelineConfig) -> list[int]:
    start = state.page * cfg.page_size
    return state.pool.refined[start:start + cfg.page_size]


@dataclass
class PageResult:
    displayed: list[int]
    judgments: list[Judgment]
    report: RewardReport
    refetch_count: int


def adaptive_page(q: ParsedQuery, u: UserContext, cfg: PipelineConfig, state: PageState,
                  engine: SearchBackend, catalog: Catalog) -> PageResult:
    """Fill the current page, fetching further engine pages while it stays sparse.

    Refetching stops once the page holds ``fill_ratio * page_size`` verified
    items, every rewrite is exhausted, or ``max_refetch`` rounds were spent.
    Each round fetches ``quotas[i]`` more results per rewrite; only newly
    pooled items are verified.
    """
    if not state.quotas:
        state.quotas = allocate_budget(_contributions(state), cfg.budget, cfg.alpha)
    rounds = 0
    threshold = cfg.fill_ratio * cfg.page_size
    while (len(_displayed(state, cfg)) < threshold
           and rounds < cfg.max_refetch
           and not all(state.exhausted(i) for i in range(len(state.rewrites)))):
        for i, r in enumerate(state.rewrites.rewrites):
            if state.exhausted(i):
                continue
            res = engine.search(SearchRequest(r, state.quotas[i], state.offsets[i]))
            state.offsets[i] += state.quotas[i]
            state.totals[i] = res.total_matches
            state.pool.add(res.item_ids, i)
        rounds += 1
        refine(state.pool, q, u, cfg.verifier, cfg.batch_size, catalog)
    state.refetch_count += rounds
    report = page0_report(state)
    return PageResult(_displayed(state, cfg), [state.pool.judgments[x] for x in state.pool.dedup],
                      report, rounds)


def page0_report(state: PageState) -> RewardReport:
    """Reward metrics of the first-page results of each rewrite."""
    pool0 = CandidatePool()
    for i, ids in enumerate(state.page0):
        pool0.add(ids, i)
    relevant = {x for x in pool0.dedup if state.pool.judgments[x].relevant}
    pool0.refined = [x for x in pool0.dedup if x in relevant]
    return reward_report(outcomes_from(state.page0, relevant), pool0)


def run_session(q: ParsedQuery, u: UserContext, cfg: PipelineConfig, engine: SearchBackend,
                catalog: Catalog, expander: Expander | None = None) -> dict:
    """One query end to end; returns the JSON-ready session report."""
    if expander is None:
        expander = (lambda x: expand_enumerative(x, cfg.n)) if cfg.n > 1 else expand_identity
    try:
        state = broaden(q, expander, engine, cfg)
    except Exception as exc:
        raise SessionError("broaden", exc) from exc
    try:
        refine(state.pool, q, u, cfg.verifier, cfg.batch_size, catalog)
    except Exception as exc:
        raise SessionError("refine", exc) from exc
    try:
        page = adaptive_page(q, u, cfg, state, engine, catalog)
    except Exception as exc:
        raise SessionError("paginate", exc) from exc
    n_refined = len(state.pool.refined)
    return {
        "query": serialize(q),
        "user": u.to_dict(),
        "rewrites": state.rewrites.strings(),
        "counts": {"pre_dedup": len(state.pool.pre_dedup), "dedup": len(state.pool.dedup),
                   "refined": n_refined},
        "reward": page.report.to_dict(),
        "quotas": list(state.quotas),
        "pages_fetched": 1 + page.refetch_count,
        "refetch_count": page.refetch_count,
        "displayed": page.displayed,
        "judgments": [j.to_dict() for j in page.judgments],
        "low_result": n_refined < cfg.tau,
        "zero_result": n_refined == 0,
    }


def lrr_from_reports(reports: Sequence[dict], tau: int) -> float:
    return low_result_rate([r["counts"]["refined"] for r in reports], tau)
