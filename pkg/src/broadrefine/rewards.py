"""Set-level relevance metrics for a rewrite set.

Per rewrite ``i`` with returned items ``I_i`` and relevant subset ``I+_i``:

* relevance ratio ``P_rel = |I+_i| / |I_i|``
* independent contribution ``P_ic = |excl_i| / |I+_i|`` where ``excl_i`` are
  the relevant items no other rewrite returned
* hybrid relevance: mean over rewrites of the harmonic mean of the two

Over the pooled results: global relevance ``|I_r| / |I_b|`` (deduplicated
pool) and effective relevance ``|I_r| / |I'_b|`` (pre-deduplication count),
which charges redundant rewrites for the result slots they occupy.

Every ratio with an empty denominator is defined as 0.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Sequence

if TYPE_CHECKING:
    from .serving import CandidatePool

__all__ = [
    "REWARD_MODES",
    "PerRewriteOutcome",
    "RewardReport",
    "relevance_ratio",
    "independent_contribution",
    "exclusive_relevant",
    "harmonic",
    "hybrid_reward",
    "global_reward",
    "effective_reward",
    "low_result_rate",
    "outcomes_from",
    "reward_report",
]

REWARD_MODES = ("hybrid", "global", "effective")


@dataclass(frozen=True)
class PerRewriteOutcome:
    index: int
    returned: tuple[int, ...]
    relevant: frozenset[int]
    exclusive_relevant: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        object.__setattr__(self, "returned", tuple(self.returned))
        object.__setattr__(self, "relevant", frozenset(self.relevant))
        object.__setattr__(self, "exclusive_relevant", frozenset(self.exclusive_relevant))
        if not self.relevant <= set(self.returned):
            raise ValueError("relevant items must be a subset of returned items")
        if not self.exclusive_relevant <= self.relevant:
            raise ValueError("exclusive items must be a subset of relevant items")


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def relevance_ratio(outcome: PerRewriteOutcome) -> float:
    return _ratio(len(outcome.relevant), len(outcome.returned))


def exclusive_relevant(outcomes: Sequence[PerRewriteOutcome]) -> list[frozenset[int]]:
    """Relevant items of each rewrite that no other rewrite returned."""
    # Multiplicity of each item across rewrites (distinct per rewrite).
    seen_by = Counter()
    for o in outcomes:
        seen_by.update(set(o.returned))
    return [frozenset(x for x in o.relevant if seen_by[x] == 1) for o in outcomes]


def independent_contribution(outcomes: Sequence[PerRewriteOutcome]) -> list[float]:
    return [_ratio(len(ex), len(o.relevant))
            for o, ex in zip(outcomes, exclusive_relevant(outcomes))]


def harmonic(a: float, b: float) -> float:
    return 2.0 * a * b / (a + b) if a + b > 0 else 0.0


def hybrid_reward(outcomes: Sequence[PerRewriteOutcome]) -> float:
    if not outcomes:
        raise ValueError("hybrid reward needs at least one rewrite")
    p_ic = independent_contribution(outcomes)
    return sum(harmonic(relevance_ratio(o), c) for o, c in zip(outcomes, p_ic)) / len(outcomes)


def global_reward(pool: "CandidatePool") -> float:
    return _ratio(len(pool.refined), len(pool.dedup))


def effective_reward(pool: "CandidatePool") -> float:
    return _ratio(len(pool.refined), len(pool.pre_dedup))


def low_result_rate(counts: Sequence[int], threshold: int = 10) -> float:
    """Fraction of sessions whose refined result count is below ``threshold``."""
    if threshold < 1:
        raise ValueError("threshold must be >= 1")
    if not counts:
        return 0.0
    return sum(1 for c in counts if c < threshold) / len(counts)


@dataclass(frozen=True)
class RewardReport:
    p_rel: tuple[float, ...]
    p_ic: tuple[float, ...]
    hr: tuple[float, ...]
    hybrid: float
    global_: float
    effective: float
    n_pre_dedup: int
    n_dedup: int
    n_refined: int

    def value(self, mode: str) -> float:
        if mode == "hybrid":
            return self.hybrid
        if mode == "global":
            return self.global_
        if mode == "effective":
            return self.effective
        raise ValueError(f"unknown reward mode {mode!r}; expected one of {REWARD_MODES}")

    def to_dict(self) -> dict:
        return {
            "p_rel": list(self.p_rel),
            "p_ic": list(self.p_ic),
            "hr": list(self.hr),
            "hybrid": self.hybrid,
            "global": self.global_,
            "effective": self.effective,
            "n_pre_dedup": self.n_pre_dedup,
            "n_dedup": self.n_dedup,
            "n_refined": self.n_refined,
        }


def outcomes_from(returned: Sequence[Iterable[int]], relevant_ids: set[int] | frozenset[int]
                  ) -> list[PerRewriteOutcome]:
    """Build per-rewrite outcomes from result lists and item-level relevance."""
    base = [PerRewriteOutcome(i, tuple(r), frozenset(x for x in r if x in relevant_ids))
            for i, r in enumerate(returned)]
    return [PerRewriteOutcome(o.index, o.returned, o.relevant, ex)
            for o, ex in zip(base, exclusive_relevant(base))]


def reward_report(outcomes: Sequence[PerRewriteOutcome], pool: "CandidatePool") -> RewardReport:
    p_rel = tuple(relevance_ratio(o) for o in outcomes)
    p_ic = tuple(independent_contribution(outcomes))
    hr = tuple(harmonic(a, b) for a, b in zip(p_rel, p_ic))
    return RewardReport(
        p_rel=p_rel,
        p_ic=p_ic,
        hr=hr,
        hybrid=sum(hr) / len(hr) if hr else 0.0,
        global_=global_reward(pool),
        effective=effective_reward(pool),
        n_pre_dedup=len(pool.pre_dedup),
        n_dedup=len(pool.dedup),
        n_refined=len(pool.refined),
    )
