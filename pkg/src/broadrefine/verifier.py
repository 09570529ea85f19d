"""Relevance verification against the original query and user context.

The oracle judges the full constraint semantics of the query. Unlike the
engine, it accepts soft descriptors found in an item's review or OCR text,
and it applies region and personal exclusions. The noisy mode wraps the
oracle with seeded, per-pair label flips calibrated to a target precision
and recall.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

from .catalog import Item
from .querylang import ATTR, NEG, RANGE, ParsedQuery, serialize

logger = logging.getLogger(__name__)

__all__ = [
    "ANY_REGION",
    "NATIONWIDE",
    "UserContext",
    "Judgment",
    "VerifierConfig",
    "NEUTRAL_USER",
    "oracle_judgment",
    "verify",
    "batch_verify",
    "partition",
    "false_positive_rate",
    "judgments_to_jsonl",
    "InFlightMonitor",
]

ANY_REGION = "any"
NATIONWIDE = "nationwide"

RELEVANT = "relevant"
IRRELEVANT = "irrelevant"


@dataclass(frozen=True)
class UserContext:
    region: str = ANY_REGION
    blocked_values: frozenset[tuple[str, str]] = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        if not self.region:
            raise ValueError("user region must be a non-empty token")
        object.__setattr__(self, "blocked_values",
                           frozenset((str(k), str(v)) for k, v in self.blocked_values))

    def to_dict(self) -> dict:
        return {"region": self.region, "blocked_values": sorted(map(list, self.blocked_values))}

    @classmethod
    def from_dict(cls, d: dict) -> "UserContext":
        return cls(d.get("region", ANY_REGION), frozenset(tuple(p) for p in d.get("blocked_values", ())))


NEUTRAL_USER = UserContext()


@dataclass(frozen=True)
class Judgment:
    item_id: int
    label: str
    rationale: str

    @property
    def relevant(self) -> bool:
        return self.label == RELEVANT

    def to_dict(self) -> dict:
        return {"item_id": self.item_id, "label": self.label, "rationale": self.rationale}


@dataclass(frozen=True)
class VerifierConfig:
    """``base_rate`` is the fraction of truly relevant pairs the noisy mode
    is calibrated against; it converts the precision target into a
    false-positive flip probability."""

    mode: str = "oracle"
    precision: float = 0.87
    recall: float = 0.84
    seed: int = 0
    base_rate: float = 0.5

    def __post_init__(self) -> None:
        if self.mode not in ("oracle", "noisy"):
            raise ValueError(f"unknown verifier mode {self.mode!r}")
        if not (0.0 < self.precision <= 1.0 and 0.0 < self.recall <= 1.0):
            raise ValueError("precision and recall must lie in (0, 1]")
        if not 0.0 < self.base_rate < 1.0:
            raise ValueError("base_rate must lie in (0, 1)")

    def to_dict(self) -> dict:
        return {"mode": self.mode, "precision": self.precision, "recall": self.recall,
                "seed": self.seed, "base_rate": self.base_rate}


ORACLE = VerifierConfig()


def false_positive_rate(precision: float, recall: float, base_rate: float) -> float:
    """Flip probability for true negatives that yields ``precision`` in expectation.

    Solves ``P = R*pi / (R*pi + f*(1 - pi))`` for ``f``; clipped to 1.
    """
    f = recall * base_rate * (1.0 - precision) / (precision * (1.0 - base_rate))
    return min(1.0, f)


def oracle_judgment(q: ParsedQuery, item: Item, u: UserContext = NEUTRAL_USER) -> Judgment:
    """Exact judgment; the rationale names the first violated constraint."""

    def no(reason: str) -> Judgment:
        return Judgment(item.id, IRRELEVANT, reason)

    if item.category != q.core:
        return no(f"violates cat:{q.core}")
    for c in q.constraints:
        if c.kind == ATTR:
            ok = item.attributes.get(c.key) == c.value
        elif c.kind == RANGE:
            x = item.numeric.get(c.key)
            ok = x is not None and c.value[0] <= x <= c.value[1]
        elif c.kind == NEG:
            ok = item.attributes.get(c.key) != c.value
        else:
            ok = c.value in item.descriptor_tokens
        if not ok:
            return no(f"violates {c}")
    if u.region != ANY_REGION and item.region not in (u.region, NATIONWIDE):
        return no(f"region {item.region} not served in {u.region}")
    for key, value in sorted(u.blocked_values):
        if item.attributes.get(key) == value:
            return no(f"user excludes {key}={value}")
    return Judgment(item.id, RELEVANT, "all constraints satisfied")


def _pair_uniform(seed: int, q: ParsedQuery, item_id: int) -> float:
    h = hashlib.blake2b(f"{seed}\x1f{serialize(q)}\x1f{item_id}".encode(), digest_size=8)
    return int.from_bytes(h.digest(), "big") / 2.0**64


def verify(q: ParsedQuery, item: Item, u: UserContext = NEUTRAL_USER,
           cfg: VerifierConfig = ORACLE) -> Judgment:
    truth = oracle_judgment(q, item, u)
    if cfg.mode == "oracle" or (cfg.precision == 1.0 and cfg.recall == 1.0):
        return truth
    x = _pair_uniform(cfg.seed, q, item.id)
    if truth.relevant:
        if x < 1.0 - cfg.recall:
            return Judgment(item.id, IRRELEVANT, "rejected: evidence judged insufficient")
        return truth
    if x < false_positive_rate(cfg.precision, cfg.recall, cfg.base_rate):
        return Judgment(item.id, RELEVANT, f"accepted despite: {truth.rationale}")
    return truth


def partition(n: int, batch_size: int) -> list[range]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    return [range(i, min(i + batch_size, n)) for i in range(0, n, batch_size)]


class InFlightMonitor:
    """Counts concurrent evaluations; ``peak`` is the high-water mark."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.current = 0
        self.peak = 0

    def __enter__(self) -> "InFlightMonitor":
        with self._lock:
            self.current += 1
            self.peak = max(self.peak, self.current)
        return self

    def __exit__(self, *exc) -> None:
        with self._lock:
            self.current -= 1


def batch_verify(q: ParsedQuery, items: Sequence[Item], u: UserContext = NEUTRAL_USER,
                 cfg: VerifierConfig = ORACLE, batch_size: int = 20, *,
                 workers: int = 1, monitor: InFlightMonitor | None = None,
                 on_batch: Callable[[int, int], None] | None = None,
                 judge: Callable[..., Judgment] = verify) -> list[Judgment]:
    """Judge ``items`` in consecutive batches of at most ``batch_size``.

    Each batch completes before the next starts. With ``workers > 1`` the
    items of one batch are judged concurrently. Output order always matches
    input order, and labels do not depend on the batching.

    ``on_batch(index, size)`` is invoked as each batch starts; ``monitor``
    tracks in-flight evaluations (both exist for instrumentation).
    """
    out: list[Judgment] = []
    batches = partition(len(items), batch_size)
    mon = monitor if monitor is not None else InFlightMonitor()

    def one(it: Item) -> Judgment:
        with mon:
            return judge(q, it, u, cfg)

    pool = ThreadPoolExecutor(max_workers=min(workers, batch_size)) if workers > 1 else None
    try:
        for b, rng in enumerate(batches):
            if on_batch is not None:
                on_batch(b, len(rng))
            chunk = [items[i] for i in rng]
            if pool is None:
                out.extend(one(it) for it in chunk)
            else:
                out.extend(pool.map(one, chunk))
    finally:
        if pool is not None:
            pool.shutdown(wait=True)
    return out


def judgments_to_jsonl(judgments: Iterable[Judgment]) -> str:
    return "".join(json.dumps(j.to_dict()) + "\n" for j in judgments)


