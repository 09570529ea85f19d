"""Query expansion: candidate enumeration and a learnable rewrite policy.

The policy is factorized: for rewrite slot ``s`` and the ``j``-th constraint
of the query (canonical order), the constraint is kept with probability
``sigmoid(theta[s, j] / temperature)``. Each keep/drop decision is one token
of the rollout, so per-token probabilities are available in closed form.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Sequence

import numpy as np

from .querylang import ParsedQuery, RewriteSpec, serialize

__all__ = [
    "DEFAULT_N_REWRITES",
    "DEFAULT_CAP",
    "DEFAULT_TEMPERATURE",
    "RewriteSet",
    "PolicyParams",
    "TokenRecord",
    "enumerate_candidates",
    "expand_enumerative",
    "expand_identity",
    "policy_sample",
    "policy_log_prob",
    "log_sigmoid",
    "sigmoid",
]

DEFAULT_N_REWRITES = 4
DEFAULT_CAP = 4096
DEFAULT_TEMPERATURE = 0.99


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


def log_sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    return -np.logaddexp(0.0, -z)


@dataclass(frozen=True)
class RewriteSet:
    rewrites: tuple[RewriteSpec, ...]
    log_probs: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if not self.rewrites:
            raise ValueError("a rewrite set holds at least one rewrite")
        cores = {r.core for r in self.rewrites}
        if len(cores) != 1:
            raise ValueError(f"rewrites must share one core, got {sorted(cores)}")
        if not self.log_probs:
            object.__setattr__(self, "log_probs", (0.0,) * len(self.rewrites))
        elif len(self.log_probs) != len(self.rewrites):
            raise ValueError("one log-prob per rewrite")

    def __len__(self) -> int:
        return len(self.rewrites)

    def strings(self) -> list[str]:
        return [serialize(r) for r in self.rewrites]


def _ordered(subsets: list[ParsedQuery]) -> list[ParsedQuery]:
    keyed = {serialize(r): r for r in subsets}
    return [keyed[s] for s in sorted(keyed, key=lambda s: (-len(keyed[s].constraints), s))]


def enumerate_candidates(q: ParsedQuery, cap: int = DEFAULT_CAP, seed: int = 0) -> list[RewriteSpec]:
    """Rewrites over the power set of the query's constraints.

    All ``2**m`` subsets when that fits in ``cap``; otherwise a seeded sample
    of ``cap`` distinct subsets that always contains the full and the empty
    set. Ordered by subset size (descending), then canonical string.
    """
    if cap < 1:
        raise ValueError("cap must be >= 1")
    m = len(q.constraints)
    if 2**m <= cap:
        subsets = [q.subset(c) for k in range(m, -1, -1) for c in combinations(range(m), k)]
        return _ordered(subsets)
    rng = np.random.default_rng(seed)
    chosen = {tuple(range(m)), ()}
    while len(chosen) < cap:
        mask = rng.random(m) < 0.5
        chosen.add(tuple(np.flatnonzero(mask).tolist()))
    # A cap of 1 cannot hold both extremes; keep the identity rewrite.
    if cap == 1:
        chosen = {tuple(range(m))}
    return _ordered([q.subset(c) for c in chosen])


def expand_enumerative(q: ParsedQuery, n: int = DEFAULT_N_REWRITES, cap: int = DEFAULT_CAP) -> RewriteSet:
    if n < 1:
        raise ValueError("n must be >= 1")
    return RewriteSet(tuple(enumerate_candidates(q, cap)[:n]))


def expand_identity(q: ParsedQuery) -> RewriteSet:
    return RewriteSet((q,))


@dataclass
class PolicyParams:
    """Keep-logits ``theta`` of shape (slots, max constraints) and a frozen reference copy."""

    logits: np.ndarray
    temperature: float = DEFAULT_TEMPERATURE
    ref_logits: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.logits = np.array(self.logits, dtype=np.float64, ndmin=2)
        if self.logits.ndim != 2:
            raise ValueError("logits must be a 2-D matrix")
        if not np.all(np.isfinite(self.logits)):
            raise FloatingPointError("policy logits contain non-finite entries")
        if not (self.temperature > 0 and math.isfinite(self.temperature)):
            raise ValueError("temperature must be a positive real")
        if self.ref_logits is None:
            self.ref_logits = self.logits.copy()
        else:
            self.ref_logits = np.array(self.ref_logits, dtype=np.float64, ndmin=2)
            if self.ref_logits.shape != self.logits.shape:
                raise ValueError("reference logits must match the policy shape")

    @classmethod
    def zeros(cls, n_slots: int = DEFAULT_N_REWRITES, m_constraints: int = 8,
              temperature: float = DEFAULT_TEMPERATURE) -> "PolicyParams":
        return cls(np.zeros((n_slots, m_constraints)), temperature)

    @property
    def n_slots(self) -> int:
        return self.logits.shape[0]

    @property
    def m_constraints(self) -> int:
        return self.logits.shape[1]

    def with_logits(self, logits: np.ndarray) -> "PolicyParams":
        return PolicyParams(np.array(logits, dtype=np.float64), self.temperature, self.ref_logits)

    def reference(self) -> "PolicyParams":
        return PolicyParams(self.ref_logits.copy(), self.temperature, self.ref_logits)

    def to_dict(self) -> dict:
        return {
            "shape": list(self.logits.shape),
            "temperature": self.temperature,
            "logits": self.logits.tolist(),
            "ref_logits": self.ref_logits.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyParams":
        logits = np.asarray(d["logits"], dtype=np.float64).reshape(d["shape"])
        ref = np.asarray(d.get("ref_logits", logits), dtype=np.float64).reshape(d["shape"])
        return cls(logits, float(d["temperature"]), ref)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "PolicyParams":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class TokenRecord:
    """Keep/drop decisions of one rollout, shape (slots, |A|), and their log-probs."""

    decisions: np.ndarray
    token_log_probs: np.ndarray
    log_prob: float
    query: ParsedQuery | None = field(default=None, compare=False)

    @property
    def n_tokens(self) -> int:
        return int(self.decisions.size)


def _check_fit(params: PolicyParams, m: int) -> None:
    if m > params.m_constraints:
        raise ValueError(f"query has {m} constraints but the policy covers {params.m_constraints}")


def _token_log_probs(params: PolicyParams, decisions: np.ndarray) -> np.ndarray:
    n, m = decisions.shape
    z = params.logits[:n, :m] / params.temperature
    return np.where(decisions == 1, log_sigmoid(z), log_sigmoid(-z))


def policy_sample(params: PolicyParams, q: ParsedQuery, seed: int) -> tuple[RewriteSet, TokenRecord]:
    """Sample one rewrite per slot by independent keep/drop decisions."""
    if not np.all(np.isfinite(params.logits)):
        raise FloatingPointError("policy logits contain non-finite entries")
    m = len(q.constraints)
    _check_fit(params, m)
    n = params.n_slots
    z = params.logits[:, :m] / params.temperature
    u = np.random.default_rng(seed).random((n, m))
    decisions = (u < sigmoid(z)).astype(np.int8)
    tok = _token_log_probs(params, decisions)
    per_slot = tok.sum(axis=1)
    rewrites = tuple(q.subset(np.flatnonzero(decisions[s]).tolist()) for s in range(n))
    record = TokenRecord(decisions, tok, float(tok.sum()), q)
    return RewriteSet(rewrites, tuple(float(x) for x in per_slot)), record


def policy_log_prob(params: PolicyParams, record: TokenRecord) -> tuple[float, np.ndarray]:
    """Sequence and per-token log-probs of a recorded rollout under ``params``."""
    n, m = record.decisions.shape
    if n != params.n_slots:
        raise ValueError(f"record has {n} slots, policy has {params.n_slots}")
    _check_fit(params, m)
    tok = _token_log_probs(params, record.decisions)
    return float(tok.sum()), tok


def decisions_outcomes(n_slots: int, m: int) -> Sequence[np.ndarray]:
    """All binary decision matrices of shape (n_slots, m); for exhaustive checks."""
    total = n_slots * m
    return [np.array([(k >> b) & 1 for b in range(total)], dtype=np.int8).reshape(n_slots, m)
            for k in range(2**total)]
