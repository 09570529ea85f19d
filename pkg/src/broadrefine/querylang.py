"""Structured query grammar.

A query is a category (the core product) plus a set of constraints::

    cat:blazer | attr:material=linen | range:price=500..800 | neg:color=black | soft:beach-wedding

Clauses are separated by ``|``. Parsing collapses duplicate clauses and
normalizes their order, so :func:`serialize` always yields one canonical
string per constraint set.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Union

__all__ = [
    "ATTR",
    "RANGE",
    "NEG",
    "SOFT",
    "KINDS",
    "Constraint",
    "ParsedQuery",
    "RewriteSpec",
    "ParseError",
    "parse",
    "serialize",
    "decompose",
    "concat",
    "is_equivalent",
    "format_number",
]

ATTR = "attr"
RANGE = "range"
NEG = "neg"
SOFT = "soft"

# Canonical clause order.
KINDS = (ATTR, RANGE, NEG, SOFT)
_KIND_RANK = {k: i for i, k in enumerate(KINDS)}

TOKEN_RE = re.compile(r"[a-z0-9][a-z0-9_\-]*")
_NUMBER = r"-?\d+(?:\.\d+)?(?:e[+-]?\d+)?"
_KV_RE = re.compile(r"([a-z0-9][a-z0-9_\-]*)=([a-z0-9][a-z0-9_\-]*)")
_RANGE_RE = re.compile(rf"([a-z0-9][a-z0-9_\-]*)=({_NUMBER})\.\.({_NUMBER})")

Value = Union[str, "tuple[float, float]"]


class ParseError(ValueError):
    """Raised for malformed query text. ``position`` is a character offset."""

    def __init__(self, message: str, position: int) -> None:
        super().__init__(f"{message} (at position {position})")
        self.position = position


def format_number(x: float) -> str:
    """Shortest round-trippable text for a real bound."""
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"non-finite bound {x!r}")
    if x == int(x) and abs(x) < 1e15:
        return str(int(x))
    return repr(x)


@dataclass(frozen=True, order=False)
class Constraint:
    kind: str
    key: str
    value: Value

    def __post_init__(self) -> None:
        if self.kind not in _KIND_RANK:
            raise ValueError(f"unknown constraint kind {self.kind!r}")
        if self.kind == SOFT:
            if self.key:
                raise ValueError("soft descriptors carry no key")
            _check_token(self.value)
            return
        _check_token(self.key)
        if self.kind == RANGE:
            lo, hi = self.value
            lo, hi = float(lo), float(hi)
            if not (math.isfinite(lo) and math.isfinite(hi)):
                raise ValueError("range bounds must be finite")
            if lo > hi:
                raise ValueError(f"inverted interval {lo}..{hi}")
            object.__setattr__(self, "value", (lo, hi))
        else:
            _check_token(self.value)

    @property
    def sort_key(self) -> tuple:
        if self.kind == RANGE:
            return (_KIND_RANK[self.kind], self.key, self.value[0], self.value[1])
        return (_KIND_RANK[self.kind], self.key, self.value)

    def __str__(self) -> str:
        if self.kind == SOFT:
            return f"soft:{self.value}"
        if self.kind == RANGE:
            lo, hi = self.value
            return f"range:{self.key}={format_number(lo)}..{format_number(hi)}"
        return f"{self.kind}:{self.key}={self.value}"

    @classmethod
    def attr(cls, key: str, value: str) -> "Constraint":
        return cls(ATTR, key, value)

    @classmethod
    def neg(cls, key: str, value: str) -> "Constraint":
        return cls(NEG, key, value)

    @classmethod
    def soft(cls, token: str) -> "Constraint":
        return cls(SOFT, "", token)

    @classmethod
    def range(cls, key: str, lo: float, hi: float) -> "Constraint":
        return cls(RANGE, key, (float(lo), float(hi)))


def _check_token(tok: object) -> None:
    if not isinstance(tok, str) or not TOKEN_RE.fullmatch(tok):
        raise ValueError(f"invalid token {tok!r}")


def _canonical(constraints: Iterable[Constraint]) -> tuple[Constraint, ...]:
    return tuple(sorted(set(constraints), key=lambda c: c.sort_key))


@dataclass(frozen=True)
class ParsedQuery:
    """Core product token plus a canonical, duplicate-free constraint tuple."""

    core: str
    constraints: tuple[Constraint, ...] = field(default=())

    def __post_init__(self) -> None:
        _check_token(self.core)
        object.__setattr__(self, "constraints", _canonical(self.constraints))

    def __str__(self) -> str:
        return serialize(self)

    def subset(self, indices: Iterable[int]) -> "ParsedQuery":
        """Rewrite keeping only the constraints at ``indices``."""
        return ParsedQuery(self.core, tuple(self.constraints[i] for i in indices))


# A rewrite has the same shape as a query: the core and a subset of its constraints.
RewriteSpec = ParsedQuery


def _parse_clause(clause: str, pos: int) -> tuple[str, object]:
    head, sep, body = clause.partition(":")
    if not sep:
        raise ParseError(f"clause {clause!r} lacks a kind prefix", pos)
    if head == "cat":
        if not TOKEN_RE.fullmatch(body):
            raise ParseError(f"invalid category token {body!r}", pos)
        return "cat", body
    if head == SOFT:
        if not TOKEN_RE.fullmatch(body):
            raise ParseError(f"invalid soft descriptor {body!r}", pos)
        return SOFT, Constraint.soft(body)
    if head in (ATTR, NEG):
        m = _KV_RE.fullmatch(body)
        if m is None:
            raise ParseError(f"malformed {head} clause {clause!r}", pos)
        return head, Constraint(head, m.group(1), m.group(2))
    if head == RANGE:
        m = _RANGE_RE.fullmatch(body)
        if m is None:
            raise ParseError(f"malformed range clause {clause!r}", pos)
        lo, hi = float(m.group(2)), float(m.group(3))
        if lo > hi:
            raise ParseError(f"inverted interval {m.group(2)}..{m.group(3)}", pos)
        return RANGE, Constraint.range(m.group(1), lo, hi)
    raise ParseError(f"unknown clause kind {head!r}", pos)


def parse(text: str) -> ParsedQuery:
    """Parse query text into a :class:`ParsedQuery`.

    Exactly one ``cat:`` clause is required; other clauses may appear in
    any order and repeat. Input is lower-cased and whitespace around
    separators is ignored.

    Raises:
        ParseError: on a missing or repeated ``cat:`` clause, a malformed
            clause, or an inverted range.
    """
    if not isinstance(text, str):
        raise TypeError("query text must be a string")
    core = None
    constraints = []
    pos = 0
    for raw in text.lower().split("|"):
        clause = raw.strip()
        clause_pos = pos + (len(raw) - len(raw.lstrip()))
        pos += len(raw) + 1
        if not clause:
            raise ParseError("empty clause", clause_pos)
        kind, payload = _parse_clause(clause, clause_pos)
        if kind == "cat":
            if core is not None:
                raise ParseError("repeated cat: clause", clause_pos)
            core = payload
        else:
            constraints.append(payload)
    if core is None:
        raise ParseError("missing cat: clause", 0)
    return ParsedQuery(core, tuple(constraints))


def serialize(q: ParsedQuery) -> str:
    return " | ".join([f"cat:{q.core}", *(str(c) for c in q.constraints)])


def decompose(q: ParsedQuery) -> tuple[str, tuple[Constraint, ...]]:
    return q.core, q.constraints


def concat(core: str, constraints: Iterable[Constraint]) -> ParsedQuery:
    """Inverse of :func:`decompose`."""
    return ParsedQuery(core, tuple(constraints))


def is_equivalent(r1: ParsedQuery, r2: ParsedQuery) -> bool:
    # Constraint tuples are canonical, so structural equality is set equality.
    return r1.core == r2.core and r1.constraints == r2.constraints
