"""Sequence-level boolean oracles and the lexical-constraint -> DFA compiler.

Oracles judge *terminated* sequences only; prefix feasibility is always derived
from success rates, never asked of the oracle directly.  Lexical oracles
compile to deterministic finite automata (a product of substring matchers with
failure links and absorbing accept states), which is what makes the exact
dynamic program in :mod:`guidelab.exact` possible.
"""

from __future__ import annotations

import json
from typing import Callable, Iterable

import numpy as np

from .errors import (
    InvalidArgumentError,
    InvalidPatternError,
    MissingConditionError,
)
from .seqmodel import Sequence, Vocabulary

Pattern = tuple[int, ...]


class Oracle:
    """Deterministic boolean predicate over terminated sequences."""

    descriptor: str = "oracle"

    def accepts_body(self, x: str, body: tuple[int, ...]) -> bool:
        raise NotImplementedError

    def evaluate(self, x: str, seq: Sequence) -> int:
        if not seq.terminated:
            raise InvalidArgumentError("oracle evaluated on a non-terminated sequence")
        return int(self.accepts_body(x, seq.y[:-1]))

    def as_dfa(self, x: str, vocab: Vocabulary) -> "DfaOracle | None":
        """DFA realization for exact dynamic programming, if one exists."""
        return None


class TrueOracle(Oracle):
    """Accepts everything; the no-constraint baseline."""

    descriptor = "true"

    def accepts_body(self, x: str, body: tuple[int, ...]) -> bool:
        return True

    def as_dfa(self, x: str, vocab: Vocabulary) -> "DfaOracle":
        trans = np.zeros((1, vocab.size), dtype=np.int64)
        return DfaOracle(start=0, transitions=trans, accepting=np.array([True]),
                         descriptor="dfa(true)")


class FuncOracle(Oracle):
    """Wraps an arbitrary predicate on (condition, body). No DFA form."""

    def __init__(self, fn: Callable[[str, tuple[int, ...]], bool], descriptor: str = "func"):
        self._fn = fn
        self.descriptor = descriptor

    def accepts_body(self, x: str, body: tuple[int, ...]) -> bool:
        return bool(self._fn(x, body))


def contains_pattern(body: tuple[int, ...], pattern: Pattern) -> bool:
    n = len(pattern)
    return any(body[i:i + n] == pattern for i in range(len(body) - n + 1))


class LexicalOracle(Oracle):
    """All keyword patterns for a condition must occur contiguously in the body."""

    def __init__(self, keywords: dict[str, Iterable[Pattern]], descriptor: str | None = None):
        self._keywords: dict[str, tuple[Pattern, ...]] = {}
        for x, patterns in keywords.items():
            pats = tuple(tuple(int(t) for t in p) for p in patterns)
            if not pats or any(not p for p in pats):
                raise InvalidPatternError(f"condition {x!r}: patterns must be nonempty")
            self._keywords[x] = pats
        self.descriptor = descriptor or "lexical(" + "; ".join(
            f"{x}:{list(map(list, pats))}" for x, pats in sorted(self._keywords.items())) + ")"
        self._dfa_cache: dict[str, DfaOracle] = {}

    def patterns_for(self, x: str) -> tuple[Pattern, ...]:
        try:
            return self._keywords[x]
        except KeyError:
            raise MissingConditionError(f"no keyword patterns for condition {x!r}") from None

    def accepts_body(self, x: str, body: tuple[int, ...]) -> bool:
        return all(contains_pattern(body, p) for p in self.patterns_for(x))

    def as_dfa(self, x: str, vocab: Vocabulary) -> "DfaOracle":
        dfa = self._dfa_cache.get(x)
        if dfa is None:
            dfa = compile_lexical_to_dfa(self.patterns_for(x), vocab)
            self._dfa_cache[x] = dfa
        return dfa

    def to_json_dict(self, vocab: Vocabulary) -> dict:
        return {
            "format": "guidelab/lexical-oracle",
            "version": 1,
            "keywords": {
                x: [[vocab.tokens[t] for t in pat] for pat in pats]
                for x, pats in sorted(self._keywords.items())
            },
        }

    @classmethod
    def from_json_dict(cls, doc: dict, vocab: Vocabulary) -> "LexicalOracle":
        if doc.get("format") != "guidelab/lexical-oracle":
            raise InvalidArgumentError(f"not an oracle document: format={doc.get('format')!r}")
        keywords = {
            x: [tuple(vocab.id_of(tok) for tok in pat) for pat in pats]
            for x, pats in doc["keywords"].items()
        }
        return cls(keywords)

    def save(self, path, vocab: Vocabulary) -> None:
        from .storage import atomic_write_json
        atomic_write_json(path, self.to_json_dict(vocab))

    @classmethod
    def load(cls, path, vocab: Vocabulary) -> "LexicalOracle":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh), vocab)


class DfaOracle(Oracle):
    """Total deterministic automaton over token ids; accepts via final state.

    The automaton reads sequence bodies (EOS excluded); the EOS column exists
    only to keep the transition table total and is a self-loop.
    """

    def __init__(self, start: int, transitions: np.ndarray, accepting: np.ndarray,
                 descriptor: str = "dfa"):
        trans = np.asarray(transitions, dtype=np.int64)
        acc = np.asarray(accepting, dtype=bool)
        if trans.ndim != 2 or acc.shape != (trans.shape[0],):
            raise InvalidArgumentError("transition table must be S x V with one accept bit per state")
        if not 0 <= start < trans.shape[0]:
            raise InvalidArgumentError(f"start state {start} out of range")
        if np.any(trans < 0) or np.any(trans >= trans.shape[0]):
            raise InvalidArgumentError("transition targets out of range")
        trans.setflags(write=False)
        acc.setflags(write=False)
        self.start = int(start)
        self.transitions = trans
        self.accepting = acc
        self.descriptor = descriptor

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_symbols(self) -> int:
        return self.transitions.shape[1]

    def step(self, state: int, token: int) -> int:
        if not 0 <= state < self.n_states:
            raise InvalidArgumentError(f"state {state} out of range")
        if not 0 <= token < self.n_symbols:
            raise InvalidArgumentError(f"token {token} out of range")
        return int(self.transitions[state, token])

    def run(self, body: Iterable[int], state: int | None = None) -> int:
        s = self.start if state is None else state
        for tok in body:
            s = self.step(s, tok)
        return s

    def accepts_body(self, x: str, body: tuple[int, ...]) -> bool:
        return bool(self.accepting[self.run(body)])

    def as_dfa(self, x: str, vocab: Vocabulary) -> "DfaOracle":
        return self

    def to_json_dict(self) -> dict:
        return {
            "format": "guidelab/dfa-oracle",
            "version": 1,
            "start": self.start,
            "transitions": self.transitions.tolist(),
            "accepting": [bool(b) for b in self.accepting],
            "descriptor": self.descriptor,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "DfaOracle":
        if doc.get("format") != "guidelab/dfa-oracle":
            raise InvalidArgumentError(f"not a DFA document: format={doc.get('format')!r}")
        return cls(int(doc["start"]), np.array(doc["transitions"]),
                   np.array(doc["accepting"]), doc.get("descriptor", "dfa"))


def dfa_step(dfa: DfaOracle, state: int, token: int) -> int:
    return dfa.step(state, token)


def dfa_run(dfa: DfaOracle, body: Iterable[int]) -> int:
    return dfa.run(body)


def _matcher_delta(pattern: Pattern, n_symbols: int) -> np.ndarray:
    """Transition table of a single-substring matcher with an absorbing accept.

    State s means "the last s tokens equal the first s pattern tokens"; the
    table is filled in increasing s so each row can reuse the failure row.
    """
    m = len(pattern)
    fail = [0] * m  # classic border array
    k = 0
    for i in range(1, m):
        while k > 0 and pattern[i] != pattern[k]:
            k = fail[k - 1]
        if pattern[i] == pattern[k]:
            k += 1
        fail[i] = k
    delta = np.zeros((m + 1, n_symbols), dtype=np.int64)
    for s in range(m + 1):
        for t in range(n_symbols):
            if s == m:
                delta[s, t] = m
            elif pattern[s] == t:
                delta[s, t] = s + 1
            elif s == 0:
                delta[s, t] = 0
            else:
                delta[s, t] = delta[fail[s - 1], t]
    return delta


def compile_lexical_to_dfa(patterns: Iterable[Pattern], vocab: Vocabulary) -> DfaOracle:
    """Product of per-pattern substring matchers; accepting = all matched.

    Only states reachable from the all-zero start are materialized, so the
    state count is at most the product of (pattern length + 1) terms and is
    usually far smaller.
    """
    pats = tuple(tuple(int(t) for t in p) for p in patterns)
    if not pats:
        raise InvalidPatternError("need at least one pattern")
    for p in pats:
        if not p:
            raise InvalidPatternError("patterns must be nonempty")
        if vocab.eos_id in p:
            raise InvalidPatternError(f"pattern {p} contains the EOS token")
    deltas = [_matcher_delta(p, vocab.size) for p in pats]
    lens = tuple(len(p) for p in pats)

    start = (0,) * len(pats)
    ids: dict[tuple[int, ...], int] = {start: 0}
    order = [start]
    rows: list[list[int]] = []
    i = 0
    while i < len(order):
        state = order[i]
        row = []
        for tok in range(vocab.size):
            if tok == vocab.eos_id:
                nxt = state  # bodies never contain EOS; keep the table total
            else:
                nxt = tuple(int(d[s, tok]) for d, s in zip(deltas, state))
            if nxt not in ids:
                ids[nxt] = len(order)
                order.append(nxt)
            row.append(ids[nxt])
        rows.append(row)
        i += 1

    accepting = np.array([all(s == m for s, m in zip(state, lens)) for state in order])
    descriptor = "dfa(" + " & ".join(
        "+".join(vocab.tokens[t] for t in p) for p in pats) + ")"
    return DfaOracle(start=0, transitions=np.array(rows), accepting=accepting,
                     descriptor=descriptor)
