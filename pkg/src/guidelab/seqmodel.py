"""Vocabularies, sequences, and small exactly-enumerable autoregressive models.

A ``TabularBaseModel`` is an order-k Markov model over a finite vocabulary with
one reserved EOS token.  Generation either stops by emitting EOS or is forced
to stop at the horizon ``l_max``: once a prefix holds ``l_max - 1`` tokens the
next-token distribution becomes a point mass on EOS.  That forced step *is*
part of the model's sequence distribution, which makes the distribution over
terminated sequences sum to exactly one and keeps every downstream sum finite.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .errors import (
    InvalidArgumentError,
    InvalidStateError,
    MissingConditionError,
    TooLargeSpaceError,
)

PROB_ATOL = 1e-9
DEFAULT_LEAF_GUARD = 10_000_000

Window = tuple[int, ...]


def format_float(v: float) -> str:
    """Decimal text with 17 significant digits; round-trips float64 exactly."""
    return format(float(v), ".17g")


@dataclass(frozen=True)
class Vocabulary:
    """Dense token alphabet with exactly one reserved EOS token."""

    tokens: tuple[str, ...]
    eos_id: int

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if len(set(self.tokens)) != len(self.tokens):
            raise InvalidArgumentError("vocabulary tokens must be unique")
        if not 0 <= self.eos_id < len(self.tokens):
            raise InvalidArgumentError(f"eos_id {self.eos_id} out of range for V={len(self.tokens)}")

    @classmethod
    def make(cls, body_tokens: list[str] | tuple[str, ...], eos: str = "</s>") -> "Vocabulary":
        """Vocabulary with the EOS token appended last."""
        return cls(tokens=tuple(body_tokens) + (eos,), eos_id=len(body_tokens))

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def body_ids(self) -> tuple[int, ...]:
        return tuple(i for i in range(self.size) if i != self.eos_id)

    def id_of(self, token: str) -> int:
        try:
            return self.tokens.index(token)
        except ValueError:
            raise MissingConditionError(f"unknown token {token!r}") from None

    def decode(self, ids, *, strip_eos: bool = True) -> str:
        parts = [self.tokens[i] for i in ids if not (strip_eos and i == self.eos_id)]
        return " ".join(parts)


@dataclass(frozen=True)
class Sequence:
    """A (possibly terminated) output sequence under condition ``x``."""

    x: str
    y: tuple[int, ...]
    terminated: bool

    def __post_init__(self):
        object.__setattr__(self, "y", tuple(int(t) for t in self.y))

    def body(self, vocab: Vocabulary) -> tuple[int, ...]:
        if self.terminated:
            return self.y[:-1]
        return self.y

    def validate(self, vocab: Vocabulary, l_max: int | None = None) -> None:
        if any(not 0 <= t < vocab.size for t in self.y):
            raise InvalidArgumentError(f"token id out of range in {self.y}")
        n_eos = sum(1 for t in self.y if t == vocab.eos_id)
        if self.terminated:
            if not self.y or self.y[-1] != vocab.eos_id or n_eos != 1:
                raise InvalidStateError(f"terminated sequence must end with a single EOS: {self.y}")
        elif n_eos:
            raise InvalidStateError(f"non-terminated sequence contains EOS: {self.y}")
        if l_max is not None and len(self.y) > l_max:
            raise InvalidStateError(f"sequence length {len(self.y)} exceeds horizon {l_max}")


class TokenDistribution:
    """Probability vector over the vocabulary; validated on construction."""

    __slots__ = ("probs",)

    def __init__(self, probs):
        arr = np.asarray(probs, dtype=np.float64)
        if arr.ndim != 1:
            raise InvalidArgumentError("token distribution must be a vector")
        if np.any(arr < 0.0):
            raise InvalidArgumentError(f"negative probability in {arr}")
        total = float(arr.sum())
        if abs(total - 1.0) > PROB_ATOL:
            raise InvalidArgumentError(f"probabilities sum to {total!r}, not 1")
        arr.setflags(write=False)
        self.probs = arr

    def __len__(self) -> int:
        return self.probs.shape[0]

    def __getitem__(self, i: int) -> float:
        return float(self.probs[i])

    def __repr__(self) -> str:
        return f"TokenDistribution({np.array2string(self.probs, precision=6)})"


def tempered_row(row: np.ndarray, temperature: float) -> np.ndarray:
    """Renormalized ``row ** (1/T)``; zero entries stay zero."""
    if temperature == 1.0:
        return row
    out = np.zeros_like(row)
    pos = row > 0.0
    out[pos] = row[pos] ** (1.0 / temperature)
    return out / out.sum()


def nucleus_mask(row: np.ndarray, top_p: float) -> np.ndarray:
    """Boolean mask of the smallest top-probability set with mass >= top_p.

    Ties in probability are broken toward lower token ids, which keeps the
    nucleus deterministic.
    """
    if top_p >= 1.0:
        return row > 0.0
    order = np.lexsort((np.arange(row.size), -row))
    cum = np.cumsum(row[order])
    cut = int(np.searchsorted(cum, top_p - 1e-15)) + 1
    mask = np.zeros(row.size, dtype=bool)
    mask[order[:cut]] = True
    return mask & (row > 0.0)


def _restricted_row(row: np.ndarray, temperature: float, top_p: float) -> np.ndarray:
    work = tempered_row(row, temperature)
    if top_p < 1.0:
        mask = nucleus_mask(work, top_p)
        work = np.where(mask, work, 0.0)
        work = work / work.sum()
    return work


class TabularBaseModel:
    """Order-k Markov autoregressive model with explicit per-state rows.

    ``table`` maps condition -> {window -> probability row}; the window is the
    tuple of the last ``order`` emitted tokens (shorter near the start).
    Models are immutable after construction and safe to share across threads.
    """

    def __init__(self, vocab: Vocabulary, order: int, l_max: int,
                 table: dict[str, dict[Window, np.ndarray]]):
        if order < 0:
            raise InvalidArgumentError("order must be nonnegative")
        if l_max < 1:
            raise InvalidArgumentError("l_max must be positive")
        self.vocab = vocab
        self.order = order
        self.l_max = l_max
        self._table: dict[str, dict[Window, np.ndarray]] = {}
        for x, rows in table.items():
            fixed = {}
            for window, row in rows.items():
                arr = np.asarray(row, dtype=np.float64).copy()
                TokenDistribution(arr)  # validates
                arr.setflags(write=False)
                fixed[tuple(int(t) for t in window)] = arr
            self._table[x] = fixed
        eos_row = np.zeros(vocab.size)
        eos_row[vocab.eos_id] = 1.0
        eos_row.setflags(write=False)
        self._forced_eos_row = eos_row
        self._check_closure()

    # -- structure ---------------------------------------------------------

    @property
    def conditions(self) -> tuple[str, ...]:
        return tuple(sorted(self._table))

    def window_of(self, prefix: Window) -> Window:
        if self.order == 0:
            return ()
        return tuple(prefix[-self.order:])

    def _check_closure(self):
        """Every window reachable at a depth that consults the table must have a row."""
        from collections import deque

        for x, rows in self._table.items():
            if () not in rows:
                raise InvalidArgumentError(f"condition {x!r}: missing root window ()")
            seen = {()}
            frontier = deque([((), 0)])  # BFS: first visit is the minimum depth
            while frontier:
                window, depth = frontier.popleft()
                if depth >= self.l_max - 1:
                    continue  # forced EOS; row never consulted from here
                row = rows.get(window)
                if row is None:
                    raise InvalidArgumentError(f"condition {x!r}: missing row for window {window}")
                for tok in self.vocab.body_ids:
                    if row[tok] <= 0.0:
                        continue
                    nxt = self.window_of(window + (tok,))
                    if nxt not in seen:
                        seen.add(nxt)
                        frontier.append((nxt, depth + 1))

    # -- per-step distribution ---------------------------------------------

    def row(self, x: str, prefix: Window) -> np.ndarray:
        """Effective next-token probabilities after ``prefix`` (read-only array)."""
        rows = self._table.get(x)
        if rows is None:
            raise MissingConditionError(f"unknown condition {x!r}")
        prefix = tuple(prefix)
        if any(t == self.vocab.eos_id for t in prefix):
            raise InvalidStateError(f"prefix {prefix} is already terminated")
        if len(prefix) >= self.l_max:
            raise InvalidStateError(f"prefix length {len(prefix)} reached horizon {self.l_max}")
        if len(prefix) == self.l_max - 1:
            return self._forced_eos_row
        return rows[self.window_of(prefix)]

    def table_row(self, x: str, window: Window) -> np.ndarray:
        """Raw stored row for a Markov window; no horizon forcing applied."""
        rows = self._table.get(x)
        if rows is None:
            raise MissingConditionError(f"unknown condition {x!r}")
        return rows[tuple(window)]

    def next_token_dist(self, x: str, prefix) -> TokenDistribution:
        return TokenDistribution(self.row(x, tuple(prefix)))

    # step-model protocol used by divergence/enumeration helpers
    def step_row(self, x: str, prefix: Window) -> np.ndarray:
        return self.row(x, prefix)

    # -- whole-sequence operations -------------------------------------------

    def sequence_logprob(self, x: str, seq: Sequence) -> float:
        """Log-probability of a terminated sequence; -inf on a zero-probability step."""
        seq.validate(self.vocab, self.l_max)
        if not seq.terminated:
            raise InvalidArgumentError("sequence_logprob requires a terminated sequence")
        lp = 0.0
        for i, tok in enumerate(seq.y):
            p = self.row(x, seq.y[:i])[tok]
            if p <= 0.0:
                return float("-inf")
            lp += math.log(p)
        return lp

    def sample_sequence(self, x: str, rng, temperature: float = 1.0, top_p: float = 1.0,
                        max_len: int | None = None) -> tuple[Sequence, float]:
        """Draw one sequence; returns it with its log-probability under this model.

        Each step draws from the tempered row restricted to its top-p nucleus;
        the sequence is forced to terminate by ``max_len`` (default: the model
        horizon).  The returned log-probability is under the untempered,
        unrestricted model, as needed for reweighting.
        """
        if temperature <= 0.0:
            raise InvalidArgumentError("temperature must be positive")
        if not 0.0 < top_p <= 1.0:
            raise InvalidArgumentError("top_p must lie in (0, 1]")
        if isinstance(rng, (int, np.integer)):
            rng = np.random.default_rng(rng)
        horizon = self.l_max if max_len is None else min(max_len, self.l_max)
        eos = self.vocab.eos_id
        y: list[int] = []
        lp = 0.0
        while True:
            row = self.row(x, tuple(y))
            if len(y) == horizon - 1:
                draw_row = self._forced_eos_row
            elif temperature == 1.0 and top_p >= 1.0:
                draw_row = row
            else:
                draw_row = _restricted_row(row, temperature, top_p)
            cum = np.cumsum(draw_row)
            # u < cum[-1] strictly, so the index found always has positive mass
            tok = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
            p = row[tok]
            lp = lp + math.log(p) if p > 0.0 else float("-inf")
            y.append(tok)
            if tok == eos:
                return Sequence(x=x, y=tuple(y), terminated=True), lp

    def enumerate_sequences(self, x: str, prefix: Window = (),
                            guard: int = DEFAULT_LEAF_GUARD) -> Iterator[tuple[Sequence, float]]:
        """Yield every positive-probability terminated continuation of ``prefix``.

        Probabilities are conditional on the prefix and sum to one.  Raises
        ``TooLargeSpaceError`` as soon as more than ``guard`` sequences would be
        produced; the walk never truncates silently.
        """
        prefix = tuple(prefix)
        eos = self.vocab.eos_id
        count = 0

        def walk(pfx: Window, mass: float) -> Iterator[tuple[Sequence, float]]:
            nonlocal count
            row = self.row(x, pfx)
            for tok in range(self.vocab.size):
                p = row[tok]
                if p <= 0.0:
                    continue
                if tok == eos:
                    count += 1
                    if count > guard:
                        raise TooLargeSpaceError(
                            f"enumeration under x={x!r} exceeds guard of {guard} sequences")
                    yield Sequence(x=x, y=pfx + (eos,), terminated=True), mass * p
                else:
                    yield from walk(pfx + (tok,), mass * p)

        yield from walk(prefix, 1.0)

    # -- persistence ---------------------------------------------------------

    def to_json_dict(self) -> dict:
        rows = []
        for x in self.conditions:
            for window in sorted(self._table[x]):
                probs = [format_float(p) for p in self._table[x][window]]
                rows.append({"x": x, "window": list(window), "probs": probs})
        return {
            "format": "guidelab/tabular-model",
            "version": 1,
            "tokens": list(self.vocab.tokens),
            "eos_id": self.vocab.eos_id,
            "order": self.order,
            "l_max": self.l_max,
            "rows": rows,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "TabularBaseModel":
        if doc.get("format") != "guidelab/tabular-model":
            raise InvalidArgumentError(f"not a model document: format={doc.get('format')!r}")
        vocab = Vocabulary(tuple(doc["tokens"]), int(doc["eos_id"]))
        table: dict[str, dict[Window, np.ndarray]] = {}
        for entry in doc["rows"]:
            table.setdefault(entry["x"], {})[tuple(entry["window"])] = np.array(
                [float(p) for p in entry["probs"]])
        return cls(vocab, int(doc["order"]), int(doc["l_max"]), table)

    def save(self, path) -> None:
        from .storage import atomic_write_json
        atomic_write_json(path, self.to_json_dict())

    @classmethod
    def load(cls, path) -> "TabularBaseModel":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))


def random_tabular_model(seed: int, v: int, k: int, l_max: int, eos_floor: float,
                         conditions: tuple[str, ...] = ("x0",)) -> TabularBaseModel:
    """Deterministic random fixture model; every row gives EOS at least ``eos_floor``."""
    if v < 2:
        raise InvalidArgumentError("need at least one body token plus EOS")
    if not 0.0 < eos_floor <= 1.0:
        raise InvalidArgumentError("eos_floor must lie in (0, 1]")
    vocab = Vocabulary.make([f"t{i}" for i in range(v - 1)])
    rng = np.random.default_rng(seed)
    body = vocab.body_ids

    def all_windows() -> Iterator[Window]:
        frontier: list[Window] = [()]
        while frontier:
            w = frontier.pop(0)
            yield w
            if len(w) < k:
                frontier.extend(w + (t,) for t in body)

    table: dict[str, dict[Window, np.ndarray]] = {}
    for x in conditions:
        rows = {}
        for window in all_windows():
            base = rng.dirichlet(np.ones(v))
            row = base * (1.0 - eos_floor)
            row[vocab.eos_id] += eos_floor
            rows[window] = row
        table[x] = rows
    return TabularBaseModel(vocab, k, l_max, table)
