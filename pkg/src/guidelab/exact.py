"""Ground-truth success rates and closed-form constrained distributions.

The *success rate* of a prefix is the probability, under the base model, that
completing it yields an oracle-satisfying terminated sequence.  ``ExactRate``
computes it two independent ways: brute-force enumeration of continuations,
and a dynamic program over (remaining length, DFA state, Markov window) whose
cost is linear in the horizon instead of exponential.

From exact rates the hard-constrained distribution follows in closed form,
both at the sequence level (conditioning the base model on acceptance) and as
a self-normalizing token-level factorization.  The soft variant interpolates
so the induced distribution puts a chosen mass ``r`` on satisfying sequences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    InfeasibleOracleError,
    InfeasiblePrefixError,
    InfeasibleSoftSpecError,
    InvalidArgumentError,
)
from .oracle import Oracle
from .seqmodel import (
    DEFAULT_LEAF_GUARD,
    Sequence,
    TabularBaseModel,
    TokenDistribution,
    Window,
)


class SuccessRate:
    """Interface for success-rate functions: exact, learned, or synthetic.

    ``value`` is the rate at a prefix; ``scores`` is the vector of rates at
    every one-token extension (the EOS entry is the rate of terminating here).
    """

    def value(self, x: str, prefix: Window) -> float:
        raise NotImplementedError

    def scores(self, x: str, prefix: Window) -> np.ndarray:
        raise NotImplementedError


class ConstantRate(SuccessRate):
    """Same rate everywhere; composing with it reproduces the base model."""

    def __init__(self, c: float, vocab_size: int):
        self.c = float(c)
        self.vocab_size = vocab_size

    def value(self, x: str, prefix: Window) -> float:
        return self.c

    def scores(self, x: str, prefix: Window) -> np.ndarray:
        return np.full(self.vocab_size, self.c)


class ExactRate(SuccessRate):
    """Exact success rates for a tabular base model and a boolean oracle.

    ``method="dp"`` requires the oracle to expose a DFA form and memoizes on
    (condition, remaining length, DFA state, Markov window) -- prefix identity
    beyond that state never matters.  ``method="enumeration"`` sums over all
    terminated continuations and exists as the independent cross-check.
    Instances are logically pure; queries are safe to issue concurrently.
    """

    def __init__(self, base: TabularBaseModel, oracle: Oracle, method: str = "dp",
                 guard: int = DEFAULT_LEAF_GUARD):
        if method not in ("dp", "enumeration"):
            raise InvalidArgumentError(f"unknown method {method!r}")
        self.base = base
        self.oracle = oracle
        self.method = method
        self.guard = guard
        self._dp_memo: dict[tuple, float] = {}
        self._enum_memo: dict[tuple, float] = {}
        self._dfas: dict[str, object] = {}

    # -- plumbing ------------------------------------------------------------

    def _dfa(self, x: str):
        dfa = self._dfas.get(x)
        if dfa is None:
            dfa = self.oracle.as_dfa(x, self.base.vocab)
            if dfa is None:
                raise InvalidArgumentError(
                    f"oracle {self.oracle.descriptor!r} has no DFA form; use method='enumeration'")
            self._dfas[x] = dfa
        return dfa

    def _split(self, x: str, prefix: Window) -> tuple[Window, bool]:
        prefix = tuple(int(t) for t in prefix)
        eos = self.base.vocab.eos_id
        if eos in prefix:
            if prefix[-1] != eos or prefix.count(eos) != 1:
                raise InvalidArgumentError(f"EOS may only close the prefix: {prefix}")
            return prefix[:-1], True
        if len(prefix) > self.base.l_max - 1:
            raise InvalidArgumentError(f"prefix length {len(prefix)} exceeds horizon")
        return prefix, False

    # -- the success rate itself ---------------------------------------------

    def value(self, x: str, prefix: Window) -> float:
        body, terminated = self._split(x, prefix)
        if terminated:
            return float(self.oracle.accepts_body(x, body))
        if self.method == "dp":
            dfa = self._dfa(x)
            rem = self.base.l_max - 1 - len(body)
            return self._dp(x, dfa, rem, dfa.run(body), self.base.window_of(body))
        return self._enum_value(x, body)

    def scores(self, x: str, prefix: Window) -> np.ndarray:
        body, terminated = self._split(x, prefix)
        if terminated:
            raise InvalidArgumentError("no extensions exist past a terminated prefix")
        vocab = self.base.vocab
        out = np.zeros(vocab.size)
        out[vocab.eos_id] = float(self.oracle.accepts_body(x, body))
        rem = self.base.l_max - 1 - len(body)
        if rem == 0:
            return out  # horizon: EOS is the only extension with any mass
        if self.method == "dp":
            dfa = self._dfa(x)
            state = dfa.run(body)
            window = self.base.window_of(body)
            for tok in vocab.body_ids:
                out[tok] = self._dp(x, dfa, rem - 1, dfa.step(state, tok),
                                    self.base.window_of(window + (tok,)))
        else:
            for tok in vocab.body_ids:
                out[tok] = self._enum_value(x, body + (tok,))
        return out

    def _dp(self, x: str, dfa, rem: int, state: int, window: Window) -> float:
        if rem == 0:
            return float(dfa.accepting[state])
        key = (x, rem, state, window)
        hit = self._dp_memo.get(key)
        if hit is not None:
            return hit
        row = self.base.table_row(x, window)
        vocab = self.base.vocab
        total = row[vocab.eos_id] * float(dfa.accepting[state])
        for tok in vocab.body_ids:
            p = row[tok]
            if p > 0.0:
                total += p * self._dp(x, dfa, rem - 1, dfa.step(state, tok),
                                      self.base.window_of(window + (tok,)))
        self._dp_memo[key] = total
        return total

    def _enum_value(self, x: str, body: Window) -> float:
        key = (x, body)
        hit = self._enum_memo.get(key)
        if hit is not None:
            return hit
        total = 0.0
        for seq, p in self.base.enumerate_sequences(x, prefix=body, guard=self.guard):
            if self.oracle.accepts_body(x, seq.y[:-1]):
                total += p
        self._enum_memo[key] = total
        return total


def exact_r(er: ExactRate, x: str, prefix: Window) -> float:
    """Success rate of ``prefix``: mass of satisfying completions under the base."""
    return er.value(x, prefix)


def exact_r_dp(base: TabularBaseModel, oracle: Oracle, x: str, prefix: Window) -> float:
    """Success rate via the automaton dynamic program; cost linear in the horizon."""
    return ExactRate(base, oracle, method="dp").value(x, prefix)


def exact_qstar_seq(er: ExactRate, x: str, seq: Sequence) -> float:
    """Sequence-level constrained probability: base mass conditioned on acceptance."""
    r_x = er.value(x, ())
    if r_x == 0.0:
        raise InfeasibleOracleError(f"no satisfying sequence has positive mass under x={x!r}")
    if not er.oracle.evaluate(x, seq):
        return 0.0
    lp = er.base.sequence_logprob(x, seq)
    return float(np.exp(lp)) / r_x if lp > float("-inf") else 0.0


def exact_qstar_token(er: ExactRate, x: str, prefix: Window) -> TokenDistribution:
    """Token-level constrained distribution; self-normalizing, no renormalization.

    Entry v is (rate of prefix+v / rate of prefix) times the base probability
    of v.  The row sums to one because the rate of a prefix is exactly the
    expectation of its extensions' rates under the base row.
    """
    prefix = tuple(prefix)
    r_prefix = er.value(x, prefix)
    if r_prefix == 0.0:
        raise InfeasiblePrefixError(f"prefix {prefix} cannot reach a satisfying sequence")
    row = er.base.row(x, prefix)
    return TokenDistribution(er.scores(x, prefix) * row / r_prefix)


@dataclass(frozen=True)
class SoftSpec:
    """Target mass ``r`` that satisfying sequences should carry after guidance.

    ``r = 1`` is the hard constraint; ``r`` equal to the base success rate
    leaves the model untouched.
    """

    r: float

    def __post_init__(self):
        if not 0.0 <= self.r <= 1.0:
            raise InvalidArgumentError(f"target mass must lie in [0, 1], got {self.r}")

    def coefficients(self, r_x: float) -> tuple[float, float]:
        """Multipliers (alpha, beta) for satisfying and violating mass."""
        if r_x <= 0.0:
            if self.r == 0.0:
                return 0.0, 1.0
            raise InfeasibleSoftSpecError(
                f"base satisfies with probability 0; cannot request mass {self.r}")
        if r_x >= 1.0:
            if self.r == 1.0:
                return 1.0, 0.0
            raise InfeasibleSoftSpecError(
                f"base always satisfies; cannot request mass {self.r}")
        return self.r / r_x, (1.0 - self.r) / (1.0 - r_x)


def soft_qstar_token(er: ExactRate, x: str, prefix: Window, spec: SoftSpec) -> TokenDistribution:
    """Token-level soft-constrained distribution for target satisfying mass ``spec.r``."""
    prefix = tuple(prefix)
    alpha, beta = spec.coefficients(er.value(x, ()))

    def blend(rate: float) -> float:
        return alpha * rate + beta * (1.0 - rate)

    denom = blend(er.value(x, prefix))
    if denom == 0.0:
        raise InfeasiblePrefixError(f"prefix {prefix} has zero mass under the soft target")
    row = er.base.row(x, prefix)
    rates = er.scores(x, prefix)
    numer = (alpha * rates + beta * (1.0 - rates)) * row
    return TokenDistribution(numer / denom)


class ExactConstrained:
    """Step-model view of the hard-constrained closed form (for sampling/KL)."""

    def __init__(self, er: ExactRate):
        self.er = er
        self.l_max = er.base.l_max
        self.vocab = er.base.vocab

    def step_row(self, x: str, prefix: Window) -> np.ndarray:
        return exact_qstar_token(self.er, x, prefix).probs


class SoftConstrained:
    """Step-model view of the soft-constrained closed form."""

    def __init__(self, er: ExactRate, spec: SoftSpec):
        self.er = er
        self.spec = spec
        self.l_max = er.base.l_max
        self.vocab = er.base.vocab

    def step_row(self, x: str, prefix: Window) -> np.ndarray:
        return soft_qstar_token(self.er, x, prefix, self.spec).probs
