"""Metrics and bound verification for guided generation.

Everything here works on *step models*: objects exposing
``step_row(x, prefix) -> probs`` plus ``vocab`` and ``l_max`` (base models,
guided models, and the closed-form constrained distributions all qualify).
KL divergences are computed by walking the first distribution's prefix tree,
which equals the sum over terminated sequences by the chain rule.

The two KL bounds are checked with a *measured* multiplicative gap: the
smallest factor ``delta`` such that approximate and exact success rates agree
within it on every prefix that carries constrained mass.  Rate functions that
satisfy the consistency identity exactly (``TowerRate`` constructions) get the
length-independent bound; everything else gets the length-scaled one.
"""

from __future__ import annotations

import hashlib
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .decode import GuidedModel
from .errors import InfeasibleGuidanceError, InfeasiblePrefixError, TooLargeSpaceError
from .exact import ExactConstrained, ExactRate, SuccessRate
from .oracle import Oracle
from .seqmodel import DEFAULT_LEAF_GUARD, Sequence, TabularBaseModel, Window

BOUND_SLACK = 1e-9


# ---------------------------------------------------------------------------
# step-model utilities


def enumerate_step_model(sm, x: str, guard: int = DEFAULT_LEAF_GUARD):
    """Yield (terminated token tuple, probability) for any step model."""
    eos = sm.vocab.eos_id
    count = 0

    def walk(pfx: Window, mass: float):
        nonlocal count
        row = sm.step_row(x, pfx)
        for tok in range(len(row)):
            p = row[tok]
            if p <= 0.0:
                continue
            if tok == eos:
                count += 1
                if count > guard:
                    raise TooLargeSpaceError(f"step-model enumeration exceeds {guard} leaves")
                yield pfx + (eos,), mass * p
            else:
                yield from walk(pfx + (tok,), mass * p)

    yield from walk((), 1.0)


def sample_step_model(sm, x: str, rng) -> tuple[Sequence, float]:
    """Draw one terminated sequence from any step model, with its log-probability."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    eos = sm.vocab.eos_id
    y: list[int] = []
    lp = 0.0
    while True:
        row = sm.step_row(x, tuple(y))
        cum = np.cumsum(row)
        tok = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
        lp += math.log(row[tok])
        y.append(tok)
        if tok == eos:
            return Sequence(x=x, y=tuple(y), terminated=True), lp


def step_model_prob(sm, x: str, y: tuple[int, ...]) -> float:
    """Probability of a terminated token tuple under a step model."""
    prob = 1.0
    for i, tok in enumerate(y):
        try:
            prob *= sm.step_row(x, y[:i])[tok]
        except (InfeasiblePrefixError, InfeasibleGuidanceError):
            return 0.0
        if prob == 0.0:
            return 0.0
    return prob


def kl_full(a, b, x: str, guard: int = DEFAULT_LEAF_GUARD) -> float:
    """KL(a || b) over terminated sequences; +inf on any support violation.

    Computed as the mass-weighted sum of per-step row divergences along a's
    prefix tree, which telescopes to the sequence-level sum exactly.
    """
    eos = a.vocab.eos_id
    inf = float("inf")
    nodes = 0

    def walk(pfx: Window, mass: float) -> float:
        nonlocal nodes
        nodes += 1
        if nodes > guard:
            raise TooLargeSpaceError(f"KL walk exceeds {guard} nodes")
        arow = a.step_row(x, pfx)
        try:
            brow = b.step_row(x, pfx)
        except (InfeasiblePrefixError, InfeasibleGuidanceError):
            return inf
        total = 0.0
        for tok in range(len(arow)):
            pa = arow[tok]
            if pa <= 0.0:
                continue
            pb = brow[tok]
            if pb <= 0.0:
                return inf
            total += mass * pa * math.log(pa / pb)
            if tok != eos:
                sub = walk(pfx + (tok,), mass * pa)
                if math.isinf(sub):
                    return inf
                total += sub
        return total

    return walk((), 1.0)


# ---------------------------------------------------------------------------
# constrained-support walks


def support_prefixes(er: ExactRate, x: str):
    """Yield (prefix, is_terminated) for every prefix with positive constrained mass."""
    base = er.base
    eos = base.vocab.eos_id

    def walk(pfx: Window):
        yield pfx, False
        row = base.row(x, pfx)
        for tok in range(base.vocab.size):
            if row[tok] <= 0.0:
                continue
            if tok == eos:
                if er.oracle.accepts_body(x, pfx):
                    yield pfx + (eos,), True
            elif er.value(x, pfx + (tok,)) > 0.0:
                yield from walk(pfx + (tok,))

    if er.value(x, ()) > 0.0:
        yield from walk(())


def support_horizon(er: ExactRate, x: str) -> int:
    """Longest terminated sequence (token count) carrying constrained mass."""
    longest = 0
    for prefix, terminated in support_prefixes(er, x):
        if terminated:
            longest = max(longest, len(prefix))
    return longest


@dataclass(frozen=True)
class DeltaEstimate:
    """Measured multiplicative gap between an approximate and the exact rate."""

    delta: float
    worst_prefix: tuple = ()
    infinite_at: tuple = ()

    @property
    def finite(self) -> bool:
        return math.isfinite(self.delta)


def estimate_delta(r_approx: SuccessRate, er: ExactRate, x: str) -> DeltaEstimate:
    """Smallest factor bounding exact/approximate rate ratios on the constrained support."""
    worst = 1.0
    worst_prefix: tuple = ()
    infinite: list[tuple] = []
    for prefix, _ in support_prefixes(er, x):
        exact = er.value(x, prefix)
        approx = r_approx.value(x, prefix)
        if approx <= 0.0 or exact <= 0.0:
            infinite.append(prefix)
            continue
        ratio = max(approx / exact, exact / approx)
        if ratio > worst:
            worst = ratio
            worst_prefix = prefix
    if infinite:
        return DeltaEstimate(float("inf"), worst_prefix, tuple(infinite))
    return DeltaEstimate(worst, worst_prefix)


# ---------------------------------------------------------------------------
# bound reports


@dataclass(frozen=True)
class BoundReport:
    """Outcome of one KL bound check."""

    delta: float
    horizon: int
    kl: float
    bound_loose: float
    bound_tight: float
    consistent_rate: bool
    holds: bool
    vacuous: bool = False
    max_consistency_residual: float = 0.0

    def to_json_dict(self) -> dict:
        return {
            "delta": self.delta,
            "horizon": self.horizon,
            "kl": self.kl,
            "bound_loose": self.bound_loose,
            "bound_tight": self.bound_tight,
            "consistent_rate": self.consistent_rate,
            "holds": self.holds,
            "vacuous": self.vacuous,
            "max_consistency_residual": self.max_consistency_residual,
        }


def _max_consistency_residual(rate: SuccessRate, base: TabularBaseModel,
                              er: ExactRate, x: str) -> float:
    worst = 0.0
    for prefix, terminated in support_prefixes(er, x):
        if terminated:
            continue
        row = base.row(x, prefix)
        expected = float(np.dot(rate.scores(x, prefix), row))
        worst = max(worst, abs(expected - rate.value(x, prefix)))
    return worst


def check_kl_bound(r_approx: SuccessRate, er: ExactRate, x: str,
                   consistency_tol: float = 1e-9) -> BoundReport:
    """Verify KL(constrained || guided-by-approx) against its delta bound.

    A rate that satisfies the consistency identity within ``consistency_tol``
    gets the length-independent bound ``2 ln delta``; otherwise the bound is
    ``(2 L + 2) ln delta`` with L the longest supported sequence.
    """
    estimate = estimate_delta(r_approx, er, x)
    horizon = support_horizon(er, x)
    guided = GuidedModel(er.base, r_approx)
    kl = kl_full(ExactConstrained(er), guided, x)
    if not estimate.finite:
        return BoundReport(delta=float("inf"), horizon=horizon, kl=kl,
                           bound_loose=float("inf"), bound_tight=float("inf"),
                           consistent_rate=False, holds=True, vacuous=True)
    log_delta = math.log(estimate.delta)
    residual = _max_consistency_residual(r_approx, er.base, er, x)
    consistent = residual <= consistency_tol
    loose = (2.0 * horizon + 2.0) * log_delta
    tight = 2.0 * log_delta
    applicable = tight if consistent else loose
    return BoundReport(delta=estimate.delta, horizon=horizon, kl=kl,
                       bound_loose=loose, bound_tight=tight,
                       consistent_rate=consistent, holds=kl <= applicable + BOUND_SLACK,
                       max_consistency_residual=residual)


class TowerRate(SuccessRate):
    """Expectation of a bounded terminal score under the base model.

    For any terminal score g in (0, 1], the prefix value E[g(full sequence)]
    satisfies the consistency identity exactly (it is a tower of conditional
    expectations), making it the canonical family for the tight KL bound.
    """

    def __init__(self, base: TabularBaseModel, g, descriptor: str = "tower"):
        self.base = base
        self.g = g
        self.descriptor = descriptor
        self._memo: dict[tuple, float] = {}

    def value(self, x: str, prefix: Window) -> float:
        prefix = tuple(prefix)
        eos = self.base.vocab.eos_id
        if prefix and prefix[-1] == eos:
            return float(self.g(x, prefix[:-1]))
        key = (x, prefix)
        hit = self._memo.get(key)
        if hit is not None:
            return hit
        row = self.base.row(x, prefix)
        total = row[eos] * float(self.g(x, prefix))
        for tok in self.base.vocab.body_ids:
            if row[tok] > 0.0:
                total += row[tok] * self.value(x, prefix + (tok,))
        self._memo[key] = total
        return total

    def scores(self, x: str, prefix: Window) -> np.ndarray:
        prefix = tuple(prefix)
        vocab = self.base.vocab
        out = np.zeros(vocab.size)
        out[vocab.eos_id] = float(self.g(x, prefix))
        if len(prefix) < self.base.l_max - 1:
            for tok in vocab.body_ids:
                out[tok] = self.value(x, prefix + (tok,))
        return out


def check_consistent_kl_bound(g, base: TabularBaseModel, oracle: Oracle, x: str,
                              er: ExactRate | None = None) -> BoundReport:
    """Tight-bound check for a tower-property rate built from terminal score ``g``."""
    if er is None:
        er = ExactRate(base, oracle)
    tower = TowerRate(base, g)
    residual = _max_consistency_residual(tower, base, er, x)
    estimate = estimate_delta(tower, er, x)
    horizon = support_horizon(er, x)
    kl = kl_full(ExactConstrained(er), GuidedModel(base, tower), x)
    if not estimate.finite:
        return BoundReport(delta=float("inf"), horizon=horizon, kl=kl,
                           bound_loose=float("inf"), bound_tight=float("inf"),
                           consistent_rate=True, holds=True, vacuous=True,
                           max_consistency_residual=residual)
    log_delta = math.log(estimate.delta)
    tight = 2.0 * log_delta
    return BoundReport(delta=estimate.delta, horizon=horizon, kl=kl,
                       bound_loose=(2.0 * horizon + 2.0) * log_delta, bound_tight=tight,
                       consistent_rate=True, holds=kl <= tight + BOUND_SLACK,
                       max_consistency_residual=residual)


# ---------------------------------------------------------------------------
# synthetic rate perturbations (bound experiments)


class ScaledRate(SuccessRate):
    """Exact rate times a constant factor, clipped into [0, 1]; zeros preserved."""

    def __init__(self, er: ExactRate, factor: float):
        self.er = er
        self.factor = float(factor)

    def value(self, x: str, prefix: Window) -> float:
        return min(1.0, self.er.value(x, prefix) * self.factor)

    def scores(self, x: str, prefix: Window) -> np.ndarray:
        return np.minimum(1.0, self.er.scores(x, prefix) * self.factor)


class PerturbedRate(SuccessRate):
    """Exact rate with a deterministic log-uniform factor in [1/delta, delta] per prefix.

    Factors come from a stable hash of (seed, condition, prefix), so results
    reproduce across processes; exact zeros stay zero and values clip at one.
    """

    def __init__(self, er: ExactRate, delta: float, seed: int = 0):
        if delta < 1.0:
            raise ValueError("delta must be at least 1")
        self.er = er
        self.delta = float(delta)
        self.seed = seed

    def _factor(self, x: str, prefix: Window) -> float:
        key = f"{self.seed}|{x}|{','.join(map(str, prefix))}".encode()
        digest = hashlib.blake2b(key, digest_size=8).digest()
        u = int.from_bytes(digest, "big") / 2.0 ** 64
        return math.exp((2.0 * u - 1.0) * math.log(self.delta))

    def value(self, x: str, prefix: Window) -> float:
        prefix = tuple(prefix)
        return min(1.0, self.er.value(x, prefix) * self._factor(x, prefix))

    def scores(self, x: str, prefix: Window) -> np.ndarray:
        prefix = tuple(prefix)
        base_scores = self.er.scores(x, prefix)
        out = np.empty_like(base_scores)
        for tok in range(base_scores.shape[0]):
            out[tok] = min(1.0, base_scores[tok] * self._factor(x, prefix + (tok,)))
        return out


# ---------------------------------------------------------------------------
# diagnostics and evaluation metrics


def consistency_residual_profile(rate: SuccessRate, base: TabularBaseModel,
                                 er: ExactRate, x: str) -> tuple[dict[Window, float], float]:
    """Per-prefix |expected extension rate - prefix rate|, weighted by constrained mass."""
    constrained = ExactConstrained(er)
    profile: dict[Window, float] = {}
    weighted = 0.0
    total_mass = 0.0
    eos = base.vocab.eos_id

    def walk(pfx: Window, mass: float):
        nonlocal weighted, total_mass
        row = base.row(x, pfx)
        residual = abs(float(np.dot(rate.scores(x, pfx), row)) - rate.value(x, pfx))
        profile[pfx] = residual
        weighted += mass * residual
        total_mass += mass
        qrow = constrained.step_row(x, pfx)
        for tok in range(base.vocab.size):
            if tok != eos and qrow[tok] > 0.0:
                walk(pfx + (tok,), mass * qrow[tok])

    walk((), 1.0)
    return profile, weighted / total_mass


def coverage(decode_fn, oracle: Oracle, xs: list[str], n_per_x: int, seed: int = 0) -> float:
    """Fraction of decoded sequences accepted by the oracle; exact count arithmetic."""
    if n_per_x < 1:
        raise ValueError("n_per_x must be at least 1")
    hits = 0
    total = 0
    for xi, x in enumerate(xs):
        for j in range(n_per_x):
            seq = decode_fn(x, seed + 7919 * xi + j)
            hits += oracle.evaluate(x, seq)
            total += 1
    return hits / total


# ---------------------------------------------------------------------------
# BLEU


def _ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def modified_precision_counts(candidates, references, n: int) -> tuple[int, int]:
    """Corpus-level (clipped matches, candidate n-gram count)."""
    match = 0
    guess = 0
    for cand, refs in zip(candidates, references):
        cgrams = _ngrams(cand, n)
        best = Counter()
        for ref in refs:
            for gram, cnt in _ngrams(ref, n).items():
                if cnt > best[gram]:
                    best[gram] = cnt
        match += sum(min(cnt, best[gram]) for gram, cnt in cgrams.items())
        guess += sum(cgrams.values())
    return match, guess


def bleu_n(candidates, references, max_n: int = 4) -> dict[int, float]:
    """Corpus BLEU with brevity penalty; add-one smoothing on orders >= 2.

    ``references[i]`` is the list of references for ``candidates[i]``.  An
    empty candidate contributes zero precision rather than raising.
    """
    if not candidates or len(candidates) != len(references):
        raise ValueError("need equally many candidates and reference lists")
    cand_len = sum(len(c) for c in candidates)
    ref_len = 0
    for cand, refs in zip(candidates, references):
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
    bp = 1.0 if cand_len >= ref_len else math.exp(1.0 - ref_len / max(cand_len, 1))

    precisions = {}
    for n in range(1, max_n + 1):
        match, guess = modified_precision_counts(candidates, references, n)
        if n == 1:
            precisions[n] = match / guess if guess else 0.0
        else:
            precisions[n] = (match + 1.0) / (guess + 1.0)

    scores = {}
    for n in range(1, max_n + 1):
        ps = [precisions[m] for m in range(1, n + 1)]
        if min(ps) <= 0.0:
            scores[n] = 0.0
        else:
            scores[n] = bp * math.exp(sum(math.log(p) for p in ps) / n)
    return scores


@dataclass(frozen=True)
class EvalReport:
    """Evaluation summary for one decoding run."""

    coverage: float
    kl_to_qstar: float
    mean_reg_residual: float
    bleu: dict[int, float] = field(default_factory=dict)
    sample_size: int = 0

    def to_json_dict(self) -> dict:
        return {
            "coverage": self.coverage,
            "kl_to_qstar": self.kl_to_qstar,
            "mean_reg_residual": self.mean_reg_residual,
            "bleu": {str(n): v for n, v in sorted(self.bleu.items())},
            "sample_size": self.sample_size,
        }
