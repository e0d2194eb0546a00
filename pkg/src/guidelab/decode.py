"""Composition of a base model with a success-rate function, plus decoding.

The guided step distribution reweights each base-model row by the success
rates of the one-token extensions and renormalizes explicitly.  With exact
rates this reproduces the closed-form constrained distribution; with learned
rates it is the approximation whose quality the analysis module bounds.  The
model keeps call counters so tests can assert the advertised inference cost:
one base row fetch and one rate forward per decoded token.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from .errors import InfeasibleGuidanceError
from .exact import SuccessRate
from .seqmodel import Sequence, TabularBaseModel, TokenDistribution, Window, nucleus_mask


class GuidedModel:
    """Base model reweighted per step by a success-rate function.

    Read-only after construction; concurrent decodes with independent seeds
    are safe.
    """

    def __init__(self, base: TabularBaseModel, rate: SuccessRate, descriptor: str = "guided"):
        self.base = base
        self.rate = rate
        self.descriptor = descriptor
        self.vocab = base.vocab
        self.l_max = base.l_max
        self.base_fetches = 0
        self.rate_forwards = 0

    def reset_counters(self) -> None:
        self.base_fetches = 0
        self.rate_forwards = 0

    # -- the guided step distribution -----------------------------------------

    def step_row(self, x: str, prefix: Window) -> np.ndarray:
        prefix = tuple(prefix)
        self.base_fetches += 1
        row = self.base.row(x, prefix)
        self.rate_forwards += 1
        scores = self.rate.scores(x, prefix)
        numer = scores * row
        z = numer.sum()
        if z <= 0.0:
            raise InfeasibleGuidanceError(
                f"guided step has zero mass at prefix {prefix} under x={x!r}")
        return numer / z

    def token_dist(self, x: str, prefix: Window) -> TokenDistribution:
        return TokenDistribution(self.step_row(x, prefix))

    def step_normalizer(self, x: str, prefix: Window) -> float:
        """Normalizer of the ratio form; exactly 1 for a consistent rate function.

        Diagnostic only -- it costs an extra rate evaluation, so the decoding
        path never calls it.
        """
        prefix = tuple(prefix)
        numer = self.rate.scores(x, prefix) * self.base.row(x, prefix)
        return float(numer.sum() / self.rate.value(x, prefix))

    # -- whole sequences -------------------------------------------------------

    def sequence_logprob(self, x: str, seq: Sequence) -> float:
        lp = 0.0
        for i, tok in enumerate(seq.y):
            p = self.step_row(x, seq.y[:i])[tok]
            if p <= 0.0:
                return float("-inf")
            lp += math.log(p)
        return lp

    def sample(self, x: str, rng, top_p: float = 1.0) -> tuple[Sequence, float]:
        """Draw one sequence from the guided distribution; returns its guided log-prob."""
        if isinstance(rng, (int, np.integer)):
            rng = np.random.default_rng(rng)
        eos = self.vocab.eos_id
        y: list[int] = []
        lp = 0.0
        while True:
            row = self.step_row(x, tuple(y))
            if top_p < 1.0:
                masked = np.where(nucleus_mask(row, top_p), row, 0.0)
                draw_row = masked / masked.sum()
            else:
                draw_row = row
            cum = np.cumsum(draw_row)
            tok = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
            lp += math.log(row[tok])
            y.append(tok)
            if tok == eos:
                return Sequence(x=x, y=tuple(y), terminated=True), lp


def guided_token_dist(gm: GuidedModel, x: str, prefix: Window) -> TokenDistribution:
    return gm.token_dist(x, prefix)


def decode_greedy(gm: GuidedModel, x: str) -> Sequence:
    """Argmax decoding; ties break toward the lowest token id."""
    eos = gm.vocab.eos_id
    y: list[int] = []
    while True:
        row = gm.step_row(x, tuple(y))
        tok = int(np.argmax(row))  # first maximum = lowest id
        y.append(tok)
        if tok == eos:
            return Sequence(x=x, y=tuple(y), terminated=True)


def decode_sample(gm: GuidedModel, x: str, seed, top_p: float = 1.0) -> Sequence:
    seq, _ = gm.sample(x, seed, top_p=top_p)
    return seq


def compose_bayes_baseline(base: TabularBaseModel, classifier_rate: SuccessRate) -> GuidedModel:
    """Product-of-experts contrast: same mechanics, rate trained off-distribution.

    Exists to measure how much a rate estimated on data the base model did not
    produce degrades the composition.
    """
    return GuidedModel(base, classifier_rate, descriptor="bayes-product-baseline")


@dataclass(frozen=True)
class DecodeRecord:
    """One JSON-lines decode record."""

    x: str
    tokens: list[int]
    text: str
    oracle_bit: int
    logprob_base: float
    logprob_guided: float
    step_rows: list[list[float]] | None = None

    def to_json_dict(self) -> dict:
        doc = asdict(self)
        if doc["step_rows"] is None:
            del doc["step_rows"]
        return doc


def decode_records(gm: GuidedModel, oracle, xs: list[str], n_per_x: int, *,
                   strategy: str = "sample", top_p: float = 1.0, seed: int = 0,
                   include_rows: bool = False) -> list[DecodeRecord]:
    """Decode ``n_per_x`` sequences per condition and assemble output records."""
    rng = np.random.default_rng(seed)
    records = []
    for x in xs:
        for _ in range(n_per_x):
            if strategy == "greedy":
                seq = decode_greedy(gm, x)
            elif strategy == "sample":
                seq, _ = gm.sample(x, rng, top_p=top_p)
            else:
                raise InfeasibleGuidanceError(f"unknown decode strategy {strategy!r}")
            rows = None
            if include_rows:
                rows = [[float(v) for v in gm.step_row(x, seq.y[:i])]
                        for i in range(len(seq.y))]
            records.append(DecodeRecord(
                x=x,
                tokens=list(seq.y),
                text=gm.vocab.decode(seq.y),
                oracle_bit=oracle.evaluate(x, seq),
                logprob_base=gm.base.sequence_logprob(x, seq),
                logprob_guided=gm.sequence_logprob(x, seq),
                step_rows=rows,
            ))
    return records
