"""Numerical verification suite: closed forms, identities, and KL bounds.

Each check runs over deterministic random fixtures and reports pass/fail with
the worst observed deviation.  On failure the offending fixture is serialized
into the report so it can be replayed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .analysis import (
    PerturbedRate,
    check_consistent_kl_bound,
    check_kl_bound,
    kl_full,
    support_prefixes,
)
from .decode import GuidedModel, decode_sample
from .exact import ExactConstrained, ExactRate, SoftSpec, exact_qstar_seq, exact_qstar_token, soft_qstar_token
from .fixtures import Fixture, random_lexical_fixture

TOL_IDENTITY = 1e-9
TOL_SAME_ARITHMETIC = 1e-12


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst: float
    detail: str = ""
    fixture: dict | None = None

    def to_json_dict(self) -> dict:
        doc = {"name": self.name, "passed": self.passed, "worst": self.worst,
               "detail": self.detail}
        if self.fixture is not None:
            doc["fixture"] = self.fixture
        return doc


@dataclass
class VerifyReport:
    checks: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_json_dict(self) -> dict:
        return {"passed": self.passed, "checks": [c.to_json_dict() for c in self.checks]}


def _fixture_doc(fx: Fixture) -> dict:
    return {"descriptor": fx.descriptor, "model": fx.base.to_json_dict(),
            "oracle": fx.oracle.to_json_dict(fx.base.vocab)}


def _run_over_fixtures(name, fixtures, fn, tol) -> CheckResult:
    worst = 0.0
    for fx in fixtures:
        try:
            deviation = fn(fx)
        except Exception as exc:  # surface the fixture that broke the check
            return CheckResult(name, False, math.inf, f"{type(exc).__name__}: {exc}",
                               _fixture_doc(fx))
        if deviation > worst:
            worst = deviation
        if deviation > tol:
            return CheckResult(name, False, worst, f"deviation {deviation:.3e} > {tol:.0e}",
                               _fixture_doc(fx))
    return CheckResult(name, True, worst)


def run_verification(n_fixtures: int = 10, n_perturbations: int = 5, n_tower: int = 3,
                     seed: int = 0) -> VerifyReport:
    fixtures = [random_lexical_fixture(seed + 31 * i) for i in range(n_fixtures)]
    report = VerifyReport()

    def enumeration_mass(fx: Fixture) -> float:
        total = sum(p for _, p in fx.base.enumerate_sequences(fx.x))
        return abs(total - 1.0)

    def logprob_matches_enum(fx: Fixture) -> float:
        worst = 0.0
        for seq, p in fx.base.enumerate_sequences(fx.x):
            worst = max(worst, abs(math.exp(fx.base.sequence_logprob(fx.x, seq)) - p))
        return worst

    def dp_equals_enumeration(fx: Fixture) -> float:
        er_dp = fx.exact("dp")
        er_en = fx.exact("enumeration")
        worst = abs(er_dp.value(fx.x, ()) - er_en.value(fx.x, ()))
        rng = np.random.default_rng(7)
        for seq, _ in fx.base.enumerate_sequences(fx.x):
            if rng.random() < 0.2:
                pfx = seq.y[:max(1, len(seq.y) // 2)]
                if pfx and pfx[-1] == fx.base.vocab.eos_id:
                    pfx = pfx[:-1]
                worst = max(worst, abs(er_dp.value(fx.x, pfx) - er_en.value(fx.x, pfx)))
        return worst

    def closed_form_chaining(fx: Fixture) -> float:
        er = fx.exact()
        worst = 0.0
        for seq, _ in fx.base.enumerate_sequences(fx.x):
            direct = exact_qstar_seq(er, fx.x, seq)
            if not fx.oracle.evaluate(fx.x, seq):
                worst = max(worst, abs(direct))
                continue
            chained = 1.0
            for i, tok in enumerate(seq.y):
                chained *= exact_qstar_token(er, fx.x, seq.y[:i])[tok]
            worst = max(worst, abs(chained - direct))
        return worst

    def rows_self_normalize(fx: Fixture) -> float:
        er = fx.exact()
        worst = 0.0
        for prefix, terminated in support_prefixes(er, fx.x):
            if terminated:
                continue
            worst = max(worst, abs(float(exact_qstar_token(er, fx.x, prefix).probs.sum()) - 1.0))
        return worst

    def consistency_identity(fx: Fixture) -> float:
        er = fx.exact()
        worst = 0.0
        for prefix, terminated in support_prefixes(er, fx.x):
            if terminated:
                continue
            row = fx.base.row(fx.x, prefix)
            worst = max(worst, abs(float(np.dot(er.scores(fx.x, prefix), row)) - er.value(fx.x, prefix)))
        return worst

    def guided_matches_closed_form(fx: Fixture) -> float:
        er = fx.exact()
        gm = GuidedModel(fx.base, er)
        worst = 0.0
        for prefix, terminated in support_prefixes(er, fx.x):
            if terminated:
                continue
            tv = 0.5 * float(np.abs(gm.step_row(fx.x, prefix)
                                    - exact_qstar_token(er, fx.x, prefix).probs).sum())
            z_err = abs(gm.step_normalizer(fx.x, prefix) - 1.0)
            worst = max(worst, tv, z_err)
        return worst

    def kl_self_is_zero(fx: Fixture) -> float:
        return abs(kl_full(fx.base, fx.base, fx.x))

    def soft_target_mass(fx: Fixture) -> float:
        er = fx.exact()
        worst = 0.0
        for r in (0.25, 0.5, 0.9):
            spec = SoftSpec(r)
            mass = 0.0

            def walk(pfx, prob):
                nonlocal mass
                row = soft_qstar_token(er, fx.x, pfx, spec).probs
                eos = fx.base.vocab.eos_id
                for tok in range(len(row)):
                    if row[tok] <= 0.0:
                        continue
                    if tok == eos:
                        if fx.oracle.accepts_body(fx.x, pfx):
                            mass += prob * row[tok]
                    else:
                        walk(pfx + (tok,), prob * row[tok])

            walk((), 1.0)
            worst = max(worst, abs(mass - r))
        return worst

    def ratio_bounds_hold(fx: Fixture) -> float:
        er = fx.exact()
        for j in range(n_perturbations):
            rep = check_kl_bound(PerturbedRate(er, delta=2.0, seed=1000 + j), er, fx.x)
            if not rep.holds:
                return math.inf
        return 0.0

    def tower_bounds_hold(fx: Fixture) -> float:
        worst = 0.0
        for j in range(n_tower):
            gamma = 0.2 + 0.2 * j
            rep = check_consistent_kl_bound(
                lambda x, body, g=gamma: max(float(fx.oracle.accepts_body(x, body)), g),
                fx.base, fx.oracle, fx.x)
            if not rep.holds:
                return math.inf
            worst = max(worst, rep.max_consistency_residual)
        return worst

    def exact_decode_covers(fx: Fixture) -> float:
        er = fx.exact()
        gm = GuidedModel(fx.base, er)
        misses = 0
        for j in range(40):
            seq = decode_sample(gm, fx.x, seed + 997 * j)
            misses += 1 - fx.oracle.evaluate(fx.x, seq)
        return float(misses)

    report.checks.append(_run_over_fixtures(
        "enumeration-mass", fixtures, enumeration_mass, TOL_IDENTITY))
    report.checks.append(_run_over_fixtures(
        "logprob-matches-enumeration", fixtures, logprob_matches_enum, TOL_IDENTITY))
    report.checks.append(_run_over_fixtures(
        "dp-equals-enumeration", fixtures, dp_equals_enumeration, TOL_SAME_ARITHMETIC))
    report.checks.append(_run_over_fixtures(
        "closed-form-chaining", fixtures, closed_form_chaining, TOL_IDENTITY))
    report.checks.append(_run_over_fixtures(
        "token-rows-self-normalize", fixtures, rows_self_normalize, TOL_IDENTITY))
    report.checks.append(_run_over_fixtures(
        "consistency-identity", fixtures, consistency_identity, TOL_IDENTITY))
    report.checks.append(_run_over_fixtures(
        "guided-matches-closed-form", fixtures, guided_matches_closed_form, TOL_IDENTITY))
    report.checks.append(_run_over_fixtures(
        "kl-self-zero", fixtures, kl_self_is_zero, TOL_SAME_ARITHMETIC))
    report.checks.append(_run_over_fixtures(
        "soft-constraint-mass", fixtures, soft_target_mass, TOL_IDENTITY))
    report.checks.append(_run_over_fixtures(
        "kl-bound-perturbed", fixtures, ratio_bounds_hold, 0.5))
    report.checks.append(_run_over_fixtures(
        "kl-bound-consistent", fixtures, tower_bounds_hold, TOL_SAME_ARITHMETIC))
    report.checks.append(_run_over_fixtures(
        "exact-guided-coverage", fixtures, exact_decode_covers, 0.5))
    return report
