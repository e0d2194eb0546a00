import itertools

import numpy as np
import pytest

from guidelab.errors import InvalidArgumentError, InvalidPatternError, MissingConditionError
from guidelab.oracle import (
    DfaOracle,
    FuncOracle,
    LexicalOracle,
    TrueOracle,
    compile_lexical_to_dfa,
    contains_pattern,
    dfa_run,
    dfa_step,
)
from guidelab.seqmodel import Sequence, Vocabulary

VOCAB3 = Vocabulary.make(["a", "b"])          # ids: a=0 b=1 eos=2
VOCAB4 = Vocabulary.make(["a", "b", "c"])     # ids: a=0 b=1 c=2 eos=3


def term(x, body, eos_id):
    return Sequence(x, tuple(body) + (eos_id,), True)


class TestLexicalOracle:
    def test_single_keyword(self):
        oracle = LexicalOracle({"x0": [(0,)]})
        assert oracle.evaluate("x0", term("x0", [1, 0, 1], 2)) == 1
        assert oracle.evaluate("x0", term("x0", [1, 1], 2)) == 0

    def test_contiguous_multi_pattern(self):
        oracle = LexicalOracle({"x0": [(0, 1), (2,)]})
        assert oracle.evaluate("x0", term("x0", [2, 0, 1], 3)) == 1
        assert oracle.evaluate("x0", term("x0", [0, 2, 1], 3)) == 0

    def test_requires_terminated(self):
        oracle = LexicalOracle({"x0": [(0,)]})
        with pytest.raises(InvalidArgumentError):
            oracle.evaluate("x0", Sequence("x0", (0, 1), False))

    def test_unknown_condition(self):
        oracle = LexicalOracle({"x0": [(0,)]})
        with pytest.raises(MissingConditionError):
            oracle.evaluate("x9", term("x9", [0], 2))

    def test_empty_patterns_rejected(self):
        with pytest.raises(InvalidPatternError):
            LexicalOracle({"x0": []})
        with pytest.raises(InvalidPatternError):
            LexicalOracle({"x0": [()]})

    def test_deterministic(self):
        oracle = LexicalOracle({"x0": [(0, 0)]})
        seq = term("x0", [0, 1, 0, 0], 2)
        assert oracle.evaluate("x0", seq) == oracle.evaluate("x0", seq) == 1


class TestCompileToDfa:
    def test_single_token_pattern_two_states(self):
        dfa = compile_lexical_to_dfa([(0,)], VOCAB3)
        assert dfa.n_states == 2
        accept = dfa.step(dfa.start, 0)
        assert dfa.accepting[accept]
        assert dfa.step(accept, 1) == accept  # absorbing

    def test_two_patterns_product_size(self):
        dfa = compile_lexical_to_dfa([(0,), (1,)], VOCAB3)
        assert dfa.n_states <= 4

    def test_eos_in_pattern_rejected(self):
        with pytest.raises(InvalidPatternError):
            compile_lexical_to_dfa([(2,)], VOCAB3)
        with pytest.raises(InvalidPatternError):
            compile_lexical_to_dfa([], VOCAB3)

    def test_exhaustive_equivalence_v3(self):
        patterns = [(0, 1), (1,)]
        oracle = LexicalOracle({"x0": patterns})
        dfa = compile_lexical_to_dfa(patterns, VOCAB3)
        for length in range(5):
            for body in itertools.product(VOCAB3.body_ids, repeat=length):
                assert dfa.accepts_body("x0", body) == oracle.accepts_body("x0", body)

    def test_sampled_equivalence_larger_vocab(self):
        vocab = Vocabulary.make([f"t{i}" for i in range(5)])
        patterns = [(0, 1), (3,), (2, 2)]
        oracle = LexicalOracle({"x0": patterns})
        dfa = compile_lexical_to_dfa(patterns, vocab)
        rng = np.random.default_rng(0)
        for _ in range(10_000):
            body = tuple(rng.integers(0, 5, size=rng.integers(0, 9)))
            assert dfa.accepts_body("x0", body) == oracle.accepts_body("x0", body)

    def test_absorbing_accept_monotone(self):
        patterns = [(0,), (1, 1)]
        oracle = LexicalOracle({"x0": patterns})
        rng = np.random.default_rng(1)
        for _ in range(300):
            body = tuple(rng.integers(0, 2, size=rng.integers(0, 7)))
            if oracle.accepts_body("x0", body):
                extension = tuple(rng.integers(0, 2, size=3))
                assert oracle.accepts_body("x0", body + extension)


class TestDfaOps:
    def test_run_empty_is_start(self):
        dfa = compile_lexical_to_dfa([(0,)], VOCAB3)
        assert dfa_run(dfa, ()) == dfa.start

    def test_run_is_fold_of_steps(self):
        dfa = compile_lexical_to_dfa([(0, 1)], VOCAB3)
        assert dfa_run(dfa, (0, 1)) == dfa_step(dfa, dfa_step(dfa, dfa.start, 0), 1)

    def test_out_of_range_rejected(self):
        dfa = compile_lexical_to_dfa([(0,)], VOCAB3)
        with pytest.raises(InvalidArgumentError):
            dfa_step(dfa, 99, 0)
        with pytest.raises(InvalidArgumentError):
            dfa_step(dfa, 0, 99)

    def test_transition_table_total(self):
        dfa = compile_lexical_to_dfa([(0, 1), (1,)], VOCAB3)
        assert dfa.transitions.shape == (dfa.n_states, VOCAB3.size)

    def test_roundtrip(self, tmp_path):
        dfa = compile_lexical_to_dfa([(0, 1)], VOCAB3)
        doc = dfa.to_json_dict()
        loaded = DfaOracle.from_json_dict(doc)
        assert np.array_equal(loaded.transitions, dfa.transitions)
        assert np.array_equal(loaded.accepting, dfa.accepting)


class TestOtherOracles:
    def test_true_oracle(self):
        oracle = TrueOracle()
        assert oracle.evaluate("x0", term("x0", [], 2)) == 1
        dfa = oracle.as_dfa("x0", VOCAB3)
        assert dfa.accepting.all()

    def test_func_oracle(self):
        oracle = FuncOracle(lambda x, body: len(body) >= 2, "min-length-2")
        assert oracle.evaluate("x0", term("x0", [0, 1], 2)) == 1
        assert oracle.evaluate("x0", term("x0", [0], 2)) == 0
        assert oracle.as_dfa("x0", VOCAB3) is None

    def test_contains_pattern_helper(self):
        assert contains_pattern((0, 1, 2), (1, 2))
        assert not contains_pattern((0, 1, 2), (2, 1))


class TestOracleFiles:
    def test_lexical_roundtrip(self, tmp_path):
        oracle = LexicalOracle({"x0": [(0,), (1, 0)], "x1": [(1,)]})
        path = tmp_path / "oracle.json"
        oracle.save(path, VOCAB3)
        loaded = LexicalOracle.load(path, VOCAB3)
        assert loaded.patterns_for("x0") == oracle.patterns_for("x0")
        assert loaded.patterns_for("x1") == oracle.patterns_for("x1")
