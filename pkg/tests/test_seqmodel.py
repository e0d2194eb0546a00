import json
import math

import numpy as np
import pytest
from scipy import stats

from guidelab.errors import (
    InvalidArgumentError,
    InvalidStateError,
    MissingConditionError,
    TooLargeSpaceError,
)
from guidelab.seqmodel import (
    Sequence,
    TabularBaseModel,
    TokenDistribution,
    Vocabulary,
    nucleus_mask,
    random_tabular_model,
    tempered_row,
)


def make_order0(row, l_max=6, v_names=None):
    v = len(row)
    vocab = Vocabulary.make(v_names or [f"t{i}" for i in range(v - 1)])
    return TabularBaseModel(vocab, 0, l_max, {"x0": {(): np.array(row, dtype=float)}})


class TestTypes:
    def test_vocabulary_basics(self):
        vocab = Vocabulary.make(["a", "b"])
        assert vocab.size == 3
        assert vocab.eos_id == 2
        assert vocab.body_ids == (0, 1)
        assert vocab.id_of("b") == 1

    def test_vocabulary_rejects_bad_eos(self):
        with pytest.raises(InvalidArgumentError):
            Vocabulary(("a", "b"), eos_id=5)

    def test_token_distribution_invariants(self):
        TokenDistribution([0.25, 0.75])
        with pytest.raises(InvalidArgumentError):
            TokenDistribution([0.5, 0.6])
        with pytest.raises(InvalidArgumentError):
            TokenDistribution([-0.1, 1.1])

    def test_sequence_validation(self):
        vocab = Vocabulary.make(["a"])
        Sequence("x0", (0, 1), True).validate(vocab)
        with pytest.raises(InvalidStateError):
            Sequence("x0", (0, 0), True).validate(vocab)  # no EOS at end
        with pytest.raises(InvalidStateError):
            Sequence("x0", (1, 0, 1), True).validate(vocab)  # EOS twice
        with pytest.raises(InvalidStateError):
            Sequence("x0", (0,) * 9, False).validate(vocab, l_max=4)


class TestNextTokenDist:
    def test_uniform_two_tokens(self):
        model = make_order0([0.5, 0.5])
        assert np.allclose(model.next_token_dist("x0", ()).probs, [0.5, 0.5])
        assert np.allclose(model.next_token_dist("x0", (0,)).probs, [0.5, 0.5])

    def test_order0_lookup(self):
        model = make_order0([0.2, 0.8])
        assert np.allclose(model.next_token_dist("x0", ()).probs, [0.2, 0.8])

    def test_order1_matches_stored_row(self):
        model = random_tabular_model(seed=7, v=3, k=1, l_max=5, eos_floor=0.2)
        got = model.next_token_dist("x0", (0,)).probs
        assert np.array_equal(got, model.table_row("x0", (0,)))

    def test_horizon_forces_eos(self):
        model = make_order0([0.5, 0.5], l_max=3)
        row = model.next_token_dist("x0", (0, 0)).probs
        assert row[model.vocab.eos_id] == 1.0

    def test_errors(self):
        model = make_order0([0.5, 0.5], l_max=3)
        with pytest.raises(MissingConditionError):
            model.next_token_dist("nope", ())
        with pytest.raises(InvalidStateError):
            model.next_token_dist("x0", (0, 1))  # contains EOS
        with pytest.raises(InvalidStateError):
            model.next_token_dist("x0", (0, 0, 0))

    def test_closure_check_rejects_missing_window(self):
        vocab = Vocabulary.make(["a", "b"])
        row = np.array([0.4, 0.4, 0.2])
        with pytest.raises(InvalidArgumentError):
            TabularBaseModel(vocab, 1, 4, {"x0": {(): row, (0,): row}})  # (1,) missing


class TestSequenceLogprob:
    def test_uniform_length_two(self):
        model = make_order0([0.5, 0.5], l_max=6)
        seq = Sequence("x0", (0, 1), True)
        assert model.sequence_logprob("x0", seq) == pytest.approx(math.log(0.25), abs=1e-12)

    def test_zero_step_gives_neg_inf(self):
        model = make_order0([1.0, 0.0, 0.0], l_max=6)  # never emits t1 or EOS freely
        seq = Sequence("x0", (1, 2), True)
        assert model.sequence_logprob("x0", seq) == float("-inf")

    def test_matches_manual_product(self):
        model = random_tabular_model(seed=13, v=3, k=1, l_max=6, eos_floor=0.2)
        seq = Sequence("x0", (0, 1, 2), True)
        expected = (math.log(model.table_row("x0", ())[0])
                    + math.log(model.table_row("x0", (0,))[1])
                    + math.log(model.table_row("x0", (1,))[2]))
        assert model.sequence_logprob("x0", seq) == pytest.approx(expected, abs=1e-12)

    def test_requires_terminated(self):
        model = make_order0([0.5, 0.5])
        with pytest.raises(InvalidArgumentError):
            model.sequence_logprob("x0", Sequence("x0", (0,), False))


class TestSampling:
    def test_unbiased_chi_square(self):
        model = random_tabular_model(seed=3, v=3, k=1, l_max=4, eos_floor=0.25)
        expected = {seq.y: p for seq, p in model.enumerate_sequences("x0")}
        rng = np.random.default_rng(123)
        counts = {}
        n = 100_000
        for _ in range(n):
            seq, _ = model.sample_sequence("x0", rng)
            counts[seq.y] = counts.get(seq.y, 0) + 1
        # pool cells with small expected counts, then goodness-of-fit at 0.001
        obs, exp = [], []
        pool_obs = pool_exp = 0.0
        for y, p in sorted(expected.items()):
            e = p * n
            if e < 5.0:
                pool_obs += counts.get(y, 0)
                pool_exp += e
            else:
                obs.append(counts.get(y, 0))
                exp.append(e)
        if pool_exp > 0:
            obs.append(pool_obs)
            exp.append(pool_exp)
        _, pvalue = stats.chisquare(obs, exp)
        assert pvalue > 0.001

    def test_returned_logprob_is_model_logprob(self):
        model = random_tabular_model(seed=3, v=3, k=1, l_max=4, eos_floor=0.25)
        rng = np.random.default_rng(5)
        for _ in range(50):
            seq, lp = model.sample_sequence("x0", rng, temperature=1.7, top_p=0.9)
            assert lp == pytest.approx(model.sequence_logprob("x0", seq), abs=1e-12)

    def test_temperature_flattens(self):
        row = np.array([0.9, 0.1])
        flat = tempered_row(row, 1e6)
        assert np.allclose(flat, [0.5, 0.5], atol=1e-5)
        model = make_order0([0.9, 0.05, 0.05], l_max=3)
        rng = np.random.default_rng(11)
        firsts = [model.sample_sequence("x0", rng, temperature=100.0)[0].y[0]
                  for _ in range(4000)]
        freq0 = firsts.count(0) / len(firsts)
        assert abs(freq0 - 1 / 3) < 0.03  # flattened toward uniform over 3 tokens

    def test_nucleus_mask_by_hand(self):
        mask = nucleus_mask(np.array([0.5, 0.3, 0.2]), 0.8)
        assert mask.tolist() == [True, True, False]

    def test_top_p_excludes_tail_token(self):
        model = make_order0([0.5, 0.3, 0.2], l_max=4, v_names=["t0", "t1"])
        rng = np.random.default_rng(2)
        for _ in range(2000):
            seq, _ = model.sample_sequence("x0", rng, top_p=0.8)
            # EOS (prob 0.2) is outside the nucleus: only the forced final step emits it
            assert len(seq.y) == 4
            assert all(tok != model.vocab.eos_id for tok in seq.y[:-1])

    def test_rejects_bad_parameters(self):
        model = make_order0([0.5, 0.5])
        with pytest.raises(InvalidArgumentError):
            model.sample_sequence("x0", 0, temperature=0.0)
        with pytest.raises(InvalidArgumentError):
            model.sample_sequence("x0", 0, top_p=0.0)


class TestEnumeration:
    def test_uniform_two_sequences(self):
        model = make_order0([0.5, 0.5], l_max=2)
        seqs = {s.y: p for s, p in model.enumerate_sequences("x0")}
        assert seqs == {(1,): 0.5, (0, 1): 0.5}

    def test_immediate_eos(self):
        model = make_order0([0.0, 1.0], l_max=5)
        seqs = list(model.enumerate_sequences("x0"))
        assert len(seqs) == 1
        assert seqs[0][0].y == (1,)
        assert seqs[0][1] == 1.0

    def test_mass_sums_to_one(self):
        model = random_tabular_model(seed=3, v=4, k=1, l_max=6, eos_floor=0.1)
        total = sum(p for _, p in model.enumerate_sequences("x0"))
        assert total == pytest.approx(1.0, abs=1e-9)

    def test_logprob_agrees_with_enumeration(self):
        model = random_tabular_model(seed=17, v=3, k=1, l_max=5, eos_floor=0.2)
        for seq, p in model.enumerate_sequences("x0"):
            assert math.exp(model.sequence_logprob("x0", seq)) == pytest.approx(p, abs=1e-9)

    def test_guard_raises(self):
        model = random_tabular_model(seed=1, v=5, k=0, l_max=10, eos_floor=0.05)
        with pytest.raises(TooLargeSpaceError):
            list(model.enumerate_sequences("x0", guard=50))


class TestRandomModel:
    def test_deterministic_in_seed(self):
        a = random_tabular_model(seed=11, v=4, k=1, l_max=5, eos_floor=0.1)
        b = random_tabular_model(seed=11, v=4, k=1, l_max=5, eos_floor=0.1)
        assert a.to_json_dict() == b.to_json_dict()

    def test_eos_floor_one_means_empty_bodies(self):
        model = random_tabular_model(seed=2, v=4, k=1, l_max=5, eos_floor=1.0)
        seqs = list(model.enumerate_sequences("x0"))
        assert len(seqs) == 1
        assert seqs[0][0].y == (model.vocab.eos_id,)

    def test_rows_are_valid_distributions(self):
        model = random_tabular_model(seed=11, v=4, k=1, l_max=5, eos_floor=0.1)
        for window in [()] + [(t,) for t in model.vocab.body_ids]:
            row = model.table_row("x0", window)
            TokenDistribution(row)
            assert row[model.vocab.eos_id] >= 0.1 - 1e-12


class TestPersistence:
    def test_roundtrip(self, tmp_path):
        model = random_tabular_model(seed=23, v=4, k=1, l_max=5, eos_floor=0.15)
        path = tmp_path / "model.json"
        model.save(path)
        loaded = TabularBaseModel.load(path)
        assert loaded.to_json_dict() == model.to_json_dict()
        assert np.array_equal(loaded.table_row("x0", (1,)), model.table_row("x0", (1,)))

    def test_probabilities_serialized_with_full_precision(self, tmp_path):
        model = random_tabular_model(seed=23, v=3, k=0, l_max=4, eos_floor=0.15)
        path = tmp_path / "model.json"
        model.save(path)
        doc = json.loads(path.read_text())
        for entry in doc["rows"]:
            for text, value in zip(entry["probs"], model.table_row(entry["x"], tuple(entry["window"]))):
                assert float(text) == value  # 17 significant digits round-trip exactly
