import numpy as np
import pytest

from guidelab.exact import ExactRate
from guidelab.oracle import LexicalOracle
from guidelab.seqmodel import TabularBaseModel, Vocabulary


@pytest.fixture
def two_body():
    """Uniform model over {a, b} emitting exactly two body tokens, then EOS.

    Four equally likely bodies; the "contains a" oracle accepts three of them,
    so the base success rate is 3/4.
    """
    vocab = Vocabulary.make(["a", "b"])
    row = np.array([0.5, 0.5, 0.0])
    base = TabularBaseModel(vocab, order=1, l_max=3,
                            table={"x0": {(): row, (0,): row, (1,): row}})
    oracle = LexicalOracle({"x0": [(0,)]})
    return base, oracle


@pytest.fixture
def two_body_exact(two_body):
    base, oracle = two_body
    return base, oracle, ExactRate(base, oracle)
