"""Desk-scale laboratory for oracle-guided autoregressive sequence generation."""

__version__ = "0.1.0"

from .seqmodel import (  # noqa: F401
    Sequence,
    TabularBaseModel,
    TokenDistribution,
    Vocabulary,
    random_tabular_model,
)
from .oracle import (  # noqa: F401
    DfaOracle,
    FuncOracle,
    LexicalOracle,
    Oracle,
    TrueOracle,
    compile_lexical_to_dfa,
)
from .exact import (  # noqa: F401
    ConstantRate,
    ExactConstrained,
    ExactRate,
    SoftConstrained,
    SoftSpec,
    SuccessRate,
    exact_qstar_seq,
    exact_qstar_token,
    exact_r,
    exact_r_dp,
    soft_qstar_token,
)
from .ratenet import (  # noqa: F401
    MixtureProposal,
    RateNet,
    TrainConfig,
    TrainingExample,
    ce_loss,
    grad_check,
    reg_loss,
    sample_training_set,
    train,
    train_pipeline,
    warmup,
)
from .decode import (  # noqa: F401
    GuidedModel,
    compose_bayes_baseline,
    decode_greedy,
    decode_sample,
    guided_token_dist,
)
from .analysis import (  # noqa: F401
    BoundReport,
    EvalReport,
    PerturbedRate,
    ScaledRate,
    TowerRate,
    bleu_n,
    check_consistent_kl_bound,
    check_kl_bound,
    consistency_residual_profile,
    coverage,
    estimate_delta,
    kl_full,
)
