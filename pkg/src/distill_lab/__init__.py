"""Desk-scale knowledge-distillation laboratory with exactly known teachers."""

from .numerics import (
    CategoricalDist,
    DivergenceReport,
    entropy,
    jsd_beta,
    k1_mc,
    kl_exact,
    softmax,
)
from .model import (
    GradAccumulator,
    TabularLM,
    Vocab,
    accumulate_token_grad,
    checkpoint_load,
    checkpoint_save,
    pad_context,
    sgd_step,
)
from .objectives import (
    HPDWeights,
    ObjectiveKind,
    hpd_k1,
    hpd_weights,
    opd_rewards,
    weight_fkld_token,
    weight_jsd_off,
    weight_rkld_off,
    weight_rkld_on,
    weight_sft,
    weights_fkld_dense,
)
from .data import (
    Corpus,
    MarkovSource,
    build_source,
    corpus_read,
    corpus_write,
    generate_seqkd_corpus,
    sample_corpus,
)
from .training import (
    MetricsRow,
    ModelTeacher,
    OracleTeacher,
    Stage,
    TrainConfig,
    distill_offpolicy,
    distill_onpolicy_opd,
    make_teacher,
    run_experiment,
    train_teacher_mle,
)
from .evaluation import (
    EntropyProfile,
    completion_accuracy,
    divergence_audit,
    gradcheck,
    k1_study,
    make_completion_tasks,
    positional_entropy,
)

__version__ = "0.1.0"
