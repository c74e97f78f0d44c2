"""Counterfactually debiased multi-label text classification.

A label-attention encoder feeds a mixture-of-experts head through three
pathways: the gated score of the full input (z_k), the same head applied to
the demographic tokens alone (z_d), and the ungated expert average (z_e).
All three are trained against the gold labels; at inference the demographic
and uniform-expert contributions are subtracted so that predictions reflect
the note text rather than who the patient is.
"""

from .corpus import (
    Document,
    InputMode,
    LabelSpace,
    SyntheticConfig,
    Vocabulary,
    build_model_input,
    demographic_tokens,
    generate_synthetic,
    load_jsonl,
    save_jsonl,
    synthetic_label_space,
    tokenize,
)
from .errors import (
    ConfigError,
    DimensionError,
    EvaluationError,
    FormatError,
    NumericalError,
    ParseError,
    ValidationError,
)
from .evaluation import (
    BiasAudit,
    Disparity,
    EvalReport,
    InferenceMode,
    bias_audit,
    evaluate,
    f1_scores,
    final_scores,
    final_scores_from_z,
    precision_at_k,
    roc_auc,
    run_ablation,
)
from .model import (
    ForwardTrace,
    ModelParams,
    PathwayScores,
    encode,
    expert_scores,
    forward,
    gate_weights,
    init_params,
    label_attention,
    pathway_zd,
    pathway_ze,
    pathway_zk,
)
from .numerics import (
    GradCheckReport,
    binary_cross_entropy,
    finite_difference_check,
    sigmoid,
    softmax,
)
from .training import (
    Checkpoint,
    TrainConfig,
    load_checkpoint,
    loss_and_grads,
    pathway_predictions,
    save_checkpoint,
    total_loss,
    train,
)

__all__ = [name for name in dir() if not name.startswith("_")]
