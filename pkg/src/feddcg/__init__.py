"""Deterministic desk-scale simulator for federated prompt learning.

Frozen image/text embeddings stand in for a vision-language backbone; a
per-domain prompt network, decoupled global/domain prompts, and
similarity-weighted test-time aggregation are trained and evaluated with
hand-written numpy math, bit-reproducible from a seed.
"""

from .checkpoint import (
    load_bank,
    load_checkpoint,
    load_inference_model,
    load_net,
    save_bank,
    save_checkpoint,
    save_net,
)
from .config import RunConfig, parse_config, serialize_config
from .encoder import TextEncoderStub, encode_text
from .infer import (
    AGGREGATORS,
    InferenceModel,
    PredictionReport,
    build_text_features,
    domain_weights,
    evaluate,
    format_results_table,
    make_inference_model,
    predict_average,
    predict_domain_guided,
    predict_uncertainty,
)
from .model import (
    OptimizerState,
    PromptBank,
    PromptNetParams,
    ce_loss,
    class_scores,
    cosine_lr,
    init_prompt_bank,
    init_prompt_net,
    prompt_net_forward,
    sgd_step,
    softmax_probs,
    stage_a_loss_and_grad,
    stage_b_loss_and_grad,
)
from .protocol import (
    BetaSchedule,
    ClientUpdate,
    RoundState,
    Stage,
    aggregate_group_nets,
    beta_alphas,
    beta_momentum_average,
    domain_wise_aggregate,
    group_by_domain,
    init_round_state,
    local_train_stage_a,
    local_train_stage_b,
    run_round,
)
from .store import (
    ClientPartition,
    EmbeddingStore,
    generate_synthetic,
    load_store,
    manifest_dict,
    partition_clients,
    save_store,
    subset_store,
)

__all__ = [
    "AGGREGATORS",
    "BetaSchedule",
    "ClientPartition",
    "ClientUpdate",
    "EmbeddingStore",
    "InferenceModel",
    "OptimizerState",
    "PredictionReport",
    "PromptBank",
    "PromptNetParams",
    "RoundState",
    "RunConfig",
    "Stage",
    "TextEncoderStub",
    "aggregate_group_nets",
    "beta_alphas",
    "beta_momentum_average",
    "build_text_features",
    "ce_loss",
    "class_scores",
    "cosine_lr",
    "domain_weights",
    "domain_wise_aggregate",
    "encode_text",
    "evaluate",
    "format_results_table",
    "generate_synthetic",
    "group_by_domain",
    "init_prompt_bank",
    "init_prompt_net",
    "init_round_state",
    "load_bank",
    "load_checkpoint",
    "load_inference_model",
    "load_net",
    "load_store",
    "local_train_stage_a",
    "local_train_stage_b",
    "make_inference_model",
    "manifest_dict",
    "parse_config",
    "partition_clients",
    "predict_average",
    "predict_domain_guided",
    "predict_uncertainty",
    "prompt_net_forward",
    "run_round",
    "save_bank",
    "save_checkpoint",
    "save_net",
    "save_store",
    "serialize_config",
    "sgd_step",
    "softmax_probs",
    "stage_a_loss_and_grad",
    "stage_b_loss_and_grad",
    "subset_store",
]
