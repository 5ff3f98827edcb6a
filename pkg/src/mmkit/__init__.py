"""Desk-scale multimodal transformer kit.

A self-verifying implementation of modality-routed low-rank adaptation and a
query-ladder visual adapter over frozen backbones: float64 tensors with tape
autodiff, a finite-difference oracle, a two-stage trainer on synthetic
color-grid tasks, and sweep/audit/export tooling.
"""

from .checkpoint import load_checkpoint, restore_into, save_checkpoint
from .config import DEFAULT_CONFIG, ExperimentConfig, config_from_dict, load_config
from .data import SyntheticSample, TokenVocab, gen_sample
from .decoder import AttentionRecord, DecoderConfig, MMDecoder, attention_mass, generate_greedy, inject_mmlora
from .errors import (
    ConfigError,
    ContractError,
    EmptyLossError,
    EmptySequenceError,
    NumericError,
    ShapeError,
)
from .gradcheck import GradCheckReport, finite_diff_check
from .lora import MMLoRAConfig, MMLoRALayer, PlainLoRALayer, create_mmlora, create_plain_lora, plain_lora_forward
from .routing import (
    LANGUAGE,
    VISUAL,
    ModalityMask,
    MultimodalSequence,
    build_mask,
    masked_add,
    split,
    theta,
)
from .tensor import (
    ComputationTape,
    Tensor,
    active_tape,
    add,
    add_bias,
    backward,
    causal_shift,
    concat_cols,
    concat_rows,
    content_hash,
    embedding_rows,
    gaussian,
    gelu,
    layer_norm_rows,
    masked_cross_entropy,
    matmul,
    mul,
    no_grad,
    scale,
    sin,
    slice_cols,
    slice_rows,
    softmax_rows,
    sub,
    sum_all,
    transpose,
    zeros,
)
from .training import AdamW, MultimodalLM, StageConfig, evaluate, masked_ce_loss, run_stage
from .vision import FrozenEncoder, QLadder, TowerConfig, VLAdapter, VisualTower, fuse
from .experiment import (
    build_model,
    run_attn_export,
    run_grad_check,
    run_param_audit,
    run_query_ablation,
    run_rank_ablation,
    run_training,
    with_updates,
)

__version__ = "0.1.0"
