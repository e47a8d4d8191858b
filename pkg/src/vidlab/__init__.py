"""Desk-scale video diffusion transformer with two-stage low-rank
personalization, trained and evaluated on procedural moving-shape clips."""

from .backbone import DiT, DiTConfig, PromptSeq, patchify, rope3d, attention, self_condition
from .flow import FlowState, SamplerConfig, interpolate, flow_loss, cfg_velocity, sample
from .lora import (
    AdapterBundle, DropoutSpec, LoraLayer, compose, dropout_b, freeze_identity,
    load_adapter, lora_apply, lora_init, save_adapter,
)
from .numerics import AdamWState, NumericFailure, adamw_step, clip_grad_norm, grad
from .pipeline import (
    ConceptPrompt, TrainPlan, build_prompts, mask_tokens, personalize,
    pretrain_base, sample_frame_set, stage1_train, stage2_train, stitch,
)
from .synthworld import (
    ConceptSpec, EvalReport, eval_mse, eval_tc, oracle_edit_adherence,
    oracle_identity, oracle_motion, render,
)

__version__ = "0.1.0"
