"""Desk-scale lab for hybrid-attention chain-of-thought action policies."""
from .data import CotRecord, build_dataset, load_records
from .env import default_suite, load_suite, record_expert_demo, reset, step_chunk
from .estimators import CotAnnotator, GrpoFineTuner, HybridCoTPolicy
from .eval import EvalConfig, EvalReport, evaluate, measure_latency, run_ablation_suite
from .model import ModelConfig, PolicySnapshot, build_hybrid_mask, init_snapshot
from .rl import GrpoConfig, RewardConfig, compute_group_advantage, train_rl
from .sft import SftConfig, train_sft
from .vocab import build_vocab

__version__ = "0.1.0"

__all__ = [
    "CotAnnotator",
    "CotRecord",
    "EvalConfig",
    "EvalReport",
    "GrpoConfig",
    "GrpoFineTuner",
    "HybridCoTPolicy",
    "ModelConfig",
    "PolicySnapshot",
    "RewardConfig",
    "SftConfig",
    "build_dataset",
    "build_hybrid_mask",
    "build_vocab",
    "compute_group_advantage",
    "default_suite",
    "evaluate",
    "init_snapshot",
    "load_records",
    "load_suite",
    "record_expert_demo",
    "measure_latency",
    "reset",
    "run_ablation_suite",
    "step_chunk",
    "train_rl",
    "train_sft",
]
