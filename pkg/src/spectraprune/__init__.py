"""Spectral shape metrics of weight matrices and layer-wise compression budgets."""

from .allocation import (
    BudgetPlan,
    SparsityPlan,
    allocate_bits,
    allocate_mixed,
    allocate_nm,
    allocate_ranks,
    allocate_sparsity,
    expand_to_matrices,
    min_sparsity_endpoints,
    plan_from_analysis,
)
from .compression import CompressionReport, PruneMask, apply_plan, lra_truncate, magnitude_prune, nm_prune, rtn_quantize
from .metrics import Analysis, BlockQuality, MatrixMetrics, alpha_hat, analyze_model, entropy, scale_norms, stable_rank
from .spectral import ESD, PLFit, compute_esd, fix_finger_threshold, hill_alpha, pl_alpha_hill
from .synthlab import correlation_experiment, lra_strategy_experiment, sample_pareto_esd
from .tensorio import BlockGrouping, GroupingRules, Tensor, WeightStore, group_blocks, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
