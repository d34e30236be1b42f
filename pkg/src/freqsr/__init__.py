"""Symbolic regression with a frequency-domain attention policy.

Expressions are grown breadth first by a small decoder whose attention runs
on DCT-compressed sequence embeddings. Constants are fitted by
Levenberg-Marquardt, candidates are scored with a BIC reward, and the policy
is updated with rank-mapped weights and a clipped surrogate.
"""

from .bench import Dataset, add_noise, load_csv, make_dataset, r2_score, solution_check, tail_barrier_stats
from .config import ExperimentConfig, load_config
from .const_opt import LMConfig, fit_constants
from .expr import (
    Expression,
    ExprTree,
    TokenLibrary,
    complexity,
    dpe_encode,
    evaluate,
    numeric_equiv,
    parse_infix,
    to_infix,
)
from .model import ModelConfig, init_params, predict_next
from .policy import PolicyConfig, train
from .rewards import bic_reward, nrmse_reward, rank_map, spl_reward, tpsr_reward
from .sampler import MaskRules, SampleConfig, sample_batch

__version__ = "0.1.0"
