"""Multi-perspective image-text retrieval with gated attention adapters.

A numpy implementation of a parameter-efficient retrieval model: frozen
encoder stubs with bottleneck attention adapters, a multi-perspective
representation head, contrastive and weighted triplet objectives over the
best-matching perspective, and a recall@K evaluation harness.
"""

from .backbone import DESK_CORPUS, Corpus, encode, gen_corpus, init_stub, load_features, save_features
from .g2a import AdapterParams, ConfigurationError, count_params, g2a_forward, init_adapter, mhsa
from .mpr import MprParams, aggregate, init_mpr, mpr_forward
from .numerics import DimensionError, NumericError, ShapeError, Tensor, finite_diff_check, grad, no_grad
from .objectives import (
    BatchFeatures,
    LossConfig,
    info_nce,
    mpc_loss,
    mpt_loss,
    s_max_matrix,
    similarity_matrix,
    total_loss,
    weighted_triplet,
)
from .retrieval import RetrievalReport, brute_force_oracle, compute_report, mean_recall
from .trainer import TrainConfig, ablate, evaluate, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
