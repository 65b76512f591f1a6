"""Contrastive and ranking losses over global and multi-perspective features.

All similarity matrices are indexed ``S[image, text]``. Features are assumed
L2-normalized by the caller (see :meth:`BatchFeatures.normalized`), so dot
products are cosines.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (
    DimensionError,
    Tensor,
    as_tensor,
    l2_normalize,
    log_softmax,
    matmul,
    relu,
    sigmoid,
    stack,
    tmax,
    tmean,
    transpose,
)

__all__ = [
    "LossConfig",
    "BatchFeatures",
    "LossBreakdown",
    "similarity_matrix",
    "s_max_matrix",
    "info_nce",
    "mpc_loss",
    "weighted_triplet",
    "mpt_loss",
    "base_loss",
    "total_loss",
]


@dataclass(frozen=True)
class LossConfig:
    """Loss hyperparameters.

    ``tau_inv`` is the logit scale, i.e. the reciprocal of the temperature
    (0.07 by default). ``kappa`` sharpens the sigmoid hardness weight of the
    triplet terms; ``weighting="constant"`` replaces it with 1.
    """

    tau_inv: float = 1.0 / 0.07
    margin: float = 0.2
    lambda_mpc: float = 0.5
    lambda_mpt: float = 0.5
    kappa: float = 10.0
    weighting: str = "sigmoid"

    def __post_init__(self):
        if self.tau_inv <= 0:
            raise ValueError("tau_inv must be positive")
        if self.margin < 0:
            raise ValueError("margin must be non-negative")
        if self.lambda_mpc < 0 or self.lambda_mpt < 0:
            raise ValueError("loss weights must be non-negative")
        if self.weighting not in ("sigmoid", "constant"):
            raise ValueError(f"unknown weighting {self.weighting!r}")


@dataclass
class BatchFeatures:
    G_v: Tensor  # B x D
    G_t: Tensor  # B x D
    G_m: Tensor  # B x K x D

    def __post_init__(self):
        B, D = self.G_v.shape
        if self.G_t.shape != (B, D) or self.G_m.ndim != 3 or self.G_m.shape[0] != B:
            raise DimensionError(
                f"inconsistent batch shapes {self.G_v.shape}, {self.G_t.shape}, {self.G_m.shape}"
            )
        if self.G_m.shape[2] != D or self.G_m.shape[1] < 1 or B < 1:
            raise DimensionError(f"perspective features must be B x K x {D}, got {self.G_m.shape}")

    @classmethod
    def normalized(cls, G_v, G_t, G_m, eps: float = 1e-8) -> BatchFeatures:
        return cls(l2_normalize(G_v, eps), l2_normalize(G_t, eps), l2_normalize(G_m, eps))


@dataclass
class LossBreakdown:
    total: Tensor
    base: Tensor
    mpc: Tensor
    mpt: Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in ("total", "base", "mpc", "mpt")}


def similarity_matrix(A, C) -> Tensor:
    """``S[i, j] = <A_i, C_j>``."""
    A, C = as_tensor(A), as_tensor(C)
    if A.ndim != 2 or C.ndim != 2 or A.shape[1] != C.shape[1]:
        raise DimensionError(f"similarity needs two row sets of equal width, got {A.shape} and {C.shape}")
    return matmul(A, transpose(C))


def s_max_matrix(G_m, G_t) -> Tensor:
    """``S_max[i, j] = max_k <G_m[i, k], G_t[j]>`` (lowest k wins ties)."""
    G_m, G_t = as_tensor(G_m), as_tensor(G_t)
    if G_m.ndim != 3 or G_t.ndim != 2 or G_m.shape[2] != G_t.shape[1]:
        raise DimensionError(f"s_max needs B x K x D and B x D, got {G_m.shape} and {G_t.shape}")
    # One fixed-shape product per perspective: the BLAS kernel (and so the
    # rounding of each score) must not depend on how many perspectives exist,
    # otherwise adding a dominated perspective could move S_max by an ulp.
    G_tT = transpose(G_t)
    per_k = stack([matmul(G_m[:, k], G_tT) for k in range(G_m.shape[1])], axis=1)  # B x K x B
    return tmax(per_k, axis=1)


def _diag(n: int) -> tuple[np.ndarray, np.ndarray]:
    i = np.arange(n)
    return i, i


def info_nce(S, tau_inv: float) -> Tensor:
    """Symmetric cross-entropy over rows and columns of ``tau_inv * S``."""
    S = as_tensor(S)
    B = S.shape[0]
    logits = S * tau_inv
    rows = log_softmax(logits, axis=1)[_diag(B)]
    cols = log_softmax(logits, axis=0)[_diag(B)]
    return (rows.sum() + cols.sum()) * (-1.0 / (2 * B))


def mpc_loss(S_max, tau_inv: float) -> Tensor:
    """Contrastive loss on the max-over-perspectives similarity matrix."""
    return info_nce(S_max, tau_inv)


def _hardest_off_diagonal(values: np.ndarray) -> np.ndarray:
    """Column index of the largest off-diagonal entry per row, lowest index on ties."""
    masked = values.copy()
    np.fill_diagonal(masked, -np.inf)
    return np.argmax(masked, axis=1)


def weighted_triplet(S, margin: float, kappa: float, weighting: str = "sigmoid") -> Tensor:
    """Hardest-negative hinge loss in both retrieval directions.

    For anchor image ``i`` the negative is the highest-scoring other text in
    row ``i``; for anchor text ``i`` it is the highest-scoring other image in
    column ``i``. Each hinge ``[m + s_neg - s_pos]_+`` is scaled by
    ``sigmoid(kappa * (s_neg - s_pos))`` (or 1 with ``weighting="constant"``);
    the two directions are batch-averaged and summed. A single-pair batch has
    no negatives and gives 0.
    """
    S = as_tensor(S)
    B = S.shape[0]
    if B < 2:
        return S.sum() * 0.0
    idx = np.arange(B)
    pos = S[idx, idx]
    total = None
    for neg in (
        S[idx, _hardest_off_diagonal(S.data)],  # image anchor, negative text
        S[_hardest_off_diagonal(S.data.T), idx],  # text anchor, negative image
    ):
        gap = neg - pos
        term = relu(gap + margin)
        if weighting == "sigmoid":
            term = sigmoid(gap * kappa) * term
        term = tmean(term)
        total = term if total is None else total + term
    return total


def mpt_loss(S_max, margin: float, kappa: float, weighting: str = "sigmoid") -> Tensor:
    """Weighted triplet loss on the max-over-perspectives similarity matrix."""
    return weighted_triplet(S_max, margin, kappa, weighting)


def base_loss(S, cfg: LossConfig) -> Tensor:
    return info_nce(S, cfg.tau_inv) + weighted_triplet(S, cfg.margin, cfg.kappa, cfg.weighting)


def total_loss(batch: BatchFeatures, cfg: LossConfig) -> LossBreakdown:
    """Global loss plus weighted multi-perspective contrastive and triplet terms.

    Terms whose weight is zero are still reported, but only the non-zero
    ones enter the graph of ``total``; with both weights zero the total is
    the base loss itself.
    """
    S = similarity_matrix(batch.G_v, batch.G_t)
    S_max = s_max_matrix(batch.G_m, batch.G_t)
    base = base_loss(S, cfg)
    mpc = mpc_loss(S_max, cfg.tau_inv)
    mpt = mpt_loss(S_max, cfg.margin, cfg.kappa, cfg.weighting)
    total = base
    if cfg.lambda_mpc:
        total = total + mpc * cfg.lambda_mpc
    if cfg.lambda_mpt:
        total = total + mpt * cfg.lambda_mpt
    return LossBreakdown(total=total, base=base, mpc=mpc, mpt=mpt)
