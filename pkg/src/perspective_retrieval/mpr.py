"""Multi-perspective representation head.

Sub-perspective features are averaged into one local summary, which K
independent two-layer MLP heads (Linear, GELU, optional Dropout, Linear)
fan back out into K unit-length perspective embeddings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import Tensor, dropout, gelu, l2_normalize, reshape, stack, tmean

__all__ = ["MprHead", "MprParams", "init_mpr", "aggregate", "mpr_forward"]


@dataclass
class MprHead:
    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor

    def tensors(self) -> dict[str, Tensor]:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}


@dataclass
class MprParams:
    heads: list[MprHead]
    eps: float = 1e-8
    dropout_rate: float = 0.0

    def __post_init__(self):
        if not self.heads:
            raise ValueError("MPR needs at least one head")
        if self.eps <= 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if not 0.0 <= self.dropout_rate <= 0.5:
            raise ValueError(f"dropout_rate must lie in [0, 0.5], got {self.dropout_rate}")

    @property
    def K(self) -> int:
        return len(self.heads)

    def tensors(self) -> dict[str, Tensor]:
        return {f"h{k}.{n}": t for k, h in enumerate(self.heads) for n, t in h.tensors().items()}


def init_mpr(
    K: int,
    D: int,
    hidden: int | None = None,
    rng: np.random.Generator | None = None,
    eps: float = 1e-8,
    dropout_rate: float = 0.0,
) -> MprParams:
    """K heads with independent random weights; hidden width defaults to D."""
    hidden = D if hidden is None else hidden
    rng = np.random.default_rng(0) if rng is None else rng
    heads = []
    for k in range(K):
        heads.append(
            MprHead(
                W1=Tensor(rng.normal(0, 1 / math.sqrt(D), (D, hidden)), True, f"h{k}.W1"),
                b1=Tensor(np.zeros(hidden), True, f"h{k}.b1"),
                W2=Tensor(rng.normal(0, 1 / math.sqrt(hidden), (hidden, D)), True, f"h{k}.W2"),
                b2=Tensor(np.zeros(D), True, f"h{k}.b2"),
            )
        )
    return MprParams(heads, eps=eps, dropout_rate=dropout_rate)


def aggregate(G_l: Tensor) -> Tensor:
    """Mean over the perspective axis: (..., K, D) -> (..., D)."""
    if G_l.ndim < 2 or G_l.shape[-2] == 0:
        raise ValueError(f"need at least one perspective row, got shape {G_l.shape}")
    return tmean(G_l, axis=G_l.ndim - 2)


def mpr_forward(
    e: Tensor,
    p: MprParams,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Map summaries (..., D) to normalized perspectives (..., K, D).

    Dropout between the two layers is only active when ``training`` is set
    and ``p.dropout_rate > 0``.
    """
    single = e.ndim == 1
    if single:
        e = reshape(e, (1, e.shape[0]))
    rows = []
    for head in p.heads:
        hidden = gelu(e @ head.W1 + head.b1)
        hidden = dropout(hidden, p.dropout_rate, rng, training)
        rows.append(l2_normalize(hidden @ head.W2 + head.b2, eps=p.eps))
    out = stack(rows, axis=e.ndim - 1)
    if single:
        out = reshape(out, out.shape[1:])
    return out
