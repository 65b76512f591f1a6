"""Gated global-attention bottleneck adapter.

The adapter compresses token features ``x`` (N x D) into a d-channel
subspace, mixes tokens there with multi-head self-attention, refines with a
position-wise feed-forward branch, scales the result by a learnable scalar
gate and projects back up onto a residual connection::

    z      = gelu(x W1 + b1)
    z_hat  = Attn(z) W2 + b2
    z_til  = z_hat + FFN(Attn(z_hat))
    x_out  = x + sigmoid(gamma) * z_til W3 + b3

Both ``Attn`` applications share one set of projection weights. With
``attn_on=False`` they become the identity; with ``gate_on=False`` the gate
factor is dropped. The bottleneck projections are always active.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .numerics import DimensionError, Tensor, gelu, matmul, reshape, sigmoid, softmax_rows, transpose

__all__ = [
    "ConfigurationError",
    "AttentionParams",
    "AdapterParams",
    "init_attention",
    "init_adapter",
    "mhsa",
    "g2a_forward",
    "count_params",
]


class ConfigurationError(ValueError):
    """Inconsistent dimensions or component counts."""


@dataclass
class AttentionParams:
    Wq: Tensor
    bq: Tensor
    Wk: Tensor
    Wv: Tensor
    bv: Tensor
    Wo: Tensor
    bo: Tensor
    heads: int

    def tensors(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "heads"}


@dataclass
class AdapterParams:
    W1: Tensor
    b1: Tensor
    attn: AttentionParams
    W2: Tensor
    b2: Tensor
    Wf1: Tensor
    bf1: Tensor
    Wf2: Tensor
    bf2: Tensor
    gamma: Tensor
    W3: Tensor
    b3: Tensor

    @property
    def dim(self) -> int:
        return self.W1.shape[0]

    @property
    def bottleneck(self) -> int:
        return self.W1.shape[1]

    def tensors(self, attn_on: bool = True, gate_on: bool = True) -> dict[str, Tensor]:
        """Learnable tensors used by the given configuration, keyed by name."""
        out = {
            "W1": self.W1,
            "b1": self.b1,
            "W2": self.W2,
            "b2": self.b2,
            "Wf1": self.Wf1,
            "bf1": self.bf1,
            "Wf2": self.Wf2,
            "bf2": self.bf2,
            "W3": self.W3,
            "b3": self.b3,
        }
        if attn_on:
            out.update({f"attn.{k}": v for k, v in self.attn.tensors().items()})
        if gate_on:
            out["gamma"] = self.gamma
        return out


def _dense(rng: np.random.Generator, fan_in: int, fan_out: int, name: str) -> Tensor:
    w = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out))
    return Tensor(w, requires_grad=True, name=name)


def _zeros(shape, name: str) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


def init_attention(d: int, heads: int, rng: np.random.Generator) -> AttentionParams:
    if heads < 1 or d % heads:
        raise ConfigurationError(f"head count {heads} does not divide channel count {d}")
    return AttentionParams(
        Wq=_dense(rng, d, d, "Wq"),
        bq=_zeros(d, "bq"),
        Wk=_dense(rng, d, d, "Wk"),
        Wv=_dense(rng, d, d, "Wv"),
        bv=_zeros(d, "bv"),
        Wo=_dense(rng, d, d, "Wo"),
        bo=_zeros(d, "bo"),
        heads=heads,
    )


def init_adapter(
    D: int,
    d: int | None = None,
    heads: int = 2,
    d_ff: int | None = None,
    rng: np.random.Generator | None = None,
) -> AdapterParams:
    """Fresh adapter whose up-projection is zero, so it starts as the identity.

    Defaults: ``d = D // 8``, ``d_ff = 2 * d``, gate logit 0.
    """
    d = max(1, D // 8) if d is None else d
    d_ff = 2 * d if d_ff is None else d_ff
    if not 0 < d < D:
        raise ConfigurationError(f"bottleneck width must satisfy 0 < d < D, got d={d}, D={D}")
    rng = np.random.default_rng(0) if rng is None else rng
    return AdapterParams(
        W1=_dense(rng, D, d, "W1"),
        b1=_zeros(d, "b1"),
        attn=init_attention(d, heads, rng),
        W2=_dense(rng, d, d, "W2"),
        b2=_zeros(d, "b2"),
        Wf1=_dense(rng, d, d_ff, "Wf1"),
        bf1=_zeros(d_ff, "bf1"),
        Wf2=_dense(rng, d_ff, d, "Wf2"),
        bf2=_zeros(d, "bf2"),
        gamma=_zeros((), "gamma"),
        W3=_zeros((d, D), "W3"),
        b3=_zeros(D, "b3"),
    )


def mhsa(z: Tensor, attn: AttentionParams, heads: int | None = None) -> Tensor:
    """Multi-head scaled dot-product self-attention over the token axis.

    ``z`` has shape (..., N, d). Each head attends with scale
    ``1 / sqrt(d / heads)``; head outputs are concatenated and passed through
    the output projection. Keys carry no bias: it would shift every score
    of a query equally and so never reach the output.
    """
    heads = attn.heads if heads is None else heads
    *lead, n, d = z.shape
    if heads < 1 or d % heads:
        raise ConfigurationError(f"head count {heads} does not divide channel count {d}")
    dh = d // heads
    lead = tuple(lead)

    def split(t: Tensor) -> Tensor:
        # (..., N, d) -> (..., heads, N, dh)
        t = reshape(t, lead + (n, heads, dh))
        axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
        return transpose(t, axes)

    q = split(z @ attn.Wq + attn.bq)
    k = split(z @ attn.Wk)
    v = split(z @ attn.Wv + attn.bv)
    scores = matmul(q, transpose(k)) * (1.0 / math.sqrt(dh))
    mixed = matmul(softmax_rows(scores), v)
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    merged = reshape(transpose(mixed, axes), lead + (n, d))
    return merged @ attn.Wo + attn.bo


def _ffn(t: Tensor, p: AdapterParams) -> Tensor:
    return gelu(t @ p.Wf1 + p.bf1) @ p.Wf2 + p.bf2


def g2a_forward(x: Tensor, p: AdapterParams, attn_on: bool = True, gate_on: bool = True) -> Tensor:
    """Apply the adapter to token features of shape (..., N, D)."""
    if x.shape[-1] != p.W1.shape[0]:
        raise DimensionError(
            f"adapter expects feature width {p.W1.shape[0]}, got input shape {x.shape}"
        )
    z = gelu(x @ p.W1 + p.b1)
    z_hat = (mhsa(z, p.attn) if attn_on else z) @ p.W2 + p.b2
    z_til = z_hat + _ffn(mhsa(z_hat, p.attn) if attn_on else z_hat, p)
    if gate_on:
        z_til = sigmoid(p.gamma) * z_til
    return x + (z_til @ p.W3 + p.b3)


def count_params(p: AdapterParams, attn_on: bool = True, gate_on: bool = True) -> int:
    """Number of learnable scalars in the enabled configuration."""
    return sum(t.size for t in p.tensors(attn_on, gate_on).values())
