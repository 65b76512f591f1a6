"""Randomized finite-difference checks for every differentiable component.

Each case draws small random shapes (extents <= 6) and parameters, builds a
scalar from the component, and compares reverse-mode gradients with central
differences via :func:`gradient_errors`. Hinge and max operations have
kinks; instances where a hinge argument, a hardest-negative choice or a
best-perspective choice lies within ``KINK_MARGIN`` of switching are redrawn,
since central differences straddling a kink do not estimate a derivative.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .g2a import g2a_forward, init_adapter
from .mpr import aggregate, init_mpr, mpr_forward
from .numerics import Tensor, gradient_errors, l2_normalize
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

__all__ = ["KINK_MARGIN", "CASES", "check_case", "run_suite"]

KINK_MARGIN = 1e-3
MAX_EXTENT = 6

Case = tuple[Callable[[], Tensor], list[Tensor]]


def _param(rng, *shape, scale=0.5) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def _randomize(leaves: list[Tensor], rng: np.random.Generator) -> None:
    # fan-in scaling, as at initialization, keeps most activations out of the
    # saturated GELU/softmax tails
    for t in leaves:
        scale = 1.0 / np.sqrt(t.shape[0]) if t.ndim == 2 else 0.5
        t.data = rng.normal(0.0, scale, size=t.shape)


def _g2a_case(attn_on: bool, gate_on: bool):
    def make(rng: np.random.Generator) -> Case:
        # channel widths >= 2: width-1 attention is rank one and its
        # per-token terms can cancel to below finite-difference resolution
        D = int(rng.integers(3, MAX_EXTENT + 1))
        d = int(rng.integers(2, D))
        heads = int(rng.choice([h for h in range(1, d + 1) if d % h == 0]))
        p = init_adapter(D, d, heads, int(rng.integers(1, MAX_EXTENT + 1)), rng)
        leaves = list(p.tensors(attn_on, gate_on).values())
        _randomize(leaves, rng)
        x = _param(rng, int(rng.integers(1, MAX_EXTENT + 1)), D, scale=1.0)
        w = rng.normal(size=x.shape)
        return (lambda: (g2a_forward(x, p, attn_on, gate_on) * w).sum()), leaves + [x]

    return make


def _mpr_case(rng: np.random.Generator) -> Case:
    K = int(rng.integers(1, MAX_EXTENT + 1))
    # a normalized 1-vector is a constant sign; its only gradient is eps-sized
    D = int(rng.integers(2, MAX_EXTENT + 1))
    p = init_mpr(K, D, int(rng.integers(1, MAX_EXTENT + 1)), rng)
    leaves = list(p.tensors().values())
    _randomize(leaves, rng)
    G_l = _param(rng, K, D, scale=1.0)
    text = rng.normal(size=D)
    return (lambda: (mpr_forward(aggregate(G_l), p) * text).sum()), leaves + [G_l]


def _hinge_clear(S: np.ndarray, margin: float) -> bool:
    B = S.shape[0]
    if B < 2:
        return True
    pos = np.diag(S)
    for M in (S, S.T):
        off = M.copy()
        np.fill_diagonal(off, -np.inf)
        top = np.sort(off, axis=1)
        if B > 2 and np.min(top[:, -1] - top[:, -2]) < KINK_MARGIN:
            return False
        if np.min(np.abs(margin + top[:, -1] - pos)) < KINK_MARGIN:
            return False
    return True


def _max_clear(G_m: np.ndarray, G_t: np.ndarray) -> bool:
    per_k = np.einsum("ikd,jd->ijk", G_m, G_t)
    if per_k.shape[-1] < 2:
        return True
    top = np.sort(per_k, axis=-1)
    return float(np.min(top[..., -1] - top[..., -2])) >= KINK_MARGIN


def _unit(a: np.ndarray) -> np.ndarray:
    return a / (np.linalg.norm(a, axis=-1, keepdims=True) + 1e-8)


def _features(rng, with_perspectives: bool):
    B = int(rng.integers(2, MAX_EXTENT + 1))
    D = int(rng.integers(2, MAX_EXTENT + 1))
    K = int(rng.integers(1, MAX_EXTENT + 1))
    G_v = _param(rng, B, D, scale=1.0)
    G_t = _param(rng, B, D, scale=1.0)
    G_m = _param(rng, B, K, D, scale=1.0) if with_perspectives else None
    return G_v, G_t, G_m


def _info_nce_case(rng) -> Case:
    G_v, G_t, _ = _features(rng, False)
    tau_inv = float(rng.uniform(1.0, 15.0))
    return (lambda: info_nce(similarity_matrix(l2_normalize(G_v), l2_normalize(G_t)), tau_inv)), [G_v, G_t]


def _triplet_case(rng) -> Case | None:
    G_v, G_t, _ = _features(rng, False)
    margin, kappa = float(rng.uniform(0.05, 0.5)), float(rng.uniform(1.0, 10.0))
    if not _hinge_clear(_unit(G_v.data) @ _unit(G_t.data).T, margin):
        return None
    fn = lambda: weighted_triplet(  # noqa: E731
        similarity_matrix(l2_normalize(G_v), l2_normalize(G_t)), margin, kappa
    )
    return fn, [G_v, G_t]


def _mpc_case(rng) -> Case | None:
    _, G_t, G_m = _features(rng, True)
    tau_inv = float(rng.uniform(1.0, 15.0))
    if not _max_clear(_unit(G_m.data), _unit(G_t.data)):
        return None
    return (lambda: mpc_loss(s_max_matrix(l2_normalize(G_m), l2_normalize(G_t)), tau_inv)), [G_m, G_t]


def _mpt_case(rng) -> Case | None:
    _, G_t, G_m = _features(rng, True)
    margin, kappa = float(rng.uniform(0.05, 0.5)), float(rng.uniform(1.0, 10.0))
    Gm, Gt = _unit(G_m.data), _unit(G_t.data)
    if not _max_clear(Gm, Gt) or not _hinge_clear(np.einsum("ikd,jd->ijk", Gm, Gt).max(-1), margin):
        return None
    fn = lambda: mpt_loss(s_max_matrix(l2_normalize(G_m), l2_normalize(G_t)), margin, kappa)  # noqa: E731
    return fn, [G_m, G_t]


def _total_case(rng) -> Case | None:
    G_v, G_t, G_m = _features(rng, True)
    cfg = LossConfig(
        tau_inv=float(rng.uniform(1.0, 15.0)),
        margin=float(rng.uniform(0.05, 0.5)),
        lambda_mpc=float(rng.uniform(0.1, 1.0)),
        lambda_mpt=float(rng.uniform(0.1, 1.0)),
        kappa=float(rng.uniform(1.0, 10.0)),
    )
    Gv, Gt, Gm = _unit(G_v.data), _unit(G_t.data), _unit(G_m.data)
    if not (
        _hinge_clear(Gv @ Gt.T, cfg.margin)
        and _max_clear(Gm, Gt)
        and _hinge_clear(np.einsum("ikd,jd->ijk", Gm, Gt).max(-1), cfg.margin)
    ):
        return None
    fn = lambda: total_loss(BatchFeatures.normalized(G_v, G_t, G_m), cfg).total  # noqa: E731
    return fn, [G_v, G_t, G_m]


CASES: dict[str, Callable[[np.random.Generator], Case | None]] = {
    "g2a_forward[attn=0,gate=0]": _g2a_case(False, False),
    "g2a_forward[attn=1,gate=0]": _g2a_case(True, False),
    "g2a_forward[attn=0,gate=1]": _g2a_case(False, True),
    "g2a_forward[attn=1,gate=1]": _g2a_case(True, True),
    "mpr_forward": _mpr_case,
    "info_nce": _info_nce_case,
    "weighted_triplet": _triplet_case,
    "mpc_loss": _mpc_case,
    "mpt_loss": _mpt_case,
    "total_loss": _total_case,
}


def check_case(name: str, seed: int, h: float = 1e-4) -> float:
    """Worst relative gradient error of one randomized instance of ``name``."""
    rng = np.random.default_rng([seed, sorted(CASES).index(name)])
    case = None
    while case is None:
        case = CASES[name](rng)
    fn, leaves = case
    return max(gradient_errors(fn, leaves, h))


def run_suite(seed: int = 0, n_seeds: int = 100, h: float = 1e-4) -> dict[str, float]:
    """Worst error per component over ``n_seeds`` instances starting at ``seed``."""
    return {name: max(check_case(name, seed + s, h) for s in range(n_seeds)) for name in CASES}
