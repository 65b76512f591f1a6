"""Multiple perspectives per image and the losses built on them.

Run with ``python demos/02_perspectives_and_losses.py``.
"""

import numpy as np

from perspective_retrieval import (
    BatchFeatures,
    LossConfig,
    Tensor,
    aggregate,
    init_mpr,
    mpr_forward,
    s_max_matrix,
    total_loss,
)
from perspective_retrieval.numerics import l2_normalize

rng = np.random.default_rng(1)
B, K, D = 4, 3, 16

# Each image arrives with K sub-perspective embeddings. Their mean is fed
# to K independent heads, each producing one unit-length perspective.
sub = Tensor(rng.normal(size=(B, K, D)))
mpr = init_mpr(K, D, rng=rng)
G_m = mpr_forward(aggregate(sub), mpr)
print("perspective norms:", np.round(np.linalg.norm(G_m.data, axis=-1), 6).tolist())

G_v = l2_normalize(Tensor(rng.normal(size=(B, D))))
G_t = l2_normalize(Tensor(rng.normal(size=(B, D))))

# A caption is scored against an image by its best-matching perspective.
S_max = s_max_matrix(G_m, G_t)
print("S_max:\n", np.round(S_max.data, 3))

for lam in ((0.0, 0.0), (0.5, 0.0), (0.0, 0.5), (0.5, 0.5)):
    parts = total_loss(BatchFeatures(G_v, G_t, G_m), LossConfig(lambda_mpc=lam[0], lambda_mpt=lam[1]))
    f = parts.as_floats()
    print(f"lambda_mpc={lam[0]} lambda_mpt={lam[1]}: total {f['total']:.4f} = base {f['base']:.4f}"
          f" + {lam[0]} * {f['mpc']:.4f} + {lam[1]} * {f['mpt']:.4f}")

# A perspective that never wins for any caption leaves S_max untouched;
# a repeated perspective is the simplest such case.
repeated = np.concatenate([G_m.data, G_m.data[:, :1]], axis=1)
print("repeating a perspective leaves S_max bitwise equal:",
      np.array_equal(s_max_matrix(repeated, G_t).data, S_max.data))
