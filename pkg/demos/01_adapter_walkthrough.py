"""A tour of the gated global-attention adapter.

Run with ``python demos/01_adapter_walkthrough.py``.
"""

import numpy as np

from perspective_retrieval import Tensor, count_params, g2a_forward, init_adapter

rng = np.random.default_rng(0)
D, d = 32, 4
tokens = Tensor(rng.normal(size=(8, D)))  # one image: 8 tokens of width 32

# A fresh adapter has a zero up-projection, so inserting it into a frozen
# encoder changes nothing until training moves those weights.
adapter = init_adapter(D, d, heads=2, rng=rng)
out = g2a_forward(tokens, adapter)
print("fresh adapter is the identity:", np.array_equal(out.data, tokens.data))

# Give the up-projection some weight to see the residual branch at work.
adapter.W3.data = rng.normal(scale=0.1, size=adapter.W3.shape)
for attn in (False, True):
    for gate in (False, True):
        delta = g2a_forward(tokens, adapter, attn_on=attn, gate_on=gate).data - tokens.data
        print(f"attn={attn!s:5} gate={gate!s:5}  params={count_params(adapter, attn, gate):4d}  "
              f"|residual|={np.linalg.norm(delta):.4f}")

# The gate is a single learnable scalar blending the attended and the
# plain bottleneck features; it costs exactly one parameter.
print("gate cost:", count_params(adapter, True, True) - count_params(adapter, True, False), "parameter")

# Attention mixes tokens globally, so permuting the input tokens permutes
# the output rows and nothing else.
perm = rng.permutation(8)
a = g2a_forward(tokens, adapter).data[perm]
b = g2a_forward(Tensor(tokens.data[perm]), adapter).data
print("permutation equivariant:", np.allclose(a, b, atol=1e-12))
