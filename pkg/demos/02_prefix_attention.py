"""Type prefixes add n_t always-visible keys to every attention head.

Run: python3 demos/02_prefix_attention.py
"""

import numpy as np

from moalign.autograd import MASK_FILL, Tensor
from moalign.encoder import prefix_mh_attn

rng = np.random.default_rng(0)
d, heads, n_kv, n_types = 8, 2, 4, 3
params = {k: Tensor(rng.normal(size=(d, d)) / np.sqrt(d)) for k in ("wq", "wk", "wv", "wo")}
queries = Tensor(rng.normal(size=(1, 2, d)))  # entity and CLS states
bank = Tensor(rng.normal(size=(1, n_kv, d)))
prefix = (Tensor(rng.normal(size=(n_types, d))), Tensor(rng.normal(size=(n_types, d))))

visible = np.zeros((1, 2, n_kv))
out, w = prefix_mh_attn(queries, bank, visible, params, heads, prefix=prefix, return_weights=True)
print(f"{n_kv} bank tokens + {n_types} type prefixes -> weights shape {w.shape}")
print("attention of head 0, entity row:", np.round(w.data[0, 0, 0], 3))

# Mask every bank token: only the prefixes remain and the output stays finite.
blocked = np.full((1, 2, n_kv), MASK_FILL)
out, w = prefix_mh_attn(queries, bank, blocked, params, heads, prefix=prefix, return_weights=True)
print("\nall bank tokens masked:")
print("head 0, entity row:", np.round(w.data[0, 0, 0], 3))
print("output finite:", bool(np.isfinite(out.data).all()))
