"""
Contrastive losses by hand
==========================

Works through InfoNCE and the prototype NCE on vectors small enough to check
by hand, then confirms the analytic gradient against finite differences.
"""

import math

import numpy as np

from midvcl.losses import info_nce, proto_nce, sample_prototype_negatives

# %%
# One anchor, its positive is itself, one orthogonal negative.
# With tau = 1 the logits are 1 and 0, so the loss is -log(e / (e + 1)).
q = np.array([[1.0, 0.0]])
n = np.array([[0.0, 1.0]])
loss, grad = info_nce(q, q, n, tau=1.0)
print(f"InfoNCE           {loss:.5f}   by hand {-math.log(math.e / (math.e + 1)):.5f}")

# %%
# Lowering the temperature sharpens the softmax; when the positive wins,
# the loss drops.
for tau in (1.0, 0.5, 0.2, 0.07):
    print(f"  tau={tau:<5} loss={info_nce(q, q, n, tau)[0]:.6f}")

# %%
# Prototype NCE: three orthonormal centroids, the anchor sits on centroid 0
# and the other two are negatives. Logits are 1, 0, 0.
cents = np.eye(3)
loss, _ = proto_nce(cents[:1], cents, np.ones(3), np.array([0]), np.array([[1, 2]]))
print(f"prototype NCE     {loss:.5f}   by hand {math.log(1 + 2 / math.e):.5f}")

# %%
# A small phi (a tight cluster) divides the logits by less than one, which
# sharpens the softmax. Anchors that are far from their prototype pay more.
rng = np.random.default_rng(0)


def unit(n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


v = unit(4, 8)
cents = unit(6, 8)
pos = np.array([0, 1, 2, 3])
neg = sample_prototype_negatives(pos, 6, 3, seed=0)
for name, phi in [("uniform", np.ones(6)), ("tight", np.full(6, 0.1))]:
    print(f"  phi {name:<8} loss={proto_nce(v, cents, phi, pos, neg)[0]:.4f}")

# %%
# Gradient check: central differences on the query matrix.
p = unit(4, 8)
negs = unit(16, 8)
_, g = info_nce(v, p, negs, 0.2)
fd = np.zeros_like(v)
h = 1e-6
for idx in np.ndindex(v.shape):
    up, down = v.copy(), v.copy()
    up[idx] += h
    down[idx] -= h
    fd[idx] = (info_nce(up, p, negs, 0.2)[0] - info_nce(down, p, negs, 0.2)[0]) / (2 * h)
print(f"max |analytic - numeric| = {np.max(np.abs(g - fd)):.2e}")
