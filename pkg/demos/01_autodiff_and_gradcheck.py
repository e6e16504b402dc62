# coding: utf-8

# # Reverse-mode autodiff on numpy arrays
#
# Every op in `vgpeft.tensor` records its parents and a closure that pushes
# the output gradient back to them. `backward` walks the graph in reverse
# topological order. Here we build a tiny expression, read off its gradient,
# and compare against central differences.

# %%

import numpy as np

from vgpeft import tensor as T
from vgpeft.gradcheck import finite_diff_check
from vgpeft.tensor import Parameter

rng = np.random.default_rng(0)

# %% [markdown]
# A single attention-like score: softmax over x W, then a weighted sum.

# %%

x = Parameter(rng.standard_normal((4, 3)))
w = Parameter(rng.standard_normal((3, 5)))
scores = T.softmax(T.matmul(x, w), axis=-1)
out = T.sum(T.mul(scores, np.arange(5.0)))
T.backward(out)
print("value      ", out.item())
print("dL/dx row 0", x.grad[0])

# %% [markdown]
# The analytic gradient should agree with (f(p + h) - f(p - h)) / 2h to
# roughly h^2. `finite_diff_check` returns the worst relative error over a
# sample of coordinates.

# %%

f = lambda: T.sum(T.mul(T.softmax(T.matmul(x, w), axis=-1), np.arange(5.0)))  # noqa: E731
print("max relative error", finite_diff_check(f, [x, w], h=1e-5))

# %% [markdown]
# LayerNorm has a less obvious backward pass, so it is worth checking too.

# %%

g, b = Parameter(np.ones(3)), Parameter(np.zeros(3), kind="bias")
mask = rng.standard_normal((4, 3))
f = lambda: T.sum(T.mul(T.layer_norm(x, g, b), mask))  # noqa: E731
print("layer norm error  ", finite_diff_check(f, [x, g, b], h=1e-5))
