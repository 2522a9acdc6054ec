# coding: utf-8

# # Factorized 3D convolution
#
# A 3D kernel that is the outer product of a 2D spatial kernel and a 1D
# temporal kernel can be applied in two passes: a 2D convolution on every
# frame, then a 1D convolution along time. This notebook checks that the two
# routes agree and counts the parameters each one needs.

# In[1]:

import numpy as np

from fstcn.factorized import (
    FactorizedKernel,
    best_rank1_fit,
    conv3d,
    conv_factorized,
    equivalence_trials,
    kron_expand,
    param_savings,
)

rng = np.random.default_rng(0)


# ## One volume, two routes
#
# `kron_expand` builds the full `(n_x, n_y, n_t)` kernel. `conv3d` applies it
# directly; `conv_factorized` never forms it.

# In[2]:

volume = rng.standard_normal((16, 16, 8))
kernel = FactorizedKernel(rng.standard_normal((3, 3)), rng.standard_normal(5))

direct = conv3d(volume, kron_expand(kernel))
separable = conv_factorized(volume, kernel)
print("output shape", direct.shape)
print("max |difference|", np.max(np.abs(direct - separable)))


# ## Many random shapes
#
# The harness draws volume and kernel extents at random and reports the
# largest disagreement per trial.

# In[3]:

records = list(equivalence_trials(100, seed=1))
worst = max(r.max_abs_error for r in records)
print(f"{len(records)} trials, worst error {worst:.2e}")
print("first trial:", records[0].to_dict())


# ## Parameter counts
#
# The direct kernel needs `n_x * n_y * n_t` weights, the factorized one
# `n_x * n_y + n_t`.

# In[4]:

for shape in [(3, 3, 3), (3, 3, 5), (5, 5, 5), (7, 7, 9)]:
    direct_count, factored_count = param_savings(*shape)
    print(f"{shape}: {direct_count:4d} vs {factored_count:3d}  ({direct_count / factored_count:.1f}x)")


# ## How far is a random kernel from separable?
#
# A generic 3D kernel is not an outer product. `best_rank1_fit` finds the
# closest one; its residual is zero only for separable kernels.

# In[5]:

separable_kernel = kron_expand(kernel)
random_kernel = rng.standard_normal((3, 3, 5))
for name, k in [("separable", separable_kernel), ("random", random_kernel)]:
    _, residual = best_rank1_fit(k)
    print(f"{name:9s} residual / norm = {residual / np.linalg.norm(k):.3f}")
