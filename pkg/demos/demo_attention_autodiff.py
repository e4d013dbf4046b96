"""Poke at the numerics core: attention weights and gradient checking.

Run: python3 demos/demo_attention_autodiff.py
"""

import numpy as np

from mlmkit import autodiff as ad
from mlmkit.autodiff import Tensor
from mlmkit.model import scaled_dot_attention

# --- attention weights are a row-stochastic matrix --------------------------
rng = np.random.default_rng(0)
q = Tensor(rng.normal(size=(4, 8)).astype(np.float32))
k = Tensor(rng.normal(size=(4, 8)).astype(np.float32))
v = Tensor(rng.normal(size=(4, 8)).astype(np.float32))

context, weights = scaled_dot_attention(q, k, v)
print("attention weights (each row sums to 1):")
print(np.round(weights.data, 3))
print("row sums:", weights.data.sum(axis=-1))

# Padding a key position removes it from every row's distribution.
pad = np.array([False, False, False, True])
_, masked = scaled_dot_attention(q, k, v, pad_mask=pad)
print("\nwith the last key padded:")
print(np.round(masked.data, 3))

# --- reverse-mode gradients, verified against finite differences ------------
x = Tensor(rng.normal(size=(3, 5)).astype(np.float64), requires_grad=True, dtype=np.float64)
w = Tensor(rng.normal(size=(3, 5)).astype(np.float64), dtype=np.float64)

def loss_fn(t):
    return ad.tsum(ad.mul(ad.softmax_rows(t), w))

ad.backward(loss_fn(x))
print("\nanalytic gradient of a softmax loss:")
print(np.round(x.grad, 4))

report = ad.finite_diff_check(loss_fn, x, h=1e-4, tolerance=1e-6)
print(f"finite-difference check: max relative error {report.max_rel_error:.2e} "
      f"over {report.num_checked} coordinates -> {'PASS' if report.passed else 'FAIL'}")

# A deliberately wrong gradient is caught immediately.
wrong = x.grad * 1.1
report = ad.finite_diff_check(loss_fn, x, tolerance=1e-6, analytic=wrong)
print(f"negative control (gradient scaled by 1.1): flagged {len(report.failures)} "
      f"of {report.num_checked} coordinates")
