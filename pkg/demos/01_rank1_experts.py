"""Splitting a LoRA update into rank-1 experts, masking them, and folding them back.

Run: python3 demos/01_rank1_experts.py
"""
import numpy as np

from mlae import MaskSample, assemble_delta, decompose, delta_rank_bound, forward, merge
from mlae.numerics import Matrix

rng = np.random.default_rng(0)

# A bank of 8 rank-1 experts on a 16 -> 32 projection. Every b starts at
# zero, so the update is exactly zero until training moves it.
bank = decompose(16, 32, r=8, coeff_init=1.0, seed=0)
print("initial |delta| =", np.abs(assemble_delta(bank, bank.full_mask()).data).max())

# Pretend training happened.
for e in bank.experts:
    e.b.assign(rng.normal(size=e.b.shape))

# With every expert on and unit coefficients the bank is ordinary LoRA: B @ A.
B, A = bank.lora_matrices()
full = assemble_delta(bank, bank.full_mask()).data
print("max |sum of experts - B A| =", np.abs(full - B @ A).max())

# A training-time mask keeps 3 experts and rescales them by 1/(1-p).
mask = MaskSample(layer_id=0, bits=(1, 0, 0, 1, 0, 1, 0, 0), scale=2.0)
delta = assemble_delta(bank, mask).data
s = np.linalg.svd(delta, compute_uv=False)
print("active experts:", mask.popcount, " numerical rank:", int((s > 1e-9 * s[0]).sum()),
      " bound:", delta_rank_bound(bank, mask))

# Inference uses every expert unscaled, which is exactly what merge folds in.
x = Matrix(rng.normal(size=(4, 16)))
w0 = Matrix(rng.normal(size=(16, 32)))
w_merged = merge(w0, bank)
gap = np.abs((x @ w_merged).data - forward(x, w0, bank, bank.full_mask()).data).max()
print("merged vs adapter forward:", gap)
