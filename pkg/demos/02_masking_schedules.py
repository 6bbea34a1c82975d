"""Fixed, stochastic and mixed masking schedules over 12 layers.

Run: python3 demos/02_masking_schedules.py
"""
import numpy as np

from mlae import MaskSchedule, fixed_pattern, sample_mask
from mlae.numerics import stream

print("fixed patterns (experts per layer, 96 in total):")
for name in ("incremental", "decremental", "hourglass", "protruding", "random", "uniform"):
    counts = fixed_pattern(name, seed=3)
    print(f"  {name:12s} {counts} sum={sum(counts)}")

print("\nstochastic patterns (drop probability per layer, 8 experts each):")
for name in ("incremental", "decremental", "hourglass", "protruding"):
    sched = MaskSchedule.stochastic(name, r=8)
    expected = [round(sched.expected_active(l), 1) for l in range(12)]
    print(f"  {name:12s} probs={list(sched.probs)}\n  {'':12s} expected survivors={expected}")

# Uniform p=0.5: each expert survives half the time, survivors are scaled by 2.
sched = MaskSchedule.stochastic("uniform", r=8, p=0.5)
rng = stream(0, "demo")
draws = np.array([sample_mask(sched, 0, rng).bits for _ in range(5000)])
print("\nuniform p=0.5 keep frequency per expert:", draws.mean(axis=0).round(3))
print("train scale:", sample_mask(sched, 0, rng).scale, " inference mask:", sample_mask(sched, 0, mode="inference"))

# Mixed: the hourglass allocation permanently removes trailing slots, and the
# remaining experts are dropped stochastically on top.
mixed = MaskSchedule.mixed("hourglass", p=0.5)
print("\nmixed hourglass, layer 4, three steps:")
for step in range(3):
    print("  ", sample_mask(mixed, 4, stream(0, "mask", step)).bits)
