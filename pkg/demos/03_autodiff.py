"""The reverse-mode tape underneath training, checked against finite differences.

Run: python3 demos/03_autodiff.py
"""
import numpy as np

from mlae import numerics as nx
from mlae.numerics import GradientTape, Matrix, Parameter

rng = np.random.default_rng(1)
x = Matrix(rng.normal(size=(6, 5)))
W = Parameter(rng.normal(size=(5, 3)))
frozen = Matrix(rng.normal(size=(3, 3)))

# Only watched Parameters get gradients; frozen Matrix values never do.
with GradientTape() as tape:
    tape.watch(W)
    logits = nx.matmul(nx.gelu(nx.matmul(x, W)), frozen)
    loss = nx.cross_entropy(logits, [0, 1, 2, 0, 1, 2])
grads = nx.backward(loss, tape)
print("loss:", loss.item())
print("dL/dW:\n", grads[W].data.round(4))

fn = lambda W: nx.cross_entropy(nx.matmul(nx.gelu(nx.matmul(x, W)), frozen), [0, 1, 2, 0, 1, 2])
print("max relative error vs central differences:", nx.finite_diff_check(fn, [W]))

with nx.count_ops() as ops:
    fn(W)
print("matmuls in one evaluation:", ops["matmul"])
