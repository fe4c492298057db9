"""The reverse-mode engine underneath everything, and the finite-difference
harness that keeps it honest.

Run from the repository root:  python3 demos/04_autodiff_and_gradcheck.py
"""

import numpy as np

from evseq.autodiff import Tensor, matmul, tanh, tsum
from evseq.training import gradcheck_suite

# Tensors record the graph as you compute; backward() fills .grad.
w = Tensor(np.array([[0.5, -1.0], [2.0, 0.0]]), requires_grad=True)
x = Tensor(np.array([[1.0], [3.0]]))
y = tsum(tanh(matmul(w, x)))
y.backward()
print("f(W) = sum(tanh(W x))")
print("analytic dW:\n", w.grad)

# The same derivative by central differences.
def f(mat):
    return float(np.sum(np.tanh(mat @ x.data)))

num = np.zeros_like(w.data)
for i in range(2):
    for j in range(2):
        h = 1e-6
        up, down = w.data.copy(), w.data.copy()
        up[i, j] += h
        down[i, j] -= h
        num[i, j] = (f(up) - f(down)) / (2 * h)
print("numeric dW:\n", num)
print(f"max abs diff: {np.abs(w.grad - num).max():.2e}")

# finite_difference_check does this for every parameter of the full model
# under one training objective; gradcheck_suite sweeps random tiny instances
# of all four objectives. The CLI exposes the same thing as `evseq gradcheck`.
worst, failures = gradcheck_suite(n_trials=1, methods=("hybrid",))
print(f"\none hybrid instance: worst relative error {worst:.2e}, "
      f"{len(failures)} entries over tolerance")

worst, failures = gradcheck_suite(n_trials=2)
print(f"suite (2 trials x 4 methods): worst {worst:.2e}, "
      f"{len(failures)} failures")
